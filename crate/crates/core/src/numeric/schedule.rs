/// Linear warmup to `base_lr`, then cosine decay to `min_mult · base_lr` at
/// `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64, min_mult: f64) -> f64 {
    let step = step.min(total_steps);
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base_lr * (min_mult + (1.0 - min_mult) * cos)
}

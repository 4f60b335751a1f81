//! Training and evaluation CSV logs.

use std::path::Path;

use crate::{Error, Result};

pub const TRAIN_HEADER: &str = "step,lr,ce_loss,balance_loss,z_loss,grad_norm";
pub const EVAL_HEADER: &str = "step,val_ppl";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRow {
    pub step: usize,
    pub lr: f64,
    pub ce_loss: f64,
    pub balance_loss: f64,
    pub z_loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub step: usize,
    pub val_ppl: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRow>,
    pub evals: Vec<EvalRow>,
}

impl StepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.lr, self.ce_loss, self.balance_loss, self.z_loss, self.grad_norm
        )
    }
}

impl TrainLog {
    pub fn train_csv(&self) -> String {
        let mut s = String::from(TRAIN_HEADER);
        s.push('\n');
        for r in &self.steps {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    pub fn eval_csv(&self) -> String {
        let mut s = String::from(EVAL_HEADER);
        s.push('\n');
        for r in &self.evals {
            s.push_str(&format!("{},{}\n", r.step, r.val_ppl));
        }
        s
    }

    pub fn write(&self, train_path: &Path, eval_path: &Path) -> Result<()> {
        std::fs::write(train_path, self.train_csv()).map_err(|e| Error::io(train_path, e))?;
        std::fs::write(eval_path, self.eval_csv()).map_err(|e| Error::io(eval_path, e))
    }

    pub fn read(train_path: &Path, eval_path: &Path) -> Result<TrainLog> {
        let steps = read_rows(train_path, TRAIN_HEADER, |f| StepRow {
            step: f[0] as usize,
            lr: f[1],
            ce_loss: f[2],
            balance_loss: f[3],
            z_loss: f[4],
            grad_norm: f[5],
        })?;
        let evals = read_rows(eval_path, EVAL_HEADER, |f| EvalRow { step: f[0] as usize, val_ppl: f[1] })?;
        Ok(TrainLog { steps, evals })
    }

    /// Mean of `f` over rows whose step lies in `lo..=hi`.
    pub fn mean_over(&self, lo: usize, hi: usize, f: impl Fn(&StepRow) -> f64) -> Option<f64> {
        let v: Vec<f64> = self.steps.iter().filter(|r| r.step >= lo && r.step <= hi).map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn read_rows<T>(path: &Path, header: &str, build: impl Fn(&[f64]) -> T) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::Data(format!("{} does not start with `{header}`", path.display())));
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<f64> = l
                .split(',')
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 2)))?;
            if f.len() != width {
                return Err(Error::Data(format!("{}:{}: expected {width} fields", path.display(), i + 2)));
            }
            Ok(build(&f))
        })
        .collect()
}

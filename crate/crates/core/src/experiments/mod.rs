//! Experiment orchestration: CLI, sweeps, recipes and plots.

pub mod analysis;
pub mod cli;
pub mod plot;
pub mod recipes;
pub mod sweep;

pub use plot::{emit_plot, heatmap_svg, line_svg, Heatmap, Plot, Series};
pub use recipes::{ensure_run, run_recipe, RecipeContext, RECIPES};
pub use sweep::{run_sweep, Axis, Launcher, SweepSpec};

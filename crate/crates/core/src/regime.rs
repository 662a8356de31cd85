//! What each task regime hides and where evidence may come from.
//!
//! Short and long hold out the final slots of the user's own tensor;
//! evidence is drawn from the remaining slots. Cold hides the whole
//! tensor; evidence is drawn from the most similar peer's tensor.

use crate::config::{ModelConfig, Task};
use crate::tensor::BehaviorTensor;

/// First held-out slot.
pub fn cutoff(task: Task, cfg: &ModelConfig) -> usize {
    match cfg.held_out(task) {
        Some(h) => cfg.dims.time - h,
        None => 0,
    }
}

/// The part of `x` the encoder may see: held-out slots zeroed.
pub fn visible(x: &BehaviorTensor, task: Task, cfg: &ModelConfig) -> BehaviorTensor {
    x.truncate_time(cutoff(task, cfg))
}

/// Coordinates evidence may be drawn from, in linear `(t, h, w)` order.
pub fn candidates(task: Task, cfg: &ModelConfig) -> Vec<usize> {
    let g = cfg.dims.grid();
    match task {
        Task::Cold => (0..g.coords()).collect(),
        _ => (0..cutoff(task, cfg) * g.cells()).collect(),
    }
}

/// Coordinates scored by the evaluation.
pub fn held_out(task: Task, cfg: &ModelConfig) -> Vec<bool> {
    let g = cfg.dims.grid();
    let first = cutoff(task, cfg) * g.cells();
    (0..g.coords()).map(|i| i >= first).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn desk_regimes() {
        let cfg = ModelConfig::default();
        assert_eq!(candidates(Task::Short, &cfg).len(), 28 * 64);
        assert_eq!(candidates(Task::Long, &cfg).len(), 16 * 64);
        assert_eq!(candidates(Task::Cold, &cfg).len(), 2048);
        assert_eq!(held_out(Task::Short, &cfg).iter().filter(|&&b| b).count(), 4 * 64);
        assert!(held_out(Task::Cold, &cfg).iter().all(|&b| b));
        let x = BehaviorTensor::from_values(Dims::desk(), vec![1.0; Dims::desk().len()]).unwrap();
        let v = visible(&x, Task::Long, &cfg);
        assert_eq!(v.get(2, 15, 3, 3), 1.0);
        assert_eq!(v.get(2, 16, 3, 3), 0.0);
        assert!(visible(&x, Task::Cold, &cfg).values().iter().all(|&a| a == 0.0));
    }
}

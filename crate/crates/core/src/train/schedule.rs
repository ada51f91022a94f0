use serde::{Deserialize, Serialize};

use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: Float,
    /// Consecutive non-improving epochs that trigger a reduction.
    pub patience: usize,
    /// Smallest gain over the best earlier score that counts as improvement.
    pub min_delta: Float,
    pub min_lr: Float,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.4,
            patience: 5,
            min_delta: 1e-4,
            min_lr: 1e-7,
        }
    }
}

/// Number of trailing epochs in `history` that failed to beat the best
/// score by `min_delta`. The best score only moves on an improvement, so
/// slow creep below `min_delta` per epoch still counts as a plateau. The
/// first epoch always counts as an improvement.
pub fn epochs_without_improvement(history: &[Float], min_delta: Float) -> usize {
    let mut best = Float::NEG_INFINITY;
    let mut stale = 0;
    for &s in history {
        if s >= best + min_delta {
            best = s;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale
}

/// Learning rate for the next epoch given the validation scores (higher is
/// better) recorded since the last reduction.
pub fn lr_schedule(history: &[Float], current_lr: Float, cfg: &PlateauConfig) -> Float {
    if cfg.patience > 0 && epochs_without_improvement(history, cfg.min_delta) >= cfg.patience {
        (current_lr * cfg.factor).max(cfg.min_lr).min(current_lr)
    } else {
        current_lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improving_history_keeps_lr() {
        let h = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
        assert_eq!(lr_schedule(&h, 1e-3, &PlateauConfig::default()), 1e-3);
    }

    #[test]
    fn five_flat_epochs_reduce() {
        let cfg = PlateauConfig::default();
        let h = [0.5; 6];
        assert_eq!(epochs_without_improvement(&h, cfg.min_delta), 5);
        assert!((lr_schedule(&h, 1e-3, &cfg) - 4e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(&h[..5], 1e-3, &cfg), 1e-3);
    }

    #[test]
    fn tiny_gains_do_not_count() {
        let h = [0.5, 0.50005, 0.50009, 0.5, 0.4];
        assert_eq!(epochs_without_improvement(&h, 1e-4), 4);
        assert_eq!(epochs_without_improvement(&[0.5, 0.4, 0.6, 0.6], 1e-4), 1);
    }

    #[test]
    fn floor() {
        let cfg = PlateauConfig::default();
        let mut lr = 1e-3;
        for _ in 0..100 {
            lr = lr_schedule(&[0.0; 6], lr, &cfg);
            assert!(lr >= 1e-7);
        }
        assert_eq!(lr, 1e-7);
    }
}

use std::fmt::Write as _;

use super::{heatmap_localization, train, RunLog, TrainConfig};
use crate::data::Dataset;
use crate::error::Result;
use crate::metrics::MetricConfig;
use crate::tensor::Float;
use crate::{Model, ModelConfig};

/// Outcome of training one model variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeArm {
    pub num_context: usize,
    pub width_multiplier: f64,
    pub params: usize,
    pub epochs: usize,
    pub val_pck: Float,
    pub best_val_pck: Float,
    /// Fraction of visible joints whose detection-map peak lies within 2 cells.
    pub heatmap_hits: Float,
}

impl ProbeArm {
    /// Trains `model_cfg` as given.
    pub fn run(
        model_cfg: &ModelConfig,
        train_cfg: &TrainConfig,
        train_set: &Dataset,
        val: &Dataset,
        metric: &MetricConfig,
    ) -> Result<Self> {
        let (ckpt, log) = train(model_cfg, train_cfg, train_set, val, metric)?;
        Self::from_run(&Model::from_checkpoint(&ckpt)?, &log, val)
    }

    /// Summarizes a finished run.
    pub fn from_run(model: &Model, log: &RunLog, val: &Dataset) -> Result<Self> {
        Ok(ProbeArm {
            num_context: model.config().num_context,
            width_multiplier: model.config().width_multiplier,
            params: model.param_count(),
            epochs: log.entries.len(),
            val_pck: log.final_val_pck().unwrap_or(0.0),
            best_val_pck: log.best_val_pck().unwrap_or(0.0),
            heatmap_hits: heatmap_localization(model, val, 2.0)?,
        })
    }
}

/// Side-by-side comparison of a model with context maps and one without.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextProbe {
    pub with_context: ProbeArm,
    pub without_context: ProbeArm,
}

impl ContextProbe {
    /// Final validation PCK with context minus without, in percentage points.
    pub fn delta(&self) -> Float {
        100.0 * (self.with_context.val_pck - self.without_context.val_pck)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("num_context,width_multiplier,params,epochs,val_pck,best_val_pck,heatmap_within_2_cells\n");
        for arm in [&self.with_context, &self.without_context] {
            let _ = writeln!(
                out,
                "{},{:.4},{},{},{:.1},{:.1},{:.1}",
                arm.num_context,
                arm.width_multiplier,
                arm.params,
                arm.epochs,
                100.0 * arm.val_pck,
                100.0 * arm.best_val_pck,
                100.0 * arm.heatmap_hits
            );
        }
        let _ = writeln!(out, "delta,,,,{:.1},,", self.delta());
        out
    }
}

/// The configuration without context maps whose parameter count is
/// closest to `cfg`'s, found by widening the network.
pub fn matched_without_context(cfg: &ModelConfig) -> ModelConfig {
    let target = cfg.expected_param_count() as i64;
    (0..=100)
        .map(|i| ModelConfig {
            num_context: 0,
            width_multiplier: cfg.width_multiplier * (1.0 + i as f64 / 100.0),
            ..cfg.clone()
        })
        .filter(|c| c.validate().is_ok())
        .min_by_key(|c| (c.expected_param_count() as i64 - target).abs())
        .expect("the unwidened configuration is valid")
}

/// Trains the configured model and a context-free model of matched parameter
/// count under identical seeds and data, and tabulates the validation PCK.
pub fn context_probe(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &Dataset,
    val: &Dataset,
    metric: &MetricConfig,
) -> Result<ContextProbe> {
    let with_cfg = ModelConfig {
        num_context: model_cfg.num_context.max(1),
        ..model_cfg.clone()
    };
    let with_context = ProbeArm::run(&with_cfg, train_cfg, train_set, val, metric)?;
    let without_context = ProbeArm::run(&matched_without_context(&with_cfg), train_cfg, train_set, val, metric)?;
    Ok(ContextProbe {
        with_context,
        without_context,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_is_matched_more_closely_than_dropping_maps() {
        let cfg = ModelConfig::desk();
        let matched = matched_without_context(&cfg);
        assert_eq!(matched.num_context, 0);
        let gap = |c: &ModelConfig| (c.expected_param_count() as i64 - cfg.expected_param_count() as i64).abs();
        let naive = ModelConfig { num_context: 0, ..cfg.clone() };
        assert!(gap(&matched) < gap(&naive));
        assert!(gap(&matched) * 50 < cfg.expected_param_count() as i64);
    }
}

//! PCK, PCKh and PCP.
//!
//! Poses are compared in pixel space: normalized coordinates are scaled by
//! the evaluation image size before distances are taken. Ground-truth
//! joints that are not visible are skipped.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Float;
use crate::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// Threshold relative to the torso reference length.
    Pck,
    /// Threshold relative to the head segment length.
    Pckh,
    /// Both limb endpoints within a fraction of the limb length.
    Pcp,
}

/// A limb between two joints. Limbs sharing a `name` are reported together.
#[derive(Clone, Debug, PartialEq)]
pub struct Limb {
    pub name: String,
    pub a: usize,
    pub b: usize,
}

impl Limb {
    pub fn new(name: &str, a: usize, b: usize) -> Self {
        Limb {
            name: name.to_string(),
            a,
            b,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricConfig {
    pub metric: Metric,
    pub threshold: Float,
    /// Joint pair whose ground-truth distance is the reference length
    /// (torso diagonal for PCK, head segment for PCKh). Unused by PCP.
    pub normalizer: (usize, usize),
    /// Column label of every joint; joints sharing a label are pooled.
    pub joint_names: Vec<String>,
    pub skeleton: Vec<Limb>,
    /// Width and height in pixels of the frame the normalized coordinates refer to.
    pub image_size: (Float, Float),
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        let nj = self.joint_names.len();
        if !(self.threshold > 0.0) {
            return Err(Error::Config(format!("threshold {} must be positive", self.threshold)));
        }
        if self.metric != Metric::Pcp && (self.normalizer.0 >= nj || self.normalizer.1 >= nj) {
            return Err(Error::Config(format!("normalizer {:?} outside {nj} joints", self.normalizer)));
        }
        if let Some(l) = self.skeleton.iter().find(|l| l.a >= nj || l.b >= nj) {
            return Err(Error::Config(format!("limb {} references a missing joint", l.name)));
        }
        Ok(())
    }
}

/// One row of scores, in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub columns: Vec<String>,
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
    /// Limbs skipped because their ground-truth length is zero (PCP only).
    pub degenerate: usize,
}

impl MetricReport {
    fn new(columns: Vec<String>) -> Self {
        let n = columns.len();
        MetricReport {
            columns,
            correct: vec![0; n],
            total: vec![0; n],
            degenerate: 0,
        }
    }

    /// Percentage per column; `None` when a column had nothing to score.
    pub fn scores(&self) -> Vec<Option<Float>> {
        self.correct
            .iter()
            .zip(&self.total)
            .map(|(&c, &t)| (t > 0).then(|| 100.0 * c as Float / t as Float))
            .collect()
    }

    /// Pooled percentage over every scored joint or limb.
    pub fn mean(&self) -> Option<Float> {
        let (c, t): (usize, usize) = (self.correct.iter().sum(), self.total.iter().sum());
        (t > 0).then(|| 100.0 * c as Float / t as Float)
    }

    /// Fraction in `[0, 1]` of every scored joint or limb.
    pub fn fraction(&self) -> Float {
        self.mean().unwrap_or(0.0) / 100.0
    }

    /// Header of column names plus `Mean`, then one row of percentages.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<Float>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.1}"));
        let mut out = String::new();
        let _ = writeln!(out, "{},Mean", self.columns.join(","));
        let row: Vec<String> = self.scores().into_iter().map(fmt).collect();
        let _ = writeln!(out, "{},{}", row.join(","), fmt(self.mean()));
        out
    }
}

/// Distinct labels in order of first appearance and the column of each item.
fn group_columns<'a>(names: impl Iterator<Item = &'a str>) -> (Vec<String>, Vec<usize>) {
    let mut columns: Vec<String> = Vec::new();
    let mut index = Vec::new();
    for name in names {
        let col = match columns.iter().position(|c| c == name) {
            Some(c) => c,
            None => {
                columns.push(name.to_string());
                columns.len() - 1
            }
        };
        index.push(col);
    }
    (columns, index)
}

fn pixel_distance(a: [Float; 2], b: [Float; 2], (w, h): (Float, Float)) -> Float {
    ((a[0] - b[0]) * w).hypot((a[1] - b[1]) * h)
}

fn check_sets(preds: &[Pose], truths: &[Pose], joints: usize) -> Result<()> {
    if preds.len() != truths.len() {
        return Err(Error::Config(format!("{} predictions for {} ground truths", preds.len(), truths.len())));
    }
    for (p, t) in preds.iter().zip(truths) {
        for n in [p.num_joints(), t.num_joints(), t.visibility.len()] {
            if n != joints {
                return Err(Error::JointCount { expected: joints, got: n });
            }
        }
    }
    Ok(())
}

/// PCK or PCKh: a visible joint is correct when its pixel error is at most
/// `threshold × reference length`.
pub fn pck(preds: &[Pose], truths: &[Pose], cfg: &MetricConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let nj = cfg.joint_names.len();
    check_sets(preds, truths, nj)?;
    let (columns, col_of) = group_columns(cfg.joint_names.iter().map(String::as_str));
    let mut report = MetricReport::new(columns);
    let (ra, rb) = cfg.normalizer;
    for (p, t) in preds.iter().zip(truths) {
        if !(t.visibility[ra] && t.visibility[rb]) {
            return Err(Error::MissingNormalizer(ra, rb));
        }
        let reference = pixel_distance(t.joints[ra], t.joints[rb], cfg.image_size);
        for j in 0..nj {
            if !t.visibility[j] {
                continue;
            }
            let col = col_of[j];
            report.total[col] += 1;
            if pixel_distance(p.joints[j], t.joints[j], cfg.image_size) <= cfg.threshold * reference {
                report.correct[col] += 1;
            }
        }
    }
    Ok(report)
}

/// PCP: a limb is correct when both endpoints lie within
/// `threshold × ground-truth limb length` of their true positions.
pub fn pcp(preds: &[Pose], truths: &[Pose], cfg: &MetricConfig) -> Result<MetricReport> {
    cfg.validate()?;
    if cfg.skeleton.is_empty() {
        return Err(Error::Config("PCP needs a skeleton".into()));
    }
    check_sets(preds, truths, cfg.joint_names.len())?;
    let (columns, col_of) = group_columns(cfg.skeleton.iter().map(|l| l.name.as_str()));
    let mut report = MetricReport::new(columns);
    for (p, t) in preds.iter().zip(truths) {
        for (limb, &col) in cfg.skeleton.iter().zip(&col_of) {
            if !(t.visibility[limb.a] && t.visibility[limb.b]) {
                continue;
            }
            let length = pixel_distance(t.joints[limb.a], t.joints[limb.b], cfg.image_size);
            if length == 0.0 {
                report.degenerate += 1;
                continue;
            }
            report.total[col] += 1;
            let limit = cfg.threshold * length;
            if pixel_distance(p.joints[limb.a], t.joints[limb.a], cfg.image_size) <= limit
                && pixel_distance(p.joints[limb.b], t.joints[limb.b], cfg.image_size) <= limit
            {
                report.correct[col] += 1;
            }
        }
    }
    Ok(report)
}

/// Dispatches on `cfg.metric`.
pub fn evaluate(preds: &[Pose], truths: &[Pose], cfg: &MetricConfig) -> Result<MetricReport> {
    match cfg.metric {
        Metric::Pck | Metric::Pckh => pck(preds, truths, cfg),
        Metric::Pcp => pcp(preds, truths, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(metric: Metric, threshold: Float) -> MetricConfig {
        MetricConfig {
            metric,
            threshold,
            normalizer: (0, 1),
            joint_names: vec!["a".into(), "b".into(), "c".into()],
            skeleton: vec![Limb::new("ab", 0, 1), Limb::new("bc", 1, 2)],
            image_size: (100.0, 100.0),
        }
    }

    fn truth() -> Pose {
        Pose::truth(vec![[0.2, 0.2], [0.2, 0.6], [0.6, 0.6]], vec![true; 3])
    }

    #[test]
    fn perfect_predictions_score_100() {
        let t = vec![truth(); 3];
        let r = pck(&t, &t, &cfg(Metric::Pck, 0.2)).unwrap();
        assert_eq!(r.mean(), Some(100.0));
        assert_eq!(r.to_csv(), "a,b,c,Mean\n100.0,100.0,100.0,100.0\n");
        let r = pcp(&t, &t, &cfg(Metric::Pcp, 0.5)).unwrap();
        assert_eq!(r.mean(), Some(100.0));
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        // Reference length 40 px; threshold 0.25 → 10 px.
        let t = truth();
        let mut p = truth();
        p.joints[2][0] += 0.1;
        let r = pck(&[p.clone()], &[t.clone()], &cfg(Metric::Pck, 0.25)).unwrap();
        assert_eq!(r.correct, vec![1, 1, 1]);
        p.joints[2][0] = 0.6 + 0.1001;
        let r = pck(&[p], &[t], &cfg(Metric::Pck, 0.25)).unwrap();
        assert_eq!(r.correct, vec![1, 1, 0]);
    }

    #[test]
    fn pcp_endpoint_displacement() {
        let t = truth();
        let mut p = truth();
        // Limb ab has length 40 px; move joint a by 24 px = 0.6 × length.
        p.joints[0][0] += 0.24;
        let r = pcp(&[p], &[t], &cfg(Metric::Pcp, 0.5)).unwrap();
        assert_eq!(r.correct, vec![0, 1]);
    }

    #[test]
    fn missing_normalizer() {
        let mut t = truth();
        t.visibility[1] = false;
        let r = pck(&[truth()], &[t], &cfg(Metric::Pck, 0.2));
        assert!(matches!(r, Err(Error::MissingNormalizer(0, 1))));
    }

    #[test]
    fn degenerate_limbs_are_reported() {
        let mut t = truth();
        t.joints[2] = t.joints[1];
        let r = pcp(&[t.clone()], &[t], &cfg(Metric::Pcp, 0.5)).unwrap();
        assert_eq!(r.degenerate, 1);
        assert_eq!(r.total, vec![1, 0]);
        assert!(r.to_csv().contains("n/a"));
    }
}

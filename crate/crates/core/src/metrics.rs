//! Disparity error metrics over masked regions, plus report aggregation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DisparityMap, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// How many times deeper than the truth a prediction must appear to count as vanished.
    pub depth_factor: f64,
    pub d1_abs_threshold: f64,
    pub d1_rel_threshold: f64,
    /// Divide by `n − 1` instead of `n` when aggregating.
    pub sample_std: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { depth_factor: 3.0, d1_abs_threshold: 3.0, d1_rel_threshold: 0.05, sample_std: false }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_factor > 1.0) {
            return Err(Error::Config(format!("depth_factor must exceed 1, got {}", self.depth_factor)));
        }
        if !(self.d1_abs_threshold >= 0.0) || !(self.d1_rel_threshold >= 0.0) {
            return Err(Error::Config("D1 thresholds must be non-negative".into()));
        }
        Ok(())
    }

    /// `max(abs, rel · gt)`
    pub fn bad_threshold(&self, gt: f64) -> f64 {
        self.d1_abs_threshold.max(self.d1_rel_threshold * gt)
    }
}

fn check(pred: &DisparityMap, gt_dims: (usize, usize), mask: &Mask) -> Result<usize> {
    if pred.dims() != gt_dims || mask.dims() != gt_dims {
        return Err(Error::Domain(format!(
            "shape mismatch: pred {:?}, reference {:?}, mask {:?}",
            pred.dims(),
            gt_dims,
            mask.dims()
        )));
    }
    match mask.count() {
        0 => Err(Error::Domain("metric mask is empty".into())),
        n => Ok(n),
    }
}

/// Mean absolute disparity error over the mask.
pub fn epe(pred: &DisparityMap, gt: &DisparityMap, mask: &Mask) -> Result<f64> {
    let n = check(pred, gt.dims(), mask)?;
    let sum: f64 = mask.iter_set().map(|(r, c)| (pred.get(r, c) - gt.get(r, c)).abs()).sum();
    Ok(sum / n as f64)
}

/// Percentage of masked pixels with `|pred − gt| > max(3, 0.05·gt)`.
pub fn d1(pred: &DisparityMap, gt: &DisparityMap, mask: &Mask, config: &MetricConfig) -> Result<f64> {
    let n = check(pred, gt.dims(), mask)?;
    let bad = mask
        .iter_set()
        .filter(|&(r, c)| {
            let g = gt.get(r, c);
            (pred.get(r, c) - g).abs() > config.bad_threshold(g)
        })
        .count();
    Ok(100.0 * bad as f64 / n as f64)
}

/// Percentage of masked pixels that are both wrong w.r.t. the true patch disparity `c`
/// and within `c / k` of zero. The threshold ground truth defaults to `c`.
pub fn attack_d1(
    pred: &DisparityMap,
    c: f64,
    gt_for_threshold: Option<&DisparityMap>,
    mask: &Mask,
    config: &MetricConfig,
) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::Domain(format!("patch disparity must be positive, got {c}")));
    }
    let n = check(pred, pred.dims(), mask)?;
    if let Some(gt) = gt_for_threshold {
        check(pred, gt.dims(), mask)?;
    }
    let near_zero = c / config.depth_factor;
    let hits = mask
        .iter_set()
        .filter(|&(r, col)| {
            let p = pred.get(r, col);
            let g = gt_for_threshold.map_or(c, |gt| gt.get(r, col));
            (p - c).abs() > config.bad_threshold(g) && p.abs() < near_zero
        })
        .count();
    Ok(100.0 * hits as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    /// Percent.
    pub d1: f64,
    /// Pixels.
    pub epe: f64,
    /// Percent.
    pub attack_d1: f64,
}

impl SceneMetrics {
    /// All three metrics for a patch region whose ground truth is the constant `c`.
    pub fn for_patch(scene_id: impl Into<String>, pred: &DisparityMap, c: f64, mask: &Mask, config: &MetricConfig) -> Result<Self> {
        let gt = DisparityMap::filled(pred.height(), pred.width(), c);
        Ok(Self {
            scene_id: scene_id.into(),
            d1: d1(pred, &gt, mask, config)?,
            epe: epe(pred, &gt, mask)?,
            attack_d1: attack_d1(pred, c, None, mask, config)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone, sample: bool) -> MeanStd {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let ss: f64 = values.map(|v| (v - mean).powi(2)).sum();
    let denom = if sample && n > 1.0 { n - 1.0 } else { n };
    MeanStd { mean, std: (ss / denom).sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub scenes: Vec<SceneMetrics>,
    pub d1: MeanStd,
    pub epe: MeanStd,
    pub attack_d1: MeanStd,
}

/// Mean and standard deviation of every metric across scenes.
pub fn aggregate(reports: &[SceneMetrics], config: &MetricConfig) -> Result<AttackReport> {
    if reports.is_empty() {
        return Err(Error::Domain("cannot aggregate an empty report list".into()));
    }
    let s = config.sample_std;
    Ok(AttackReport {
        d1: mean_std(reports.iter().map(|r| r.d1), s),
        epe: mean_std(reports.iter().map(|r| r.epe), s),
        attack_d1: mean_std(reports.iter().map(|r| r.attack_d1), s),
        scenes: reports.to_vec(),
    })
}

impl AttackReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per scene with columns `scene_id,d1,epe,attack_d1`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for s in &self.scenes {
            w.serialize(s).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<SceneMetrics>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse { path: path.display().to_string(), line, msg: e.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epe_and_d1_examples() {
        let cfg = MetricConfig::default();
        let gt = DisparityMap::filled(4, 4, 100.0);
        let all = Mask::full(4, 4);
        assert_eq!(epe(&gt, &gt, &all).unwrap(), 0.0);
        let off = DisparityMap::filled(4, 4, 102.0);
        assert_eq!(epe(&off, &gt, &all).unwrap(), 2.0);
        assert_eq!(d1(&DisparityMap::filled(4, 4, 90.0), &gt, &all, &cfg).unwrap(), 100.0);
        assert_eq!(d1(&DisparityMap::filled(4, 4, 96.0), &gt, &all, &cfg).unwrap(), 0.0);
        assert!(epe(&gt, &gt, &Mask::new(4, 4)).is_err());
    }

    #[test]
    fn attack_d1_two_conditions() {
        let cfg = MetricConfig::default();
        let c = 77.76;
        let m = Mask::full(1, 1);
        let at = |p: f64| attack_d1(&DisparityMap::filled(1, 1, p), c, None, &m, &cfg).unwrap();
        assert_eq!(at(10.0), 100.0);
        assert_eq!(at(c), 0.0);
        assert_eq!(at(30.0), 0.0);
        assert!(attack_d1(&DisparityMap::filled(1, 1, 1.0), 0.0, None, &m, &cfg).is_err());
    }

    #[test]
    fn aggregate_two_points() {
        let mk = |d1| SceneMetrics { scene_id: "s".into(), d1, epe: 1.0, attack_d1: 0.0 };
        let cfg = MetricConfig::default();
        let rep = aggregate(&[mk(40.0), mk(60.0)], &cfg).unwrap();
        assert_eq!(rep.d1, MeanStd { mean: 50.0, std: 10.0 });
        assert_eq!(aggregate(&[mk(3.0)], &cfg).unwrap().d1.std, 0.0);
        let sample = aggregate(&[mk(40.0), mk(60.0)], &MetricConfig { sample_std: true, ..cfg }).unwrap();
        assert!((sample.d1.std - 200f64.sqrt()).abs() < 1e-12);
        assert!(aggregate(&[], &cfg).is_err());
    }

    #[test]
    fn depth_factor_must_exceed_one() {
        assert!(MetricConfig { depth_factor: 1.0, ..Default::default() }.validate().is_err());
    }
}

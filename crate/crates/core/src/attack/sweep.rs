//! Fixed-patch sweeps over interval structure and board rotation.

use serde::{Deserialize, Serialize};

use crate::deploy::StereoScene;
use crate::error::{Error, Result};
use crate::geometry::PatchPlacement;
use crate::image::{DisparityMap, Image};
use crate::matcher::StereoModel;
use crate::metrics::{attack_d1, MetricConfig};
use crate::patch::{assemble, AssembledPatch, GridSpec, IntervalAxes, TextureElement};

use super::{patch_size_for, prepare_scenes, PreparedScene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalStrategy {
    /// Plain tiling, no intervals.
    BasicRepeat,
    Horizontal,
    Vertical,
    Grid,
}

impl IntervalStrategy {
    pub const ALL: [IntervalStrategy; 4] = [Self::BasicRepeat, Self::Horizontal, Self::Vertical, Self::Grid];

    pub fn name(self) -> &'static str {
        match self {
            Self::BasicRepeat => "basic-repeat",
            Self::Horizontal => "horizontal",
            Self::Vertical => "vertical",
            Self::Grid => "grid",
        }
    }

    /// Grid spec for `k` intervals per axis. Basic repeat tiles the same `k + 1` copies without gaps.
    pub fn spec(self, reps: (usize, usize), width: usize) -> GridSpec {
        match self {
            Self::BasicRepeat => GridSpec::tiled((reps.0 + 1, reps.1 + 1)),
            Self::Horizontal => GridSpec::grid(reps, width).with_axes(IntervalAxes::Horizontal),
            Self::Vertical => GridSpec::grid(reps, width).with_axes(IntervalAxes::Vertical),
            Self::Grid => GridSpec::grid(reps, width),
        }
    }
}

impl std::str::FromStr for IntervalStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown interval strategy '{s}'")))
    }
}

/// Predicted-depth statistics over the patch regions of several scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub mean_disparity: f64,
    /// Depths are capped at the configured maximum so vanished pixels stay finite.
    pub mean_depth_m: f64,
    pub depth_variance: f64,
    /// Mean over scenes, percent.
    pub attack_d1: f64,
}

impl RegionStats {
    pub fn collect(scenes: &[PreparedScene], preds: &[DisparityMap], metric: &MetricConfig, depth_cap_m: f64) -> Result<Self> {
        let mut depths = Vec::new();
        let mut disp_sum = 0.0;
        let mut ad1 = 0.0;
        for (s, pred) in scenes.iter().zip(preds) {
            let region = s.region();
            let fb = s.scene.rig.focal_px * s.scene.rig.baseline_m;
            for (r, c) in region.iter_set() {
                let d = pred.get(r, c);
                disp_sum += d;
                depths.push(if d > fb / depth_cap_m { fb / d } else { depth_cap_m });
            }
            ad1 += attack_d1(pred, s.deployment.patch_gt_disparity, None, region, metric)?;
        }
        let n = depths.len() as f64;
        let mean = depths.iter().sum::<f64>() / n;
        let var = depths.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { mean_disparity: disp_sum / n, mean_depth_m: mean, depth_variance: var, attack_d1: ad1 / scenes.len() as f64 })
    }
}

/// Evaluates a fixed patch on prepared scenes.
pub fn evaluate_patch(scenes: &[PreparedScene], model: &dyn StereoModel, patch: &AssembledPatch, metric: &MetricConfig, depth_cap_m: f64) -> Result<RegionStats> {
    let preds = scenes.iter().map(|s| s.predict(model, patch)).collect::<Result<Vec<_>>>()?;
    RegionStats::collect(scenes, &preds, metric, depth_cap_m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    pub strategy: IntervalStrategy,
    /// `None` for basic repeat, where the width does not apply.
    pub width: Option<usize>,
    pub element_h: usize,
    pub element_w: usize,
    #[serde(flatten)]
    pub stats: RegionStats,
}

/// For every `(strategy, width)`, builds a patch whose elements are cut from `texture`,
/// deploys it and records predicted-depth statistics. Basic repeat yields one row.
#[allow(clippy::too_many_arguments)]
pub fn interval_sweep(
    scenes: &[StereoScene],
    model: &dyn StereoModel,
    placement: &PatchPlacement,
    texture: &Image,
    reps: (usize, usize),
    strategies: &[IntervalStrategy],
    widths: &[usize],
    metric: &MetricConfig,
    depth_cap_m: f64,
) -> Result<Vec<IntervalRow>> {
    if let Some(w) = widths.iter().find(|w| !(2..=10).contains(*w)) {
        return Err(Error::Domain(format!("interval widths must lie in [2, 10], got {w}")));
    }
    let first = scenes.first().ok_or_else(|| Error::Domain("interval sweep needs a scene".into()))?;
    let patch_size = patch_size_for(first, placement)?;
    let prepared = prepare_scenes(scenes, model, placement, patch_size)?;
    let mut rows = Vec::new();
    for &strategy in strategies {
        let ws: Vec<Option<usize>> = match strategy {
            IntervalStrategy::BasicRepeat => vec![None],
            _ => widths.iter().map(|w| Some(*w)).collect(),
        };
        for width in ws {
            let spec = strategy.spec(reps, width.unwrap_or(0));
            let (h_t, w_t) = crate::patch::element_size(patch_size.0, patch_size.1, &spec)?;
            if texture.height() < h_t || texture.width() < w_t {
                return Err(Error::Domain(format!("texture {}x{} is smaller than the {h_t}x{w_t} element", texture.height(), texture.width())));
            }
            let element = TextureElement::new(texture.crop(0, 0, h_t, w_t)?)?;
            let patch = assemble(&element, &spec, patch_size.0, patch_size.1)?;
            let stats = evaluate_patch(&prepared, model, &patch, metric, depth_cap_m)
                .map_err(|e| e.context(format!("{} width {width:?}", strategy.name())))?;
            rows.push(IntervalRow { strategy, width, element_h: h_t, element_w: w_t, stats });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotationAxis {
    X,
    Y,
}

impl std::str::FromStr for RotationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Self::X),
            "y" | "Y" => Ok(Self::Y),
            _ => Err(Error::Config(format!("rotation axis must be x or y, got '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationRow {
    pub axis: RotationAxis,
    pub degrees: f64,
    /// Empty when the rotated placement is unusable.
    pub stats: Option<RegionStats>,
    pub note: String,
}

/// Re-deploys a fixed patch at each rotation about `axis` and records region statistics.
/// Degenerate placements (edge-on boards, angles outside (−60°, 60°)) produce a row without metrics.
#[allow(clippy::too_many_arguments)]
pub fn rotation_sweep(
    scenes: &[StereoScene],
    model: &dyn StereoModel,
    patch: &AssembledPatch,
    placement: &PatchPlacement,
    axis: RotationAxis,
    degrees: &[f64],
    metric: &MetricConfig,
    depth_cap_m: f64,
) -> Result<Vec<RotationRow>> {
    let mut rows = Vec::with_capacity(degrees.len());
    for &deg in degrees {
        let note = |s: String| RotationRow { axis, degrees: deg, stats: None, note: s };
        if !(deg > -60.0 && deg < 60.0) {
            rows.push(note(format!("degenerate: {deg}° is outside (-60°, 60°)")));
            continue;
        }
        let rotated = match axis {
            RotationAxis::X => placement.with_rotation(placement.rot_x_deg + deg, placement.rot_y_deg),
            RotationAxis::Y => placement.with_rotation(placement.rot_x_deg, placement.rot_y_deg + deg),
        };
        let prepared = match prepare_scenes(scenes, model, &rotated, patch.size()) {
            Ok(p) if p.len() == scenes.len() => p,
            Ok(_) => {
                rows.push(note("degenerate: some scenes could not host the rotated patch".into()));
                continue;
            }
            Err(e) if super::is_placement_error(&e) => {
                rows.push(note(format!("degenerate: {e}")));
                continue;
            }
            Err(e) => return Err(e),
        };
        let stats = evaluate_patch(&prepared, model, patch, metric, depth_cap_m)?;
        rows.push(RotationRow { axis, degrees: deg, stats: Some(stats), note: "ok".into() });
    }
    Ok(rows)
}

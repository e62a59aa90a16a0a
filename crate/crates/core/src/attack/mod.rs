//! Grid-based and depth-vanish patch optimization.
//!
//! Each step assembles the patch from the element, composites it into every
//! scene, runs the target model and pulls the loss gradient back through the
//! model, the warp and the assembly. The attack term is averaged over the
//! element's anchored copies before the step; the regularizers act on the
//! element directly.

mod losses;
mod sweep;

pub use losses::{
    entropy_grad, entropy_loss, objective, rmse_grad, rmse_loss, total_loss, tv_grad, tv_loss, zero_target_loss,
};
pub use sweep::{
    evaluate_patch, interval_sweep, rotation_sweep, IntervalRow, IntervalStrategy, RegionStats, RotationAxis, RotationRow,
};

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deploy::{composite, composite_backward, Deployment, StereoScene};
use crate::error::{Error, Result};
use crate::geometry::{self, PatchPlacement};
use crate::image::{DisparityMap, Image, Mask};
use crate::matcher::StereoModel;
use crate::patch::{assemble_with_layout, AssembledPatch, GridSpec, PatchLayout, PatchMode, TextureElement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    Grid,
    #[serde(alias = "depth-vanish", alias = "depth_vanish")]
    DepthVanish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub mode: AttackMode,
    /// 0 gives plain projected gradient descent.
    pub momentum: f64,
    /// Replace the rMSE ascent with descent on the mean squared region disparity.
    pub target_zero: bool,
    /// Keep an element snapshot every N steps (0 disables).
    pub snapshot_every: usize,
    pub init_range: (f64, f64),
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 10.0,
            lr: 0.02,
            steps: 200,
            epsilon: 1e-8,
            seed: 0,
            mode: AttackMode::DepthVanish,
            momentum: 0.0,
            target_zero: false,
            snapshot_every: 0,
            init_range: (0.25, 0.75),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        let (lo, hi) = self.init_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("init_range must satisfy 0 <= lo <= hi <= 1");
        }
        Ok(())
    }

    /// `(α, β)` actually applied: grid mode optimizes rMSE alone.
    pub fn effective_weights(&self) -> (f64, f64) {
        match self.mode {
            AttackMode::Grid => (0.0, 0.0),
            AttackMode::DepthVanish => (self.alpha, self.beta),
        }
    }

    /// The grid spec with its mode forced to match the attack mode.
    pub fn patch_spec(&self, spec: &GridSpec) -> GridSpec {
        let mut s = spec.clone();
        match self.mode {
            AttackMode::Grid => {
                s.mode = PatchMode::Grid;
                if s.interval_px == 0 {
                    s.interval_px = 10;
                }
            }
            AttackMode::DepthVanish => {
                s.mode = PatchMode::Tiled;
                s.interval_px = 0;
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// The minimized objective (attack term plus weighted regularizers).
    pub total: f64,
    pub rmse: f64,
    pub entropy: f64,
    pub tv: f64,
    pub element_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub records: Vec<TraceRecord>,
}

impl OptimizationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `step,total,rmse,entropy,tv,element_hash`
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| crate::metrics::csv_error(path, e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| crate::metrics::csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| crate::metrics::csv_error(path, e))?;
        let records = r
            .deserialize()
            .map(|row| row.map_err(|e| crate::metrics::csv_error(path, e)))
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

/// SHA-256 over the little-endian bytes of every entry.
pub fn element_hash(element: &TextureElement) -> String {
    let mut h = Sha256::new();
    for v in element.image().data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// A scene ready for optimization: cropped to the model's receptive field around
/// the patch when the model allows it, with its clean prediction cached.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub id: String,
    pub scene: StereoScene,
    pub deployment: Deployment,
    pub clean_pred: DisparityMap,
    /// Origin of the crop in the full image.
    pub offset: (usize, usize),
}

impl PreparedScene {
    pub fn new(scene: &StereoScene, model: &dyn StereoModel, placement: &PatchPlacement, patch_size: (usize, usize)) -> Result<Self> {
        let full = Deployment::from_placement(&scene.rig, placement, patch_size, scene.size())?;
        let (scene_c, deployment, offset) = match model.support() {
            Some(s) if full.support_window(scene.size(), s.halo + 1, s.reach_left).3 > model.d_max() + 1 => {
                let (r0, c0, h, w) = full.support_window(scene.size(), s.halo + 1, s.reach_left);
                let dep = full.cropped(r0, c0, (h, w))?;
                (scene.crop(r0, c0, h, w)?, dep, (r0, c0))
            }
            _ => (scene.clone(), full, (0, 0)),
        };
        let clean_pred = model.forward(&scene_c.left, &scene_c.right).map_err(|e| e.context(format!("scene {}", scene.id)))?;
        Ok(Self { id: scene.id.clone(), scene: scene_c, deployment, clean_pred, offset })
    }

    pub fn region(&self) -> &Mask {
        &self.deployment.region_mask_left
    }

    /// Model prediction with `patch` composited in.
    pub fn predict(&self, model: &dyn StereoModel, patch: &AssembledPatch) -> Result<DisparityMap> {
        let adv = composite(&self.scene, patch, &self.deployment)?;
        model.forward(&adv.left, &adv.right)
    }
}

/// Patch pixel size for a placement, taken from the first scene's left view.
pub fn patch_size_for(scene: &StereoScene, placement: &PatchPlacement) -> Result<(usize, usize)> {
    let (ql, _) = geometry::project_placement(&scene.rig, placement)?;
    geometry::patch_pixel_size(&ql)
}

/// Prepares every scene, skipping (with a warning) those whose deployment is degenerate.
pub fn prepare_scenes(
    scenes: &[StereoScene],
    model: &dyn StereoModel,
    placement: &PatchPlacement,
    patch_size: (usize, usize),
) -> Result<Vec<PreparedScene>> {
    let mut out = Vec::with_capacity(scenes.len());
    for s in scenes {
        match PreparedScene::new(s, model, placement, patch_size) {
            Ok(p) => out.push(p),
            Err(e) if is_placement_error(&e) => log::warn!("skipping scene {}: {e}", s.id),
            Err(e) => return Err(e),
        }
    }
    if out.is_empty() {
        return Err(Error::Deployment(format!("all {} scenes have degenerate deployments", scenes.len())));
    }
    Ok(out)
}

fn is_placement_error(e: &Error) -> bool {
    matches!(e.root(), Error::DegeneratePlacement(_) | Error::Deployment(_) | Error::PatchTooSmall(_))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub rmse: f64,
    pub entropy: f64,
    pub tv: f64,
}

/// Loss values and gradients of one element evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub parts: LossParts,
    /// Gradient of the attack term w.r.t. the element (summed over anchored copies).
    pub grad_attack: Image,
    /// `α ∇entropy + β ∇tv`
    pub grad_reg: Image,
    pub copies: usize,
}

impl Evaluation {
    /// Exact gradient of the objective.
    pub fn gradient(&self) -> Image {
        let mut g = self.grad_attack.clone();
        g.add_scaled(&self.grad_reg, 1.0);
        g
    }

    /// Step direction: the attack gradient averaged over copies plus the regularizer gradient.
    pub fn update_direction(&self) -> Image {
        let mut g = self.grad_attack.clone();
        g.scale(1.0 / self.copies as f64);
        g.add_scaled(&self.grad_reg, 1.0);
        g
    }
}

/// Objective value and gradients for `element`, averaged over scenes.
pub fn evaluate(
    element: &TextureElement,
    spec: &GridSpec,
    layout: &PatchLayout,
    scenes: &[PreparedScene],
    model: &dyn StereoModel,
    config: &AttackConfig,
) -> Result<Evaluation> {
    if scenes.is_empty() {
        return Err(Error::Domain("no scenes to evaluate".into()));
    }
    let patch = assemble_with_layout(element, spec, layout)?;
    let per_scene: Vec<Result<(f64, f64, Image)>> = scenes
        .par_iter()
        .map(|s| scene_gradient(s, &patch, model, config).map_err(|e| e.context(format!("scene {}", s.id))))
        .collect();
    let n = scenes.len() as f64;
    let (h_p, w_p) = layout.patch_size;
    let mut grad_patch = Image::new(h_p, w_p, 3);
    let (mut rmse, mut attack) = (0.0, 0.0);
    for r in per_scene {
        let (rm, at, g) = r?;
        rmse += rm / n;
        attack += at / n;
        grad_patch.add_scaled(&g, 1.0 / n);
    }
    let grad_attack = crate::patch::assemble_backward(&grad_patch, layout);
    let entropy = entropy_loss(element, config.epsilon);
    let tv = tv_loss(element)?;
    let (a, b) = config.effective_weights();
    let mut grad_reg = Image::new(element.size().0, element.size().1, 3);
    if a > 0.0 {
        grad_reg.add_scaled(&entropy_grad(element, config.epsilon), a);
    }
    if b > 0.0 {
        grad_reg.add_scaled(&tv_grad(element)?, b);
    }
    let total = objective(attack, entropy, tv, config);
    let parts = LossParts { total, rmse, entropy, tv };
    if ![total, rmse, entropy, tv].iter().all(|v| v.is_finite()) || !grad_attack.is_finite() || !grad_reg.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss or gradient: {parts:?}")));
    }
    Ok(Evaluation { parts, grad_attack, grad_reg, copies: layout.element_origins.len() })
}

/// `(rMSE, attack term, ∂attack/∂patch)` for one scene.
fn scene_gradient(s: &PreparedScene, patch: &AssembledPatch, model: &dyn StereoModel, config: &AttackConfig) -> Result<(f64, f64, Image)> {
    let adv = composite(&s.scene, patch, &s.deployment)?;
    let region = s.region();
    let mut rmse = 0.0;
    let mut attack = 0.0;
    let out = model.forward_backward(&adv.left, &adv.right, &mut |pred| {
        rmse = rmse_loss(pred, &s.clean_pred, region)?;
        if config.target_zero {
            let (l, g) = zero_target_loss(pred, region)?;
            attack = l;
            Ok(g)
        } else {
            attack = -rmse;
            let mut g = rmse_grad(pred, &s.clean_pred, region)?;
            g.values_mut().iter_mut().for_each(|v| *v = -*v);
            Ok(g)
        }
    })?;
    Ok((rmse, attack, composite_backward(&s.deployment, &out.grad_left, &out.grad_right)))
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub element: TextureElement,
    pub patch: AssembledPatch,
    pub spec: GridSpec,
    pub trace: OptimizationTrace,
    /// Losses of the returned element.
    pub final_parts: LossParts,
    pub snapshots: Vec<(usize, TextureElement)>,
}

/// Optimizes a texture element against `model` over `scenes`.
pub fn optimize(
    scenes: &[StereoScene],
    model: &dyn StereoModel,
    placement: &PatchPlacement,
    spec: &GridSpec,
    config: &AttackConfig,
) -> Result<AttackOutcome> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Domain("optimize needs at least one scene".into()));
    }
    let spec = config.patch_spec(spec);
    let patch_size = scenes
        .iter()
        .find_map(|s| patch_size_for(s, placement).ok())
        .ok_or_else(|| Error::DegeneratePlacement("placement is degenerate in every scene".into()))?;
    let prepared = prepare_scenes(scenes, model, placement, patch_size)?;
    optimize_prepared(&prepared, model, &spec, patch_size, config)
}

/// [`optimize`] on scenes that are already prepared; `spec` is used as given.
pub fn optimize_prepared(
    scenes: &[PreparedScene],
    model: &dyn StereoModel,
    spec: &GridSpec,
    patch_size: (usize, usize),
    config: &AttackConfig,
) -> Result<AttackOutcome> {
    let layout = PatchLayout::new(spec, patch_size.0, patch_size.1)?;
    let (h_t, w_t) = layout.element_size;
    let (lo, hi) = config.init_range;
    let mut element = TextureElement::random(h_t, w_t, lo, hi, config.seed)?;
    let mut velocity = Image::new(h_t, w_t, 3);
    let mut trace = OptimizationTrace::default();
    let mut snapshots = Vec::new();
    for step in 0..config.steps {
        let eval = evaluate(&element, spec, &layout, scenes, model, config).map_err(|e| e.context(format!("step {step}")))?;
        trace.records.push(TraceRecord {
            step,
            total: eval.parts.total,
            rmse: eval.parts.rmse,
            entropy: eval.parts.entropy,
            tv: eval.parts.tv,
            element_hash: element_hash(&element),
        });
        if config.snapshot_every > 0 && step % config.snapshot_every == 0 {
            snapshots.push((step, element.clone()));
        }
        let dir = eval.update_direction();
        velocity.scale(config.momentum);
        velocity.add_scaled(&dir, 1.0);
        let mut step_img = velocity.clone();
        step_img.scale(config.lr);
        element.step_and_clamp(&step_img);
        log::debug!("step {step}: total {:.4} rmse {:.4}", eval.parts.total, eval.parts.rmse);
    }
    let final_parts = evaluate(&element, spec, &layout, scenes, model, config)
        .map_err(|e| e.context("final evaluation"))?
        .parts;
    let patch = assemble_with_layout(&element, spec, &layout)?;
    Ok(AttackOutcome { element, patch, spec: spec.clone(), trace, final_parts, snapshots })
}

//! End-to-end runs: scene loading, attack, evaluation, sweeps and artifact writing.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackMode, IntervalStrategy, LossParts, PreparedScene, RegionStats, RotationAxis};
use crate::deploy::StereoScene;
use crate::error::{Error, Result};
use crate::image::{DisparityMap, Image};
use crate::matcher::{ModelRegistry, StereoModel};
use crate::metrics::{aggregate, csv_error, AttackReport, SceneMetrics};
use crate::patch::{self, AssembledPatch, GridSpec, TextureElement};

use super::calib::load_kitti_calibration;
use super::config::{ExperimentConfig, SceneSource};
use super::render::{save_disparity_panel, save_line_plot, Series};
use super::synthetic::generate_synthetic_scene;

/// Builds the configured target model from the default registry.
pub fn build_model(cfg: &ExperimentConfig) -> Result<Arc<dyn StereoModel>> {
    build_model_with(&ModelRegistry::default(), cfg)
}

pub fn build_model_with(registry: &ModelRegistry, cfg: &ExperimentConfig) -> Result<Arc<dyn StereoModel>> {
    registry.create(&cfg.model.name, &cfg.model.matcher)
}

/// `count` scenes starting at index `first` of the configured source.
pub fn load_scenes(cfg: &ExperimentConfig, first: usize, count: usize) -> Result<Vec<StereoScene>> {
    match &cfg.scene_source {
        SceneSource::Synthetic(spec) => (first..first + count)
            .map(|i| generate_synthetic_scene(spec, cfg.scene_seed + i as u64))
            .collect(),
        SceneSource::Kitti { dir, keys } => {
            let pairs = kitti_pairs(dir)?;
            if pairs.len() < first + count {
                return Err(Error::Config(format!(
                    "{} holds {} stereo pairs, {} requested",
                    dir.display(),
                    pairs.len(),
                    first + count
                )));
            }
            pairs[first..first + count]
                .iter()
                .map(|stem| load_kitti_pair(dir, stem, keys))
                .collect()
        }
    }
}

/// Frame stems (`000000_10`, ...) present in `image_2/`, sorted by name.
pub fn kitti_pairs(dir: &Path) -> Result<Vec<String>> {
    let left = dir.join("image_2");
    let rd = fs::read_dir(&left).map_err(|e| Error::io(&left, e))?;
    let mut stems = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(&left, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".png") {
            if dir.join("image_3").join(&name).exists() {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn load_kitti_pair(dir: &Path, stem: &str, keys: &super::calib::CalibKeys) -> Result<StereoScene> {
    let left = Image::load_png(dir.join("image_2").join(format!("{stem}.png")))?;
    let right = Image::load_png(dir.join("image_3").join(format!("{stem}.png")))?;
    let frame = stem.split('_').next().unwrap_or(stem);
    let calib_path = dir.join("calib_cam_to_cam").join(format!("{frame}.txt"));
    let mut rig = load_kitti_calibration(&calib_path, keys)?;
    rig.image_size = (left.height(), left.width());
    let gt_path = dir.join("disp_occ_0").join(format!("{stem}.png"));
    let gt = if gt_path.exists() { Some(load_kitti_disparity(&gt_path)?) } else { None };
    StereoScene::new(stem, left, right, gt, rig)
}

/// 16-bit KITTI disparity PNG (value / 256, 0 = unknown).
pub fn load_kitti_disparity(path: &Path) -> Result<DisparityMap> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })?.into_luma16();
    let (w, h) = img.dimensions();
    DisparityMap::from_vec(h as usize, w as usize, img.pixels().map(|p| p.0[0] as f64 / 256.0).collect())
}

/// Everything `report.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub mode: AttackMode,
    pub seed: u64,
    pub steps: usize,
    pub patch_size: (usize, usize),
    pub element_size: (usize, usize),
    pub train_scenes: Vec<String>,
    pub eval_scenes: Vec<String>,
    pub final_loss: Option<LossParts>,
    pub report: AttackReport,
}

/// Evaluates `patch` on prepared scenes and builds the per-scene report.
pub fn evaluate_scenes(prepared: &[PreparedScene], model: &dyn StereoModel, patch: &AssembledPatch, cfg: &ExperimentConfig) -> Result<(AttackReport, Vec<DisparityMap>)> {
    let mut rows = Vec::with_capacity(prepared.len());
    let mut preds = Vec::with_capacity(prepared.len());
    for s in prepared {
        let pred = s.predict(model, patch).map_err(|e| e.context(format!("scene {}", s.id)))?;
        rows.push(SceneMetrics::for_patch(&s.id, &pred, s.deployment.patch_gt_disparity, s.region(), &cfg.metrics)?);
        preds.push(pred);
    }
    Ok((aggregate(&rows, &cfg.metrics)?, preds))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Optimizes a patch and writes patch, trace, report and panels into the output directory.
pub fn run_attack(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    let train = load_scenes(cfg, 0, cfg.scene_count)?;
    let eval_scenes = if cfg.eval_scene_count > 0 { load_scenes(cfg, cfg.scene_count, cfg.eval_scene_count)? } else { train.clone() };
    let outcome = attack::optimize(&train, model.as_ref(), &cfg.placement, &cfg.grid, &cfg.attack)?;
    // report on the 8-bit patch that is written out, so `run_eval` on it reproduces the numbers
    let saved = AssembledPatch { image: outcome.patch.image.quantized(), ..outcome.patch.clone() };
    let patch_size = saved.size();
    let prepared = attack::prepare_scenes(&eval_scenes, model.as_ref(), &cfg.placement, patch_size)?;
    let (report, _) = evaluate_scenes(&prepared, model.as_ref(), &saved, cfg)?;
    let run = RunReport {
        model: model.name().to_string(),
        mode: cfg.attack.mode,
        seed: cfg.attack.seed,
        steps: cfg.attack.steps,
        patch_size,
        element_size: outcome.patch.element_size,
        train_scenes: train.iter().map(|s| s.id.clone()).collect(),
        eval_scenes: prepared.iter().map(|s| s.id.clone()).collect(),
        final_loss: Some(outcome.final_parts),
        report,
    };

    // all writes happen after every computation succeeded
    let out = &cfg.output_dir;
    ensure_dir(out)?;
    let mut meta = serde_json::Map::new();
    meta.insert("mode".into(), serde_json::to_value(cfg.attack.mode)?);
    meta.insert("seed".into(), cfg.attack.seed.into());
    meta.insert("steps".into(), cfg.attack.steps.into());
    meta.insert("model".into(), model.name().into());
    patch::save_patch(out, "patch", &saved, &outcome.spec, meta)?;
    outcome.element.image().save_png(out.join("element.png"))?;
    outcome.trace.write_csv(&out.join("trace.csv"))?;
    write_text(&out.join("report.json"), &(serde_json::to_string_pretty(&run)? + "\n"))?;
    run.report.write_csv(&out.join("report.csv"))?;
    if !outcome.snapshots.is_empty() {
        let dir = out.join("snapshots");
        ensure_dir(&dir)?;
        for (step, e) in &outcome.snapshots {
            e.image().save_png(dir.join(format!("element_{step:05}.png")))?;
        }
    }
    write_panels(cfg, model.as_ref(), &eval_scenes, &saved, out)?;
    Ok(run)
}

/// Writes left image, clean and adversarial disparity panels for the first `panel_count` scenes.
pub fn write_panels(cfg: &ExperimentConfig, model: &dyn StereoModel, scenes: &[StereoScene], patch: &AssembledPatch, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let max = model.d_max() as f64;
    for scene in scenes.iter().take(cfg.panel_count.max(1)) {
        let dep = match crate::deploy::Deployment::from_placement(&scene.rig, &cfg.placement, patch.size(), scene.size()) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("no panel for scene {}: {e}", scene.id);
                continue;
            }
        };
        let adv = crate::deploy::composite(scene, patch, &dep)?;
        let clean = model.forward(&scene.left, &scene.right)?;
        let attacked = model.forward(&adv.left, &adv.right)?;
        let files = [
            (format!("panel_{}_clean.png", scene.id), Some(&clean)),
            (format!("panel_{}_adv.png", scene.id), Some(&attacked)),
            (format!("panel_{}_left.png", scene.id), None),
        ];
        for (name, d) in files {
            let path = out.join(name);
            match d {
                Some(d) => save_disparity_panel(&path, d, max)?,
                None => adv.left.save_png(&path)?,
            }
            written.push(path);
        }
    }
    Ok(written)
}

/// Re-evaluates a saved patch (or a plain image without sidecar) on the evaluation scenes.
pub fn run_eval(cfg: &ExperimentConfig, patch_path: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    let patch = load_any_patch(patch_path)?;
    let count = if cfg.eval_scene_count > 0 { cfg.eval_scene_count } else { cfg.scene_count };
    let first = if cfg.eval_scene_count > 0 { cfg.scene_count } else { 0 };
    let scenes = load_scenes(cfg, first, count)?;
    let prepared = attack::prepare_scenes(&scenes, model.as_ref(), &cfg.placement, patch.size())?;
    let (report, _) = evaluate_scenes(&prepared, model.as_ref(), &patch, cfg)?;
    let run = RunReport {
        model: model.name().to_string(),
        mode: cfg.attack.mode,
        seed: cfg.attack.seed,
        steps: 0,
        patch_size: patch.size(),
        element_size: patch.element_size,
        train_scenes: Vec::new(),
        eval_scenes: prepared.iter().map(|s| s.id.clone()).collect(),
        final_loss: None,
        report,
    };
    let out = &cfg.output_dir;
    ensure_dir(out)?;
    write_text(&out.join("report.json"), &(serde_json::to_string_pretty(&run)? + "\n"))?;
    run.report.write_csv(&out.join("report.csv"))?;
    Ok(run)
}

/// Loads `<dir>/patch.{png,json}`, `<stem>.png` with its sidecar, or a bare PNG.
pub fn load_any_patch(path: &Path) -> Result<AssembledPatch> {
    if path.is_dir() {
        return Ok(patch::load_patch(path, "patch")?.0);
    }
    let sidecar = path.with_extension("json");
    if sidecar.exists() {
        let dir = path.parent().unwrap_or(Path::new("."));
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("patch");
        return Ok(patch::load_patch(dir, stem)?.0);
    }
    Ok(AssembledPatch::from_image(Image::load_png(path)?))
}

/// Renders panels for a saved patch without re-running anything else.
pub fn run_render(cfg: &ExperimentConfig, patch_path: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    let patch = load_any_patch(patch_path)?;
    let scenes = load_scenes(cfg, 0, cfg.panel_count.max(1))?;
    ensure_dir(&cfg.output_dir)?;
    write_panels(cfg, model.as_ref(), &scenes, &patch, &cfg.output_dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Interval,
    Rotation,
    Distance,
    Size,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interval" => Ok(Self::Interval),
            "rotation" => Ok(Self::Rotation),
            "distance" => Ok(Self::Distance),
            "size" => Ok(Self::Size),
            _ => Err(Error::Config(format!("unknown sweep '{s}' (interval, rotation, distance, size)"))),
        }
    }
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Interval => "interval",
            Self::Rotation => "rotation",
            Self::Distance => "distance",
            Self::Size => "size",
        }
    }
}

/// One sweep grid point. `series` names the curve (strategy or axis), `x` its abscissa.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep: String,
    pub series: String,
    pub x: f64,
    pub mean_disparity: Option<f64>,
    pub mean_depth_m: Option<f64>,
    pub depth_variance: Option<f64>,
    pub attack_d1: Option<f64>,
    pub note: String,
}

impl SweepRow {
    fn new(sweep: SweepKind, series: impl Into<String>, x: f64, stats: Option<RegionStats>, note: impl Into<String>) -> Self {
        Self {
            sweep: sweep.name().into(),
            series: series.into(),
            x,
            mean_disparity: stats.map(|s| s.mean_disparity),
            mean_depth_m: stats.map(|s| s.mean_depth_m),
            depth_variance: stats.map(|s| s.depth_variance),
            attack_d1: stats.map(|s| s.attack_d1),
            note: note.into(),
        }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

/// High-frequency binary texture used when no sweep texture is configured.
pub fn default_sweep_texture(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells: Vec<f64> = (0..height.div_ceil(2) * width.div_ceil(2)).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
    let cw = width.div_ceil(2);
    Image::from_fn(height, width, 3, |r, c, _| cells[(r / 2) * cw + c / 2])
}

fn sweep_texture(cfg: &ExperimentConfig, size: (usize, usize)) -> Result<Image> {
    match &cfg.sweep.texture {
        Some(p) => Image::load_png(p),
        None => Ok(default_sweep_texture(size.0, size.1, cfg.sweep.texture_seed)),
    }
}

/// The patch for rotation/distance/size sweeps: the configured one, else a fixed-texture grid patch.
fn sweep_patch(cfg: &ExperimentConfig, scene: &StereoScene) -> Result<AssembledPatch> {
    if let Some(dir) = &cfg.sweep.patch_dir {
        return load_any_patch(dir);
    }
    let size = attack::patch_size_for(scene, &cfg.placement)?;
    let spec = if cfg.grid.mode == crate::patch::PatchMode::Grid { cfg.grid.clone() } else { GridSpec::grid((4, 5), 5) };
    let (h_t, w_t) = patch::element_size(size.0, size.1, &spec)?;
    let tex = sweep_texture(cfg, size)?;
    let element = TextureElement::new(tex.crop(0, 0, h_t, w_t)?)?;
    patch::assemble(&element, &spec, size.0, size.1)
}

/// Runs one sweep, writing `sweep_<kind>.csv` and `sweep_<kind>.png`.
pub fn run_sweep(cfg: &ExperimentConfig, kind: SweepKind) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    let scenes = load_scenes(cfg, 0, cfg.sweep.scene_count.max(1))?;
    let m = model.as_ref();
    let cap = cfg.depth_cap_m;
    let rows: Vec<SweepRow> = match kind {
        SweepKind::Interval => {
            let size = attack::patch_size_for(&scenes[0], &cfg.placement)?;
            let tex = sweep_texture(cfg, size)?;
            let reps = cfg.grid.reps;
            attack::interval_sweep(&scenes, m, &cfg.placement, &tex, reps, &cfg.sweep.strategies, &cfg.sweep.widths, &cfg.metrics, cap)?
                .into_iter()
                .map(|r| SweepRow::new(kind, r.strategy.name(), r.width.unwrap_or(0) as f64, Some(r.stats), format!("element {}x{}", r.element_h, r.element_w)))
                .collect()
        }
        SweepKind::Rotation => {
            let patch = sweep_patch(cfg, &scenes[0])?;
            let axis = match cfg.sweep.axis {
                RotationAxis::X => "x",
                RotationAxis::Y => "y",
            };
            attack::rotation_sweep(&scenes, m, &patch, &cfg.placement, cfg.sweep.axis, &cfg.sweep.degrees, &cfg.metrics, cap)?
                .into_iter()
                .map(|r| SweepRow::new(kind, axis, r.degrees, r.stats, r.note))
                .collect()
        }
        SweepKind::Distance | SweepKind::Size => {
            let patch = sweep_patch(cfg, &scenes[0])?;
            let points: Vec<(f64, crate::geometry::PatchPlacement)> = if kind == SweepKind::Distance {
                cfg.sweep.depths_m.iter().map(|&z| (z, cfg.placement.with_depth(z))).collect()
            } else {
                cfg.sweep
                    .scales
                    .iter()
                    .map(|&s| {
                        let mut p = cfg.placement.clone();
                        p.width_m *= s;
                        p.height_m *= s;
                        (s, p)
                    })
                    .collect()
            };
            let mut rows = Vec::with_capacity(points.len());
            for (x, placement) in points {
                match attack::prepare_scenes(&scenes, m, &placement, patch.size()) {
                    Ok(prep) => {
                        let stats = attack::evaluate_patch(&prep, m, &patch, &cfg.metrics, cap)?;
                        rows.push(SweepRow::new(kind, "patch", x, Some(stats), "ok"));
                    }
                    Err(e) if matches!(e.root(), Error::Deployment(_) | Error::DegeneratePlacement(_) | Error::PatchTooSmall(_)) => {
                        rows.push(SweepRow::new(kind, "patch", x, None, format!("degenerate: {e}")));
                    }
                    Err(e) => return Err(e),
                }
            }
            rows
        }
    };
    let out = &cfg.output_dir;
    ensure_dir(out)?;
    write_csv(&out.join(format!("sweep_{}.csv", kind.name())), &rows)?;
    save_line_plot(&out.join(format!("sweep_{}.png", kind.name())), &plot_series(&rows, kind))?;
    Ok(rows)
}

/// Interval sweeps plot mean depth per strategy (basic repeat as a flat line); others plot attack-D1.
fn plot_series(rows: &[SweepRow], kind: SweepKind) -> Vec<Series> {
    let mut names: Vec<&str> = rows.iter().map(|r| r.series.as_str()).collect();
    names.dedup();
    let widths: Vec<f64> = rows.iter().filter(|r| r.series != IntervalStrategy::BasicRepeat.name()).map(|r| r.x).collect();
    names
        .into_iter()
        .map(|name| {
            let mut points: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.series == name)
                .filter_map(|r| {
                    let y = if kind == SweepKind::Interval { r.mean_depth_m } else { r.attack_d1 };
                    y.map(|y| (r.x, y))
                })
                .collect();
            if kind == SweepKind::Interval && points.len() == 1 && !widths.is_empty() {
                let y = points[0].1;
                let (lo, hi) = widths.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &w| (a.min(w), b.max(w)));
                points = vec![(lo, y), (hi, y)];
            }
            Series { points }
        })
        .collect()
}

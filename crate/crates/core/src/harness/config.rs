//! Declarative experiment configuration (TOML) with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, IntervalStrategy, RotationAxis};
use crate::error::{Error, Result};
use crate::geometry::PatchPlacement;
use crate::matcher::MatcherConfig;
use crate::metrics::MetricConfig;
use crate::patch::GridSpec;

use super::calib::CalibKeys;
use super::synthetic::{SyntheticSceneSpec, TextureKind};

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_ENV: &str = "STEREOPATCH_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SceneSource {
    Synthetic(SyntheticSceneSpec),
    /// A KITTI-style tree: `image_2/`, `image_3/`, `calib_cam_to_cam/` and optionally `disp_occ_0/`.
    Kitti {
        dir: PathBuf,
        #[serde(default)]
        keys: CalibKeys,
    },
}

impl Default for SceneSource {
    fn default() -> Self {
        SceneSource::Synthetic(SyntheticSceneSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub name: String,
    #[serde(flatten)]
    pub matcher: MatcherConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { name: "builtin".into(), matcher: MatcherConfig { d_max: 64, ..Default::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Lossless image the fixed sweep elements are cut from; a seeded binary pattern when absent.
    pub texture: Option<PathBuf>,
    pub texture_seed: u64,
    pub strategies: Vec<IntervalStrategy>,
    pub widths: Vec<usize>,
    /// Directory holding `patch.png` + `patch.json` for rotation/distance/size sweeps.
    pub patch_dir: Option<PathBuf>,
    pub axis: RotationAxis,
    pub degrees: Vec<f64>,
    pub depths_m: Vec<f64>,
    pub scales: Vec<f64>,
    /// Scenes per sweep point.
    pub scene_count: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            texture: None,
            texture_seed: 7,
            strategies: IntervalStrategy::ALL.to_vec(),
            widths: (2..=10).collect(),
            patch_dir: None,
            axis: RotationAxis::X,
            degrees: (-4..=4).map(|i| 10.0 * i as f64).collect(),
            depths_m: vec![5.0, 9.0, 13.0, 17.0, 21.0],
            scales: vec![0.6, 0.8, 1.0, 1.2],
            scene_count: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scene_source: SceneSource,
    /// Scenes the patch is optimized on.
    pub scene_count: usize,
    /// Additional held-out scenes for the report; 0 reports on the optimization scenes.
    pub eval_scene_count: usize,
    pub scene_seed: u64,
    pub model: ModelConfig,
    pub placement: PatchPlacement,
    pub grid: GridSpec,
    pub attack: AttackConfig,
    pub metrics: MetricConfig,
    pub output_dir: PathBuf,
    /// Depth reported for pixels whose disparity vanishes.
    pub depth_cap_m: f64,
    /// Scenes rendered as colour-mapped disparity panels.
    pub panel_count: usize,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene_source: SceneSource::default(),
            scene_count: 40,
            eval_scene_count: 8,
            scene_seed: 0,
            model: ModelConfig::default(),
            placement: PatchPlacement::default(),
            grid: GridSpec::tiled((4, 5)),
            attack: AttackConfig::default(),
            metrics: MetricConfig::default(),
            output_dir: PathBuf::from("out"),
            depth_cap_m: 100.0,
            panel_count: 1,
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a TOML file, applies `key=value` overrides (dotted paths) and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Value::Table(Default::default()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Ok(dir) = std::env::var(OUTPUT_ENV) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene_count < 1 {
            return Err(Error::Config("scene_count must be at least 1".into()));
        }
        if !(self.depth_cap_m > 0.0) {
            return Err(Error::Config("depth_cap_m must be positive".into()));
        }
        self.attack.validate()?;
        self.metrics.validate()?;
        self.placement.validate().map_err(|e| e.context("placement"))?;
        self.attack.patch_spec(&self.grid).validate().map_err(|e| e.context("grid"))?;
        match &self.scene_source {
            SceneSource::Synthetic(spec) => {
                spec.validate()?;
                if let TextureKind::Photo { path } = &spec.texture {
                    require_path(path)?;
                }
                if spec.d_max > self.model.matcher.d_max {
                    return Err(Error::Config(format!(
                        "synthetic d_max {} exceeds the model's {}",
                        spec.d_max, self.model.matcher.d_max
                    )));
                }
            }
            SceneSource::Kitti { dir, .. } => require_path(dir)?,
        }
        if let Some(t) = &self.sweep.texture {
            require_path(t)?;
        }
        if let Some(p) = &self.sweep.patch_dir {
            require_path(p)?;
        }
        Ok(())
    }
}

fn require_path(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "referenced path does not exist")))
    }
}

/// Sets `a.b.c = value` in a TOML tree. The value is parsed as a TOML literal and
/// falls back to a plain string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{}' is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(Error::Config("empty override key".into()))
}

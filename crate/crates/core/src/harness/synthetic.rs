//! Layered fronto-parallel plane scenes with exact ground-truth disparity.
//!
//! Each layer is a textured plane at a fixed depth covering a rectangle of the
//! left image. A plane at disparity `d` that shows texture `T(x)` at left column
//! `x` shows the same value at right column `x − d`; the nearest covering layer
//! wins in each view, so occlusions are exact.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deploy::StereoScene;
use crate::error::{Error, Result};
use crate::geometry::CameraRig;
use crate::image::{DisparityMap, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TextureKind {
    /// Multi-octave value noise.
    Noise,
    /// Oriented sinusoidal stripes over faint noise.
    Stripes,
    /// A lossless image tiled across the plane.
    Photo { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneLayer {
    pub depth_m: f64,
    /// `[x0, y0, x1, y1]` as fractions of the left image; the whole frame when absent.
    #[serde(default)]
    pub extent: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub focal_px: f64,
    pub baseline_m: f64,
    pub texture: TextureKind,
    pub layers: Vec<PlaneLayer>,
    /// Largest disparity the target model searches; layers beyond it are rejected.
    pub d_max: usize,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            height: 128,
            width: 256,
            focal_px: 360.0,
            baseline_m: 0.54,
            texture: TextureKind::Noise,
            layers: vec![
                PlaneLayer { depth_m: 30.0, extent: None },
                PlaneLayer { depth_m: 12.0, extent: Some([0.0, 0.35, 0.3, 1.0]) },
                PlaneLayer { depth_m: 5.0, extent: Some([0.25, 0.1, 0.85, 0.9]) },
            ],
            d_max: 64,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn rig(&self) -> Result<CameraRig> {
        CameraRig::ideal(self.focal_px, self.baseline_m, self.width as f64 / 2.0, self.height as f64 / 2.0, (self.height, self.width))
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!("synthetic image {}x{} is too small", self.height, self.width)));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("synthetic scene needs at least one layer".into()));
        }
        let fb = self.focal_px * self.baseline_m;
        let mut depths: Vec<f64> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            if !(l.depth_m > 0.0) {
                return Err(Error::Config(format!("layer depth must be positive, got {}", l.depth_m)));
            }
            if depths.iter().any(|d| (d - l.depth_m).abs() < 1e-12) {
                return Err(Error::Config(format!("layer depth {} m appears twice", l.depth_m)));
            }
            depths.push(l.depth_m);
            let d = fb / l.depth_m;
            if d > self.d_max as f64 {
                return Err(Error::Config(format!(
                    "layer at {} m has disparity {d:.2} px, above d_max {}",
                    l.depth_m, self.d_max
                )));
            }
            if let Some([x0, y0, x1, y1]) = l.extent {
                if !(0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0) {
                    return Err(Error::Config(format!("layer extent {:?} is not a sub-rectangle of [0,1]²", l.extent)));
                }
            }
        }
        self.rig()?.validate()
    }
}

/// A continuous RGB texture sampled at image-plane coordinates.
trait Texture {
    fn sample(&self, x: f64, y: f64, out: &mut [f64; 3]);
}

/// Value noise: per-octave random lattices, bilinearly interpolated and blended.
struct ValueNoise {
    octaves: Vec<(f64, f64, Lattice)>,
}

struct Lattice {
    cols: usize,
    rows: usize,
    x0: f64,
    values: Vec<[f64; 3]>,
}

impl Lattice {
    fn random(rng: &mut ChaCha8Rng, cell: f64, x_range: (f64, f64), height: f64) -> Self {
        let cols = ((x_range.1 - x_range.0) / cell).ceil() as usize + 2;
        let rows = (height / cell).ceil() as usize + 2;
        let values = (0..cols * rows).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        Self { cols, rows, x0: x_range.0, values }
    }

    fn sample(&self, u: f64, v: f64, out: &mut [f64; 3]) {
        let (u, v) = (u.clamp(0.0, (self.cols - 1) as f64 - 1e-9), v.clamp(0.0, (self.rows - 1) as f64 - 1e-9));
        let (i, j) = (v.floor() as usize, u.floor() as usize);
        let (fy, fx) = (v - i as f64, u - j as f64);
        let at = |r: usize, c: usize| &self.values[r * self.cols + c];
        let (a, b, c, d) = (at(i, j), at(i, j + 1), at(i + 1, j), at(i + 1, j + 1));
        for k in 0..3 {
            out[k] = (1.0 - fy) * ((1.0 - fx) * a[k] + fx * b[k]) + fy * ((1.0 - fx) * c[k] + fx * d[k]);
        }
    }
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, x_range: (f64, f64), height: f64) -> Self {
        // fine cells dominate so every window carries matchable detail
        let octaves = [(1.5, 0.45), (3.0, 0.25), (6.0, 0.18), (12.0, 0.12)]
            .into_iter()
            .map(|(cell, w)| (cell, w, Lattice::random(rng, cell, x_range, height)))
            .collect();
        Self { octaves }
    }
}

impl Texture for ValueNoise {
    fn sample(&self, x: f64, y: f64, out: &mut [f64; 3]) {
        *out = [0.0; 3];
        let mut tmp = [0.0; 3];
        for (cell, w, lat) in &self.octaves {
            lat.sample((x - lat.x0) / cell, y / cell, &mut tmp);
            for k in 0..3 {
                out[k] += w * tmp[k];
            }
        }
    }
}

struct Stripes {
    dir: (f64, f64),
    period: f64,
    phase: f64,
    tint: [f64; 3],
    noise: ValueNoise,
}

impl Texture for Stripes {
    fn sample(&self, x: f64, y: f64, out: &mut [f64; 3]) {
        let mut n = [0.0; 3];
        self.noise.sample(x, y, &mut n);
        let s = 0.5 + 0.5 * (std::f64::consts::TAU * (self.dir.0 * x + self.dir.1 * y) / self.period + self.phase).sin();
        for k in 0..3 {
            out[k] = (0.75 * s * self.tint[k] + 0.25 * n[k]).clamp(0.0, 1.0);
        }
    }
}

struct Photo {
    image: Image,
    offset: (f64, f64),
}

impl Texture for Photo {
    fn sample(&self, x: f64, y: f64, out: &mut [f64; 3]) {
        let (h, w) = (self.image.height() as f64, self.image.width() as f64);
        let u = (x + self.offset.0 - 0.5).rem_euclid(w);
        let v = (y + self.offset.1 - 0.5).rem_euclid(h);
        let (j0, i0) = (u.floor() as usize, v.floor() as usize);
        let (j1, i1) = ((j0 + 1) % self.image.width(), (i0 + 1) % self.image.height());
        let (fx, fy) = (u - j0 as f64, v - i0 as f64);
        let ch = self.image.channels();
        for k in 0..3 {
            let kk = k.min(ch - 1);
            let g = |i, j| self.image.get(i, j, kk);
            out[k] = (1.0 - fy) * ((1.0 - fx) * g(i0, j0) + fx * g(i0, j1)) + fy * ((1.0 - fx) * g(i1, j0) + fx * g(i1, j1));
        }
    }
}

fn make_texture(kind: &TextureKind, rng: &mut ChaCha8Rng, x_range: (f64, f64), height: f64) -> Result<Box<dyn Texture>> {
    Ok(match kind {
        TextureKind::Noise => Box::new(ValueNoise::new(rng, x_range, height)),
        TextureKind::Stripes => {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            Box::new(Stripes {
                dir: (angle.cos(), angle.sin()),
                period: rng.gen_range(6.0..24.0),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                tint: [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)],
                noise: ValueNoise::new(rng, x_range, height),
            })
        }
        TextureKind::Photo { path } => {
            let image = Image::load_png(path)?;
            let offset = (rng.gen_range(0.0..image.width() as f64), rng.gen_range(0.0..image.height() as f64));
            Box::new(Photo { image, offset })
        }
    })
}

/// Renders a stereo pair from `spec`; the same seed always gives the same scene.
pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec, seed: u64) -> Result<StereoScene> {
    spec.validate()?;
    let rig = spec.rig()?;
    let (h, w) = (spec.height, spec.width);
    let fb = spec.focal_px * spec.baseline_m;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_range = (-8.0, w as f64 + spec.d_max as f64 + 8.0);
    // nearest first, so the first covering layer is the visible one
    let mut order: Vec<usize> = (0..spec.layers.len()).collect();
    order.sort_by(|&a, &b| spec.layers[a].depth_m.total_cmp(&spec.layers[b].depth_m));
    let textures = spec
        .layers
        .iter()
        .map(|_| make_texture(&spec.texture, &mut rng, x_range, h as f64))
        .collect::<Result<Vec<_>>>()?;
    let rects: Vec<[f64; 4]> = spec
        .layers
        .iter()
        .map(|l| {
            let [x0, y0, x1, y1] = l.extent.unwrap_or([0.0, 0.0, 1.0, 1.0]);
            let full = |v: f64, lo: f64, hi: f64, n: f64| if v <= lo { f64::NEG_INFINITY } else if v >= hi { f64::INFINITY } else { v * n };
            [full(x0, 0.0, 1.0, w as f64), full(y0, 0.0, 1.0, h as f64), full(x1, 0.0, 1.0, w as f64), full(y1, 0.0, 1.0, h as f64)]
        })
        .collect();
    let covers = |i: usize, x: f64, y: f64| {
        let [x0, y0, x1, y1] = rects[i];
        x >= x0 && x < x1 && y >= y0 && y < y1
    };
    let disp: Vec<f64> = spec.layers.iter().map(|l| fb / l.depth_m).collect();
    let mut left = Image::new(h, w, 3);
    let mut right = Image::new(h, w, 3);
    let mut gt = DisparityMap::new(h, w);
    let mut px = [0.0; 3];
    for r in 0..h {
        let y = r as f64 + 0.5;
        for c in 0..w {
            let x = c as f64 + 0.5;
            // left view: plane coordinates coincide with left image coordinates
            let i = *order.iter().find(|&&i| covers(i, x, y)).unwrap_or(&order[order.len() - 1]);
            textures[i].sample(x, y, &mut px);
            for k in 0..3 {
                left.set(r, c, k, px[k]);
            }
            gt.set(r, c, disp[i]);
            // right view: plane i shows its left-image point x + d_i here
            let j = *order.iter().find(|&&j| covers(j, x + disp[j], y)).unwrap_or(&order[order.len() - 1]);
            textures[j].sample(x + disp[j], y, &mut px);
            for k in 0..3 {
                right.set(r, c, k, px[k]);
            }
        }
    }
    left.clamp_unit();
    right.clamp_unit();
    StereoScene::new(format!("synthetic-{seed:04}"), left, right, Some(gt), rig)
}

/// A pair where the right view is the left texture shifted by a constant `shift` pixels.
pub fn constant_shift_pair(height: usize, width: usize, shift: f64, seed: u64) -> Result<StereoScene> {
    let spec = SyntheticSceneSpec {
        height,
        width,
        layers: vec![PlaneLayer { depth_m: 360.0 * 0.54 / shift, extent: None }],
        d_max: shift.ceil() as usize + 1,
        ..Default::default()
    };
    generate_synthetic_scene(&spec, seed)
}

//! Differentiable window-matching stereo and the model contract the attack targets.
//!
//! The built-in matcher scores every disparity with a windowed mean absolute
//! difference (edge-replicated borders) and relaxes `argmin_d C(x, d)` with a
//! temperature softmax. Both stages have hand-written adjoints so the attack
//! can pull gradients back to the input images.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DisparityMap, Image, Mask};

/// Costs for every pixel and disparity, stored disparity-major (`d * H * W + r * W + c`).
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    height: usize,
    width: usize,
    d_max: usize,
    costs: Vec<f64>,
}

impl CostVolume {
    pub fn from_fn(height: usize, width: usize, d_max: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        if d_max < 1 {
            return Err(Error::Domain("cost volume needs d_max >= 1".into()));
        }
        let mut costs = vec![0.0; (d_max + 1) * height * width];
        for d in 0..=d_max {
            for r in 0..height {
                for c in 0..width {
                    let v = f(r, c, d);
                    if !v.is_finite() {
                        return Err(Error::Numerical(format!("non-finite cost at ({r},{c},{d})")));
                    }
                    costs[(d * height + r) * width + c] = v;
                }
            }
        }
        Ok(Self { height, width, d_max, costs })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, d: usize) -> f64 {
        self.costs[(d * self.height + row) * self.width + col]
    }

    pub fn slice(&self, d: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.costs[d * n..(d + 1) * n]
    }

    /// Cost curve `C(x, ·)` of one pixel.
    pub fn curve(&self, row: usize, col: usize) -> Vec<f64> {
        (0..=self.d_max).map(|d| self.get(row, col, d)).collect()
    }
}

#[inline]
fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

fn check_pair(left: &Image, right: &Image, d_max: usize, window: usize) -> Result<()> {
    if !left.same_shape(right) {
        return Err(Error::Domain(format!("image shapes differ: {:?} vs {:?}", left.dims(), right.dims())));
    }
    if window < 3 || window % 2 == 0 {
        return Err(Error::Domain(format!("window must be odd and >= 3, got {window}")));
    }
    if d_max < 1 || d_max >= left.width() {
        return Err(Error::Domain(format!("d_max {d_max} must lie in [1, width={})", left.width())));
    }
    Ok(())
}

/// Windowed mean absolute difference between `left(x)` and `right(x − d)`,
/// multiplied by `intensity_scale` (255 expresses costs in 8-bit levels).
pub fn cost_volume(left: &Image, right: &Image, d_max: usize, window: usize, intensity_scale: f64) -> Result<CostVolume> {
    check_pair(left, right, d_max, window)?;
    let (h, w, ch) = left.dims();
    let rad = window / 2;
    let (eh, ew) = (h + 2 * rad, w + 2 * rad);
    let norm = intensity_scale / (ch as f64 * (window * window) as f64);
    let n = h * w;
    let mut costs = vec![0.0; (d_max + 1) * n];
    costs.par_chunks_mut(n).enumerate().for_each(|(d, out)| {
        // per-pixel absolute difference on the extended (edge-replicated) grid
        let mut diff = vec![0.0; eh * ew];
        for er in 0..eh {
            let r = clamp_idx(er as i64 - rad as i64, h);
            for ec in 0..ew {
                let x = ec as i64 - rad as i64;
                let cl = clamp_idx(x, w);
                let cr = clamp_idx(x - d as i64, w);
                let a = left.pixel(r, cl);
                let b = right.pixel(r, cr);
                diff[er * ew + ec] = a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum();
            }
        }
        box_sum(&diff, eh, ew, window, out, h, w);
        out.iter_mut().for_each(|v| *v *= norm);
    });
    Ok(CostVolume { height: h, width: w, d_max, costs })
}

/// `out[r][c] = Σ_{i,j < window} src[r + i][c + j]` for an `(h + window − 1) × (w + window − 1)` source.
fn box_sum(src: &[f64], sh: usize, sw: usize, window: usize, out: &mut [f64], h: usize, w: usize) {
    let mut rows = vec![0.0; sh * w];
    for r in 0..sh {
        let row = &src[r * sw..(r + 1) * sw];
        for c in 0..w {
            rows[r * w + c] = row[c..c + window].iter().sum();
        }
    }
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for k in 0..window {
                acc += rows[(r + k) * w + c];
            }
            out[r * w + c] = acc;
        }
    }
}

/// Adjoint of [`cost_volume`]: image gradients given `dL/dC` (same layout as the volume).
pub fn cost_volume_backward(
    left: &Image,
    right: &Image,
    grad: &CostVolume,
    window: usize,
    intensity_scale: f64,
) -> (Image, Image) {
    let (h, w, ch) = left.dims();
    let rad = window / 2;
    let (eh, ew) = (h + 2 * rad, w + 2 * rad);
    let norm = intensity_scale / (ch as f64 * (window * window) as f64);
    let n = h * w;
    const CHUNK: usize = 8;
    let d_count = grad.d_max + 1;
    let partials: Vec<(Image, Image)> = (0..d_count.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut gl = Image::new(h, w, ch);
            let mut gr = Image::new(h, w, ch);
            // zero-padded copy of the incoming slice: padded[r + 2rad][c + 2rad]
            let (ph, pw) = (h + 4 * rad, w + 4 * rad);
            let mut padded = vec![0.0; ph * pw];
            let mut spread = vec![0.0; eh * ew];
            for d in chunk * CHUNK..((chunk + 1) * CHUNK).min(d_count) {
                let g = &grad.costs[d * n..(d + 1) * n];
                if g.iter().all(|v| *v == 0.0) {
                    continue;
                }
                for r in 0..h {
                    let dst = (r + 2 * rad) * pw + 2 * rad;
                    padded[dst..dst + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                // each extended cell receives the sum over windows covering it
                box_sum(&padded, ph, pw, window, &mut spread, eh, ew);
                for er in 0..eh {
                    let r = clamp_idx(er as i64 - rad as i64, h);
                    for ec in 0..ew {
                        let s = spread[er * ew + ec];
                        if s == 0.0 {
                            continue;
                        }
                        let x = ec as i64 - rad as i64;
                        let cl = clamp_idx(x, w);
                        let cr = clamp_idx(x - d as i64, w);
                        for k in 0..ch {
                            let diff = left.get(r, cl, k) - right.get(r, cr, k);
                            let sg = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            if sg != 0.0 {
                                let v = s * norm * sg;
                                gl.add_at(r, cl, k, v);
                                gr.add_at(r, cr, k, -v);
                            }
                        }
                    }
                }
            }
            (gl, gr)
        })
        .collect();
    let mut gl = Image::new(h, w, ch);
    let mut gr = Image::new(h, w, ch);
    for (a, b) in &partials {
        gl.add_scaled(a, 1.0);
        gr.add_scaled(b, 1.0);
    }
    (gl, gr)
}

fn softmax_weights(volume: &CostVolume, temperature: f64, row: usize, col: usize, out: &mut [f64]) {
    let mut min = f64::INFINITY;
    for (d, o) in out.iter_mut().enumerate() {
        *o = volume.get(row, col, d);
        min = min.min(*o);
    }
    let mut z = 0.0;
    for o in out.iter_mut() {
        *o = (-(*o - min) / temperature).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// `d(x) = Σ_d d · softmax(−C(x, ·)/T)_d`.
pub fn soft_argmin(volume: &CostVolume, temperature: f64) -> Result<DisparityMap> {
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
    }
    let (h, w) = (volume.height, volume.width);
    let mut values = vec![0.0; h * w];
    values.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
        let mut weights = vec![0.0; volume.d_max + 1];
        for (c, v) in row.iter_mut().enumerate() {
            softmax_weights(volume, temperature, r, c, &mut weights);
            *v = weights.iter().enumerate().map(|(d, p)| d as f64 * p).sum();
        }
    });
    DisparityMap::from_vec(h, w, values)
}

/// Adjoint of [`soft_argmin`]: `∂d/∂C_k = −p_k (k − d) / T`.
pub fn soft_argmin_backward(volume: &CostVolume, temperature: f64, grad: &DisparityMap) -> CostVolume {
    let (h, w) = (volume.height, volume.width);
    let n = h * w;
    let d_count = volume.d_max + 1;
    // pixel-major scratch, transposed into the volume layout afterwards
    let mut per_pixel = vec![0.0; n * d_count];
    per_pixel.par_chunks_mut(w * d_count).enumerate().for_each(|(r, row)| {
        let mut weights = vec![0.0; d_count];
        for c in 0..w {
            let g = grad.get(r, c);
            let out = &mut row[c * d_count..(c + 1) * d_count];
            if g == 0.0 {
                continue;
            }
            softmax_weights(volume, temperature, r, c, &mut weights);
            let mean: f64 = weights.iter().enumerate().map(|(d, p)| d as f64 * p).sum();
            for (d, o) in out.iter_mut().enumerate() {
                *o = -g * weights[d] * (d as f64 - mean) / temperature;
            }
        }
    });
    let mut costs = vec![0.0; d_count * n];
    for p in 0..n {
        for d in 0..d_count {
            costs[d * n + p] = per_pixel[p * d_count + d];
        }
    }
    CostVolume { height: h, width: w, d_max: volume.d_max, costs }
}

/// How strongly the cost curves repeat with shift `period`: mean over pixels of the
/// zero-mean cosine similarity between `C(x, d)` and `C(x, d + period)`, floored at 0.
/// Pixels with flat curves carry no information and are skipped.
pub fn periodicity_score(volume: &CostVolume, period: usize) -> Result<f64> {
    periodicity_score_masked(volume, period, None)
}

pub fn periodicity_score_masked(volume: &CostVolume, period: usize, mask: Option<&Mask>) -> Result<f64> {
    if period < 1 || period > volume.d_max / 2 {
        return Err(Error::Domain(format!("period must lie in [1, {}], got {period}", volume.d_max / 2)));
    }
    let len = volume.d_max + 1 - period;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..volume.height {
        for c in 0..volume.width {
            if let Some(m) = mask {
                if !m.get(r, c) {
                    continue;
                }
            }
            let curve = volume.curve(r, c);
            let (a, b) = (&curve[..len], &curve[period..]);
            let ma = a.iter().sum::<f64>() / len as f64;
            let mb = b.iter().sum::<f64>() / len as f64;
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                dot += (x - ma) * (y - mb);
                na += (x - ma).powi(2);
                nb += (y - mb).powi(2);
            }
            if na < 1e-18 || nb < 1e-18 {
                continue;
            }
            total += (dot / (na.sqrt() * nb.sqrt())).max(0.0);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// A stereo model the attack can target: deterministic, differentiable in both images.
pub trait StereoModel: Send + Sync {
    fn name(&self) -> &str;

    fn d_max(&self) -> usize;

    fn forward(&self, left: &Image, right: &Image) -> Result<DisparityMap>;

    /// Runs the model, asks `upstream` for `dL/d(disparity)`, and returns the
    /// prediction with `dL/d(left)` and `dL/d(right)`.
    fn forward_backward(
        &self,
        left: &Image,
        right: &Image,
        upstream: &mut dyn FnMut(&DisparityMap) -> Result<DisparityMap>,
    ) -> Result<ModelGrad>;

    /// `Some` when each prediction depends only on a bounded neighbourhood, letting
    /// callers evaluate on crops without changing the result.
    fn support(&self) -> Option<Support> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub disparity: DisparityMap,
    pub grad_left: Image,
    pub grad_right: Image,
}

/// Receptive field of a local model: `halo` pixels on every side plus `reach_left`
/// extra columns to the left (the disparity search range).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Support {
    pub halo: usize,
    pub reach_left: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    pub window: usize,
    pub d_max: usize,
    pub temperature: f64,
    /// Multiplies intensity differences before the softmax; 255 = 8-bit levels.
    pub intensity_scale: f64,
    /// 1 disables the pyramid; up to 3 averages coarse-level predictions in.
    pub pyramid_levels: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self { window: 7, d_max: 96, temperature: 0.5, intensity_scale: 255.0, pyramid_levels: 1 }
    }
}

/// Cost volume + soft-argmin matcher, optionally averaged over an image pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltinMatcher {
    config: MatcherConfig,
}

impl BuiltinMatcher {
    pub fn new(config: MatcherConfig) -> Result<Self> {
        if config.window < 3 || config.window % 2 == 0 {
            return Err(Error::Config(format!("matcher window must be odd and >= 3, got {}", config.window)));
        }
        if !(config.temperature > 0.0) || !(config.intensity_scale > 0.0) {
            return Err(Error::Config("matcher temperature and intensity scale must be positive".into()));
        }
        if !(1..=3).contains(&config.pyramid_levels) {
            return Err(Error::Config(format!("pyramid_levels must be 1..=3, got {}", config.pyramid_levels)));
        }
        if config.d_max < 1 {
            return Err(Error::Config("d_max must be at least 1".into()));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &MatcherConfig {
        &self.config
    }

    fn level_d_max(&self, level: usize) -> usize {
        (self.config.d_max >> level).max(1)
    }

    fn check_levels(&self, left: &Image) -> Result<()> {
        let top = self.config.pyramid_levels - 1;
        let (h, w) = (left.height() >> top, left.width() >> top);
        if h < self.config.window || w <= self.level_d_max(top) {
            return Err(Error::Domain(format!(
                "{}x{} images are too small for {} pyramid levels",
                left.height(),
                left.width(),
                self.config.pyramid_levels
            )));
        }
        Ok(())
    }

    /// Volume and soft-argmin at one resolution.
    fn level_forward(&self, left: &Image, right: &Image, d_max: usize) -> Result<(CostVolume, DisparityMap)> {
        let vol = cost_volume(left, right, d_max, self.config.window, self.config.intensity_scale)?;
        let disp = soft_argmin(&vol, self.config.temperature)?;
        Ok((vol, disp))
    }
}

/// 2×2 box average, dropping a trailing odd row/column.
fn downsample(img: &Image) -> Image {
    let (h, w, ch) = (img.height() / 2, img.width() / 2, img.channels());
    Image::from_fn(h, w, ch, |r, c, k| {
        0.25 * (img.get(2 * r, 2 * c, k) + img.get(2 * r + 1, 2 * c, k) + img.get(2 * r, 2 * c + 1, k) + img.get(2 * r + 1, 2 * c + 1, k))
    })
}

fn downsample_backward(grad: &Image, full: (usize, usize)) -> Image {
    let mut out = Image::new(full.0, full.1, grad.channels());
    for r in 0..grad.height() {
        for c in 0..grad.width() {
            for k in 0..grad.channels() {
                let g = 0.25 * grad.get(r, c, k);
                out.add_at(2 * r, 2 * c, k, g);
                out.add_at(2 * r + 1, 2 * c, k, g);
                out.add_at(2 * r, 2 * c + 1, k, g);
                out.add_at(2 * r + 1, 2 * c + 1, k, g);
            }
        }
    }
    out
}

impl StereoModel for BuiltinMatcher {
    fn name(&self) -> &str {
        "builtin"
    }

    fn d_max(&self) -> usize {
        self.config.d_max
    }

    fn forward(&self, left: &Image, right: &Image) -> Result<DisparityMap> {
        check_pair(left, right, self.config.d_max, self.config.window)?;
        if self.config.pyramid_levels == 1 {
            return self.level_forward(left, right, self.config.d_max).map(|(_, d)| d);
        }
        self.check_levels(left)?;
        let (h, w) = (left.height(), left.width());
        let levels = self.config.pyramid_levels;
        let mut out = DisparityMap::new(h, w);
        let (mut l, mut r) = (left.clone(), right.clone());
        for level in 0..levels {
            if level > 0 {
                l = downsample(&l);
                r = downsample(&r);
            }
            let (_, disp) = self.level_forward(&l, &r, self.level_d_max(level))?;
            let scale = (1usize << level) as f64;
            for row in 0..h {
                for col in 0..w {
                    let v = disp.get((row >> level).min(disp.height() - 1), (col >> level).min(disp.width() - 1));
                    let cur = out.get(row, col);
                    out.set(row, col, cur + scale * v / levels as f64);
                }
            }
        }
        Ok(out)
    }

    fn forward_backward(
        &self,
        left: &Image,
        right: &Image,
        upstream: &mut dyn FnMut(&DisparityMap) -> Result<DisparityMap>,
    ) -> Result<ModelGrad> {
        check_pair(left, right, self.config.d_max, self.config.window)?;
        let (h, w) = (left.height(), left.width());
        let levels = self.config.pyramid_levels;
        if levels > 1 {
            self.check_levels(left)?;
        }
        let mut pyr = vec![(left.clone(), right.clone())];
        for level in 1..levels {
            let (l, r) = &pyr[level - 1];
            pyr.push((downsample(l), downsample(r)));
        }
        let mut vols = Vec::with_capacity(levels);
        let mut disparity = DisparityMap::new(h, w);
        for (level, (l, r)) in pyr.iter().enumerate() {
            let (vol, disp) = self.level_forward(l, r, self.level_d_max(level))?;
            if levels == 1 {
                disparity = disp.clone();
            } else {
                let scale = (1usize << level) as f64 / levels as f64;
                for row in 0..h {
                    for col in 0..w {
                        let v = disp.get((row >> level).min(disp.height() - 1), (col >> level).min(disp.width() - 1));
                        let cur = disparity.get(row, col);
                        disparity.set(row, col, cur + scale * v);
                    }
                }
            }
            vols.push(vol);
        }
        let grad_out = upstream(&disparity)?;
        if grad_out.dims() != (h, w) {
            return Err(Error::Domain("upstream gradient has the wrong shape".into()));
        }
        let mut grads: Vec<(Image, Image)> = Vec::with_capacity(levels);
        for (level, ((l, r), vol)) in pyr.iter().zip(&vols).enumerate() {
            let g_level = if levels == 1 {
                grad_out.clone()
            } else {
                let scale = (1usize << level) as f64 / levels as f64;
                let mut g = DisparityMap::new(l.height(), l.width());
                for row in 0..h {
                    for col in 0..w {
                        let (rr, cc) = ((row >> level).min(l.height() - 1), (col >> level).min(l.width() - 1));
                        let cur = g.get(rr, cc);
                        g.set(rr, cc, cur + scale * grad_out.get(row, col));
                    }
                }
                g
            };
            let gc = soft_argmin_backward(vol, self.config.temperature, &g_level);
            grads.push(cost_volume_backward(l, r, &gc, self.config.window, self.config.intensity_scale));
        }
        // fold coarse gradients back to full resolution
        while grads.len() > 1 {
            let (gl, gr) = grads.pop().expect("non-empty");
            let level = grads.len() - 1;
            let size = (pyr[level].0.height(), pyr[level].0.width());
            let (ul, ur) = (downsample_backward(&gl, size), downsample_backward(&gr, size));
            let last = grads.last_mut().expect("non-empty");
            last.0.add_scaled(&ul, 1.0);
            last.1.add_scaled(&ur, 1.0);
        }
        let (grad_left, grad_right) = grads.pop().expect("one level");
        Ok(ModelGrad { disparity, grad_left, grad_right })
    }

    fn support(&self) -> Option<Support> {
        // pyramid downsampling is not translation-equivariant under arbitrary crops
        (self.config.pyramid_levels == 1).then(|| Support { halo: self.config.window / 2, reach_left: self.config.d_max })
    }
}

type ForwardFn = dyn Fn(&Image, &Image) -> Result<DisparityMap> + Send + Sync;
type VjpFn = dyn Fn(&Image, &Image, &DisparityMap) -> Result<(Image, Image)> + Send + Sync;

/// Adapter for external models: a forward pass plus a vector-Jacobian product.
pub struct FnModel {
    name: String,
    d_max: usize,
    forward: Box<ForwardFn>,
    vjp: Box<VjpFn>,
}

impl FnModel {
    pub fn new(
        name: impl Into<String>,
        d_max: usize,
        forward: impl Fn(&Image, &Image) -> Result<DisparityMap> + Send + Sync + 'static,
        vjp: impl Fn(&Image, &Image, &DisparityMap) -> Result<(Image, Image)> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), d_max, forward: Box::new(forward), vjp: Box::new(vjp) }
    }
}

impl StereoModel for FnModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn d_max(&self) -> usize {
        self.d_max
    }

    fn forward(&self, left: &Image, right: &Image) -> Result<DisparityMap> {
        (self.forward)(left, right)
    }

    fn forward_backward(
        &self,
        left: &Image,
        right: &Image,
        upstream: &mut dyn FnMut(&DisparityMap) -> Result<DisparityMap>,
    ) -> Result<ModelGrad> {
        let disparity = (self.forward)(left, right)?;
        let g = upstream(&disparity)?;
        let (grad_left, grad_right) = (self.vjp)(left, right, &g)?;
        Ok(ModelGrad { disparity, grad_left, grad_right })
    }
}

type Factory = dyn Fn(&MatcherConfig) -> Result<Arc<dyn StereoModel>> + Send + Sync;

/// Name → constructor table used by configuration files to select a target model.
pub struct ModelRegistry {
    factories: BTreeMap<String, Box<Factory>>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        let mut reg = Self { factories: BTreeMap::new() };
        reg.register("builtin", |cfg| Ok(Arc::new(BuiltinMatcher::new(cfg.clone())?) as Arc<dyn StereoModel>));
        reg
    }
}

impl ModelRegistry {
    pub fn register(
        &mut self,
        name: impl Into<String>,
        factory: impl Fn(&MatcherConfig) -> Result<Arc<dyn StereoModel>> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.into(), Box::new(factory));
    }

    pub fn create(&self, name: &str, config: &MatcherConfig) -> Result<Arc<dyn StereoModel>> {
        let f = self.factories.get(name).ok_or_else(|| {
            Error::Config(format!("unknown model '{name}' (registered: {:?})", self.names()))
        })?;
        f(config)
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }
}

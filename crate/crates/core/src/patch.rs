//! Patch construction from a texture element and an interval mask.
//!
//! The mask `M` marks interval (and margin) pixels; the patch decomposes as
//! `P = P_s + P_t` with `P_s = M ⊙ P` the interval structure and
//! `P_t = (1 − M) ⊙ P` the tiled texture. Assembly is linear in the element,
//! so its adjoint ([`assemble_backward`]) sums the gradients of every anchored
//! copy.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchMode {
    /// `k` intervals of width `o` separating `k + 1` elements per axis.
    Grid,
    /// `k` elements per axis with no intervals.
    Tiled,
}

/// Which interval bands a grid-mode patch carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IntervalAxes {
    #[default]
    Both,
    /// Horizontal bands only (gaps between element rows).
    Horizontal,
    /// Vertical bands only (gaps between element columns).
    Vertical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// `(k_v, k_h)`
    pub reps: (usize, usize),
    #[serde(default)]
    pub interval_px: usize,
    #[serde(default = "white")]
    pub interval_value: [f64; 3],
    pub mode: PatchMode,
    #[serde(default)]
    pub axes: IntervalAxes,
}

fn white() -> [f64; 3] {
    [1.0; 3]
}

impl GridSpec {
    pub fn grid(reps: (usize, usize), interval_px: usize) -> Self {
        Self { reps, interval_px, interval_value: white(), mode: PatchMode::Grid, axes: IntervalAxes::Both }
    }

    pub fn tiled(reps: (usize, usize)) -> Self {
        Self { reps, interval_px: 0, interval_value: white(), mode: PatchMode::Tiled, axes: IntervalAxes::Both }
    }

    pub fn with_axes(mut self, axes: IntervalAxes) -> Self {
        self.axes = axes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps.0 < 1 || self.reps.1 < 1 {
            return Err(Error::Domain(format!("reps must be at least (1,1), got {:?}", self.reps)));
        }
        match self.mode {
            PatchMode::Grid if self.interval_px < 1 => {
                Err(Error::Domain("grid mode requires an interval of at least 1 px".into()))
            }
            PatchMode::Tiled if self.interval_px != 0 => {
                Err(Error::Domain("tiled mode has no intervals; interval_px must be 0".into()))
            }
            _ if self.interval_value.iter().any(|v| !(0.0..=1.0).contains(v)) => {
                Err(Error::Domain("interval value must lie in [0,1]".into()))
            }
            _ => Ok(()),
        }
    }

    /// Interval widths `(vertical axis, horizontal axis)`: the height of horizontal
    /// bands and the width of vertical bands.
    fn axis_intervals(&self) -> (usize, usize) {
        match self.axes {
            IntervalAxes::Both => (self.interval_px, self.interval_px),
            IntervalAxes::Horizontal => (self.interval_px, 0),
            IntervalAxes::Vertical => (0, self.interval_px),
        }
    }

    /// Number of element copies per axis.
    pub fn copies(&self) -> (usize, usize) {
        match self.mode {
            PatchMode::Grid => (self.reps.0 + 1, self.reps.1 + 1),
            PatchMode::Tiled => self.reps,
        }
    }
}

/// Element size for grid mode: `(h_p − k·o)/(k+1)` per axis, floored.
pub fn element_size_grid(h_p: usize, w_p: usize, spec: &GridSpec) -> Result<(usize, usize)> {
    spec.validate()?;
    if spec.mode != PatchMode::Grid {
        return Err(Error::Domain("element_size_grid requires grid mode".into()));
    }
    let (o_v, o_h) = spec.axis_intervals();
    let axis = |len: usize, k: usize, o: usize, name: &str| -> Result<usize> {
        let used = k * o;
        if len <= used {
            return Err(Error::PatchTooSmall(format!("{name} of {len} px cannot hold {k} intervals of {o} px")));
        }
        let t = (len - used) / (k + 1);
        if t < 2 {
            return Err(Error::PatchTooSmall(format!("{name} element would be {t} px (minimum 2)")));
        }
        Ok(t)
    };
    Ok((axis(h_p, spec.reps.0, o_v, "height")?, axis(w_p, spec.reps.1, o_h, "width")?))
}

/// Element size for tiled mode: `h_p / k` per axis, floored.
pub fn element_size_tiled(h_p: usize, w_p: usize, spec: &GridSpec) -> Result<(usize, usize)> {
    spec.validate()?;
    if spec.mode != PatchMode::Tiled {
        return Err(Error::Domain("element_size_tiled requires tiled mode".into()));
    }
    let (h_t, w_t) = (h_p / spec.reps.0, w_p / spec.reps.1);
    if h_t < 2 || w_t < 2 {
        return Err(Error::PatchTooSmall(format!("{h_p}x{w_p} patch gives a {h_t}x{w_t} element (minimum 2x2)")));
    }
    Ok((h_t, w_t))
}

pub fn element_size(h_p: usize, w_p: usize, spec: &GridSpec) -> Result<(usize, usize)> {
    match spec.mode {
        PatchMode::Grid => element_size_grid(h_p, w_p, spec),
        PatchMode::Tiled => element_size_tiled(h_p, w_p, spec),
    }
}

/// A texture tile with every entry in `[0, 1]`, `h_t × w_t × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureElement(Image);

impl TextureElement {
    pub fn new(values: Image) -> Result<Self> {
        let (h, w, c) = values.dims();
        if c != 3 {
            return Err(Error::Domain(format!("texture element needs 3 channels, got {c}")));
        }
        if h < 2 || w < 2 {
            return Err(Error::PatchTooSmall(format!("texture element {h}x{w} is below 2x2")));
        }
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("texture element entries must lie in [0,1]".into()));
        }
        Ok(Self(values))
    }

    /// Entries drawn uniformly from `[lo, hi]` with a seeded generator.
    pub fn random(h_t: usize, w_t: usize, lo: f64, hi: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::from_fn(h_t, w_t, 3, |_, _, _| rng.gen_range(lo..=hi));
        Self::new(img)
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    pub fn size(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    /// Applies `values -= step`, then projects back onto `[0, 1]`.
    pub fn step_and_clamp(&mut self, step: &Image) {
        debug_assert!(self.0.same_shape(step));
        for (v, s) in self.0.data_mut().iter_mut().zip(step.data()) {
            *v = (*v - s).clamp(0.0, 1.0);
        }
    }
}

/// Anchor positions and mask of a patch layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLayout {
    pub patch_size: (usize, usize),
    pub element_size: (usize, usize),
    pub element_origins: Vec<(usize, usize)>,
    pub mask: Mask,
}

impl PatchLayout {
    pub fn new(spec: &GridSpec, h_p: usize, w_p: usize) -> Result<Self> {
        let (h_t, w_t) = element_size(h_p, w_p, spec)?;
        let (o_v, o_h) = match spec.mode {
            PatchMode::Grid => spec.axis_intervals(),
            PatchMode::Tiled => (0, 0),
        };
        let (n_v, n_h) = spec.copies();
        // Leftover pixels become an outer margin split between both sides.
        let used_v = n_v * h_t + (n_v - 1) * o_v;
        let used_h = n_h * w_t + (n_h - 1) * o_h;
        let top = (h_p - used_v) / 2;
        let left = (w_p - used_h) / 2;
        let mut origins = Vec::with_capacity(n_v * n_h);
        let mut mask = Mask::full(h_p, w_p);
        for i in 0..n_v {
            for j in 0..n_h {
                let r0 = top + i * (h_t + o_v);
                let c0 = left + j * (w_t + o_h);
                origins.push((r0, c0));
                for r in r0..r0 + h_t {
                    for c in c0..c0 + w_t {
                        mask.set(r, c, false);
                    }
                }
            }
        }
        Ok(Self { patch_size: (h_p, w_p), element_size: (h_t, w_t), element_origins: origins, mask })
    }
}

/// A patch image with its interval mask and element anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledPatch {
    pub image: Image,
    /// `true` on interval/margin pixels.
    pub mask: Mask,
    pub element_origins: Vec<(usize, usize)>,
    pub element_size: (usize, usize),
}

impl AssembledPatch {
    /// Wraps a fixed image (e.g. a baseline perturbation) with no interval structure.
    pub fn from_image(image: Image) -> Self {
        let (h, w, _) = image.dims();
        Self { mask: Mask::new(h, w), element_origins: vec![(0, 0)], element_size: (h, w), image }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.height(), self.image.width())
    }
}

/// Tiles `element` into a `h_p × w_p` patch, filling intervals and margins with the interval value.
pub fn assemble(element: &TextureElement, spec: &GridSpec, h_p: usize, w_p: usize) -> Result<AssembledPatch> {
    let layout = PatchLayout::new(spec, h_p, w_p)?;
    assemble_with_layout(element, spec, &layout)
}

pub fn assemble_with_layout(element: &TextureElement, spec: &GridSpec, layout: &PatchLayout) -> Result<AssembledPatch> {
    if element.size() != layout.element_size {
        return Err(Error::Assembly(format!(
            "element is {:?} but the layout expects {:?}",
            element.size(),
            layout.element_size
        )));
    }
    let (h_p, w_p) = layout.patch_size;
    let (h_t, w_t) = layout.element_size;
    let mut image = Image::new(h_p, w_p, 3);
    for (r, c) in layout.mask.iter_set() {
        for ch in 0..3 {
            image.set(r, c, ch, spec.interval_value[ch]);
        }
    }
    let e = element.image();
    for &(r0, c0) in &layout.element_origins {
        for r in 0..h_t {
            for c in 0..w_t {
                for ch in 0..3 {
                    image.set(r0 + r, c0 + c, ch, e.get(r, c, ch));
                }
            }
        }
    }
    Ok(AssembledPatch {
        image,
        mask: layout.mask.clone(),
        element_origins: layout.element_origins.clone(),
        element_size: layout.element_size,
    })
}

/// Adjoint of assembly: sums the patch gradient over every anchored copy.
/// Interval pixels contribute nothing.
pub fn assemble_backward(grad_patch: &Image, layout: &PatchLayout) -> Image {
    let (h_t, w_t) = layout.element_size;
    let mut grad = Image::new(h_t, w_t, 3);
    for &(r0, c0) in &layout.element_origins {
        for r in 0..h_t {
            for c in 0..w_t {
                for ch in 0..3 {
                    grad.add_at(r, c, ch, grad_patch.get(r0 + r, c0 + c, ch));
                }
            }
        }
    }
    grad
}

/// `(P_s, P_t)` with `P_s = M ⊙ P` and `P_t = (1 − M) ⊙ P`.
pub fn partition(patch: &AssembledPatch) -> (Image, Image) {
    let (h, w, c) = patch.image.dims();
    let mut ps = Image::new(h, w, c);
    let mut pt = Image::new(h, w, c);
    for r in 0..h {
        for col in 0..w {
            let target = if patch.mask.get(r, col) { &mut ps } else { &mut pt };
            for ch in 0..c {
                target.set(r, col, ch, patch.image.get(r, col, ch));
            }
        }
    }
    (ps, pt)
}

/// JSON sidecar stored next to an exported patch image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSidecar {
    pub grid: GridSpec,
    pub patch_size: (usize, usize),
    pub element_size: (usize, usize),
    pub element_origins: Vec<(usize, usize)>,
    /// Free-form provenance (attack mode, seed, step count, ...).
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

/// Writes `<stem>.png` and `<stem>.json` into `dir`.
pub fn save_patch(
    dir: &Path,
    stem: &str,
    patch: &AssembledPatch,
    spec: &GridSpec,
    metadata: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    patch.image.save_png(dir.join(format!("{stem}.png")))?;
    let sidecar = PatchSidecar {
        grid: spec.clone(),
        patch_size: patch.size(),
        element_size: patch.element_size,
        element_origins: patch.element_origins.clone(),
        metadata,
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Serde(e.to_string()))?;
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a patch exported by [`save_patch`]. The mask is rebuilt from the grid spec.
pub fn load_patch(dir: &Path, stem: &str) -> Result<(AssembledPatch, PatchSidecar)> {
    let image = Image::load_png(dir.join(format!("{stem}.png")))?;
    let path = dir.join(format!("{stem}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: PatchSidecar = serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    if (image.height(), image.width()) != sidecar.patch_size {
        return Err(Error::Assembly(format!(
            "patch image is {}x{} but sidecar says {:?}",
            image.height(),
            image.width(),
            sidecar.patch_size
        )));
    }
    let layout = PatchLayout::new(&sidecar.grid, sidecar.patch_size.0, sidecar.patch_size.1)?;
    let patch = AssembledPatch {
        image,
        mask: layout.mask,
        element_origins: layout.element_origins,
        element_size: layout.element_size,
    };
    Ok((patch, sidecar))
}

/// Cuts the element at the first anchor out of an assembled patch.
pub fn extract_element(patch: &AssembledPatch) -> Result<TextureElement> {
    let (r0, c0) = patch.element_origins[0];
    let (h, w) = patch.element_size;
    TextureElement::new(patch.image.crop(r0, c0, h, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_sizes() {
        let spec = GridSpec::grid((4, 5), 10);
        assert_eq!(element_size_grid(240, 181, &spec).unwrap(), (40, 21));
        let layout = PatchLayout::new(&spec, 240, 181).unwrap();
        // 6·21 + 5·10 = 176, margin 5 split 2 / 3
        assert_eq!(layout.element_origins[0], (0, 2));
        assert_eq!(layout.element_origins.len(), 30);
    }

    #[test]
    fn grid_requires_interval() {
        let mut spec = GridSpec::grid((1, 1), 0);
        assert!(element_size_grid(64, 64, &spec).is_err());
        spec.interval_px = 1;
        assert!(element_size_grid(64, 64, &spec).is_ok());
        assert!(element_size_grid(8, 64, &GridSpec::grid((4, 1), 2)).is_err());
    }

    #[test]
    fn tiled_sizes() {
        let spec = GridSpec::tiled((4, 5));
        assert_eq!(element_size_tiled(128, 180, &spec).unwrap(), (32, 36));
        assert_eq!(element_size_tiled(130, 180, &spec).unwrap(), (32, 36));
        let whole = GridSpec::tiled((1, 1));
        assert_eq!(element_size_tiled(37, 41, &whole).unwrap(), (37, 41));
        assert!(element_size_tiled(128, 180, &GridSpec::grid((4, 5), 3)).is_err());
    }

    #[test]
    fn tiled_spec_rejects_interval() {
        let mut spec = GridSpec::tiled((2, 2));
        spec.interval_px = 3;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn constant_element_grid_two_levels() {
        let spec = GridSpec::grid((2, 3), 4);
        let (h_t, w_t) = element_size(60, 80, &spec).unwrap();
        let e = TextureElement::new(Image::filled(h_t, w_t, 3, 0.5)).unwrap();
        let p = assemble(&e, &spec, 60, 80).unwrap();
        let ones = p.image.data().iter().filter(|v| **v == 1.0).count();
        let halves = p.image.data().iter().filter(|v| **v == 0.5).count();
        assert_eq!(ones + halves, p.image.data().len());
        assert_eq!(ones, 3 * p.mask.count());
    }

    #[test]
    fn tiled_checkerboard() {
        let e = Image::from_fn(2, 2, 3, |r, c, _| ((r + c) % 2) as f64);
        let e = TextureElement::new(e).unwrap();
        let spec = GridSpec::tiled((2, 2));
        let p = assemble(&e, &spec, 4, 4).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(p.image.get(r, c, 0), ((r + c) % 2) as f64);
            }
        }
        assert!(p.mask.is_empty());
        assert_eq!(p.element_origins.len(), 4);
    }

    #[test]
    fn mismatched_element_rejected() {
        let e = TextureElement::random(5, 5, 0.0, 1.0, 1).unwrap();
        assert!(matches!(assemble(&e, &GridSpec::tiled((2, 2)), 20, 20), Err(Error::Assembly(_))));
    }

    #[test]
    fn grid_mode_interval_bands() {
        let spec = GridSpec::grid((4, 5), 10);
        let layout = PatchLayout::new(&spec, 128, 181).unwrap();
        // count maximal runs of fully-masked rows strictly between elements
        let full_rows: Vec<bool> = (0..128).map(|r| (0..181).all(|c| layout.mask.get(r, c))).collect();
        let first = layout.element_origins[0].0;
        let last = layout.element_origins.last().unwrap().0 + layout.element_size.0;
        let mut bands = 0;
        let mut prev = false;
        for &b in &full_rows[first..last] {
            if b && !prev {
                bands += 1;
            }
            prev = b;
        }
        assert_eq!(bands, 4);
    }

    #[test]
    fn horizontal_only_has_no_vertical_bands() {
        let spec = GridSpec::grid((3, 3), 5).with_axes(IntervalAxes::Horizontal);
        let layout = PatchLayout::new(&spec, 64, 64).unwrap();
        assert_eq!(layout.element_size, (12, 16));
        let (r0, _) = layout.element_origins[0];
        assert!((0..64).all(|c| !layout.mask.get(r0, c)));
    }

    #[test]
    fn partition_examples() {
        let spec = GridSpec::grid((2, 2), 3);
        let (h_t, w_t) = element_size(40, 40, &spec).unwrap();
        let e = TextureElement::random(h_t, w_t, 0.0, 0.9, 3).unwrap();
        let p = assemble(&e, &spec, 40, 40).unwrap();
        let (ps, pt) = partition(&p);
        let max_ps = ps.data().iter().cloned().fold(0.0, f64::max);
        assert_eq!(max_ps, 1.0);
        let tiled = assemble(&TextureElement::random(20, 20, 0.0, 1.0, 4).unwrap(), &GridSpec::tiled((2, 2)), 40, 40).unwrap();
        let (ps, _) = partition(&tiled);
        assert!(ps.data().iter().all(|v| *v == 0.0));
        let _ = pt;
    }

    #[test]
    fn backward_counts_copies() {
        let spec = GridSpec::grid((2, 3), 2);
        let layout = PatchLayout::new(&spec, 30, 40).unwrap();
        let ones = Image::filled(30, 40, 3, 1.0);
        let g = assemble_backward(&ones, &layout);
        assert!(g.data().iter().all(|v| *v == 12.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let spec = GridSpec::grid((2, 2), 3);
        let layout = PatchLayout::new(&spec, 36, 40).unwrap();
        let (h_t, w_t) = layout.element_size;
        let e = TextureElement::random(h_t, w_t, 0.1, 0.9, 11).unwrap();
        let weights = Image::from_fn(36, 40, 3, |r, c, ch| ((r * 7 + c * 3 + ch) % 5) as f64 * 0.1);
        let objective = |el: &TextureElement| {
            let p = assemble_with_layout(el, &spec, &layout).unwrap();
            p.image.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = assemble_backward(&weights, &layout);
        let h = 1e-4;
        for idx in [0usize, 17, 50, 3 * h_t * w_t - 1] {
            let mut plus = e.image().clone();
            plus.data_mut()[idx] += h;
            let mut minus = e.image().clone();
            minus.data_mut()[idx] -= h;
            let fd = (objective(&TextureElement(plus)) - objective(&TextureElement(minus))) / (2.0 * h);
            let rel = (fd - g.data()[idx]).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-4, "idx {idx}: fd {fd} vs {}", g.data()[idx]);
        }
    }

    #[test]
    fn sidecar_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec::grid((2, 2), 3);
        let (h_t, w_t) = element_size(40, 44, &spec).unwrap();
        let e = TextureElement::new(TextureElement::random(h_t, w_t, 0.0, 1.0, 5).unwrap().image().quantized()).unwrap();
        let p = assemble(&e, &spec, 40, 44).unwrap();
        save_patch(dir.path(), "patch", &p, &spec, Default::default()).unwrap();
        let (back, sidecar) = load_patch(dir.path(), "patch").unwrap();
        assert_eq!(back, p);
        assert_eq!(sidecar.grid, spec);
    }

    proptest! {
        #[test]
        fn partition_and_tiling_identities(
            kv in 1usize..4, kh in 1usize..4, o in 0usize..4,
            extra_h in 0usize..20, extra_w in 0usize..20, seed in 0u64..1000
        ) {
            let spec = if o == 0 { GridSpec::tiled((kv, kh)) } else { GridSpec::grid((kv, kh), o) };
            let (n_v, n_h) = spec.copies();
            let h_p = n_v * 3 + kv * o + extra_h;
            let w_p = n_h * 3 + kh * o + extra_w;
            let layout = PatchLayout::new(&spec, h_p, w_p).unwrap();
            let (h_t, w_t) = layout.element_size;
            let e = TextureElement::random(h_t, w_t, 0.0, 1.0, seed).unwrap();
            let p = assemble_with_layout(&e, &spec, &layout).unwrap();
            let (ps, pt) = partition(&p);
            for i in 0..p.image.data().len() {
                prop_assert_eq!(ps.data()[i] + pt.data()[i], p.image.data()[i]);
            }
            for &(r0, c0) in &p.element_origins {
                prop_assert_eq!(&p.image.crop(r0, c0, h_t, w_t).unwrap(), e.image());
            }
            prop_assert_eq!(p.element_origins.len(), n_v * n_h);
        }
    }
}

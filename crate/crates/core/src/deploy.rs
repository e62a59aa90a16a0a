//! Perspective compositing of a patch into both views of a stereo scene.
//!
//! Each view gets a [`WarpPlan`]: for every image pixel whose center falls inside
//! the quad, the four bilinear taps into patch space (taps outside the patch are
//! dropped, i.e. zero-padded). Compositing is a hard replacement and linear in
//! the patch, so the adjoint simply scatters image gradients back through the
//! same taps.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, CameraRig, PatchPlacement, PixelQuad};
use crate::image::{DisparityMap, Image, Mask};
use crate::patch::AssembledPatch;

/// Largest fraction of a quad allowed outside the frame.
pub const MAX_CLIPPED_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct StereoScene {
    pub id: String,
    pub left: Image,
    pub right: Image,
    pub gt_disparity: Option<DisparityMap>,
    pub rig: CameraRig,
}

impl StereoScene {
    pub fn new(id: impl Into<String>, left: Image, right: Image, gt: Option<DisparityMap>, rig: CameraRig) -> Result<Self> {
        if !left.same_shape(&right) {
            return Err(Error::Domain(format!(
                "left {:?} and right {:?} images differ in shape",
                left.dims(),
                right.dims()
            )));
        }
        if let Some(gt) = &gt {
            if gt.dims() != (left.height(), left.width()) {
                return Err(Error::Domain("ground-truth disparity does not match the images".into()));
            }
        }
        Ok(Self { id: id.into(), left, right, gt_disparity: gt, rig })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.left.height(), self.left.width())
    }

    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> Result<Self> {
        let gt = match &self.gt_disparity {
            Some(g) => Some(g.crop(row0, col0, height, width)?),
            None => None,
        };
        Ok(Self {
            id: self.id.clone(),
            left: self.left.crop(row0, col0, height, width)?,
            right: self.right.crop(row0, col0, height, width)?,
            gt_disparity: gt,
            rig: self.rig.clone(),
        })
    }
}

/// Homography taking patch-space corners `(0,0), (w_p,0), (0,h_p), (w_p,h_p)` onto the quad.
///
/// Patch pixel `(i, j)` covers `[j, j+1] × [i, i+1]`; image pixel `(r, c)` has its
/// center at `(c + 0.5, r + 0.5)`.
pub fn homography_from_quad(source_size: (usize, usize), quad: &PixelQuad) -> Result<Matrix3<f64>> {
    let (h_p, w_p) = (source_size.0 as f64, source_size.1 as f64);
    if h_p <= 0.0 || w_p <= 0.0 {
        return Err(Error::DegeneratePlacement("empty source patch".into()));
    }
    // Axis-aligned rectangles get an exact scale + translation.
    if quad.top_left[1] == quad.top_right[1]
        && quad.bottom_left[1] == quad.bottom_right[1]
        && quad.top_left[0] == quad.bottom_left[0]
        && quad.top_right[0] == quad.bottom_right[0]
    {
        let sx = (quad.top_right[0] - quad.top_left[0]) / w_p;
        let sy = (quad.bottom_left[1] - quad.top_left[1]) / h_p;
        if !(sx > 0.0 && sy > 0.0) {
            return Err(Error::DegeneratePlacement("rectangle quad has non-positive extent".into()));
        }
        return Ok(Matrix3::new(sx, 0.0, quad.top_left[0], 0.0, sy, quad.top_left[1], 0.0, 0.0, 1.0));
    }
    let src = [[0.0, 0.0], [w_p, 0.0], [0.0, h_p], [w_p, h_p]];
    let dst = [quad.top_left, quad.top_right, quad.bottom_left, quad.bottom_right];
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for k in 0..4 {
        let [x, y] = src[k];
        let [u, v] = dst[k];
        let r = 2 * k;
        a[(r, 0)] = x;
        a[(r, 1)] = y;
        a[(r, 2)] = 1.0;
        a[(r, 6)] = -u * x;
        a[(r, 7)] = -u * y;
        b[r] = u;
        a[(r + 1, 3)] = x;
        a[(r + 1, 4)] = y;
        a[(r + 1, 5)] = 1.0;
        a[(r + 1, 6)] = -v * x;
        a[(r + 1, 7)] = -v * y;
        b[r + 1] = v;
    }
    let sol = a
        .lu()
        .solve(&b)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::DegeneratePlacement("singular homography system".into()))?;
    let mut h = Matrix3::new(sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0);
    let det = h.determinant();
    if det.abs() < 1e-12 {
        return Err(Error::DegeneratePlacement("homography is singular".into()));
    }
    if det < 0.0 {
        h = -h;
    }
    Ok(h)
}

fn apply(h: &Matrix3<f64>, x: f64, y: f64) -> Option<(f64, f64)> {
    let p = h * Vector3::new(x, y, 1.0);
    if p.z.abs() < 1e-15 {
        None
    } else {
        Some((p.x / p.z, p.y / p.z))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    /// Patch pixel `row * w_p + col`.
    src: u32,
    weight: f64,
}

/// Precomputed bilinear resampling of a patch into one view.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpPlan {
    image_size: (usize, usize),
    patch_size: (usize, usize),
    /// Destination pixel `row * W + col` per entry.
    pixels: Vec<u32>,
    /// Start offsets into `taps`, one past the last entry at the end.
    offsets: Vec<u32>,
    taps: Vec<Tap>,
}

impl WarpPlan {
    pub fn new(quad: &PixelQuad, patch_size: (usize, usize), image_size: (usize, usize)) -> Result<Self> {
        let h = homography_from_quad(patch_size, quad)?;
        let inv = h.try_inverse().ok_or_else(|| Error::DegeneratePlacement("non-invertible homography".into()))?;
        let (h_p, w_p) = patch_size;
        let (img_h, img_w) = image_size;
        let (x0, y0, x1, y1) = quad.bounds();
        let c_lo = (x0.floor() - 1.0).max(0.0) as usize;
        let r_lo = (y0.floor() - 1.0).max(0.0) as usize;
        let c_hi = ((x1.ceil() + 1.0).max(0.0) as usize).min(img_w);
        let r_hi = ((y1.ceil() + 1.0).max(0.0) as usize).min(img_h);

        let mut plan = WarpPlan { image_size, patch_size, pixels: Vec::new(), offsets: vec![0], taps: Vec::new() };
        for r in r_lo..r_hi {
            for c in c_lo..c_hi {
                let Some((sx, sy)) = apply(&inv, c as f64 + 0.5, r as f64 + 0.5) else { continue };
                if !(sx >= 0.0 && sx < w_p as f64 && sy >= 0.0 && sy < h_p as f64) {
                    continue;
                }
                let (fx, fy) = (sx - 0.5, sy - 0.5);
                let (ix, iy) = (fx.floor(), fy.floor());
                let (ax, ay) = (fx - ix, fy - iy);
                let (ix, iy) = (ix as i64, iy as i64);
                for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
                    for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
                        let (py, px) = (iy + dy, ix + dx);
                        let w = wy * wx;
                        if w == 0.0 || py < 0 || px < 0 || py >= h_p as i64 || px >= w_p as i64 {
                            continue;
                        }
                        plan.taps.push(Tap { src: (py as usize * w_p + px as usize) as u32, weight: w });
                    }
                }
                plan.pixels.push((r * img_w + c) as u32);
                plan.offsets.push(plan.taps.len() as u32);
            }
        }
        Ok(plan)
    }

    pub fn mask(&self) -> Mask {
        let (h, w) = self.image_size;
        let mut m = Mask::new(h, w);
        for &p in &self.pixels {
            m.set(p as usize / w, p as usize % w, true);
        }
        m
    }

    pub fn pixel_count(&self) -> usize {
        self.pixels.len()
    }

    /// Overwrites covered pixels of `image` with the resampled patch.
    pub fn apply(&self, image: &mut Image, patch: &Image) {
        let ch = image.channels();
        debug_assert_eq!((patch.height(), patch.width()), self.patch_size);
        let data = image.data_mut();
        let src = patch.data();
        for (k, &p) in self.pixels.iter().enumerate() {
            let taps = &self.taps[self.offsets[k] as usize..self.offsets[k + 1] as usize];
            for c in 0..ch {
                let mut acc = 0.0;
                for t in taps {
                    acc += t.weight * src[t.src as usize * ch + c];
                }
                data[p as usize * ch + c] = acc;
            }
        }
    }

    /// Adds the patch-space gradient implied by `grad_image` into `grad_patch`.
    pub fn backward(&self, grad_image: &Image, grad_patch: &mut Image) {
        let ch = grad_image.channels();
        let g = grad_image.data();
        let out = grad_patch.data_mut();
        for (k, &p) in self.pixels.iter().enumerate() {
            let taps = &self.taps[self.offsets[k] as usize..self.offsets[k + 1] as usize];
            for c in 0..ch {
                let gv = g[p as usize * ch + c];
                if gv == 0.0 {
                    continue;
                }
                for t in taps {
                    out[t.src as usize * ch + c] += t.weight * gv;
                }
            }
        }
    }

    /// Zeroes the gradient on pixels this plan overwrites (they no longer depend on the scene).
    pub fn mask_gradient(&self, grad_image: &mut Image) {
        let ch = grad_image.channels();
        let g = grad_image.data_mut();
        for &p in &self.pixels {
            for c in 0..ch {
                g[p as usize * ch + c] = 0.0;
            }
        }
    }
}

/// Where and how a patch lands in a particular scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Deployment {
    pub quad_left: PixelQuad,
    pub quad_right: PixelQuad,
    pub region_mask_left: Mask,
    /// The constant ground-truth disparity `c` of the patch region.
    pub patch_gt_disparity: f64,
    pub patch_size: (usize, usize),
    pub clipped_fraction: f64,
    plan_left: WarpPlan,
    plan_right: WarpPlan,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeploymentSummary {
    pub quad_left: PixelQuad,
    pub quad_right: PixelQuad,
    pub patch_gt_disparity: f64,
    pub clipped_fraction: f64,
}

impl Deployment {
    /// Deploys a patch of `patch_size` pixels at a physical placement.
    pub fn from_placement(rig: &CameraRig, placement: &PatchPlacement, patch_size: (usize, usize), image_size: (usize, usize)) -> Result<Self> {
        let (ql, qr) = geometry::project_placement(rig, placement)?;
        let c = rig.disparity_at_depth(placement.depth_m);
        Self::from_quads(ql, qr, patch_size, image_size, c)
    }

    pub fn from_quads(quad_left: PixelQuad, quad_right: PixelQuad, patch_size: (usize, usize), image_size: (usize, usize), c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::Domain(format!("patch disparity must be positive, got {c}")));
        }
        let (h, w) = (image_size.0 as f64, image_size.1 as f64);
        let mut clipped: f64 = 0.0;
        for (name, q) in [("left", &quad_left), ("right", &quad_right)] {
            let area = q.signed_area();
            let frac = 1.0 - q.area_inside(w, h) / area;
            if frac >= 1.0 - 1e-12 {
                return Err(Error::Deployment(format!("{name} quad lies entirely outside the image")));
            }
            if frac > MAX_CLIPPED_FRACTION {
                return Err(Error::Deployment(format!(
                    "{:.1}% of the {name} quad leaves the frame (limit {:.0}%)",
                    frac * 100.0,
                    MAX_CLIPPED_FRACTION * 100.0
                )));
            }
            clipped = clipped.max(frac);
        }
        if clipped > 1e-9 {
            log::warn!("patch partially outside the frame ({:.1}% clipped)", clipped * 100.0);
        }
        let plan_left = WarpPlan::new(&quad_left, patch_size, image_size)?;
        let plan_right = WarpPlan::new(&quad_right, patch_size, image_size)?;
        if plan_left.pixel_count() == 0 || plan_right.pixel_count() == 0 {
            return Err(Error::Deployment("patch covers no pixel centers".into()));
        }
        Ok(Self {
            region_mask_left: plan_left.mask(),
            quad_left,
            quad_right,
            patch_gt_disparity: c,
            patch_size,
            clipped_fraction: clipped,
            plan_left,
            plan_right,
        })
    }

    /// Same deployment expressed in a sub-window whose origin is `(row0, col0)`.
    pub fn cropped(&self, row0: usize, col0: usize, image_size: (usize, usize)) -> Result<Self> {
        let (dx, dy) = (-(col0 as f64), -(row0 as f64));
        Self::from_quads(
            self.quad_left.translated(dx, dy),
            self.quad_right.translated(dx, dy),
            self.patch_size,
            image_size,
            self.patch_gt_disparity,
        )
    }

    pub fn plan_left(&self) -> &WarpPlan {
        &self.plan_left
    }

    pub fn plan_right(&self) -> &WarpPlan {
        &self.plan_right
    }

    pub fn summary(&self) -> DeploymentSummary {
        DeploymentSummary {
            quad_left: self.quad_left,
            quad_right: self.quad_right,
            patch_gt_disparity: self.patch_gt_disparity,
            clipped_fraction: self.clipped_fraction,
        }
    }

    /// Rectangle `(row0, col0, height, width)` holding the left region plus `margin_up`
    /// rows/cols on every side and `margin_left` extra columns to the left, clamped to the image.
    pub fn support_window(&self, image_size: (usize, usize), margin: usize, margin_left: usize) -> (usize, usize, usize, usize) {
        let (r0, c0, r1, c1) = self.region_mask_left.bounding_box().unwrap_or((0, 0, image_size.0, image_size.1));
        let row0 = r0.saturating_sub(margin);
        let col0 = c0.saturating_sub(margin + margin_left);
        let row1 = (r1 + margin).min(image_size.0);
        let col1 = (c1 + margin).min(image_size.1);
        (row0, col0, row1 - row0, col1 - col0)
    }
}

/// Replaces the quad interiors of both views with the warped patch.
pub fn composite(scene: &StereoScene, patch: &AssembledPatch, deployment: &Deployment) -> Result<StereoScene> {
    if patch.size() != deployment.patch_size {
        return Err(Error::Deployment(format!(
            "patch is {:?} but the deployment expects {:?}",
            patch.size(),
            deployment.patch_size
        )));
    }
    if deployment.region_mask_left.dims() != scene.size() {
        return Err(Error::Deployment("deployment was computed for a different image size".into()));
    }
    let mut out = scene.clone();
    deployment.plan_left.apply(&mut out.left, &patch.image);
    deployment.plan_right.apply(&mut out.right, &patch.image);
    Ok(out)
}

/// Gradient w.r.t. the patch given gradients w.r.t. both composited views.
pub fn composite_backward(deployment: &Deployment, grad_left: &Image, grad_right: &Image) -> Image {
    let (h_p, w_p) = deployment.patch_size;
    let mut g = Image::new(h_p, w_p, grad_left.channels());
    deployment.plan_left.backward(grad_left, &mut g);
    deployment.plan_right.backward(grad_right, &mut g);
    g
}

/// Inverse warp: resamples the quad interior of `image` back into `h_p × w_p` patch space.
pub fn extract_region(image: &Image, quad: &PixelQuad, patch_size: (usize, usize)) -> Result<Image> {
    let h = homography_from_quad(patch_size, quad)?;
    let (h_p, w_p) = patch_size;
    let ch = image.channels();
    let (img_h, img_w) = (image.height() as i64, image.width() as i64);
    let mut out = Image::new(h_p, w_p, ch);
    for i in 0..h_p {
        for j in 0..w_p {
            let Some((x, y)) = apply(&h, j as f64 + 0.5, i as f64 + 0.5) else { continue };
            let (fx, fy) = (x - 0.5, y - 0.5);
            let (ix, iy) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - ix, fy - iy);
            let (ix, iy) = (ix as i64, iy as i64);
            for c in 0..ch {
                let mut acc = 0.0;
                for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
                    for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
                        let (py, px) = (iy + dy, ix + dx);
                        let w = wy * wx;
                        if w == 0.0 || py < 0 || px < 0 || py >= img_h || px >= img_w {
                            continue;
                        }
                        acc += w * image.get(py as usize, px as usize, c);
                    }
                }
                out.set(i, j, c, acc);
            }
        }
    }
    Ok(out)
}

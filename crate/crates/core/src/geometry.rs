//! Calibration-constrained placement of a physical patch in a rectified stereo rig.
//!
//! A [`PatchPlacement`] describes a planar board in the reference camera frame
//! (meters). Its corners are rotated about the board center, homogenized, and
//! pushed through `P_side · R_rect` to obtain the pixel quadrilateral seen by
//! each camera.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quads with less signed area than this (px²) are rejected.
pub const MIN_QUAD_AREA_PX2: f64 = 64.0;
/// Smallest pixel extent (per side) a deployable patch may have.
pub const MIN_PATCH_SIDE_PX: usize = 8;

const RECTIFIED_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// Rectified stereo calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub proj_left: [[f64; 4]; 3],
    pub proj_right: [[f64; 4]; 3],
    pub rect_rotation: [[f64; 4]; 4],
    pub focal_px: f64,
    pub baseline_m: f64,
    /// `(height_px, width_px)`
    pub image_size: (usize, usize),
}

impl CameraRig {
    /// Builds a rig from rectified projections, deriving focal length and baseline.
    ///
    /// The baseline is the difference of the fourth-column horizontal
    /// translations divided by the focal length.
    pub fn new(
        proj_left: [[f64; 4]; 3],
        proj_right: [[f64; 4]; 3],
        rect_rotation: [[f64; 3]; 3],
        image_size: (usize, usize),
    ) -> Result<Self> {
        let mut rect = [[0.0; 4]; 4];
        for r in 0..3 {
            rect[r][..3].copy_from_slice(&rect_rotation[r]);
        }
        rect[3][3] = 1.0;
        let focal_px = proj_left[0][0];
        let baseline_m = if focal_px != 0.0 { (proj_left[0][3] - proj_right[0][3]) / focal_px } else { 0.0 };
        let rig = CameraRig { proj_left, proj_right, rect_rotation: rect, focal_px, baseline_m, image_size };
        rig.validate()?;
        Ok(rig)
    }

    /// Ideal rectified pair: identical intrinsics, right camera translated by `baseline_m` along +X.
    pub fn ideal(focal_px: f64, baseline_m: f64, cx: f64, cy: f64, image_size: (usize, usize)) -> Result<Self> {
        let left = [[focal_px, 0.0, cx, 0.0], [0.0, focal_px, cy, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let mut right = left;
        right[0][3] = -focal_px * baseline_m;
        let identity = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        Self::new(left, right, identity, image_size)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("left", &self.proj_left), ("right", &self.proj_right)] {
            let row = &p[2];
            if row[0].abs() > RECTIFIED_TOL || row[1].abs() > RECTIFIED_TOL || (row[2] - 1.0).abs() > RECTIFIED_TOL {
                return Err(Error::Domain(format!(
                    "{name} projection is not in rectified pinhole form (third row {:?})",
                    row
                )));
            }
        }
        if !(self.focal_px > 0.0) || (self.focal_px - self.proj_left[0][0]).abs() > 1e-6 {
            return Err(Error::Domain(format!("invalid focal length {}", self.focal_px)));
        }
        if !(self.baseline_m > 0.0) {
            return Err(Error::Domain(format!("baseline must be positive, got {}", self.baseline_m)));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::Domain("image size must be positive".into()));
        }
        Ok(())
    }

    pub fn projection(&self, side: Side) -> Matrix3x4<f64> {
        let p = match side {
            Side::Left => &self.proj_left,
            Side::Right => &self.proj_right,
        };
        Matrix3x4::from_fn(|r, c| p[r][c])
    }

    pub fn rectification(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|r, c| self.rect_rotation[r][c])
    }

    /// `P_side · R_rect`, the full map from reference-frame homogeneous points to pixels.
    pub fn camera_matrix(&self, side: Side) -> Matrix3x4<f64> {
        self.projection(side) * self.rectification()
    }

    /// Ideal disparity `f·B/z` of a point at depth `depth_m`.
    pub fn disparity_at_depth(&self, depth_m: f64) -> f64 {
        self.focal_px * self.baseline_m / depth_m
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.proj_left[0][2], self.proj_left[1][2])
    }
}

/// Physical board size, pose, and depth in the reference camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchPlacement {
    pub width_m: f64,
    pub height_m: f64,
    pub depth_m: f64,
    /// `(x_shift, y_shift)` of the board center relative to the principal axis.
    pub shift_m: (f64, f64),
    pub rot_x_deg: f64,
    pub rot_y_deg: f64,
}

impl Default for PatchPlacement {
    fn default() -> Self {
        Self { width_m: 1.26, height_m: 0.891, depth_m: 5.0, shift_m: (0.0, 0.0), rot_x_deg: 0.0, rot_y_deg: 0.0 }
    }
}

impl PatchPlacement {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_m > 0.0 && self.height_m > 0.0) {
            return Err(Error::Domain(format!(
                "patch size must be positive, got {}x{} m",
                self.width_m, self.height_m
            )));
        }
        if !(self.depth_m > 0.0) {
            return Err(Error::Domain(format!("patch depth must be positive, got {}", self.depth_m)));
        }
        Ok(())
    }

    pub fn with_rotation(&self, rot_x_deg: f64, rot_y_deg: f64) -> Self {
        Self { rot_x_deg, rot_y_deg, ..self.clone() }
    }

    pub fn with_depth(&self, depth_m: f64) -> Self {
        Self { depth_m, ..self.clone() }
    }

    /// Rotation applied about the board center: X-axis first, then Y-axis.
    pub fn rotation(&self) -> Matrix3<f64> {
        let (sx, cx) = self.rot_x_deg.to_radians().sin_cos();
        let (sy, cy) = self.rot_y_deg.to_radians().sin_cos();
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
        let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
        ry * rx
    }
}

/// Pixel corners of a deployed patch. Image coordinates: x right, y down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelQuad {
    pub top_left: [f64; 2],
    pub top_right: [f64; 2],
    pub bottom_left: [f64; 2],
    pub bottom_right: [f64; 2],
}

impl PixelQuad {
    /// Axis-aligned rectangle with top-left corner `(x, y)`.
    pub fn rect(x: f64, y: f64, width: f64, height: f64) -> Self {
        Self {
            top_left: [x, y],
            top_right: [x + width, y],
            bottom_left: [x, y + height],
            bottom_right: [x + width, y + height],
        }
    }

    /// Corners in boundary order (TL, TR, BR, BL).
    pub fn ring(&self) -> [[f64; 2]; 4] {
        [self.top_left, self.top_right, self.bottom_right, self.bottom_left]
    }

    /// Shoelace area over the boundary ring; positive for the natural TL→TR→BR→BL order.
    pub fn signed_area(&self) -> f64 {
        polygon_area(&self.ring())
    }

    pub fn is_convex(&self) -> bool {
        let ring = self.ring();
        let mut sign = 0.0;
        for i in 0..4 {
            let a = ring[i];
            let b = ring[(i + 1) % 4];
            let c = ring[(i + 2) % 4];
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross.abs() < 1e-12 {
                return false;
            }
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
        true
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let t = |p: [f64; 2]| [p[0] + dx, p[1] + dy];
        Self {
            top_left: t(self.top_left),
            top_right: t(self.top_right),
            bottom_left: t(self.bottom_left),
            bottom_right: t(self.bottom_right),
        }
    }

    /// `(x_min, y_min, x_max, y_max)`
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let ring = self.ring();
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in ring {
            b.0 = b.0.min(p[0]);
            b.1 = b.1.min(p[1]);
            b.2 = b.2.max(p[0]);
            b.3 = b.3.max(p[1]);
        }
        b
    }

    pub fn max_corner_distance(&self, other: &PixelQuad) -> f64 {
        self.ring()
            .iter()
            .zip(other.ring().iter())
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .fold(0.0, f64::max)
    }

    /// Area of the quad that lies inside `[0, width] × [0, height]`.
    pub fn area_inside(&self, width: f64, height: f64) -> f64 {
        let clipped = clip_polygon(&self.ring(), width, height);
        if clipped.len() < 3 {
            0.0
        } else {
            polygon_area(&clipped).abs()
        }
    }

    fn check_non_degenerate(&self) -> Result<()> {
        let area = self.signed_area();
        if !area.is_finite() || area < MIN_QUAD_AREA_PX2 || !self.is_convex() {
            return Err(Error::DegeneratePlacement(format!(
                "projected quad has signed area {area:.3} px² (minimum {MIN_QUAD_AREA_PX2}) or is not convex"
            )));
        }
        Ok(())
    }
}

fn polygon_area(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc / 2.0
}

// Sutherland–Hodgman against the image rectangle.
fn clip_polygon(poly: &[[f64; 2]], width: f64, height: f64) -> Vec<[f64; 2]> {
    type Inside = fn(&[f64; 2], f64) -> bool;
    let edges: [(Inside, usize, f64); 4] = [
        (|p, v| p[0] >= v, 0, 0.0),
        (|p, v| p[0] <= v, 0, width),
        (|p, v| p[1] >= v, 1, 0.0),
        (|p, v| p[1] <= v, 1, height),
    ];
    let mut out: Vec<[f64; 2]> = poly.to_vec();
    for (inside, axis, value) in edges {
        if out.is_empty() {
            break;
        }
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let cur = input[i];
            let prev = input[(i + input.len() - 1) % input.len()];
            let intersect = |a: [f64; 2], b: [f64; 2]| {
                let t = (value - a[axis]) / (b[axis] - a[axis]);
                [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
            };
            match (inside(&cur, value), inside(&prev, value)) {
                (true, true) => out.push(cur),
                (true, false) => {
                    out.push(intersect(prev, cur));
                    out.push(cur);
                }
                (false, true) => out.push(intersect(prev, cur)),
                (false, false) => {}
            }
        }
    }
    out
}

/// Homogeneous reference-frame corners `[TL, TR, BL, BR]` of the placed board.
pub fn corner_points_3d(placement: &PatchPlacement) -> Result<[Vector4<f64>; 4]> {
    placement.validate()?;
    let (hw, hh) = (placement.width_m / 2.0, placement.height_m / 2.0);
    let center = Vector3::new(placement.shift_m.0, placement.shift_m.1, placement.depth_m);
    let offsets = [
        Vector3::new(-hw, -hh, 0.0),
        Vector3::new(hw, -hh, 0.0),
        Vector3::new(-hw, hh, 0.0),
        Vector3::new(hw, hh, 0.0),
    ];
    let rot = placement.rotation();

    // Board normal perpendicular to the optical axis: the board is seen edge-on.
    let normal = rot * Vector3::z();
    if normal.z.abs() < 1e-9 {
        return Err(Error::DegeneratePlacement(format!(
            "board is edge-on to the camera (rot_x={}°, rot_y={}°)",
            placement.rot_x_deg, placement.rot_y_deg
        )));
    }

    let mut out = [Vector4::zeros(); 4];
    for (dst, off) in out.iter_mut().zip(offsets) {
        let p = center + rot * off;
        if p.z <= 0.0 {
            return Err(Error::DegeneratePlacement(format!("rotated corner has depth {:.4} m", p.z)));
        }
        *dst = Vector4::new(p.x, p.y, p.z, 1.0);
    }
    Ok(out)
}

/// Projects the four corners into the chosen view.
pub fn project_corners(rig: &CameraRig, points: &[Vector4<f64>; 4], side: Side) -> Result<PixelQuad> {
    let cam = rig.camera_matrix(side);
    let mut px = [[0.0; 2]; 4];
    for (dst, p) in px.iter_mut().zip(points) {
        let h = cam * p;
        if !(h.z > 0.0) {
            return Err(Error::DegeneratePlacement("corner projects behind the camera".into()));
        }
        *dst = [h.x / h.z, h.y / h.z];
    }
    let quad = PixelQuad { top_left: px[0], top_right: px[1], bottom_left: px[2], bottom_right: px[3] };
    quad.check_non_degenerate()?;
    Ok(quad)
}

/// Left and right quads of a placement.
pub fn project_placement(rig: &CameraRig, placement: &PatchPlacement) -> Result<(PixelQuad, PixelQuad)> {
    let pts = corner_points_3d(placement)?;
    Ok((project_corners(rig, &pts, Side::Left)?, project_corners(rig, &pts, Side::Right)?))
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// `(h_p, w_p)`: rounded means of opposite edge lengths of the quad.
pub fn patch_pixel_size(quad: &PixelQuad) -> Result<(usize, usize)> {
    quad.check_non_degenerate()?;
    let h = 0.5 * (dist(quad.top_left, quad.bottom_left) + dist(quad.top_right, quad.bottom_right));
    let w = 0.5 * (dist(quad.top_left, quad.top_right) + dist(quad.bottom_left, quad.bottom_right));
    let (h, w) = (h.round() as usize, w.round() as usize);
    if h < MIN_PATCH_SIDE_PX || w < MIN_PATCH_SIDE_PX {
        return Err(Error::PatchTooSmall(format!(
            "patch spans {h}x{w} px, minimum is {MIN_PATCH_SIDE_PX}x{MIN_PATCH_SIDE_PX}"
        )));
    }
    Ok((h, w))
}

/// `z = f·B/d`; zero disparity is infinitely far.
pub fn depth_from_disparity(disparity: f64, rig: &CameraRig) -> Result<f64> {
    if disparity < 0.0 || disparity.is_nan() {
        return Err(Error::Domain(format!("disparity must be non-negative, got {disparity}")));
    }
    if disparity == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(rig.focal_px * rig.baseline_m / disparity)
}

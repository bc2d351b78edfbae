//! Pinhole camera model and virtual depth rendering of the lumen interior.
//!
//! The lumen is the union of tapered capsules swept along branch centerlines:
//! the signed distance at a point is the minimum over all segments of
//! (distance to the clamped foot point on the axis) minus (the radius
//! interpolated at that foot). Rendering sphere-traces this field from the
//! camera position, which must be strictly inside the lumen.

use crate::airway::AirwayTree;
use crate::pose::Pose;
use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sphere-trace hit tolerance, mm.
pub const EPS_HIT: f64 = 1e-3;
/// Occlusion-test SDF threshold for line-of-sight checks, mm.
pub const EPS_OCCLUSION: f64 = 0.1;
/// Occlusion-test sampling step along the sight line, mm.
pub const OCCLUSION_STEP: f64 = 0.25;
const MIN_STEP: f64 = 0.01;
const MAX_STEP: f64 = 5.0;
const MAX_STEPS: usize = 512;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("camera outside lumen (sdf {sdf:.4} mm at position)")]
    CameraOutsideLumen { sdf: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("depth io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported depth file format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed depth file: {0}")]
    MalformedFile(String),
}

/// Pinhole intrinsics. Pixel coordinates are continuous; pixel (i, j) is
/// sampled at image coordinate (i, j) exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, CameraError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::InvalidIntrinsics("focal lengths must be > 0".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::InvalidIntrinsics("image size must be nonzero".into()));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64)
            || !(0.0 <= self.cy && self.cy < self.height as f64)
        {
            return Err(CameraError::InvalidIntrinsics(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }

    /// Same field of view at a different resolution.
    pub fn scaled_to(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    pub fn diagonal_px(&self) -> f64 {
        ((self.width * self.width + self.height * self.height) as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    pub in_front: bool,
}

/// Projects a camera-frame point. Points with z <= 0 report `in_front =
/// false` and zeroed coordinates.
#[inline]
pub fn project(intr: &Intrinsics, p_cam: &Point3<f64>) -> Projection {
    if p_cam.z > 0.0 {
        Projection {
            x: intr.fx * (p_cam.x / p_cam.z) + intr.cx,
            y: intr.fy * (p_cam.y / p_cam.z) + intr.cy,
            in_front: true,
        }
    } else {
        Projection {
            x: 0.0,
            y: 0.0,
            in_front: false,
        }
    }
}

/// How ray depth is recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// Euclidean distance along the ray.
    #[default]
    EuclideanRay,
    /// Distance along the camera z axis.
    ZDepth,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Rays exceeding this range are marked invalid, mm.
    pub max_range_mm: f64,
    pub depth_mode: DepthMode,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            max_range_mm: 200.0,
            depth_mode: DepthMode::EuclideanRay,
        }
    }
}

/// Row-major grid of per-pixel depths with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Builds from raw values; entries that are not finite and positive are
    /// marked invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height);
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Self {
            width,
            height,
            values,
            valid,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.values[i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, depth: f64) {
        let i = y * self.width + x;
        debug_assert!(depth.is_finite() && depth > 0.0);
        self.values[i] = depth;
        self.valid[i] = true;
    }

    #[inline]
    pub fn set_invalid(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.values[i] = 0.0;
        self.valid[i] = false;
    }

    pub fn raw_values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Range (min, max) over valid pixels, if any.
    pub fn valid_range(&self) -> Option<(f64, f64)> {
        let mut range: Option<(f64, f64)> = None;
        for (v, ok) in self.values.iter().zip(&self.valid) {
            if *ok {
                range = Some(match range {
                    None => (*v, *v),
                    Some((lo, hi)) => (lo.min(*v), hi.max(*v)),
                });
            }
        }
        range
    }

    /// Applies `v -> a*v + b` to valid pixels; results that are not positive
    /// become invalid.
    pub fn affine(&self, a: f64, b: f64) -> DepthMap {
        let mut out = self.clone();
        for i in 0..out.values.len() {
            if out.valid[i] {
                let v = a * out.values[i] + b;
                if v.is_finite() && v > 0.0 {
                    out.values[i] = v;
                } else {
                    out.values[i] = 0.0;
                    out.valid[i] = false;
                }
            }
        }
        out
    }

    /// Block-average downsample. A destination pixel is the mean of the valid
    /// source pixels whose block maps onto it; with no valid sources it is
    /// invalid. Returns a clone when dimensions already match.
    pub fn downsample_to(&self, width: usize, height: usize) -> DepthMap {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut sums = vec![0.0; width * height];
        let mut counts = vec![0u32; width * height];
        for sy in 0..self.height {
            let dy = sy * height / self.height;
            for sx in 0..self.width {
                let dx = sx * width / self.width;
                let i = sy * self.width + sx;
                if self.valid[i] {
                    let j = dy * width + dx;
                    sums[j] += self.values[i];
                    counts[j] += 1;
                }
            }
        }
        let mut out = DepthMap::new_invalid(width, height);
        for j in 0..sums.len() {
            if counts[j] > 0 {
                out.values[j] = sums[j] / counts[j] as f64;
                out.valid[j] = true;
            }
        }
        out
    }
}

/// Signed distance from `p` to the lumen wall: negative inside, zero on the
/// wall, positive outside.
pub fn lumen_sdf(tree: &AirwayTree, p: &Point3<f64>) -> f64 {
    lumen_sdf_v(tree, &p.coords)
}

#[inline]
pub(crate) fn lumen_sdf_v(tree: &AirwayTree, pv: &Vector3<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for accel in tree.accels() {
        // A branch cannot beat `best` unless its centerline box comes within
        // best + max_radius of the point.
        let margin = best + accel.max_radius;
        if margin.is_finite() {
            if margin <= 0.0 {
                continue;
            }
            if accel.aabb.dist_sq(pv) >= margin * margin {
                continue;
            }
        }
        for seg in &accel.segments {
            let v = pv - seg.a;
            let vd = v.dot(&seg.dir);
            let t = vd.clamp(0.0, seg.len);
            let dist_sq = v.norm_squared() - 2.0 * t * vd + t * t;
            let r = seg.r0 + seg.slope * t;
            let thresh = best + r;
            if thresh > 0.0 && dist_sq < thresh * thresh {
                best = dist_sq.max(0.0).sqrt() - r;
            }
        }
    }
    best
}

/// Sphere-traces one ray from `origin` (inside the lumen, `f0 < 0`) along
/// unit `dir`. Steps are |SDF| clamped to [0.01, 5] mm, at most 512 of them;
/// once the field turns nonnegative the wall crossing is refined to ~1e-7 mm
/// along the ray. Returns the Euclidean hit distance, or None past
/// `max_range` or when the step budget runs out.
fn trace_ray(
    tree: &AirwayTree,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    f0: f64,
    max_range: f64,
) -> Option<f64> {
    let mut t = 0.0;
    let mut f = f0;
    for _ in 0..MAX_STEPS {
        if f >= 0.0 {
            return Some(refine_crossing(tree, origin, dir, t, f));
        }
        let next = t + (-f).clamp(MIN_STEP, MAX_STEP);
        if next > max_range {
            return None;
        }
        f = lumen_sdf_v(tree, &(origin + dir * next));
        t = next;
    }
    None
}

/// Locates the zero crossing in (t_prev, t_hi] given f(t_hi) >= 0, where
/// t_prev is the previous (inside) sample. Secant steps with a bisection
/// fallback keep a strict bracket.
fn refine_crossing(
    tree: &AirwayTree,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    t_hi: f64,
    f_hi: f64,
) -> f64 {
    if f_hi == 0.0 {
        return t_hi;
    }
    // The previous sample sat at least MIN_STEP back and was inside.
    let mut lo = (t_hi - MAX_STEP).max(0.0);
    let mut f_lo = lumen_sdf_v(tree, &(origin + dir * lo));
    if f_lo >= 0.0 {
        // Shouldn't happen given the march invariant; fall back to t_hi.
        return t_hi;
    }
    let mut hi = t_hi;
    let mut f_hi = f_hi;
    for _ in 0..16 {
        if hi - lo < 1e-7 {
            break;
        }
        let mut m = lo + (0.0 - f_lo) * (hi - lo) / (f_hi - f_lo);
        if !(m > lo && m < hi) {
            m = 0.5 * (lo + hi);
        }
        let fm = lumen_sdf_v(tree, &(origin + dir * m));
        if fm.abs() < 1e-6 {
            return m;
        }
        if fm < 0.0 {
            lo = m;
            f_lo = fm;
        } else {
            hi = m;
            f_hi = fm;
        }
    }
    hi
}

/// Renders a depth map by sphere tracing every pixel ray. Deterministic for
/// identical inputs. Pixels whose rays exceed `opts.max_range_mm` (or whose
/// hit distance is not positive) are invalid.
pub fn render_depth(
    tree: &AirwayTree,
    pose: &Pose,
    intr: &Intrinsics,
    opts: &RenderOptions,
) -> Result<DepthMap, CameraError> {
    let origin = pose.position.coords;
    let f0 = lumen_sdf_v(tree, &origin);
    if f0 >= 0.0 {
        return Err(CameraError::CameraOutsideLumen { sdf: f0 });
    }
    let rot = pose.orientation.to_rotation_matrix();
    let mut map = DepthMap::new_invalid(intr.width, intr.height);
    for py in 0..intr.height {
        let ry = (py as f64 - intr.cy) / intr.fy;
        for px in 0..intr.width {
            let rx = (px as f64 - intr.cx) / intr.fx;
            let d_cam = Vector3::new(rx, ry, 1.0);
            let inv_norm = 1.0 / d_cam.norm();
            let dir = rot * (d_cam * inv_norm);
            if let Some(t) = trace_ray(tree, &origin, &dir, f0, opts.max_range_mm) {
                let depth = match opts.depth_mode {
                    DepthMode::EuclideanRay => t,
                    DepthMode::ZDepth => t * inv_norm,
                };
                if depth > 0.0 {
                    map.set(px, py, depth);
                }
            }
        }
    }
    Ok(map)
}

/// Tests whether a 3D landmark is visible from `pose`: it must project in
/// front of the camera inside the image rectangle, and the straight sight
/// line must stay inside the lumen (SDF < 0.1 mm sampled every 0.25 mm).
pub fn landmark_visibility(
    tree: &AirwayTree,
    pose: &Pose,
    intr: &Intrinsics,
    landmark: &Point3<f64>,
) -> (bool, f64, f64) {
    let p_cam = pose.world_to_camera(landmark);
    let proj = project(intr, &p_cam);
    if !proj.in_front {
        return (false, proj.x, proj.y);
    }
    let inside_image = proj.x >= 0.0
        && proj.x < intr.width as f64
        && proj.y >= 0.0
        && proj.y < intr.height as f64;
    if !inside_image {
        return (false, proj.x, proj.y);
    }
    let visible = line_of_sight(tree, &pose.position, landmark);
    (visible, proj.x, proj.y)
}

/// True when every sample along the segment has SDF < `EPS_OCCLUSION`.
pub(crate) fn line_of_sight(tree: &AirwayTree, from: &Point3<f64>, to: &Point3<f64>) -> bool {
    let delta = to - from;
    let len = delta.norm();
    if len < OCCLUSION_STEP {
        return lumen_sdf_v(tree, &from.coords) < EPS_OCCLUSION
            && lumen_sdf_v(tree, &to.coords) < EPS_OCCLUSION;
    }
    let dir = delta / len;
    let n_steps = (len / OCCLUSION_STEP).floor() as usize;
    for k in 0..=n_steps {
        let p = from.coords + dir * (OCCLUSION_STEP * k as f64);
        if lumen_sdf_v(tree, &p) >= EPS_OCCLUSION {
            return false;
        }
    }
    lumen_sdf_v(tree, &to.coords) < EPS_OCCLUSION
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airway::{AirwayTree, Branch};
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;

    fn capsule_tree(radius: f64, length: f64) -> AirwayTree {
        let b = Branch {
            id: 0,
            parent_id: None,
            centerline: vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.0, 0.0, length)],
            radii: vec![radius, radius],
            landmark: Point3::new(0.0, 0.0, length),
            name: "root".into(),
        };
        AirwayTree::new(vec![b], 0).unwrap()
    }

    #[test]
    fn sdf_on_centerline_is_minus_radius() {
        let tree = capsule_tree(4.0, 30.0);
        assert_relative_eq!(
            lumen_sdf(&tree, &Point3::new(0.0, 0.0, 15.0)),
            -4.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn sdf_on_wall_is_zero() {
        let tree = capsule_tree(4.0, 30.0);
        assert_relative_eq!(
            lumen_sdf(&tree, &Point3::new(4.0, 0.0, 15.0)),
            0.0,
            epsilon = 1e-9
        );
        // End-cap sphere.
        assert_relative_eq!(
            lumen_sdf(&tree, &Point3::new(0.0, 0.0, 34.0)),
            0.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn project_trivials() {
        let intr = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let p = project(&intr, &Point3::new(0.0, 0.0, 10.0));
        assert_eq!((p.x, p.y, p.in_front), (50.0, 50.0, true));
        let p = project(&intr, &Point3::new(1.0, 0.0, 10.0));
        assert_eq!((p.x, p.y, p.in_front), (60.0, 50.0, true));
        let p = project(&intr, &Point3::new(0.0, 0.0, -5.0));
        assert!(!p.in_front);
    }

    #[test]
    fn center_ray_hits_end_cap() {
        // 30 mm of lumen ahead plus the 4 mm cap.
        let tree = capsule_tree(4.0, 34.0);
        let pose = Pose::new(Point3::new(0.0, 0.0, 4.0), UnitQuaternion::identity());
        let intr = Intrinsics::new(32.0, 32.0, 16.0, 16.0, 33, 33).unwrap();
        let map = render_depth(&tree, &pose, &intr, &RenderOptions::default()).unwrap();
        let center = map.get(16, 16).expect("center pixel valid");
        assert!((center - 34.0).abs() < 0.05, "center depth {center}");
    }

    #[test]
    fn oblique_ray_hits_side_wall() {
        let tree = capsule_tree(4.0, 60.0);
        let pose = Pose::new(Point3::new(0.0, 0.0, 10.0), UnitQuaternion::identity());
        // One pixel, aimed 30 degrees off axis: fx chosen so (x - cx)/fx = tan(30deg).
        let theta = 30f64.to_radians();
        let intr = Intrinsics {
            fx: 1.0 / theta.tan(),
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 2,
            height: 1,
        };
        let map = render_depth(&tree, &pose, &intr, &RenderOptions::default()).unwrap();
        let d = map.get(1, 0).expect("pixel valid");
        assert!((d - 4.0 / theta.sin()).abs() < 0.05, "side-wall depth {d}");
    }

    #[test]
    fn outside_camera_is_error() {
        let tree = capsule_tree(4.0, 30.0);
        let pose = Pose::new(Point3::new(20.0, 0.0, 15.0), UnitQuaternion::identity());
        let intr = Intrinsics::new(16.0, 16.0, 8.0, 8.0, 16, 16).unwrap();
        match render_depth(&tree, &pose, &intr, &RenderOptions::default()) {
            Err(CameraError::CameraOutsideLumen { sdf }) => assert!(sdf > 0.0),
            other => panic!("expected CameraOutsideLumen, got {other:?}"),
        }
    }

    #[test]
    fn landmark_ahead_is_visible_behind_is_not() {
        let tree = capsule_tree(4.0, 30.0);
        let intr = Intrinsics::new(32.0, 32.0, 16.0, 16.0, 33, 33).unwrap();
        let pose = Pose::new(Point3::new(0.0, 0.0, 5.0), UnitQuaternion::identity());
        let (vis, x, y) = landmark_visibility(&tree, &pose, &intr, &Point3::new(0.0, 0.0, 30.0));
        assert!(vis);
        assert_relative_eq!(x, 16.0, epsilon = 1e-9);
        assert_relative_eq!(y, 16.0, epsilon = 1e-9);
        let (vis, _, _) = landmark_visibility(&tree, &pose, &intr, &Point3::new(0.0, 0.0, -1.0));
        assert!(!vis);
    }

    #[test]
    fn downsample_block_average() {
        let mut m = DepthMap::new_invalid(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                m.set(x, y, (y * 4 + x + 1) as f64);
            }
        }
        let d = m.downsample_to(2, 2);
        // Top-left block: values 1,2,5,6.
        assert_relative_eq!(d.get(0, 0).unwrap(), 3.5, epsilon = 1e-12);
        assert_relative_eq!(d.get(1, 1).unwrap(), 13.5, epsilon = 1e-12);
    }

    #[test]
    fn scaled_intrinsics_preserve_fov() {
        let intr = Intrinsics::new(90.0, 90.0, 100.0, 100.0, 200, 200).unwrap();
        let small = intr.scaled_to(50, 50);
        assert_relative_eq!(small.fx, 22.5);
        assert_relative_eq!(small.cx, 25.0);
        // Corner ray direction unchanged.
        assert_relative_eq!(
            (0.0 - intr.cx) / intr.fx,
            (0.0 - small.cx) / small.fx,
            epsilon = 1e-12
        );
    }
}

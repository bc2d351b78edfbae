//! The three pose-alignment cost terms and their weighted combination.
//!
//! All functions are pure in the candidate pose; the tracker's optimizer
//! evaluates them thousands of times per frame.

use crate::airway::{AirwayTree, BranchId};
use crate::camera::{project, render_depth, CameraError, DepthMap, Intrinsics, RenderOptions};
use crate::perception::{FrameObservation, LandmarkObservation};
use crate::pose::Pose;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_6, TAU};
use thiserror::Error;

/// Valid-pixel minimum for a meaningful correlation.
pub const NCC_MIN_PIXELS: usize = 16;
/// Variance floor below which a depth map is treated as constant.
pub const NCC_MIN_VARIANCE: f64 = 1e-12;
/// Total-visibility floor below which the landmark term is excluded.
pub const VISIBILITY_EPS: f64 = 1e-3;
/// Depth term fallback when the pose leaves the lumen or NCC degenerates.
pub const DEPTH_COST_INVALID: f64 = 2.0;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("depth map dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

/// Weights of the three cost terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostWeights {
    pub alpha_depth: f64,
    pub alpha_landmark: f64,
    pub alpha_centerline: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            alpha_depth: 1.0,
            alpha_landmark: 0.01,
            alpha_centerline: 0.5,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), String> {
        if self.alpha_depth < 0.0 || self.alpha_landmark < 0.0 || self.alpha_centerline < 0.0 {
            return Err("cost weights must be nonnegative".into());
        }
        if self.alpha_depth == 0.0 && self.alpha_landmark == 0.0 && self.alpha_centerline == 0.0 {
            return Err("at least one cost weight must be positive".into());
        }
        Ok(())
    }
}

/// Which analytic form the centerline term takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CenterlineForm {
    /// d^2/(2 sigma1^2) + phi^2/(2 sigma2^2): zero on-axis, grows off it.
    #[default]
    NegLogQuadratic,
    /// Product of the two Gaussian densities (maximal on-axis; kept for
    /// fidelity experiments only).
    LiteralDensityProduct,
}

/// Soft visibility weights as given, or hard-thresholded at 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VisibilityMode {
    #[default]
    Soft,
    HardThreshold,
}

/// The three weighted terms with validity flags; `total` is what the
/// optimizer minimizes and the failure detector thresholds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub l_depth: f64,
    pub l_landmark: f64,
    pub l_centerline: f64,
    pub depth_valid: bool,
    pub landmark_valid: bool,
    pub total: f64,
    pub visible_count: usize,
}

/// Everything a cost evaluation needs besides the candidate pose.
#[derive(Clone, Copy)]
pub struct CostContext<'a> {
    pub tree: &'a AirwayTree,
    /// Intrinsics of the full-resolution image; landmark pixels live here.
    pub full_intr: Intrinsics,
    /// Intrinsics at the depth rendering resolution.
    pub render_intr: Intrinsics,
    pub render_opts: RenderOptions,
    pub weights: CostWeights,
    pub centerline_form: CenterlineForm,
    pub visibility_mode: VisibilityMode,
}

impl<'a> CostContext<'a> {
    pub fn new(tree: &'a AirwayTree, full_intr: Intrinsics, render_intr: Intrinsics) -> Self {
        Self {
            tree,
            full_intr,
            render_intr,
            render_opts: RenderOptions::default(),
            weights: CostWeights::default(),
            centerline_form: CenterlineForm::default(),
            visibility_mode: VisibilityMode::default(),
        }
    }
}

/// Normalized cross-correlation of two equally-sized depth maps over the
/// intersection of their valid masks. `Ok(None)` when fewer than 16 pixels
/// overlap or either side's variance is below 1e-12.
pub fn ncc(a: &DepthMap, b: &DepthMap) -> Result<Option<f64>, CostError> {
    if a.width != b.width || a.height != b.height {
        return Err(CostError::DimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    let av = a.raw_values();
    let bv = b.raw_values();
    let am = a.valid_mask();
    let bm = b.valid_mask();
    let mut n = 0usize;
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    for i in 0..av.len() {
        if am[i] && bm[i] {
            n += 1;
            sum_a += av[i];
            sum_b += bv[i];
        }
    }
    if n < NCC_MIN_PIXELS {
        return Ok(None);
    }
    let mu_a = sum_a / n as f64;
    let mu_b = sum_b / n as f64;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for i in 0..av.len() {
        if am[i] && bm[i] {
            let da = av[i] - mu_a;
            let db = bv[i] - mu_b;
            cov += da * db;
            var_a += da * da;
            var_b += db * db;
        }
    }
    let nf = n as f64;
    if var_a / nf < NCC_MIN_VARIANCE || var_b / nf < NCC_MIN_VARIANCE {
        return Ok(None);
    }
    Ok(Some((cov / (var_a.sqrt() * var_b.sqrt())).clamp(-1.0, 1.0)))
}

/// Depth term: 1 - NCC between the perceived map and the view rendered at
/// `pose`. A pose outside the lumen or a degenerate correlation yields the
/// worst-case value 2 with `valid = false`.
pub fn depth_cost(
    perceived: &DepthMap,
    tree: &AirwayTree,
    pose: &Pose,
    render_intr: &Intrinsics,
    render_opts: &RenderOptions,
) -> (f64, bool) {
    let rendered = match render_depth(tree, pose, render_intr, render_opts) {
        Ok(m) => m,
        Err(CameraError::CameraOutsideLumen { .. }) => return (DEPTH_COST_INVALID, false),
        Err(_) => return (DEPTH_COST_INVALID, false),
    };
    let downsampled;
    let perceived = if perceived.width == render_intr.width && perceived.height == render_intr.height
    {
        perceived
    } else {
        downsampled = perceived.downsample_to(render_intr.width, render_intr.height);
        &downsampled
    };
    match ncc(perceived, &rendered) {
        Ok(Some(v)) => ((1.0 - v).clamp(0.0, 2.0), true),
        _ => (DEPTH_COST_INVALID, false),
    }
}

/// Landmark term: visibility-weighted mean pixel distance between detected
/// and projected landmarks. Projections behind the camera contribute the
/// image diagonal. Returns (cost, valid, count of rows with v >= 0.5); when
/// the visibility mass is below 1e-3 the term is excluded (cost 0, invalid).
pub fn landmark_cost(
    obs: &[LandmarkObservation],
    tree: &AirwayTree,
    pose: &Pose,
    intr: &Intrinsics,
    mode: VisibilityMode,
) -> (f64, bool, usize) {
    let diag = intr.diagonal_px();
    let mut weight_sum = 0.0;
    let mut cost_sum = 0.0;
    let mut visible_count = 0usize;
    for row in obs {
        if row.visibility >= 0.5 {
            visible_count += 1;
        }
        let v = match mode {
            VisibilityMode::Soft => row.visibility,
            VisibilityMode::HardThreshold => {
                if row.visibility >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
        };
        if v <= 0.0 {
            continue;
        }
        let Some(branch) = tree.branches().get(row.landmark_id) else {
            debug_assert!(false, "landmark id {} out of range", row.landmark_id);
            continue;
        };
        let p_cam = pose.world_to_camera(&branch.landmark);
        let proj = project(intr, &p_cam);
        let dist = if proj.in_front {
            ((row.x - proj.x).powi(2) + (row.y - proj.y).powi(2)).sqrt()
        } else {
            diag
        };
        weight_sum += v;
        cost_sum += v * dist;
    }
    if weight_sum < VISIBILITY_EPS {
        return (0.0, false, visible_count);
    }
    (cost_sum / weight_sum, true, visible_count)
}

/// Centerline term for the given branch: penalizes distance `d` from the
/// branch centerline and the angle `phi` between the viewing direction and
/// the local tangent, with sigma1 = r/2 (r the interpolated radius at the
/// foot point) and sigma2 = pi/6.
pub fn centerline_cost(
    tree: &AirwayTree,
    branch_id: BranchId,
    pose: &Pose,
    form: CenterlineForm,
) -> f64 {
    let q = tree
        .nearest_on_branch(branch_id, &pose.position)
        .expect("valid branch id");
    let d = q.distance;
    let cos_phi = pose.forward().dot(&q.tangent).clamp(-1.0, 1.0);
    let phi = cos_phi.acos();
    let sigma1 = q.radius / 2.0;
    let sigma2 = FRAC_PI_6;
    let quad = d * d / (2.0 * sigma1 * sigma1) + phi * phi / (2.0 * sigma2 * sigma2);
    match form {
        CenterlineForm::NegLogQuadratic => quad,
        CenterlineForm::LiteralDensityProduct => (-quad).exp() / (TAU * sigma1 * sigma2),
    }
}

/// Weighted sum of the three terms (Eq. 1 shape): invalid terms contribute
/// their defined fallbacks (depth -> 2, landmarks -> 0/excluded). Terms whose
/// weight is zero are skipped entirely and reported invalid with value 0.
pub fn total_cost(
    ctx: &CostContext,
    frame: &FrameObservation,
    branch_id: BranchId,
    pose: &Pose,
) -> CostBreakdown {
    let w = &ctx.weights;
    let (l_depth, depth_valid) = if w.alpha_depth > 0.0 {
        depth_cost(
            &frame.depth,
            ctx.tree,
            pose,
            &ctx.render_intr,
            &ctx.render_opts,
        )
    } else {
        (0.0, false)
    };
    let (l_landmark, landmark_valid, visible_count) = if w.alpha_landmark > 0.0 {
        landmark_cost(
            &frame.landmarks,
            ctx.tree,
            pose,
            &ctx.full_intr,
            ctx.visibility_mode,
        )
    } else {
        let visible = frame
            .landmarks
            .iter()
            .filter(|l| l.visibility >= 0.5)
            .count();
        (0.0, false, visible)
    };
    let l_centerline = if w.alpha_centerline > 0.0 {
        centerline_cost(ctx.tree, branch_id, pose, ctx.centerline_form)
    } else {
        0.0
    };
    let total = w.alpha_depth * l_depth
        + w.alpha_landmark * l_landmark
        + w.alpha_centerline * l_centerline;
    CostBreakdown {
        l_depth,
        l_landmark,
        l_centerline,
        depth_valid,
        landmark_valid,
        total,
        visible_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airway::Branch;
    use approx::assert_relative_eq;
    use nalgebra::{Point3, UnitQuaternion, Vector3};

    fn map_from(values: &[f64], w: usize, h: usize) -> DepthMap {
        DepthMap::from_values(w, h, values.to_vec())
    }

    fn ramp(w: usize, h: usize) -> DepthMap {
        let values: Vec<f64> = (0..w * h).map(|i| 1.0 + i as f64).collect();
        map_from(&values, w, h)
    }

    #[test]
    fn ncc_self_is_one() {
        let z = ramp(8, 8);
        let v = ncc(&z, &z).unwrap().unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ncc_positive_affine_invariance() {
        let z = ramp(8, 8);
        let w = z.affine(2.5, 7.0);
        let v = ncc(&z, &w).unwrap().unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ncc_anticorrelation() {
        let z = ramp(8, 8);
        let neg: Vec<f64> = z.raw_values().iter().map(|v| 100.0 - v).collect();
        let w = map_from(&neg, 8, 8);
        let v = ncc(&z, &w).unwrap().unwrap();
        assert!((v + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ncc_degenerate_cases() {
        let z = ramp(8, 8);
        let flat = map_from(&vec![3.0; 64], 8, 8);
        assert_eq!(ncc(&z, &flat).unwrap(), None);
        let tiny = ramp(3, 3); // 9 < 16 pixels
        assert_eq!(ncc(&tiny, &tiny).unwrap(), None);
        let other = ramp(4, 4);
        assert!(ncc(&z, &other).is_err());
    }

    #[test]
    fn ncc_symmetry() {
        let a = ramp(8, 8);
        let mut bvals = vec![0.0; 64];
        for (i, v) in bvals.iter_mut().enumerate() {
            *v = ((i * 7919) % 97) as f64 + 1.0;
        }
        let b = map_from(&bvals, 8, 8);
        let ab = ncc(&a, &b).unwrap().unwrap();
        let ba = ncc(&b, &a).unwrap().unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    fn straight_tree() -> AirwayTree {
        let b = Branch {
            id: 0,
            parent_id: None,
            centerline: vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.0, 0.0, 40.0)],
            radii: vec![4.0, 4.0],
            landmark: Point3::new(0.0, 0.0, 40.0),
            name: "root".into(),
        };
        AirwayTree::new(vec![b], 0).unwrap()
    }

    #[test]
    fn landmark_cost_weighted_mean() {
        // Two landmarks with v = (1, 0.5) and pixel distances (2, 4):
        // (1*2 + 0.5*4) / 1.5 = 8/3.
        let b0 = Branch {
            id: 0,
            parent_id: None,
            centerline: vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.0, 0.0, 40.0)],
            radii: vec![4.0, 4.0],
            landmark: Point3::new(0.0, 0.0, 40.0),
            name: "root".into(),
        };
        let b1 = Branch {
            id: 1,
            parent_id: Some(0),
            centerline: vec![Point3::new(0.0, 0.0, 40.0), Point3::new(0.0, 20.0, 60.0)],
            radii: vec![2.8, 2.8],
            landmark: Point3::new(0.0, 20.0, 60.0),
            name: "L".into(),
        };
        let tree = AirwayTree::new(vec![b0, b1], 0).unwrap();
        let intr = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let pose = Pose::new(Point3::new(0.0, 0.0, 10.0), UnitQuaternion::identity());
        let proj0 = project(&intr, &pose.world_to_camera(&tree.branches()[0].landmark));
        let proj1 = project(&intr, &pose.world_to_camera(&tree.branches()[1].landmark));
        let obs = vec![
            LandmarkObservation {
                landmark_id: 0,
                visibility: 1.0,
                x: proj0.x + 2.0,
                y: proj0.y,
            },
            LandmarkObservation {
                landmark_id: 1,
                visibility: 0.5,
                x: proj1.x,
                y: proj1.y + 4.0,
            },
        ];
        let (cost, valid, count) = landmark_cost(&obs, &tree, &pose, &intr, VisibilityMode::Soft);
        assert!(valid);
        assert_eq!(count, 2);
        assert_relative_eq!(cost, 8.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn landmark_cost_zero_when_aligned() {
        let tree = straight_tree();
        let intr = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let pose = Pose::new(Point3::new(0.0, 0.0, 5.0), UnitQuaternion::identity());
        let proj = project(&intr, &pose.world_to_camera(&tree.branches()[0].landmark));
        let obs = vec![LandmarkObservation {
            landmark_id: 0,
            visibility: 1.0,
            x: proj.x,
            y: proj.y,
        }];
        let (cost, valid, _) = landmark_cost(&obs, &tree, &pose, &intr, VisibilityMode::Soft);
        assert!(valid);
        assert_relative_eq!(cost, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn landmark_cost_all_invisible_excluded() {
        let tree = straight_tree();
        let intr = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let pose = Pose::new(Point3::new(0.0, 0.0, 5.0), UnitQuaternion::identity());
        let obs = vec![LandmarkObservation {
            landmark_id: 0,
            visibility: 0.0,
            x: 0.0,
            y: 0.0,
        }];
        let (cost, valid, count) = landmark_cost(&obs, &tree, &pose, &intr, VisibilityMode::Soft);
        assert_eq!((cost, valid, count), (0.0, false, 0));
    }

    #[test]
    fn landmark_behind_camera_pays_diagonal() {
        let tree = straight_tree();
        let intr = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        // Camera past the landmark, looking further along +z.
        let pose = Pose::new(Point3::new(0.0, 0.0, 41.0), UnitQuaternion::identity());
        let obs = vec![LandmarkObservation {
            landmark_id: 0,
            visibility: 1.0,
            x: 50.0,
            y: 50.0,
        }];
        let (cost, valid, _) = landmark_cost(&obs, &tree, &pose, &intr, VisibilityMode::Soft);
        assert!(valid);
        assert_relative_eq!(cost, intr.diagonal_px(), epsilon = 1e-9);
    }

    #[test]
    fn centerline_trivials() {
        let tree = straight_tree();
        // On the centerline looking along the tangent.
        let pose = Pose::new(Point3::new(0.0, 0.0, 20.0), UnitQuaternion::identity());
        assert_relative_eq!(
            centerline_cost(&tree, 0, &pose, CenterlineForm::NegLogQuadratic),
            0.0,
            epsilon = 1e-12
        );
        // d = sigma1 = r/2 = 2, phi = 0 -> 0.5.
        let pose = Pose::new(Point3::new(2.0, 0.0, 20.0), UnitQuaternion::identity());
        assert_relative_eq!(
            centerline_cost(&tree, 0, &pose, CenterlineForm::NegLogQuadratic),
            0.5,
            epsilon = 1e-12
        );
        // d = r/2 = 2 and phi = pi/6 -> 0.5 + 0.5 = 1.
        let rot = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), FRAC_PI_6);
        let pose = Pose::new(Point3::new(2.0, 0.0, 20.0), rot);
        assert_relative_eq!(
            centerline_cost(&tree, 0, &pose, CenterlineForm::NegLogQuadratic),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn literal_form_peaks_on_axis() {
        let tree = straight_tree();
        let on = Pose::new(Point3::new(0.0, 0.0, 20.0), UnitQuaternion::identity());
        let off = Pose::new(Point3::new(2.0, 0.0, 20.0), UnitQuaternion::identity());
        let f_on = centerline_cost(&tree, 0, &on, CenterlineForm::LiteralDensityProduct);
        let f_off = centerline_cost(&tree, 0, &off, CenterlineForm::LiteralDensityProduct);
        assert!(f_on > f_off, "density product is maximal on the centerline");
        let sigma1 = 2.0;
        let sigma2 = FRAC_PI_6;
        assert_relative_eq!(f_on, 1.0 / (TAU * sigma1 * sigma2), epsilon = 1e-12);
    }

    #[test]
    fn total_cost_is_weighted_sum() {
        let tree = straight_tree();
        let full = Intrinsics::new(90.0, 90.0, 100.0, 100.0, 200, 200).unwrap();
        let render = full.scaled_to(24, 24);
        let mut ctx = CostContext::new(&tree, full, render);
        ctx.weights = CostWeights {
            alpha_depth: 1.0,
            alpha_landmark: 0.02,
            alpha_centerline: 0.5,
        };
        let gt = Pose::new(Point3::new(0.0, 0.0, 10.0), UnitQuaternion::identity());
        let frame = crate::perception::simulate_frame(
            &tree,
            &gt,
            &full,
            &render,
            &ctx.render_opts,
            &crate::perception::NoiseModel::default(),
            false,
            0,
        )
        .unwrap();
        let pose = Pose::new(Point3::new(0.5, -0.3, 12.0), UnitQuaternion::identity());
        let b = total_cost(&ctx, &frame, 0, &pose);
        let (ld, dv) = depth_cost(&frame.depth, &tree, &pose, &ctx.render_intr, &ctx.render_opts);
        let (ll, lv, _) = landmark_cost(
            &frame.landmarks,
            &tree,
            &pose,
            &ctx.full_intr,
            VisibilityMode::Soft,
        );
        let lc = centerline_cost(&tree, 0, &pose, CenterlineForm::NegLogQuadratic);
        assert_eq!(b.depth_valid, dv);
        assert_eq!(b.landmark_valid, lv);
        assert_relative_eq!(
            b.total,
            1.0 * ld + 0.02 * ll + 0.5 * lc,
            epsilon = 1e-12
        );
    }

    #[test]
    fn total_cost_weight_projection() {
        let tree = straight_tree();
        let full = Intrinsics::new(90.0, 90.0, 100.0, 100.0, 200, 200).unwrap();
        let render = full.scaled_to(24, 24);
        let mut ctx = CostContext::new(&tree, full, render);
        ctx.weights = CostWeights {
            alpha_depth: 1.0,
            alpha_landmark: 0.0,
            alpha_centerline: 0.0,
        };
        let gt = Pose::new(Point3::new(0.0, 0.0, 10.0), UnitQuaternion::identity());
        let frame = crate::perception::simulate_frame(
            &tree,
            &gt,
            &full,
            &render,
            &ctx.render_opts,
            &crate::perception::NoiseModel::zero(),
            false,
            0,
        )
        .unwrap();
        let b = total_cost(&ctx, &frame, 0, &gt);
        assert_relative_eq!(b.total, b.l_depth, epsilon = 1e-15);
        assert!(b.depth_valid);
        // Zero noise: perceived is an affine image of the render, NCC = 1.
        assert!(b.l_depth.abs() < 1e-9);
    }

    #[test]
    fn depth_cost_outside_lumen_falls_back() {
        let tree = straight_tree();
        let intr = Intrinsics::new(16.0, 16.0, 8.0, 8.0, 16, 16).unwrap();
        let perceived = ramp(16, 16);
        let pose = Pose::new(Point3::new(50.0, 0.0, 20.0), UnitQuaternion::identity());
        let (cost, valid) = depth_cost(&perceived, &tree, &pose, &intr, &RenderOptions::default());
        assert_eq!((cost, valid), (2.0, false));
    }
}

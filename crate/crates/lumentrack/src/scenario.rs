//! Scenario configuration and reproducible end-to-end runs: tree sourcing,
//! ground-truth path synthesis along centerlines with bounded wobble,
//! simulated observation streams, tracking and evaluation.

use crate::airway::{generate_tree, AirwayError, AirwayTree, BranchId, TreeGenConfig};
use crate::camera::{lumen_sdf, CameraError, DepthMode, Intrinsics, RenderOptions};
use crate::cost::{CenterlineForm, CostContext, CostWeights, VisibilityMode};
use crate::metrics::{
    summarize, MetricsError, MetricsSummary, RuntimeBreakdown, TrajectoryRecord,
};
use crate::perception::{
    DegradationSchedule, FrameProvider, LandmarkLabeling, NoiseModel, ProviderError,
    SimulatedProvider,
};
use crate::pose::Pose;
use crate::tracker::{run_sequence, TrackerConfig};
use nalgebra::{Point3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Airway(#[from] AirwayError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("ground-truth path leaves the lumen at frame {t} (sdf {sdf:.3} mm)")]
    PathOutsideLumen { t: usize, sdf: f64 },
    #[error("scenario io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Where the airway tree comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeSource {
    Generate(TreeGenConfig),
    File(PathBuf),
}

impl Default for TreeSource {
    fn default() -> Self {
        TreeSource::Generate(TreeGenConfig::default())
    }
}

/// Depth rendering resolution and ray options used by both the simulated
/// perception and the tracker's cost (the two must share one convention).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub max_range_mm: f64,
    pub depth_mode: DepthMode,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            max_range_mm: 200.0,
            depth_mode: DepthMode::EuclideanRay,
        }
    }
}

impl RenderConfig {
    pub fn options(&self) -> RenderOptions {
        RenderOptions {
            max_range_mm: self.max_range_mm,
            depth_mode: self.depth_mode,
        }
    }
}

/// Ground-truth camera path: a centerline traversal of connected branches at
/// constant arc speed, with bounded lateral and angular wobble.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathSpec {
    /// Root-to-leaf connected chain of branch ids; empty picks the chain of
    /// smallest child ids from the root.
    #[serde(default)]
    pub branch_sequence: Vec<BranchId>,
    pub speed_mm_per_frame: f64,
    /// Lateral wobble amplitude, mm (clamped to 45% of the local radius).
    pub wobble_mm: f64,
    /// Angular wobble amplitude, degrees.
    pub wobble_deg: f64,
    pub n_frames: usize,
    /// Arc-length margin skipped at the start of the chain, mm.
    pub start_margin_mm: f64,
}

impl Default for PathSpec {
    fn default() -> Self {
        Self {
            branch_sequence: Vec::new(),
            speed_mm_per_frame: 0.5,
            wobble_mm: 0.3,
            wobble_deg: 1.5,
            n_frames: 200,
            start_margin_mm: 2.0,
        }
    }
}

/// Cost-term ablation switches, mirroring the ablation study rows.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    #[serde(default)]
    pub disable_depth: bool,
    #[serde(default)]
    pub disable_landmark: bool,
    #[serde(default)]
    pub disable_centerline: bool,
    #[serde(default)]
    pub disable_reinit: bool,
}

fn default_intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 90.0,
        fy: 90.0,
        cx: 100.0,
        cy: 100.0,
        width: 200,
        height: 200,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub tree: TreeSource,
    #[serde(default = "default_intrinsics")]
    pub intrinsics: Intrinsics,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub path: PathSpec,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub degradation: DegradationSchedule,
    #[serde(default)]
    pub tracker: TrackerConfig,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default)]
    pub centerline_form: CenterlineForm,
    #[serde(default)]
    pub visibility_mode: VisibilityMode,
    #[serde(default)]
    pub labeling: LandmarkLabeling,
    /// When true, frames inside degradation windows are left unlabeled and
    /// excluded from metrics.
    #[serde(default)]
    pub unlabel_degraded: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            tree: TreeSource::default(),
            intrinsics: default_intrinsics(),
            render: RenderConfig::default(),
            path: PathSpec::default(),
            noise: NoiseModel::default(),
            degradation: DegradationSchedule::none(),
            tracker: TrackerConfig::default(),
            ablation: AblationFlags::default(),
            centerline_form: CenterlineForm::default(),
            visibility_mode: VisibilityMode::default(),
            labeling: LandmarkLabeling::default(),
            unlabel_degraded: false,
            seed: 0,
        }
    }
}

const TREE_SEED_SALT: u64 = 0x7472_6565;
const NOISE_SEED_SALT: u64 = 0x6e6f_6973_65;
const PATH_SEED_SALT: u64 = 0x7061_7468;

fn derive_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

impl ScenarioConfig {
    pub fn from_json_str(s: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = serde_json::from_str(s)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String, ScenarioError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Materializes derived sub-seeds from the top-level seed so that a
    /// stored config is fully self-describing.
    pub fn resolved(&self, seed_override: Option<u64>) -> ScenarioConfig {
        let mut cfg = self.clone();
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        if let TreeSource::Generate(ref mut g) = cfg.tree {
            g.seed = derive_seed(cfg.seed, TREE_SEED_SALT);
        }
        cfg.noise.seed = derive_seed(cfg.seed, NOISE_SEED_SALT);
        cfg
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.intrinsics.validate()?;
        if self.render.width == 0 || self.render.height == 0 {
            return Err(ScenarioError::Invalid("render resolution must be nonzero".into()));
        }
        if !(self.path.speed_mm_per_frame > 0.0) || self.path.n_frames == 0 {
            return Err(ScenarioError::Invalid(
                "path speed and frame count must be positive".into(),
            ));
        }
        if self.path.wobble_mm < 0.0 || self.path.wobble_deg < 0.0 {
            return Err(ScenarioError::Invalid("wobble amplitudes must be nonnegative".into()));
        }
        self.noise.validate().map_err(ScenarioError::Invalid)?;
        self.degradation.validate().map_err(ScenarioError::Invalid)?;
        self.tracker.validate().map_err(ScenarioError::Invalid)?;
        self.effective_weights()
            .validate()
            .map_err(ScenarioError::Invalid)?;
        Ok(())
    }

    /// Tracker weights with ablation flags applied.
    pub fn effective_weights(&self) -> CostWeights {
        let mut w = self.tracker.weights;
        if self.ablation.disable_depth {
            w.alpha_depth = 0.0;
        }
        if self.ablation.disable_landmark {
            w.alpha_landmark = 0.0;
        }
        if self.ablation.disable_centerline {
            w.alpha_centerline = 0.0;
        }
        w
    }

    pub fn effective_tracker(&self) -> TrackerConfig {
        let mut t = self.tracker.clone();
        t.weights = self.effective_weights();
        if self.ablation.disable_reinit {
            t.reinit_enabled = false;
        }
        t
    }

    pub fn render_intrinsics(&self) -> Intrinsics {
        self.intrinsics.scaled_to(self.render.width, self.render.height)
    }

    pub fn cost_context<'a>(&self, tree: &'a AirwayTree) -> CostContext<'a> {
        CostContext {
            tree,
            full_intr: self.intrinsics,
            render_intr: self.render_intrinsics(),
            render_opts: self.render.options(),
            weights: self.effective_weights(),
            centerline_form: self.centerline_form,
            visibility_mode: self.visibility_mode,
        }
    }

    pub fn tree(&self) -> Result<AirwayTree, ScenarioError> {
        match &self.tree {
            TreeSource::Generate(g) => Ok(generate_tree(g)?),
            TreeSource::File(p) => Ok(AirwayTree::load(p)?),
        }
    }
}

/// One ground-truth frame.
#[derive(Debug, Clone, Copy)]
pub struct GtFrame {
    pub t: usize,
    pub pose: Pose,
    pub branch: BranchId,
    pub labeled: bool,
}

/// Resolves the traversal chain: validates a given sequence (connected,
/// starting at the root) or defaults to following smallest child ids.
pub fn resolve_branch_chain(
    tree: &AirwayTree,
    spec: &[BranchId],
) -> Result<Vec<BranchId>, ScenarioError> {
    if spec.is_empty() {
        let mut chain = vec![tree.root_id()];
        loop {
            let children = tree.children(*chain.last().unwrap());
            match children.iter().min() {
                Some(&c) => chain.push(c),
                None => break,
            }
        }
        return Ok(chain);
    }
    if spec[0] != tree.root_id() {
        return Err(ScenarioError::Invalid(format!(
            "branch sequence must start at the root ({})",
            tree.root_id()
        )));
    }
    for w in spec.windows(2) {
        if w[1] >= tree.len() || tree.parent(w[1]) != Some(w[0]) {
            return Err(ScenarioError::Invalid(format!(
                "branch sequence {} -> {} is not a parent-child link",
                w[0], w[1]
            )));
        }
    }
    Ok(spec.to_vec())
}

struct ChainGeometry {
    /// Concatenated centerline vertices of the chain.
    points: Vec<Point3<f64>>,
    /// Cumulative arc length at each vertex.
    cum: Vec<f64>,
    /// Branch owning each segment [i, i+1].
    seg_branch: Vec<BranchId>,
}

impl ChainGeometry {
    fn build(tree: &AirwayTree, chain: &[BranchId]) -> Self {
        let mut points: Vec<Point3<f64>> = Vec::new();
        let mut seg_branch = Vec::new();
        for &b in chain {
            let line = &tree.branch(b).unwrap().centerline;
            let start = if points.is_empty() { 0 } else { 1 };
            for v in &line[start..] {
                points.push(*v);
            }
            let new_segs = line.len() - 1;
            seg_branch.extend(std::iter::repeat(b).take(new_segs));
        }
        let mut cum = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in points.windows(2) {
            acc += (w[1] - w[0]).norm();
            cum.push(acc);
        }
        Self {
            points,
            cum,
            seg_branch,
        }
    }

    fn total_length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Point, owning branch and segment index at arc length `s` (clamped).
    fn at(&self, s: f64) -> (Point3<f64>, BranchId, usize) {
        let s = s.clamp(0.0, self.total_length());
        let mut i = match self
            .cum
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(k) => k,
            Err(k) => k.saturating_sub(1),
        };
        if i >= self.points.len() - 1 {
            i = self.points.len() - 2;
        }
        let seg_len = self.cum[i + 1] - self.cum[i];
        let f = if seg_len > 0.0 { (s - self.cum[i]) / seg_len } else { 0.0 };
        let p = self.points[i] + (self.points[i + 1] - self.points[i]) * f;
        (p, self.seg_branch[i], i)
    }

    /// Chord direction across a +-h window; smooth across polyline joints.
    fn smoothed_tangent(&self, s: f64, h: f64) -> Vector3<f64> {
        let (a, _, _) = self.at(s - h);
        let (b, _, _) = self.at(s + h);
        let d = b - a;
        if d.norm() < 1e-12 {
            let (p0, _, i) = self.at(s);
            let _ = p0;
            return (self.points[i + 1] - self.points[i]).normalize();
        }
        d.normalize()
    }
}

fn perpendicular_of(d: &Vector3<f64>) -> Vector3<f64> {
    let candidate = if d.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    d.cross(&candidate).normalize()
}

/// Synthesizes the ground-truth trajectory: constant arc speed along the
/// chain with smooth seeded lateral/angular wobble, orientation following the
/// local tangent with roll carried by minimal rotation between frames.
/// Errors if any frame leaves the lumen or the path overruns the chain.
pub fn synthesize_gt_path(
    tree: &AirwayTree,
    cfg: &ScenarioConfig,
) -> Result<Vec<GtFrame>, ScenarioError> {
    let chain = resolve_branch_chain(tree, &cfg.path.branch_sequence)?;
    let geom = ChainGeometry::build(tree, &chain);
    let spec = &cfg.path;
    let end_margin = tree.branch(*chain.last().unwrap()).unwrap().radii[0].max(2.0);
    let needed = spec.start_margin_mm
        + spec.speed_mm_per_frame * (spec.n_frames.saturating_sub(1)) as f64
        + end_margin;
    if needed > geom.total_length() {
        return Err(ScenarioError::Invalid(format!(
            "path needs {:.1} mm but the chain offers {:.1} mm",
            needed,
            geom.total_length()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, PATH_SEED_SALT));
    // Smooth wobble: two sinusoids per lateral axis and per angular axis.
    let mut osc = || {
        (
            rng.gen_range(0.015..0.06), // cycles per mm
            rng.gen_range(0.0..std::f64::consts::TAU),
        )
    };
    let (lat1, lat2, ang1, ang2) = (osc(), osc(), osc(), osc());

    let smooth_h = 3.0;
    let mut frames = Vec::with_capacity(spec.n_frames);
    let mut prev_forward: Option<Vector3<f64>> = None;
    let mut prev_quat = UnitQuaternion::identity();
    let mut normal1 = Vector3::x();
    for t in 0..spec.n_frames {
        let s = spec.start_margin_mm + spec.speed_mm_per_frame * t as f64;
        let (base, branch, _) = geom.at(s);
        let tangent = geom.smoothed_tangent(s, smooth_h);

        // Parallel-transport the lateral frame along the path.
        if prev_forward.is_none() {
            normal1 = perpendicular_of(&tangent);
        } else {
            normal1 = (normal1 - tangent * normal1.dot(&tangent)).normalize();
        }
        let normal2 = tangent.cross(&normal1);

        let local_radius = tree.nearest_on_branch(branch, &base)?.radius;
        let amp = spec.wobble_mm.min(0.45 * local_radius);
        let raw = normal1 * (std::f64::consts::TAU * lat1.0 * s + lat1.1).sin()
            + normal2 * (std::f64::consts::TAU * lat2.0 * s + lat2.1).sin();
        let position = Point3::from(base.coords + raw * (amp / std::f64::consts::SQRT_2));

        // Base orientation: canonical roll at t = 0, then minimal rotation
        // carrying the previous frame onto the new tangent.
        let base_quat = match prev_forward {
            None => {
                let world_z = Vector3::z();
                let reference = if tangent.cross(&world_z).norm() < 1e-6 {
                    Vector3::x()
                } else {
                    -world_z
                };
                let y_cam = (reference - tangent * reference.dot(&tangent)).normalize();
                let x_cam = y_cam.cross(&tangent);
                UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(
                    nalgebra::Matrix3::from_columns(&[x_cam, y_cam, tangent]),
                ))
            }
            Some(pf) => {
                let delta = UnitQuaternion::rotation_between(&pf, &tangent)
                    .unwrap_or_else(UnitQuaternion::identity);
                delta * prev_quat
            }
        };
        prev_forward = Some(tangent);
        prev_quat = base_quat;

        let wob = spec.wobble_deg.to_radians();
        let pitch = wob * (std::f64::consts::TAU * ang1.0 * s + ang1.1).sin();
        let yaw = wob * (std::f64::consts::TAU * ang2.0 * s + ang2.1).sin();
        let orientation = base_quat * UnitQuaternion::from_scaled_axis(Vector3::new(pitch, yaw, 0.0));

        let pose = Pose {
            position,
            orientation,
        };
        let sdf = lumen_sdf(tree, &pose.position);
        if sdf >= 0.0 {
            return Err(ScenarioError::PathOutsideLumen { t, sdf });
        }
        let labeled = !(cfg.unlabel_degraded && cfg.degradation.is_degraded(t));
        frames.push(GtFrame {
            t,
            pose,
            branch,
            labeled,
        });
    }
    Ok(frames)
}

pub const GT_CSV_HEADER: &str = "t,labeled,x,y,z,qw,qx,qy,qz,branch";

pub fn write_gt_csv(path: &Path, frames: &[GtFrame]) -> Result<(), ScenarioError> {
    let mut out = String::with_capacity(frames.len() * 120 + 64);
    out.push_str(GT_CSV_HEADER);
    out.push('\n');
    for f in frames {
        let q = f.pose.orientation.quaternion();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            f.t,
            f.labeled as u8,
            f.pose.position.x,
            f.pose.position.y,
            f.pose.position.z,
            q.w,
            q.i,
            q.j,
            q.k,
            f.branch
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_gt_csv(path: &Path) -> Result<Vec<GtFrame>, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == GT_CSV_HEADER => {}
        other => {
            return Err(ScenarioError::Invalid(format!(
                "unexpected gt csv header {other:?}"
            )))
        }
    }
    let mut frames = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(ScenarioError::Invalid(format!(
                "gt csv row has {} fields",
                f.len()
            )));
        }
        let num = |s: &str| -> Result<f64, ScenarioError> {
            s.parse()
                .map_err(|_| ScenarioError::Invalid(format!("bad gt value {s:?}")))
        };
        frames.push(GtFrame {
            t: f[0]
                .parse()
                .map_err(|_| ScenarioError::Invalid(format!("bad t {:?}", f[0])))?,
            labeled: f[1] == "1",
            pose: Pose {
                position: Point3::new(num(f[2])?, num(f[3])?, num(f[4])?),
                orientation: UnitQuaternion::new_unchecked(Quaternion::new(
                    num(f[5])?,
                    num(f[6])?,
                    num(f[7])?,
                    num(f[8])?,
                )),
            },
            branch: f[9]
                .parse()
                .map_err(|_| ScenarioError::Invalid(format!("bad branch {:?}", f[9])))?,
        });
    }
    Ok(frames)
}

/// Joins ground truth into tracker records (by frame index).
pub fn join_gt(records: &mut [TrajectoryRecord], gt: &[GtFrame]) {
    use std::collections::BTreeMap;
    let by_t: BTreeMap<usize, &GtFrame> = gt.iter().map(|f| (f.t, f)).collect();
    for r in records.iter_mut() {
        if let Some(f) = by_t.get(&r.t) {
            r.labeled = f.labeled;
            r.gt_pose = f.labeled.then_some(f.pose);
            r.branch_gt = Some(f.branch);
        }
    }
}

/// Builds a blackout-transit variant of a scenario: finds the frame at which
/// the ground-truth path last enters a new branch and schedules a degradation
/// window spanning that transit ([t - before, t + after]). The tracker must
/// then recover in the new branch.
pub fn make_blackout_transit(
    cfg: ScenarioConfig,
    before: usize,
    after: usize,
) -> Result<ScenarioConfig, ScenarioError> {
    let cfg = cfg.resolved(None);
    let tree = cfg.tree()?;
    let gt = synthesize_gt_path(&tree, &cfg)?;
    let mut transit = None;
    for w in gt.windows(2) {
        if w[1].branch != w[0].branch {
            transit = Some(w[1].t);
        }
    }
    let Some(t) = transit else {
        return Err(ScenarioError::Invalid(
            "path never crosses a bifurcation; cannot build a transit blackout".into(),
        ));
    };
    let start = t.saturating_sub(before);
    let end = (t + after).min(gt.len().saturating_sub(2));
    if start >= end {
        return Err(ScenarioError::Invalid(
            "degradation window around the transit is empty".into(),
        ));
    }
    let mut out = cfg;
    out.degradation = DegradationSchedule {
        windows: vec![(start, end)],
    };
    Ok(out)
}

/// Everything produced by an in-memory scenario run.
pub struct ScenarioRun {
    pub tree: AirwayTree,
    pub gt: Vec<GtFrame>,
    pub records: Vec<TrajectoryRecord>,
    pub summary: MetricsSummary,
    pub timings: RuntimeBreakdown,
}

/// Runs a scenario end to end with the simulated provider, entirely in
/// memory: resolve seeds, generate the tree and path, track, join ground
/// truth, summarize.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioRun, ScenarioError> {
    let cfg = cfg.resolved(None);
    cfg.validate()?;
    let tree = cfg.tree()?;
    let gt = synthesize_gt_path(&tree, &cfg)?;
    let gt_poses: Vec<Pose> = gt.iter().map(|f| f.pose).collect();
    let ctx = cfg.cost_context(&tree);
    let tracker_cfg = cfg.effective_tracker();
    let mut provider = SimulatedProvider::new(
        &tree,
        &gt_poses,
        cfg.intrinsics,
        cfg.render_intrinsics(),
        cfg.render.options(),
        cfg.noise.clone(),
        cfg.degradation.clone(),
        cfg.labeling,
    );
    let init_pose = gt[0].pose;
    let (mut records, timings) =
        run_sequence(&ctx, &tracker_cfg, &mut provider, init_pose, gt.len());
    join_gt(&mut records, &gt);
    let summary = summarize(&records, Some(timings));
    Ok(ScenarioRun {
        tree,
        gt,
        records,
        summary,
        timings,
    })
}

/// Tracks a pre-recorded observation stream against a tree and ground truth.
pub fn track_recorded(
    cfg: &ScenarioConfig,
    tree: &AirwayTree,
    gt: &[GtFrame],
    provider: &mut dyn FrameProvider,
) -> Result<(Vec<TrajectoryRecord>, MetricsSummary, RuntimeBreakdown), ScenarioError> {
    let ctx = cfg.cost_context(tree);
    let tracker_cfg = cfg.effective_tracker();
    let init_pose = gt
        .first()
        .ok_or_else(|| ScenarioError::Invalid("empty ground truth".into()))?
        .pose;
    let (mut records, timings) =
        run_sequence(&ctx, &tracker_cfg, provider, init_pose, gt.len());
    join_gt(&mut records, gt);
    let summary = summarize(&records, Some(timings));
    Ok((records, summary, timings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_chain_follows_smallest_children() {
        let tree = generate_tree(&TreeGenConfig {
            generations: 3,
            seed: 4,
            ..TreeGenConfig::default()
        })
        .unwrap();
        let chain = resolve_branch_chain(&tree, &[]).unwrap();
        assert_eq!(chain[0], tree.root_id());
        assert_eq!(chain.len(), 3);
        for w in chain.windows(2) {
            assert_eq!(tree.parent(w[1]), Some(w[0]));
        }
    }

    #[test]
    fn rejects_disconnected_chain() {
        let tree = generate_tree(&TreeGenConfig {
            generations: 3,
            seed: 4,
            ..TreeGenConfig::default()
        })
        .unwrap();
        // 3 and 4 are children of 1; skipping 1 breaks the chain.
        assert!(resolve_branch_chain(&tree, &[0, 3]).is_err() || tree.parent(3) == Some(0));
        let bad = vec![0, 1, 2];
        if tree.parent(2) != Some(1) {
            assert!(resolve_branch_chain(&tree, &bad).is_err());
        }
    }

    #[test]
    fn zero_wobble_path_lies_on_centerlines() {
        let mut cfg = ScenarioConfig::default();
        cfg.path.wobble_mm = 0.0;
        cfg.path.wobble_deg = 0.0;
        cfg.path.n_frames = 50;
        let cfg = cfg.resolved(Some(3));
        let tree = cfg.tree().unwrap();
        let gt = synthesize_gt_path(&tree, &cfg).unwrap();
        assert_eq!(gt.len(), 50);
        for f in &gt {
            let q = tree.nearest_on_branch(f.branch, &f.pose.position).unwrap();
            assert!(
                q.distance < 1e-9,
                "frame {} sits {} mm off its centerline",
                f.t,
                q.distance
            );
        }
    }

    #[test]
    fn gt_path_stays_inside_lumen() {
        for seed in 0..10 {
            let cfg = ScenarioConfig::default().resolved(Some(seed));
            let tree = cfg.tree().unwrap();
            let gt = synthesize_gt_path(&tree, &cfg).unwrap();
            for f in &gt {
                assert!(lumen_sdf(&tree, &f.pose.position) < 0.0, "seed {seed} t {}", f.t);
            }
        }
    }

    #[test]
    fn gt_path_is_smooth() {
        let cfg = ScenarioConfig::default().resolved(Some(11));
        let tree = cfg.tree().unwrap();
        let gt = synthesize_gt_path(&tree, &cfg).unwrap();
        for w in gt.windows(2) {
            let step = w[1].pose.translational_distance(&w[0].pose);
            assert!(step < 1.5 * cfg.path.speed_mm_per_frame + 2.0 * cfg.path.wobble_mm);
            let turn = w[1].pose.angular_distance(&w[0].pose).to_degrees();
            assert!(turn < 20.0, "orientation jump of {turn} degrees");
        }
    }

    #[test]
    fn path_overrun_is_rejected() {
        let mut cfg = ScenarioConfig::default();
        cfg.path.n_frames = 10_000;
        let cfg = cfg.resolved(Some(1));
        let tree = cfg.tree().unwrap();
        assert!(matches!(
            synthesize_gt_path(&tree, &cfg),
            Err(ScenarioError::Invalid(_))
        ));
    }

    #[test]
    fn gt_csv_round_trip() {
        let cfg = ScenarioConfig::default().resolved(Some(5));
        let tree = cfg.tree().unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.path.n_frames = 20;
        let gt = synthesize_gt_path(&tree, &cfg2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.csv");
        write_gt_csv(&path, &gt).unwrap();
        let back = read_gt_csv(&path).unwrap();
        assert_eq!(back.len(), gt.len());
        for (a, b) in gt.iter().zip(&back) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.branch, b.branch);
            assert_eq!(a.pose.position, b.pose.position);
            assert_eq!(
                a.pose.orientation.quaternion().coords,
                b.pose.orientation.quaternion().coords
            );
        }
    }

    #[test]
    fn scenario_json_round_trip() {
        let cfg = ScenarioConfig::default().resolved(Some(9));
        let s = cfg.to_json_string().unwrap();
        let back = ScenarioConfig::from_json_str(&s).unwrap();
        assert_eq!(back.to_json_string().unwrap(), s);
    }

    #[test]
    fn ablation_flags_zero_weights() {
        let mut cfg = ScenarioConfig::default();
        cfg.ablation.disable_landmark = true;
        cfg.ablation.disable_reinit = true;
        let w = cfg.effective_weights();
        assert_eq!(w.alpha_landmark, 0.0);
        assert!(w.alpha_depth > 0.0);
        assert!(!cfg.effective_tracker().reinit_enabled);
    }
}

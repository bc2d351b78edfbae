//! Airway geometry: branches with centerline polylines, per-vertex radii and
//! one landmark each, assembled into a rooted tree.
//!
//! Trees are immutable after construction. [`AirwayTree::new`] validates the
//! structural invariants and precomputes per-branch acceleration data
//! (cumulative arc lengths, bounding boxes) used by the distance queries and
//! the renderer.

use nalgebra::{Point3, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense branch index, `0..n`.
pub type BranchId = usize;

/// Minimum spacing between consecutive centerline vertices, mm.
pub const MIN_VERTEX_SPACING: f64 = 1e-6;
/// Tolerance for a child's first vertex coinciding with a parent vertex, mm.
pub const ATTACHMENT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AirwayError {
    #[error("invalid tree generation config: {0}")]
    InvalidConfig(String),
    #[error("could not place generation {generation} without intersection after {attempts} attempts")]
    GenerationCollision { generation: usize, attempts: usize },
    #[error("invalid airway tree: {0}")]
    InvalidTree(String),
    #[error("branch id {0} out of range")]
    BranchOutOfRange(BranchId),
    #[error("tree io: {0}")]
    Io(#[from] std::io::Error),
    #[error("tree json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One airway branch: an ordered proximal-to-distal centerline polyline with
/// a radius per vertex and a single 3D landmark point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Branch {
    pub id: BranchId,
    pub parent_id: Option<BranchId>,
    pub centerline: Vec<Point3<f64>>,
    pub radii: Vec<f64>,
    pub landmark: Point3<f64>,
    pub name: String,
}

impl Branch {
    pub fn proximal(&self) -> Point3<f64> {
        self.centerline[0]
    }

    pub fn distal(&self) -> Point3<f64> {
        *self.centerline.last().unwrap()
    }

    pub fn max_radius(&self) -> f64 {
        self.radii.iter().cloned().fold(0.0, f64::max)
    }
}

/// Precomputed straight segment of a branch centerline.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Segment {
    pub a: Vector3<f64>,
    pub dir: Vector3<f64>,
    pub len: f64,
    pub r0: f64,
    /// Radius change per mm of arc length.
    pub slope: f64,
    /// Arc length of the branch up to this segment's start.
    pub arc0: f64,
}

/// Axis-aligned box around a branch centerline (not inflated by radius).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    fn of_points(points: &[Point3<f64>]) -> Self {
        let mut min = points[0].coords;
        let mut max = points[0].coords;
        for p in &points[1..] {
            min = min.inf(&p.coords);
            max = max.sup(&p.coords);
        }
        Self { min, max }
    }

    /// Squared distance from `p` to the box; zero inside.
    #[inline]
    pub fn dist_sq(&self, p: &Vector3<f64>) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let v = p[i];
            let lo = self.min[i];
            let hi = self.max[i];
            let e = if v < lo {
                lo - v
            } else if v > hi {
                v - hi
            } else {
                0.0
            };
            d2 += e * e;
        }
        d2
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BranchAccel {
    pub segments: Vec<Segment>,
    pub aabb: Aabb,
    pub max_radius: f64,
    pub total_length: f64,
}

/// Result of a point-to-branch query.
#[derive(Debug, Clone, Copy)]
pub struct NearestOnBranch {
    /// Distance from the query point to the centerline, mm.
    pub distance: f64,
    /// Arc length from the proximal end to the foot point, mm.
    pub arc_length: f64,
    /// Unit proximal-to-distal direction of the segment containing the foot.
    pub tangent: Vector3<f64>,
    /// Linearly interpolated radius at the foot point, mm.
    pub radius: f64,
}

/// Rooted airway tree. One landmark per branch.
#[derive(Debug, Clone)]
pub struct AirwayTree {
    branches: Vec<Branch>,
    root_id: BranchId,
    children: Vec<Vec<BranchId>>,
    depth: Vec<usize>,
    accels: Vec<BranchAccel>,
    max_taper_slope: f64,
}

impl AirwayTree {
    /// Validates invariants and builds acceleration data.
    pub fn new(branches: Vec<Branch>, root_id: BranchId) -> Result<Self, AirwayError> {
        let n = branches.len();
        if n == 0 {
            return Err(AirwayError::InvalidTree("no branches".into()));
        }
        for (i, b) in branches.iter().enumerate() {
            if b.id != i {
                return Err(AirwayError::InvalidTree(format!(
                    "branch ids must be dense 0..{n}, found {} at index {i}",
                    b.id
                )));
            }
            if b.centerline.len() < 2 {
                return Err(AirwayError::InvalidTree(format!(
                    "branch {i}: centerline needs at least 2 vertices"
                )));
            }
            if b.radii.len() != b.centerline.len() {
                return Err(AirwayError::InvalidTree(format!(
                    "branch {i}: {} radii for {} vertices",
                    b.radii.len(),
                    b.centerline.len()
                )));
            }
            if b.radii.iter().any(|r| !(*r > 0.0)) {
                return Err(AirwayError::InvalidTree(format!(
                    "branch {i}: radii must be positive"
                )));
            }
            for w in b.centerline.windows(2) {
                if (w[1] - w[0]).norm() <= MIN_VERTEX_SPACING {
                    return Err(AirwayError::InvalidTree(format!(
                        "branch {i}: consecutive centerline vertices closer than {MIN_VERTEX_SPACING} mm"
                    )));
                }
            }
        }
        let roots: Vec<_> = branches.iter().filter(|b| b.parent_id.is_none()).collect();
        if roots.len() != 1 || roots[0].id != root_id {
            return Err(AirwayError::InvalidTree(format!(
                "expected exactly one root with id {root_id}"
            )));
        }
        let mut children = vec![Vec::new(); n];
        for b in &branches {
            if let Some(p) = b.parent_id {
                if p >= n {
                    return Err(AirwayError::InvalidTree(format!(
                        "branch {}: parent {p} out of range",
                        b.id
                    )));
                }
                children[p].push(b.id);
            }
        }
        // Depths via BFS from the root; also detects cycles/unreachable nodes.
        let mut depth = vec![usize::MAX; n];
        depth[root_id] = 0;
        let mut queue = std::collections::VecDeque::from([root_id]);
        let mut seen = 1;
        while let Some(b) = queue.pop_front() {
            for &c in &children[b] {
                if depth[c] != usize::MAX {
                    return Err(AirwayError::InvalidTree("parent links contain a cycle".into()));
                }
                depth[c] = depth[b] + 1;
                seen += 1;
                queue.push_back(c);
            }
        }
        if seen != n {
            return Err(AirwayError::InvalidTree(
                "some branches unreachable from the root".into(),
            ));
        }
        for b in &branches {
            if let Some(p) = b.parent_id {
                let start = b.centerline[0];
                let attached = branches[p]
                    .centerline
                    .iter()
                    .any(|v| (v - start).norm() <= ATTACHMENT_TOL);
                if !attached {
                    return Err(AirwayError::InvalidTree(format!(
                        "branch {}: first vertex does not coincide with a vertex of parent {p}",
                        b.id
                    )));
                }
            }
        }

        let accels: Vec<BranchAccel> = branches.iter().map(build_accel).collect();
        let max_taper_slope = accels
            .iter()
            .flat_map(|a| a.segments.iter())
            .map(|s| s.slope.abs())
            .fold(0.0, f64::max);

        let tree = Self {
            branches,
            root_id,
            children,
            depth,
            accels,
            max_taper_slope,
        };

        for b in 0..n {
            let q = tree.nearest_on_branch(b, &tree.branches[b].landmark)?;
            if q.distance > q.radius + 1e-9 {
                return Err(AirwayError::InvalidTree(format!(
                    "branch {b}: landmark lies {:.6} mm from the centerline, radius {:.6}",
                    q.distance, q.radius
                )));
            }
        }
        Ok(tree)
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branch(&self, id: BranchId) -> Result<&Branch, AirwayError> {
        self.branches.get(id).ok_or(AirwayError::BranchOutOfRange(id))
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn root_id(&self) -> BranchId {
        self.root_id
    }

    /// Number of landmarks; one per branch.
    pub fn n_landmarks(&self) -> usize {
        self.branches.len()
    }

    pub fn children(&self, id: BranchId) -> &[BranchId] {
        &self.children[id]
    }

    pub fn parent(&self, id: BranchId) -> Option<BranchId> {
        self.branches[id].parent_id
    }

    /// Tree depth of a branch; the root has depth 0.
    pub fn depth(&self, id: BranchId) -> usize {
        self.depth[id]
    }

    pub(crate) fn accel(&self, id: BranchId) -> &BranchAccel {
        &self.accels[id]
    }

    pub(crate) fn accels(&self) -> &[BranchAccel] {
        &self.accels
    }

    /// Largest |d radius / d arc| over all segments; bounds the SDF Lipschitz
    /// constant at 1 + this value.
    pub fn max_taper_slope(&self) -> f64 {
        self.max_taper_slope
    }

    pub fn branch_length(&self, id: BranchId) -> f64 {
        self.accels[id].total_length
    }

    /// Closest point on a branch centerline: distance, arc length of the foot
    /// point, the containing segment's unit tangent and the interpolated
    /// radius there. Ties between segments keep the most proximal foot.
    pub fn nearest_on_branch(
        &self,
        id: BranchId,
        p: &Point3<f64>,
    ) -> Result<NearestOnBranch, AirwayError> {
        if id >= self.branches.len() {
            return Err(AirwayError::BranchOutOfRange(id));
        }
        let accel = &self.accels[id];
        let pv = p.coords;
        let mut best = NearestOnBranch {
            distance: f64::INFINITY,
            arc_length: 0.0,
            tangent: Vector3::z(),
            radius: 0.0,
        };
        for seg in &accel.segments {
            let v = pv - seg.a;
            let t = (v.dot(&seg.dir)).clamp(0.0, seg.len);
            let d = (v - seg.dir * t).norm();
            if d < best.distance {
                best = NearestOnBranch {
                    distance: d,
                    arc_length: seg.arc0 + t,
                    tangent: seg.dir,
                    radius: seg.r0 + seg.slope * t,
                };
            }
        }
        Ok(best)
    }

    /// Branch nearest to `p` over the whole tree (by centerline distance).
    pub fn nearest_branch(&self, p: &Point3<f64>) -> (BranchId, NearestOnBranch) {
        let mut best_id = 0;
        let mut best = self.nearest_on_branch(0, p).unwrap();
        for id in 1..self.branches.len() {
            let q = self.nearest_on_branch(id, p).unwrap();
            if q.distance < best.distance {
                best = q;
                best_id = id;
            }
        }
        (best_id, best)
    }

    /// Point at half the total arc length and the local unit tangent.
    /// A midpoint landing exactly on a polyline joint takes the more distal
    /// segment's direction.
    pub fn branch_midpoint(
        &self,
        id: BranchId,
    ) -> Result<(Point3<f64>, Vector3<f64>), AirwayError> {
        if id >= self.branches.len() {
            return Err(AirwayError::BranchOutOfRange(id));
        }
        let accel = &self.accels[id];
        let half = accel.total_length / 2.0;
        let last = accel.segments.len() - 1;
        for (i, seg) in accel.segments.iter().enumerate() {
            // `<` assigns a joint exactly at `half` to the next segment.
            if half < seg.arc0 + seg.len || i == last {
                let t = (half - seg.arc0).clamp(0.0, seg.len);
                return Ok((Point3::from(seg.a + seg.dir * t), seg.dir));
            }
        }
        unreachable!("segments cover the full arc length");
    }

    pub fn to_json_string(&self) -> Result<String, AirwayError> {
        let doc = TreeDoc {
            branches: self
                .branches
                .iter()
                .map(|b| BranchDoc {
                    id: b.id,
                    parent_id: b.parent_id,
                    centerline: b.centerline.iter().map(|p| [p.x, p.y, p.z]).collect(),
                    radii: b.radii.clone(),
                    landmark: [b.landmark.x, b.landmark.y, b.landmark.z],
                    name: b.name.clone(),
                })
                .collect(),
            root_id: self.root_id,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self, AirwayError> {
        let doc: TreeDoc = serde_json::from_str(s)?;
        let branches = doc
            .branches
            .into_iter()
            .map(|b| Branch {
                id: b.id,
                parent_id: b.parent_id,
                centerline: b
                    .centerline
                    .iter()
                    .map(|c| Point3::new(c[0], c[1], c[2]))
                    .collect(),
                radii: b.radii,
                landmark: Point3::new(b.landmark[0], b.landmark[1], b.landmark[2]),
                name: b.name,
            })
            .collect();
        Self::new(branches, doc.root_id)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), AirwayError> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, AirwayError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// On-disk tree document. Units are mm throughout.
#[derive(Serialize, Deserialize)]
struct TreeDoc {
    branches: Vec<BranchDoc>,
    root_id: BranchId,
}

#[derive(Serialize, Deserialize)]
struct BranchDoc {
    id: BranchId,
    parent_id: Option<BranchId>,
    centerline: Vec<[f64; 3]>,
    radii: Vec<f64>,
    landmark: [f64; 3],
    name: String,
}

fn build_accel(branch: &Branch) -> BranchAccel {
    let mut segments = Vec::with_capacity(branch.centerline.len() - 1);
    let mut arc = 0.0;
    for i in 0..branch.centerline.len() - 1 {
        let a = branch.centerline[i].coords;
        let b = branch.centerline[i + 1].coords;
        let len = (b - a).norm();
        let dir = (b - a) / len;
        let r0 = branch.radii[i];
        let r1 = branch.radii[i + 1];
        segments.push(Segment {
            a,
            dir,
            len,
            r0,
            slope: (r1 - r0) / len,
            arc0: arc,
        });
        arc += len;
    }
    BranchAccel {
        segments,
        aabb: Aabb::of_points(&branch.centerline),
        max_radius: branch.max_radius(),
        total_length: arc,
    }
}

/// Parameters of the procedural binary-tree generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeGenConfig {
    /// Number of generations; 1 yields a single branch.
    pub generations: usize,
    /// Root branch radius, mm.
    pub root_radius: f64,
    /// Child radius = parent radius times this ratio, in (0,1).
    pub radius_decay: f64,
    /// Mean branch length, mm.
    pub branch_length: f64,
    /// Relative length jitter in [0,1).
    pub length_jitter: f64,
    /// Mean half-angle between a child and its parent direction, radians.
    pub branching_angle: f64,
    /// Relative angle jitter in [0,1).
    pub angle_jitter: f64,
    /// Vertices per branch centerline, at least 2.
    pub vertices_per_branch: usize,
    /// Distal/proximal radius ratio within a branch, in (0,1]. Values below
    /// 1 make each branch narrow toward its end.
    pub taper: f64,
    /// Mean total in-plane bend of a branch over its length, radians.
    /// Straight tube interiors look self-similar along the axis; bends (and
    /// rings) are what make axial position observable in depth.
    pub bend_angle: f64,
    /// Relative amplitude of ring-like radius modulation along the wall,
    /// zeroed at branch ends.
    pub ring_amplitude: f64,
    pub seed: u64,
}

impl Default for TreeGenConfig {
    fn default() -> Self {
        Self {
            generations: 3,
            root_radius: 8.0,
            radius_decay: 0.7,
            branch_length: 40.0,
            length_jitter: 0.1,
            branching_angle: 0.6,
            angle_jitter: 0.1,
            vertices_per_branch: 12,
            taper: 0.75,
            bend_angle: 0.35,
            ring_amplitude: 0.06,
            seed: 0,
        }
    }
}

impl TreeGenConfig {
    fn validate(&self) -> Result<(), AirwayError> {
        if self.generations < 1 {
            return Err(AirwayError::InvalidConfig("generations must be >= 1".into()));
        }
        if !(self.root_radius > 0.0) {
            return Err(AirwayError::InvalidConfig("root_radius must be > 0".into()));
        }
        if !(self.radius_decay > 0.0 && self.radius_decay < 1.0) {
            return Err(AirwayError::InvalidConfig("radius_decay must be in (0,1)".into()));
        }
        if !(self.branch_length > 0.0) {
            return Err(AirwayError::InvalidConfig("branch_length must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.length_jitter) || !(0.0..1.0).contains(&self.angle_jitter) {
            return Err(AirwayError::InvalidConfig("jitter fractions must be in [0,1)".into()));
        }
        if !(self.branching_angle > 0.0 && self.branching_angle < std::f64::consts::FRAC_PI_2) {
            return Err(AirwayError::InvalidConfig(
                "branching_angle must be in (0, pi/2)".into(),
            ));
        }
        if self.vertices_per_branch < 2 {
            return Err(AirwayError::InvalidConfig("vertices_per_branch must be >= 2".into()));
        }
        if !(self.taper > 0.0 && self.taper <= 1.0) {
            return Err(AirwayError::InvalidConfig("taper must be in (0,1]".into()));
        }
        if !(0.0..=1.2).contains(&self.bend_angle) {
            return Err(AirwayError::InvalidConfig("bend_angle must be in [0, 1.2]".into()));
        }
        if !(0.0..=0.2).contains(&self.ring_amplitude) {
            return Err(AirwayError::InvalidConfig(
                "ring_amplitude must be in [0, 0.2]".into(),
            ));
        }
        Ok(())
    }
}

const GEN_MAX_ATTEMPTS: usize = 64;

/// Generates a binary airway tree. Deterministic for a fixed seed. Branches
/// are straight polylines; children attach to the parent's distal vertex with
/// radius scaled by `radius_decay`, and each branch's landmark is its distal
/// endpoint. Attempts are rejected until no two non-adjacent branches come
/// closer than the sum of their radii.
pub fn generate_tree(config: &TreeGenConfig) -> Result<AirwayTree, AirwayError> {
    config.validate()?;
    let mut first_bad_generation = 0;
    for attempt in 0..GEN_MAX_ATTEMPTS {
        let seed = config
            .seed
            .wrapping_add((attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match try_generate(config, &mut rng) {
            Ok(branches) => return AirwayTree::new(branches, 0),
            Err(generation) => first_bad_generation = first_bad_generation.max(generation),
        }
    }
    Err(AirwayError::GenerationCollision {
        generation: first_bad_generation,
        attempts: GEN_MAX_ATTEMPTS,
    })
}

struct ProtoBranch {
    branch: Branch,
    dir: Vector3<f64>,
    radius: f64,
    generation: usize,
}

struct BranchDraw {
    bend_total: f64,
    bend_azimuth: f64,
    ring_phase: f64,
    len: f64,
}

fn draw_branch(config: &TreeGenConfig, rng: &mut ChaCha8Rng) -> BranchDraw {
    BranchDraw {
        len: jittered(config.branch_length, config.length_jitter, rng),
        bend_total: jittered(config.bend_angle, config.angle_jitter, rng),
        bend_azimuth: rng.gen_range(0.0..std::f64::consts::TAU),
        ring_phase: rng.gen_range(0.0..std::f64::consts::TAU),
    }
}

/// One generation attempt; returns the generation index that collided.
fn try_generate(config: &TreeGenConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Branch>, usize> {
    let mut protos: Vec<ProtoBranch> = Vec::new();
    let root_draw = draw_branch(config, rng);
    protos.push(make_proto(
        config,
        0,
        None,
        Point3::origin(),
        Vector3::z(),
        config.root_radius,
        &root_draw,
        "root".to_string(),
        1,
    ));

    for generation in 2..=config.generations {
        let parents: Vec<usize> = protos
            .iter()
            .enumerate()
            .filter(|(_, p)| p.generation == generation - 1)
            .map(|(i, _)| i)
            .collect();
        for pi in parents {
            let (start, pdir, pradius, pname, pid) = {
                let p = &protos[pi];
                (
                    p.branch.distal(),
                    p.dir,
                    p.radius,
                    p.branch.name.clone(),
                    p.branch.id,
                )
            };
            // Bifurcation plane: a perpendicular of the parent's distal
            // direction at a random azimuth; both children bend within it.
            let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
            let perp = perpendicular_of(&pdir);
            let plane_axis = UnitQuaternion::from_axis_angle(
                &nalgebra::Unit::new_normalize(pdir),
                azimuth,
            ) * perp;
            let radius = pradius * config.radius_decay;
            for (side, sign) in [("L", 1.0), ("R", -1.0)] {
                let angle = sign * jittered(config.branching_angle, config.angle_jitter, rng);
                let dir = UnitQuaternion::from_axis_angle(
                    &nalgebra::Unit::new_normalize(plane_axis),
                    angle,
                ) * pdir;
                let draw = draw_branch(config, rng);
                let name = if pname == "root" {
                    side.to_string()
                } else {
                    format!("{pname}{side}")
                };
                let id = protos.len();
                let proto = make_proto(
                    config,
                    id,
                    Some(pid),
                    start,
                    dir,
                    radius,
                    &draw,
                    name,
                    generation,
                );
                if collides(&proto, &protos) {
                    return Err(generation);
                }
                protos.push(proto);
            }
        }
    }
    Ok(protos.into_iter().map(|p| p.branch).collect())
}

/// Builds one branch: a gently bent centerline (constant in-plane curvature)
/// with tapered, ring-modulated radii. The modulation window vanishes at both
/// ends so junction radii stay exact.
#[allow(clippy::too_many_arguments)]
fn make_proto(
    config: &TreeGenConfig,
    id: BranchId,
    parent_id: Option<BranchId>,
    start: Point3<f64>,
    dir: Vector3<f64>,
    radius: f64,
    draw: &BranchDraw,
    name: String,
    generation: usize,
) -> ProtoBranch {
    let vertices = config.vertices_per_branch;
    let mut d = dir.normalize();
    let bend_axis = UnitQuaternion::from_axis_angle(
        &nalgebra::Unit::new_normalize(d),
        draw.bend_azimuth,
    ) * perpendicular_of(&d);
    let step_rot = UnitQuaternion::from_axis_angle(
        &nalgebra::Unit::new_normalize(bend_axis),
        draw.bend_total / (vertices - 1) as f64,
    );
    let step_len = draw.len / (vertices - 1) as f64;
    let mut centerline = Vec::with_capacity(vertices);
    let mut p = start;
    centerline.push(p);
    for _ in 1..vertices {
        p += d * step_len;
        centerline.push(p);
        d = step_rot * d;
    }
    let ring_period = draw.len / 5.5;
    let radii: Vec<f64> = (0..vertices)
        .map(|k| {
            let f = k as f64 / (vertices - 1) as f64;
            let base = radius * (1.0 + (config.taper - 1.0) * f);
            let window = (std::f64::consts::PI * f).sin().powi(2);
            let arc = f * draw.len;
            let ring = (std::f64::consts::TAU * arc / ring_period + draw.ring_phase).sin();
            base * (1.0 + config.ring_amplitude * window * ring)
        })
        .collect();
    let landmark = *centerline.last().unwrap();
    ProtoBranch {
        branch: Branch {
            id,
            parent_id,
            centerline,
            radii,
            landmark,
            name,
        },
        dir: d,
        radius,
        generation,
    }
}

fn jittered(mean: f64, jitter: f64, rng: &mut ChaCha8Rng) -> f64 {
    mean * (1.0 + jitter * rng.gen_range(-1.0..1.0))
}

fn perpendicular_of(d: &Vector3<f64>) -> Vector3<f64> {
    let candidate = if d.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    d.cross(&candidate).normalize()
}

/// New branch intersects an existing one iff they share no vertex and their
/// centerlines come closer than the sum of the branch radii.
fn collides(candidate: &ProtoBranch, placed: &[ProtoBranch]) -> bool {
    for other in placed {
        if shares_vertex(&candidate.branch, &other.branch) {
            continue;
        }
        let min_allowed = candidate.radius + other.radius;
        if polyline_distance(&candidate.branch.centerline, &other.branch.centerline)
            <= min_allowed
        {
            return true;
        }
    }
    false
}

fn shares_vertex(a: &Branch, b: &Branch) -> bool {
    a.centerline.iter().any(|va| {
        b.centerline
            .iter()
            .any(|vb| (va - vb).norm() <= ATTACHMENT_TOL)
    })
}

fn polyline_distance(a: &[Point3<f64>], b: &[Point3<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for sa in a.windows(2) {
        for sb in b.windows(2) {
            best = best.min(segment_segment_distance(sa[0], sa[1], sb[0], sb[1]));
        }
    }
    best
}

/// Closest distance between two 3D segments (Ericson, Real-Time Collision
/// Detection, 5.1.9).
fn segment_segment_distance(
    p1: Point3<f64>,
    q1: Point3<f64>,
    p2: Point3<f64>,
    q2: Point3<f64>,
) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let (s, t);
    if a <= f64::EPSILON && e <= f64::EPSILON {
        return r.norm();
    }
    if a <= f64::EPSILON {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= f64::EPSILON {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s_ = if denom != 0.0 {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t_ = (b * s_ + f) / e;
            if t_ < 0.0 {
                t_ = 0.0;
                s_ = (-c / a).clamp(0.0, 1.0);
            } else if t_ > 1.0 {
                t_ = 1.0;
                s_ = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s_;
            t = t_;
        }
    }
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn straight_branch_tree() -> AirwayTree {
        let b = Branch {
            id: 0,
            parent_id: None,
            centerline: vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.0, 0.0, 30.0)],
            radii: vec![4.0, 4.0],
            landmark: Point3::new(0.0, 0.0, 30.0),
            name: "root".into(),
        };
        AirwayTree::new(vec![b], 0).unwrap()
    }

    #[test]
    fn single_generation_is_one_branch() {
        let tree = generate_tree(&TreeGenConfig {
            generations: 1,
            ..TreeGenConfig::default()
        })
        .unwrap();
        assert_eq!(tree.len(), 1);
        assert_eq!(tree.n_landmarks(), 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let config = TreeGenConfig {
            generations: 3,
            seed: 17,
            ..TreeGenConfig::default()
        };
        let a = generate_tree(&config).unwrap().to_json_string().unwrap();
        let b = generate_tree(&config).unwrap().to_json_string().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn four_generations_radius_rule() {
        let config = TreeGenConfig {
            generations: 4,
            root_radius: 8.0,
            radius_decay: 0.7,
            seed: 3,
            ..TreeGenConfig::default()
        };
        let tree = generate_tree(&config).unwrap();
        assert_eq!(tree.len(), 15);
        for b in tree.branches() {
            if let Some(p) = b.parent_id {
                let parent_r = tree.branches()[p].radii[0];
                assert_relative_eq!(b.radii[0], 0.7 * parent_r, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn nearest_perpendicular_foot() {
        let tree = straight_branch_tree();
        let q = tree
            .nearest_on_branch(0, &Point3::new(3.0, 0.0, 10.0))
            .unwrap();
        assert_relative_eq!(q.distance, 3.0, epsilon = 1e-12);
        assert_relative_eq!(q.arc_length, 10.0, epsilon = 1e-12);
        assert_relative_eq!(q.tangent, Vector3::z(), epsilon = 1e-12);
        assert_relative_eq!(q.radius, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn nearest_on_vertex_is_zero() {
        let tree = straight_branch_tree();
        let q = tree
            .nearest_on_branch(0, &Point3::new(0.0, 0.0, 30.0))
            .unwrap();
        assert_relative_eq!(q.distance, 0.0, epsilon = 1e-12);
        assert_relative_eq!(q.tangent, Vector3::z(), epsilon = 1e-12);
    }

    #[test]
    fn midpoint_straight() {
        let tree = straight_branch_tree();
        let (p, t) = tree.branch_midpoint(0).unwrap();
        assert_relative_eq!(p, Point3::new(0.0, 0.0, 15.0), epsilon = 1e-12);
        assert_relative_eq!(t, Vector3::z(), epsilon = 1e-12);
    }

    #[test]
    fn midpoint_joint_tie_takes_distal_segment() {
        let b = Branch {
            id: 0,
            parent_id: None,
            centerline: vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(0.0, 0.0, 10.0),
                Point3::new(0.0, 10.0, 10.0),
            ],
            radii: vec![3.0, 3.0, 3.0],
            landmark: Point3::new(0.0, 10.0, 10.0),
            name: "bent".into(),
        };
        let tree = AirwayTree::new(vec![b], 0).unwrap();
        let (p, t) = tree.branch_midpoint(0).unwrap();
        assert_relative_eq!(p, Point3::new(0.0, 0.0, 10.0), epsilon = 1e-12);
        assert_relative_eq!(t, Vector3::y(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = TreeGenConfig {
            generations: 0,
            ..TreeGenConfig::default()
        };
        assert!(matches!(generate_tree(&bad), Err(AirwayError::InvalidConfig(_))));
        let bad = TreeGenConfig {
            radius_decay: 1.5,
            ..TreeGenConfig::default()
        };
        assert!(matches!(generate_tree(&bad), Err(AirwayError::InvalidConfig(_))));
    }

    #[test]
    fn collision_error_reports_generation() {
        // A wide, long, barely-diverging tree cannot avoid self-intersection.
        let config = TreeGenConfig {
            generations: 5,
            root_radius: 30.0,
            radius_decay: 0.95,
            branch_length: 10.0,
            branching_angle: 0.05,
            angle_jitter: 0.0,
            length_jitter: 0.0,
            ..TreeGenConfig::default()
        };
        match generate_tree(&config) {
            Err(AirwayError::GenerationCollision { generation, .. }) => {
                assert!(generation >= 2);
            }
            other => panic!("expected collision, got {other:?}"),
        }
    }

    #[test]
    fn json_round_trip() {
        let tree = generate_tree(&TreeGenConfig::default()).unwrap();
        let s = tree.to_json_string().unwrap();
        let loaded = AirwayTree::from_json_str(&s).unwrap();
        assert_eq!(loaded.to_json_string().unwrap(), s);
    }

    #[test]
    fn rejects_dangling_parent_and_cycles() {
        let mk = |id, parent_id, z0: f64| Branch {
            id,
            parent_id,
            centerline: vec![Point3::new(0.0, 0.0, z0), Point3::new(0.0, 0.0, z0 + 10.0)],
            radii: vec![2.0, 2.0],
            landmark: Point3::new(0.0, 0.0, z0 + 10.0),
            name: format!("b{id}"),
        };
        let bad = vec![mk(0, None, 0.0), mk(1, Some(5), 10.0)];
        assert!(AirwayTree::new(bad, 0).is_err());
    }
}

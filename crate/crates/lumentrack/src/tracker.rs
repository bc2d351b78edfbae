//! Per-frame tracking: landmark voting for branch-level location, pose
//! optimization seeded from the previous estimate, failure detection by
//! thresholding the optimized cost, and automatic re-initialization from the
//! voted branch midpoint once views recover.

use crate::airway::{AirwayTree, BranchId};
use crate::cost::{CostBreakdown, CostContext, CostWeights};
use crate::metrics::{RuntimeBreakdown, TrajectoryRecord};
use crate::optim::{optimize_pose, PowellOptions};
use crate::perception::{FrameObservation, FrameProvider, LandmarkObservation};
use crate::pose::Pose;
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Failure threshold on the optimized total cost (strict inequality).
    pub tau: f64,
    pub weights: CostWeights,
    pub powell: PowellOptions,
    /// Frames of vote history considered for the branch majority.
    pub vote_window: usize,
    /// Consecutive confident same-branch votes required before re-init.
    pub reinit_confirm: usize,
    /// Visibility score at or above which a landmark casts votes.
    pub visibility_min: f64,
    /// Vote weight a visible landmark gives its own branch.
    pub vote_own_weight: f64,
    /// Vote weight a visible landmark gives its branch's parent.
    pub vote_parent_weight: f64,
    /// Ablation switch: when false, LOST mode never re-initializes.
    pub reinit_enabled: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            weights: CostWeights::default(),
            powell: tracking_powell_options(),
            vote_window: 5,
            reinit_confirm: 3,
            visibility_min: 0.5,
            vote_own_weight: 1.0,
            vote_parent_weight: 0.5,
            reinit_enabled: true,
        }
    }
}

/// Per-frame optimization budget: warm starts sit within a millimeter of the
/// minimum, so a few sweeps with coarser line tolerances suffice and keep the
/// per-frame cost bounded.
pub fn tracking_powell_options() -> PowellOptions {
    PowellOptions {
        x_tol: vec![0.02, 0.02, 0.02, 0.005, 0.005, 0.005],
        f_tol: 2e-4,
        max_iters: 3,
        max_fevals: 500,
        bracket_step: 0.3,
        bracket_expansions: 5,
        ..PowellOptions::default()
    }
}

/// Default failure threshold: the 99.5th percentile of converged clean-frame
/// total costs over a 20-sequence calibration run with default weights and
/// noise (see `tau_calibration` in the test suite).
pub const DEFAULT_TAU: f64 = 0.5;

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0) {
            return Err("tau must be positive".into());
        }
        if self.vote_window < 1 || self.reinit_confirm < 1 {
            return Err("vote_window and reinit_confirm must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.visibility_min) {
            return Err("visibility_min must be in [0,1]".into());
        }
        self.weights.validate()?;
        self.powell.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackerMode {
    Tracking,
    Lost,
}

/// Ring of recent per-frame branch votes; `None` entries are abstentions.
#[derive(Debug, Clone, Default)]
pub struct VoteHistory {
    votes: VecDeque<Option<BranchId>>,
    capacity: usize,
}

impl VoteHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            votes: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    fn push(&mut self, vote: Option<BranchId>) {
        if self.votes.len() == self.capacity {
            self.votes.pop_front();
        }
        self.votes.push_back(vote);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoteResult {
    /// Majority branch over the vote window, if any frame voted.
    pub branch: Option<BranchId>,
    pub confident: bool,
}

/// Casts this frame's landmark votes and returns the windowed majority.
///
/// Each landmark at or above the visibility threshold votes for its own
/// branch (weight 1 by default) and for that branch's parent (weight 0.5);
/// the root votes for itself in place of a parent. The frame vote is the
/// argmax with ties broken by smaller tree depth, then smaller id; frames
/// with no visible landmark abstain. The result is the majority over the
/// last `vote_window` frame votes, confident iff it holds at least
/// ceil(window/2) of them and this frame saw at least one landmark.
pub fn vote_branch(
    obs: &[LandmarkObservation],
    tree: &AirwayTree,
    history: &mut VoteHistory,
    cfg: &TrackerConfig,
) -> VoteResult {
    let n = tree.len();
    let mut scores = vec![0.0f64; n];
    let mut any_visible = false;
    for row in obs {
        if row.visibility < cfg.visibility_min {
            continue;
        }
        let Some(branch) = tree.branches().get(row.landmark_id) else {
            continue;
        };
        any_visible = true;
        scores[branch.id] += cfg.vote_own_weight;
        let parent = branch.parent_id.unwrap_or(branch.id);
        scores[parent] += cfg.vote_parent_weight;
    }
    let frame_vote = if any_visible {
        Some(argmax_branch(&scores, tree))
    } else {
        None
    };
    history.push(frame_vote);

    let mut counts = vec![0usize; n];
    for v in history.votes.iter().flatten() {
        counts[*v] += 1;
    }
    let top = counts.iter().max().copied().unwrap_or(0);
    if top == 0 {
        return VoteResult {
            branch: None,
            confident: false,
        };
    }
    let majority = argmax_branch(
        &counts.iter().map(|c| *c as f64).collect::<Vec<_>>(),
        tree,
    );
    let needed = cfg.vote_window.div_ceil(2);
    VoteResult {
        branch: Some(majority),
        confident: counts[majority] >= needed && any_visible,
    }
}

fn argmax_branch(scores: &[f64], tree: &AirwayTree) -> BranchId {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (id, &s) in scores.iter().enumerate() {
        if s > best_score {
            best = id;
            best_score = s;
        } else if s == best_score {
            let better = (tree.depth(id), id) < (tree.depth(best), best);
            if better {
                best = id;
            }
        }
    }
    best
}

/// True when the optimized cost exceeds tau (strictly), or when neither the
/// depth nor the landmark term carried any information.
pub fn detect_failure(b: &CostBreakdown, cfg: &TrackerConfig) -> bool {
    b.total > cfg.tau || (!b.depth_valid && !b.landmark_valid)
}

/// Deterministic seed pose at a branch midpoint: the camera looks along the
/// local distal tangent; roll is fixed by aligning camera +y with the
/// projection of world -z onto the image plane (world +x when the tangent is
/// parallel to world z).
pub fn reinitialize(tree: &AirwayTree, branch_id: BranchId) -> Pose {
    let (position, tangent) = tree
        .branch_midpoint(branch_id)
        .expect("valid branch id");
    let z_cam = tangent;
    let world_z = Vector3::z();
    let reference = if z_cam.cross(&world_z).norm() < 1e-6 {
        Vector3::x()
    } else {
        -world_z
    };
    let y_cam = (reference - z_cam * reference.dot(&z_cam)).normalize();
    let x_cam = y_cam.cross(&z_cam);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x_cam, y_cam, z_cam]));
    Pose {
        position,
        orientation: UnitQuaternion::from_rotation_matrix(&rot),
    }
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    pub last_pose: Pose,
    pub current_branch: BranchId,
    pub mode: TrackerMode,
    pub vote_history: VoteHistory,
    /// Consecutive confident votes, all for `confident_branch`.
    pub confident_streak: usize,
    pub confident_branch: Option<BranchId>,
    pub lost_streak: usize,
}

impl TrackerState {
    pub fn new(init_pose: Pose, root: BranchId, cfg: &TrackerConfig) -> Self {
        Self {
            last_pose: init_pose,
            current_branch: root,
            mode: TrackerMode::Tracking,
            vote_history: VoteHistory::new(cfg.vote_window),
            confident_streak: 0,
            confident_branch: None,
            lost_streak: 0,
        }
    }
}

/// Branch nearest to the pose among the current branch, its parent and its
/// children (tracking only moves across one junction per frame).
fn nearest_neighbor_branch(tree: &AirwayTree, current: BranchId, pose: &Pose) -> BranchId {
    let mut best = current;
    let mut best_d = tree
        .nearest_on_branch(current, &pose.position)
        .expect("valid branch")
        .distance;
    let mut consider = |id: BranchId, best: &mut BranchId, best_d: &mut f64| {
        let d = tree
            .nearest_on_branch(id, &pose.position)
            .expect("valid branch")
            .distance;
        if d < *best_d {
            *best_d = d;
            *best = id;
        }
    };
    if let Some(p) = tree.parent(current) {
        consider(p, &mut best, &mut best_d);
    }
    for &c in tree.children(current) {
        consider(c, &mut best, &mut best_d);
    }
    best
}

/// Breakdown attached to frames where optimization was skipped (LOST without
/// a re-init attempt): worst-case depth, no landmark information.
fn no_information_breakdown(ctx: &CostContext, obs: &FrameObservation) -> CostBreakdown {
    let visible = obs.landmarks.iter().filter(|l| l.visibility >= 0.5).count();
    let l_depth = crate::cost::DEPTH_COST_INVALID;
    CostBreakdown {
        l_depth,
        l_landmark: 0.0,
        l_centerline: 0.0,
        depth_valid: false,
        landmark_valid: false,
        total: ctx.weights.alpha_depth * l_depth,
        visible_count: visible,
    }
}

/// Advances the tracker by one frame and emits its trajectory record
/// (ground-truth fields unset; the harness joins those later).
pub fn track_step(
    state: &mut TrackerState,
    frame: &FrameObservation,
    ctx: &CostContext,
    cfg: &TrackerConfig,
) -> TrajectoryRecord {
    let vote = vote_branch(&frame.landmarks, ctx.tree, &mut state.vote_history, cfg);

    if vote.confident {
        let b = vote.branch.expect("confident vote carries a branch");
        if state.confident_branch == Some(b) {
            state.confident_streak += 1;
        } else {
            state.confident_branch = Some(b);
            state.confident_streak = 1;
        }
    } else {
        state.confident_branch = None;
        state.confident_streak = 0;
    }

    let mut reinit_event = false;
    let (est_pose, cost, lost) = match state.mode {
        TrackerMode::Tracking => {
            let (pose, breakdown, _) = optimize_pose(
                ctx,
                frame,
                state.current_branch,
                &state.last_pose,
                &cfg.powell,
            );
            if detect_failure(&breakdown, cfg) {
                state.mode = TrackerMode::Lost;
                state.lost_streak = 1;
                (state.last_pose, breakdown, true)
            } else {
                state.last_pose = pose;
                // Landmark votes get distorted around junctions (sibling
                // subtrees stay visible across the carina), so while tracking
                // the branch follows the pose geometrically; votes drive
                // re-initialization when the pose is unreliable.
                state.current_branch = nearest_neighbor_branch(ctx.tree, state.current_branch, &pose);
                (pose, breakdown, false)
            }
        }
        TrackerMode::Lost => {
            state.lost_streak += 1;
            let ready = cfg.reinit_enabled
                && state.confident_streak >= cfg.reinit_confirm
                && state.confident_branch.is_some();
            if ready {
                let b = state.confident_branch.unwrap();
                let seed = reinitialize(ctx.tree, b);
                let (pose, breakdown, _) = optimize_pose(ctx, frame, b, &seed, &cfg.powell);
                if detect_failure(&breakdown, cfg) {
                    (state.last_pose, breakdown, true)
                } else {
                    state.mode = TrackerMode::Tracking;
                    state.current_branch = b;
                    state.last_pose = pose;
                    state.lost_streak = 0;
                    reinit_event = true;
                    (pose, breakdown, false)
                }
            } else {
                (
                    state.last_pose,
                    no_information_breakdown(ctx, frame),
                    true,
                )
            }
        }
    };

    TrajectoryRecord {
        t: frame.t,
        est_pose,
        gt_pose: None,
        labeled: false,
        lost,
        reinit_event,
        cost,
        branch_est: state.current_branch,
        branch_gt: None,
    }
}

/// Runs the tracker over frames 0..n_frames from a single initialization.
/// Provider failures are treated as fully degraded (no-signal) frames.
/// Returns the per-frame records and mean per-phase runtimes.
pub fn run_sequence(
    ctx: &CostContext,
    cfg: &TrackerConfig,
    provider: &mut dyn FrameProvider,
    init_pose: Pose,
    n_frames: usize,
) -> (Vec<TrajectoryRecord>, RuntimeBreakdown) {
    let mut state = TrackerState::new(init_pose, ctx.tree.root_id(), cfg);
    let mut records = Vec::with_capacity(n_frames);
    let mut sums = RuntimeBreakdown {
        depth: 0.0,
        landmark: 0.0,
        optimize: 0.0,
        total: 0.0,
    };
    let (dw, dh) = provider.depth_dims();
    for t in 0..n_frames {
        let frame_start = std::time::Instant::now();
        let (obs, perception) = match provider.provide_frame(t) {
            Ok(obs) => (obs, provider.last_timings()),
            Err(_) => (
                FrameObservation::no_signal(t, dw, dh, ctx.tree.n_landmarks()),
                Default::default(),
            ),
        };
        let opt_start = std::time::Instant::now();
        let record = track_step(&mut state, &obs, ctx, cfg);
        sums.optimize += opt_start.elapsed().as_secs_f64() * 1e3;
        sums.depth += perception.depth_ms;
        sums.landmark += perception.landmark_ms;
        sums.total += frame_start.elapsed().as_secs_f64() * 1e3;
        records.push(record);
    }
    let n = n_frames.max(1) as f64;
    (
        records,
        RuntimeBreakdown {
            depth: sums.depth / n,
            landmark: sums.landmark / n,
            optimize: sums.optimize / n,
            total: sums.total / n,
        },
    )
}

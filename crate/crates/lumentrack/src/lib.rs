//! Endoluminal camera localization in airway trees.
//!
//! The tracker estimates a 6-DOF camera pose per frame by minimizing a
//! three-term visual alignment cost — depth-map correlation, landmark
//! reprojection and a centerline prior — with Powell's derivative-free
//! method, detects tracking failures by thresholding the optimized cost, and
//! re-initializes from landmark votes once views recover. A simulation
//! harness with exact ground truth, trajectory metrics and a scenario runner
//! round out the crate.

pub mod airway;
pub mod camera;
pub mod cost;
pub mod depth_io;
pub mod metrics;
pub mod optim;
pub mod perception;
pub mod pose;
pub mod scenario;
pub mod tracker;

pub use airway::{generate_tree, AirwayTree, Branch, BranchId, TreeGenConfig};
pub use camera::{
    landmark_visibility, lumen_sdf, project, render_depth, DepthMap, DepthMode, Intrinsics,
    RenderOptions,
};
pub use cost::{
    centerline_cost, depth_cost, landmark_cost, ncc, total_cost, CenterlineForm, CostBreakdown,
    CostContext, CostWeights,
};
pub use metrics::{ate, success_rate, summarize, MetricsSummary, TrajectoryRecord};
pub use optim::{
    bracket_minimum, brent_min, optimize_pose, powell_minimize, OptResult, PoseChart,
    PowellOptions, StopReason,
};
pub use perception::{
    simulate_frame, DegradationSchedule, FrameObservation, FrameProvider, LandmarkObservation,
    NoiseModel, ProviderError, RecordedProvider, SimulatedProvider,
};
pub use pose::Pose;
pub use scenario::{run_scenario, ScenarioConfig, ScenarioError, ScenarioRun};
pub use tracker::{
    detect_failure, reinitialize, run_sequence, track_step, vote_branch, TrackerConfig,
    TrackerMode, TrackerState, VoteHistory,
};

//! The observation contract the tracker consumes, plus simulated providers.
//!
//! A frame observation is a relative-scale depth map and one
//! (visibility, x, y) row per tree landmark. The simulated provider renders
//! ground-truth views, applies a configurable noise model, and can replace
//! whole frames with signal-free degraded content on a schedule. Recorded
//! observation streams round-trip through a JSON-lines file with one PFM
//! depth image per frame.

use crate::airway::AirwayTree;
use crate::camera::{
    landmark_visibility, line_of_sight, render_depth, CameraError, DepthMap, Intrinsics,
    RenderOptions,
};
use crate::depth_io;
use crate::pose::Pose;
use nalgebra::Point3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("frame {0} unavailable")]
    FrameUnavailable(usize),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("observation io: {0}")]
    Io(#[from] std::io::Error),
    #[error("observation record: {0}")]
    Record(String),
}

/// One detected landmark row: visibility score in [0,1] and image
/// coordinates in pixels (meaningful when visibility > 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkObservation {
    #[serde(rename = "id")]
    pub landmark_id: usize,
    #[serde(rename = "v")]
    pub visibility: f64,
    pub x: f64,
    pub y: f64,
}

/// Per-frame perception output: depth map plus one landmark row per tree
/// landmark. `degraded_truth` is simulator bookkeeping only.
#[derive(Debug, Clone)]
pub struct FrameObservation {
    pub t: usize,
    pub depth: DepthMap,
    pub landmarks: Vec<LandmarkObservation>,
    degraded_truth: bool,
}

impl FrameObservation {
    pub fn new(t: usize, depth: DepthMap, landmarks: Vec<LandmarkObservation>) -> Self {
        Self {
            t,
            depth,
            landmarks,
            degraded_truth: false,
        }
    }

    pub(crate) fn new_degraded(
        t: usize,
        depth: DepthMap,
        landmarks: Vec<LandmarkObservation>,
    ) -> Self {
        Self {
            t,
            depth,
            landmarks,
            degraded_truth: true,
        }
    }

    /// Whether the simulator marked this frame as degraded. Harness and
    /// evaluation bookkeeping only; the tracker never consults this.
    pub fn degraded_truth(&self) -> bool {
        self.degraded_truth
    }

    /// A placeholder observation carrying no signal: all-invalid depth and
    /// zero visibility everywhere.
    pub fn no_signal(t: usize, width: usize, height: usize, n_landmarks: usize) -> Self {
        Self {
            t,
            depth: DepthMap::new_invalid(width, height),
            landmarks: (0..n_landmarks)
                .map(|id| LandmarkObservation {
                    landmark_id: id,
                    visibility: 0.0,
                    x: 0.0,
                    y: 0.0,
                })
                .collect(),
            degraded_truth: true,
        }
    }
}

/// Perception noise parameters. Depth maps get a per-frame positive affine
/// remap (relative-scale output) plus per-pixel multiplicative log-normal
/// noise; landmarks get pixel Gaussian noise and Bernoulli visibility flips.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Per-frame depth scale a, drawn uniformly from [min, max]; min > 0.
    pub depth_scale_range: [f64; 2],
    /// Per-frame depth shift b, drawn uniformly from [min, max].
    pub depth_shift_range: [f64; 2],
    /// Sigma of multiplicative log-normal per-pixel depth noise.
    pub depth_noise_sigma: f64,
    /// Standard deviation of landmark pixel noise.
    pub landmark_px_sigma: f64,
    /// Probability of toggling a landmark's visibility.
    pub visibility_flip_prob: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            depth_scale_range: [0.5, 2.0],
            depth_shift_range: [0.0, 20.0],
            depth_noise_sigma: 0.05,
            landmark_px_sigma: 2.0,
            visibility_flip_prob: 0.05,
            seed: 0,
        }
    }
}

impl NoiseModel {
    /// Noise-free model: identity-range affine, zero sigmas, no flips.
    pub fn zero() -> Self {
        Self {
            depth_scale_range: [1.0, 1.0],
            depth_shift_range: [0.0, 0.0],
            depth_noise_sigma: 0.0,
            landmark_px_sigma: 0.0,
            visibility_flip_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.depth_scale_range[0] > 0.0)
            || self.depth_scale_range[1] < self.depth_scale_range[0]
        {
            return Err("depth_scale_range must satisfy 0 < min <= max".into());
        }
        if self.depth_shift_range[1] < self.depth_shift_range[0] {
            return Err("depth_shift_range must satisfy min <= max".into());
        }
        if !(0.0..=1.0).contains(&self.visibility_flip_prob) {
            return Err("visibility_flip_prob must be in [0,1]".into());
        }
        if self.depth_noise_sigma < 0.0 || self.landmark_px_sigma < 0.0 {
            return Err("noise sigmas must be nonnegative".into());
        }
        Ok(())
    }
}

/// Frame intervals (inclusive) during which perception carries no signal.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DegradationSchedule {
    pub windows: Vec<(usize, usize)>,
}

impl DegradationSchedule {
    pub fn none() -> Self {
        Self { windows: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut prev_end: Option<usize> = None;
        for &(a, b) in &self.windows {
            if a > b {
                return Err(format!("window ({a},{b}) has t_start > t_end"));
            }
            if let Some(e) = prev_end {
                if a <= e {
                    return Err("windows must be disjoint and ordered".into());
                }
            }
            prev_end = Some(b);
        }
        Ok(())
    }

    pub fn is_degraded(&self, t: usize) -> bool {
        self.windows.iter().any(|&(a, b)| t >= a && t <= b)
    }
}

/// How the simulator places 2D landmark labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkLabeling {
    /// Project the branch's fixed 3D landmark point (its distal endpoint).
    #[default]
    StaticDistal,
    /// Label at the most distal centerline point visible in the image.
    DynamicFurthestVisible,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseTimings {
    pub depth_ms: f64,
    pub landmark_ms: f64,
}

/// Stream-derived RNG: independent of call history for a given (seed, t).
fn frame_rng(seed: u64, t: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_add((t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    )
}

/// Simulates one frame of perception at the ground-truth pose. Deterministic
/// for fixed (noise.seed, t). Depth is rendered at `perceived_intr`, remapped
/// by a random positive affine and per-pixel log-normal noise; landmark rows
/// come from ground-truth visibility with pixel noise and visibility flips.
/// Degraded frames instead carry smoothed random depth and mostly-invisible
/// landmarks with uniform coordinates.
#[allow(clippy::too_many_arguments)]
pub fn simulate_frame(
    tree: &AirwayTree,
    gt_pose: &Pose,
    full_intr: &Intrinsics,
    perceived_intr: &Intrinsics,
    render_opts: &RenderOptions,
    noise: &NoiseModel,
    degraded: bool,
    t: usize,
) -> Result<FrameObservation, CameraError> {
    let (obs, _) = simulate_frame_timed(
        tree,
        gt_pose,
        full_intr,
        perceived_intr,
        render_opts,
        noise,
        degraded,
        t,
        LandmarkLabeling::StaticDistal,
    )?;
    Ok(obs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn simulate_frame_timed(
    tree: &AirwayTree,
    gt_pose: &Pose,
    full_intr: &Intrinsics,
    perceived_intr: &Intrinsics,
    render_opts: &RenderOptions,
    noise: &NoiseModel,
    degraded: bool,
    t: usize,
    labeling: LandmarkLabeling,
) -> Result<(FrameObservation, PhaseTimings), CameraError> {
    let mut rng = frame_rng(noise.seed, t);
    let depth_start = std::time::Instant::now();
    let rendered = render_depth(tree, gt_pose, perceived_intr, render_opts)?;

    let depth = if degraded {
        degraded_depth(&rendered, &mut rng)
    } else {
        let a = uniform_in(noise.depth_scale_range, &mut rng);
        let b = uniform_in(noise.depth_shift_range, &mut rng);
        let mut out = rendered.affine(a, b);
        if noise.depth_noise_sigma > 0.0 {
            let mut noisy = DepthMap::new_invalid(out.width, out.height);
            for y in 0..out.height {
                for x in 0..out.width {
                    if let Some(v) = out.get(x, y) {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        noisy.set(x, y, v * (noise.depth_noise_sigma * n).exp());
                    }
                }
            }
            out = noisy;
        }
        out
    };
    let depth_ms = depth_start.elapsed().as_secs_f64() * 1e3;

    let landmark_start = std::time::Instant::now();
    let n = tree.n_landmarks();
    let mut landmarks = Vec::with_capacity(n);
    if degraded {
        for id in 0..n {
            if rng.gen::<f64>() < 0.9 {
                landmarks.push(LandmarkObservation {
                    landmark_id: id,
                    visibility: 0.0,
                    x: 0.0,
                    y: 0.0,
                });
            } else {
                landmarks.push(LandmarkObservation {
                    landmark_id: id,
                    visibility: 1.0,
                    x: rng.gen_range(0.0..full_intr.width as f64),
                    y: rng.gen_range(0.0..full_intr.height as f64),
                });
            }
        }
    } else {
        for id in 0..n {
            let (vis, x, y) = match labeling {
                LandmarkLabeling::StaticDistal => {
                    landmark_visibility(tree, gt_pose, full_intr, &tree.branches()[id].landmark)
                }
                LandmarkLabeling::DynamicFurthestVisible => {
                    dynamic_landmark_label(tree, gt_pose, full_intr, id)
                }
            };
            let flipped =
                noise.visibility_flip_prob > 0.0 && rng.gen::<f64>() < noise.visibility_flip_prob;
            let v = match (vis, flipped) {
                (true, false) => 1.0,
                (true, true) => 0.0,
                (false, false) => 0.0,
                // Hallucinated detection: moderate confidence, placed in the
                // central image region where the lumen opening sits.
                (false, true) => 0.6,
            };
            let (ox, oy) = if v > 0.0 {
                if vis {
                    let nx: f64 = StandardNormal.sample(&mut rng);
                    let ny: f64 = StandardNormal.sample(&mut rng);
                    (
                        x + noise.landmark_px_sigma * nx,
                        y + noise.landmark_px_sigma * ny,
                    )
                } else {
                    let w = full_intr.width as f64;
                    let h = full_intr.height as f64;
                    (
                        rng.gen_range(0.25 * w..0.75 * w),
                        rng.gen_range(0.25 * h..0.75 * h),
                    )
                }
            } else {
                (0.0, 0.0)
            };
            landmarks.push(LandmarkObservation {
                landmark_id: id,
                visibility: v,
                x: ox,
                y: oy,
            });
        }
    }
    let landmark_ms = landmark_start.elapsed().as_secs_f64() * 1e3;

    let obs = if degraded {
        FrameObservation::new_degraded(t, depth, landmarks)
    } else {
        FrameObservation::new(t, depth, landmarks)
    };
    Ok((
        obs,
        PhaseTimings {
            depth_ms,
            landmark_ms,
        },
    ))
}

fn uniform_in(range: [f64; 2], rng: &mut ChaCha8Rng) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

/// Signal-free depth: uniform values over the rendered range, box-smoothed.
/// The blur radius scales with resolution so the correlation length stays a
/// fixed fraction of the image.
fn degraded_depth(rendered: &DepthMap, rng: &mut ChaCha8Rng) -> DepthMap {
    let (w, h) = (rendered.width, rendered.height);
    let (lo, hi) = rendered.valid_range().unwrap_or((1.0, 100.0));
    let mut values = vec![0.0f64; w * h];
    for v in values.iter_mut() {
        *v = rng.gen_range(lo..hi.max(lo + 1e-9));
    }
    let radius = (w.min(h) / 16).max(1) as i64;
    let src = values.clone();
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut cnt = 0;
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let yy = y as i64 + dy;
                    let xx = x as i64 + dx;
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        sum += src[yy as usize * w + xx as usize];
                        cnt += 1;
                    }
                }
            }
            values[y * w + x] = sum / cnt as f64;
        }
    }
    DepthMap::from_values(w, h, values)
}

/// The paper-style dynamic label: the most distal centerline point of the
/// branch visible in the image, sampled every 0.25 mm of arc. Returns its
/// projection, or (false, 0, 0) when no point is visible.
pub fn dynamic_landmark_label(
    tree: &AirwayTree,
    pose: &Pose,
    intr: &Intrinsics,
    branch_id: usize,
) -> (bool, f64, f64) {
    let accel = tree.accel(branch_id);
    let step = 0.25;
    for seg in accel.segments.iter().rev() {
        let n_steps = (seg.len / step).floor() as usize;
        for k in (0..=n_steps).rev() {
            let arc = (k as f64 * step).min(seg.len);
            let p = Point3::from(seg.a + seg.dir * arc);
            let p_cam = pose.world_to_camera(&p);
            let proj = crate::camera::project(intr, &p_cam);
            if proj.in_front
                && proj.x >= 0.0
                && proj.x < intr.width as f64
                && proj.y >= 0.0
                && proj.y < intr.height as f64
                && line_of_sight(tree, &pose.position, &p)
            {
                return (true, proj.x, proj.y);
            }
        }
    }
    (false, 0.0, 0.0)
}

/// A black-box source of frame observations. Providers may keep internal
/// state across calls; `t` must be strictly increasing within one sequence.
pub trait FrameProvider {
    fn provide_frame(&mut self, t: usize) -> Result<FrameObservation, ProviderError>;

    /// Timings of the last provided frame, for reporting.
    fn last_timings(&self) -> PhaseTimings {
        PhaseTimings::default()
    }

    /// Depth resolution of provided frames, used to synthesize no-signal
    /// placeholders on provider failure.
    fn depth_dims(&self) -> (usize, usize);
}

/// Provider that simulates perception from a ground-truth trajectory.
/// Pure per (seed, t); holds no mutable state besides the last timings.
pub struct SimulatedProvider<'a> {
    pub tree: &'a AirwayTree,
    pub gt_poses: &'a [Pose],
    pub full_intr: Intrinsics,
    pub perceived_intr: Intrinsics,
    pub render_opts: RenderOptions,
    pub noise: NoiseModel,
    pub schedule: DegradationSchedule,
    pub labeling: LandmarkLabeling,
    last_timings: PhaseTimings,
}

impl<'a> SimulatedProvider<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tree: &'a AirwayTree,
        gt_poses: &'a [Pose],
        full_intr: Intrinsics,
        perceived_intr: Intrinsics,
        render_opts: RenderOptions,
        noise: NoiseModel,
        schedule: DegradationSchedule,
        labeling: LandmarkLabeling,
    ) -> Self {
        Self {
            tree,
            gt_poses,
            full_intr,
            perceived_intr,
            render_opts,
            noise,
            schedule,
            labeling,
            last_timings: PhaseTimings::default(),
        }
    }
}

impl FrameProvider for SimulatedProvider<'_> {
    fn provide_frame(&mut self, t: usize) -> Result<FrameObservation, ProviderError> {
        let gt = self
            .gt_poses
            .get(t)
            .ok_or(ProviderError::FrameUnavailable(t))?;
        let (obs, timings) = simulate_frame_timed(
            self.tree,
            gt,
            &self.full_intr,
            &self.perceived_intr,
            &self.render_opts,
            &self.noise,
            self.schedule.is_degraded(t),
            t,
            self.labeling,
        )?;
        self.last_timings = timings;
        Ok(obs)
    }

    fn last_timings(&self) -> PhaseTimings {
        self.last_timings
    }

    fn depth_dims(&self) -> (usize, usize) {
        (self.perceived_intr.width, self.perceived_intr.height)
    }
}

/// One line of the recorded-observation JSONL stream.
#[derive(Serialize, Deserialize)]
struct ObservationLine {
    t: usize,
    depth_file: String,
    landmarks: Vec<LandmarkObservation>,
}

/// Streams observations to `<dir>/observations.jsonl` plus one PFM per frame.
pub struct ObservationWriter {
    dir: PathBuf,
    file: std::io::BufWriter<std::fs::File>,
}

impl ObservationWriter {
    pub fn create(dir: &Path) -> Result<Self, ProviderError> {
        std::fs::create_dir_all(dir)?;
        let file = std::fs::File::create(dir.join("observations.jsonl"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            file: std::io::BufWriter::new(file),
        })
    }

    pub fn append(&mut self, obs: &FrameObservation) -> Result<(), ProviderError> {
        let depth_file = format!("depth_{:06}.pfm", obs.t);
        depth_io::write_pfm(&self.dir.join(&depth_file), &obs.depth)?;
        let line = ObservationLine {
            t: obs.t,
            depth_file,
            landmarks: obs.landmarks.clone(),
        };
        serde_json::to_writer(&mut self.file, &line)
            .map_err(|e| ProviderError::Record(e.to_string()))?;
        self.file.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), ProviderError> {
        self.file.flush()?;
        Ok(())
    }
}

/// Replays a recorded observation stream.
pub struct RecordedProvider {
    dir: PathBuf,
    lines: std::collections::BTreeMap<usize, ObservationLine>,
    depth_dims: (usize, usize),
    last_timings: PhaseTimings,
}

impl RecordedProvider {
    pub fn open(dir: &Path) -> Result<Self, ProviderError> {
        let f = std::fs::File::open(dir.join("observations.jsonl"))?;
        let mut lines = std::collections::BTreeMap::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ObservationLine =
                serde_json::from_str(&line).map_err(|e| ProviderError::Record(e.to_string()))?;
            lines.insert(parsed.t, parsed);
        }
        let first = lines
            .values()
            .next()
            .ok_or_else(|| ProviderError::Record("empty observation stream".into()))?;
        let depth = depth_io::read_pfm(&dir.join(&first.depth_file))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            depth_dims: (depth.width, depth.height),
            lines,
            last_timings: PhaseTimings::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn n_landmarks(&self) -> usize {
        self.lines.values().next().map(|l| l.landmarks.len()).unwrap_or(0)
    }

    pub fn frame_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.lines.keys().copied()
    }
}

impl FrameProvider for RecordedProvider {
    fn provide_frame(&mut self, t: usize) -> Result<FrameObservation, ProviderError> {
        let start = std::time::Instant::now();
        let line = self
            .lines
            .get(&t)
            .ok_or(ProviderError::FrameUnavailable(t))?;
        let depth = depth_io::read_pfm(&self.dir.join(&line.depth_file))?;
        self.last_timings = PhaseTimings {
            depth_ms: start.elapsed().as_secs_f64() * 1e3,
            landmark_ms: 0.0,
        };
        Ok(FrameObservation::new(t, depth, line.landmarks.clone()))
    }

    fn last_timings(&self) -> PhaseTimings {
        self.last_timings
    }

    fn depth_dims(&self) -> (usize, usize) {
        self.depth_dims
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airway::{generate_tree, TreeGenConfig};
    use nalgebra::{UnitQuaternion, Vector3};

    fn setup() -> (AirwayTree, Pose, Intrinsics) {
        let tree = generate_tree(&TreeGenConfig {
            generations: 2,
            seed: 5,
            ..TreeGenConfig::default()
        })
        .unwrap();
        let pose = Pose::new(Point3::new(0.0, 0.0, 10.0), UnitQuaternion::identity());
        let intr = Intrinsics::new(90.0, 90.0, 100.0, 100.0, 200, 200).unwrap();
        (tree, pose, intr)
    }

    #[test]
    fn zero_noise_depth_is_affine_of_render() {
        let (tree, pose, intr) = setup();
        let render_intr = intr.scaled_to(24, 24);
        let opts = RenderOptions::default();
        let obs = simulate_frame(
            &tree,
            &pose,
            &intr,
            &render_intr,
            &opts,
            &NoiseModel::zero(),
            false,
            0,
        )
        .unwrap();
        let rendered = render_depth(&tree, &pose, &render_intr, &opts).unwrap();
        for y in 0..24 {
            for x in 0..24 {
                assert_eq!(obs.depth.get(x, y), rendered.get(x, y));
            }
        }
        for lm in &obs.landmarks {
            let (vis, x, y) =
                landmark_visibility(&tree, &pose, &intr, &tree.branches()[lm.landmark_id].landmark);
            assert_eq!(lm.visibility > 0.5, vis);
            if vis {
                assert_eq!((lm.x, lm.y), (x, y));
            }
        }
    }

    #[test]
    fn same_seed_same_frame() {
        let (tree, pose, intr) = setup();
        let render_intr = intr.scaled_to(16, 16);
        let opts = RenderOptions::default();
        let noise = NoiseModel::default();
        let a = simulate_frame(&tree, &pose, &intr, &render_intr, &opts, &noise, false, 7).unwrap();
        let b = simulate_frame(&tree, &pose, &intr, &render_intr, &opts, &noise, false, 7).unwrap();
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.landmarks, b.landmarks);
    }

    #[test]
    fn degraded_frame_has_valid_depth_and_mostly_hidden_landmarks() {
        let (tree, pose, intr) = setup();
        let render_intr = intr.scaled_to(16, 16);
        let opts = RenderOptions::default();
        let noise = NoiseModel::default();
        let obs =
            simulate_frame(&tree, &pose, &intr, &render_intr, &opts, &noise, true, 3).unwrap();
        assert!(obs.degraded_truth());
        assert_eq!(obs.depth.valid_count(), 16 * 16);
        assert!(obs.landmarks.iter().all(|l| l.visibility == 0.0 || l.visibility == 1.0));
    }

    #[test]
    fn schedule_validation() {
        let ok = DegradationSchedule {
            windows: vec![(5, 10), (20, 20)],
        };
        assert!(ok.validate().is_ok());
        assert!(ok.is_degraded(5) && ok.is_degraded(10) && ok.is_degraded(20));
        assert!(!ok.is_degraded(11));
        let bad = DegradationSchedule {
            windows: vec![(5, 10), (10, 12)],
        };
        assert!(bad.validate().is_err());
        let bad = DegradationSchedule {
            windows: vec![(7, 3)],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn flip_rate_matches_configuration() {
        let (tree, _, intr) = setup();
        let render_intr = intr.scaled_to(8, 8);
        let opts = RenderOptions::default();
        let noise = NoiseModel {
            visibility_flip_prob: 0.2,
            landmark_px_sigma: 0.0,
            depth_noise_sigma: 0.0,
            seed: 11,
            ..NoiseModel::default()
        };
        // Fixed pose; count landmark rows whose visibility differs from truth.
        let pose = Pose::new(Point3::new(0.0, 0.0, 10.0), UnitQuaternion::identity());
        let truth: Vec<bool> = (0..tree.n_landmarks())
            .map(|id| landmark_visibility(&tree, &pose, &intr, &tree.branches()[id].landmark).0)
            .collect();
        let mut flips = 0usize;
        let mut draws = 0usize;
        let mut t = 0usize;
        while draws < 10_000 {
            let obs =
                simulate_frame(&tree, &pose, &intr, &render_intr, &opts, &noise, false, t).unwrap();
            for lm in &obs.landmarks {
                if (lm.visibility > 0.5) != truth[lm.landmark_id] {
                    flips += 1;
                }
                draws += 1;
            }
            t += 1;
        }
        let rate = flips as f64 / draws as f64;
        assert!((rate - 0.2).abs() < 0.02, "flip rate {rate}");
    }

    #[test]
    fn dynamic_and_static_visibility_agree_on_straight_branch() {
        let b = crate::airway::Branch {
            id: 0,
            parent_id: None,
            centerline: vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.0, 0.0, 40.0)],
            radii: vec![4.0, 4.0],
            landmark: Point3::new(0.0, 0.0, 40.0),
            name: "root".into(),
        };
        let tree = AirwayTree::new(vec![b], 0).unwrap();
        let intr = Intrinsics::new(90.0, 90.0, 100.0, 100.0, 200, 200).unwrap();
        for k in 0..20 {
            let z = 1.0 + k as f64 * 1.9;
            let pose = Pose::new(Point3::new(0.0, 0.0, z), UnitQuaternion::identity());
            let (vis_static, _, _) =
                landmark_visibility(&tree, &pose, &intr, &tree.branches()[0].landmark);
            let (vis_dynamic, _, _) = dynamic_landmark_label(&tree, &pose, &intr, 0);
            assert_eq!(vis_static, vis_dynamic, "z = {z}");
        }
        // Looking backward: both modes must agree on invisibility.
        let pose = Pose::new(
            Point3::new(0.0, 0.0, 20.0),
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::PI),
        );
        let (vis_static, _, _) =
            landmark_visibility(&tree, &pose, &intr, &tree.branches()[0].landmark);
        let (vis_dynamic, _, _) = dynamic_landmark_label(&tree, &pose, &intr, 0);
        assert_eq!(vis_static, false);
        // Dynamic mode sees proximal centerline points ahead of the camera.
        assert_eq!(vis_dynamic, true);
    }

    #[test]
    fn jsonl_round_trip() {
        let (tree, pose, intr) = setup();
        let render_intr = intr.scaled_to(12, 12);
        let opts = RenderOptions::default();
        let noise = NoiseModel::default();
        let dir = tempfile::tempdir().unwrap();
        let mut writer = ObservationWriter::create(dir.path()).unwrap();
        let mut originals = Vec::new();
        for t in 0..3 {
            let obs =
                simulate_frame(&tree, &pose, &intr, &render_intr, &opts, &noise, t == 1, t)
                    .unwrap();
            writer.append(&obs).unwrap();
            originals.push(obs);
        }
        writer.finish().unwrap();
        let mut provider = RecordedProvider::open(dir.path()).unwrap();
        assert_eq!(provider.len(), 3);
        assert_eq!(provider.n_landmarks(), tree.n_landmarks());
        for t in 0..3 {
            let replayed = provider.provide_frame(t).unwrap();
            assert_eq!(replayed.landmarks, originals[t].landmarks);
            // PFM stores f32; compare at that precision.
            for y in 0..12 {
                for x in 0..12 {
                    match (originals[t].depth.get(x, y), replayed.depth.get(x, y)) {
                        (Some(a), Some(b)) => assert_eq!(a as f32, b as f32),
                        (None, None) => {}
                        other => panic!("mask mismatch at ({x},{y}): {other:?}"),
                    }
                }
            }
        }
        assert!(matches!(
            provider.provide_frame(9),
            Err(ProviderError::FrameUnavailable(9))
        ));
    }
}

//! Trajectory error metrics (ATE, SR-k) and report generation.

use crate::airway::BranchId;
use crate::cost::CostBreakdown;
use crate::pose::Pose;
use nalgebra::{Point3, Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no labeled frames")]
    NoLabeledFrames,
    #[error("trajectory io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory csv: {0}")]
    Csv(String),
}

/// One tracked frame. `gt_pose` is present iff the frame is labeled.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub t: usize,
    pub est_pose: Pose,
    pub gt_pose: Option<Pose>,
    pub labeled: bool,
    pub lost: bool,
    pub reinit_event: bool,
    pub cost: CostBreakdown,
    pub branch_est: BranchId,
    pub branch_gt: Option<BranchId>,
}

impl TrajectoryRecord {
    pub fn position_error_mm(&self) -> Option<f64> {
        self.gt_pose
            .as_ref()
            .map(|gt| self.est_pose.translational_distance(gt))
    }

    pub fn rotation_error_deg(&self) -> Option<f64> {
        self.gt_pose
            .as_ref()
            .map(|gt| self.est_pose.angular_distance(gt).to_degrees())
    }
}

/// Mean, population standard deviation and per-frame position errors over
/// labeled frames. Both trajectories live in the tree frame; no alignment is
/// performed.
pub fn ate(records: &[TrajectoryRecord]) -> Result<(f64, f64, Vec<f64>), MetricsError> {
    let per_frame: Vec<f64> = records
        .iter()
        .filter(|r| r.labeled)
        .filter_map(|r| r.position_error_mm())
        .collect();
    if per_frame.is_empty() {
        return Err(MetricsError::NoLabeledFrames);
    }
    let n = per_frame.len() as f64;
    let mean = per_frame.iter().sum::<f64>() / n;
    let var = per_frame.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt(), per_frame))
}

/// Fraction of labeled frames with position error strictly below the
/// threshold.
pub fn success_rate(
    records: &[TrajectoryRecord],
    threshold_mm: f64,
) -> Result<f64, MetricsError> {
    let (_, _, per_frame) = ate(records)?;
    let hits = per_frame.iter().filter(|e| **e < threshold_mm).count();
    Ok(hits as f64 / per_frame.len() as f64)
}

/// Mean per-frame runtimes, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeBreakdown {
    pub depth: f64,
    pub landmark: f64,
    pub optimize: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    /// Null when the record set has no labeled frames.
    pub ate_mean: Option<f64>,
    pub ate_std: Option<f64>,
    pub sr5: Option<f64>,
    pub sr10: Option<f64>,
    pub n_frames_labeled: usize,
    pub n_reinits: usize,
    pub lost_fraction: f64,
    /// Null when no timings were collected.
    pub runtime_ms_per_frame: Option<RuntimeBreakdown>,
}

/// Aggregates metrics plus reinit/lost counters and timing means.
pub fn summarize(
    records: &[TrajectoryRecord],
    timings: Option<RuntimeBreakdown>,
) -> MetricsSummary {
    let (ate_mean, ate_std, sr5, sr10) = match ate(records) {
        Ok((mean, std, per_frame)) => {
            let n = per_frame.len() as f64;
            let sr = |thr: f64| per_frame.iter().filter(|e| **e < thr).count() as f64 / n;
            (Some(mean), Some(std), Some(sr(5.0)), Some(sr(10.0)))
        }
        Err(_) => (None, None, None, None),
    };
    let n_total = records.len().max(1);
    MetricsSummary {
        ate_mean,
        ate_std,
        sr5,
        sr10,
        n_frames_labeled: records.iter().filter(|r| r.labeled).count(),
        n_reinits: records.iter().filter(|r| r.reinit_event).count(),
        lost_fraction: records.iter().filter(|r| r.lost).count() as f64 / n_total as f64,
        runtime_ms_per_frame: timings,
    }
}

pub const TRAJECTORY_CSV_HEADER: &str = "t,labeled,lost,reinit,gt_x,gt_y,gt_z,gt_qw,gt_qx,gt_qy,gt_qz,est_x,est_y,est_z,est_qw,est_qx,est_qy,est_qz,err_mm,err_deg,l_depth,l_landmark,l_centerline,total,branch_est,branch_gt";

fn push_pose(out: &mut String, pose: &Pose) {
    let q = pose.orientation.quaternion();
    out.push_str(&format!(
        ",{},{},{},{},{},{},{}",
        pose.position.x, pose.position.y, pose.position.z, q.w, q.i, q.j, q.k
    ));
}

/// Writes the trajectory CSV in the pinned column order. Floats use the
/// shortest round-trip representation so a parsed file reproduces the exact
/// values; unlabeled frames leave the gt and error fields empty.
pub fn write_trajectory_csv(
    path: &Path,
    records: &[TrajectoryRecord],
) -> Result<(), MetricsError> {
    let mut out = String::with_capacity(records.len() * 200 + 256);
    out.push_str(TRAJECTORY_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}",
            r.t, r.labeled as u8, r.lost as u8, r.reinit_event as u8
        ));
        match &r.gt_pose {
            Some(gt) => push_pose(&mut out, gt),
            None => out.push_str(",,,,,,,"),
        }
        push_pose(&mut out, &r.est_pose);
        match (r.position_error_mm(), r.rotation_error_deg()) {
            (Some(e), Some(a)) => out.push_str(&format!(",{e},{a}")),
            _ => out.push_str(",,"),
        }
        out.push_str(&format!(
            ",{},{},{},{},{}",
            r.cost.l_depth, r.cost.l_landmark, r.cost.l_centerline, r.cost.total, r.branch_est
        ));
        match r.branch_gt {
            Some(b) => out.push_str(&format!(",{b}")),
            None => out.push(','),
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

fn parse_f64(field: &str, what: &str) -> Result<f64, MetricsError> {
    field
        .parse()
        .map_err(|_| MetricsError::Csv(format!("bad {what}: {field:?}")))
}

fn parse_pose(fields: &[&str]) -> Result<Pose, MetricsError> {
    let v: Result<Vec<f64>, _> = fields.iter().map(|f| parse_f64(f, "pose field")).collect();
    let v = v?;
    Ok(Pose {
        position: Point3::new(v[0], v[1], v[2]),
        // Written from a unit quaternion; renormalizing would perturb bits.
        orientation: UnitQuaternion::new_unchecked(Quaternion::new(v[3], v[4], v[5], v[6])),
    })
}

/// Reads a trajectory CSV. Cost validity flags and visible counts are not
/// stored in the file; they are restored as neutral values.
pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRecord>, MetricsError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRAJECTORY_CSV_HEADER => {}
        other => return Err(MetricsError::Csv(format!("unexpected header {other:?}"))),
    }
    let mut records = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 26 {
            return Err(MetricsError::Csv(format!(
                "line {}: expected 26 fields, got {}",
                ln + 2,
                f.len()
            )));
        }
        let labeled = f[1] == "1";
        let gt_pose = if labeled {
            Some(parse_pose(&f[4..11])?)
        } else {
            None
        };
        let est_pose = parse_pose(&f[11..18])?;
        let cost = CostBreakdown {
            l_depth: parse_f64(f[20], "l_depth")?,
            l_landmark: parse_f64(f[21], "l_landmark")?,
            l_centerline: parse_f64(f[22], "l_centerline")?,
            depth_valid: true,
            landmark_valid: true,
            total: parse_f64(f[23], "total")?,
            visible_count: 0,
        };
        records.push(TrajectoryRecord {
            t: f[0]
                .parse()
                .map_err(|_| MetricsError::Csv(format!("bad t {:?}", f[0])))?,
            labeled,
            lost: f[2] == "1",
            reinit_event: f[3] == "1",
            gt_pose,
            est_pose,
            cost,
            branch_est: f[24]
                .parse()
                .map_err(|_| MetricsError::Csv(format!("bad branch_est {:?}", f[24])))?,
            branch_gt: if f[25].is_empty() {
                None
            } else {
                Some(
                    f[25].parse().map_err(|_| {
                        MetricsError::Csv(format!("bad branch_gt {:?}", f[25]))
                    })?,
                )
            },
        });
    }
    Ok(records)
}

//! Derivative-free pose optimization: Powell's direction-set method with
//! golden-ratio bracketing and Brent line minimization, over a 6-dimensional
//! local pose chart (mm translation + axis-angle rotation increment).

use crate::airway::BranchId;
use crate::cost::{total_cost, CostBreakdown, CostContext};
use crate::perception::FrameObservation;
use crate::pose::Pose;
use nalgebra::{Point3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::io::Write;
use std::path::PathBuf;
use thiserror::Error;

const GOLD: f64 = 1.618033988749895;
const CGOLD: f64 = 0.3819660112501051;
const BRENT_ZEPS: f64 = 1e-10;
const BRENT_ITMAX: usize = 100;
const BRACKET_MAX_EXPANSIONS: usize = 50;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BracketError {
    #[error("no bracket found: function appears monotone over the probed range")]
    NoBracket,
}

/// Expands from `x0` by golden-ratio steps until three points bracket a local
/// minimum: f(b) < f(a) and f(b) < f(c), with b between a and c (possibly in
/// reversed order). Fails after `max_expansions` steps on monotone (or flat)
/// functions.
pub fn bracket_minimum<F: FnMut(f64) -> f64>(
    mut f: F,
    x0: f64,
    step: f64,
) -> Result<(f64, f64, f64), BracketError> {
    let fa = f(x0);
    bracket_from(&mut f, x0, fa, step, BRACKET_MAX_EXPANSIONS)
}

fn bracket_from<F: FnMut(f64) -> f64>(
    f: &mut F,
    x0: f64,
    f0: f64,
    step: f64,
    max_expansions: usize,
) -> Result<(f64, f64, f64), BracketError> {
    let mut a = x0;
    let mut fa = f0;
    let mut b = x0 + step;
    let mut fb = f(b);
    if fb > fa {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut c = b + GOLD * (b - a);
    let mut fc = f(c);
    let mut expansions = 0;
    while fb >= fc {
        expansions += 1;
        if expansions > max_expansions {
            return Err(BracketError::NoBracket);
        }
        a = b;
        fa = fb;
        b = c;
        fb = fc;
        c = b + GOLD * (b - a);
        fc = f(c);
    }
    if fb >= fa {
        // Flat or ascending start: no strict interior minimum.
        return Err(BracketError::NoBracket);
    }
    Ok((a, b, c))
}

/// Brent's parabolic/golden hybrid line minimization inside a bracket.
/// Convergence window is `tol * |t| + 1e-10`; at most 100 iterations.
pub fn brent_min<F: FnMut(f64) -> f64>(
    mut f: F,
    bracket: (f64, f64, f64),
    tol: f64,
) -> (f64, f64) {
    let (ba, bb, bc) = bracket;
    let mut a = ba.min(bc);
    let mut b = ba.max(bc);
    let mut x = bb;
    let mut w = bb;
    let mut v = bb;
    let mut fx = f(x);
    let mut fw = fx;
    let mut fv = fx;
    let mut d = 0.0f64;
    let mut e = 0.0f64;

    for _ in 0..BRENT_ITMAX {
        let xm = 0.5 * (a + b);
        let tol1 = tol * x.abs() + BRENT_ZEPS;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut use_golden = true;
        if e.abs() > tol1 {
            // Parabolic fit through x, v, w.
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            e = d;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm > x { tol1 } else { -tol1 };
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + if d >= 0.0 { tol1 } else { -tol1 }
        };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    FTol,
    XTol,
    MaxIters,
    MaxFevals,
}

#[derive(Debug, Clone)]
pub struct OptResult {
    pub x_star: Vec<f64>,
    pub f_star: f64,
    pub fevals: usize,
    pub converged: bool,
    pub reason: StopReason,
    /// Objective value after each completed sweep.
    pub sweep_trace: Vec<f64>,
}

/// Powell options. `x_tol` is per-coordinate (broadcast when a single value
/// is given); defaults suit the 6-D pose chart: 0.01 mm translation,
/// 0.002 rad rotation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowellOptions {
    pub x_tol: Vec<f64>,
    pub f_tol: f64,
    /// Maximum direction-set sweeps.
    pub max_iters: usize,
    pub max_fevals: usize,
    /// Initial line-search step in chart units.
    pub bracket_step: f64,
    /// Golden-ratio bracket expansions allowed per line search; small values
    /// keep probes near the current point.
    #[serde(default = "default_bracket_expansions")]
    pub bracket_expansions: usize,
    /// Optional per-axis scaling of the initial direction set.
    #[serde(default)]
    pub axis_scales: Option<Vec<f64>>,
    /// When set, writes a per-evaluation CSV trace (feval, x..., f).
    #[serde(default)]
    pub trace_path: Option<PathBuf>,
}

fn default_bracket_expansions() -> usize {
    BRACKET_MAX_EXPANSIONS
}

impl Default for PowellOptions {
    fn default() -> Self {
        Self {
            x_tol: vec![0.01, 0.01, 0.01, 0.002, 0.002, 0.002],
            f_tol: 1e-6,
            max_iters: 30,
            max_fevals: 3000,
            bracket_step: 0.5,
            bracket_expansions: BRACKET_MAX_EXPANSIONS,
            axis_scales: None,
            trace_path: None,
        }
    }
}

impl PowellOptions {
    pub fn validate(&self) -> Result<(), String> {
        if self.x_tol.is_empty() || self.x_tol.iter().any(|t| !(*t > 0.0)) {
            return Err("x_tol entries must be positive".into());
        }
        if !(self.f_tol > 0.0) || !(self.bracket_step > 0.0) {
            return Err("f_tol and bracket_step must be positive".into());
        }
        if self.max_iters == 0 || self.max_fevals == 0 {
            return Err("iteration budgets must be positive".into());
        }
        Ok(())
    }

    fn x_tol_for(&self, i: usize, n: usize) -> f64 {
        if self.x_tol.len() == n {
            self.x_tol[i]
        } else {
            self.x_tol[0]
        }
    }
}

struct TracedObjective<'a> {
    f: &'a mut dyn FnMut(&[f64]) -> f64,
    fevals: Cell<usize>,
    best_x: std::cell::RefCell<Vec<f64>>,
    best_f: Cell<f64>,
    trace: Option<std::io::BufWriter<std::fs::File>>,
}

impl<'a> TracedObjective<'a> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        let f = (self.f)(x);
        self.fevals.set(self.fevals.get() + 1);
        if f < self.best_f.get() {
            self.best_f.set(f);
            self.best_x.borrow_mut().copy_from_slice(x);
        }
        if let Some(w) = self.trace.as_mut() {
            let _ = write!(w, "{}", self.fevals.get());
            for v in x {
                let _ = write!(w, ",{v}");
            }
            let _ = writeln!(w, ",{f}");
        }
        f
    }
}

/// Classic Powell direction-set minimization: line-minimize along each
/// direction, then replace the direction of largest decrease with the sweep
/// displacement when the standard discard test favors it. The direction set
/// resets to the (scaled) identity basis every n sweeps. Stops on relative
/// objective decrease below `f_tol`, per-coordinate displacement below
/// `x_tol`, or budget exhaustion (returning the best point seen).
pub fn powell_minimize<F: FnMut(&[f64]) -> f64>(
    mut objective: F,
    x0: &[f64],
    opts: &PowellOptions,
) -> OptResult {
    let n = x0.len();
    assert!(n > 0, "empty parameter vector");
    let scales: Vec<f64> = match &opts.axis_scales {
        Some(s) => {
            assert_eq!(s.len(), n, "axis_scales length must match dimension");
            s.clone()
        }
        None => vec![1.0; n],
    };
    let trace = opts.trace_path.as_ref().and_then(|p| {
        std::fs::File::create(p)
            .ok()
            .map(std::io::BufWriter::new)
    });
    let mut f = {
        let obj: &mut dyn FnMut(&[f64]) -> f64 = &mut objective;
        let f0 = obj(x0);
        let mut t = TracedObjective {
            f: obj,
            fevals: Cell::new(1),
            best_x: std::cell::RefCell::new(x0.to_vec()),
            best_f: Cell::new(f0),
            trace,
        };
        if let Some(w) = t.trace.as_mut() {
            let _ = write!(w, "1");
            for v in x0 {
                let _ = write!(w, ",{v}");
            }
            let _ = writeln!(w, ",{f0}");
        }
        t
    };

    let identity_dirs = |scales: &[f64]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let mut d = vec![0.0; n];
                d[i] = scales[i];
                d
            })
            .collect()
    };
    let mut dirs = identity_dirs(&scales);
    let mut p = x0.to_vec();
    let mut fp = f.best_f.get();
    let mut sweep_trace = Vec::new();
    let mut reason = StopReason::MaxIters;
    let mut converged = false;
    let min_x_tol = (0..n).map(|i| opts.x_tol_for(i, n)).fold(f64::INFINITY, f64::min);

    'sweeps: for sweep in 1..=opts.max_iters {
        let p_start = p.clone();
        let fp_start = fp;
        let mut biggest_drop = 0.0;
        let mut biggest_idx = 0;

        for i in 0..n {
            if f.fevals.get() >= opts.max_fevals {
                reason = StopReason::MaxFevals;
                break 'sweeps;
            }
            let dir = dirs[i].clone();
            let (t_min, f_min) = line_minimize(
                &mut f,
                &p,
                fp,
                &dir,
                opts.bracket_step,
                opts.bracket_expansions,
                min_x_tol,
            );
            if f_min < fp {
                let drop = fp - f_min;
                for j in 0..n {
                    p[j] += t_min * dir[j];
                }
                fp = f_min;
                if drop > biggest_drop {
                    biggest_drop = drop;
                    biggest_idx = i;
                }
            }
        }
        sweep_trace.push(fp);

        // Relative decrease termination.
        if 2.0 * (fp_start - fp) <= opts.f_tol * (fp_start.abs() + fp.abs()) + 1e-20 {
            reason = StopReason::FTol;
            converged = true;
            break;
        }
        // Displacement termination, per coordinate.
        let small = (0..n).all(|j| (p[j] - p_start[j]).abs() <= opts.x_tol_for(j, n));
        if small {
            reason = StopReason::XTol;
            converged = true;
            break;
        }
        if f.fevals.get() >= opts.max_fevals {
            reason = StopReason::MaxFevals;
            break;
        }

        // Powell's discard rule: try the extrapolated point and, when the
        // test favors it, replace the direction of largest decrease with the
        // normalized sweep displacement.
        let pe: Vec<f64> = (0..n).map(|j| 2.0 * p[j] - p_start[j]).collect();
        let fe = f.eval(&pe);
        if fe < fp_start {
            let t = 2.0 * (fp_start - 2.0 * fp + fe) * (fp_start - fp - biggest_drop).powi(2)
                - biggest_drop * (fp_start - fe).powi(2);
            if t < 0.0 {
                let mut new_dir: Vec<f64> = (0..n).map(|j| p[j] - p_start[j]).collect();
                let norm = new_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    for v in new_dir.iter_mut() {
                        *v /= norm;
                    }
                    let (t_min, f_min) = line_minimize(
                        &mut f,
                        &p,
                        fp,
                        &new_dir,
                        opts.bracket_step,
                        opts.bracket_expansions,
                        min_x_tol,
                    );
                    if f_min < fp {
                        for j in 0..n {
                            p[j] += t_min * new_dir[j];
                        }
                        fp = f_min;
                    }
                    dirs[biggest_idx] = dirs[n - 1].clone();
                    dirs[n - 1] = new_dir;
                }
            }
        }

        if sweep % n == 0 {
            // Periodic reset avoids a linearly dependent direction set.
            dirs = identity_dirs(&scales);
        }
    }

    let best_f = f.best_f.get();
    let best_x = f.best_x.borrow().clone();
    OptResult {
        x_star: best_x,
        f_star: best_f,
        fevals: f.fevals.get(),
        converged,
        reason,
        sweep_trace,
    }
}

/// One line minimization along `dir` from `p` where f(p) = fp is known.
/// Returns (t, f(p + t dir)); (0, fp) when no bracket exists.
fn line_minimize(
    f: &mut TracedObjective,
    p: &[f64],
    fp: f64,
    dir: &[f64],
    bracket_step: f64,
    bracket_expansions: usize,
    x_tol: f64,
) -> (f64, f64) {
    let n = p.len();
    let mut scratch = vec![0.0; n];
    let mut g = |t: f64| -> f64 {
        for j in 0..n {
            scratch[j] = p[j] + t * dir[j];
        }
        f.eval(&scratch)
    };
    match bracket_from(&mut g, 0.0, fp, bracket_step, bracket_expansions) {
        Err(_) => (0.0, fp),
        Ok(bracket) => {
            let (t, ft) = brent_min(&mut g, bracket, x_tol);
            if ft < fp {
                (t, ft)
            } else {
                (0.0, fp)
            }
        }
    }
}

/// Local 6-D chart around a reference pose: (dx, dy, dz) in mm expressed in
/// the reference camera frame (so the z coordinate advances along the viewing
/// direction, the long axis of tubular cost valleys), and an axis-angle
/// rotation increment applied on the left of the reference orientation.
/// decode(0) is the reference exactly.
#[derive(Debug, Clone, Copy)]
pub struct PoseChart {
    pub reference: Pose,
}

impl PoseChart {
    pub fn new(reference: Pose) -> Self {
        Self { reference }
    }

    pub fn decode(&self, x: &[f64]) -> Pose {
        debug_assert_eq!(x.len(), 6);
        let dp = self.reference.orientation * Vector3::new(x[0], x[1], x[2]);
        let rot = UnitQuaternion::from_scaled_axis(Vector3::new(x[3], x[4], x[5]));
        Pose {
            position: Point3::from(self.reference.position.coords + dp),
            orientation: rot * self.reference.orientation,
        }
    }

    pub fn encode(&self, pose: &Pose) -> [f64; 6] {
        let dp = self.reference.orientation.inverse()
            * (pose.position.coords - self.reference.position.coords);
        let rot = pose.orientation * self.reference.orientation.inverse();
        let r = rot.scaled_axis();
        [dp.x, dp.y, dp.z, r.x, r.y, r.z]
    }
}

/// Minimizes the total frame cost over the pose chart anchored at `init`;
/// returns the optimized pose, its full cost breakdown and the optimizer
/// result.
pub fn optimize_pose(
    ctx: &CostContext,
    frame: &FrameObservation,
    branch_id: BranchId,
    init: &Pose,
    opts: &PowellOptions,
) -> (Pose, CostBreakdown, OptResult) {
    let chart = PoseChart::new(*init);
    // Downsample the perceived depth once, not per evaluation.
    let frame_ds;
    let frame = if frame.depth.width == ctx.render_intr.width
        && frame.depth.height == ctx.render_intr.height
    {
        frame
    } else {
        frame_ds = FrameObservation::new(
            frame.t,
            frame
                .depth
                .downsample_to(ctx.render_intr.width, ctx.render_intr.height),
            frame.landmarks.clone(),
        );
        &frame_ds
    };
    let objective =
        |x: &[f64]| -> f64 { total_cost(ctx, frame, branch_id, &chart.decode(x)).total };
    let result = powell_minimize(objective, &[0.0; 6], opts);
    let pose = chart.decode(&result.x_star);
    let breakdown = total_cost(ctx, frame, branch_id, &pose);
    (pose, breakdown, result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bracket_simple_parabola() {
        let (a, b, c) = bracket_minimum(|t| (t - 3.0) * (t - 3.0), 0.0, 1.0).unwrap();
        let (lo, hi) = (a.min(c), a.max(c));
        assert!(lo < 3.0 && 3.0 < hi);
        assert!(b > lo && b < hi);
    }

    #[test]
    fn bracket_monotone_fails() {
        assert_eq!(
            bracket_minimum(|t| t, 0.0, 1.0).unwrap_err(),
            BracketError::NoBracket
        );
    }

    #[test]
    fn bracket_cosine_contains_pi() {
        let (a, _, c) = bracket_minimum(|t| t.cos(), 0.1, 0.5).unwrap();
        let (lo, hi) = (a.min(c), a.max(c));
        assert!(lo < std::f64::consts::PI && std::f64::consts::PI < hi);
    }

    #[test]
    fn brent_parabola() {
        let f = |t: f64| (t - 3.0) * (t - 3.0);
        let bracket = bracket_minimum(f, 0.0, 1.0).unwrap();
        let (t, _) = brent_min(f, bracket, 1e-10);
        assert!((t - 3.0).abs() < 1e-8, "t = {t}");
    }

    #[test]
    fn brent_flat_quartic() {
        let f = |t: f64| t.powi(4);
        let bracket = bracket_minimum(f, 1.0, 0.5).unwrap();
        let (t, _) = brent_min(f, bracket, 1e-10);
        assert!(t.abs() < 1e-4, "t = {t}");
    }

    #[test]
    fn powell_convex_quadratic_6d() {
        let c = [1.0, -2.0, 0.5, 3.0, -1.5, 0.25];
        let f = |x: &[f64]| -> f64 {
            x.iter()
                .zip(&c)
                .map(|(xi, ci)| (xi - ci) * (xi - ci))
                .sum()
        };
        let r = powell_minimize(f, &[0.0; 6], &PowellOptions::default());
        assert!(r.converged);
        for (xi, ci) in r.x_star.iter().zip(&c) {
            assert!((xi - ci).abs() < 1e-6, "coordinate {xi} vs {ci}");
        }
    }

    #[test]
    fn powell_rosenbrock_embedded() {
        // 2-D Rosenbrock in coordinates 0-1 of a 6-vector, others pinned.
        let f = |x: &[f64]| -> f64 {
            let (a, b) = (x[0], x[1]);
            let tail: f64 = x[2..].iter().map(|v| v * v).sum();
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2) + tail
        };
        let mut x0 = [0.0; 6];
        x0[0] = -1.2;
        x0[1] = 1.0;
        let opts = PowellOptions {
            x_tol: vec![1e-6; 6],
            f_tol: 1e-12,
            ..PowellOptions::default()
        };
        let r = powell_minimize(f, &x0, &opts);
        assert!(r.fevals <= 3000, "fevals {}", r.fevals);
        assert!((r.x_star[0] - 1.0).abs() < 1e-4, "x0 {}", r.x_star[0]);
        assert!((r.x_star[1] - 1.0).abs() < 1e-4, "x1 {}", r.x_star[1]);
        assert!(r.f_star < 1e-8, "f {}", r.f_star);
    }

    #[test]
    fn powell_never_worse_than_start() {
        let f = |x: &[f64]| x[0].sin() + (x[1] * 0.5).cos() * 2.0 + x[2].abs();
        let x0 = [0.3, 1.0, -2.0, 0.0, 0.0, 0.0];
        let f0 = f(&x0);
        let r = powell_minimize(f, &x0, &PowellOptions::default());
        assert!(r.f_star <= f0 + 1e-12);
    }

    #[test]
    fn powell_sweep_trace_non_increasing() {
        let f = |x: &[f64]| {
            x.iter()
                .enumerate()
                .map(|(i, v)| (v - i as f64).powi(2))
                .sum::<f64>()
        };
        let r = powell_minimize(f, &[5.0; 6], &PowellOptions::default());
        for w in r.sweep_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn powell_respects_feval_budget() {
        let opts = PowellOptions {
            max_fevals: 40,
            ..PowellOptions::default()
        };
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let r = powell_minimize(f, &[-1.2, 1.0, 0.0, 0.0, 0.0, 0.0], &opts);
        assert!(!r.converged);
        assert_eq!(r.reason, StopReason::MaxFevals);
        // A line search may overshoot the budget slightly, never wildly.
        assert!(r.fevals < 40 + 200, "fevals {}", r.fevals);
    }

    #[test]
    fn chart_round_trip() {
        let reference = Pose::new(
            Point3::new(1.0, 2.0, 3.0),
            UnitQuaternion::from_scaled_axis(Vector3::new(0.2, -0.4, 0.9)),
        );
        let chart = PoseChart::new(reference);
        assert_eq!(chart.decode(&[0.0; 6]), reference);
        let pose = Pose::new(
            Point3::new(0.5, -1.0, 4.2),
            UnitQuaternion::from_scaled_axis(Vector3::new(-0.7, 0.1, 0.3)),
        );
        let x = chart.encode(&pose);
        let back = chart.decode(&x);
        assert_relative_eq!(back.position, pose.position, epsilon = 1e-9);
        assert!(back.angular_distance(&pose) < 1e-9);
    }
}

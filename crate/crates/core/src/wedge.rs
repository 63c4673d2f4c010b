//! Time changes of the two-point motion, boundary local times and the
//! reflected pair they produce.
//!
//! For a pair `x < y` of `φ±` particles the region `D` is where the two use
//! different drivers (`x ≤ 0 < y`). Off `D` they move in parallel, so
//! deleting those stretches leaves a Brownian pair reflected on the wedge
//! boundary at angle π/4, pushed by the boundary local time.

use thiserror::Error;

use crate::noise::{Label, Substream, TimeGrid};
use crate::verify::{ks_test, mc_summary, normal_cdf, MCSummary, TestReport, VerifyError};
use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum WedgeError {
    #[error("array lengths disagree: {0}")]
    LengthMismatch(&'static str),
    #[error("crossing level must be positive, got {0}")]
    NonPositiveEps(f64),
    #[error("distance path must be nonnegative")]
    NegativeDistance,
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

/// `-ζ(1/2)/√(2π)`: mean overshoot of a Gaussian walk over a level, in units
/// of the step's standard deviation.
pub const OVERSHOOT_CONSTANT: f64 = 0.582_597_157_939_010_6;

/// Relative tolerance for "at the boundary".
pub const BOUNDARY_TOL_REL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Region {
    /// Different drivers: `x ≤ 0 < y` or `y ≤ 0 < x`.
    D,
    /// At least one coordinate `≤ 0` (the `C⁺` corner complement).
    Dr,
    /// Both coordinates `> 0`.
    DPlus,
}

impl Region {
    #[inline]
    pub fn contains<T: Real>(self, x: T, y: T) -> bool {
        let z = T::zero();
        match self {
            Region::D => (x <= z) != (y <= z),
            Region::Dr => x <= z || y <= z,
            Region::DPlus => x > z && y > z,
        }
    }
}

/// Distance of a `φ±` pair to `D`: zero inside, otherwise how far the pair
/// has to travel in parallel to get back.
#[inline]
pub fn distance_to_d<T: Real>(x: T, y: T) -> T {
    let z = T::zero();
    if (x <= z) != (y <= z) {
        z
    } else if x > z {
        x.min(y)
    } else {
        -x.max(y)
    }
}

/// A path restricted to the steps where an indicator holds.
#[derive(Debug, Clone, PartialEq)]
pub struct WedgePath<T> {
    pub grid_r: TimeGrid<T>,
    pub xr: Vec<T>,
    pub yr: Vec<T>,
    /// Source index of each retained point (the last entry is the end of the
    /// last retained step).
    pub index_map: Vec<usize>,
    /// Running boundary push, both boundaries together.
    pub l_est: Vec<T>,
    /// Push received on the `x = 0` side, direction `(-1, -1)`.
    pub l_x: Vec<T>,
    /// Push received on the `y = 0` side, direction `(+1, +1)`.
    pub l_y: Vec<T>,
    pub region: Region,
}

impl<T: Real> WedgePath<T> {
    pub fn n_steps(&self) -> usize {
        self.grid_r.n_steps
    }

    pub fn elapsed(&self) -> T {
        self.grid_r.duration()
    }

    pub fn is_empty(&self) -> bool {
        self.xr.is_empty()
    }
}

/// Keep the steps `k` with `indicator[k]`; consecutive kept steps are glued
/// end to start. The jump across each deleted stretch is booked as boundary
/// push.
pub fn time_change<T: Real>(x: &[T], y: &[T], indicator: &[bool], dt: T, region: Region) -> Result<WedgePath<T>, WedgeError> {
    if x.len() != y.len() {
        return Err(WedgeError::LengthMismatch("x and y"));
    }
    if indicator.len() + 1 != x.len() {
        return Err(WedgeError::LengthMismatch("indicator must have one entry per step"));
    }
    let kept: Vec<usize> = indicator.iter().enumerate().filter(|(_, b)| **b).map(|(k, _)| k).collect();
    let m = kept.len();
    let grid_r = TimeGrid { t_start: T::zero(), dt, n_steps: m };
    if m == 0 {
        let e = Vec::new();
        return Ok(WedgePath { grid_r, xr: e.clone(), yr: e.clone(), index_map: Vec::new(), l_est: e.clone(), l_x: e.clone(), l_y: e, region });
    }
    let mut index_map = kept.clone();
    index_map.push(kept[m - 1] + 1);
    let xr: Vec<T> = index_map.iter().map(|&i| x[i]).collect();
    let yr: Vec<T> = index_map.iter().map(|&i| y[i]).collect();
    let mut l_x = Vec::with_capacity(m + 1);
    let mut l_y = Vec::with_capacity(m + 1);
    let (mut ax, mut ay) = (T::zero(), T::zero());
    l_x.push(ax);
    l_y.push(ay);
    for r in 0..m {
        let prev_end = kept[r] + 1;
        let next = index_map[r + 1];
        if next > prev_end {
            let jump = x[next] - x[prev_end];
            if jump < T::zero() {
                ax -= jump;
            } else {
                ay += jump;
            }
        }
        l_x.push(ax);
        l_y.push(ay);
    }
    let l_est = l_x.iter().zip(&l_y).map(|(&a, &b)| a + b).collect();
    Ok(WedgePath { grid_r, xr, yr, index_map, l_est, l_x, l_y, region })
}

/// Time change of a `φ±` pair to `D`.
pub fn time_change_to_d<T: Real>(x: &[T], y: &[T], dt: T) -> Result<WedgePath<T>, WedgeError> {
    if x.len() != y.len() || x.is_empty() {
        return Err(WedgeError::LengthMismatch("x and y"));
    }
    let ind: Vec<bool> = (0..x.len() - 1).map(|k| Region::D.contains(x[k], y[k])).collect();
    time_change(x, y, &ind, dt, Region::D)
}

/// `u = (y+x)/√2`, `v = (y−x)/√2`.
pub fn uv_transform<T: Real>(w: &WedgePath<T>) -> (Vec<T>, Vec<T>) {
    let s = T::SQRT_2();
    let u = w.xr.iter().zip(&w.yr).map(|(&x, &y)| (y + x) / s).collect();
    let v = w.xr.iter().zip(&w.yr).map(|(&x, &y)| (y - x) / s).collect();
    (u, v)
}

/// Completed excursions from the boundary up to `eps`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CrossingCount<T> {
    pub eps: T,
    pub count: u64,
    /// `eps · count`.
    pub estimate: T,
}

impl<T: Real> CrossingCount<T> {
    pub fn new(eps: T, count: u64) -> Self {
        Self { eps, count, estimate: eps * T::of(count as f64) }
    }

    /// `(eps + 2β√h)·count` where `h` is the step near the boundary: a
    /// discrete walk overshoots `eps` on the way up and undershoots zero on
    /// the way back by `β√h` on average, so the raw estimate runs low.
    pub fn corrected(&self, h: T) -> T {
        (self.eps + T::of(2.0 * OVERSHOOT_CONSTANT) * h.sqrt()) * T::of(self.count as f64)
    }
}

pub fn local_time_crossings<T: Real>(distance: &[T], eps: T) -> Result<CrossingCount<T>, WedgeError> {
    let scale = distance.iter().fold(T::one(), |a, &d| a.max(d.abs()));
    local_time_crossings_tol(distance, eps, T::of(BOUNDARY_TOL_REL) * scale)
}

pub fn local_time_crossings_tol<T: Real>(distance: &[T], eps: T, boundary_tol: T) -> Result<CrossingCount<T>, WedgeError> {
    if !(eps > T::zero()) {
        return Err(WedgeError::NonPositiveEps(eps.f64()));
    }
    let mut armed = false;
    let mut count = 0u64;
    for &d in distance {
        if d < T::zero() {
            return Err(WedgeError::NegativeDistance);
        }
        if d <= boundary_tol {
            armed = true;
        } else if armed && d >= eps {
            count += 1;
            armed = false;
        }
    }
    Ok(CrossingCount::new(eps, count))
}

/// Running crossing estimate along a path (one value per point).
pub fn running_crossings<T: Real>(distance: &[T], eps: T, boundary_tol: T) -> Vec<T> {
    let mut armed = false;
    let mut acc = T::zero();
    distance
        .iter()
        .map(|&d| {
            if d <= boundary_tol {
                armed = true;
            } else if armed && d >= eps {
                acc += eps;
                armed = false;
            }
            acc
        })
        .collect()
}

/// Settings for [`run_two_point`].
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPointConfig<T> {
    pub x0: T,
    pub y0: T,
    /// Finest step, used whenever a boundary or level is close.
    pub dt: T,
    /// A step of size `h` is only taken when the nearest boundary is at least
    /// `kappa·√h` away.
    pub kappa: T,
    pub horizon: T,
    /// Crossing levels for the distance to `D`.
    pub eps: Vec<T>,
    /// Stop once `y − x` reaches this value.
    pub barrier: Option<T>,
}

impl<T: Real> TwoPointConfig<T> {
    pub fn new(x0: T, y0: T, dt: T, horizon: T) -> Self {
        Self { x0, y0, dt, kappa: T::of(6.0), horizon, eps: Vec::new(), barrier: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoPointOutcome<T> {
    /// Real time at the end of the run (coalescence time if coalesced).
    pub t: T,
    /// Time spent in `D`.
    pub d_time: T,
    /// Time spent off `D`.
    pub out_time: T,
    /// `D`-clock time of the first corner approach `max(|x|,|y|) ≤ 2√dt`.
    pub corner_d_time: Option<T>,
    pub crossings: Vec<u64>,
    pub coalesced: bool,
    pub hit_barrier: bool,
    pub censored: bool,
    pub steps: u64,
    pub max_separation: T,
}

/// Two-point motion of `φ±` with steps that stretch away from every
/// boundary. In `D` the particles take independent Gaussian steps, off `D`
/// a shared one; a step of size `h > dt` is only taken when no boundary is
/// within `kappa·√h`, so near boundaries this is the Euler scheme with step
/// `dt`. Noise comes from the `W⁺` and `W⁻` substreams of `seed`.
pub fn run_two_point<T: Real>(cfg: &TwoPointConfig<T>, seed: u64) -> TwoPointOutcome<T> {
    let mut wp = Substream::new(seed, Label::WPlus);
    let mut wm = Substream::new(seed, Label::WMinus);
    let z = T::zero();
    let (mut x, mut y) = if cfg.x0 <= cfg.y0 { (cfg.x0, cfg.y0) } else { (cfg.y0, cfg.x0) };
    let corner_tol = T::of(2.0) * cfg.dt.sqrt();
    let merge_tol = T::of(crate::flow_pm::MERGE_TOL_REL) * T::one().max(x.abs()).max(y.abs());
    let kappa2 = cfg.kappa * cfg.kappa;
    let emax = cfg.eps.iter().fold(z, |a, &e| a.max(e));
    let mut armed = vec![distance_to_d(x, y) == z; cfg.eps.len()];
    let mut out = TwoPointOutcome {
        t: z,
        d_time: z,
        out_time: z,
        corner_d_time: None,
        crossings: vec![0; cfg.eps.len()],
        coalesced: false,
        hit_barrier: false,
        censored: false,
        steps: 0,
        max_separation: y - x,
    };
    if y - x <= merge_tol {
        out.coalesced = true;
        return out;
    }
    if matches!(cfg.barrier, Some(b) if y - x >= b) {
        out.hit_barrier = true;
        return out;
    }
    loop {
        let remaining = cfg.horizon - out.t;
        if remaining <= z {
            out.censored = true;
            return out;
        }
        out.steps += 1;
        let in_d = Region::D.contains(x, y);
        let mut lim;
        if in_d {
            // nearer axis, and the barrier in separation units
            lim = (-x.min(y)).min(x.max(y));
            if let Some(b) = cfg.barrier {
                lim = lim.min((b - (y - x)) / T::SQRT_2());
            }
        } else {
            let d = distance_to_d(x, y);
            lim = d;
            if d < emax * T::of(1.5) {
                for (e, a) in cfg.eps.iter().zip(&armed) {
                    if *a {
                        lim = lim.min((*e - d).abs());
                    }
                }
            }
        }
        let h = (lim * lim / kappa2).max(cfg.dt).min(remaining);
        let sd = h.sqrt();
        if in_d {
            let a: T = wm.normal();
            let b: T = wp.normal();
            // the non-positive particle follows W⁻
            if x <= z {
                x += sd * a;
                y += sd * b;
            } else {
                x += sd * b;
                y += sd * a;
            }
            out.d_time += h;
            out.t += h;
            if y - x <= merge_tol {
                out.coalesced = true;
                return out;
            }
            if out.corner_d_time.is_none() && x.abs().max(y.abs()) <= corner_tol {
                out.corner_d_time = Some(out.d_time);
            }
            let sep = y - x;
            if sep > out.max_separation {
                out.max_separation = sep;
            }
            if matches!(cfg.barrier, Some(b) if sep >= b) {
                out.hit_barrier = true;
                return out;
            }
        } else {
            let d = if x > z { sd * wp.normal::<T>() } else { sd * wm.normal::<T>() };
            x += d;
            y += d;
            out.out_time += h;
            out.t += h;
        }
        let dist = distance_to_d(x, y);
        for (i, e) in cfg.eps.iter().enumerate() {
            if dist == z {
                armed[i] = true;
            } else if armed[i] && dist >= *e {
                out.crossings[i] += 1;
                armed[i] = false;
            }
        }
    }
}

/// Per-replica quantities entering the Laplace identity.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LaplaceSamples {
    /// `T − T₀`: time spent off `D` before coalescence.
    pub out_time: Vec<f64>,
    /// Local time `L^r` at the corner, with `εN → 2L^r`.
    pub l_r: Vec<f64>,
    /// `T − T₀` with `T₀` read off the corner tolerance instead (replicas
    /// that never came within tolerance are dropped).
    pub out_time_corner: Vec<f64>,
    pub censored: usize,
    pub replicas: usize,
}

/// Collect `T − T₀` and `L^r` from finished runs, using crossing level
/// `eps_index` with step `dt` for the overshoot correction.
pub fn laplace_identity_samples<T: Real>(runs: &[TwoPointOutcome<T>], eps_index: usize, eps: T, dt: T) -> LaplaceSamples {
    let mut s = LaplaceSamples { out_time: Vec::new(), l_r: Vec::new(), out_time_corner: Vec::new(), censored: 0, replicas: runs.len() };
    for r in runs {
        if !r.coalesced {
            s.censored += 1;
            continue;
        }
        s.out_time.push(r.out_time.f64());
        let c = CrossingCount::new(eps, r.crossings[eps_index]);
        s.l_r.push(0.5 * c.corrected(dt).f64());
        if let Some(t0) = r.corner_d_time {
            s.out_time_corner.push((r.t - t0).f64());
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LaplaceComparison {
    pub alpha: f64,
    pub lhs: MCSummary,
    pub rhs: MCSummary,
    pub lhs_corner: MCSummary,
    pub report: TestReport,
}

/// `E e^{−α(T−T₀)}` against `E e^{−2√(2α) L^r}`.
pub fn laplace_compare(s: &LaplaceSamples, alpha: f64) -> LaplaceComparison {
    let lhs: Vec<f64> = s.out_time.iter().map(|&o| (-alpha * o).exp()).collect();
    let k = 2.0 * (2.0 * alpha).sqrt();
    let rhs: Vec<f64> = s.l_r.iter().map(|&l| (-k * l).exp()).collect();
    let corner: Vec<f64> = s.out_time_corner.iter().map(|&o| (-alpha * o).exp()).collect();
    let (a, b) = (mc_summary(&lhs), mc_summary(&rhs));
    let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
    let report = TestReport::within(&format!("laplace_identity_alpha_{alpha}"), "mean difference", a.mean - b.mean, 3.0 * se)
        .with_inputs(serde_json::json!({"alpha": alpha, "n_replicas": s.replicas, "censored": s.censored}));
    LaplaceComparison { alpha, lhs: a, rhs: b, lhs_corner: mc_summary(&corner), report }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ReflectionReport {
    pub elapsed: f64,
    pub qv_b1: f64,
    pub qv_b2: f64,
    pub cross: f64,
    pub tolerance: f64,
    pub pass_qv: bool,
    pub pass_cross: bool,
}

/// Strip the boundary push off a time-changed pair and measure the
/// variations of what is left.
pub fn reflection_decomposition_check<T: Real>(w: &WedgePath<T>) -> ReflectionReport {
    let (b1, b2) = martingale_parts(w);
    let qv = |a: &[T]| a.windows(2).map(|p| (p[1] - p[0]).f64().powi(2)).sum::<f64>();
    let cross = b1.windows(2).zip(b2.windows(2)).map(|(p, q)| ((p[1] - p[0]) * (q[1] - q[0])).f64()).sum::<f64>();
    let t = w.elapsed().f64();
    let tol = 5.0 * w.grid_r.dt.f64().sqrt() * t;
    let (q1, q2) = (qv(&b1), qv(&b2));
    ReflectionReport {
        elapsed: t,
        qv_b1: q1,
        qv_b2: q2,
        cross,
        tolerance: tol,
        pass_qv: (q1 - t).abs() <= tol && (q2 - t).abs() <= tol,
        pass_cross: cross.abs() <= tol,
    }
}

/// `b1 = xr + l_x − l_y − xr[0]`, `b2` likewise.
pub fn martingale_parts<T: Real>(w: &WedgePath<T>) -> (Vec<T>, Vec<T>) {
    if w.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let b1 = (0..w.xr.len()).map(|k| w.xr[k] + w.l_x[k] - w.l_y[k] - w.xr[0]).collect();
    let b2 = (0..w.yr.len()).map(|k| w.yr[k] + w.l_x[k] - w.l_y[k] - w.yr[0]).collect();
    (b1, b2)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CornerReport {
    pub reassembly_exact: bool,
    pub dr_steps: usize,
    pub dplus_steps: usize,
    pub r_increments: usize,
    pub r_ks: Option<TestReport>,
    /// Largest change of `y − x` over a step that starts and ends in `D⁺`.
    pub max_gap_drift: f64,
    /// Largest `|Z − (Z^r + R·(1,1))|` when the pieces are added back.
    pub max_additive_residual: f64,
}

/// Split a `C⁺` two-point path into its `D^r` and `D⁺` pieces and check the
/// pieces against each other.
pub fn corner_decomposition_check<T: Real>(x: &[T], y: &[T], dt: T) -> Result<CornerReport, WedgeError> {
    if x.len() != y.len() || x.is_empty() {
        return Err(WedgeError::LengthMismatch("x and y"));
    }
    let n = x.len() - 1;
    let ind_r: Vec<bool> = (0..n).map(|k| Region::Dr.contains(x[k], y[k])).collect();
    let ind_p: Vec<bool> = ind_r.iter().map(|b| !b).collect();
    let zr = time_change(x, y, &ind_r, dt, Region::Dr)?;
    let zp = time_change(x, y, &ind_p, dt, Region::DPlus)?;

    let mut rx = vec![None; n + 1];
    let mut ry = vec![None; n + 1];
    for piece in [&zr, &zp] {
        for (j, &i) in piece.index_map.iter().enumerate() {
            rx[i] = Some(piece.xr[j]);
            ry[i] = Some(piece.yr[j]);
        }
    }
    let reassembly_exact = (0..=n).all(|k| rx[k] == Some(x[k]) && ry[k] == Some(y[k]));

    let mut incs = Vec::new();
    let mut gap_drift = 0.0f64;
    for &i in &zp.index_map[..zp.index_map.len().saturating_sub(1)] {
        if Region::DPlus.contains(x[i + 1], y[i + 1]) {
            incs.push((x[i + 1].min(y[i + 1]) - x[i].min(y[i])).f64());
            gap_drift = gap_drift.max(((y[i + 1] - x[i + 1]) - (y[i] - x[i])).abs().f64());
        }
    }
    let sd = dt.f64().sqrt();
    let r_ks = if incs.len() >= 50 { Some(ks_test(&incs, |v| normal_cdf(v / sd), 0.01)?) } else { None };

    let mut resid = 0.0f64;
    let mut last_r: Option<(T, T)> = None;
    for k in 0..=n {
        if k < n && ind_r[k] {
            last_r = Some((x[k], y[k]));
        } else if let Some((ax, ay)) = last_r {
            let r = x[k].min(y[k]).max(T::zero());
            let e = (x[k] - ax - r).abs().max((y[k] - ay - r).abs());
            resid = resid.max(e.f64());
        }
    }
    Ok(CornerReport {
        reassembly_exact,
        dr_steps: zr.n_steps(),
        dplus_steps: zp.n_steps(),
        r_increments: incs.len(),
        r_ks,
        max_gap_drift: gap_drift,
        max_additive_residual: resid,
    })
}

/// Discrete Itô residuals of `h(u,v) = (u²+v²)/(2v)` over the steps of a
/// two-point path that start in `D` with `v ≥ v_min`.
///
/// Steps are selected on their starting point only; a step that leaves `D`
/// still counts.
pub fn h_function_residual<T: Real>(x: &[T], y: &[T], dt: T, v_min: f64) -> Result<MCSummary, WedgeError> {
    if x.len() != y.len() {
        return Err(WedgeError::LengthMismatch("x and y"));
    }
    let dt = dt.f64();
    let uv = |k: usize| {
        let (a, b) = (x[k].f64(), y[k].f64());
        ((a + b) / std::f64::consts::SQRT_2, (b - a) / std::f64::consts::SQRT_2)
    };
    let h = |u: f64, v: f64| (u * u + v * v) / (2.0 * v);
    let mut res = Vec::new();
    for k in 0..x.len().saturating_sub(1) {
        if !Region::D.contains(x[k], y[k]) {
            continue;
        }
        let ((u0, v0), (u1, v1)) = (uv(k), uv(k + 1));
        if v0 < v_min || v1 <= 0.0 {
            continue;
        }
        let hu = u0 / v0;
        let hv = 0.5 - u0 * u0 / (2.0 * v0 * v0);
        let lap = 1.0 / v0 + u0 * u0 / (v0 * v0 * v0);
        res.push(h(u1, v1) - h(u0, v0) - hu * (u1 - u0) - hv * (v1 - v0) - 0.5 * lap * dt);
    }
    Ok(mc_summary(&res))
}

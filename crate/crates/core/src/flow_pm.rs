//! The coalescing flow `φ±`: particles above zero follow `W⁺`, particles at or
//! below zero follow `W⁻`, and particles that meet or cross stay together.
//!
//! Classes of coalesced particles are always contiguous index ranges because
//! the flow preserves order, so the partition at any step is recovered from
//! the step at which each adjacent pair merged.

use thiserror::Error;

use crate::noise::{Label, NoiseBundle, TimeGrid};
use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("non-finite input to a flow step")]
    NonFinite,
    #[error("bundle has no {0} stream")]
    MissingStream(Label),
    #[error("initial positions are not sorted")]
    Unsorted,
    #[error("step window {k0}..{k1} outside 0..={n_steps}")]
    BadWindow { k0: usize, k1: usize, n_steps: usize },
    #[error("noise recovery did not converge: outermost images disagree by {gap:e}")]
    GridTooNarrow { gap: f64 },
    #[error("flow map needs at least two points per side")]
    GridTooSmall,
}

/// Relative tolerance for treating two particles as met.
pub const MERGE_TOL_REL: f64 = 1e-12;

/// One Euler step of `dX = 1{X>0} dW⁺ + 1{X≤0} dW⁻`.
pub fn step_pm<T: Real>(x: T, dw_plus: T, dw_minus: T) -> Result<T, FlowError> {
    if !(x.is_finite() && dw_plus.is_finite() && dw_minus.is_finite()) {
        return Err(FlowError::NonFinite);
    }
    Ok(advance_pm(x, dw_plus, dw_minus))
}

#[inline(always)]
pub(crate) fn advance_pm<T: Real>(x: T, dw_plus: T, dw_minus: T) -> T {
    if x > T::zero() {
        x + dw_plus
    } else {
        x + dw_minus
    }
}

pub(crate) fn streams_pm<T: Real>(bundle: &NoiseBundle<T>) -> Result<(&[T], &[T]), FlowError> {
    let p = bundle.get(Label::WPlus).ok_or(FlowError::MissingStream(Label::WPlus))?;
    let m = bundle.get(Label::WMinus).ok_or(FlowError::MissingStream(Label::WMinus))?;
    Ok((p, m))
}

pub fn simulate_one_point_pm<T: Real>(x0: T, bundle: &NoiseBundle<T>) -> Result<Vec<T>, FlowError> {
    let (p, m) = streams_pm(bundle)?;
    if !x0.is_finite() {
        return Err(FlowError::NonFinite);
    }
    let mut path = Vec::with_capacity(p.len() + 1);
    let mut x = x0;
    path.push(x);
    for (&a, &b) in p.iter().zip(m) {
        x = advance_pm(x, a, b);
        path.push(x);
    }
    Ok(path)
}

/// Terminal point of a one-point run with a fixed `W⁺` array and `W⁻` drawn
/// on demand (one draw per step whatever the sign).
#[inline]
pub fn one_point_terminal_pm<T: Real, F: FnMut() -> T>(x0: T, dw_plus: &[T], mut dw_minus: F) -> T {
    let mut x = x0;
    for &a in dw_plus {
        let b = dw_minus();
        x = advance_pm(x, a, b);
    }
    x
}

#[derive(Debug, Clone)]
struct Class<T> {
    lo: usize,
    hi: usize,
    pos: T,
}

/// Merge-on-meet engine shared by the coalescing flows.
pub(crate) struct Coalescer<T> {
    classes: Vec<Class<T>>,
    tol: T,
}

impl<T: Real> Coalescer<T> {
    /// Sorted start; equal neighbours are merged at once. Returns the engine
    /// and the indices `m` whose pair `(m, m+1)` starts merged.
    pub(crate) fn new(x0: &[T]) -> Result<(Self, Vec<usize>), FlowError> {
        if x0.iter().any(|x| !x.is_finite()) {
            return Err(FlowError::NonFinite);
        }
        if x0.windows(2).any(|w| w[1] < w[0]) {
            return Err(FlowError::Unsorted);
        }
        let scale = x0.iter().fold(T::one(), |a, &x| a.max(x.abs()));
        let tol = T::of(MERGE_TOL_REL) * scale;
        let mut classes: Vec<Class<T>> = Vec::with_capacity(x0.len());
        let mut premerged = Vec::new();
        for (i, &x) in x0.iter().enumerate() {
            match classes.last_mut() {
                Some(c) if x - c.pos <= tol => {
                    c.hi = i;
                    premerged.push(i - 1);
                }
                _ => classes.push(Class { lo: i, hi: i, pos: x }),
            }
        }
        Ok((Self { classes, tol }, premerged))
    }

    pub(crate) fn tol(&self) -> T {
        self.tol
    }

    /// Advance every class with `drive(rep, pos)` then merge neighbours that
    /// met or crossed. `on_merge(m)` is told each newly joined adjacent pair
    /// `(m, m+1)`, `on_side(rep)` each class whose side of zero changed.
    #[inline]
    pub(crate) fn step<D, M, S>(&mut self, mut drive: D, mut on_merge: M, mut on_side: S)
    where
        D: FnMut(usize, T) -> T,
        M: FnMut(usize),
        S: FnMut(usize),
    {
        let z = T::zero();
        for c in self.classes.iter_mut() {
            let new = drive(c.lo, c.pos);
            if (c.pos > z) != (new > z) {
                on_side(c.lo);
            }
            c.pos = new;
        }
        let mut w = 0;
        for r in 1..self.classes.len() {
            if self.classes[r].pos - self.classes[w].pos <= self.tol {
                on_merge(self.classes[w].hi);
                self.classes[w].hi = self.classes[r].hi;
            } else {
                w += 1;
                self.classes.swap(w, r);
            }
        }
        if !self.classes.is_empty() {
            self.classes.truncate(w + 1);
        }
    }

    pub(crate) fn write_positions(&self, out: &mut [T]) {
        for c in &self.classes {
            for slot in &mut out[c.lo..=c.hi] {
                *slot = c.pos;
            }
        }
    }
}

/// Trajectories of coupled particles with their coalescence history.
#[derive(Debug, Clone, PartialEq)]
pub struct NPointPath<T> {
    pub grid: TimeGrid<T>,
    /// `positions[i][k]`: particle `i` at step `k`.
    pub positions: Vec<Vec<T>>,
    /// Step from which particles `m` and `m+1` share a class.
    pub adjacent_merge: Vec<Option<usize>>,
    /// `(step, representative)` each time a class changed side of zero
    /// between step-1 and step.
    pub zero_crossings: Vec<(usize, usize)>,
    pub merge_tol: T,
}

impl<T: Real> NPointPath<T> {
    pub fn n_particles(&self) -> usize {
        self.positions.len()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    /// Step at which `i` and `j` first share a class.
    pub fn merge_step(&self, i: usize, j: usize) -> Option<usize> {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        let mut worst = 0;
        for m in a..b {
            worst = worst.max(self.adjacent_merge[m]?);
        }
        Some(worst)
    }

    /// First time `i` and `j` are in the same class, `+∞` if never.
    pub fn coalescence_time(&self, i: usize, j: usize) -> T {
        self.merge_step(i, j).map_or(T::infinity(), |k| self.grid.time(k))
    }

    /// All unordered pairs `(i, j)`, `i < j`, in lexicographic order.
    pub fn coalescence_times(&self) -> Vec<T> {
        let n = self.n_particles();
        let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(self.coalescence_time(i, j));
            }
        }
        out
    }

    /// Class label (lowest member index) of particle `i` at step `k`.
    pub fn class_id(&self, i: usize, k: usize) -> usize {
        let mut lo = i;
        while lo > 0 && matches!(self.adjacent_merge[lo - 1], Some(s) if s <= k) {
            lo -= 1;
        }
        lo
    }

    pub fn path(&self, i: usize) -> &[T] {
        &self.positions[i]
    }

    pub fn terminal(&self) -> Vec<T> {
        self.positions.iter().map(|p| p[p.len() - 1]).collect()
    }
}

/// Run a coalescing n-point motion over steps `k0..k1` of `grid`, with
/// `drive(step, rep, pos)` giving each class's next position.
pub(crate) fn run_coalescing<T, D>(x0: &[T], grid: TimeGrid<T>, k0: usize, k1: usize, mut drive: D) -> Result<NPointPath<T>, FlowError>
where
    T: Real,
    D: FnMut(usize, usize, T) -> T,
{
    let (mut eng, premerged) = Coalescer::new(x0)?;
    let n = x0.len();
    let steps = k1 - k0;
    let mut positions: Vec<Vec<T>> = (0..n).map(|_| Vec::with_capacity(steps + 1)).collect();
    let mut adjacent_merge = vec![None; n.saturating_sub(1)];
    for m in premerged {
        adjacent_merge[m] = Some(0);
    }
    let mut zero_crossings = Vec::new();
    let mut row = vec![T::zero(); n];
    eng.write_positions(&mut row);
    for (p, &x) in positions.iter_mut().zip(&row) {
        p.push(x);
    }
    for k in k0..k1 {
        let local = k - k0 + 1;
        eng.step(
            |rep, pos| drive(k, rep, pos),
            |m| adjacent_merge[m] = Some(local),
            |rep| zero_crossings.push((local, rep)),
        );
        eng.write_positions(&mut row);
        for (p, &x) in positions.iter_mut().zip(&row) {
            p.push(x);
        }
    }
    let sub = TimeGrid { t_start: grid.time(k0), dt: grid.dt, n_steps: steps };
    Ok(NPointPath { grid: sub, positions, adjacent_merge, zero_crossings, merge_tol: eng.tol() })
}

/// Terminal positions only, without recording trajectories.
pub(crate) fn run_coalescing_terminal<T, D>(x0: &[T], k0: usize, k1: usize, mut drive: D) -> Result<Vec<T>, FlowError>
where
    T: Real,
    D: FnMut(usize, usize, T) -> T,
{
    let (mut eng, _) = Coalescer::new(x0)?;
    for k in k0..k1 {
        eng.step(|rep, pos| drive(k, rep, pos), |_| {}, |_| {});
    }
    let mut out = vec![T::zero(); x0.len()];
    eng.write_positions(&mut out);
    Ok(out)
}

fn check_window(k0: usize, k1: usize, n_steps: usize) -> Result<(), FlowError> {
    if k0 > k1 || k1 > n_steps {
        return Err(FlowError::BadWindow { k0, k1, n_steps });
    }
    Ok(())
}

pub fn simulate_n_point_pm<T: Real>(x0: &[T], bundle: &NoiseBundle<T>) -> Result<NPointPath<T>, FlowError> {
    simulate_n_point_pm_window(x0, bundle, 0, bundle.n_steps())
}

/// n-point motion over the steps `k0..k1` of the bundle's grid.
pub fn simulate_n_point_pm_window<T: Real>(x0: &[T], bundle: &NoiseBundle<T>, k0: usize, k1: usize) -> Result<NPointPath<T>, FlowError> {
    let (p, m) = streams_pm(bundle)?;
    check_window(k0, k1, bundle.n_steps())?;
    run_coalescing(x0, bundle.grid, k0, k1, |k, _, x| advance_pm(x, p[k], m[k]))
}

/// Images of a sorted point set under the flow over steps `k0..k1`.
pub fn flow_images_pm<T: Real>(x: &[T], bundle: &NoiseBundle<T>, k0: usize, k1: usize) -> Result<Vec<T>, FlowError> {
    let (p, m) = streams_pm(bundle)?;
    check_window(k0, k1, bundle.n_steps())?;
    run_coalescing_terminal(x, k0, k1, |k, _, x| advance_pm(x, p[k], m[k]))
}

/// Flow map over the whole bundle window, sampled on a sorted grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMapSample<T> {
    pub x_grid: Vec<T>,
    pub images: Vec<T>,
    pub noise_ref: u64,
}

pub fn flow_map_pm<T: Real>(x_grid: &[T], bundle: &NoiseBundle<T>) -> Result<FlowMapSample<T>, FlowError> {
    let images = flow_images_pm(x_grid, bundle, 0, bundle.n_steps())?;
    Ok(FlowMapSample { x_grid: x_grid.to_vec(), images, noise_ref: bundle.seed })
}

/// Read `W⁺` and `W⁻` over the window off the displacement of the outermost
/// points. Fails when the two outermost points on either side disagree,
/// which means the grid did not reach past the noise range.
pub fn recover_noise_pm<T: Real>(sample: &FlowMapSample<T>) -> Result<(T, T), FlowError> {
    let n = sample.x_grid.len();
    if n < 4 {
        return Err(FlowError::GridTooSmall);
    }
    let d = |i: usize| sample.images[i] - sample.x_grid[i];
    let tol_of = |i: usize| T::of(MERGE_TOL_REL) * T::one().max(sample.x_grid[i].abs());
    let (w_plus, w_plus_in) = (d(n - 1), d(n - 2));
    let (w_minus, w_minus_in) = (d(0), d(1));
    let gap_plus = (w_plus - w_plus_in).abs();
    let gap_minus = (w_minus - w_minus_in).abs();
    if gap_plus > tol_of(n - 1) || gap_minus > tol_of(0) {
        return Err(FlowError::GridTooNarrow { gap: gap_plus.max(gap_minus).f64() });
    }
    Ok((w_plus, w_minus))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FlowPropertyReport {
    pub max_abs_deviation: f64,
    pub merge_tol: f64,
    pub pass: bool,
}

/// Compare `φ_{s,t}` with `φ_{u,t} ∘ φ_{s,u}` on `x_grid`, restarting the
/// second leg at the intermediate images. Times are step indices.
pub fn flow_property_check<T: Real>(bundle: &NoiseBundle<T>, s: usize, u: usize, t: usize, x_grid: &[T]) -> Result<FlowPropertyReport, FlowError> {
    if !(s <= u && u <= t) {
        return Err(FlowError::BadWindow { k0: s, k1: t, n_steps: bundle.n_steps() });
    }
    let direct = flow_images_pm(x_grid, bundle, s, t)?;
    let mid = flow_images_pm(x_grid, bundle, s, u)?;
    let composed = flow_images_pm(&mid, bundle, u, t)?;
    let dev = direct.iter().zip(&composed).fold(0.0f64, |a, (x, y)| a.max((*x - *y).abs().f64()));
    let (eng, _) = Coalescer::new(x_grid)?;
    let tol = eng.tol().f64();
    Ok(FlowPropertyReport { max_abs_deviation: dev, merge_tol: tol, pass: dev <= tol })
}

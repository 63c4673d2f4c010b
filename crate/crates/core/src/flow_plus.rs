//! The `C⁺` flows: n-point motions of the kernel flow `K⁺`, kernel estimates
//! by filtering `φ±` on `W⁺`, and the coalescing flow `φ⁺`.
//!
//! On the positive half-line every particle follows `W⁺`. At or below zero a
//! particle follows its own auxiliary motion `AUX(j)`.

use rayon::prelude::*;
use thiserror::Error;

use crate::flow_pm::{advance_pm, one_point_terminal_pm, run_coalescing, FlowError};
use crate::noise::{derive_seed, sample_bundle, Label, NoiseBundle, Substream, TimeGrid};
use crate::verify::{mc_summary, MCSummary, TestReport};
use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum FlowPlusError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("test function is not finite at {0}")]
    NonFiniteValue(f64),
    #[error("inner replica count must be at least 1")]
    NoReplicas,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PlusMode {
    /// Coalesced particles separate once they reach the closed negative side.
    #[serde(rename = "KERNEL_MODE")]
    Kernel,
    /// Particles that meet stay together.
    #[serde(rename = "COALESCING_MODE")]
    Coalescing,
}

/// Labels a `C⁺` bundle needs for `n` particles.
pub fn plus_labels(n: usize) -> Vec<Label> {
    std::iter::once(Label::WPlus).chain((0..n as u32).map(Label::Aux)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlusNPointPath<T> {
    pub grid: TimeGrid<T>,
    pub mode: PlusMode,
    /// `positions[i][k]`.
    pub positions: Vec<Vec<T>>,
    /// `class_ids[k][i]`: lowest index sharing particle `i`'s class.
    pub class_ids: Vec<Vec<u32>>,
}

impl<T: Real> PlusNPointPath<T> {
    pub fn n_particles(&self) -> usize {
        self.positions.len()
    }

    pub fn terminal(&self) -> Vec<T> {
        self.positions.iter().map(|p| p[p.len() - 1]).collect()
    }
}

fn aux_streams<T: Real>(bundle: &NoiseBundle<T>, n: usize) -> Result<(&[T], Vec<&[T]>), FlowError> {
    let wp = bundle.get(Label::WPlus).ok_or(FlowError::MissingStream(Label::WPlus))?;
    let aux = (0..n as u32)
        .map(|j| bundle.get(Label::Aux(j)).ok_or(FlowError::MissingStream(Label::Aux(j))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((wp, aux))
}

pub fn simulate_n_point_plus<T: Real>(x0: &[T], bundle: &NoiseBundle<T>, mode: PlusMode) -> Result<PlusNPointPath<T>, FlowError> {
    let n = x0.len();
    let (wp, aux) = aux_streams(bundle, n)?;
    if x0.iter().any(|x| !x.is_finite()) {
        return Err(FlowError::NonFinite);
    }
    match mode {
        PlusMode::Kernel => Ok(kernel_mode(x0, bundle.grid, wp, &aux)),
        PlusMode::Coalescing => {
            // The coalescer wants sorted input; run it on the sorted order and
            // map back.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| x0[a].partial_cmp(&x0[b]).expect("finite"));
            let sorted: Vec<T> = order.iter().map(|&i| x0[i]).collect();
            let p = run_coalescing(&sorted, bundle.grid, 0, bundle.n_steps(), |k, rep, x| {
                if x > T::zero() {
                    x + wp[k]
                } else {
                    x + aux[order[rep]][k]
                }
            })?;
            let mut positions = vec![Vec::new(); n];
            for (s, &i) in order.iter().enumerate() {
                positions[i] = p.positions[s].clone();
            }
            let class_ids = (0..=bundle.n_steps())
                .map(|k| {
                    let lo: Vec<usize> = (0..n).map(|s| p.class_id(s, k)).collect();
                    let mut label = vec![usize::MAX; n];
                    for s in 0..n {
                        label[lo[s]] = label[lo[s]].min(order[s]);
                    }
                    let mut row = vec![0u32; n];
                    for (s, &i) in order.iter().enumerate() {
                        row[i] = label[lo[s]] as u32;
                    }
                    row
                })
                .collect();
            Ok(PlusNPointPath { grid: bundle.grid, mode, positions, class_ids })
        }
    }
}

fn kernel_mode<T: Real>(x0: &[T], grid: TimeGrid<T>, wp: &[T], aux: &[&[T]]) -> PlusNPointPath<T> {
    let n = x0.len();
    let z = T::zero();
    let mut rep: Vec<usize> = (0..n).map(|i| (0..=i).find(|&j| x0[j] == x0[i]).expect("self")).collect();
    let mut pos = x0.to_vec();
    let mut positions: Vec<Vec<T>> = x0.iter().map(|&x| {
        let mut v = Vec::with_capacity(grid.n_steps + 1);
        v.push(x);
        v
    }).collect();
    let mut class_ids = Vec::with_capacity(grid.n_steps + 1);
    class_ids.push(rep.iter().map(|&r| r as u32).collect::<Vec<_>>());
    let mut split = Vec::new();
    for k in 0..grid.n_steps {
        split.clear();
        for i in 0..n {
            if rep[i] != i {
                continue;
            }
            let x = pos[i];
            let new = if x > z { x + wp[k] } else { x + aux[i][k] };
            pos[i] = new;
            if x > z && new <= z {
                split.push(i);
            }
        }
        for i in 0..n {
            let r = rep[i];
            if r != i {
                pos[i] = pos[r];
            }
        }
        for &r in &split {
            for slot in rep.iter_mut() {
                if *slot == r {
                    *slot = usize::MAX;
                }
            }
        }
        for (i, slot) in rep.iter_mut().enumerate() {
            if *slot == usize::MAX {
                *slot = i;
            }
        }
        for (p, &x) in positions.iter_mut().zip(&pos) {
            p.push(x);
        }
        class_ids.push(rep.iter().map(|&r| r as u32).collect());
    }
    PlusNPointPath { grid, mode: PlusMode::Kernel, positions, class_ids }
}

/// Empirical version of `K⁺_{s,t}(x0, ·)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelEstimate<T> {
    pub x0: T,
    pub window: (T, T),
    pub support: Vec<T>,
    pub weights: Vec<T>,
    pub w_plus_seed: u64,
}

/// Filter `φ±` on a fixed `W⁺`: `m` one-point runs share `w_plus` and draw
/// independent `W⁻` keyed by `(inner_seed, replica)`.
pub fn estimate_kernel_plus<T: Real>(
    x0: T,
    grid: TimeGrid<T>,
    w_plus: &[T],
    w_plus_seed: u64,
    m: usize,
    inner_seed: u64,
) -> Result<KernelEstimate<T>, FlowPlusError> {
    if m == 0 {
        return Err(FlowPlusError::NoReplicas);
    }
    if !x0.is_finite() {
        return Err(FlowError::NonFinite.into());
    }
    let sd = grid.sqrt_dt();
    let support: Vec<T> = (0..m)
        .into_par_iter()
        .map(|r| {
            let mut wm = Substream::new(derive_seed(inner_seed, r as u64), Label::WMinus);
            one_point_terminal_pm(x0, w_plus, || wm.increment(sd))
        })
        .collect();
    let w = T::one() / T::of(m as f64);
    let t_end = grid.t_start + T::of(w_plus.len() as f64) * grid.dt;
    Ok(KernelEstimate { x0, window: (grid.t_start, t_end), support, weights: vec![w; m], w_plus_seed })
}

pub fn kernel_apply<T: Real, F: Fn(T) -> T>(est: &KernelEstimate<T>, f: F) -> Result<T, FlowPlusError> {
    let mut acc = T::zero();
    for (&y, &w) in est.support.iter().zip(&est.weights) {
        let v = f(y);
        if !v.is_finite() {
            return Err(FlowPlusError::NonFiniteValue(y.f64()));
        }
        acc += w * v;
    }
    Ok(acc)
}

/// Unbiased estimate of `(K f)²` from one kernel estimate: the mean of
/// `f(a)f(b)` over distinct support pairs.
pub fn kernel_square<T: Real, F: Fn(T) -> T>(est: &KernelEstimate<T>, f: F) -> Result<T, FlowPlusError> {
    let m = est.support.len();
    if m < 2 {
        return kernel_apply(est, f).map(|v| v * v);
    }
    let mut s = T::zero();
    let mut s2 = T::zero();
    for &y in &est.support {
        let v = f(y);
        if !v.is_finite() {
            return Err(FlowPlusError::NonFiniteValue(y.f64()));
        }
        s += v;
        s2 += v * v;
    }
    let mm = T::of(m as f64);
    Ok((s * s - s2) / (mm * (mm - T::one())))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TwoPointCorrelation {
    pub squared_kernel: MCSummary,
    pub two_point: MCSummary,
    pub report: TestReport,
}

/// `E[(K⁺_{0,t} f(x))²]` from nested kernel estimates and from the kernel-mode
/// two-point motion started at `(x, x)`.
pub fn two_point_correlation_check<F>(
    x: f64,
    horizon: f64,
    dt: f64,
    replicas: usize,
    m: usize,
    seed: u64,
    f: F,
) -> Result<TwoPointCorrelation, FlowPlusError>
where
    F: Fn(f64) -> f64 + Sync,
{
    let grid = crate::noise::make_grid(0.0, horizon, dt).map_err(|_| FlowError::NonFinite)?.grid;
    let a: Vec<f64> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let s = derive_seed(seed, 2 * r as u64);
            let wp = Substream::new(s, Label::WPlus).increments(grid.n_steps, grid.sqrt_dt());
            let est = estimate_kernel_plus(x, grid, &wp, s, m, derive_seed(s, 1))?;
            kernel_square(&est, &f)
        })
        .collect::<Result<_, _>>()?;
    let b: Vec<f64> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let bundle = sample_bundle(grid, &plus_labels(2), derive_seed(seed, 2 * r as u64 + 1)).expect("distinct labels");
            let p = simulate_n_point_plus(&[x, x], &bundle, PlusMode::Kernel)?;
            let t = p.terminal();
            Ok(f(t[0]) * f(t[1]))
        })
        .collect::<Result<_, FlowPlusError>>()?;
    let sa = mc_summary(&a);
    let sb = mc_summary(&b);
    let diff = sa.mean - sb.mean;
    let se = (sa.stderr.powi(2) + sb.stderr.powi(2)).sqrt();
    let report = TestReport::within("two_point_correlation", "mean difference", diff, 3.0 * se)
        .with_inputs(serde_json::json!({"x": x, "horizon": horizon, "dt": dt, "replicas": replicas, "M": m, "seed": seed}));
    Ok(TwoPointCorrelation { squared_kernel: sa, two_point: sb, report })
}

/// Whether `x0 + W⁺` stays strictly positive over the whole array.
pub fn stays_positive<T: Real>(x0: T, w_plus: &[T]) -> bool {
    let mut x = x0;
    if x <= T::zero() {
        return false;
    }
    for &d in w_plus {
        x = advance_pm(x, d, d);
        if x <= T::zero() {
            return false;
        }
    }
    true
}

/// Mean of `f` over kernel-mode one-point motions: a plain check that the
/// one-point motion of `K⁺` is Brownian.
pub fn kernel_mean_summary<F: Fn(f64) -> f64 + Sync>(x0: f64, grid: TimeGrid<f64>, outer: usize, m: usize, seed: u64, f: F) -> Result<MCSummary, FlowPlusError> {
    let vals: Vec<f64> = (0..outer)
        .into_par_iter()
        .map(|r| {
            let s = derive_seed(seed, r as u64);
            let wp = Substream::new(s, Label::WPlus).increments(grid.n_steps, grid.sqrt_dt());
            let est = estimate_kernel_plus(x0, grid, &wp, s, m, derive_seed(s, 1))?;
            kernel_apply(&est, &f)
        })
        .collect::<Result<_, _>>()?;
    Ok(mc_summary(&vals))
}

//! Statistical checks: summaries, Kolmogorov–Smirnov, realized covariation,
//! martingale-problem residuals, the exit probability and coalescence
//! surveys of the two-point motion.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::noise::{derive_seed, CovarianceKind};
use crate::wedge::{run_two_point, TwoPointConfig};
use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum VerifyError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("paths have different lengths")]
    LengthMismatch,
    #[error("test function {0} has no second derivatives")]
    MissingDerivatives(String),
    #[error("test function expects {expected} coordinates, path has {got}")]
    Arity { expected: usize, got: usize },
    #[error("separation {alpha} must lie strictly between 0 and the level {eps}")]
    BadExitLevels { alpha: f64, eps: f64 },
}

/// Sum by recursive halving, so the result depends only on the order of the
/// inputs and rounding error grows like `log n`.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        v.iter().sum()
    } else {
        let (a, b) = v.split_at(v.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MCSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantiles: Option<Vec<(f64, f64)>>,
}

pub fn mc_summary(v: &[f64]) -> MCSummary {
    let n = v.len();
    if n == 0 {
        return MCSummary { n, mean: f64::NAN, std: f64::NAN, stderr: f64::NAN, quantiles: None };
    }
    let mean = pairwise_sum(v) / n as f64;
    let dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    let var = if n > 1 { pairwise_sum(&dev) / (n - 1) as f64 } else { 0.0 };
    let std = var.sqrt();
    MCSummary { n, mean, std, stderr: std / (n as f64).sqrt(), quantiles: None }
}

/// Summary with empirical quantiles at the given probabilities.
pub fn mc_summary_quantiles(v: &[f64], probs: &[f64]) -> MCSummary {
    let mut s = mc_summary(v);
    if !v.is_empty() {
        let mut sorted = v.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = probs
            .iter()
            .map(|&p| {
                let i = ((p * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1);
                (p, sorted[i])
            })
            .collect();
        s.quantiles = Some(q);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport {
    pub name: String,
    pub statistic: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// How `pass` follows from `value` and `tolerance`.
    pub rule: String,
    pub inputs: serde_json::Value,
}

impl TestReport {
    /// Pass iff `|value| ≤ tolerance`.
    pub fn within(name: &str, statistic: &str, value: f64, tolerance: f64) -> Self {
        Self::build(name, statistic, value, tolerance, value.abs() <= tolerance, "|value| <= tolerance")
    }

    /// Pass iff `value ≥ threshold`.
    pub fn at_least(name: &str, statistic: &str, value: f64, threshold: f64) -> Self {
        Self::build(name, statistic, value, threshold, value >= threshold, "value >= tolerance")
    }

    /// Pass iff `value > threshold` (negative controls).
    pub fn exceeds(name: &str, statistic: &str, value: f64, threshold: f64) -> Self {
        Self::build(name, statistic, value, threshold, value.abs() > threshold, "|value| > tolerance")
    }

    fn build(name: &str, statistic: &str, value: f64, tolerance: f64, pass: bool, rule: &str) -> Self {
        Self {
            name: name.to_string(),
            statistic: statistic.to_string(),
            value,
            tolerance,
            pass,
            rule: rule.to_string(),
            inputs: serde_json::Value::Null,
        }
    }

    pub fn with_inputs(mut self, inputs: serde_json::Value) -> Self {
        self.inputs = inputs;
        self
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // theta-function form, fast for small λ
        let c = (2.0 * std::f64::consts::PI).sqrt() / lambda;
        let q = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (1..=20).map(|k| ((2 * k - 1) as f64).powi(2)).map(|m| (q * m).exp()).sum();
        return (1.0 - c * s).clamp(0.0, 1.0);
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

fn stephens(n: usize) -> f64 {
    let r = (n as f64).sqrt();
    r + 0.12 + 0.11 / r
}

/// One-sample Kolmogorov–Smirnov test at significance `level`. The report's
/// value is the statistic `D` and its tolerance the critical value.
pub fn ks_test<F: Fn(f64) -> f64>(samples: &[f64], cdf: F, level: f64) -> Result<TestReport, VerifyError> {
    let n = samples.len();
    if n < 50 {
        return Err(VerifyError::TooFewSamples { need: 50, got: n });
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut d = 0.0f64;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / nf).max((i + 1) as f64 / nf - f);
    }
    let (mut lo, mut hi) = (0.2, 4.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if kolmogorov_survival(mid) > level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let crit = hi / stephens(n);
    let p = kolmogorov_survival(stephens(n) * d);
    Ok(TestReport::build("ks", "D", d, crit, d <= crit, "value <= tolerance").with_inputs(serde_json::json!({"n": n, "level": level, "p_value": p})))
}

/// Running `Σ Δa Δb` with a leading zero.
pub fn realized_covariation<T: Real>(a: &[T], b: &[T]) -> Result<Vec<T>, VerifyError> {
    if a.len() != b.len() {
        return Err(VerifyError::LengthMismatch);
    }
    let mut out = Vec::with_capacity(a.len());
    let mut acc = T::zero();
    if !a.is_empty() {
        out.push(acc);
    }
    for k in 1..a.len() {
        acc += (a[k] - a[k - 1]) * (b[k] - b[k - 1]);
        out.push(acc);
    }
    Ok(out)
}

/// Realized covariation and elapsed time split by the value of `C` at the
/// start of each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassCovariation {
    pub cov_c1: f64,
    pub time_c1: f64,
    pub cov_c0: f64,
    pub time_c0: f64,
}

impl ClassCovariation {
    /// Largest `|covariation − C·elapsed|` over the two classes.
    pub fn max_deviation(&self) -> f64 {
        (self.cov_c1 - self.time_c1).abs().max(self.cov_c0.abs())
    }
}

pub fn covariation_by_class<T: Real>(a: &[T], b: &[T], dt: T, cov: CovarianceKind) -> Result<ClassCovariation, VerifyError> {
    if a.len() != b.len() {
        return Err(VerifyError::LengthMismatch);
    }
    let mut c = ClassCovariation { cov_c1: 0.0, time_c1: 0.0, cov_c0: 0.0, time_c0: 0.0 };
    let dt = dt.f64();
    for k in 1..a.len() {
        let p = ((a[k] - a[k - 1]) * (b[k] - b[k - 1])).f64();
        if cov.eval(a[k - 1], b[k - 1]) == T::one() {
            c.cov_c1 += p;
            c.time_c1 += dt;
        } else {
            c.cov_c0 += p;
            c.time_c0 += dt;
        }
    }
    Ok(c)
}

type Field = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type Hessian = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A smooth function of `n` coordinates with its Hessian in closed form.
pub struct TestFunction {
    pub name: String,
    pub arity: usize,
    pub value: Field,
    /// Fills a row-major `n × n` matrix.
    pub hessian: Option<Hessian>,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TestFunction").field("name", &self.name).field("arity", &self.arity).finish()
    }
}

impl TestFunction {
    pub fn new(name: &str, arity: usize, value: Field, hessian: Option<Hessian>) -> Self {
        Self { name: name.to_string(), arity, value, hessian }
    }
}

/// Four Gaussian-type test functions on `ℝⁿ`: a centred tensor bump, a
/// shifted narrow tensor bump, a sum of one-dimensional bumps and a ridge
/// bump in the coordinate sum.
pub fn test_function_library(n: usize) -> Vec<TestFunction> {
    let tensor = |name: &str, c: f64, s2: f64| {
        let v = move |x: &[f64]| x.iter().map(|&xi| (-(xi - c).powi(2) / (2.0 * s2)).exp()).product::<f64>();
        let h = move |x: &[f64], out: &mut [f64]| {
            let n = x.len();
            let g = v(x);
            for i in 0..n {
                let di = -(x[i] - c) / s2;
                for j in 0..n {
                    out[i * n + j] = if i == j {
                        g * (di * di - 1.0 / s2)
                    } else {
                        g * di * (-(x[j] - c) / s2)
                    };
                }
            }
        };
        TestFunction::new(name, n, Box::new(v), Some(Box::new(h)))
    };
    let sum_bump = {
        let c = -0.3;
        let v = move |x: &[f64]| x.iter().map(|&xi| (-(xi - c).powi(2)).exp()).sum::<f64>();
        let h = move |x: &[f64], out: &mut [f64]| {
            let n = x.len();
            out.iter_mut().for_each(|o| *o = 0.0);
            for i in 0..n {
                let u = x[i] - c;
                out[i * n + i] = (4.0 * u * u - 2.0) * (-u * u).exp();
            }
        };
        TestFunction::new("sum_bump", n, Box::new(v), Some(Box::new(h)))
    };
    let ridge = {
        let v = |x: &[f64]| {
            let s: f64 = x.iter().sum();
            (-0.5 * s * s).exp()
        };
        let h = |x: &[f64], out: &mut [f64]| {
            let s: f64 = x.iter().sum();
            let d2 = (s * s - 1.0) * (-0.5 * s * s).exp();
            out.iter_mut().for_each(|o| *o = d2);
        };
        TestFunction::new("ridge_bump", n, Box::new(v), Some(Box::new(h)))
    };
    vec![tensor("tensor_bump", 0.0, 1.0), tensor("narrow_bump", 0.5, 0.25), sum_bump, ridge]
}

/// Generator `½Δ + Σ_{i<j} C(x_i,x_j) ∂²_{ij}` from a Hessian.
fn generator<T: Real>(x: &[T], hess: &[f64], cov: CovarianceKind) -> f64 {
    let n = x.len();
    let mut a = 0.0;
    for i in 0..n {
        a += 0.5 * hess[i * n + i];
        for j in i + 1..n {
            a += cov.eval(x[i], x[j]).f64() * hess[i * n + j];
        }
    }
    a
}

/// `f(X_t) − f(X_0) − Σ_k A f(X_k)·dt` along one path (`positions[i][k]`).
pub fn path_residual<T: Real>(positions: &[Vec<T>], dt: T, f: &TestFunction, cov: CovarianceKind) -> Result<f64, VerifyError> {
    let hess = f.hessian.as_ref().ok_or_else(|| VerifyError::MissingDerivatives(f.name.clone()))?;
    let n = positions.len();
    if n != f.arity {
        return Err(VerifyError::Arity { expected: f.arity, got: n });
    }
    let len = positions.first().map_or(0, |p| p.len());
    if positions.iter().any(|p| p.len() != len) {
        return Err(VerifyError::LengthMismatch);
    }
    if len == 0 {
        return Ok(0.0);
    }
    let mut x = vec![T::zero(); n];
    let mut xf = vec![0.0; n];
    let mut h = vec![0.0; n * n];
    let mut drift = Vec::with_capacity(len - 1);
    for k in 0..len - 1 {
        for i in 0..n {
            x[i] = positions[i][k];
            xf[i] = x[i].f64();
        }
        hess(&xf, &mut h);
        drift.push(generator(&x, &h, cov));
    }
    let at = |k: usize| positions.iter().map(|p| p[k].f64()).collect::<Vec<_>>();
    Ok((f.value)(&at(len - 1)) - (f.value)(&at(0)) - pairwise_sum(&drift) * dt.f64())
}

/// Residual summary over many paths; a solution of the martingale problem
/// has mean zero.
pub fn martingale_residual<T: Real>(paths: &[Vec<Vec<T>>], dt: T, f: &TestFunction, cov: CovarianceKind) -> Result<MCSummary, VerifyError> {
    let r = paths.iter().map(|p| path_residual(p, dt, f, cov)).collect::<Result<Vec<_>, _>>()?;
    Ok(mc_summary(&r))
}

/// Probability that the separation of a `φ±` pair started at `(−α/2, α/2)`
/// reaches `eps` before the pair coalesces, against `α/eps`.
pub fn exit_probability_check(alpha: f64, eps: f64, replicas: usize, dt: f64, seed: u64) -> Result<TestReport, VerifyError> {
    if !(alpha > 0.0 && alpha < eps) {
        return Err(VerifyError::BadExitLevels { alpha, eps });
    }
    let mut cfg = TwoPointConfig::new(-alpha / 2.0, alpha / 2.0, dt, 1e6);
    cfg.barrier = Some(eps);
    let hits: Vec<(bool, bool)> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let o = run_two_point(&cfg, derive_seed(seed, r as u64));
            (o.hit_barrier, o.censored)
        })
        .collect();
    let censored = hits.iter().filter(|h| h.1).count();
    let p: Vec<f64> = hits.iter().map(|h| if h.0 { 1.0 } else { 0.0 }).collect();
    let s = mc_summary(&p);
    let target = alpha / eps;
    let se = (target * (1.0 - target) / replicas as f64).sqrt().max(s.stderr);
    Ok(TestReport::within(&format!("exit_probability_{alpha}_{eps}"), "p_hat - alpha/eps", s.mean - target, 3.0 * se).with_inputs(serde_json::json!({
        "alpha": alpha, "eps": eps, "replicas": replicas, "dt": dt, "seed": seed,
        "p_hat": s.mean, "target": target, "censored": censored
    })))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurveyRow {
    pub x: f64,
    pub y: f64,
    pub horizon: f64,
    pub p_coalesced: f64,
    pub stderr: f64,
    pub censored_fraction: f64,
}

/// Empirical `P(T ≤ h)` for each pair and horizon, from runs to the largest
/// horizon.
pub fn coalescence_survey(pairs: &[(f64, f64)], horizons: &[f64], replicas: usize, dt: f64, seed: u64) -> Vec<SurveyRow> {
    let hmax = horizons.iter().copied().fold(0.0, f64::max);
    let mut rows = Vec::new();
    for (pi, &(x, y)) in pairs.iter().enumerate() {
        let cfg = TwoPointConfig::new(x, y, dt, hmax);
        let times: Vec<Option<f64>> = (0..replicas)
            .into_par_iter()
            .map(|r| {
                let o = run_two_point(&cfg, derive_seed(derive_seed(seed, pi as u64), r as u64));
                o.coalesced.then_some(o.t)
            })
            .collect();
        for &h in horizons {
            let ind: Vec<f64> = times.iter().map(|t| matches!(t, Some(t) if *t <= h) as u8 as f64).collect();
            let s = mc_summary(&ind);
            rows.push(SurveyRow { x, y, horizon: h, p_coalesced: s.mean, stderr: s.stderr, censored_fraction: 1.0 - s.mean });
        }
    }
    rows
}

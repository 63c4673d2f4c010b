//! Wiener chaos expansion of the kernel flow: the heat semigroup by exact
//! Gaussian quadrature of piecewise-linear functions, and the levels `Jⁿ`
//! computed by a backward sweep over the time grid.
//!
//! With `Ψᵏ_r` the level-`k` functional of the window `[u_r, t]`, one step
//! of the sweep is
//!
//! ```text
//! Ψᵏ_r = P_dt Ψᵏ_{r+1} + Σ_i e_i · (P_dt Ψᵏ⁻¹_{r+1})' · ΔWⁱ_r
//! ```
//!
//! which unrolls to the left-point iterated sums over strictly increasing
//! times. Distinct levels are therefore exactly orthogonal and every level
//! above zero is exactly centred, for any step size.

use thiserror::Error;

use crate::verify::normal_cdf;
use crate::{CovarianceKind, Real};

#[derive(Debug, Error, PartialEq)]
pub enum ChaosError {
    #[error("heat time must be non-negative, got {0}")]
    NegativeTime(f64),
    #[error("derivative of the heat flow needs a positive time, got {0}")]
    ZeroTime(f64),
    #[error("grid needs at least two nodes, positive spacing and finite values")]
    BadGrid,
    #[error("level {level} exceeds the truncation order {n_max}")]
    LevelTooHigh { level: usize, n_max: usize },
    #[error("noise streams have different lengths")]
    LengthMismatch,
    #[error("window ({0}, {1}) is empty or reversed")]
    BadWindow(f64, f64),
}

/// Values on the uniform nodes `x_min + i·h`, linearly interpolated between
/// nodes and held constant beyond the end nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionGrid<T> {
    pub x_min: T,
    pub h: T,
    pub values: Vec<T>,
}

impl<T: Real> FunctionGrid<T> {
    pub fn new(x_min: T, h: T, values: Vec<T>) -> Result<Self, ChaosError> {
        if values.len() < 2 || !(h > T::zero()) || !x_min.is_finite() || values.iter().any(|v| !v.is_finite()) {
            return Err(ChaosError::BadGrid);
        }
        Ok(Self { x_min, h, values })
    }

    /// Sample `f` on `n_nodes` nodes spanning `[x_min, x_max]`.
    pub fn from_fn<F: Fn(T) -> T>(x_min: T, x_max: T, n_nodes: usize, f: F) -> Result<Self, ChaosError> {
        if n_nodes < 2 || !(x_max > x_min) {
            return Err(ChaosError::BadGrid);
        }
        let h = (x_max - x_min) / T::of((n_nodes - 1) as f64);
        let values = (0..n_nodes).map(|i| f(x_min + T::of(i as f64) * h)).collect();
        Self::new(x_min, h, values)
    }

    /// `[−8√t, 8√t]` with `2¹² + 1` nodes.
    pub fn default_for<F: Fn(T) -> T>(t_total: T, f: F) -> Result<Self, ChaosError> {
        let x = T::of(8.0) * t_total.sqrt();
        Self::from_fn(-x, x, 4097, f)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn node(&self, i: usize) -> T {
        self.x_min + T::of(i as f64) * self.h
    }

    pub fn x_max(&self) -> T {
        self.node(self.len() - 1)
    }

    /// Interpolated value and whether `x` fell outside the node range.
    pub fn eval(&self, x: T) -> (T, bool) {
        let n = self.len();
        let u = (x - self.x_min) / self.h;
        if !(u >= T::zero()) {
            return (self.values[0], true);
        }
        if u >= T::of((n - 1) as f64) {
            return (self.values[n - 1], u > T::of((n - 1) as f64));
        }
        let i = u.floor().to_usize().unwrap_or(0).min(n - 2);
        let w = u - T::of(i as f64);
        (self.values[i] + w * (self.values[i + 1] - self.values[i]), false)
    }

    pub fn value(&self, x: T) -> T {
        self.eval(x).0
    }

    fn with_values(&self, values: Vec<T>) -> Self {
        Self { x_min: self.x_min, h: self.h, values }
    }

    fn same_nodes(&self, other: &Self) -> bool {
        self.x_min == other.x_min && self.h == other.h && self.len() == other.len()
    }

    /// Trapezoid rule over the node range.
    pub fn integral(&self) -> T {
        let n = self.len();
        let inner: T = self.values[1..n - 1].iter().copied().sum();
        self.h * (inner + T::of(0.5) * (self.values[0] + self.values[n - 1]))
    }
}

fn gauss(u: f64, s: f64) -> f64 {
    (-0.5 * (u / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}

/// `Φ(a) − Φ(b)`, taken in the tail where both arguments are positive.
fn cdf_diff(a: f64, b: f64) -> f64 {
    if a > 0.0 && b > 0.0 {
        normal_cdf(-b) - normal_cdf(-a)
    } else {
        normal_cdf(a) - normal_cdf(b)
    }
}

/// Gaussian weights of the two halves of a unit hat function at offsets
/// `m·h`, `|m| ≤ half`, for the convolution or its spatial derivative.
struct HeatKernel<T> {
    half: usize,
    left: Vec<T>,
    right: Vec<T>,
    full: Vec<T>,
    sigma: f64,
    derivative: bool,
}

impl<T: Real> HeatKernel<T> {
    fn new(h: f64, tau: f64, derivative: bool) -> Self {
        // a hat of width h carries variance h²/6 of its own; take it off the
        // kernel so repeated steps do not pile up numerical diffusion
        let var = if tau > h * h / 3.0 { tau - h * h / 6.0 } else { tau };
        let s = var.sqrt();
        let half = (9.0 * s / h).ceil() as usize + 1;
        let mut left = Vec::with_capacity(2 * half + 1);
        let mut right = Vec::with_capacity(2 * half + 1);
        // ∫_lo^hi φ(d−y)dy and ∫_lo^hi y φ(d−y)dy, or their d-derivatives
        let seg = |d: f64, lo: f64, hi: f64| -> (f64, f64) {
            let i0 = cdf_diff((d - lo) / s, (d - hi) / s);
            let (gl, gh) = (gauss(d - lo, s), gauss(d - hi, s));
            if derivative {
                (gl - gh, i0 + lo * gl - hi * gh)
            } else {
                (i0, d * i0 + var * (gl - gh))
            }
        };
        for m in -(half as isize)..=half as isize {
            let d = m as f64 * h;
            let (a0, a1) = seg(d, -h, 0.0);
            let (b0, b1) = seg(d, 0.0, h);
            left.push(a0 + a1 / h);
            right.push(b0 - b1 / h);
        }
        let full = left.iter().zip(&right).map(|(a, b)| T::of(a + b)).collect();
        let left = left.into_iter().map(T::of).collect();
        let right = right.into_iter().map(T::of).collect();
        Self { half, left, right, full, sigma: s, derivative }
    }

    fn apply(&self, f: &FunctionGrid<T>) -> Vec<T> {
        let n = f.len();
        let m = self.half as isize;
        let h = f.h.f64();
        let (f0, fl) = (f.values[0], f.values[n - 1]);
        let last = (n - 1) as isize;
        (0..n as isize)
            .map(|i| {
                let lo = (i - m).max(0);
                let hi = (i + m).min(last);
                let mut acc = T::zero();
                for j in lo..=hi {
                    acc += f.values[j as usize] * self.full[(i - j + m) as usize];
                }
                // the outer halves of the end hats are replaced by constant tails
                if i <= m {
                    acc -= f0 * self.left[(i + m) as usize];
                }
                if last - i <= m {
                    acc -= fl * self.right[(i - last + m) as usize];
                }
                let (da, db) = (i as f64 * h, (last - i) as f64 * h);
                if da.min(db) > 10.0 * self.sigma {
                    return acc;
                }
                let tails = if self.derivative {
                    -f0.f64() * gauss(da, self.sigma) + fl.f64() * gauss(db, self.sigma)
                } else {
                    f0.f64() * normal_cdf(-da / self.sigma) + fl.f64() * normal_cdf(-db / self.sigma)
                };
                acc + T::of(tails)
            })
            .collect()
    }
}

/// `P_τ f` at the nodes.
pub fn heat_apply<T: Real>(f: &FunctionGrid<T>, tau: T) -> Result<FunctionGrid<T>, ChaosError> {
    if !(tau >= T::zero()) {
        return Err(ChaosError::NegativeTime(tau.f64()));
    }
    if tau == T::zero() {
        return Ok(f.clone());
    }
    Ok(f.with_values(HeatKernel::new(f.h.f64(), tau.f64(), false).apply(f)))
}

/// `(P_τ f)'` at the nodes, by convolution with the derivative of the kernel.
pub fn heat_derivative<T: Real>(f: &FunctionGrid<T>, tau: T) -> Result<FunctionGrid<T>, ChaosError> {
    if !(tau > T::zero()) {
        return Err(ChaosError::ZeroTime(tau.f64()));
    }
    Ok(f.with_values(HeatKernel::new(f.h.f64(), tau.f64(), true).apply(f)))
}

/// Noise driving the expansion: `W⁺` alone for `C⁺`, or `W⁺` and `W⁻` for
/// `C±`. Increments are on a uniform grid over the window.
#[derive(Debug, Clone, Copy)]
pub enum ChaosNoise<'a, T> {
    Plus(&'a [T]),
    Pm { w_plus: &'a [T], w_minus: &'a [T] },
}

impl<T: Real> ChaosNoise<'_, T> {
    pub fn covariance(&self) -> CovarianceKind {
        match self {
            Self::Plus(_) => CovarianceKind::CPlus,
            Self::Pm { .. } => CovarianceKind::CPm,
        }
    }

    fn n_steps(&self) -> Result<usize, ChaosError> {
        match self {
            Self::Plus(w) => Ok(w.len()),
            Self::Pm { w_plus, w_minus } if w_plus.len() == w_minus.len() => Ok(w_plus.len()),
            Self::Pm { .. } => Err(ChaosError::LengthMismatch),
        }
    }

    /// Basis elements on the nodes with their increment streams.
    fn basis(&self, g: &FunctionGrid<T>) -> Vec<(Vec<T>, &[T])> {
        let pos: Vec<T> = (0..g.len()).map(|i| if g.node(i) > T::zero() { T::one() } else { T::zero() }).collect();
        match *self {
            Self::Plus(w) => vec![(pos, w)],
            Self::Pm { w_plus, w_minus } => {
                let neg = pos.iter().map(|&p| T::one() - p).collect();
                vec![(pos, w_plus), (neg, w_minus)]
            }
        }
    }
}

/// The functions `x ↦ Jⁿ_{s,t} f(x)` for `n ≤ n_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChaosStack<T> {
    pub window: (T, T),
    pub n_max: usize,
    pub levels: Vec<FunctionGrid<T>>,
}

impl<T: Real> ChaosStack<T> {
    pub fn term(&self, level: usize, x: T) -> Result<T, ChaosError> {
        self.levels
            .get(level)
            .map(|g| g.value(x))
            .ok_or(ChaosError::LevelTooHigh { level, n_max: self.n_max })
    }

    /// Whether `x` lies outside the spatial grid.
    pub fn clamped(&self, x: T) -> bool {
        self.levels[0].eval(x).1
    }
}

/// Run the backward sweep for all levels up to `n_max`.
pub fn chaos_stack<T: Real>(f: &FunctionGrid<T>, window: (T, T), n_max: usize, noise: ChaosNoise<'_, T>) -> Result<ChaosStack<T>, ChaosError> {
    let (s, t) = window;
    if !(t > s) {
        return Err(ChaosError::BadWindow(s.f64(), t.f64()));
    }
    let n = noise.n_steps()?;
    if n == 0 {
        return Err(ChaosError::BadWindow(s.f64(), t.f64()));
    }
    let dt = ((t - s) / T::of(n as f64)).f64();
    let h = f.h.f64();
    let value_k = HeatKernel::<T>::new(h, dt, false);
    let deriv_k = HeatKernel::<T>::new(h, dt, true);
    let basis = noise.basis(f);
    let mut psi: Vec<FunctionGrid<T>> = (0..=n_max)
        .map(|k| if k == 0 { f.clone() } else { f.with_values(vec![T::zero(); f.len()]) })
        .collect();
    for r in (0..n).rev() {
        let derivs: Vec<Vec<T>> = psi[..n_max].iter().map(|g| deriv_k.apply(g)).collect();
        for k in 0..=n_max {
            let mut v = value_k.apply(&psi[k]);
            if k > 0 {
                for (e, w) in &basis {
                    let dw = w[r];
                    for ((vi, &ei), &di) in v.iter_mut().zip(e).zip(&derivs[k - 1]) {
                        *vi += ei * di * dw;
                    }
                }
            }
            psi[k].values = v;
        }
    }
    Ok(ChaosStack { window, n_max, levels: psi })
}

/// `Jⁿ_{s,t} f(x)`.
pub fn chaos_term<T: Real>(f: &FunctionGrid<T>, window: (T, T), level: usize, noise: ChaosNoise<'_, T>, x: T) -> Result<T, ChaosError> {
    chaos_stack(f, window, level, noise)?.term(level, x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChaosSum<T> {
    pub value: T,
    /// `Jⁿ_{s,t} f(x)` for each level.
    pub levels: Vec<T>,
    pub clamped: bool,
}

/// `Σ_{n ≤ n_max} Jⁿ_{s,t} f(x)` with the individual levels.
pub fn chaos_sum<T: Real>(f: &FunctionGrid<T>, window: (T, T), n_max: usize, noise: ChaosNoise<'_, T>, x: T) -> Result<ChaosSum<T>, ChaosError> {
    let st = chaos_stack(f, window, n_max, noise)?;
    let levels: Vec<T> = st.levels.iter().map(|g| g.value(x)).collect();
    Ok(ChaosSum { value: levels.iter().copied().sum(), levels, clamped: st.clamped(x) })
}

/// Sum of two functions on the same nodes.
pub fn add_grids<T: Real>(a: &FunctionGrid<T>, b: &FunctionGrid<T>) -> Result<FunctionGrid<T>, ChaosError> {
    if !a.same_nodes(b) {
        return Err(ChaosError::BadGrid);
    }
    Ok(a.with_values(a.values.iter().zip(&b.values).map(|(&x, &y)| x + y).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(f: impl Fn(f64) -> f64) -> FunctionGrid<f64> {
        FunctionGrid::default_for(1.0, f).unwrap()
    }

    fn density(x: f64, v: f64) -> f64 {
        (-x * x / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    }

    #[test]
    fn indicator_is_half_at_zero() {
        let g = grid(|x| if x > 0.0 { 1.0 } else if x == 0.0 { 0.5 } else { 0.0 });
        for tau in [0.01, 0.3, 1.0] {
            let p = heat_apply(&g, tau).unwrap();
            assert!((p.value(0.0) - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_function_preserved_inside() {
        let g = FunctionGrid::from_fn(-20.0f64, 20.0, 2001, |x| x).unwrap();
        let p = heat_apply(&g, 1.0).unwrap();
        for i in 0..g.len() {
            let x = g.node(i);
            if x.abs() < 10.0 {
                assert!((p.values[i] - x).abs() < 1e-8, "{x}: {}", p.values[i]);
            }
        }
    }

    #[test]
    fn gaussian_convolution() {
        let g = grid(|x| density(x, 0.5));
        let p = heat_apply(&g, 0.7).unwrap();
        let err = (0..g.len()).map(|i| (p.values[i] - density(g.node(i), 1.2)).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn derivative_of_indicator_is_density() {
        let g = grid(|x| if x > 0.0 { 1.0 } else if x == 0.0 { 0.5 } else { 0.0 });
        let d = heat_derivative(&g, 0.5).unwrap();
        for x in [-0.5, 0.0, 1.0] {
            assert!((d.value(x) - density(x, 0.5)).abs() < 1e-5);
        }
        assert!((d.integral() - 1.0).abs() < 1e-6);
        let c = heat_derivative(&grid(|_| 2.5), 0.5).unwrap();
        assert!(c.values.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn semigroup() {
        let g = grid(|x| (-x * x).exp() * (3.0 * x).cos());
        let ab = heat_apply(&heat_apply(&g, 0.2).unwrap(), 0.3).unwrap();
        let c = heat_apply(&g, 0.5).unwrap();
        let err = ab.values.iter().zip(&c.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 2e-6, "{err}");
    }

    #[test]
    fn errors() {
        let g = grid(|x| x);
        assert_eq!(heat_apply(&g, -1.0), Err(ChaosError::NegativeTime(-1.0)));
        assert_eq!(heat_apply(&g, 0.0).unwrap(), g);
        assert_eq!(heat_derivative(&g, 0.0), Err(ChaosError::ZeroTime(0.0)));
        let w = [0.1, -0.2];
        let st = chaos_stack(&g, (0.0, 1.0), 1, ChaosNoise::Plus(&w[..])).unwrap();
        assert_eq!(st.term(2, 0.0), Err(ChaosError::LevelTooHigh { level: 2, n_max: 1 }));
        let pm = ChaosNoise::Pm { w_plus: &w[..], w_minus: &w[..1] };
        assert_eq!(chaos_stack(&g, (0.0, 1.0), 1, pm).unwrap_err(), ChaosError::LengthMismatch);
        assert!(FunctionGrid::new(0.0, 0.1, vec![1.0]).is_err());
    }

    #[test]
    fn clamp_flag() {
        let g = FunctionGrid::from_fn(-1.0, 1.0, 3, |x| x).unwrap();
        assert_eq!(g.eval(0.5), (0.5, false));
        assert_eq!(g.eval(2.0), (1.0, true));
        assert_eq!(g.eval(-2.0), (-1.0, true));
        assert_eq!(g.eval(1.0), (1.0, false));
    }

    #[test]
    fn level_zero_is_heat_flow() {
        let g = FunctionGrid::from_fn(-6.0, 6.0, 481, |x: f64| (-x * x / 2.0).exp()).unwrap();
        let w = [0.3, -0.1, 0.2, 0.05];
        let s = chaos_sum(&g, (0.0, 1.0), 0, ChaosNoise::Plus(&w[..]), 0.5).unwrap();
        let exact = (-0.25f64 / 2.0 / 2.0).exp() / 2f64.sqrt();
        assert!((s.value - exact).abs() < 1e-4);
        // level one is linear in the noise
        let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let a = chaos_term(&g, (0.0, 1.0), 1, ChaosNoise::Plus(&w[..]), 0.5).unwrap();
        let b = chaos_term(&g, (0.0, 1.0), 1, ChaosNoise::Plus(&w2[..]), 0.5).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn pm_levels_sum_to_heat_flow_of_first_order_map() {
        // for C± the exact kernel is a Dirac mass; the sum over levels should
        // approach f(x + W) when the particle stays on one side
        let g = FunctionGrid::from_fn(-6.0, 6.0, 961, |x: f64| (-x * x / 2.0).exp()).unwrap();
        let wp = vec![0.01; 50];
        let wm = vec![-0.01; 50];
        let s = chaos_sum(&g, (0.0, 0.05), 6, ChaosNoise::Pm { w_plus: &wp, w_minus: &wm }, 2.0).unwrap();
        assert!((s.value - (-2.5f64 * 2.5 / 2.0).exp()).abs() < 0.02, "{}", s.value);
        assert_eq!(ChaosNoise::Pm { w_plus: &wp[..], w_minus: &wm[..] }.covariance(), CovarianceKind::CPm);
    }
}

//! Seeded Gaussian increment streams on uniform time grids.
//!
//! Each stream label owns an independent ChaCha8 stream selected from the
//! seed's key space, so adding or removing a label never changes the draws of
//! another label.

use std::io::{self, Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("grid bounds must be finite")]
    NonFiniteBounds,
    #[error("grid end {t_end} precedes start {t_start}")]
    ReversedBounds { t_start: f64, t_end: f64 },
    #[error("label {0} requested twice")]
    DuplicateLabel(Label),
    #[error("bundle dump is malformed: {0}")]
    BadDump(&'static str),
}

/// Uniform grid `t_start + k·dt` for `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<T> {
    pub t_start: T,
    pub dt: T,
    pub n_steps: usize,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(t_start: T, dt: T, n_steps: usize) -> Result<Self, NoiseError> {
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(NoiseError::NonPositiveDt(dt.f64()));
        }
        if !t_start.is_finite() {
            return Err(NoiseError::NonFiniteBounds);
        }
        Ok(Self { t_start, dt, n_steps })
    }

    /// Time at step `k`, computed as `t_start + k·dt`.
    #[inline]
    pub fn time(&self, k: usize) -> T {
        self.t_start + T::of(k as f64) * self.dt
    }

    pub fn t_end(&self) -> T {
        self.time(self.n_steps)
    }

    pub fn duration(&self) -> T {
        T::of(self.n_steps as f64) * self.dt
    }

    pub fn sqrt_dt(&self) -> T {
        self.dt.sqrt()
    }
}

/// Result of fitting a grid to a requested window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridFit<T> {
    pub grid: TimeGrid<T>,
    /// Requested end minus the grid's end (may be negative when rounding up).
    pub remainder: T,
}

pub fn make_grid<T: Real>(t_start: T, t_end: T, dt: T) -> Result<GridFit<T>, NoiseError> {
    if !t_start.is_finite() || !t_end.is_finite() {
        return Err(NoiseError::NonFiniteBounds);
    }
    if !(dt > T::zero()) || !dt.is_finite() {
        return Err(NoiseError::NonPositiveDt(dt.f64()));
    }
    if t_end < t_start {
        return Err(NoiseError::ReversedBounds { t_start: t_start.f64(), t_end: t_end.f64() });
    }
    let n_steps = ((t_end - t_start) / dt).round().to_usize().unwrap_or(0);
    let grid = TimeGrid { t_start, dt, n_steps };
    Ok(GridFit { grid, remainder: t_end - grid.t_end() })
}

/// Name of an increment stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    WPlus,
    WMinus,
    Aux(u32),
}

impl Label {
    pub fn stream_id(self) -> u64 {
        match self {
            Label::WPlus => 0,
            Label::WMinus => 1,
            Label::Aux(j) => 2 + j as u64,
        }
    }

    pub fn from_stream_id(id: u64) -> Option<Self> {
        match id {
            0 => Some(Label::WPlus),
            1 => Some(Label::WMinus),
            _ => u32::try_from(id - 2).ok().map(Label::Aux),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::WPlus => write!(f, "W_PLUS"),
            Label::WMinus => write!(f, "W_MINUS"),
            Label::Aux(j) => write!(f, "AUX({j})"),
        }
    }
}

/// Correlation structure of the driving noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CovarianceKind {
    #[serde(rename = "C_PM")]
    CPm,
    #[serde(rename = "C_PLUS")]
    CPlus,
}

impl CovarianceKind {
    #[inline]
    pub fn eval<T: Real>(self, x: T, y: T) -> T {
        let z = T::zero();
        let both_pos = x > z && y > z;
        let both_neg = x < z && y < z;
        let hit = match self {
            CovarianceKind::CPm => both_pos || both_neg,
            CovarianceKind::CPlus => both_pos,
        };
        if hit {
            T::one()
        } else {
            T::zero()
        }
    }
}

#[inline]
pub fn e_plus<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

#[inline]
pub fn e_minus<T: Real>(x: T) -> T {
    if x < T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

/// Mix a base seed with an index (SplitMix64 finalizer) to key replicas.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Unbounded source of standard normals for one `(seed, label)` pair.
#[derive(Debug, Clone)]
pub struct Substream {
    rng: ChaCha8Rng,
}

impl Substream {
    pub fn new(seed: u64, label: Label) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label.stream_id());
        Self { rng }
    }

    #[inline]
    pub fn normal<T: Real>(&mut self) -> T {
        T::standard_normal(&mut self.rng)
    }

    /// Next increment with standard deviation `sd`.
    #[inline]
    pub fn increment<T: Real>(&mut self, sd: T) -> T {
        sd * self.normal::<T>()
    }

    pub fn increments<T: Real>(&mut self, n: usize, sd: T) -> Vec<T> {
        (0..n).map(|_| self.increment(sd)).collect()
    }
}

/// Materialized increments of several labelled streams on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle<T> {
    pub grid: TimeGrid<T>,
    pub seed: u64,
    labels: Vec<Label>,
    streams: Vec<Vec<T>>,
}

impl<T: Real> NoiseBundle<T> {
    /// Assemble a bundle from explicit increments (used for coarsened or
    /// externally supplied noise).
    pub fn from_streams(grid: TimeGrid<T>, seed: u64, streams: Vec<(Label, Vec<T>)>) -> Result<Self, NoiseError> {
        let mut labels = Vec::with_capacity(streams.len());
        let mut data = Vec::with_capacity(streams.len());
        for (label, s) in streams {
            if labels.contains(&label) {
                return Err(NoiseError::DuplicateLabel(label));
            }
            if s.len() != grid.n_steps {
                return Err(NoiseError::BadDump("stream length differs from grid"));
            }
            labels.push(label);
            data.push(s);
        }
        Ok(Self { grid, seed, labels, streams: data })
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, label: Label) -> Option<&[T]> {
        self.labels.iter().position(|l| *l == label).map(|i| self.streams[i].as_slice())
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    /// Binary dump: seed, dt, n_steps, label count and ids, then each stream as
    /// little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.grid.dt.f64().to_le_bytes())?;
        w.write_all(&(self.grid.n_steps as u64).to_le_bytes())?;
        w.write_all(&(self.labels.len() as u64).to_le_bytes())?;
        for l in &self.labels {
            w.write_all(&l.stream_id().to_le_bytes())?;
        }
        for s in &self.streams {
            for v in s {
                w.write_all(&v.f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Inverse of [`write_to`](Self::write_to); the grid starts at 0.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NoiseError> {
        fn word<R: Read>(r: &mut R) -> Result<[u8; 8], NoiseError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| NoiseError::BadDump("truncated"))?;
            Ok(b)
        }
        let seed = u64::from_le_bytes(word(&mut r)?);
        let dt = f64::from_le_bytes(word(&mut r)?);
        let n_steps = u64::from_le_bytes(word(&mut r)?) as usize;
        let n_labels = u64::from_le_bytes(word(&mut r)?) as usize;
        let grid = TimeGrid::new(T::zero(), T::of(dt), n_steps)?;
        let mut labels = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            let id = u64::from_le_bytes(word(&mut r)?);
            labels.push(Label::from_stream_id(id).ok_or(NoiseError::BadDump("unknown label id"))?);
        }
        let mut streams = Vec::with_capacity(n_labels);
        for l in labels {
            let mut s = Vec::with_capacity(n_steps);
            for _ in 0..n_steps {
                s.push(T::of(f64::from_le_bytes(word(&mut r)?)));
            }
            streams.push((l, s));
        }
        Self::from_streams(grid, seed, streams)
    }
}

pub fn sample_bundle<T: Real>(grid: TimeGrid<T>, labels: &[Label], seed: u64) -> Result<NoiseBundle<T>, NoiseError> {
    let sd = grid.sqrt_dt();
    let mut streams = Vec::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(NoiseError::DuplicateLabel(*l));
        }
        streams.push((*l, Substream::new(seed, *l).increments(grid.n_steps, sd)));
    }
    NoiseBundle::from_streams(grid, seed, streams)
}

/// Running sum with a leading zero: `out[k] = Σ_{j<k} stream[j]`.
pub fn cumulate<T: Real>(stream: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(stream.len() + 1);
    let mut acc = T::zero();
    out.push(acc);
    for &d in stream {
        acc += d;
        out.push(acc);
    }
    out
}

/// Sum consecutive blocks of `factor` increments. A trailing partial block is
/// dropped.
pub fn coarsen<T: Real>(stream: &[T], factor: usize) -> Vec<T> {
    assert!(factor > 0, "coarsening factor must be positive");
    stream.chunks_exact(factor).map(|c| c.iter().copied().sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        let g = make_grid(0.0, 1.0, 0.25).unwrap();
        assert_eq!(g.grid.n_steps, 4);
        assert_eq!(g.remainder, 0.0);
        assert_eq!(make_grid(0.0, 0.0, 0.1).unwrap().grid.n_steps, 0);
        let g = make_grid(0.0f64, 1.0, 0.3).unwrap();
        assert_eq!(g.grid.n_steps, 3);
        assert!((g.grid.t_end() - 0.9).abs() < 1e-15);
        assert!((g.remainder - 0.1).abs() < 1e-15);
    }

    #[test]
    fn grid_errors() {
        assert_eq!(make_grid(0.0, 1.0, 0.0), Err(NoiseError::NonPositiveDt(0.0)));
        assert_eq!(make_grid(0.0, 1.0, -1.0), Err(NoiseError::NonPositiveDt(-1.0)));
        assert_eq!(make_grid(0.0, f64::NAN, 0.1), Err(NoiseError::NonFiniteBounds));
        assert_eq!(make_grid(f64::INFINITY, 1.0, 0.1), Err(NoiseError::NonFiniteBounds));
        assert!(matches!(make_grid(1.0, 0.0, 0.1), Err(NoiseError::ReversedBounds { .. })));
    }

    #[test]
    fn time_is_multiplicative() {
        let g = TimeGrid::new(0.5, 0.1, 1000).unwrap();
        assert_eq!(g.time(777), 0.5 + 777.0 * 0.1);
    }

    #[test]
    fn cumulate_examples() {
        assert_eq!(cumulate::<f64>(&[]), vec![0.0]);
        assert_eq!(cumulate(&[0.5, -0.5]), vec![0.0, 0.5, 0.0]);
    }

    #[test]
    fn bundle_duplicate_label() {
        let g = TimeGrid::new(0.0, 0.1, 3).unwrap();
        let err = sample_bundle::<f64>(g, &[Label::WPlus, Label::WPlus], 1).unwrap_err();
        assert_eq!(err, NoiseError::DuplicateLabel(Label::WPlus));
    }

    #[test]
    fn empty_grid_streams() {
        let g = TimeGrid::new(0.0, 0.1, 0).unwrap();
        let b = sample_bundle::<f64>(g, &[Label::WPlus, Label::WMinus], 9).unwrap();
        assert!(b.get(Label::WPlus).unwrap().is_empty());
        assert!(b.get(Label::WMinus).unwrap().is_empty());
    }

    #[test]
    fn label_ids_round_trip() {
        for l in [Label::WPlus, Label::WMinus, Label::Aux(0), Label::Aux(41)] {
            assert_eq!(Label::from_stream_id(l.stream_id()), Some(l));
        }
    }

    #[test]
    fn covariance_tables() {
        use CovarianceKind::*;
        assert_eq!(CPm.eval(1.0, 2.0), 1.0);
        assert_eq!(CPm.eval(-1.0, -2.0), 1.0);
        assert_eq!(CPm.eval(-1.0, 2.0), 0.0);
        assert_eq!(CPm.eval(0.0, 2.0), 0.0);
        assert_eq!(CPlus.eval(1.0, 2.0), 1.0);
        assert_eq!(CPlus.eval(-1.0, -2.0), 0.0);
    }

    #[test]
    fn coarsen_sums_blocks() {
        assert_eq!(coarsen(&[1.0, 2.0, 3.0, 4.0, 5.0], 2), vec![3.0, 7.0]);
    }
}

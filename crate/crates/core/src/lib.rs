//! Monte Carlo simulation of Brownian flows on the real line driven by
//! half-line white noises: the coalescing flow `φ±`, the diffusive kernel
//! flow `K⁺` and the coalescing flow `φ⁺`, with the statistical harness used
//! to check their laws.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`). The aliases
//! at the crate root fix the scalar to `f64`.

pub mod chaos;
pub mod cli;
pub mod flow_plus;
pub mod flow_pm;
pub mod noise;
pub mod verify;
pub mod wedge;

mod real;

pub use real::Real;

pub use noise::{CovarianceKind, Label};

pub type TimeGrid = noise::TimeGrid<f64>;
pub type NoiseBundle = noise::NoiseBundle<f64>;
pub type NPointPath = flow_pm::NPointPath<f64>;
pub type FlowMapSample = flow_pm::FlowMapSample<f64>;
pub type WedgePath = wedge::WedgePath<f64>;
pub type CrossingCount = wedge::CrossingCount<f64>;
pub type PlusNPointPath = flow_plus::PlusNPointPath<f64>;
pub type KernelEstimate = flow_plus::KernelEstimate<f64>;
pub type FunctionGrid = chaos::FunctionGrid<f64>;

pub type TimeGrid32 = noise::TimeGrid<f32>;
pub type NoiseBundle32 = noise::NoiseBundle<f32>;
pub type NPointPath32 = flow_pm::NPointPath<f32>;

//! Pullback-Fisher activation steering.
//!
//! The output head of a language model is a categorical exponential family
//! with natural parameter `λ` (the final hidden state) and sufficient
//! statistics given by the unembedding rows. Pulling its Fisher metric back
//! through the Jacobian of the remaining layers gives a Riemannian metric
//! `G = JᵀHJ` on an intermediate activation space. This crate computes that
//! metric for small residual networks, solves for minimum-distortion steering
//! directions, runs the iterative steering loop with its baselines, and
//! evaluates the cost of proxy metrics used by other steering methods.
//!
//! All numerical code is generic over the scalar type through [`Scalar`]; the
//! `*64` / `*32` aliases below are the concrete instantiations used by the
//! experiment harness.
//!
//! Modules:
//!
//! - [`softmax`]: log-partition, dual coordinates, Fisher matrix, KL identities
//!   and the concept-decomposed evaluation metrics.
//! - [`transformer`]: affine toy models and pre-LN residual MLP stacks with
//!   analytic and finite-difference Jacobians.
//! - [`metric`]: the pullback metric and its spectral diagnostics.
//! - [`steering`]: closed-form and iterative steering, baselines, calibration
//!   and target-crossing bisection.
//! - [`proxy`]: excess-cost identities, cost ratios and their bounds.
//! - [`weights`]: the network weight file format.

pub mod error;
pub mod linalg;
pub mod metric;
pub mod proxy;
pub mod softmax;
pub mod steering;
pub mod transformer;
pub mod weights;

use nalgebra::RealField;
use num_traits::ToPrimitive;

pub use error::{Error, Result};
pub use metric::{PullbackMetric, SpectralReport};
pub use proxy::{CostReport, ProxyKind, ProxyMetricSpec};
pub use softmax::{ConceptSpec, CovectorMode, KlValue, OutputDistribution, UnembeddingTable};
pub use steering::{SteeringConfig, SteeringTrace};
pub use transformer::{LayeredMap, ResidualBlock, ToyAffineModel, ToyNetwork};

/// Real scalar usable by every routine in the crate.
///
/// `nalgebra::RealField` supplies the arithmetic and the transcendental
/// functions; `FromPrimitive` (through `RealField`) and `ToPrimitive` carry
/// constants and diagnostics across the `f64` boundary.
pub trait Scalar: RealField + Copy + ToPrimitive {}

impl<T: RealField + Copy + ToPrimitive> Scalar for T {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Lossy conversion to `f64` for logging and serialization.
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

pub type Vector<T> = nalgebra::DVector<T>;
pub type Matrix<T> = nalgebra::DMatrix<T>;

pub type UnembeddingTable64 = UnembeddingTable<f64>;
pub type UnembeddingTable32 = UnembeddingTable<f32>;
pub type OutputDistribution64 = OutputDistribution<f64>;
pub type ConceptSpec64 = ConceptSpec<f64>;
pub type ToyNetwork64 = ToyNetwork<f64>;
pub type ToyNetwork32 = ToyNetwork<f32>;
pub type ToyAffineModel64 = ToyAffineModel<f64>;
pub type ToyAffineModel32 = ToyAffineModel<f32>;
pub type PullbackMetric64 = PullbackMetric<f64>;
pub type PullbackMetric32 = PullbackMetric<f32>;
pub type SpectralReport64 = SpectralReport<f64>;
pub type SteeringConfig64 = SteeringConfig<f64>;
pub type SteeringTrace64 = SteeringTrace<f64>;
pub type CostReport64 = CostReport<f64>;
pub type ProxyMetricSpec64 = ProxyMetricSpec<f64>;

//! Exact time-dependent coefficients of the quantum Brownian motion master
//! equation, Gaussian reduced dynamics, and a brute-force closed-system
//! reference solution.
// `!(x > y)` tests are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bath;
pub mod coefficients;
pub mod config;
pub mod dynamics;
pub mod elementary;
pub mod error;
pub mod oracle;
pub mod quadrature;
pub mod verify;

pub use bath::{BathMode, BathSpec, Beta, KernelTable, SpectralDensity};
pub use config::RunConfig;
pub use elementary::{ElementarySolution, Frequency, GreenEvaluator, SolverOptions, SystemParams, VolterraPair};
pub use error::{QbmError, Result};
pub use coefficients::{CoefficientSet, CoefficientTrajectory, HpzCoefficients, Mode, Provenance, TimeGrid};
pub use dynamics::{GaussianMomentState, MomentSeries, WignerGaussian};
pub use oracle::{FullGaussianState, FullPhaseSpaceModel};
pub use verify::{Check, VerifyReport};

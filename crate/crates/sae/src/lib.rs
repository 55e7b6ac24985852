//! Small-area estimation under the Fay-Herriot model.
//!
//! The toolkit covers the full inference chain for area-level models with
//! known sampling variances:
//!
//! * [`model`] - the data model, GLS coefficients, and residual / profile
//!   log-likelihoods in the model variance A;
//! * [`adjustment`] - adjustment factors for adjusted maximum likelihood,
//!   with grid-based verification of their shape conditions;
//! * [`variance`] - REML, profile ML, and the adjusted estimators (LL, YL,
//!   the strictly positive per-area NRE, custom factors) via deterministic
//!   one-dimensional maximization;
//! * [`prediction`] - BLUP / EBLUP with shrinkage weights;
//! * [`mse`] - the g1/g2/g3 MSE terms, plug-in / Datta-Lahiri / positive
//!   naive estimators, and the two-way mapping between a weight c(A) on g3
//!   and its paired adjustment factor;
//! * [`simulation`] - a seeded, worker-count-invariant Monte Carlo engine
//!   producing empirical MSE and PRB tables plus estimator moment checks;
//! * [`io`] - dataset parsing (CSV and JSON).

// Guards of the form `!(x > 0.0)` are intentional: they reject NaN along
// with the wrong sign.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjustment;
pub mod error;
pub mod io;
mod linalg;
pub mod model;
pub mod mse;
pub mod prediction;
pub mod rng;
pub mod simulation;
pub mod variance;

pub use adjustment::{
    default_grid, factor_ll, factor_nre, factor_yl, validate_factor, AdjustmentFactor,
    ConditionClass, FactorReport, FactorScope,
};
pub use error::{Error, Result};
pub use model::{
    gls_beta, log_likelihood, residual_quadratic, AreaObservation, Dataset, LikelihoodKind,
};
pub use mse::{c_from_factor, factor_from_c, g_terms, mse_estimate, CWeight, GTerms, MseEstimate, MseForm};
pub use prediction::{blup, eblup, EblupResult, VarianceFit};
pub use simulation::{
    generate_replicate, nre_moment_check, prb, run_simulation, NreMomentCheck, SimConfig,
    SimulationReport,
};
pub use variance::{
    estimate_nre_all, estimate_variance, existence_bound, maximize_over_a, EstimateOptions,
    ExistenceBound, VarianceEstimate, VarianceMethod,
};

/// Crate version, recorded in CLI output metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

//! Round a discretized coupling on a product of metric measure spaces to
//! exact target marginals while staying uniformly close to the original.
//!
//! Given a non-negative coupling `P` on a finite product grid and target
//! marginals within `sigma_j(eps)` of `P`'s marginals in the uniform norm,
//! the corrector produces `P'` with exactly the target marginals and
//! `sup |P - P'| <= (sum_j (1 + 2/c_j)) * eps`. The thresholds, the
//! constants and the correction itself are fully quantitative, so every run
//! is certified by its own report.
//!
//! The crate also ships the entropic multi-marginal solver that motivates
//! the corrector (round an approximately-feasible solver output to exact
//! marginals), and generators for the tent-function counterexamples that
//! show where correction is impossible (non-compact support, discontinuous
//! couplings) and that the Lipschitz threshold is sharp.
//!
//! Spaces, couplings, moduli and profiles are immutable after
//! construction and all operations are pure functions, so values can be
//! shared freely across threads; nothing in the crate holds mutable
//! global state.

pub mod continuity;
pub mod correction;
pub mod counterexamples;
pub mod coupling;
pub mod error;
pub mod io;
pub mod mmot;
pub mod space;
pub mod sum;
pub mod synth;

pub use continuity::{
    empirical_modulus, EmpiricalOptions, Modulus, ModulusConfig, ModulusKind, SigmaFunction,
    SigmaProfile, SigmaValue,
};
pub use correction::{
    multi_marginal_correct, one_marginal_correct, shrink, shrink_deviation_bound,
    CorrectionOptions, CorrectionReport, StageRecord, SweepOrder,
};
pub use coupling::{sup_distance, Coupling, MarginalDensity};
pub use error::{Error, ErrorKind, Result};
pub use space::{MarginalSpace, Metric, ProductSpace, RadialFn};

//! Error types for the whole crate.
//!
//! Errors are grouped into four kinds so that callers (the CLI in
//! particular) can map them onto distinct exit codes: I/O and parsing,
//! data validation, theorem-regime gate failures, and certified-bound
//! violations.

use thiserror::Error;

/// Coarse category of an [`enum@Error`], used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// File I/O or parse failure.
    Io,
    /// Input data violates a structural invariant.
    Validation,
    /// Inputs are valid but outside the regime the correction theorem covers.
    Gate,
    /// A certified inequality was violated at runtime.
    Bound,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error: {detail}")]
    Parse { path: String, detail: String },

    #[error("weight {index} is not strictly positive: {value}")]
    NonPositiveWeight { index: usize, value: f64 },

    #[error("weights sum to {sum}, expected 1 within 1e-12")]
    WeightSumOff { sum: f64 },

    #[error("point {index} has dimension {got}, expected {expected}")]
    PointDimMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },

    #[error("distance matrix is not symmetric at ({i},{j}): {dij} vs {dji}")]
    AsymmetricDistance { i: usize, j: usize, dij: f64, dji: f64 },

    #[error("distance matrix diagonal entry {i} is {value}, expected 0")]
    NonZeroDiagonal { i: usize, value: f64 },

    #[error("distance between distinct points ({i},{j}) must be positive, got {value}")]
    NonPositiveDistance { i: usize, j: usize, value: f64 },

    #[error("triangle inequality violated on points ({i},{j},{k}): d({i},{k}) = {dik} > {dij} + {djk}")]
    TriangleViolation {
        i: usize,
        j: usize,
        k: usize,
        dik: f64,
        dij: f64,
        djk: f64,
    },

    #[error("distance matrix has {got} entries, expected {expected}")]
    DistanceMatrixShape { got: usize, expected: usize },

    #[error("absolute-difference metric requires 1-d points; point {index} has dimension {dim}")]
    MetricDimension { index: usize, dim: usize },

    #[error("value at flat index {index} is negative beyond tolerance: {value}")]
    NegativeValue { index: usize, value: f64 },

    #[error("weighted mass is {mass}, expected 1 within {tol}")]
    MassOff { mass: f64, tol: f64 },

    #[error("shape mismatch: {detail}")]
    ShapeMismatch { detail: String },

    #[error("coordinate index {index} out of range (factor count {n})")]
    CoordOutOfRange { index: usize, n: usize },

    #[error("grid index {index} out of range for factor {factor} (size {size})")]
    IndexOutOfRange {
        factor: usize,
        index: usize,
        size: usize,
    },

    #[error("sigma profile for coordinate {coord} is degenerate (sigma({eps}) = 0)")]
    DegenerateSigma { coord: usize, eps: f64 },

    #[error(
        "sigma inverse target {target} exceeds sup sigma = {sigma_hi} over the search bracket (0, {eps_hi}]"
    )]
    SigmaInverseOutOfRange {
        target: f64,
        sigma_hi: f64,
        eps_hi: f64,
    },

    #[error("marginal {coord} of the coupling is identically zero")]
    MarginalZero { coord: usize },

    #[error(
        "stage {coord}: epsilon {eps} is not below kappa = {kappa}; marginal perturbations too large for the theorem regime"
    )]
    GateEpsilon { coord: usize, eps: f64, kappa: f64 },

    #[error(
        "stage {coord}: marginal gap {residual} is not below sigma({eps}) = {sigma}; correction not gated"
    )]
    GateResidual {
        coord: usize,
        residual: f64,
        eps: f64,
        sigma: f64,
    },

    #[error(
        "shrink deviation {measured} exceeds epsilon {eps} at grid point {witness:?}; the modulus under-estimates the coupling's oscillation"
    )]
    ShrinkBoundViolated {
        measured: f64,
        eps: f64,
        witness: Vec<usize>,
    },

    #[error(
        "stage {coord}: removed mass {mass} is below c*sigma = {lower} - 1e-12; constants inconsistent with the marginal"
    )]
    MassBelowLowerBound { coord: usize, mass: f64, lower: f64 },

    #[error("stage {coord}: shrink removed the entire coupling (m = 0); epsilon {eps} is too large")]
    MassVanished { coord: usize, eps: f64 },

    #[error(
        "stage {coord}: corrected coupling negative beyond tolerance at {witness:?}: {value}; the modulus under-estimates the coupling's oscillation"
    )]
    NegativityViolated {
        coord: usize,
        witness: Vec<usize>,
        value: f64,
    },

    #[error("stage {coord}: deviation {measured} exceeds certified bound {bound}")]
    DeviationBoundViolated {
        coord: usize,
        measured: f64,
        bound: f64,
    },

    #[error("verification failed: {detail}")]
    VerifyFailed { detail: String },

    #[error(
        "solver residual {residual} is outside the sigma gate (epsilon schedule {eps} >= kappa {kappa}); stop the solver at residual <= {required} instead"
    )]
    ResidualOutsideGate {
        residual: f64,
        eps: f64,
        kappa: f64,
        required: f64,
    },

    #[error(
        "entropic solver underflow at h = {h}: largest exponent magnitude {max_exponent}; smallest stable h for this cost is about {h_min_stable}"
    )]
    SolverUnderflow {
        h: f64,
        max_exponent: f64,
        h_min_stable: f64,
    },

    #[error("targets for the entropic solver must be strictly positive (coordinate {coord}, index {index})")]
    TargetNotPositive { coord: usize, index: usize },

    #[error(
        "entropic solver did not reach residual {tolerance} within {sweeps} sweeps (best: {residual})"
    )]
    SolverNotConverged {
        residual: f64,
        tolerance: f64,
        sweeps: usize,
    },

    #[error("grid too coarse: {detail}; minimal resolution: {minimal}")]
    TooCoarse { detail: String, minimal: String },

    #[error("grid is not dyadic: {detail}")]
    NonDyadic { detail: String },

    #[error(
        "infeasible filler: requested integral {required} with Lipschitz budget {budget}, but the maximal achievable integral is {max_achievable}"
    )]
    InfeasibleFiller {
        required: f64,
        budget: f64,
        max_achievable: f64,
    },

    #[error("invalid parameter: {detail}")]
    InvalidParameter { detail: String },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Io { .. } | Parse { .. } => ErrorKind::Io,
            NonPositiveWeight { .. }
            | WeightSumOff { .. }
            | PointDimMismatch { .. }
            | AsymmetricDistance { .. }
            | NonZeroDiagonal { .. }
            | NonPositiveDistance { .. }
            | TriangleViolation { .. }
            | DistanceMatrixShape { .. }
            | MetricDimension { .. }
            | NegativeValue { .. }
            | MassOff { .. }
            | ShapeMismatch { .. }
            | CoordOutOfRange { .. }
            | IndexOutOfRange { .. }
            | MarginalZero { .. }
            | TargetNotPositive { .. }
            | TooCoarse { .. }
            | NonDyadic { .. }
            | InfeasibleFiller { .. }
            | InvalidParameter { .. } => ErrorKind::Validation,
            DegenerateSigma { .. }
            | SigmaInverseOutOfRange { .. }
            | GateEpsilon { .. }
            | GateResidual { .. }
            | MassVanished { .. }
            | ResidualOutsideGate { .. }
            | SolverNotConverged { .. }
            | SolverUnderflow { .. } => ErrorKind::Gate,
            ShrinkBoundViolated { .. }
            | MassBelowLowerBound { .. }
            | NegativityViolated { .. }
            | DeviationBoundViolated { .. }
            | VerifyFailed { .. } => ErrorKind::Bound,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

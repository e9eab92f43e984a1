//! Entropic multi-marginal transport solver and the solve-then-round
//! pipeline.
//!
//! The solver runs cyclic coordinate ascent on the dual potentials of the
//! entropy-regularized problem, entirely in the log domain (the interesting
//! regime is small `h`, where linear-domain updates underflow). Its iterates
//! have the Gibbs form `P = exp((sum_j phi_j - c) / h)` -- strictly positive
//! but with slightly wrong marginals. Rounding those iterates to exact
//! marginals with a certified uniform-norm bound is the whole point of the
//! correction machinery.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::continuity::SigmaProfile;
use crate::correction::{
    multi_marginal_correct, CorrectionOptions, CorrectionReport, SCHEDULE_INFLATION,
};
use crate::coupling::{sup_distance_values, Coupling, MarginalDensity, Odometer};
use crate::error::{Error, Result};
use crate::space::ProductSpace;
use crate::sum::NeumaierSum;

/// A cost tensor over the product grid (coupling file format; values may be
/// negative but must be finite).
#[derive(Debug, Clone)]
pub struct CostTensor {
    space: Arc<ProductSpace>,
    values: Vec<f64>,
}

impl CostTensor {
    pub fn new(space: Arc<ProductSpace>, values: Vec<f64>) -> Result<Self> {
        if values.len() != space.cell_count() {
            return Err(Error::ShapeMismatch {
                detail: format!(
                    "cost tensor has {} values for a grid of {} cells",
                    values.len(),
                    space.cell_count()
                ),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NegativeValue {
                index: i,
                value: values[i],
            });
        }
        Ok(Self { space, values })
    }

    pub fn space(&self) -> &Arc<ProductSpace> {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Pairwise quadratic cost `sum_{j<k} (x_j - x_k)^2` on the coordinate
    /// sums of the factor points.
    pub fn quadratic(space: Arc<ProductSpace>) -> Self {
        let shape = space.shape();
        let coords: Vec<Vec<f64>> = space
            .factors()
            .iter()
            .map(|f| (0..f.len()).map(|i| f.point(i).iter().sum()).collect())
            .collect();
        let mut values = vec![0.0; space.cell_count()];
        let mut odo = Odometer::new(&shape);
        let mut flat = 0usize;
        loop {
            let idx = odo.current();
            let mut c = 0.0;
            for j in 0..shape.len() {
                for k in (j + 1)..shape.len() {
                    let d = coords[j][idx[j]] - coords[k][idx[k]];
                    c += d * d;
                }
            }
            values[flat] = c;
            flat += 1;
            if !odo.advance() {
                break;
            }
        }
        Self { space, values }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Entropic regularization strength.
    pub h: f64,
    /// Iteration cap; one iteration is one full cyclic sweep over the
    /// coordinates.
    pub max_iterations: usize,
    /// Stop once `max_j || pi_j P - rho_j ||_inf` drops to this.
    pub tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            h: 0.1,
            max_iterations: 10_000,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug)]
pub struct SolverOutcome {
    pub coupling: Coupling,
    /// Uniform-norm marginal residual after each full sweep.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
}

/// Cyclic dual ascent for the entropy-regularized multi-marginal problem.
///
/// Updates one coordinate's potential at a time so that its marginal
/// matches exactly at that instant; a full sweep updates every coordinate
/// once. Targets must be strictly positive (the Gibbs form cannot place
/// zero mass). Non-convergence at the cap returns the best iterate,
/// flagged; underflow at small `h` is an error that reports the smallest
/// stable `h` for the given cost.
pub fn entropic_mmot(
    cost: &CostTensor,
    targets: &[MarginalDensity],
    opts: &SolverOptions,
) -> Result<SolverOutcome> {
    let space = cost.space().clone();
    let n = space.factor_count();
    let shape = space.shape();
    if targets.len() != n {
        return Err(Error::ShapeMismatch {
            detail: format!("{} targets for {} coordinates", targets.len(), n),
        });
    }
    for (j, t) in targets.iter().enumerate() {
        if t.values().len() != shape[j] {
            return Err(Error::ShapeMismatch {
                detail: format!(
                    "target {} has {} values, factor has {}",
                    j,
                    t.values().len(),
                    shape[j]
                ),
            });
        }
        if let Some(i) = t.values().iter().position(|&v| !(v > 0.0)) {
            return Err(Error::TargetNotPositive { coord: j, index: i });
        }
    }
    if !(opts.h > 0.0) {
        return Err(Error::InvalidParameter {
            detail: format!("regularization h must be positive, got {}", opts.h),
        });
    }

    let h = opts.h;
    let log_rho: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| t.values().iter().map(|v| v.ln()).collect())
        .collect();
    let log_w: Vec<Vec<f64>> = space
        .factors()
        .iter()
        .map(|f| f.weights().iter().map(|w| w.ln()).collect())
        .collect();
    let mut phi: Vec<Vec<f64>> = shape.iter().map(|&s| vec![0.0; s]).collect();

    let mut history = Vec::new();
    let mut converged = false;
    let mut sweeps = 0usize;
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;

    for sweep in 1..=opts.max_iterations {
        for j in 0..n {
            // Slice log-sum-exp of (sum_{k != j} phi_k - c)/h + log w_hat.
            let mut slice_max = vec![f64::NEG_INFINITY; shape[j]];
            let arg = |idx: &[usize], flat: usize| -> f64 {
                let mut a = 0.0;
                for k in 0..n {
                    if k != j {
                        a += phi[k][idx[k]] / h + log_w[k][idx[k]];
                    }
                }
                a - cost.values()[flat] / h
            };
            let mut odo = Odometer::new(&shape);
            let mut flat = 0usize;
            loop {
                let idx = odo.current();
                let a = arg(idx, flat);
                if a > slice_max[idx[j]] {
                    slice_max[idx[j]] = a;
                }
                flat += 1;
                if !odo.advance() {
                    break;
                }
            }
            let mut slice_sum: Vec<NeumaierSum> = vec![NeumaierSum::new(); shape[j]];
            let mut odo = Odometer::new(&shape);
            let mut flat = 0usize;
            loop {
                let idx = odo.current();
                slice_sum[idx[j]].add((arg(idx, flat) - slice_max[idx[j]]).exp());
                flat += 1;
                if !odo.advance() {
                    break;
                }
            }
            for i in 0..shape[j] {
                let lse = slice_max[i] + slice_sum[i].value().ln();
                phi[j][i] = h * (log_rho[j][i] - lse);
            }
        }
        sweeps = sweep;

        // Residual of the full sweep's iterate.
        let exponents = gibbs_exponents(&space, cost, &phi, h);
        let residual = marginal_residual(&space, &exponents, targets)?;
        history.push(residual);
        if best.as_ref().is_none_or(|(r, _)| residual < *r) {
            best = Some((residual, phi.clone()));
        }
        if residual <= opts.tolerance {
            converged = true;
            break;
        }
    }

    let (_, phi_best) = best.expect("at least one sweep ran");
    let exponents = gibbs_exponents(&space, cost, &phi_best, h);
    let max_exp = exponents.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let values: Vec<f64> = exponents.iter().map(|e| e.exp()).collect();
    if values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::SolverUnderflow {
            h,
            max_exponent: max_exp,
            h_min_stable: h * max_exp / 700.0,
        });
    }
    let mass_probe = Coupling::new(space.clone(), values.clone(), false)?;
    let normalized = (mass_probe.total_mass() - 1.0).abs() <= crate::coupling::MASS_TOL;
    let coupling = Coupling::new(space, values, normalized)?;
    Ok(SolverOutcome {
        coupling,
        residual_history: history,
        converged,
        sweeps,
    })
}

fn gibbs_exponents(
    space: &ProductSpace,
    cost: &CostTensor,
    phi: &[Vec<f64>],
    h: f64,
) -> Vec<f64> {
    let shape = space.shape();
    let mut out = vec![0.0; cost.values().len()];
    let mut odo = Odometer::new(&shape);
    let mut flat = 0usize;
    loop {
        let idx = odo.current();
        let mut s = 0.0;
        for (k, &i) in idx.iter().enumerate() {
            s += phi[k][i];
        }
        out[flat] = (s - cost.values()[flat]) / h;
        flat += 1;
        if !odo.advance() {
            break;
        }
    }
    out
}

fn marginal_residual(
    space: &ProductSpace,
    exponents: &[f64],
    targets: &[MarginalDensity],
) -> Result<f64> {
    let shape = space.shape();
    let n = shape.len();
    let mut worst = 0.0f64;
    for j in 0..n {
        let mut acc: Vec<NeumaierSum> = vec![NeumaierSum::new(); shape[j]];
        let mut odo = Odometer::new(&shape);
        let mut flat = 0usize;
        loop {
            let idx = odo.current();
            let mut w = 1.0;
            for k in 0..n {
                if k != j {
                    w *= space.factor(k).weight(idx[k]);
                }
            }
            acc[idx[j]].add(exponents[flat].exp() * w);
            flat += 1;
            if !odo.advance() {
                break;
            }
        }
        let marg: Vec<f64> = acc.into_iter().map(|a| a.value()).collect();
        worst = worst.max(sup_distance_values(&marg, targets[j].values()));
    }
    Ok(worst)
}

/// The naive signed correction `P + (x)rho_j - (x)pi_j P`: matches the
/// targets and stays close to `P`, but is not non-negative in general.
/// Returns the raw tensor values.
pub fn naive_signed_correction(p: &Coupling, targets: &[MarginalDensity]) -> Result<Vec<f64>> {
    let space = p.space();
    let n = space.factor_count();
    if targets.len() != n {
        return Err(Error::ShapeMismatch {
            detail: format!("{} targets for {} coordinates", targets.len(), n),
        });
    }
    let marginals: Vec<Vec<f64>> = (0..n)
        .map(|j| p.marginal_values(j))
        .collect::<Result<_>>()?;
    let shape = space.shape();
    let mut out = p.values().to_vec();
    let mut odo = Odometer::new(&shape);
    let mut flat = 0usize;
    loop {
        let idx = odo.current();
        let mut rho_prod = 1.0;
        let mut marg_prod = 1.0;
        for j in 0..n {
            rho_prod *= targets[j].values()[idx[j]];
            marg_prod *= marginals[j][idx[j]];
        }
        out[flat] += rho_prod - marg_prod;
        flat += 1;
        if !odo.advance() {
            break;
        }
    }
    Ok(out)
}

/// Outcome of the solve-then-round pipeline.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub solver: SolverOutcome,
    pub rounded: Coupling,
    pub correction: CorrectionReport,
    /// Residual the solver actually achieved.
    pub solver_residual: f64,
    /// Theorem bound `K * max_j sigma_j^{-1}(delta)` at the requested stop
    /// residual.
    pub certified_bound: f64,
    /// Measured `sup |P_solver - P'|`.
    pub measured_deviation: f64,
    /// Smallest entry of the naive signed correction on the same inputs
    /// (negative when the naive formula leaves the feasible set).
    pub naive_min_entry: f64,
}

/// Run the entropic solver to the requested residual, then round its output
/// to the exact targets and certify the uniform-norm damage.
pub fn solve_and_round(
    cost: &CostTensor,
    targets: &[MarginalDensity],
    solver_opts: &SolverOptions,
    correction_opts: &CorrectionOptions,
) -> Result<PipelineOutcome> {
    let outcome = entropic_mmot(cost, targets, solver_opts)?;
    if !outcome.converged {
        let achieved = outcome
            .residual_history
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        return Err(Error::SolverNotConverged {
            residual: achieved,
            tolerance: solver_opts.tolerance,
            sweeps: outcome.sweeps,
        });
    }
    let solver_residual = *outcome
        .residual_history
        .last()
        .expect("converged run has history");

    // Schedule profiles of the solver output, for the delta gate and the
    // certified bound.
    let modulus = correction_opts
        .modulus
        .resolve(&outcome.coupling, &correction_opts.empirical)?;
    let mut profiles = Vec::new();
    for j in 0..targets.len() {
        let marg = outcome.coupling.marginal_values(j)?;
        profiles.push(SigmaProfile::build(
            outcome.coupling.space(),
            modulus.clone(),
            j,
            &marg,
        )?);
    }
    let kappa = profiles
        .iter()
        .map(|p| p.kappa())
        .fold(f64::INFINITY, f64::min);
    let mut eps_delta = 0.0f64;
    for p in &profiles {
        eps_delta = eps_delta.max(p.inverse_or_gate(solver_opts.tolerance, kappa)?);
    }
    let sched = eps_delta * SCHEDULE_INFLATION;
    if sched >= kappa {
        // The solver stopped too early relative to this coupling's modulus:
        // report the residual that would fit the gate.
        let mut required = f64::INFINITY;
        for p in &profiles {
            required = required.min(p.sigma(kappa / SCHEDULE_INFLATION * 0.999).unwrap_or(0.0));
        }
        return Err(Error::ResidualOutsideGate {
            residual: solver_opts.tolerance,
            eps: sched,
            kappa,
            required,
        });
    }
    let big_k: f64 = profiles.iter().map(|p| p.deviation_factor()).sum();
    let certified_bound = big_k * sched;

    let (rounded, correction) = multi_marginal_correct(&outcome.coupling, targets, correction_opts)?;
    let measured = crate::coupling::sup_distance(&outcome.coupling, &rounded)?;
    if measured > certified_bound + 1e-8 {
        return Err(Error::DeviationBoundViolated {
            coord: targets.len(),
            measured,
            bound: certified_bound,
        });
    }

    let naive = naive_signed_correction(&outcome.coupling, targets)?;
    let naive_min = naive.iter().cloned().fold(f64::INFINITY, f64::min);

    Ok(PipelineOutcome {
        solver: outcome,
        rounded,
        correction,
        solver_residual,
        certified_bound,
        measured_deviation: measured,
        naive_min_entry: naive_min,
    })
}

impl SigmaProfile {
    /// `sigma^{-1}(s)` but mapping an out-of-range target onto the gate
    /// error (residual too large for any eps below kappa).
    fn inverse_or_gate(&self, s: f64, kappa: f64) -> Result<f64> {
        match self.sigma_inverse(s) {
            Ok(v) => Ok(v),
            Err(Error::SigmaInverseOutOfRange { .. }) => Err(Error::ResidualOutsideGate {
                residual: s,
                eps: f64::INFINITY,
                kappa,
                required: self.sigma(kappa * 0.5).unwrap_or(0.0),
            }),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::MarginalSpace;
    use crate::synth::{smooth_coupling, SmoothCouplingParams};

    fn unit_product(factors: usize, cells: usize) -> Arc<ProductSpace> {
        let f: Vec<_> = (0..factors)
            .map(|_| Arc::new(MarginalSpace::trapezoid_interval(0.0, 1.0, cells).unwrap()))
            .collect();
        Arc::new(ProductSpace::new(f).unwrap())
    }

    fn smooth_targets(space: &Arc<ProductSpace>, seed: u64) -> Vec<MarginalDensity> {
        let p = smooth_coupling(space.clone(), seed, &SmoothCouplingParams::default()).unwrap();
        (0..space.factor_count())
            .map(|j| p.marginal(j).unwrap())
            .collect()
    }

    #[test]
    fn zero_cost_converges_to_product_in_two_sweeps() {
        let space = unit_product(2, 12);
        let cost = CostTensor::new(space.clone(), vec![0.0; space.cell_count()]).unwrap();
        let targets = smooth_targets(&space, 4);
        let opts = SolverOptions {
            h: 0.25,
            max_iterations: 2,
            tolerance: 1e-12,
        };
        let out = entropic_mmot(&cost, &targets, &opts).unwrap();
        assert!(out.converged, "residuals: {:?}", out.residual_history);
        assert!(out.sweeps <= 2);
        // Gibbs kernel with zero cost is the product of the targets.
        let shape = space.shape();
        for i in 0..shape[0] {
            for k in 0..shape[1] {
                let expect = targets[0].values()[i] * targets[1].values()[k];
                let got = out.coupling.values()[i * shape[1] + k];
                assert!((got - expect).abs() <= 1e-10, "({i},{k}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn quadratic_cost_residual_decreases() {
        let space = unit_product(2, 16);
        let cost = CostTensor::quadratic(space.clone());
        let targets = smooth_targets(&space, 9);
        let opts = SolverOptions {
            h: 0.1,
            max_iterations: 60,
            tolerance: 1e-10,
        };
        let out = entropic_mmot(&cost, &targets, &opts).unwrap();
        let h = &out.residual_history;
        assert!(h.len() >= 3);
        for w in h.windows(2) {
            if w[0] > 1e-12 {
                assert!(
                    w[1] <= w[0] * (1.0 + 1e-9),
                    "residual increased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn three_marginal_solver_reaches_tolerance() {
        let space = unit_product(3, 8);
        let cost = CostTensor::quadratic(space.clone());
        let targets = smooth_targets(&space, 14);
        let opts = SolverOptions {
            h: 0.2,
            max_iterations: 500,
            tolerance: 1e-3,
        };
        let out = entropic_mmot(&cost, &targets, &opts).unwrap();
        assert!(out.converged, "history: {:?}", out.residual_history.last());
        assert!(*out.residual_history.last().unwrap() < 1e-3);
        assert!(out.coupling.values().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn solver_flags_non_convergence_and_returns_best_iterate() {
        let space = unit_product(2, 8);
        let cost = CostTensor::quadratic(space.clone());
        let targets = smooth_targets(&space, 3);
        let opts = SolverOptions {
            h: 0.05,
            max_iterations: 1,
            tolerance: 1e-14,
        };
        let out = entropic_mmot(&cost, &targets, &opts).unwrap();
        assert!(!out.converged);
        assert_eq!(out.residual_history.len(), 1);
    }

    #[test]
    fn solver_reports_underflow_at_tiny_h() {
        let space = unit_product(2, 8);
        // A cost with a large range so that exponents overflow the f64
        // exp() domain at h = 1e-4.
        let mut vals = vec![0.0; space.cell_count()];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = (i % 7) as f64 * 30.0;
        }
        let cost = CostTensor::new(space.clone(), vals).unwrap();
        let targets = smooth_targets(&space, 5);
        let opts = SolverOptions {
            h: 1e-4,
            max_iterations: 3,
            tolerance: 1e-10,
        };
        match entropic_mmot(&cost, &targets, &opts) {
            Err(Error::SolverUnderflow { h_min_stable, .. }) => {
                assert!(h_min_stable > 1e-4);
            }
            Ok(out) => {
                // If it survived, every value must be positive.
                assert!(out.coupling.values().iter().all(|&v| v > 0.0));
            }
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn naive_signed_correction_matches_marginals_but_goes_negative() {
        let space = unit_product(2, 24);
        let cost = CostTensor::quadratic(space.clone());
        let targets = smooth_targets(&space, 12);
        let opts = SolverOptions {
            h: 0.05,
            max_iterations: 2000,
            tolerance: 1e-4,
        };
        let out = entropic_mmot(&cost, &targets, &opts).unwrap();
        assert!(out.converged);
        let naive = naive_signed_correction(&out.coupling, &targets).unwrap();
        // The naive formula hits the marginals...
        let probe = Coupling::new(
            space.clone(),
            naive.iter().map(|v| v.max(0.0)).collect(),
            false,
        )
        .unwrap();
        let _ = probe; // marginal check below uses raw values
        let shape = space.shape();
        let w1: Vec<f64> = space.factor(1).weights().to_vec();
        let mut m0 = vec![0.0; shape[0]];
        for i in 0..shape[0] {
            let mut acc = NeumaierSum::new();
            for k in 0..shape[1] {
                acc.add(naive[i * shape[1] + k] * w1[k]);
            }
            m0[i] = acc.value();
        }
        let res0 = sup_distance_values(&m0, targets[0].values());
        assert!(res0 <= 1e-10, "naive marginal residual {res0}");
        // ...but leaves the feasible set.
        let min = naive.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min < 0.0, "expected a negative naive entry, min = {min}");
    }


    #[test]
    fn certified_bound_holds_across_seeds() {
        let space = unit_product(2, 12);
        let cost = CostTensor::quadratic(space.clone());
        for seed in 0..5u64 {
            let targets = smooth_targets(&space, 100 + seed);
            let sopts = SolverOptions {
                h: 0.1,
                max_iterations: 3000,
                tolerance: 1e-5,
            };
            let out =
                solve_and_round(&cost, &targets, &sopts, &CorrectionOptions::default()).unwrap();
            assert!(
                out.measured_deviation <= out.certified_bound + 1e-8,
                "seed {seed}: {} > {}",
                out.measured_deviation,
                out.certified_bound
            );
            assert!((out.rounded.total_mass() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn solve_and_round_zero_residual_is_identity() {
        // Zero cost converges to the exact product, so rounding is the
        // fast path.
        let space = unit_product(2, 10);
        let cost = CostTensor::new(space.clone(), vec![0.0; space.cell_count()]).unwrap();
        let targets = smooth_targets(&space, 2);
        let sopts = SolverOptions {
            h: 0.5,
            max_iterations: 4,
            tolerance: 1e-13,
        };
        let out = solve_and_round(&cost, &targets, &sopts, &CorrectionOptions::default()).unwrap();
        assert!(out.correction.fast_path);
        assert_eq!(out.measured_deviation, 0.0);
    }

    #[test]
    fn solve_and_round_certifies_the_bound() {
        let space = unit_product(2, 16);
        let cost = CostTensor::quadratic(space.clone());
        let targets = smooth_targets(&space, 8);
        let sopts = SolverOptions {
            h: 0.08,
            max_iterations: 4000,
            tolerance: 1e-5,
        };
        let out = solve_and_round(&cost, &targets, &sopts, &CorrectionOptions::default()).unwrap();
        assert!(out.solver_residual <= 1e-5);
        // Exact marginals after rounding.
        for (j, t) in targets.iter().enumerate() {
            let m = out.rounded.marginal_values(j).unwrap();
            assert!(sup_distance_values(&m, t.values()) <= 1e-10);
        }
        assert!(out.measured_deviation <= out.certified_bound + 1e-8);
        assert!((out.rounded.total_mass() - 1.0).abs() <= 1e-10);
    }
}

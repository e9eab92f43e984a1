//! Seeded synthetic fixtures: smooth strictly positive couplings and
//! gated marginal perturbations.
//!
//! Used by the regression and acceptance suites; all generators are
//! deterministic in the seed.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coupling::{Coupling, MarginalDensity};
use crate::error::{Error, Result};
use crate::space::ProductSpace;
use crate::sum::NeumaierSum;

/// Shape of the random smooth couplings.
#[derive(Debug, Clone)]
pub struct SmoothCouplingParams {
    /// Number of separable cosine modes.
    pub modes: usize,
    /// Frequencies are drawn from `1..=max_frequency` (cycles over the
    /// coordinate range).
    pub max_frequency: u32,
    /// Total relative amplitude of the modes; must stay below 1 so the
    /// coupling is strictly positive.
    pub amplitude: f64,
}

impl Default for SmoothCouplingParams {
    fn default() -> Self {
        Self {
            modes: 3,
            max_frequency: 2,
            amplitude: 0.6,
        }
    }
}

/// A strictly positive trigonometric coupling, exactly normalized on the
/// grid: `P = (1 + Σ_m a_m Π_j cos(2 pi f_m x_j + phi_{m,j})) / mass`.
pub fn smooth_coupling(
    space: Arc<ProductSpace>,
    seed: u64,
    params: &SmoothCouplingParams,
) -> Result<Coupling> {
    if !(params.amplitude >= 0.0 && params.amplitude < 1.0) {
        return Err(Error::InvalidParameter {
            detail: format!(
                "smooth coupling amplitude must be in [0, 1), got {}",
                params.amplitude
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = space.factor_count();
    let mut amps = Vec::with_capacity(params.modes);
    let mut freqs = Vec::with_capacity(params.modes);
    let mut phases = Vec::with_capacity(params.modes);
    let mut remaining = params.amplitude;
    for m in 0..params.modes {
        let a = if m + 1 == params.modes {
            remaining
        } else {
            rng.random_range(0.0..remaining)
        };
        remaining -= a;
        amps.push(if rng.random_bool(0.5) { a } else { -a });
        freqs.push(rng.random_range(1..=params.max_frequency) as f64);
        phases.push(
            (0..n)
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect::<Vec<f64>>(),
        );
    }

    let coord = |j: usize, i: usize| -> f64 { space.factor(j).point(i).iter().sum() };
    let shape = space.shape();
    let mut values = vec![0.0; space.cell_count()];
    let mut odo = crate::coupling::Odometer::new(&shape);
    let mut flat = 0usize;
    loop {
        let idx = odo.current();
        let mut v = 1.0;
        for m in 0..params.modes {
            let mut prod = amps[m];
            for j in 0..n {
                prod *= (std::f64::consts::TAU * freqs[m] * coord(j, idx[j]) + phases[m][j]).cos();
            }
            v += prod;
        }
        values[flat] = v;
        flat += 1;
        if !odo.advance() {
            break;
        }
    }

    // Exact normalization on the grid.
    let unnormalized = Coupling::new(space.clone(), values.clone(), false)?;
    let mass = unnormalized.total_mass();
    for v in &mut values {
        *v /= mass;
    }
    Coupling::new(space, values, true)
}

/// Perturb the `coord` marginal of `p` by a smooth, exactly mean-zero
/// profile of uniform norm `amplitude`. The result is a valid marginal
/// density as long as `amplitude` stays below the marginal's minimum.
pub fn perturbed_marginal(
    p: &Coupling,
    coord: usize,
    amplitude: f64,
    seed: u64,
) -> Result<MarginalDensity> {
    let marg = p.marginal_values(coord)?;
    let factor = p.space().factor_arc(coord);
    let weights = factor.weights().to_vec();
    let min_marg = marg.iter().cloned().fold(f64::INFINITY, f64::min);
    if amplitude >= min_marg {
        return Err(Error::InvalidParameter {
            detail: format!(
                "perturbation amplitude {amplitude} would break non-negativity (min marginal {min_marg})"
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70657274);
    let freq = rng.random_range(1..=2u32) as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let raw: Vec<f64> = (0..factor.len())
        .map(|i| {
            let x: f64 = factor.point(i).iter().sum();
            (std::f64::consts::TAU * freq * x + phase).cos()
        })
        .collect();
    // Exactly remove the weighted mean, then scale the sup norm.
    let mut acc = NeumaierSum::new();
    for (&g, &w) in raw.iter().zip(&weights) {
        acc.add(g * w);
    }
    let mean = acc.value();
    let centered: Vec<f64> = raw.iter().map(|g| g - mean).collect();
    let sup = centered.iter().map(|g| g.abs()).fold(0.0, f64::max);
    if sup == 0.0 {
        return Err(Error::InvalidParameter {
            detail: "degenerate perturbation profile".into(),
        });
    }
    let scale = amplitude / sup;
    let values: Vec<f64> = marg
        .iter()
        .zip(&centered)
        .map(|(&m, &g)| m + scale * g)
        .collect();
    if p.normalized() {
        MarginalDensity::new(factor, values)
    } else {
        MarginalDensity::new_unnormalized(factor, values)
    }
}

/// The exact marginals of `p` as target densities.
pub fn exact_targets(p: &Coupling) -> crate::error::Result<Vec<MarginalDensity>> {
    (0..p.space().factor_count()).map(|j| p.marginal(j)).collect()
}

/// A smooth coupling damped by a separable `floor + (1 - floor) sin^2(pi x)`
/// envelope per coordinate, exactly normalized. Its marginals dip close to
/// `floor` at the interval ends, which puts grid points below the
/// correction thresholds -- the regime the slice bound is about.
pub fn dipped_coupling(
    space: Arc<ProductSpace>,
    seed: u64,
    params: &SmoothCouplingParams,
    floor: f64,
) -> Result<Coupling> {
    if !(floor > 0.0 && floor < 1.0) {
        return Err(Error::InvalidParameter {
            detail: format!("envelope floor must be in (0, 1), got {floor}"),
        });
    }
    let base = smooth_coupling(space.clone(), seed, params)?;
    let envelopes: Vec<Vec<f64>> = space
        .factors()
        .iter()
        .map(|f| {
            (0..f.len())
                .map(|i| {
                    let x: f64 = f.point(i).iter().sum();
                    let s = (std::f64::consts::PI * x).sin();
                    floor + (1.0 - floor) * s * s
                })
                .collect()
        })
        .collect();
    let shape = space.shape();
    let mut values = base.values().to_vec();
    let mut odo = crate::coupling::Odometer::new(&shape);
    let mut flat = 0usize;
    loop {
        let idx = odo.current();
        let mut e = 1.0;
        for (j, env) in envelopes.iter().enumerate() {
            e *= env[idx[j]];
        }
        values[flat] *= e;
        flat += 1;
        if !odo.advance() {
            break;
        }
    }
    let unnormalized = Coupling::new(space.clone(), values.clone(), false)?;
    let mass = unnormalized.total_mass();
    for v in &mut values {
        *v /= mass;
    }
    Coupling::new(space, values, true)
}

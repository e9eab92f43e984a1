//! Tent-function counterexamples: necessity of compact support and of
//! continuity, and sharpness of the correction threshold.
//!
//! Each generator emits a coupling, an adversarial target marginal and a
//! certificate. The certified lower bounds use a support argument -- any
//! admissible corrected coupling must vanish on a strip where the target
//! marginal vanishes, so its uniform distance to the original is at least
//! the supremum of the original over that strip. The bound therefore holds
//! for *every* corrector, not just ours; nothing is searched.
//!
//! Grids are aligned so that tent peaks, feet and strip edges land on grid
//! points: suprema are attained on the grid and the certificates are exact
//! to rounding.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::continuity::{Modulus, SigmaFunction};
use crate::coupling::{unravel, Coupling, MarginalDensity, Odometer};
use crate::error::{Error, Result};
use crate::space::{MarginalSpace, ProductSpace, RadialFn};
use crate::sum::NeumaierSum;

/// Piecewise-linear hat of base `2 * half_base` and height `height`,
/// vanishing outside `[center - half_base, center + half_base]`.
#[derive(Debug, Clone, Copy)]
pub struct TentParams {
    pub half_base: f64,
    pub height: f64,
    pub center: f64,
}

impl TentParams {
    pub fn new(half_base: f64, height: f64, center: f64) -> Self {
        Self {
            half_base,
            height,
            center,
        }
    }

    /// Integral over the line: `half_base * height`.
    pub fn integral(&self) -> f64 {
        self.half_base * self.height
    }
}

/// Evaluate the tent at `t`.
pub fn tent(p: &TentParams, t: f64) -> f64 {
    let u = 1.0 - (t - p.center).abs() / p.half_base;
    if u > 0.0 {
        p.height * u
    } else {
        0.0
    }
}

fn max_axis_slope(values: &[f64], shape: &[usize], step: f64) -> f64 {
    let mut strides = vec![1usize; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }
    let mut worst = 0.0f64;
    let cells: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for a in 0..cells {
        unravel(a, shape, &mut idx);
        for ax in 0..shape.len() {
            if idx[ax] + 1 < shape[ax] {
                let b = a + strides[ax];
                let slope = (values[a] - values[b]).abs() / step;
                if slope > worst {
                    worst = slope;
                }
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Example A: compact support is necessary.
// ---------------------------------------------------------------------------

/// Certificate for the truncated non-compact-support example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateA {
    pub truncation: usize,
    pub resolution: usize,
    /// Normalizing constant of the tent series on the truncated domain.
    pub normalization: f64,
    /// Claimed forced deviation: any coupling with the adversarial marginal
    /// is uniformly at least this far from the original.
    pub claimed_lower_bound: f64,
    /// Measured sup of the coupling over the forced-zero strip.
    pub strip_sup: f64,
    /// Measured uniform gap between the adversarial and the true marginal.
    pub marginal_perturbation: f64,
    /// Allowance `c / n` the perturbation must stay below.
    pub perturbation_allowance: f64,
    pub coupling_mass: f64,
    pub pass: bool,
}

#[derive(Debug)]
pub struct ExampleAOutput {
    pub coupling: Coupling,
    pub target: MarginalDensity,
    pub certificate: CertificateA,
}

/// Tent series with peaks marching off along the first axis: peaks at
/// `y_k = k` for `k = 2..=n`, half-bases `1/k`, on
/// `[0, n+1] x [-1/2, 1/2]` with uniform probability measures. The
/// adversarial marginal vanishes on `[y_n - 1/n, y_n + 1/n]` yet stays
/// within `c/n` of the true marginal, while any coupling matching it is
/// forced at distance `>= c`.
///
/// `resolution` is the number of grid cells per unit length; it must be a
/// positive multiple of `2n` so tent peaks, the strip edges and the point
/// `x_2 = 0` land on grid points.
pub fn example_a(n: usize, resolution: usize) -> Result<ExampleAOutput> {
    if n < 2 {
        return Err(Error::InvalidParameter {
            detail: format!("example A needs truncation n >= 2, got {n}"),
        });
    }
    if resolution == 0 || resolution % (2 * n) != 0 {
        return Err(Error::TooCoarse {
            detail: format!(
                "resolution {resolution} cannot resolve the 1/{n} tents (tent peaks and strip edges must land on grid points)"
            ),
            minimal: format!("a positive multiple of 2n = {}", 2 * n),
        });
    }
    let domain_len = (n + 1) as f64;
    let x1 = Arc::new(MarginalSpace::trapezoid_interval(
        0.0,
        domain_len,
        (n + 1) * resolution,
    )?);
    let x2 = Arc::new(MarginalSpace::trapezoid_interval(-0.5, 0.5, resolution)?);
    let space = Arc::new(ProductSpace::new(vec![x1.clone(), x2.clone()])?);

    // Factor tents: along x1 the k-th tent peaks at y_k = k, along x2 it is
    // centered at 0.
    let tents: Vec<(TentParams, TentParams)> = (2..=n)
        .map(|k| {
            let b = 1.0 / k as f64;
            (
                TentParams::new(b, 1.0, k as f64),
                TentParams::new(b, 1.0, 0.0),
            )
        })
        .collect();

    let n1 = x1.len();
    let n2 = x2.len();
    let mut raw = vec![0.0f64; n1 * n2];
    for i1 in 0..n1 {
        let a = x1.point(i1)[0];
        for (t1, t2) in &tents {
            let v1 = tent(t1, a);
            if v1 == 0.0 {
                continue;
            }
            for i2 in 0..n2 {
                let v2 = tent(t2, x2.point(i2)[0]);
                if v2 != 0.0 {
                    raw[i1 * n2 + i2] += v1 * v2;
                }
            }
        }
    }
    let unnormalized = Coupling::new(space.clone(), raw.clone(), false)?;
    let c = 1.0 / unnormalized.total_mass();
    for v in &mut raw {
        *v *= c;
    }
    let coupling = Coupling::new(space, raw, true)?;

    // Forced-zero strip around the last peak.
    let y_n = n as f64;
    let half = 1.0 / n as f64;
    let strip = |x: f64| x >= y_n - half - 1e-12 && x <= y_n + half + 1e-12;
    let mut strip_sup = 0.0f64;
    for i1 in 0..n1 {
        if strip(x1.point(i1)[0]) {
            for i2 in 0..n2 {
                strip_sup = strip_sup.max(coupling.values()[i1 * n2 + i2]);
            }
        }
    }

    // Adversarial marginal: zero on the strip, removed mass re-inserted as
    // a wide tent where the marginal is largest (the k = 2 peak region),
    // or left of every tent when n = 2. The re-insertion site is one valid
    // choice among many; feet sit on grid points so continuity is kept.
    let marg = coupling.marginal_values(0)?;
    let mut target = marg.clone();
    let mut removed = NeumaierSum::new();
    for i1 in 0..n1 {
        if strip(x1.point(i1)[0]) {
            removed.add(target[i1] * x1.weight(i1));
            target[i1] = 0.0;
        }
    }
    let insert = if n >= 3 {
        TentParams::new(0.5, 1.0, 2.0)
    } else {
        TentParams::new(0.75, 1.0, 0.75)
    };
    let ins_raw: Vec<f64> = (0..n1).map(|i| tent(&insert, x1.point(i)[0])).collect();
    let ins_mass: f64 = {
        let mut acc = NeumaierSum::new();
        for (v, i) in ins_raw.iter().zip(0..n1) {
            acc.add(v * x1.weight(i));
        }
        acc.value()
    };
    let scale = removed.value() / ins_mass;
    for i1 in 0..n1 {
        target[i1] += scale * ins_raw[i1];
    }
    let target = MarginalDensity::new(x1.clone(), target)?;

    let perturbation = {
        let m = coupling.marginal(0)?;
        target.sup_distance(&m)?
    };
    let allowance = c / n as f64;

    let pass = (strip_sup - c).abs() <= 1e-12 * c.max(1.0)
        && perturbation <= allowance * (1.0 + 1e-9);
    let certificate = CertificateA {
        truncation: n,
        resolution,
        normalization: c,
        claimed_lower_bound: c,
        strip_sup,
        marginal_perturbation: perturbation,
        perturbation_allowance: allowance,
        coupling_mass: coupling.total_mass(),
        pass,
    };
    Ok(ExampleAOutput {
        coupling,
        target,
        certificate,
    })
}

// ---------------------------------------------------------------------------
// Example B: continuity of the coupling is necessary.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateB {
    pub truncation: usize,
    pub resolution: usize,
    pub claimed_lower_bound: f64,
    pub strip_sup: f64,
    pub marginal_perturbation: f64,
    /// Allowance `2^-n`.
    pub perturbation_allowance: f64,
    /// Largest error in the exact marginal peak identities
    /// `pi_1 P(3 / 2^k) = 2^-k`.
    pub marginal_peak_error: f64,
    pub coupling_mass: f64,
    pub pass: bool,
}

#[derive(Debug)]
pub struct ExampleBOutput {
    pub coupling: Coupling,
    pub target: MarginalDensity,
    pub certificate: CertificateB,
}

/// Dyadic tent series on `[0,1]^2` accumulating at the origin: tents of
/// half-base `2^-k` at `3/2^k` for `k = 2..=n+1` (the series includes term
/// `n+1` so the level-`n` strip `[2^-n, 2^-(n-1)]` contains its peak). The
/// coupling keeps the raw series scaling (mass `Σ 4^-k`, flagged
/// unnormalized) so the forced deviation equals the tent height 1 exactly;
/// the adversarial marginal vanishes on the strip yet moves the true
/// marginal by at most `2^-n`.
///
/// `resolution` must be a power of two at least `2^(n+1)` so every peak
/// `3/2^k` is a grid point.
pub fn example_b(n: usize, resolution: usize) -> Result<ExampleBOutput> {
    if n < 2 {
        return Err(Error::InvalidParameter {
            detail: format!("example B needs truncation n >= 2, got {n}"),
        });
    }
    if !resolution.is_power_of_two() {
        return Err(Error::NonDyadic {
            detail: format!(
                "resolution {resolution} is not a power of two; peaks at 3/2^k would miss the grid"
            ),
        });
    }
    let min_res = 1usize << (n + 1);
    if resolution < min_res {
        return Err(Error::TooCoarse {
            detail: format!(
                "resolution {resolution} cannot resolve the 2^-{} tents",
                n + 1
            ),
            minimal: format!("2^(n+1) = {min_res}"),
        });
    }
    let x = Arc::new(MarginalSpace::trapezoid_interval(0.0, 1.0, resolution)?);
    let space = Arc::new(ProductSpace::new(vec![x.clone(), x.clone()])?);

    let tents: Vec<TentParams> = (2..=n + 1)
        .map(|k| {
            let b = (0.5f64).powi(k as i32);
            TentParams::new(b, 1.0, 3.0 * b)
        })
        .collect();

    let m = x.len();
    let mut raw = vec![0.0f64; m * m];
    for i1 in 0..m {
        let a = x.point(i1)[0];
        for t in &tents {
            let v1 = tent(t, a);
            if v1 == 0.0 {
                continue;
            }
            for i2 in 0..m {
                let v2 = tent(t, x.point(i2)[0]);
                if v2 != 0.0 {
                    raw[i1 * m + i2] += v1 * v2;
                }
            }
        }
    }
    let coupling = Coupling::new(space, raw, false)?;

    // Exact marginal peak identities.
    let marg = coupling.marginal_values(0)?;
    let mut peak_err = 0.0f64;
    for (k, _t) in (2..=n + 1).zip(&tents) {
        let peak_x = 3.0 * (0.5f64).powi(k as i32);
        let i = (peak_x * resolution as f64).round() as usize;
        peak_err = peak_err.max((marg[i] - (0.5f64).powi(k as i32)).abs());
    }

    // Forced-zero strip [2^-n, 2^-(n-1)].
    let lo = (0.5f64).powi(n as i32);
    let hi = (0.5f64).powi(n as i32 - 1);
    let strip = |t: f64| (lo - 1e-15..=hi + 1e-15).contains(&t);
    let mut strip_sup = 0.0f64;
    for i1 in 0..m {
        if strip(x.point(i1)[0]) {
            for i2 in 0..m {
                strip_sup = strip_sup.max(coupling.values()[i1 * m + i2]);
            }
        }
    }

    // Adversarial marginal: zero on the strip, mass re-inserted over the
    // outermost tent's support [1/2, 1].
    let mut target = marg.clone();
    let mut removed = NeumaierSum::new();
    for i1 in 0..m {
        if strip(x.point(i1)[0]) {
            removed.add(target[i1] * x.weight(i1));
            target[i1] = 0.0;
        }
    }
    let insert = TentParams::new(0.25, 1.0, 0.75);
    let ins_raw: Vec<f64> = (0..m).map(|i| tent(&insert, x.point(i)[0])).collect();
    let ins_mass: f64 = {
        let mut acc = NeumaierSum::new();
        for (v, i) in ins_raw.iter().zip(0..m) {
            acc.add(v * x.weight(i));
        }
        acc.value()
    };
    let scale = removed.value() / ins_mass;
    for i1 in 0..m {
        target[i1] += scale * ins_raw[i1];
    }
    let target = MarginalDensity::new_unnormalized(x.clone(), target)?;

    let perturbation = {
        let mut worst = 0.0f64;
        for (a, b) in target.values().iter().zip(&marg) {
            worst = worst.max((a - b).abs());
        }
        worst
    };
    let allowance = (0.5f64).powi(n as i32);

    let pass = (strip_sup - 1.0).abs() <= 1e-12
        && perturbation <= allowance * (1.0 + 1e-9)
        && peak_err <= 1e-13;
    let certificate = CertificateB {
        truncation: n,
        resolution,
        claimed_lower_bound: 1.0,
        strip_sup,
        marginal_perturbation: perturbation,
        perturbation_allowance: allowance,
        marginal_peak_error: peak_err,
        coupling_mass: coupling.total_mass(),
        pass,
    };
    Ok(ExampleBOutput {
        coupling,
        target,
        certificate,
    })
}

// ---------------------------------------------------------------------------
// Example C: sharpness of the threshold for Lipschitz couplings.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleCParams {
    pub eps: f64,
    /// Lipschitz budget `L` of the tent-product part.
    pub lipschitz: f64,
    /// Number of factors `N >= 2`.
    pub factors: usize,
    /// Lipschitz budget for the filler; `None` accepts whatever the
    /// construction needs and merely reports the measured constant.
    pub filler_budget: Option<f64>,
    /// Grid cells per unit length; must be a multiple of 4 with
    /// `resolution * eps / lipschitz` an integer.
    pub resolution: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateC {
    pub eps: f64,
    pub lipschitz: f64,
    pub factors: usize,
    pub resolution: usize,
    /// Measured axis slope of the tent-product part; must not exceed the
    /// Lipschitz budget.
    pub tent_lipschitz_measured: f64,
    /// Measured axis slope of the filler.
    pub filler_lipschitz_measured: f64,
    pub filler_integral: f64,
    /// Measured `|| rho_1 - pi_1 P ||_inf`.
    pub marginal_gap: f64,
    /// Closed-form threshold `eps^N / (N^N L^(N-1))`.
    pub sigma_closed_form: f64,
    /// Numeric threshold from the analytic profile, for cross-checking.
    pub sigma_numeric: f64,
    /// `marginal_gap / sigma_closed_form`; equals `N^N` when the
    /// construction is exact.
    pub gap_over_sigma: f64,
    /// `N^N`.
    pub sharpness_constant: f64,
    /// sup of the coupling over the region any corrected coupling must
    /// vanish on; equals the tent peak `h^N = eps`.
    pub forced_deviation: f64,
    pub coupling_mass: f64,
    pub pass: bool,
}

#[derive(Debug)]
pub struct ExampleCOutput {
    pub coupling: Coupling,
    pub target: MarginalDensity,
    pub certificate: CertificateC,
}

/// Capacity bound: the largest integral of a non-negative `budget`-Lipschitz
/// function (l1 metric) supported in a cube of side `side` in dimension
/// `dim` is `budget * side^(dim+1) / (2 (dim + 1))`.
pub fn filler_capacity(budget: f64, side: f64, dim: usize) -> f64 {
    budget * side.powi(dim as i32 + 1) / (2.0 * (dim as f64 + 1.0))
}

/// Sharpness construction: a tent spike of half-base `b = eps/L` and height
/// `h = eps^(1/N)` at `(1/4, ..., 1/4)` plus a filler supported in
/// `[1/2, 1]^N` carrying the remaining mass. The adversarial marginal is
/// supported in `[1/2, 1]` at uniform distance exactly `b^(N-1) h^N =
/// N^N sigma(eps)` from the true marginal, yet forces every corrected
/// coupling to distance `>= h^N = eps`.
pub fn example_c(params: &ExampleCParams) -> Result<ExampleCOutput> {
    let ExampleCParams {
        eps,
        lipschitz: big_l,
        factors: n,
        filler_budget,
        resolution,
    } = *params;
    if n < 2 {
        return Err(Error::InvalidParameter {
            detail: format!("example C needs N >= 2 factors, got {n}"),
        });
    }
    if !(eps > 0.0) || !(big_l > 0.0) || !(eps < big_l / 4.0) {
        return Err(Error::InvalidParameter {
            detail: format!("example C needs 0 < eps < L/4, got eps = {eps}, L = {big_l}"),
        });
    }
    let b = eps / big_l;
    let h = eps.powf(1.0 / n as f64);
    let cells_in_b = resolution as f64 * b;
    let aligned = (cells_in_b - cells_in_b.round()).abs() <= 1e-9 && cells_in_b.round() >= 1.0;
    if resolution == 0 || resolution % 4 != 0 || !aligned {
        let suggestion = (4..=65536usize)
            .step_by(4)
            .find(|k| {
                let c = *k as f64 * b;
                (c - c.round()).abs() <= 1e-9 && c.round() >= 1.0
            })
            .map(|k| k.to_string())
            .unwrap_or_else(|| format!("none <= 65536; b = {b} is not commensurate with a multiple-of-4 grid"));
        return Err(Error::TooCoarse {
            detail: format!(
                "resolution {resolution} does not align the tent of half-base b = {b} (need a multiple of 4 with resolution * b an integer >= 1)"
            ),
            minimal: suggestion,
        });
    }

    let factor = Arc::new(MarginalSpace::trapezoid_interval(0.0, 1.0, resolution)?);
    let factors_vec: Vec<_> = (0..n).map(|_| factor.clone()).collect();
    let space = Arc::new(ProductSpace::new(factors_vec)?);
    let shape = space.shape();
    let m = factor.len();
    let step = 1.0 / resolution as f64;

    let spike = TentParams::new(b, h, 0.25);
    let spike_1d: Vec<f64> = (0..m).map(|i| tent(&spike, factor.point(i)[0])).collect();
    let fill = TentParams::new(0.25, 1.0, 0.75);
    let fill_1d: Vec<f64> = (0..m).map(|i| tent(&fill, factor.point(i)[0])).collect();

    // Filler scale: carry mass 1 - (b h)^N.
    let spike_mass = (b * h).powi(n as i32);
    let target_integral = 1.0 - spike_mass;
    let fill_mass_unscaled = (0.25f64).powi(n as i32);
    let amp = target_integral / fill_mass_unscaled;
    let filler_lip = amp * 4.0;
    if let Some(budget) = filler_budget {
        if filler_lip > budget * (1.0 + 1e-9) {
            return Err(Error::InfeasibleFiller {
                required: target_integral,
                budget,
                max_achievable: filler_capacity(budget, 0.5, n).min(budget / 4.0 * fill_mass_unscaled),
            });
        }
    }

    let cells: usize = shape.iter().product();
    let mut tent_part = vec![0.0f64; cells];
    let mut values = vec![0.0f64; cells];
    let mut fill_part = vec![0.0f64; cells];
    let mut odo = Odometer::new(&shape);
    let mut flat = 0usize;
    loop {
        let idx = odo.current();
        let mut t = 1.0;
        let mut q = amp;
        for &i in idx {
            t *= spike_1d[i];
            q *= fill_1d[i];
        }
        tent_part[flat] = t;
        fill_part[flat] = q;
        values[flat] = t + q;
        flat += 1;
        if !odo.advance() {
            break;
        }
    }
    let coupling = Coupling::new(space.clone(), values, true)?;

    let tent_lip = max_axis_slope(&tent_part, &shape, step);
    let filler_lip_measured = max_axis_slope(&fill_part, &shape, step);

    // Adversarial marginal: drop everything left of 1/2 (the spike's
    // marginal bump), re-insert its mass over [1/2, 1].
    let marg = coupling.marginal_values(0)?;
    let mut target = marg.clone();
    let mut removed = NeumaierSum::new();
    for i in 0..m {
        if factor.point(i)[0] < 0.5 - 1e-15 {
            removed.add(target[i] * factor.weight(i));
            target[i] = 0.0;
        }
    }
    let ins_mass: f64 = {
        let mut acc = NeumaierSum::new();
        for i in 0..m {
            acc.add(fill_1d[i] * factor.weight(i));
        }
        acc.value()
    };
    let scale = removed.value() / ins_mass;
    for i in 0..m {
        target[i] += scale * fill_1d[i];
    }
    let target = MarginalDensity::new(factor.clone(), target)?;
    let gap = {
        let mut worst = 0.0f64;
        for (a, bv) in target.values().iter().zip(&marg) {
            worst = worst.max((a - bv).abs());
        }
        worst
    };

    // Forced deviation: sup of P over x_1 <= 1/2 (the region where any
    // coupling with the adversarial marginal must vanish).
    let mut forced = 0.0f64;
    let mut odo = Odometer::new(&shape);
    let mut flat = 0usize;
    loop {
        let idx = odo.current();
        if factor.point(idx[0])[0] <= 0.5 + 1e-15 {
            forced = forced.max(coupling.values()[flat]);
        }
        flat += 1;
        if !odo.advance() {
            break;
        }
    }

    let sigma_closed = eps.powi(n as i32) / ((n as f64).powi(n as i32) * big_l.powi(n as i32 - 1));
    let sigma_numeric = {
        let modulus = Modulus::lipschitz(big_l, n as f64)?;
        let radials = vec![RadialFn::Interval { length: 1.0 }; n - 1];
        SigmaFunction::new(0, modulus, radials, n)?.eval(eps)?
    };
    let sharp = (n as f64).powi(n as i32);
    let ratio = gap / sigma_closed;

    let pass = tent_lip <= big_l * (1.0 + 1e-9)
        && (ratio - sharp).abs() <= 1e-9 * sharp
        && (forced - eps).abs() <= 1e-12
        && (sigma_numeric - sigma_closed).abs() <= 1e-9 * sigma_closed;
    let certificate = CertificateC {
        eps,
        lipschitz: big_l,
        factors: n,
        resolution,
        tent_lipschitz_measured: tent_lip,
        filler_lipschitz_measured: filler_lip_measured,
        filler_integral: target_integral,
        marginal_gap: gap,
        sigma_closed_form: sigma_closed,
        sigma_numeric,
        gap_over_sigma: ratio,
        sharpness_constant: sharp,
        forced_deviation: forced,
        coupling_mass: coupling.total_mass(),
        pass,
    };
    Ok(ExampleCOutput {
        coupling,
        target,
        certificate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sharpness_window_brackets_the_corrector_gate() {
        // Targets at 0.99 of the corrector's own stage threshold round
        // fine, while the certificate shows that targets at N^N sigma(eps)
        // force deviation >= eps: the window between the two is where
        // sharpness lives.
        use crate::continuity::SigmaProfile;
        use crate::correction::{multi_marginal_correct, CorrectionOptions};
        use crate::coupling::MarginalDensity;

        let p = ExampleCParams {
            eps: 0.1,
            lipschitz: 1.0,
            factors: 2,
            filler_budget: None,
            resolution: 40,
        };
        let out = example_c(&p).unwrap();
        let coupling = &out.coupling;
        let space = coupling.space().clone();
        let modulus = crate::continuity::empirical_modulus(
            coupling,
            &crate::continuity::EmpiricalOptions::default(),
        );
        let marg = coupling.marginal_values(0).unwrap();
        let profile = SigmaProfile::build(&space, modulus, 0, &marg).unwrap();
        let eps_run = 0.1;
        let sigma_gate = profile.sigma(eps_run).unwrap();
        let amp = 0.99 * sigma_gate;

        // Mean-zero perturbation supported where the marginal is large:
        // opposite tents inside [1/2, 1], both with on-grid feet.
        let factor = space.factor(0);
        let up = TentParams::new(0.125, 1.0, 0.625);
        let down = TentParams::new(0.125, 1.0, 0.875);
        let target0: Vec<f64> = (0..factor.len())
            .map(|i| {
                let x = factor.point(i)[0];
                marg[i] + amp * (tent(&up, x) - tent(&down, x))
            })
            .collect();
        let targets = vec![
            MarginalDensity::new(space.factor_arc(0), target0).unwrap(),
            coupling.marginal(1).unwrap(),
        ];
        let (q, report) =
            multi_marginal_correct(coupling, &targets, &CorrectionOptions::default()).unwrap();
        assert!(report.max_marginal_residual <= 1e-10);
        assert!((q.total_mass() - 1.0).abs() <= 1e-10);
        // The certificate side of the window: the adversarial marginal at
        // N^N sigma_closed forces deviation >= eps.
        assert!(out.certificate.gap_over_sigma >= 4.0 - 1e-9);
        assert!(out.certificate.forced_deviation >= p.eps - 1e-12);
    }

    #[test]
    fn tent_values() {
        let t = TentParams::new(0.5, 2.0, 0.0);
        assert_eq!(tent(&t, 0.0), 2.0);
        assert_eq!(tent(&t, 0.5), 0.0);
        assert_eq!(tent(&t, -0.5), 0.0);
        assert!((tent(&t, 0.25) - 1.0).abs() < 1e-15);
        assert_eq!(tent(&t, 3.0), 0.0);
    }

    #[test]
    fn example_a_certificate_n4() {
        let out = example_a(4, 16).unwrap();
        let c = &out.certificate;
        assert!(c.pass, "{c:?}");
        assert!((c.strip_sup - c.normalization).abs() <= 1e-12 * c.normalization);
        assert!(c.marginal_perturbation <= c.perturbation_allowance * (1.0 + 1e-9));
        assert!((c.coupling_mass - 1.0).abs() < 1e-10);
        assert!((out.target.mass() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn example_a_n2_insertion_avoids_strip() {
        let out = example_a(2, 8).unwrap();
        assert!(out.certificate.pass, "{:?}", out.certificate);
        // The marginal must actually vanish on the strip.
        let x1 = out.coupling.space().factor(0);
        for i in 0..x1.len() {
            let x = x1.point(i)[0];
            if (1.5..=2.5).contains(&x) {
                assert_eq!(out.target.values()[i], 0.0, "x = {x}");
            }
        }
    }

    #[test]
    fn example_a_rejects_coarse_grid() {
        let e = example_a(3, 4).unwrap_err();
        match e {
            Error::TooCoarse { minimal, .. } => assert!(minimal.contains("6")),
            other => panic!("expected TooCoarse, got {other:?}"),
        }
    }

    #[test]
    fn example_b_certificate_n5() {
        let out = example_b(5, 128).unwrap();
        let c = &out.certificate;
        assert!(c.pass, "{c:?}");
        assert_eq!(c.strip_sup, 1.0);
        assert!(c.marginal_peak_error <= 1e-15, "{}", c.marginal_peak_error);
        assert!(c.marginal_perturbation <= (0.5f64).powi(5));
        // Raw series scaling: the mass is the sum of 4^-k, not 1.
        let expect_mass: f64 = (2..=6).map(|k| (0.25f64).powi(k)).sum();
        assert!((c.coupling_mass - expect_mass).abs() < 1e-12);
        assert!(!out.coupling.normalized());
    }

    #[test]
    fn example_b_rejects_non_dyadic() {
        assert!(matches!(
            example_b(3, 100).unwrap_err(),
            Error::NonDyadic { .. }
        ));
        assert!(matches!(
            example_b(5, 32).unwrap_err(),
            Error::TooCoarse { .. }
        ));
    }

    #[test]
    fn example_c_certificate_n2() {
        let p = ExampleCParams {
            eps: 0.1,
            lipschitz: 1.0,
            factors: 2,
            filler_budget: None,
            resolution: 40,
        };
        let out = example_c(&p).unwrap();
        let c = &out.certificate;
        assert!(c.pass, "{c:?}");
        assert!((c.gap_over_sigma - 4.0).abs() <= 1e-9);
        assert!((c.forced_deviation - 0.1).abs() <= 1e-12);
        assert!(c.tent_lipschitz_measured <= 1.0 + 1e-9);
        assert!((c.coupling_mass - 1.0).abs() < 1e-10);
    }

    #[test]
    fn example_c_slope_attains_budget() {
        // The tent product really is L-steep: h^N / b = L.
        let p = ExampleCParams {
            eps: 0.2,
            lipschitz: 1.0,
            factors: 2,
            filler_budget: None,
            resolution: 40,
        };
        let out = example_c(&p).unwrap();
        assert!(
            (out.certificate.tent_lipschitz_measured - 1.0).abs() <= 1e-9,
            "{}",
            out.certificate.tent_lipschitz_measured
        );
    }

    #[test]
    fn example_c_infeasible_filler() {
        let p = ExampleCParams {
            eps: 0.1,
            lipschitz: 1.0,
            factors: 2,
            filler_budget: Some(1.0),
            resolution: 40,
        };
        match example_c(&p).unwrap_err() {
            Error::InfeasibleFiller {
                required,
                max_achievable,
                ..
            } => {
                assert!(required > max_achievable);
            }
            other => panic!("expected InfeasibleFiller, got {other:?}"),
        }
    }

    #[test]
    fn example_c_rejects_misaligned_grid() {
        let p = ExampleCParams {
            eps: 0.1,
            lipschitz: 1.0,
            factors: 2,
            filler_budget: None,
            resolution: 30,
        };
        assert!(matches!(example_c(&p).unwrap_err(), Error::TooCoarse { .. }));
    }

    #[test]
    fn tent_product_empirical_modulus_below_lipschitz_line() {
        // The empirical modulus of the 2-factor tent-product coupling stays
        // below L * r at every tabulated radius.
        let p = ExampleCParams {
            eps: 0.1,
            lipschitz: 1.0,
            factors: 2,
            filler_budget: None,
            resolution: 20,
        };
        let out = example_c(&p).unwrap();
        let modulus = crate::continuity::empirical_modulus(
            &out.coupling,
            &crate::continuity::EmpiricalOptions::default(),
        );
        let l_measured = out
            .certificate
            .tent_lipschitz_measured
            .max(out.certificate.filler_lipschitz_measured);
        if let crate::continuity::ModulusKind::Empirical { radii, values } = modulus.kind() {
            for (r, v) in radii.iter().zip(values) {
                assert!(
                    *v <= l_measured * r + 1e-12,
                    "omega({r}) = {v} above the Lipschitz line"
                );
            }
        } else {
            panic!("expected empirical modulus");
        }
    }
}

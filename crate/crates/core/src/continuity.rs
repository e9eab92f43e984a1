//! Moduli of continuity, the per-coordinate threshold functions sigma_j,
//! and the constants (c_j, kappa_j, K_j) of the correction theorem.
//!
//! The threshold for coordinate `j` at budget `eps` is
//!
//! ```text
//! sigma_j(eps) = eps * sup_{theta in (0,1)} (1 - theta) * prod_{k != j} f_k( w_inv(theta * eps) / (N - 1) )
//! ```
//!
//! where `w_inv` is the generalized inverse of the modulus and `f_k` are the
//! radial maximal functions of the other factors. When either the modulus
//! or every radial function is piecewise constant, the supremum is attained
//! at plateau boundaries and is computed exactly by enumerating them; the
//! generic dense-scan-plus-golden-section search is kept for the smooth
//! analytic case.

use serde::{Deserialize, Serialize};

use crate::coupling::{unravel, Coupling};
use crate::error::{Error, Result};
use crate::space::{ProductSpace, RadialFn};
use crate::sum::NeumaierSum;

/// Modulus of continuity: the least non-decreasing bound on `|P(x) - P(y)|`
/// in terms of `d(x, y)`.
#[derive(Debug, Clone)]
pub enum ModulusKind {
    /// `w(r) = L r`.
    Lipschitz { l: f64 },
    /// `w(r) = C r^alpha`, `alpha` in (0, 1].
    Hoelder { c: f64, alpha: f64 },
    /// Tabulated upper envelope: sorted radii with non-decreasing values,
    /// starting at `(0, 0)`. Evaluation is right-continuous and
    /// conservative (rounds the radius up to the next tabulated one).
    Empirical { radii: Vec<f64>, values: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct Modulus {
    kind: ModulusKind,
    /// Diameter of the product space the modulus lives on; caps the
    /// generalized inverse.
    domain_diameter: f64,
}

impl Modulus {
    pub fn lipschitz(l: f64, domain_diameter: f64) -> Result<Self> {
        if !(l > 0.0) {
            return Err(Error::InvalidParameter {
                detail: format!("Lipschitz constant must be positive, got {l}"),
            });
        }
        Ok(Self {
            kind: ModulusKind::Lipschitz { l },
            domain_diameter,
        })
    }

    pub fn hoelder(c: f64, alpha: f64, domain_diameter: f64) -> Result<Self> {
        if !(c > 0.0) || !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidParameter {
                detail: format!("Hoelder modulus needs C > 0 and alpha in (0,1], got C={c}, alpha={alpha}"),
            });
        }
        Ok(Self {
            kind: ModulusKind::Hoelder { c, alpha },
            domain_diameter,
        })
    }

    pub fn empirical(radii: Vec<f64>, values: Vec<f64>, domain_diameter: f64) -> Result<Self> {
        if radii.len() != values.len() || radii.is_empty() {
            return Err(Error::InvalidParameter {
                detail: "empirical modulus table must be non-empty with matching lengths".into(),
            });
        }
        if radii[0] != 0.0 || values[0] != 0.0 {
            return Err(Error::InvalidParameter {
                detail: "empirical modulus table must start at (0, 0)".into(),
            });
        }
        for w in radii.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidParameter {
                    detail: "empirical modulus radii must be strictly increasing".into(),
                });
            }
        }
        for w in values.windows(2) {
            if w[1] < w[0] {
                return Err(Error::InvalidParameter {
                    detail: "empirical modulus values must be non-decreasing".into(),
                });
            }
        }
        Ok(Self {
            kind: ModulusKind::Empirical { radii, values },
            domain_diameter,
        })
    }

    pub fn kind(&self) -> &ModulusKind {
        &self.kind
    }

    pub fn domain_diameter(&self) -> f64 {
        self.domain_diameter
    }

    /// `w(r)`. For the empirical kind this is the conservative step
    /// envelope: the value at the smallest tabulated radius `>= r`, or the
    /// last value beyond the table.
    pub fn eval(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        match &self.kind {
            ModulusKind::Lipschitz { l } => l * r,
            ModulusKind::Hoelder { c, alpha } => c * r.powf(*alpha),
            ModulusKind::Empirical { radii, values } => {
                let i = radii.partition_point(|x| *x < r);
                if i == radii.len() {
                    values[radii.len() - 1]
                } else {
                    values[i]
                }
            }
        }
    }

    /// Generalized inverse `sup { r >= 0 : w(r) <= t }`, capped at the
    /// domain diameter. For the empirical kind: the largest tabulated
    /// radius whose value is `<= t` (the cap when every tabulated value
    /// qualifies).
    pub fn inverse(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let raw = match &self.kind {
            ModulusKind::Lipschitz { l } => t / l,
            ModulusKind::Hoelder { c, alpha } => (t / c).powf(1.0 / alpha),
            ModulusKind::Empirical { radii, values } => {
                let i = values.partition_point(|v| *v <= t);
                if i == values.len() {
                    self.domain_diameter
                } else {
                    radii[i - 1]
                }
            }
        };
        raw.min(self.domain_diameter)
    }

    fn is_step(&self) -> bool {
        matches!(self.kind, ModulusKind::Empirical { .. })
    }

    /// Plateau table of the generalized inverse: pairs `(value, radius)`
    /// such that `inverse(t) = radius` for `t` in `[value, next value)`.
    fn inverse_plateaus(&self) -> Vec<(f64, f64)> {
        let ModulusKind::Empirical { radii, values } = &self.kind else {
            unreachable!("inverse_plateaus on analytic modulus");
        };
        let mut out: Vec<(f64, f64)> = Vec::new();
        for i in 0..values.len() {
            // Keep the largest radius of every run of equal values.
            if i + 1 < values.len() && values[i + 1] == values[i] {
                continue;
            }
            out.push((values[i], radii[i].min(self.domain_diameter)));
        }
        // Beyond the table the inverse is the domain diameter.
        if let Some(last) = out.last_mut() {
            last.1 = self.domain_diameter;
        }
        out
    }
}

/// Parsed modulus configuration (CLI / file format).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModulusConfig {
    Lipschitz {
        #[serde(rename = "L")]
        l: f64,
    },
    Hoelder {
        #[serde(rename = "C")]
        c: f64,
        alpha: f64,
    },
    /// Computed from the input coupling on the grid.
    Empirical,
}

/// Options for the empirical modulus estimator.
#[derive(Debug, Clone)]
pub struct EmpiricalOptions {
    /// Number of distance buckets; pair distances round up to the bucket
    /// edge, which over-estimates the modulus (the safe direction).
    pub buckets: usize,
    /// Use every unordered grid pair when their count does not exceed this.
    pub exhaustive_pair_limit: usize,
    /// Random pairs drawn when the pair count is above the exhaustive
    /// limit; all axis-adjacent pairs are always included.
    pub sample_pairs: usize,
    pub seed: u64,
}

impl Default for EmpiricalOptions {
    fn default() -> Self {
        Self {
            buckets: 2048,
            exhaustive_pair_limit: 10_000_000,
            sample_pairs: 2_000_000,
            seed: 0,
        }
    }
}

impl ModulusConfig {
    /// Resolve the configuration against a coupling. Analytic moduli take
    /// precedence over grid-sampled ones when configured, because sampled
    /// tables under-estimate the modulus of the continuum object.
    pub fn resolve(&self, coupling: &Coupling, opts: &EmpiricalOptions) -> Result<Modulus> {
        let diameter = coupling.space().diameter();
        match self {
            ModulusConfig::Lipschitz { l } => Modulus::lipschitz(*l, diameter),
            ModulusConfig::Hoelder { c, alpha } => Modulus::hoelder(*c, *alpha, diameter),
            ModulusConfig::Empirical => Ok(empirical_modulus(coupling, opts)),
        }
    }
}

/// Estimate the modulus of continuity of a coupling from grid pairs.
///
/// All unordered pairs are scanned when their count is at most
/// `opts.exhaustive_pair_limit`; otherwise all axis-adjacent pairs plus a
/// seeded random sample. Oscillations aggregate by bucket maximum at the
/// bucket's right edge, so the table over-estimates the grid modulus for
/// every sampled pair (and the resulting sigma under-estimates: corrections
/// stay valid).
pub fn empirical_modulus(coupling: &Coupling, opts: &EmpiricalOptions) -> Modulus {
    use rand::{Rng, SeedableRng};

    let space = coupling.space();
    let shape = space.shape();
    let cells = coupling.values().len();
    let diameter = space.diameter();
    let nb = opts.buckets.max(1);
    let mut bucket_max = vec![0.0f64; nb];
    let values = coupling.values();

    let mut ia = vec![0usize; shape.len()];
    let mut ib = vec![0usize; shape.len()];
    let record = |a: usize, b: usize, ia: &[usize], ib: &[usize], bucket_max: &mut [f64]| {
        let mut d = 0.0;
        for (j, f) in space.factors().iter().enumerate() {
            d += f.distance(ia[j], ib[j]);
        }
        let osc = (values[a] - values[b]).abs();
        let t = ((d / diameter) * nb as f64).ceil() as usize;
        let t = t.clamp(1, nb) - 1;
        if osc > bucket_max[t] {
            bucket_max[t] = osc;
        }
    };

    let pair_count = cells.saturating_mul(cells.saturating_sub(1)) / 2;
    if pair_count <= opts.exhaustive_pair_limit {
        for a in 0..cells {
            unravel(a, &shape, &mut ia);
            for b in (a + 1)..cells {
                unravel(b, &shape, &mut ib);
                record(a, b, &ia, &ib, &mut bucket_max);
            }
        }
    } else {
        // Axis-adjacent pairs pin down the local slopes exactly.
        let mut strides = vec![1usize; shape.len()];
        for ax in (0..shape.len().saturating_sub(1)).rev() {
            strides[ax] = strides[ax + 1] * shape[ax + 1];
        }
        for a in 0..cells {
            unravel(a, &shape, &mut ia);
            for ax in 0..shape.len() {
                if ia[ax] + 1 < shape[ax] {
                    let b = a + strides[ax];
                    ib.copy_from_slice(&ia);
                    ib[ax] += 1;
                    record(a, b, &ia, &ib, &mut bucket_max);
                }
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
        let mut drawn = 0usize;
        while drawn < opts.sample_pairs {
            let a = rng.random_range(0..cells);
            let b = rng.random_range(0..cells);
            if a == b {
                continue;
            }
            unravel(a, &shape, &mut ia);
            unravel(b, &shape, &mut ib);
            record(a, b, &ia, &ib, &mut bucket_max);
            drawn += 1;
        }
    }

    let mut radii = Vec::with_capacity(nb + 1);
    let mut vals = Vec::with_capacity(nb + 1);
    radii.push(0.0);
    vals.push(0.0);
    let mut running = 0.0f64;
    for t in 0..nb {
        running = running.max(bucket_max[t]);
        radii.push(diameter * (t + 1) as f64 / nb as f64);
        vals.push(running);
    }
    Modulus::empirical(radii, vals, diameter).expect("constructed table is valid")
}

/// Value of the threshold together with the maximizing scan point.
#[derive(Debug, Clone, Copy)]
pub struct SigmaValue {
    pub sigma: f64,
    pub theta_star: f64,
}

#[derive(Debug, Clone)]
enum SigmaEngine {
    /// Exact plateau enumeration: `sigma(eps) = max_i (eps - t_i) * p_i`
    /// over entries with `t_i < eps`.
    Table { thresholds: Vec<f64>, prodf: Vec<f64> },
    /// Dense theta-scan plus golden-section refinement (smooth analytic
    /// modulus with interval radials, and the mixed fallback).
    Scan { extra_thresholds: Vec<f64> },
}

/// The threshold function for one coordinate: the modulus, the other
/// factors' radial functions, and the evaluation engine.
#[derive(Debug, Clone)]
pub struct SigmaFunction {
    coord: usize,
    modulus: Modulus,
    radials: Vec<RadialFn>,
    factor_count: usize,
    engine: SigmaEngine,
}

const THETA_SCAN_SAMPLES: usize = 512;
const THETA_LADDER: [f64; 5] = [1e-12, 1e-9, 1e-6, 1e-4, 1e-3];
const GOLDEN_ITERS: usize = 90;

impl SigmaFunction {
    /// `radials` are the radial maximal functions of the factors `k != j`;
    /// `factor_count` is `N`.
    pub fn new(
        coord: usize,
        modulus: Modulus,
        radials: Vec<RadialFn>,
        factor_count: usize,
    ) -> Result<Self> {
        if factor_count < 2 || radials.len() != factor_count - 1 {
            return Err(Error::InvalidParameter {
                detail: format!(
                    "sigma function needs N - 1 = {} radial functions, got {}",
                    factor_count.saturating_sub(1),
                    radials.len()
                ),
            });
        }
        let engine = Self::build_engine(&modulus, &radials, factor_count);
        Ok(Self {
            coord,
            modulus,
            radials,
            factor_count,
            engine,
        })
    }

    fn prod_radials(radials: &[RadialFn], u: f64) -> f64 {
        radials.iter().map(|f| f.eval(u)).product()
    }

    fn build_engine(modulus: &Modulus, radials: &[RadialFn], n: usize) -> SigmaEngine {
        let nm1 = (n - 1) as f64;
        if modulus.is_step() {
            // The inverse is piecewise constant; on each plateau the
            // objective decreases in theta, so the supremum sits at plateau
            // left ends.
            let plateaus = modulus.inverse_plateaus();
            let mut thresholds = Vec::with_capacity(plateaus.len());
            let mut prodf = Vec::with_capacity(plateaus.len());
            for (v, r) in plateaus {
                thresholds.push(v);
                prodf.push(Self::prod_radials(radials, r / nm1));
            }
            return SigmaEngine::Table { thresholds, prodf };
        }
        let all_steps = radials.iter().all(|f| f.breakpoints().is_some());
        if all_steps {
            // The product of radial functions is piecewise constant in the
            // ball radius u; between its jumps the objective decreases, so
            // the supremum again sits at region left ends, at
            // theta = w(u_left * (N-1)) / eps.
            let cap = modulus.domain_diameter() / nm1;
            let mut bps: Vec<f64> = vec![0.0];
            for f in radials {
                for &b in f.breakpoints().expect("checked step") {
                    if b < cap {
                        bps.push(b);
                    }
                }
            }
            bps.sort_by(|a, b| a.total_cmp(b));
            bps.dedup();
            let mut thresholds = Vec::with_capacity(bps.len());
            let mut prodf = Vec::with_capacity(bps.len());
            for (s, &b) in bps.iter().enumerate() {
                // Representative radius inside the region (b, next]. The
                // ball radius never exceeds `cap` (the inverse is capped at
                // the domain diameter), so the last region is probed at
                // `cap` itself -- probing beyond could cross radial jumps
                // the capped inverse cannot reach.
                let rep = if s + 1 < bps.len() { bps[s + 1] } else { cap };
                thresholds.push(modulus.eval(b * nm1));
                prodf.push(Self::prod_radials(radials, rep));
            }
            return SigmaEngine::Table { thresholds, prodf };
        }
        // Mixed radials with an analytic modulus: scan plus golden section,
        // seeded with the step radials' jump locations.
        let mut extra = Vec::new();
        for f in radials {
            if let Some(bps) = f.breakpoints() {
                for &b in bps {
                    extra.push(modulus.eval(b * nm1));
                }
            }
        }
        extra.sort_by(|a, b| a.total_cmp(b));
        extra.dedup();
        SigmaEngine::Scan {
            extra_thresholds: extra,
        }
    }

    pub fn coord(&self) -> usize {
        self.coord
    }

    pub fn modulus(&self) -> &Modulus {
        &self.modulus
    }

    pub fn factor_count(&self) -> usize {
        self.factor_count
    }

    fn objective(&self, theta: f64, eps: f64) -> f64 {
        let r = self.modulus.inverse(theta * eps);
        (1.0 - theta) * Self::prod_radials(&self.radials, r / (self.factor_count - 1) as f64)
    }

    /// `sigma(eps)` with the maximizing theta. Errors with
    /// [`Error::DegenerateSigma`] when the supremum is zero: the radial
    /// product vanishes for every theta, so no correction budget exists at
    /// this eps.
    pub fn eval_with_theta(&self, eps: f64) -> Result<SigmaValue> {
        if !(eps > 0.0) {
            return Err(Error::InvalidParameter {
                detail: format!("sigma is defined for eps > 0, got {eps}"),
            });
        }
        let value = match &self.engine {
            SigmaEngine::Table { thresholds, prodf } => {
                let mut best = 0.0f64;
                let mut best_t = 0.0f64;
                for (t, p) in thresholds.iter().zip(prodf) {
                    if *t >= eps {
                        break;
                    }
                    let v = (eps - t) * p;
                    if v > best {
                        best = v;
                        best_t = *t;
                    }
                }
                SigmaValue {
                    sigma: best,
                    theta_star: best_t / eps,
                }
            }
            SigmaEngine::Scan { extra_thresholds } => {
                let mut thetas: Vec<f64> = Vec::with_capacity(THETA_SCAN_SAMPLES + 16);
                for i in 1..=THETA_SCAN_SAMPLES {
                    thetas.push(i as f64 / (THETA_SCAN_SAMPLES + 1) as f64);
                }
                for &t in &THETA_LADDER {
                    thetas.push(t);
                    thetas.push(1.0 - t);
                }
                for &t in extra_thresholds {
                    let th = t / eps;
                    if th > 0.0 && th < 1.0 {
                        thetas.push(th);
                    }
                }
                thetas.sort_by(|a, b| a.total_cmp(b));
                thetas.dedup();
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0usize;
                for (i, &th) in thetas.iter().enumerate() {
                    let v = self.objective(th, eps);
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                let mut best_theta = thetas[best_i];
                // Golden-section refinement between the neighbors of the
                // best scan point, to relative tolerance ~1e-8.
                let lo = if best_i > 0 { thetas[best_i - 1] } else { 0.0 };
                let hi = if best_i + 1 < thetas.len() {
                    thetas[best_i + 1]
                } else {
                    1.0
                };
                let inv_phi = 0.618_033_988_749_894_9_f64;
                let (mut a, mut b) = (lo, hi);
                let mut c = b - inv_phi * (b - a);
                let mut d = a + inv_phi * (b - a);
                let mut fc = self.objective(c, eps);
                let mut fd = self.objective(d, eps);
                for _ in 0..GOLDEN_ITERS {
                    if fc > fd {
                        b = d;
                        d = c;
                        fd = fc;
                        c = b - inv_phi * (b - a);
                        fc = self.objective(c, eps);
                    } else {
                        a = c;
                        c = d;
                        fc = fd;
                        d = a + inv_phi * (b - a);
                        fd = self.objective(d, eps);
                    }
                    if fc > best {
                        best = fc;
                        best_theta = c;
                    }
                    if fd > best {
                        best = fd;
                        best_theta = d;
                    }
                    if (b - a) <= 1e-8 * best_theta.max(1e-3) {
                        break;
                    }
                }
                SigmaValue {
                    sigma: eps * best.max(0.0),
                    theta_star: best_theta,
                }
            }
        };
        if value.sigma <= 0.0 {
            return Err(Error::DegenerateSigma {
                coord: self.coord,
                eps,
            });
        }
        Ok(value)
    }

    pub fn eval(&self, eps: f64) -> Result<f64> {
        Ok(self.eval_with_theta(eps)?.sigma)
    }

    /// The unique `eps` with `sigma(eps) = s`; 0 for `s = 0`.
    ///
    /// Exact (closed form over the plateau table) for step engines;
    /// monotone bisection to absolute tolerance 1e-10 otherwise.
    pub fn inverse(&self, s: f64) -> Result<f64> {
        if s < 0.0 {
            return Err(Error::InvalidParameter {
                detail: format!("sigma inverse needs s >= 0, got {s}"),
            });
        }
        if s == 0.0 {
            return Ok(0.0);
        }
        match &self.engine {
            SigmaEngine::Table { thresholds, prodf } => {
                // sigma(eps) >= s iff (eps - t_i) p_i >= s for some i.
                let mut best = f64::INFINITY;
                for (t, p) in thresholds.iter().zip(prodf) {
                    if *p > 0.0 {
                        best = best.min(t + s / p);
                    }
                }
                if best.is_finite() {
                    Ok(best)
                } else {
                    Err(Error::DegenerateSigma {
                        coord: self.coord,
                        eps: s,
                    })
                }
            }
            SigmaEngine::Scan { .. } => {
                // sigma(eps) <= eps, so eps = s brackets from below.
                let sigma_at = |eps: f64| -> f64 {
                    self.eval_with_theta(eps).map(|v| v.sigma).unwrap_or(0.0)
                };
                let mut lo = s;
                if sigma_at(lo) >= s {
                    // Degenerate bracket; shrink below.
                    let mut l = s;
                    for _ in 0..200 {
                        l *= 0.5;
                        if sigma_at(l) < s || l < 1e-300 {
                            break;
                        }
                    }
                    lo = l;
                }
                let mut hi = lo.max(1e-12);
                let mut ok = false;
                for _ in 0..200 {
                    if sigma_at(hi) >= s {
                        ok = true;
                        break;
                    }
                    hi *= 2.0;
                }
                if !ok {
                    return Err(Error::SigmaInverseOutOfRange {
                        target: s,
                        sigma_hi: sigma_at(hi),
                        eps_hi: hi,
                    });
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if sigma_at(mid) >= s {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                    if hi - lo <= 1e-10 {
                        break;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }
}

/// Threshold function plus the constants of the one-marginal theorem for a
/// specific coupling marginal.
#[derive(Debug, Clone)]
pub struct SigmaProfile {
    sigma: SigmaFunction,
    /// Half the measure of the marginal's support.
    c: f64,
    /// Largest eps for which the level set `{marginal > sigma(eps)}` still
    /// carries measure at least `c`.
    kappa: f64,
    /// Deviation factor `K = 1 + 2/c`.
    big_k: f64,
}

const KAPPA_BISECT_ITERS: usize = 200;

/// Which radial maximal functions a profile uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RadialChoice {
    /// The grid step functions (exact for the discrete spaces; the
    /// correction always uses these).
    #[default]
    Grid,
    /// Treat each factor as the uniform measure on an interval of its
    /// diameter: `f(r) = min(r, diam) / diam`. Matches the continuum
    /// closed forms on uniform interval grids; tabulation only.
    Interval,
}

impl SigmaProfile {
    /// Build a profile for coordinate `coord` of the product space from the
    /// coupling's marginal values on that coordinate.
    pub fn build(
        space: &ProductSpace,
        modulus: Modulus,
        coord: usize,
        marginal: &[f64],
    ) -> Result<Self> {
        Self::build_with(space, modulus, coord, marginal, RadialChoice::Grid)
    }

    /// [`SigmaProfile::build`] with an explicit radial-function choice.
    pub fn build_with(
        space: &ProductSpace,
        modulus: Modulus,
        coord: usize,
        marginal: &[f64],
        radial: RadialChoice,
    ) -> Result<Self> {
        let n = space.factor_count();
        if coord >= n {
            return Err(Error::CoordOutOfRange { index: coord, n });
        }
        let radials: Vec<RadialFn> = (0..n)
            .filter(|k| *k != coord)
            .map(|k| match radial {
                RadialChoice::Grid => space.factor(k).radial_fn(),
                RadialChoice::Interval => RadialFn::Interval {
                    length: space.factor(k).diameter(),
                },
            })
            .collect();
        let sigma = SigmaFunction::new(coord, modulus, radials, n)?;
        Self::from_sigma(sigma, marginal, space.factor(coord).weights())
    }

    /// Compute the constants from a marginal with explicit quadrature
    /// weights.
    pub fn from_sigma(sigma: SigmaFunction, marginal: &[f64], weights: &[f64]) -> Result<Self> {
        if marginal.len() != weights.len() {
            return Err(Error::ShapeMismatch {
                detail: format!(
                    "marginal length {} vs weight length {}",
                    marginal.len(),
                    weights.len()
                ),
            });
        }
        let coord = sigma.coord;
        // c = mu({marginal > 0}) / 2, strict positivity.
        let mut acc = NeumaierSum::new();
        for (&m, &w) in marginal.iter().zip(weights) {
            if m > 0.0 {
                acc.add(w);
            }
        }
        let support = acc.value();
        if support <= 0.0 {
            return Err(Error::MarginalZero { coord });
        }
        let c = 0.5 * support;
        let max_marg = marginal.iter().cloned().fold(0.0, f64::max);

        // Measure of the level set {marginal > s}.
        let level_mass = |s: f64| -> f64 {
            let mut acc = NeumaierSum::new();
            for (&m, &w) in marginal.iter().zip(weights) {
                if m > s {
                    acc.add(w);
                }
            }
            acc.value()
        };
        let sigma_or_zero = |eps: f64| -> f64 {
            sigma.eval_with_theta(eps).map(|v| v.sigma).unwrap_or(0.0)
        };
        // kappa = sup { eps : mu({marginal > sigma(eps)}) >= c }; the level
        // mass is non-increasing in eps, bracket and bisect. The upper
        // bracket grows until sigma exceeds the largest marginal value.
        let mut lo = f64::MIN_POSITIVE;
        if !(level_mass(sigma_or_zero(lo)) >= c) {
            return Err(Error::MarginalZero { coord });
        }
        let mut hi = 1e-6;
        let mut bracketed = false;
        for _ in 0..2000 {
            if sigma_or_zero(hi) > max_marg {
                bracketed = true;
                break;
            }
            hi *= 2.0;
            if !hi.is_finite() {
                break;
            }
        }
        if !bracketed || !hi.is_finite() {
            return Err(Error::DegenerateSigma { coord, eps: hi });
        }
        for _ in 0..KAPPA_BISECT_ITERS {
            let mid = 0.5 * (lo + hi);
            if level_mass(sigma_or_zero(mid)) >= c {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * lo.max(1e-12) {
                break;
            }
        }
        let kappa = lo;
        Ok(Self {
            sigma,
            c,
            kappa,
            big_k: 1.0 + 2.0 / c,
        })
    }

    pub fn coord(&self) -> usize {
        self.sigma.coord
    }

    pub fn sigma_fn(&self) -> &SigmaFunction {
        &self.sigma
    }

    pub fn sigma(&self, eps: f64) -> Result<f64> {
        self.sigma.eval(eps)
    }

    pub fn sigma_with_theta(&self, eps: f64) -> Result<SigmaValue> {
        self.sigma.eval_with_theta(eps)
    }

    pub fn sigma_inverse(&self, s: f64) -> Result<f64> {
        self.sigma.inverse(s)
    }

    /// Half the support measure of the marginal (the constant `c_j` in the
    /// deviation factor).
    pub fn support_half_mass(&self) -> f64 {
        self.c
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Per-stage deviation factor `K_j = 1 + 2/c_j`.
    pub fn deviation_factor(&self) -> f64 {
        self.big_k
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::RadialFn;

    fn unit_interval_radials(n: usize) -> Vec<RadialFn> {
        (0..n - 1).map(|_| RadialFn::Interval { length: 1.0 }).collect()
    }

    fn lipschitz_sigma(n: usize, l: f64) -> SigmaFunction {
        let modulus = Modulus::lipschitz(l, n as f64).unwrap();
        SigmaFunction::new(0, modulus, unit_interval_radials(n), n).unwrap()
    }

    #[test]
    fn modulus_eval_basics() {
        let m = Modulus::lipschitz(2.0, 10.0).unwrap();
        assert_eq!(m.eval(0.5), 1.0);
        assert_eq!(m.eval(0.0), 0.0);
        let h = Modulus::hoelder(1.0, 0.5, 10.0).unwrap();
        assert!((h.eval(0.25) - 0.5).abs() < 1e-15);
        assert_eq!(h.eval(0.0), 0.0);
    }

    #[test]
    fn modulus_inverse_basics() {
        let m = Modulus::lipschitz(2.0, 10.0).unwrap();
        assert!((m.inverse(1.0) - 0.5).abs() < 1e-15);
        assert_eq!(m.inverse(0.0), 0.0);
        let h = Modulus::hoelder(2.0, 0.5, 100.0).unwrap();
        // w(r) = 2 sqrt(r); w^{-1}(t) = (t/2)^2
        assert!((h.inverse(1.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn empirical_table_lookup_semantics() {
        let m = Modulus::empirical(vec![0.0, 0.1, 0.2], vec![0.0, 0.3, 0.7], 0.2).unwrap();
        // Largest tabulated r with value <= 0.5.
        assert_eq!(m.inverse(0.5), 0.1);
        // Right-continuous conservative envelope.
        assert_eq!(m.eval(0.05), 0.3);
        assert_eq!(m.eval(0.1), 0.3);
        assert_eq!(m.eval(0.15), 0.7);
        assert_eq!(m.eval(5.0), 0.7);
        // All values qualify -> capped at the domain diameter.
        assert_eq!(m.inverse(0.7), 0.2);
    }

    #[test]
    fn sigma_matches_lipschitz_closed_form_n2() {
        // sigma(eps) = eps^2 / (4 L) with optimum theta = 1/2.
        for &l in &[0.5, 1.0, 4.0] {
            let s = lipschitz_sigma(2, l);
            for &eps in &[0.01, 0.1, 0.5, l * 0.9] {
                let v = s.eval_with_theta(eps).unwrap();
                let expect = eps * eps / (4.0 * l);
                assert!(
                    (v.sigma - expect).abs() <= 1e-9 * expect,
                    "eps={eps} l={l}: got {} expect {}",
                    v.sigma,
                    expect
                );
                assert!((v.theta_star - 0.5).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn sigma_matches_lipschitz_closed_form_n3() {
        // sigma(eps) = eps^3 / (27 L^2).
        for &l in &[0.5, 1.0, 4.0] {
            let s = lipschitz_sigma(3, l);
            for &eps in &[0.05, 0.2, 0.8 * l] {
                let got = s.eval(eps).unwrap();
                let expect = eps.powi(3) / (27.0 * l * l);
                assert!(
                    (got - expect).abs() <= 1e-9 * expect,
                    "eps={eps} l={l}: got {got} expect {expect}"
                );
            }
        }
    }

    #[test]
    fn sigma_over_eps_vanishes_at_zero() {
        let s = lipschitz_sigma(2, 1.0);
        let mut prev = f64::INFINITY;
        for &eps in &[0.4, 0.2, 0.1, 0.05, 0.025] {
            let ratio = s.eval(eps).unwrap() / eps;
            assert!(ratio < prev);
            prev = ratio;
        }
        assert!(prev < 0.01);
    }

    #[test]
    fn sigma_inverse_round_trip() {
        let s = lipschitz_sigma(2, 1.0);
        for &eps in &[0.01, 0.1, 0.5] {
            let v = s.eval(eps).unwrap();
            let back = s.inverse(v).unwrap();
            assert!(
                (back - eps).abs() <= 1e-8,
                "round trip {eps} -> {v} -> {back}"
            );
        }
        assert_eq!(s.inverse(0.0).unwrap(), 0.0);
    }

    #[test]
    fn sigma_inverse_closed_form() {
        // sigma(eps) = eps^2/4, so sigma^{-1}(0.0025) = 0.1.
        let s = lipschitz_sigma(2, 1.0);
        let got = s.inverse(0.0025).unwrap();
        assert!((got - 0.1).abs() <= 1e-8, "got {got}");
    }

    #[test]
    fn sigma_monotone_and_ratio_monotone() {
        // Growth property: s / sigma(s) <= eps / sigma(eps) for eps <= s.
        let s = lipschitz_sigma(3, 2.0);
        let mut eps = 0.01;
        let mut prev_sigma = 0.0;
        let mut prev_ratio = f64::INFINITY;
        while eps < 4.0 {
            let v = s.eval(eps).unwrap();
            assert!(v >= prev_sigma);
            let ratio = eps / v;
            assert!(
                ratio <= prev_ratio + 1e-10,
                "ratio not monotone at eps={eps}: {ratio} vs {prev_ratio}"
            );
            prev_sigma = v;
            prev_ratio = ratio;
            eps *= 1.37;
        }
    }


    #[test]
    fn slice_bound_oracle_exhaustive_small_grids() {
        // Lemma oracle: wherever a marginal value sits at or below
        // sigma_j(eps), every value on that slice is at most eps.
        use crate::space::{MarginalSpace, ProductSpace};
        use crate::synth::{dipped_coupling, SmoothCouplingParams};
        use std::sync::Arc;

        let space = {
            let f: Vec<_> = (0..2)
                .map(|_| Arc::new(MarginalSpace::trapezoid_interval(0.0, 1.0, 7).unwrap()))
                .collect();
            Arc::new(ProductSpace::new(f).unwrap())
        };
        let mut triggered = 0usize;
        for seed in 0..10u64 {
            let p =
                dipped_coupling(space.clone(), seed, &SmoothCouplingParams::default(), 0.02)
                    .unwrap();
            let modulus = empirical_modulus(&p, &EmpiricalOptions::default());
            let shape = p.shape();
            for j in 0..2 {
                let marg = p.marginal_values(j).unwrap();
                let profile =
                    SigmaProfile::build(p.space(), modulus.clone(), j, &marg).unwrap();
                for eps in [0.05, 0.1, 0.3, 0.8] {
                    let sigma = match profile.sigma(eps) {
                        Ok(s) => s,
                        Err(Error::DegenerateSigma { .. }) => continue,
                        Err(e) => panic!("{e}"),
                    };
                    for (i, &m) in marg.iter().enumerate() {
                        if m <= sigma {
                            triggered += 1;
                            for other in 0..shape[1 - j] {
                                let idx = if j == 0 { [i, other] } else { [other, i] };
                                let v = p.get(&idx);
                                assert!(
                                    v <= eps + 1e-9,
                                    "seed {seed} j {j} eps {eps}: P{idx:?} = {v} > {eps}"
                                );
                            }
                        }
                    }
                }
            }
        }
        assert!(triggered > 0, "the slice-bound premise never fired");
    }

    #[test]
    fn empirical_modulus_bounds_every_grid_pair() {
        use crate::space::{MarginalSpace, ProductSpace};
        use crate::synth::{smooth_coupling, SmoothCouplingParams};
        use std::sync::Arc;

        let space = {
            let f: Vec<_> = (0..2)
                .map(|_| Arc::new(MarginalSpace::trapezoid_interval(0.0, 1.0, 9).unwrap()))
                .collect();
            Arc::new(ProductSpace::new(f).unwrap())
        };
        let p = smooth_coupling(space.clone(), 42, &SmoothCouplingParams::default()).unwrap();
        let m = empirical_modulus(&p, &EmpiricalOptions::default());
        let shape = p.shape();
        let cells = p.values().len();
        let mut ia = vec![0usize; 2];
        let mut ib = vec![0usize; 2];
        for a in 0..cells {
            crate::coupling::unravel(a, &shape, &mut ia);
            for b in (a + 1)..cells {
                crate::coupling::unravel(b, &shape, &mut ib);
                let d = space.product_distance(&ia, &ib).unwrap();
                let osc = (p.values()[a] - p.values()[b]).abs();
                assert!(
                    osc <= m.eval(d) + 1e-12,
                    "pair {ia:?},{ib:?}: osc {osc} above omega({d}) = {}",
                    m.eval(d)
                );
            }
        }
    }

    #[test]
    fn generalized_inverse_consistency_all_kinds() {
        // omega(omega^{-1}(t) - delta) <= t for small positive delta.
        let kinds = [
            Modulus::lipschitz(2.0, 4.0).unwrap(),
            Modulus::hoelder(1.5, 0.7, 4.0).unwrap(),
            Modulus::empirical(
                vec![0.0, 0.3, 0.9, 2.0, 4.0],
                vec![0.0, 0.2, 0.5, 0.9, 1.4],
                4.0,
            )
            .unwrap(),
        ];
        for m in &kinds {
            for t in [0.0, 0.05, 0.3, 0.8, 1.3, 5.0] {
                for delta in [1e-9, 1e-6, 1e-3] {
                    let r = m.inverse(t);
                    if r > delta {
                        let back = m.eval(r - delta);
                        assert!(back <= t + 1e-12, "{m:?} t={t} delta={delta}: {back}");
                    }
                }
            }
        }
    }

    #[test]
    fn constants_for_full_and_half_support() {
        use crate::space::{MarginalSpace, ProductSpace};
        use std::sync::Arc;

        // Full support: c = 1/2, K = 5.
        let f = Arc::new(MarginalSpace::uniform_interval(0.0, 1.0, 4).unwrap());
        let space = Arc::new(ProductSpace::new(vec![f.clone(), f.clone()]).unwrap());
        let p = crate::coupling::Coupling::constant_one(space.clone()).unwrap();
        let m = empirical_modulus(&p, &EmpiricalOptions::default());
        let marg = p.marginal_values(0).unwrap();
        let profile = SigmaProfile::build(&space, m, 0, &marg).unwrap();
        assert!((profile.support_half_mass() - 0.5).abs() < 1e-15);
        assert!((profile.deviation_factor() - 5.0).abs() < 1e-12);

        // Half the weight on the support: c = 1/4, K = 9.
        let rho = vec![2.0, 2.0, 0.0, 0.0];
        let ones = vec![1.0; 4];
        let q = crate::coupling::Coupling::outer_product(space.clone(), &[rho, ones]).unwrap();
        let mq = empirical_modulus(&q, &EmpiricalOptions::default());
        let margq = q.marginal_values(0).unwrap();
        let profq = SigmaProfile::build(&space, mq, 0, &margq).unwrap();
        assert!((profq.support_half_mass() - 0.25).abs() < 1e-15);
        assert!((profq.deviation_factor() - 9.0).abs() < 1e-12);
        assert!(profq.kappa() > 0.0);
    }

    #[test]
    fn constant_coupling_profile_closed_form() {
        // P = 1: empirical omega = 0, the inverse caps at the diameter, all
        // radial factors saturate, sigma(eps) = eps and kappa = 1.
        use crate::space::{MarginalSpace, ProductSpace};
        use std::sync::Arc;
        let f = Arc::new(MarginalSpace::trapezoid_interval(0.0, 1.0, 16).unwrap());
        let space = Arc::new(ProductSpace::new(vec![f.clone(), f.clone()]).unwrap());
        let p = crate::coupling::Coupling::constant_one(space.clone()).unwrap();
        let m = empirical_modulus(&p, &EmpiricalOptions::default());
        let marg = p.marginal_values(0).unwrap();
        let profile = SigmaProfile::build(&space, m, 0, &marg).unwrap();
        for eps in [0.1, 0.5, 0.9] {
            let s = profile.sigma(eps).unwrap();
            assert!((s - eps).abs() <= 1e-12 * eps, "sigma({eps}) = {s}");
        }
        assert!((profile.kappa() - 1.0).abs() <= 1e-6, "kappa = {}", profile.kappa());
    }



    #[test]
    fn table_engine_matches_dense_scan_with_asymmetric_diameters() {
        // With very unequal factor diameters the capped inverse cannot
        // reach every radial jump; the plateau table must agree with a
        // dense direct scan of the objective, not overshoot it.
        use crate::space::MarginalSpace;

        let wide = MarginalSpace::uniform_interval(0.0, 10.0, 9).unwrap();
        let narrow = MarginalSpace::uniform_interval(0.0, 1.0, 5).unwrap();
        // Profile for the narrow coordinate of a (wide, narrow, narrow)
        // product: cap = (10 + 1 + 1)/2 = 6 < 10 = wide diameter.
        let radials = vec![wide.radial_fn(), narrow.radial_fn()];
        let diameter = 12.0;
        let modulus = Modulus::lipschitz(1.0, diameter).unwrap();
        let sigma = SigmaFunction::new(2, modulus.clone(), radials.clone(), 3).unwrap();
        for eps in [0.5, 2.0, 8.0, 20.0] {
            let table = sigma.eval(eps).unwrap();
            let mut scan: f64 = 0.0;
            let steps = 200_000;
            for i in 1..steps {
                let theta = i as f64 / steps as f64;
                let u = modulus.inverse(theta * eps) / 2.0;
                let obj = (1.0 - theta)
                    * radials.iter().map(|f| f.eval(u)).product::<f64>();
                scan = scan.max(eps * obj);
            }
            assert!(
                table <= scan * (1.0 + 1e-4) + 1e-300,
                "eps {eps}: table {table} overshoots dense scan {scan}"
            );
            assert!(
                table >= scan * (1.0 - 1e-12),
                "eps {eps}: table {table} below dense scan {scan}"
            );
        }
    }

    #[test]
    fn table_engine_ratio_property_on_grid_profiles() {
        // Growth property on geometric eps grids, for profiles built from
        // grid data (empirical modulus + step radials): the plateau
        // enumeration is exact, so the ratio is monotone to rounding.
        use crate::space::{MarginalSpace, ProductSpace};
        use crate::synth::{dipped_coupling, smooth_coupling, SmoothCouplingParams};
        use std::sync::Arc;

        let space = {
            let f: Vec<_> = (0..2)
                .map(|_| Arc::new(MarginalSpace::trapezoid_interval(0.0, 1.0, 10).unwrap()))
                .collect();
            Arc::new(ProductSpace::new(f).unwrap())
        };
        for seed in 0..6u64 {
            let p = if seed % 2 == 0 {
                smooth_coupling(space.clone(), seed, &SmoothCouplingParams::default()).unwrap()
            } else {
                dipped_coupling(space.clone(), seed, &SmoothCouplingParams::default(), 0.05)
                    .unwrap()
            };
            let modulus = empirical_modulus(&p, &EmpiricalOptions::default());
            let marg = p.marginal_values(0).unwrap();
            let profile = SigmaProfile::build(p.space(), modulus, 0, &marg).unwrap();
            let mut eps = 0.01;
            let mut prev_sigma = 0.0;
            let mut prev_ratio = f64::INFINITY;
            while eps < 8.0 {
                match profile.sigma(eps) {
                    Ok(v) => {
                        assert!(v >= prev_sigma, "sigma not monotone at eps = {eps}");
                        let ratio = eps / v;
                        assert!(
                            ratio <= prev_ratio + 1e-10,
                            "seed {seed}: ratio jumped at eps = {eps}: {ratio} vs {prev_ratio}"
                        );
                        prev_sigma = v;
                        prev_ratio = ratio;
                    }
                    Err(Error::DegenerateSigma { .. }) => {}
                    Err(e) => panic!("{e}"),
                }
                eps *= 1.31;
            }
        }
    }

    #[test]
    fn table_engine_inverse_round_trip_is_exact() {
        use crate::space::{MarginalSpace, ProductSpace};
        use crate::synth::{smooth_coupling, SmoothCouplingParams};
        use std::sync::Arc;

        let space = {
            let f: Vec<_> = (0..2)
                .map(|_| Arc::new(MarginalSpace::trapezoid_interval(0.0, 1.0, 12).unwrap()))
                .collect();
            Arc::new(ProductSpace::new(f).unwrap())
        };
        let p = smooth_coupling(space.clone(), 17, &SmoothCouplingParams::default()).unwrap();
        let modulus = empirical_modulus(&p, &EmpiricalOptions::default());
        let marg = p.marginal_values(1).unwrap();
        let profile = SigmaProfile::build(p.space(), modulus, 1, &marg).unwrap();
        for eps in [0.01, 0.1, 0.5, 2.0] {
            if let Ok(s) = profile.sigma(eps) {
                let back = profile.sigma_inverse(s).unwrap();
                assert!(
                    (back - eps).abs() <= 1e-10 * eps.max(1.0),
                    "{eps} -> {s} -> {back}"
                );
            }
        }
    }

    #[test]
    fn degenerate_sigma_is_reported() {
        // A jump modulus: oscillation 1 at every positive radius. For
        // eps < 1 no theta qualifies and sigma degenerates.
        let m = Modulus::empirical(vec![0.0, 1.0], vec![0.0, 1.0], 1.0).unwrap();
        // Radial of a two-point grid with min weight 0.5 at the first jump.
        let steps = crate::space::StepFn::new(vec![0.0, 1.0], vec![0.5, 1.0]);
        let s = SigmaFunction::new(
            0,
            m,
            vec![RadialFn::Steps(std::sync::Arc::new(steps))],
            2,
        )
        .unwrap();
        // The zero-oscillation plateau only contains r = 0 where the radial
        // vanishes, so sigma(0.5) = 0.
        match s.eval(0.5) {
            Err(Error::DegenerateSigma { .. }) => {}
            other => panic!("expected degenerate sigma, got {other:?}"),
        }
        // Above the jump the threshold comes back.
        assert!(s.eval(2.0).unwrap() > 0.0);
    }
}

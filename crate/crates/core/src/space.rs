//! Finite metric measure spaces and their products.
//!
//! A [`MarginalSpace`] is a quadrature grid for one factor: points, strictly
//! positive weights summing to 1, and a metric. A [`ProductSpace`] combines
//! factors with the l1 product distance `d(x, y) = Σ_j d_j(x_j, y_j)` and
//! product weights.
//!
//! The module also provides the radial maximal function of a factor: the
//! worst-case (over ball centers) weight of an open ball of radius `r`. On a
//! grid this is a left-continuous step function whose jump locations are the
//! distinct pairwise distances; see [`StepFn`].

use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::sum::compensated_sum;

const WEIGHT_SUM_TOL: f64 = 1e-12;
const METRIC_TOL: f64 = 1e-12;
/// Above this point count, triangle-inequality validation samples triples
/// instead of enumerating all of them.
const TRIANGLE_EXHAUSTIVE_LIMIT: usize = 64;

/// Per-factor metric.
#[derive(Debug, Clone)]
pub enum Metric {
    /// `|x - y|` on 1-d points.
    AbsoluteDifference,
    /// Euclidean distance on d-dimensional points.
    Euclidean,
    /// Explicit distance matrix, row-major, validated on construction.
    Explicit(Vec<f64>),
}

/// One factor `(X_j, d_j, mu_j)`: a finite point set with positive
/// quadrature weights summing to 1 and a metric.
///
/// The support of the measure is the whole point set; zero-weight points are
/// rejected at construction rather than silently carried.
#[derive(Debug)]
pub struct MarginalSpace {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    metric: Metric,
    /// Cached full distance matrix, row-major.
    dist: Vec<f64>,
    diameter: f64,
    radial: OnceLock<Arc<StepFn>>,
}

impl MarginalSpace {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>, metric: Metric) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidParameter {
                detail: "space must contain at least one point".into(),
            });
        }
        if points.len() != weights.len() {
            return Err(Error::ShapeMismatch {
                detail: format!(
                    "{} points but {} weights",
                    points.len(),
                    weights.len()
                ),
            });
        }
        let dim = points[0].len();
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::PointDimMismatch {
                    index: i,
                    got: p.len(),
                    expected: dim,
                });
            }
        }
        if matches!(metric, Metric::AbsoluteDifference) && dim != 1 {
            return Err(Error::MetricDimension { index: 0, dim });
        }
        for (i, &w) in weights.iter().enumerate() {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::NonPositiveWeight { index: i, value: w });
            }
        }
        let sum = compensated_sum(&weights);
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::WeightSumOff { sum });
        }

        let n = points.len();
        let dist = match &metric {
            Metric::Explicit(m) => {
                if m.len() != n * n {
                    return Err(Error::DistanceMatrixShape {
                        got: m.len(),
                        expected: n * n,
                    });
                }
                m.clone()
            }
            Metric::AbsoluteDifference => {
                let mut d = vec![0.0; n * n];
                for i in 0..n {
                    for k in 0..n {
                        d[i * n + k] = (points[i][0] - points[k][0]).abs();
                    }
                }
                d
            }
            Metric::Euclidean => {
                let mut d = vec![0.0; n * n];
                for i in 0..n {
                    for k in 0..n {
                        let s: f64 = points[i]
                            .iter()
                            .zip(&points[k])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        d[i * n + k] = s.sqrt();
                    }
                }
                d
            }
        };

        validate_metric(&dist, n)?;
        let diameter = dist.iter().cloned().fold(0.0, f64::max);

        Ok(Self {
            points,
            weights,
            metric,
            dist,
            diameter,
            radial: OnceLock::new(),
        })
    }

    /// Uniform grid on `[a, b]` with `n` equally spaced points and equal
    /// weights `1/n`.
    pub fn uniform_interval(a: f64, b: f64, n: usize) -> Result<Self> {
        if n < 1 || !(b > a) {
            return Err(Error::InvalidParameter {
                detail: format!("uniform_interval({a}, {b}, {n})"),
            });
        }
        let pts: Vec<Vec<f64>> = if n == 1 {
            vec![vec![0.5 * (a + b)]]
        } else {
            (0..n)
                .map(|i| vec![a + (b - a) * i as f64 / (n - 1) as f64])
                .collect()
        };
        let w = vec![1.0 / n as f64; n];
        Self::new(pts, w, Metric::AbsoluteDifference)
    }

    /// Trapezoid quadrature for the uniform probability measure on `[a, b]`:
    /// `cells + 1` grid points with endpoint weights halved. Integrals of
    /// piecewise-linear functions whose kinks lie on grid points are exact,
    /// which the counterexample generators rely on.
    pub fn trapezoid_interval(a: f64, b: f64, cells: usize) -> Result<Self> {
        if cells < 1 || !(b > a) {
            return Err(Error::InvalidParameter {
                detail: format!("trapezoid_interval({a}, {b}, {cells})"),
            });
        }
        let n = cells + 1;
        let step = (b - a) / cells as f64;
        let pts: Vec<Vec<f64>> = (0..n).map(|i| vec![a + step * i as f64]).collect();
        let mut w = vec![1.0 / cells as f64; n];
        w[0] *= 0.5;
        w[n - 1] *= 0.5;
        Self::new(pts, w, Metric::AbsoluteDifference)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }

    #[inline]
    pub fn distance(&self, i: usize, k: usize) -> f64 {
        self.dist[i * self.points.len() + k]
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Radial maximal function: the minimum over centers `x` of the total
    /// weight of points `y` with `d(x, y) < r` (open ball). Non-decreasing
    /// in `r`, zero at `r = 0`, and equal to 1 once `r` exceeds the
    /// diameter.
    pub fn radial_maximal(&self, r: f64) -> f64 {
        self.radial_step_fn().eval(r)
    }

    /// The radial maximal function as a shareable step function.
    pub fn radial_fn(&self) -> RadialFn {
        RadialFn::Steps(Arc::clone(self.radial_step_fn()))
    }

    fn radial_step_fn(&self) -> &Arc<StepFn> {
        self.radial.get_or_init(|| Arc::new(self.build_radial()))
    }

    fn build_radial(&self) -> StepFn {
        let n = self.points.len();
        // Events (distance, center, weight of entering point) sorted by
        // distance; sweeping r upward, point k joins the ball around i once
        // r > d(i, k).
        let mut events: Vec<(f64, u32, f64)> = Vec::with_capacity(n * n);
        for i in 0..n {
            for k in 0..n {
                events.push((self.distance(i, k), i as u32, self.weights[k]));
            }
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));

        use std::cmp::Reverse;
        use std::collections::BinaryHeap;
        #[derive(PartialEq)]
        struct Entry(f64, u32);
        impl Eq for Entry {}
        impl PartialOrd for Entry {
            fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Entry {
            fn cmp(&self, other: &Self) -> std::cmp::Ordering {
                self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
            }
        }

        let mut cur = vec![0.0f64; n];
        // Lazy min-heap: stale entries are skipped at peek time.
        let mut heap: BinaryHeap<Reverse<Entry>> = BinaryHeap::with_capacity(2 * n);
        let mut breakpoints = Vec::new();
        let mut values = Vec::new();
        let mut e = 0usize;
        while e < events.len() {
            let d = events[e].0;
            while e < events.len() && events[e].0 == d {
                let (_, center, w) = events[e];
                cur[center as usize] += w;
                heap.push(Reverse(Entry(cur[center as usize], center)));
                e += 1;
            }
            let min = loop {
                let Reverse(Entry(v, i)) = heap.peek().expect("heap nonempty");
                if *v == cur[*i as usize] {
                    break *v;
                }
                heap.pop();
            };
            breakpoints.push(d);
            values.push(min);
        }
        StepFn {
            breakpoints,
            values,
        }
    }
}

/// Left-continuous non-decreasing step function built from grid data.
///
/// `eval(r)` returns `values[t]` for `r` in `(breakpoints[t],
/// breakpoints[t+1]]`, the last value beyond the table and 0 at or below the
/// first breakpoint (which is always 0 for radial functions: the open ball
/// of radius 0 is empty).
#[derive(Debug, Clone)]
pub struct StepFn {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl StepFn {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Self {
        debug_assert_eq!(breakpoints.len(), values.len());
        Self {
            breakpoints,
            values,
        }
    }

    /// Value for `r` strictly above the largest breakpoint `< r`.
    pub fn eval(&self, r: f64) -> f64 {
        // Largest breakpoint strictly below r.
        match self
            .breakpoints
            .partition_point(|b| *b < r)
            .checked_sub(1)
        {
            None => 0.0,
            Some(t) => self.values[t],
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// A radial maximal function: either the grid step function of a factor or
/// the closed form for the uniform probability measure on an interval.
#[derive(Debug, Clone)]
pub enum RadialFn {
    Steps(Arc<StepFn>),
    /// Uniform probability on an interval of the given length:
    /// `f(r) = min(r, len) / len`.
    Interval { length: f64 },
}

impl RadialFn {
    pub fn eval(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        match self {
            RadialFn::Steps(s) => s.eval(r),
            RadialFn::Interval { length } => (r.min(*length)) / *length,
        }
    }

    /// Jump locations when this is a step function.
    pub fn breakpoints(&self) -> Option<&[f64]> {
        match self {
            RadialFn::Steps(s) => Some(s.breakpoints()),
            RadialFn::Interval { .. } => None,
        }
    }
}

fn validate_metric(dist: &[f64], n: usize) -> Result<()> {
    for i in 0..n {
        let dii = dist[i * n + i];
        if dii.abs() > METRIC_TOL {
            return Err(Error::NonZeroDiagonal { i, value: dii });
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let dij = dist[i * n + j];
            let dji = dist[j * n + i];
            if (dij - dji).abs() > METRIC_TOL {
                return Err(Error::AsymmetricDistance { i, j, dij, dji });
            }
            if !(dij > 0.0) || !dij.is_finite() {
                return Err(Error::NonPositiveDistance { i, j, value: dij });
            }
        }
    }
    // Triangle inequality: exhaustive on small spaces, sampled otherwise.
    let check = |i: usize, j: usize, k: usize| -> Result<()> {
        let dik = dist[i * n + k];
        let dij = dist[i * n + j];
        let djk = dist[j * n + k];
        if dik > dij + djk + METRIC_TOL {
            return Err(Error::TriangleViolation {
                i,
                j,
                k,
                dik,
                dij,
                djk,
            });
        }
        Ok(())
    };
    if n <= TRIANGLE_EXHAUSTIVE_LIMIT {
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    check(i, j, k)?;
                }
            }
        }
    } else {
        // Deterministic sample: a fixed linear-congruential walk over triples.
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 33) as usize
        };
        for _ in 0..(16 * n) {
            let i = next() % n;
            let j = next() % n;
            let k = next() % n;
            check(i, j, k)?;
        }
    }
    Ok(())
}

/// Ordered product of `N >= 2` factors with distance `Σ_j d_j` and product
/// weights.
#[derive(Debug, Clone)]
pub struct ProductSpace {
    factors: Vec<Arc<MarginalSpace>>,
}

impl ProductSpace {
    pub fn new(factors: Vec<Arc<MarginalSpace>>) -> Result<Self> {
        if factors.len() < 2 {
            return Err(Error::InvalidParameter {
                detail: format!(
                    "product space needs at least 2 factors, got {}",
                    factors.len()
                ),
            });
        }
        Ok(Self { factors })
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    pub fn factor(&self, j: usize) -> &MarginalSpace {
        &self.factors[j]
    }

    pub fn factor_arc(&self, j: usize) -> Arc<MarginalSpace> {
        Arc::clone(&self.factors[j])
    }

    pub fn factors(&self) -> &[Arc<MarginalSpace>] {
        &self.factors
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.len()).collect()
    }

    pub fn cell_count(&self) -> usize {
        self.factors.iter().map(|f| f.len()).product()
    }

    /// Sum of factor diameters: the diameter of the product under the l1
    /// combination.
    pub fn diameter(&self) -> f64 {
        self.factors.iter().map(|f| f.diameter()).sum()
    }

    /// `d(a, b) = Σ_j d_j(a_j, b_j)` for multi-indices `a`, `b`.
    pub fn product_distance(&self, a: &[usize], b: &[usize]) -> Result<f64> {
        if a.len() != self.factors.len() || b.len() != self.factors.len() {
            return Err(Error::ShapeMismatch {
                detail: format!(
                    "multi-index length {} / {}, expected {}",
                    a.len(),
                    b.len(),
                    self.factors.len()
                ),
            });
        }
        let mut d = 0.0;
        for (j, f) in self.factors.iter().enumerate() {
            if a[j] >= f.len() {
                return Err(Error::IndexOutOfRange {
                    factor: j,
                    index: a[j],
                    size: f.len(),
                });
            }
            if b[j] >= f.len() {
                return Err(Error::IndexOutOfRange {
                    factor: j,
                    index: b[j],
                    size: f.len(),
                });
            }
            d += f.distance(a[j], b[j]);
        }
        Ok(d)
    }

    /// Product weight of a grid cell.
    pub fn cell_weight(&self, idx: &[usize]) -> f64 {
        self.factors
            .iter()
            .zip(idx)
            .map(|(f, &i)| f.weight(i))
            .product()
    }
}

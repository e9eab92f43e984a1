//! Dense couplings and marginal densities.
//!
//! # Memory model
//!
//! A [`Coupling`] stores its values as one flat `Vec<f64>` in canonical
//! row-major order over the product grid: the last coordinate varies
//! fastest. `shape[j]` equals the size of factor `j`. Dense storage is
//! deliberate -- every construction in this crate touches every slice, so at
//! the target scales (up to ~10^6 cells) sparsity buys nothing.
//!
//! Marginal projection accumulates with compensated summation so that the
//! exactness invariants (projection of an outer product, mass consistency)
//! hold to 1e-12 and better on grids up to 64^3.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::space::{MarginalSpace, ProductSpace};
use crate::sum::{compensated_dot, NeumaierSum};

/// Mass tolerance for normalized couplings and marginal densities.
pub const MASS_TOL: f64 = 1e-10;
/// Values in `[-NEG_DUST, 0)` are clamped to 0 (floating-point dust from the
/// rebalance formula); anything below is a construction error.
pub const NEG_DUST: f64 = 1e-12;

/// Walks all multi-indices of a shape in row-major order.
#[derive(Debug, Clone)]
pub struct Odometer {
    shape: Vec<usize>,
    idx: Vec<usize>,
    done: bool,
}

impl Odometer {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            idx: vec![0; shape.len()],
            done: shape.contains(&0),
        }
    }

    #[inline]
    pub fn current(&self) -> &[usize] {
        &self.idx
    }

    /// Advance to the next multi-index; returns false when exhausted.
    #[inline]
    pub fn advance(&mut self) -> bool {
        if self.done {
            return false;
        }
        for ax in (0..self.shape.len()).rev() {
            self.idx[ax] += 1;
            if self.idx[ax] < self.shape[ax] {
                return true;
            }
            self.idx[ax] = 0;
        }
        self.done = true;
        false
    }

    pub fn is_done(&self) -> bool {
        self.done
    }
}

/// Decode a flat row-major index into a multi-index.
pub fn unravel(flat: usize, shape: &[usize], out: &mut [usize]) {
    let mut rem = flat;
    for ax in (0..shape.len()).rev() {
        out[ax] = rem % shape[ax];
        rem /= shape[ax];
    }
}

/// Encode a multi-index into a flat row-major index.
pub fn ravel(idx: &[usize], shape: &[usize]) -> usize {
    let mut flat = 0;
    for ax in 0..shape.len() {
        flat = flat * shape[ax] + idx[ax];
    }
    flat
}

/// A non-negative density on a product grid with weighted total mass 1
/// (unless explicitly flagged unnormalized, which the counterexample
/// generators use).
#[derive(Debug, Clone)]
pub struct Coupling {
    space: Arc<ProductSpace>,
    values: Vec<f64>,
    normalized: bool,
}

impl Coupling {
    /// Validates non-negativity (clamping `[-1e-12, 0)` dust with a logged
    /// warning) and, unless `normalized` is false, total mass 1 within
    /// `1e-10`.
    pub fn new(space: Arc<ProductSpace>, mut values: Vec<f64>, normalized: bool) -> Result<Self> {
        let cells = space.cell_count();
        if values.len() != cells {
            return Err(Error::ShapeMismatch {
                detail: format!(
                    "value count {} does not match grid cell count {} (shape {:?})",
                    values.len(),
                    cells,
                    space.shape()
                ),
            });
        }
        let mut clamped = 0usize;
        for (i, v) in values.iter_mut().enumerate() {
            if *v < 0.0 {
                if *v < -NEG_DUST {
                    return Err(Error::NegativeValue { index: i, value: *v });
                }
                *v = 0.0;
                clamped += 1;
            }
            if !v.is_finite() {
                return Err(Error::NegativeValue { index: i, value: *v });
            }
        }
        if clamped > 0 {
            log::warn!("clamped {clamped} negative dust value(s) to 0");
        }
        let c = Self {
            space,
            values,
            normalized,
        };
        if normalized {
            let mass = c.total_mass();
            if (mass - 1.0).abs() > MASS_TOL {
                return Err(Error::MassOff {
                    mass,
                    tol: MASS_TOL,
                });
            }
        }
        Ok(c)
    }

    /// Constant density 1 (the product of uniform marginals when weights
    /// sum to 1 per factor).
    pub fn constant_one(space: Arc<ProductSpace>) -> Result<Self> {
        let cells = space.cell_count();
        Self::new(space, vec![1.0; cells], true)
    }

    /// Outer product of per-factor densities.
    pub fn outer_product(space: Arc<ProductSpace>, factors: &[Vec<f64>]) -> Result<Self> {
        if factors.len() != space.factor_count() {
            return Err(Error::ShapeMismatch {
                detail: format!(
                    "{} factor vectors for {} factors",
                    factors.len(),
                    space.factor_count()
                ),
            });
        }
        let shape = space.shape();
        for (j, f) in factors.iter().enumerate() {
            if f.len() != shape[j] {
                return Err(Error::ShapeMismatch {
                    detail: format!("factor {} has {} values, expected {}", j, f.len(), shape[j]),
                });
            }
        }
        let mut values = vec![0.0; space.cell_count()];
        let mut odo = Odometer::new(&shape);
        let mut flat = 0usize;
        loop {
            let idx = odo.current();
            values[flat] = factors.iter().zip(idx).map(|(f, &i)| f[i]).product();
            flat += 1;
            if !odo.advance() {
                break;
            }
        }
        Self::new(space, values, true)
    }

    pub fn space(&self) -> &Arc<ProductSpace> {
        &self.space
    }

    pub fn shape(&self) -> Vec<usize> {
        self.space.shape()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    #[inline]
    pub fn get(&self, idx: &[usize]) -> f64 {
        self.values[ravel(idx, &self.space.shape())]
    }

    /// Weighted total mass `Σ_i P(i) Π_j w_j(i_j)`.
    pub fn total_mass(&self) -> f64 {
        let shape = self.space.shape();
        let mut acc = NeumaierSum::new();
        let mut odo = Odometer::new(&shape);
        let mut flat = 0usize;
        loop {
            acc.add(self.values[flat] * self.space.cell_weight(odo.current()));
            flat += 1;
            if !odo.advance() {
                break;
            }
        }
        acc.value()
    }

    /// Marginal projection onto coordinate `j`: integrates against all
    /// reference measures except the `j`-th.
    pub fn marginal(&self, j: usize) -> Result<MarginalDensity> {
        let n = self.space.factor_count();
        if j >= n {
            return Err(Error::CoordOutOfRange { index: j, n });
        }
        let values = self.marginal_values(j)?;
        Ok(MarginalDensity {
            space: self.space.factor_arc(j),
            values,
            normalized: self.normalized,
        })
    }

    /// Raw marginal values without the mass check (used on intermediate
    /// tensors during correction).
    pub fn marginal_values(&self, j: usize) -> Result<Vec<f64>> {
        let n = self.space.factor_count();
        if j >= n {
            return Err(Error::CoordOutOfRange { index: j, n });
        }
        let shape = self.space.shape();
        let mut acc: Vec<NeumaierSum> = vec![NeumaierSum::new(); shape[j]];
        let mut odo = Odometer::new(&shape);
        let mut flat = 0usize;
        loop {
            let idx = odo.current();
            let mut w = 1.0;
            for (k, f) in self.space.factors().iter().enumerate() {
                if k != j {
                    w *= f.weight(idx[k]);
                }
            }
            acc[idx[j]].add(self.values[flat] * w);
            flat += 1;
            if !odo.advance() {
                break;
            }
        }
        Ok(acc.into_iter().map(|a| a.value()).collect())
    }
}

/// Uniform-norm distance `max_i |A(i) - B(i)|` over the grid (all weights
/// are positive, so the grid is the support).
pub fn sup_distance(a: &Coupling, b: &Coupling) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            detail: format!("sup_distance on shapes {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

/// A non-negative density on one factor with weighted sum 1 (unless flagged
/// unnormalized).
#[derive(Debug, Clone)]
pub struct MarginalDensity {
    space: Arc<MarginalSpace>,
    values: Vec<f64>,
    normalized: bool,
}

impl MarginalDensity {
    pub fn new(space: Arc<MarginalSpace>, values: Vec<f64>) -> Result<Self> {
        Self::build(space, values, true)
    }

    /// Counterexample scaffolding: skip the unit-mass check.
    pub fn new_unnormalized(space: Arc<MarginalSpace>, values: Vec<f64>) -> Result<Self> {
        Self::build(space, values, false)
    }

    fn build(space: Arc<MarginalSpace>, values: Vec<f64>, normalized: bool) -> Result<Self> {
        if values.len() != space.len() {
            return Err(Error::ShapeMismatch {
                detail: format!(
                    "{} marginal values for a space of {} points",
                    values.len(),
                    space.len()
                ),
            });
        }
        for (i, &v) in values.iter().enumerate() {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::NegativeValue { index: i, value: v });
            }
        }
        let d = Self {
            space,
            values,
            normalized,
        };
        if normalized {
            let mass = d.mass();
            if (mass - 1.0).abs() > MASS_TOL {
                return Err(Error::MassOff {
                    mass,
                    tol: MASS_TOL,
                });
            }
        }
        Ok(d)
    }

    pub fn space(&self) -> &Arc<MarginalSpace> {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    /// Weighted sum against the factor's quadrature weights.
    pub fn mass(&self) -> f64 {
        compensated_dot(&self.values, self.space.weights())
    }

    /// Uniform-norm distance to another density on the same factor.
    pub fn sup_distance(&self, other: &MarginalDensity) -> Result<f64> {
        if self.values.len() != other.values.len() {
            return Err(Error::ShapeMismatch {
                detail: format!(
                    "marginal lengths {} vs {}",
                    self.values.len(),
                    other.values.len()
                ),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }
}

/// Uniform-norm distance between a density and a raw value vector.
pub fn sup_distance_values(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

//! Compensated (Neumaier) summation.
//!
//! Marginal projections and mass integrals must stay exact to ~1e-12 on
//! tensors with up to ~10^6 cells, which plain left-to-right summation does
//! not deliver. The Neumaier variant of Kahan summation keeps the running
//! compensation correct even when the next term is larger than the partial
//! sum.

/// Running compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    s: f64,
    c: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.s + x;
        if self.s.abs() >= x.abs() {
            self.c += (self.s - t) + x;
        } else {
            self.c += (x - t) + self.s;
        }
        self.s = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.s + self.c
    }
}

/// Compensated sum of a slice.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let mut acc = NeumaierSum::new();
    for &x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Compensated weighted sum `Σ v[i] * w[i]`.
pub fn compensated_dot(values: &[f64], weights: &[f64]) -> f64 {
    debug_assert_eq!(values.len(), weights.len());
    let mut acc = NeumaierSum::new();
    for (&v, &w) in values.iter().zip(weights) {
        acc.add(v * w);
    }
    acc.value()
}

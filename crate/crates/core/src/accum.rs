//! Order-independent floating-point accumulation.
//!
//! Each addend is rounded once onto a fixed 2^-96 grid and summed as an
//! integer, so the total is bit-identical for any permutation or any
//! partitioning of the inputs across threads.

use std::ops::AddAssign;

const SCALE_BITS: i32 = 96;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct ExactSum(i128);

impl ExactSum {
    pub(crate) fn add(&mut self, x: f64) {
        debug_assert!(x.is_finite() && x.abs() < 2f64.powi(30));
        self.0 += (x * 2f64.powi(SCALE_BITS)) as i128;
    }

    pub(crate) fn merge(&mut self, other: &ExactSum) {
        self.0 += other.0;
    }

    /// `self − other`, rounded once.
    pub(crate) fn difference(&self, other: &ExactSum) -> f64 {
        (self.0 - other.0) as f64 * 2f64.powi(-SCALE_BITS)
    }

    pub(crate) fn value(&self) -> f64 {
        self.0 as f64 * 2f64.powi(-SCALE_BITS)
    }
}

impl AddAssign<f64> for ExactSum {
    fn add_assign(&mut self, rhs: f64) {
        self.add(rhs);
    }
}

#[cfg(test)]
/// Sums a slice with [`ExactSum`].
pub(crate) fn exact_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = ExactSum::default();
    for x in xs {
        s.add(x);
    }
    s.value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_invariant() {
        let xs = [0.1, 0.7, 1e-9, 0.333333333333, 0.25, 0.000123];
        let a = exact_sum(xs.iter().copied());
        let b = exact_sum(xs.iter().rev().copied());
        assert_eq!(a.to_bits(), b.to_bits());
        assert!((a - xs.iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn merge_matches_single_pass() {
        let mut left = ExactSum::default();
        let mut right = ExactSum::default();
        let mut all = ExactSum::default();
        for (i, x) in [0.3, 0.6, -0.2, 0.45].iter().enumerate() {
            all += *x;
            if i % 2 == 0 {
                left += *x;
            } else {
                right += *x;
            }
        }
        left.merge(&right);
        assert_eq!(left, all);
    }
}

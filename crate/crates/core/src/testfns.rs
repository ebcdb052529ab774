//! Versioned library of bounded test functions.
//!
//! Stationary and pathwise checks are quantified over bounded functions of
//! the state. The library is fixed (12 functions) and versioned so reports
//! stay comparable across releases. Coordinates referred to by a function
//! that a model does not have (e.g. the second queue of a single-queue
//! model) saturate at the last real coordinate.

/// Version tag recorded in every report.
pub const LIBRARY_VERSION: &str = "v1";

/// A bounded test function on states in `Z_+^m`.
#[derive(Clone, Debug, PartialEq)]
pub enum TestFunction {
    /// `min(x[q], cap)`
    TruncCoord { queue: usize, cap: u32 },
    /// `min(sum_i x[i], cap)`
    TruncTotal { cap: u32 },
    /// `1(x[q] >= 1)`
    CoordPositive { queue: usize },
    /// `1(sum_i x[i] == 0)`
    Empty,
    /// `1(sum_i x[i] <= cap)`
    TotalAtMost { cap: u32 },
    /// `1(x[q1] > x[q2])`
    CoordGreater { q1: usize, q2: usize },
    /// `z^(sum_i x[i])` for a scalar `z` in (0, 1)
    Monomial { z: f64 },
    /// `prod_i min(x[i], cap)` (bounded by `cap^m`)
    TruncProduct { cap: u32 },
}

impl TestFunction {
    /// Stable name used as a point label in reports.
    pub fn name(&self) -> String {
        match self {
            Self::TruncCoord { queue, cap } => format!("min_x{}_{}", queue + 1, cap),
            Self::TruncTotal { cap } => format!("min_total_{cap}"),
            Self::CoordPositive { queue } => format!("x{}_positive", queue + 1),
            Self::Empty => "system_empty".to_string(),
            Self::TotalAtMost { cap } => format!("total_at_most_{cap}"),
            Self::CoordGreater { q1, q2 } => format!("x{}_gt_x{}", q1 + 1, q2 + 1),
            Self::Monomial { z } => format!("monomial_{z}"),
            Self::TruncProduct { cap } => format!("trunc_product_{cap}"),
        }
    }

    /// Evaluate on the coordinate-wise sum of up to three vectors, without
    /// materializing the sum.
    pub fn eval_sum(&self, x: &[u32], y: Option<&[u32]>, z: Option<&[u32]>) -> f64 {
        let m = x.len();
        let coord = |i: usize| -> u32 {
            x[i] + y.map_or(0, |v| v[i]) + z.map_or(0, |v| v[i])
        };
        let clamp_q = |q: usize| q.min(m - 1);
        match self {
            Self::TruncCoord { queue, cap } => f64::from(coord(clamp_q(*queue)).min(*cap)),
            Self::TruncTotal { cap } => {
                let total: u64 = (0..m).map(|i| u64::from(coord(i))).sum();
                f64::from(total.min(u64::from(*cap)) as u32)
            }
            Self::CoordPositive { queue } => {
                if coord(clamp_q(*queue)) >= 1 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Empty => {
                if (0..m).all(|i| coord(i) == 0) {
                    1.0
                } else {
                    0.0
                }
            }
            Self::TotalAtMost { cap } => {
                let total: u64 = (0..m).map(|i| u64::from(coord(i))).sum();
                if total <= u64::from(*cap) {
                    1.0
                } else {
                    0.0
                }
            }
            Self::CoordGreater { q1, q2 } => {
                if coord(clamp_q(*q1)) > coord(clamp_q(*q2)) {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Monomial { z } => {
                let total: u64 = (0..m).map(|i| u64::from(coord(i))).sum();
                z.powi(total.min(i32::MAX as u64) as i32)
            }
            Self::TruncProduct { cap } => {
                (0..m).map(|i| f64::from(coord(i).min(*cap))).product()
            }
        }
    }

    pub fn eval(&self, x: &[u32]) -> f64 {
        self.eval_sum(x, None, None)
    }
}

/// The fixed v1 library for an `m`-queue model.
pub fn library(m: usize) -> Vec<TestFunction> {
    let last = m.saturating_sub(1);
    vec![
        TestFunction::TruncCoord { queue: 0, cap: 10 },
        TestFunction::TruncCoord { queue: last, cap: 10 },
        TestFunction::TruncTotal { cap: 10 },
        TestFunction::TruncTotal { cap: 20 },
        TestFunction::CoordPositive { queue: 0 },
        TestFunction::Empty,
        TestFunction::TotalAtMost { cap: 3 },
        TestFunction::CoordGreater { q1: 0, q2: last },
        TestFunction::Monomial { z: 0.25 },
        TestFunction::Monomial { z: 0.5 },
        TestFunction::Monomial { z: 0.9 },
        TestFunction::TruncProduct { cap: 5 },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_has_twelve_entries() {
        assert_eq!(library(1).len(), 12);
        assert_eq!(library(3).len(), 12);
    }

    #[test]
    fn eval_sum_matches_eval_on_materialized_sum() {
        let x = [2u32, 0, 5];
        let y = [1u32, 3, 0];
        let sum = [3u32, 3, 5];
        for f in library(3) {
            assert_eq!(f.eval_sum(&x, Some(&y), None), f.eval(&sum), "{}", f.name());
        }
    }

    #[test]
    fn functions_are_bounded_on_large_states() {
        let huge = [1_000_000u32, 999_999, 42];
        for f in library(3) {
            let v = f.eval(&huge);
            assert!(v.is_finite());
            assert!(v.abs() <= 5f64.powi(3) * 1_000.0);
        }
    }

    #[test]
    fn names_are_unique() {
        let names: Vec<String> = library(2).iter().map(TestFunction::name).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }
}

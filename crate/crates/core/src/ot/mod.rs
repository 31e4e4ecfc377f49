//! Entropic-regularised optimal transport on the label simplex.
//!
//! Histograms live on `Σ_L`, costs are symmetric zero-diagonal `L×L`
//! matrices, and couplings are nonnegative matrices with prescribed
//! marginals. `sinkhorn` holds the scaling solver and the training
//! subgradient; `exact` is a dense transportation-simplex solver kept at
//! oracle scale.

mod axioms;
mod exact;
mod sinkhorn;

pub use axioms::{check_metric_axioms, MetricAxiomReport};
pub use exact::exact_ot;
pub use sinkhorn::{
    entropic_objective, entropy, ot_subgradient, sinkhorn_distance, sinkhorn_plan, SinkhornState,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};

use ndarray::{Array1, Array2};
use thiserror::Error;

/// Tolerance for construction-time invariant checks (sums, symmetry).
pub const STRICT_TOL: f64 = 1e-9;

/// Marginal tolerance for transport-plan validation.
pub const MARGINAL_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum OtError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("histogram entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },
    #[error("histogram sums to {sum}, expected 1 within {STRICT_TOL}")]
    NotNormalized { sum: f64 },
    #[error("histogram has no positive entry to normalize")]
    AllZero,
    #[error("scaling vectors became non-finite; lambda is too large for the cost scale")]
    NumericalUnderflow,
    #[error("transportation simplex could not resolve a degenerate basis")]
    DegenerateBasis,
    #[error("cost matrix is not symmetric at ({0},{1})")]
    AsymmetricCost(usize, usize),
    #[error("cost matrix has nonzero diagonal at {0}")]
    NonzeroDiagonal(usize),
    #[error("cost matrix entry ({0},{1}) is negative")]
    NegativeCost(usize, usize),
    #[error("plan marginal deviates by {err} (allowed {tol})")]
    MarginalMismatch { err: f64, tol: f64 },
}

/// How [`make_histogram`] treats input mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistogramMode {
    /// Input must already sum to 1 within [`STRICT_TOL`].
    Strict,
    /// Input is divided by its sum; requires at least one positive entry.
    Normalize,
}

/// A probability vector on the label simplex `Σ_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    values: Array1<f64>,
}

impl Histogram {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    /// Uniform distribution over `len` labels.
    pub fn uniform(len: usize) -> Histogram {
        Histogram {
            values: Array1::from_elem(len, 1.0 / len as f64),
        }
    }

    pub fn l1_distance(&self, other: &Histogram) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// Build a [`Histogram`] from raw nonnegative mass.
pub fn make_histogram(raw: &[f64], mode: HistogramMode) -> Result<Histogram, OtError> {
    if raw.len() < 2 {
        return Err(OtError::DimensionMismatch(format!(
            "histogram needs at least 2 entries, got {}",
            raw.len()
        )));
    }
    for (index, &value) in raw.iter().enumerate() {
        if value < 0.0 || !value.is_finite() {
            return Err(OtError::NegativeEntry { index, value });
        }
    }
    let sum: f64 = raw.iter().sum();
    match mode {
        HistogramMode::Strict => {
            if (sum - 1.0).abs() > STRICT_TOL {
                return Err(OtError::NotNormalized { sum });
            }
            Ok(Histogram {
                values: Array1::from_vec(raw.to_vec()),
            })
        }
        HistogramMode::Normalize => {
            if sum <= 0.0 {
                return Err(OtError::AllZero);
            }
            Ok(Histogram {
                values: Array1::from_vec(raw.iter().map(|v| v / sum).collect()),
            })
        }
    }
}

/// The `L×L` ground metric `M`: nonnegative, symmetric, zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: Array2<f64>,
}

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<CostMatrix, OtError> {
        let (rows, cols) = entries.dim();
        if rows != cols || rows < 2 {
            return Err(OtError::DimensionMismatch(format!(
                "cost matrix must be square with L >= 2, got {rows}x{cols}"
            )));
        }
        for i in 0..rows {
            if entries[[i, i]].abs() > STRICT_TOL {
                return Err(OtError::NonzeroDiagonal(i));
            }
            for j in 0..cols {
                let value = entries[[i, j]];
                if value < 0.0 || !value.is_finite() {
                    return Err(OtError::NegativeCost(i, j));
                }
                if (value - entries[[j, i]]).abs() > STRICT_TOL {
                    return Err(OtError::AsymmetricCost(i, j));
                }
            }
        }
        Ok(CostMatrix { entries })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    /// Elementwise square root; for kernel-derived costs this is the
    /// pseudo-metric whose triangle inequality `check_metric_axioms`
    /// validates.
    pub fn elementwise_sqrt(&self) -> CostMatrix {
        CostMatrix {
            entries: self.entries.mapv(f64::sqrt),
        }
    }

    /// Largest entry, used to scale costs into `[0, 1]`.
    pub fn max_entry(&self) -> f64 {
        self.entries.iter().cloned().fold(0.0, f64::max)
    }
}

/// An `L×L` nonnegative coupling with prescribed marginals.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    entries: Array2<f64>,
    row_marginal: Histogram,
    col_marginal: Histogram,
}

impl TransportPlan {
    /// Validate `entries` against the marginals within `tol` per entry.
    pub fn new(
        entries: Array2<f64>,
        row_marginal: Histogram,
        col_marginal: Histogram,
        tol: f64,
    ) -> Result<TransportPlan, OtError> {
        let (rows, cols) = entries.dim();
        if rows != row_marginal.len() || cols != col_marginal.len() {
            return Err(OtError::DimensionMismatch(format!(
                "plan is {rows}x{cols} but marginals have lengths {} and {}",
                row_marginal.len(),
                col_marginal.len()
            )));
        }
        for ((i, j), &value) in entries.indexed_iter() {
            if value < 0.0 || !value.is_finite() {
                return Err(OtError::NegativeCost(i, j));
            }
        }
        for i in 0..rows {
            let err = (entries.row(i).sum() - row_marginal.values()[i]).abs();
            if err > tol {
                return Err(OtError::MarginalMismatch { err, tol });
            }
        }
        for j in 0..cols {
            let err = (entries.column(j).sum() - col_marginal.values()[j]).abs();
            if err > tol {
                return Err(OtError::MarginalMismatch { err, tol });
            }
        }
        Ok(TransportPlan {
            entries,
            row_marginal,
            col_marginal,
        })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn row_marginal(&self) -> &Histogram {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &Histogram {
        &self.col_marginal
    }

    /// Transport cost `⟨P, M⟩`.
    pub fn cost(&self, m: &CostMatrix) -> f64 {
        (&self.entries * m.entries()).sum()
    }

    pub fn nonzero_count(&self) -> usize {
        self.entries.iter().filter(|&&v| v > 0.0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn strict_histogram_accepts_normalized_input() {
        let h = make_histogram(&[0.5, 0.5], HistogramMode::Strict).unwrap();
        assert_eq!(h.values().as_slice().unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn normalize_mode_divides_by_sum() {
        let h = make_histogram(&[1.0, 1.0, 0.0, 2.0], HistogramMode::Normalize).unwrap();
        assert_eq!(h.values().as_slice().unwrap(), &[0.25, 0.25, 0.0, 0.5]);
    }

    #[test]
    fn all_zero_input_is_rejected_in_normalize_mode() {
        assert_eq!(
            make_histogram(&[0.0, 0.0], HistogramMode::Normalize),
            Err(OtError::AllZero)
        );
    }

    #[test]
    fn strict_mode_rejects_unnormalized_input() {
        assert!(matches!(
            make_histogram(&[0.5, 0.6], HistogramMode::Strict),
            Err(OtError::NotNormalized { .. })
        ));
    }

    #[test]
    fn negative_entries_are_rejected() {
        assert!(matches!(
            make_histogram(&[1.5, -0.5], HistogramMode::Strict),
            Err(OtError::NegativeEntry { index: 1, .. })
        ));
    }

    #[test]
    fn short_input_is_rejected() {
        assert!(matches!(
            make_histogram(&[1.0], HistogramMode::Strict),
            Err(OtError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn cost_matrix_validates_invariants() {
        assert!(CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).is_ok());
        assert!(matches!(
            CostMatrix::new(array![[0.0, 1.0], [2.0, 0.0]]),
            Err(OtError::AsymmetricCost(_, _))
        ));
        assert!(matches!(
            CostMatrix::new(array![[0.5, 1.0], [1.0, 0.0]]),
            Err(OtError::NonzeroDiagonal(0))
        ));
        assert!(matches!(
            CostMatrix::new(array![[0.0, -1.0], [-1.0, 0.0]]),
            Err(OtError::NegativeCost(0, 1))
        ));
    }

    #[test]
    fn transport_plan_checks_marginals() {
        let r = make_histogram(&[0.5, 0.5], HistogramMode::Strict).unwrap();
        let c = r.clone();
        let ok = TransportPlan::new(array![[0.5, 0.0], [0.0, 0.5]], r.clone(), c.clone(), 1e-9);
        assert!(ok.is_ok());
        let bad = TransportPlan::new(array![[0.4, 0.0], [0.0, 0.6]], r, c, 1e-9);
        assert!(matches!(bad, Err(OtError::MarginalMismatch { .. })));
    }
}

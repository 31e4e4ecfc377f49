//! Latent label ground-metric learning.
//!
//! A PSD similarity kernel `S` over labels induces the transport cost
//! `M_ij = S_ii + S_jj − 2S_ij`. Per batch, transport plans are folded
//! into a gradient accumulator `P̄`, the kernel is refreshed by the
//! closed-form stationarity solution of the Burg-regularised objective,
//! and the result is projected back onto the PSD cone.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::ot::{CostMatrix, OtError, TransportPlan};

/// Symmetry tolerance for kernels.
const SYM_TOL: f64 = 1e-9;
/// Kernels may dip this far below the PSD cone before being rejected.
const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("kernel is not symmetric at ({0},{1})")]
    Asymmetric(usize, usize),
    #[error("kernel is not positive semi-definite (min eigenvalue {0})")]
    NotPsd(f64),
    #[error("reference kernel is singular")]
    SingularReference,
    #[error("kernel argument is not positive definite")]
    NonPositiveDefiniteArgument,
    #[error("update system is singular; lambda1 is too small relative to the plan mass")]
    SingularSystem,
    #[error("no labeled examples to build the reference kernel from")]
    EmptyLabelSet,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Eigen(#[from] LinalgError),
    #[error(transparent)]
    Cost(#[from] OtError),
}

/// A PSD label similarity kernel; reference kernels (`S0`) are strictly
/// positive definite.
#[derive(Debug, Clone)]
pub struct SimilarityKernel {
    entries: Array2<f64>,
    is_reference: bool,
}

impl SimilarityKernel {
    pub fn new(entries: Array2<f64>) -> Result<SimilarityKernel, MetricError> {
        Self::validate(&entries)?;
        Ok(SimilarityKernel {
            entries,
            is_reference: false,
        })
    }

    /// A reference kernel must additionally be invertible.
    pub fn new_reference(entries: Array2<f64>) -> Result<SimilarityKernel, MetricError> {
        Self::validate(&entries)?;
        linalg::cholesky(&entries).map_err(|_| MetricError::SingularReference)?;
        Ok(SimilarityKernel {
            entries,
            is_reference: true,
        })
    }

    fn validate(entries: &Array2<f64>) -> Result<(), MetricError> {
        let (rows, cols) = entries.dim();
        if rows != cols || rows < 2 {
            return Err(MetricError::DimensionMismatch(format!(
                "kernel must be square with L >= 2, got {rows}x{cols}"
            )));
        }
        for i in 0..rows {
            for j in (i + 1)..cols {
                if (entries[[i, j]] - entries[[j, i]]).abs() > SYM_TOL {
                    return Err(MetricError::Asymmetric(i, j));
                }
            }
        }
        let min_eig = linalg::min_eigenvalue(entries)?;
        if min_eig < -PSD_TOL {
            return Err(MetricError::NotPsd(min_eig));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn is_reference(&self) -> bool {
        self.is_reference
    }
}

/// Accumulates the plan-derived kernel gradient `P̄` over a batch.
///
/// Off-diagonals collect `−(P_ij + P_ji)` (the symmetrised form), the
/// diagonal collects `Σ_{k≠i}(P_ik + P_ki)`, so the accumulated matrix is
/// the gradient of `Σ⟨P, M(S)⟩` with respect to `S` for fixed plans.
/// Labeled plans and pseudo-couplings enter through the same formula.
#[derive(Debug, Clone)]
pub struct PlanAccumulator {
    pbar: Array2<f64>,
    sample_count: usize,
}

impl PlanAccumulator {
    pub fn new(dim: usize) -> PlanAccumulator {
        PlanAccumulator {
            pbar: Array2::zeros((dim, dim)),
            sample_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.pbar.nrows()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn pbar(&self) -> &Array2<f64> {
        &self.pbar
    }

    /// `P̄` divided by the number of accumulated plans, so the update
    /// strength is batch-size invariant.
    pub fn normalized_pbar(&self) -> Array2<f64> {
        if self.sample_count == 0 {
            self.pbar.clone()
        } else {
            &self.pbar / self.sample_count as f64
        }
    }

    /// Fold one transport plan (labeled or pseudo) into the accumulator.
    pub fn accumulate(&mut self, plan: &TransportPlan) -> Result<(), MetricError> {
        let l = self.dim();
        if plan.dim() != l {
            return Err(MetricError::DimensionMismatch(format!(
                "plan is {}x{0} but accumulator is {l}x{l}",
                plan.dim()
            )));
        }
        let p = plan.entries();
        for i in 0..l {
            let mut diag = 0.0;
            for k in 0..l {
                if k != i {
                    diag += p[[i, k]] + p[[k, i]];
                }
            }
            self.pbar[[i, i]] += diag;
            for j in 0..l {
                if j != i {
                    self.pbar[[i, j]] -= p[[i, j]] + p[[j, i]];
                }
            }
        }
        self.sample_count += 1;
        Ok(())
    }

    /// Merge a partial accumulator (commutative, associative).
    pub fn merge(&mut self, other: &PlanAccumulator) {
        self.pbar += &other.pbar;
        self.sample_count += other.sample_count;
    }
}

/// Convert a kernel to the transport cost `M_ij = S_ii + S_jj − 2S_ij`.
///
/// Rounding noise below zero is clamped; the elementwise square root of
/// the result is a pseudo-metric.
pub fn cost_from_kernel(s: &SimilarityKernel) -> Result<CostMatrix, MetricError> {
    let l = s.dim();
    let e = s.entries();
    let mut m = Array2::zeros((l, l));
    for i in 0..l {
        for j in 0..l {
            if i != j {
                let sym = 0.5 * (e[[i, j]] + e[[j, i]]);
                m[[i, j]] = (e[[i, i]] + e[[j, j]] - 2.0 * sym).max(0.0);
            }
        }
    }
    // Exact symmetry despite floating-point summation order.
    for i in 0..l {
        for j in (i + 1)..l {
            let avg = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = avg;
            m[[j, i]] = avg;
        }
    }
    Ok(CostMatrix::new(m)?)
}

/// Burg matrix divergence `tr(S S0⁻¹) − log det(S S0⁻¹) − p`.
///
/// With `p = L` the value is nonnegative and zero iff `S = S0`; other `p`
/// only shift it by a constant.
pub fn burg_divergence(
    s: &SimilarityKernel,
    s0: &SimilarityKernel,
    p: f64,
) -> Result<f64, MetricError> {
    if s.dim() != s0.dim() {
        return Err(MetricError::DimensionMismatch(format!(
            "S is {}x{0}, S0 is {1}x{1}",
            s.dim(),
            s0.dim()
        )));
    }
    let s0_inv =
        linalg::spd_inverse(s0.entries()).map_err(|_| MetricError::SingularReference)?;
    let product = s.entries().dot(&s0_inv);
    let trace: f64 = (0..s.dim()).map(|i| product[[i, i]]).sum();
    let log_det_s = linalg::spd_log_det(s.entries())
        .map_err(|_| MetricError::NonPositiveDefiniteArgument)?;
    let log_det_s0 =
        linalg::spd_log_det(s0.entries()).map_err(|_| MetricError::SingularReference)?;
    Ok(trace - (log_det_s - log_det_s0) - p)
}

/// Which closed-form kernel update to apply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelUpdateRule {
    /// Stationarity solution `S = λ1 (P̄ + λ1 S0⁻¹)⁻¹` of the
    /// Burg-regularised fixed-plan objective.
    Derived,
    /// Literal form `S = (P̄ + S0⁻¹ − p·I)⁻¹`, kept for comparison.
    Literal { p: f64 },
}

/// Pre-projection stationary point of
/// `⟨P̄, S⟩ + λ1 (tr(S S0⁻¹) − log det(S S0⁻¹) − p)` over `S`.
pub fn stationary_kernel(
    acc: &PlanAccumulator,
    s0: &SimilarityKernel,
    lambda1: f64,
    rule: KernelUpdateRule,
) -> Result<Array2<f64>, MetricError> {
    if acc.dim() != s0.dim() {
        return Err(MetricError::DimensionMismatch(format!(
            "accumulator is {}x{0}, S0 is {1}x{1}",
            acc.dim(),
            s0.dim()
        )));
    }
    let s0_inv =
        linalg::spd_inverse(s0.entries()).map_err(|_| MetricError::SingularReference)?;
    let pbar = acc.normalized_pbar();
    let (system, scale) = match rule {
        KernelUpdateRule::Derived => (&pbar + &(s0_inv * lambda1), lambda1),
        KernelUpdateRule::Literal { p } => {
            let l = acc.dim();
            (&pbar + &s0_inv - Array2::<f64>::eye(l) * p, 1.0)
        }
    };
    let eig = linalg::symmetric_eigen(&system)?;
    if eig.values.iter().any(|v| v.abs() < 1e-12) {
        return Err(MetricError::SingularSystem);
    }
    let inv_vals = Array1::from_iter(eig.values.iter().map(|v| scale / v));
    let lam = Array2::from_diag(&inv_vals);
    let s = eig.vectors.dot(&lam).dot(&eig.vectors.t());
    Ok((&s + &s.t()) * 0.5)
}

/// Closed-form kernel update followed by PSD projection.
pub fn update_kernel(
    acc: &PlanAccumulator,
    s0: &SimilarityKernel,
    lambda1: f64,
) -> Result<SimilarityKernel, MetricError> {
    let raw = stationary_kernel(acc, s0, lambda1, KernelUpdateRule::Derived)?;
    psd_project(&raw)
}

/// Like [`update_kernel`] but with an explicit update rule.
pub fn update_kernel_with_rule(
    acc: &PlanAccumulator,
    s0: &SimilarityKernel,
    lambda1: f64,
    rule: KernelUpdateRule,
) -> Result<SimilarityKernel, MetricError> {
    let raw = stationary_kernel(acc, s0, lambda1, rule)?;
    psd_project(&raw)
}

/// Nearest PSD matrix in Frobenius norm: symmetrise, eigendecompose,
/// clamp negative eigenvalues at zero. Idempotent.
pub fn psd_project(a: &Array2<f64>) -> Result<SimilarityKernel, MetricError> {
    let sym = (a + &a.t()) * 0.5;
    let eig = linalg::symmetric_eigen(&sym)?;
    let clamped = Array1::from_iter(eig.values.iter().map(|v| v.max(0.0)));
    let lam = Array2::from_diag(&clamped);
    let projected = eig.vectors.dot(&lam).dot(&eig.vectors.t());
    let entries = (&projected + &projected.t()) * 0.5;
    SimilarityKernel::new(entries)
}

/// Reference kernel `S0 = YᵀY / N + ridge·I` from multi-hot label rows.
pub fn init_reference_kernel(
    labels: &[Vec<f64>],
    ridge: f64,
) -> Result<SimilarityKernel, MetricError> {
    if labels.is_empty() {
        return Err(MetricError::EmptyLabelSet);
    }
    let l = labels[0].len();
    if labels.iter().any(|y| y.len() != l) {
        return Err(MetricError::DimensionMismatch(
            "label vectors have inconsistent lengths".into(),
        ));
    }
    let n = labels.len() as f64;
    let mut gram = Array2::zeros((l, l));
    for y in labels {
        for i in 0..l {
            if y[i] == 0.0 {
                continue;
            }
            for j in 0..l {
                gram[[i, j]] += y[i] * y[j];
            }
        }
    }
    gram /= n;
    for i in 0..l {
        gram[[i, i]] += ridge;
    }
    SimilarityKernel::new_reference(gram)
}

/// Render a labeled square matrix as CSV: header row of label names, then
/// row-major values.
pub fn matrix_to_csv(matrix: &Array2<f64>, label_names: &[String]) -> String {
    let mut out = String::new();
    out.push_str(&label_names.join(","));
    out.push('\n');
    for row in matrix.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

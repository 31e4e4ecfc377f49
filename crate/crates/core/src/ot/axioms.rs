//! Distance-axiom checking for ground metrics.

use super::CostMatrix;

const SLACK: f64 = 1e-9;

/// Outcome of [`check_metric_axioms`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricAxiomReport {
    pub nonnegativity: bool,
    pub symmetry: bool,
    pub zero_diagonal: bool,
    /// Number of triples `(i, j, k)` with `M_ik > M_ij + M_jk` beyond slack.
    pub triangle_violations: usize,
}

impl MetricAxiomReport {
    pub fn all_pass(&self) -> bool {
        self.nonnegativity && self.symmetry && self.zero_diagonal && self.triangle_violations == 0
    }
}

/// Exhaustively check the four distance axioms over all index triples.
///
/// For kernel-derived costs `M_ij = S_ii + S_jj − 2S_ij` the triangle
/// inequality holds for the elementwise square root of `M`, not `M`
/// itself; pass `m.elementwise_sqrt()` in that case.
pub fn check_metric_axioms(m: &CostMatrix) -> MetricAxiomReport {
    let entries = m.entries();
    let l = m.dim();
    let nonnegativity = entries.iter().all(|&x| x >= 0.0);
    let mut symmetry = true;
    let mut zero_diagonal = true;
    for i in 0..l {
        if entries[[i, i]].abs() > SLACK {
            zero_diagonal = false;
        }
        for j in 0..l {
            if (entries[[i, j]] - entries[[j, i]]).abs() > SLACK {
                symmetry = false;
            }
        }
    }
    let mut triangle_violations = 0;
    for i in 0..l {
        for j in 0..l {
            for k in 0..l {
                if entries[[i, k]] > entries[[i, j]] + entries[[j, k]] + SLACK {
                    triangle_violations += 1;
                }
            }
        }
    }
    MetricAxiomReport {
        nonnegativity,
        symmetry,
        zero_diagonal,
        triangle_violations,
    }
}

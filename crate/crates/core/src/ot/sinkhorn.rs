//! Sinkhorn-Knopp scaling for entropic OT and its centered dual subgradient.

use ndarray::{Array1, Array2};

use super::{CostMatrix, Histogram, OtError, TransportPlan};

/// Default sweep cap for the inner scaling loop.
pub const DEFAULT_MAX_ITER: usize = 1000;
/// Default ℓ1 marginal tolerance for the inner scaling loop.
pub const DEFAULT_TOL: f64 = 1e-6;

/// Entries of the scaling vectors below this trigger a rescale of `u`/`v`.
const UNDERFLOW_GUARD: f64 = 1e-300;

/// Scaling state after a Sinkhorn run: `P = diag(u) K diag(v)` with
/// `K = exp(-λM - 1)`. The duals are `α = log(u)/λ`, `β = log(v)/λ`.
#[derive(Debug, Clone)]
pub struct SinkhornState {
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    pub kernel_k: Array2<f64>,
    pub lambda: f64,
    pub iterations_used: usize,
    /// Whether the column ℓ1 error dropped below `tol` before `max_iter`.
    pub converged: bool,
}

fn check_dims(r: &Histogram, c: &Histogram, m: &CostMatrix) -> Result<usize, OtError> {
    let l = r.len();
    if c.len() != l || m.dim() != l {
        let d = m.dim();
        return Err(OtError::DimensionMismatch(format!(
            "r has length {l}, c has length {}, M is {d}x{d}",
            c.len()
        )));
    }
    Ok(l)
}

/// Solve the entropic OT problem between `r` and `c` by diagonal scaling.
///
/// Iterates `u ← r ⊘ K(c ⊘ Kᵀu)` until the ℓ1 error of both marginals of
/// `diag(u) K diag(v)` drops below `tol`, or `max_iter` sweeps elapse. The
/// returned plan has its rows rescaled to match `r` exactly; columns match
/// `c` within the achieved tolerance.
pub fn sinkhorn_plan(
    r: &Histogram,
    c: &Histogram,
    m: &CostMatrix,
    lambda: f64,
    max_iter: usize,
    tol: f64,
) -> Result<(TransportPlan, SinkhornState), OtError> {
    let l = check_dims(r, c, m)?;
    assert!(lambda > 0.0, "lambda must be positive");

    let kernel_k = m.entries().mapv(|cost| (-lambda * cost - 1.0).exp());
    let kernel_t = kernel_k.t();
    let rv = r.values();
    let cv = c.values();

    let mut u: Array1<f64> = Array1::ones(l);
    let mut v: Array1<f64> = Array1::zeros(l);
    let mut iterations_used = 0;
    let mut converged = false;

    for iter in 1..=max_iter {
        iterations_used = iter;
        // v update makes columns exact, u update makes rows exact.
        let kt_u = kernel_t.dot(&u);
        v = safe_div(cv, &kt_u)?;
        let kv = kernel_k.dot(&v);
        u = safe_div(rv, &kv)?;
        guard_scale(&mut u, &mut v)?;

        // Rows are exact after the u update; measure the column error.
        let col_sums = kernel_t.dot(&u) * &v;
        let col_err: f64 = col_sums
            .iter()
            .zip(cv.iter())
            .map(|(s, c)| (s - c).abs())
            .sum();
        if col_err <= tol {
            converged = true;
            break;
        }
    }

    let mut entries = Array2::zeros((l, l));
    for i in 0..l {
        for j in 0..l {
            entries[[i, j]] = u[i] * kernel_k[[i, j]] * v[j];
        }
    }
    // Exact row rescale; columns stay within the achieved tolerance.
    for i in 0..l {
        let sum = entries.row(i).sum();
        if sum > 0.0 {
            let scale = rv[i] / sum;
            entries.row_mut(i).mapv_inplace(|p| p * scale);
        }
    }
    let achieved: f64 = (0..l)
        .map(|j| (entries.column(j).sum() - cv[j]).abs())
        .sum();
    let plan = TransportPlan::new(
        entries,
        r.clone(),
        c.clone(),
        (achieved + tol).max(super::MARGINAL_TOL),
    )?;
    let state = SinkhornState {
        u,
        v,
        kernel_k,
        lambda,
        iterations_used,
        converged,
    };
    Ok((plan, state))
}

fn safe_div(num: &Array1<f64>, den: &Array1<f64>) -> Result<Array1<f64>, OtError> {
    let mut out = Array1::zeros(num.len());
    for i in 0..num.len() {
        out[i] = if num[i] == 0.0 { 0.0 } else { num[i] / den[i] };
        if !out[i].is_finite() {
            return Err(OtError::NumericalUnderflow);
        }
    }
    Ok(out)
}

/// Rescale `u` by its maximum when entries drift toward the underflow
/// threshold; `v` absorbs the inverse so the plan is unchanged.
fn guard_scale(u: &mut Array1<f64>, v: &mut Array1<f64>) -> Result<(), OtError> {
    rescale_pair(u, v)?;
    rescale_pair(v, u)
}

fn rescale_pair(scaled: &mut Array1<f64>, other: &mut Array1<f64>) -> Result<(), OtError> {
    let needs_guard = scaled.iter().any(|&x| x > 0.0 && x < UNDERFLOW_GUARD);
    if needs_guard {
        let max = scaled.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 || !max.is_finite() {
            return Err(OtError::NumericalUnderflow);
        }
        scaled.mapv_inplace(|x| x / max);
        other.mapv_inplace(|x| x * max);
        if other.iter().any(|x| !x.is_finite()) {
            return Err(OtError::NumericalUnderflow);
        }
    }
    Ok(())
}

/// Sinkhorn distance `d_M^λ(r, c) = ⟨P^λ, M⟩` for the converged plan.
pub fn sinkhorn_distance(
    r: &Histogram,
    c: &Histogram,
    m: &CostMatrix,
    lambda: f64,
) -> Result<f64, OtError> {
    let (plan, _) = sinkhorn_plan(r, c, m, lambda, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    Ok(plan.cost(m))
}

/// Shannon entropy `H(P) = -Σ p_ij log p_ij` of the flattened plan,
/// with `0 log 0 = 0`.
pub fn entropy(plan: &TransportPlan) -> f64 {
    plan.entries()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Centered dual subgradient of `d_M^λ(·, target)` at `pred`:
/// `g = log(u)/λ − mean(log(u)/λ)·1`, so `Σ g_i = 0` exactly.
pub fn ot_subgradient(
    pred: &Histogram,
    target: &Histogram,
    m: &CostMatrix,
    lambda: f64,
    max_iter: usize,
    tol: f64,
) -> Result<Array1<f64>, OtError> {
    let (_, state) = sinkhorn_plan(pred, target, m, lambda, max_iter, tol)?;
    let mut g = state.u.mapv(|ui| ui.ln() / lambda);
    if g.iter().any(|x| !x.is_finite()) {
        return Err(OtError::NumericalUnderflow);
    }
    let mean = g.sum() / g.len() as f64;
    g.mapv_inplace(|x| x - mean);
    Ok(g)
}

/// Entropic transport objective `⟨P, M⟩ − H(P)/λ` at the converged plan.
///
/// The centered dual from [`ot_subgradient`] is the exact gradient of this
/// value with respect to the row marginal, which makes it the right scalar
/// for finite-difference checks.
pub fn entropic_objective(
    r: &Histogram,
    c: &Histogram,
    m: &CostMatrix,
    lambda: f64,
    max_iter: usize,
    tol: f64,
) -> Result<f64, OtError> {
    let (plan, _) = sinkhorn_plan(r, c, m, lambda, max_iter, tol)?;
    Ok(plan.cost(m) - entropy(&plan) / lambda)
}

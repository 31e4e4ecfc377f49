//! Dense transportation simplex, used as an exact oracle at small `L`.
//!
//! North-west-corner initialisation, MODI duals, Bland's entering rule.
//! Degeneracy is handled by keeping zero-flow basic cells; if the pivot
//! count cap is still exceeded the marginals are ε-perturbed and the final
//! basis is re-solved against the original marginals.

use ndarray::Array2;

use super::{CostMatrix, Histogram, OtError, TransportPlan};

/// Reduced costs below this magnitude count as optimal.
const REDUCED_COST_TOL: f64 = 1e-12;
const PIVOT_CAP: usize = 20_000;
const PERTURBATION: f64 = 1e-9;

/// Solve the exact OT problem `d_M(r, c) = min ⟨P, M⟩` over `U(r, c)`.
///
/// Returns an optimal vertex plan (at most `2L − 1` nonzeros) and its cost.
/// Intended as a test oracle; `L ≤ 16`.
pub fn exact_ot(
    r: &Histogram,
    c: &Histogram,
    m: &CostMatrix,
) -> Result<(TransportPlan, f64), OtError> {
    let l = r.len();
    if c.len() != l || m.dim() != l {
        return Err(OtError::DimensionMismatch(format!(
            "r has length {l}, c has length {}, M is {d}x{d}",
            c.len(),
            d = m.dim()
        )));
    }

    let supply: Vec<f64> = r.values().to_vec();
    let demand: Vec<f64> = c.values().to_vec();

    let basis = match solve_basis(&supply, &demand, m) {
        Ok(basis) => basis,
        // Retry on a perturbed instance, then re-solve flows on the
        // returned basis against the original marginals.
        Err(OtError::DegenerateBasis) => {
            let eps = PERTURBATION / l as f64;
            let p_supply: Vec<f64> = supply.iter().map(|s| s + eps).collect();
            let p_demand: Vec<f64> = demand.iter().map(|d| d + eps).collect();
            solve_basis(&p_supply, &p_demand, m)?
        }
        Err(e) => return Err(e),
    };

    let flows = tree_flows(&basis, &supply, &demand, l)?;
    let mut entries = Array2::zeros((l, l));
    for (&(i, j), &flow) in basis.iter().zip(flows.iter()) {
        entries[[i, j]] = flow;
    }
    let cost = (&entries * m.entries()).sum();
    let plan = TransportPlan::new(entries, r.clone(), c.clone(), 1e-9)?;
    Ok((plan, cost))
}

/// Run the simplex and return the optimal basis (cells only).
fn solve_basis(
    supply: &[f64],
    demand: &[f64],
    m: &CostMatrix,
) -> Result<Vec<(usize, usize)>, OtError> {
    let l = supply.len();
    let cost = m.entries();

    // North-west corner: exactly 2L - 1 basic cells, zero flows allowed.
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(2 * l - 1);
    let mut flows: Vec<f64> = Vec::with_capacity(2 * l - 1);
    {
        let mut remaining_supply = supply.to_vec();
        let mut remaining_demand = demand.to_vec();
        let (mut i, mut j) = (0, 0);
        loop {
            let shipped = remaining_supply[i].min(remaining_demand[j]);
            basis.push((i, j));
            flows.push(shipped);
            remaining_supply[i] -= shipped;
            remaining_demand[j] -= shipped;
            if i == l - 1 && j == l - 1 {
                break;
            }
            // On ties advance only one index so the basis stays a tree.
            if remaining_supply[i] <= remaining_demand[j] && i < l - 1 {
                i += 1;
            } else if j < l - 1 {
                j += 1;
            } else {
                i += 1;
            }
        }
    }
    debug_assert_eq!(basis.len(), 2 * l - 1);

    for _ in 0..PIVOT_CAP {
        // MODI duals from the basis tree: alpha[0] = 0.
        let (alpha, beta) = duals(&basis, cost, l)?;

        // Bland: lowest flat index with negative reduced cost enters.
        let mut entering = None;
        'scan: for i in 0..l {
            for j in 0..l {
                if basis.contains(&(i, j)) {
                    continue;
                }
                if cost[[i, j]] - alpha[i] - beta[j] < -REDUCED_COST_TOL {
                    entering = Some((i, j));
                    break 'scan;
                }
            }
        }
        let Some(enter) = entering else {
            return Ok(basis);
        };

        // The unique cycle through the entering cell alternates +/- flow.
        let cycle = find_cycle(&basis, enter, l)?;
        let mut theta = f64::INFINITY;
        let mut leave_pos = usize::MAX;
        for (pos, &cell) in cycle.iter().enumerate().skip(1).step_by(2) {
            let idx = basis.iter().position(|&b| b == cell).unwrap();
            let flow = flows[idx];
            // Strict < keeps the first candidate on ties (Bland).
            if flow < theta {
                theta = flow;
                leave_pos = pos;
            }
        }
        if leave_pos == usize::MAX {
            return Err(OtError::DegenerateBasis);
        }
        for (pos, &cell) in cycle.iter().enumerate().skip(1) {
            let idx = basis.iter().position(|&b| b == cell).unwrap();
            if pos % 2 == 1 {
                flows[idx] -= theta;
            } else {
                flows[idx] += theta;
            }
        }
        let leaving_cell = cycle[leave_pos];
        let idx = basis.iter().position(|&b| b == leaving_cell).unwrap();
        basis.remove(idx);
        flows.remove(idx);
        basis.push(enter);
        flows.push(theta);
    }
    Err(OtError::DegenerateBasis)
}

/// Dual potentials from the basis tree (`alpha[0] = 0`).
fn duals(
    basis: &[(usize, usize)],
    cost: &Array2<f64>,
    l: usize,
) -> Result<(Vec<f64>, Vec<f64>), OtError> {
    let mut alpha = vec![f64::NAN; l];
    let mut beta = vec![f64::NAN; l];
    alpha[0] = 0.0;
    let mut changed = true;
    while changed {
        changed = false;
        for &(i, j) in basis {
            if alpha[i].is_nan() && !beta[j].is_nan() {
                alpha[i] = cost[[i, j]] - beta[j];
                changed = true;
            } else if beta[j].is_nan() && !alpha[i].is_nan() {
                beta[j] = cost[[i, j]] - alpha[i];
                changed = true;
            }
        }
    }
    if alpha.iter().chain(beta.iter()).any(|x| x.is_nan()) {
        return Err(OtError::DegenerateBasis);
    }
    Ok((alpha, beta))
}

/// Find the unique alternating cycle that the entering cell closes.
///
/// Returned as a cell sequence starting with `enter`; odd positions lose
/// flow, even positions gain.
fn find_cycle(
    basis: &[(usize, usize)],
    enter: (usize, usize),
    l: usize,
) -> Result<Vec<(usize, usize)>, OtError> {
    // Path in the bipartite tree from row node enter.0 to col node enter.1.
    // Nodes: 0..l rows, l..2l cols.
    let mut adj: Vec<Vec<(usize, (usize, usize))>> = vec![Vec::new(); 2 * l];
    for &(i, j) in basis {
        adj[i].push((l + j, (i, j)));
        adj[l + j].push((i, (i, j)));
    }
    let start = enter.0;
    let goal = l + enter.1;
    let mut stack = vec![start];
    let mut parent: Vec<Option<(usize, (usize, usize))>> = vec![None; 2 * l];
    let mut visited = vec![false; 2 * l];
    visited[start] = true;
    while let Some(node) = stack.pop() {
        if node == goal {
            break;
        }
        for &(next, cell) in &adj[node] {
            if !visited[next] {
                visited[next] = true;
                parent[next] = Some((node, cell));
                stack.push(next);
            }
        }
    }
    if !visited[goal] {
        return Err(OtError::DegenerateBasis);
    }
    let mut path_cells = Vec::new();
    let mut node = goal;
    while node != start {
        let (prev, cell) = parent[node].unwrap();
        path_cells.push(cell);
        node = prev;
    }
    path_cells.reverse();
    let mut cycle = Vec::with_capacity(path_cells.len() + 1);
    cycle.push(enter);
    cycle.extend(path_cells);
    Ok(cycle)
}

/// Re-solve flows on the basis tree for the given marginals by repeated
/// leaf elimination.
fn tree_flows(
    basis: &[(usize, usize)],
    supply: &[f64],
    demand: &[f64],
    l: usize,
) -> Result<Vec<f64>, OtError> {
    let mut residual_supply = supply.to_vec();
    let mut residual_demand = demand.to_vec();
    let mut degree = vec![0usize; 2 * l];
    for &(i, j) in basis {
        degree[i] += 1;
        degree[l + j] += 1;
    }
    let mut flows = vec![0.0; basis.len()];
    let mut remaining: Vec<usize> = (0..basis.len()).collect();
    while !remaining.is_empty() {
        let before = remaining.len();
        remaining.retain(|&idx| {
            let (i, j) = basis[idx];
            if degree[i] == 1 {
                let flow = residual_supply[i];
                flows[idx] = flow;
                residual_supply[i] = 0.0;
                residual_demand[j] -= flow;
                degree[i] -= 1;
                degree[l + j] -= 1;
                false
            } else if degree[l + j] == 1 {
                let flow = residual_demand[j];
                flows[idx] = flow;
                residual_demand[j] = 0.0;
                residual_supply[i] -= flow;
                degree[i] -= 1;
                degree[l + j] -= 1;
                false
            } else {
                true
            }
        });
        if remaining.len() == before {
            return Err(OtError::DegenerateBasis);
        }
    }
    for flow in flows.iter_mut() {
        if *flow < 0.0 {
            if *flow < -1e-9 {
                return Err(OtError::DegenerateBasis);
            }
            *flow = 0.0;
        }
    }
    Ok(flows)
}

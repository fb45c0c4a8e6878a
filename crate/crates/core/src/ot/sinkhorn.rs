//! Log-domain alternating scaling for entropic transport.
//!
//! Each iteration updates the column potentials from the rows and then the
//! row potentials from the columns, so after any whole iteration the plan
//! reproduces the row marginal exactly (up to rounding) and the remaining
//! defect sits on the columns. Zero-mass rows and columns are dropped before
//! iterating and reinstated as zero rows/columns of the plan.

use crate::mat::Mat;

use super::{check_marginals, CostMatrix, OtError, TransportPlan};

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornSolution {
    pub plan: TransportPlan,
    /// <P, C> under the full cost matrix.
    pub cost: f64,
    pub iterations: usize,
}

struct Support {
    rows: Vec<usize>,
    cols: Vec<usize>,
    /// Cost restricted to supported rows and columns.
    c: Mat,
    /// ln a over supported rows.
    la: Vec<f64>,
    /// ln b over supported columns.
    lb: Vec<f64>,
}

fn restrict(c: &CostMatrix, a: &[f64], b: &[f64]) -> Support {
    let rows: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..b.len()).filter(|&j| b[j] > 0.0).collect();
    let sub = Mat::from_fn(rows.len(), cols.len(), |i, j| c.mat().get(rows[i], cols[j]));
    let la = rows.iter().map(|&i| a[i].ln()).collect();
    let lb = cols.iter().map(|&j| b[j].ln()).collect();
    Support { rows, cols, c: sub, la, lb }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// One column-then-row update of the dual potentials.
fn update(s: &Support, f: &mut [f64], g: &mut [f64], eps: f64) {
    let (m, n) = (s.rows.len(), s.cols.len());
    for j in 0..n {
        let lse = log_sum_exp((0..m).map(|i| (f[i] - s.c.get(i, j)) / eps));
        g[j] = eps * (s.lb[j] - lse);
    }
    for i in 0..m {
        let lse = log_sum_exp((0..n).map(|j| (g[j] - s.c.get(i, j)) / eps));
        f[i] = eps * (s.la[i] - lse);
    }
}

fn potentials_finite(f: &[f64], g: &[f64]) -> bool {
    f.iter().chain(g).all(|v| v.is_finite())
}

/// The log-domain updates divide costs by eps; once that ratio leaves the
/// float range the exponents are meaningless, so refuse up front.
fn check_scaling(c: &CostMatrix, eps: f64) -> Result<(), OtError> {
    let cmax = c.mat().data().iter().fold(0.0f64, |m, &v| m.max(v));
    if !(cmax / eps).is_finite() {
        return Err(OtError::Overflow { eps });
    }
    Ok(())
}

fn assemble(
    s: &Support,
    f: &[f64],
    g: &[f64],
    eps: f64,
    c: &CostMatrix,
    a: &[f64],
    b: &[f64],
    iterations: usize,
) -> Result<SinkhornSolution, OtError> {
    let mut plan = Mat::zeros(a.len(), b.len());
    for (i, &ri) in s.rows.iter().enumerate() {
        for (j, &cj) in s.cols.iter().enumerate() {
            let v = ((f[i] + g[j] - s.c.get(i, j)) / eps).exp();
            if !v.is_finite() {
                return Err(OtError::Overflow { eps });
            }
            plan.set(ri, cj, v);
        }
    }
    let plan = TransportPlan::new(plan, a.to_vec(), b.to_vec())?;
    let cost = plan.cost(c);
    Ok(SinkhornSolution { plan, cost, iterations })
}

/// Fixed-iteration entropic solve. Exactly `iters` column/row update pairs
/// are applied regardless of how quickly the potentials settle.
pub fn sinkhorn(
    c: &CostMatrix,
    a: &[f64],
    b: &[f64],
    eps: f64,
    iters: usize,
) -> Result<SinkhornSolution, OtError> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(OtError::BadEps(eps));
    }
    if iters == 0 {
        return Err(OtError::ZeroIterations);
    }
    check_marginals(c, a, b)?;
    check_scaling(c, eps)?;
    let s = restrict(c, a, b);
    let mut f = vec![0.0; s.rows.len()];
    let mut g = vec![0.0; s.cols.len()];
    for _ in 0..iters {
        update(&s, &mut f, &mut g, eps);
        if !potentials_finite(&f, &g) {
            return Err(OtError::Overflow { eps });
        }
    }
    assemble(&s, &f, &g, eps, c, a, b, iters)
}

/// Iterate until the column residual of the assembled plan drops to `tol`
/// (l1), or `max_iters` is reached. Returns the solution and whether the
/// tolerance was met. Diagnostic mode; the training path uses the
/// fixed-iteration form above.
pub fn sinkhorn_to_tolerance(
    c: &CostMatrix,
    a: &[f64],
    b: &[f64],
    eps: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(SinkhornSolution, bool), OtError> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(OtError::BadEps(eps));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(OtError::Internal("tolerance must be positive"));
    }
    if max_iters == 0 {
        return Err(OtError::ZeroIterations);
    }
    check_marginals(c, a, b)?;
    check_scaling(c, eps)?;
    let s = restrict(c, a, b);
    let mut f = vec![0.0; s.rows.len()];
    let mut g = vec![0.0; s.cols.len()];
    // Float precision imposes a residual floor that scales with the cost
    // range over eps; once the residual stops setting new lows the iteration
    // has hit that floor and further work is wasted.
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    for it in 1..=max_iters {
        update(&s, &mut f, &mut g, eps);
        if !potentials_finite(&f, &g) {
            return Err(OtError::Overflow { eps });
        }
        let sol = assemble(&s, &f, &g, eps, c, a, b, it)?;
        let residual = sol.plan.col_residual();
        if residual <= tol {
            return Ok((sol, true));
        }
        if residual < best {
            best = residual;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if it == max_iters || since_best >= 1000 {
            return Ok((sol, false));
        }
    }
    unreachable!("loop returns on the final iteration");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::lp_oracle;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    #[test]
    fn zero_cost_gives_zero_cost_product_plan() {
        let c = CostMatrix::new(Mat::zeros(3, 2)).unwrap();
        let a = vec![0.2, 0.3, 0.5];
        let b = vec![0.6, 0.4];
        let sol = sinkhorn(&c, &a, &b, 0.05, 30).unwrap();
        assert_eq!(sol.cost, 0.0);
        for i in 0..3 {
            for j in 0..2 {
                assert!((sol.plan.plan().get(i, j) - a[i] * b[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_cost_concentrates_on_the_diagonal() {
        let c = CostMatrix::new(Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0])).unwrap();
        let sol = sinkhorn(&c, &uniform(2), &uniform(2), 0.05, 30).unwrap();
        assert!(sol.cost <= 0.01, "cost {} too high", sol.cost);
        assert!(sol.plan.plan().get(0, 0) > 0.49);
        assert!(sol.plan.plan().get(1, 1) > 0.49);
        assert!(sol.plan.row_residual() < 1e-12);
    }

    #[test]
    fn rows_match_exactly_after_final_row_update() {
        let c = CostMatrix::new(Mat::from_fn(4, 3, |i, j| {
            (((i * 3 + j) as f64 * 0.9).sin() * 0.5 + 0.5).clamp(0.0, 2.0)
        }))
        .unwrap();
        let a = vec![0.1, 0.2, 0.3, 0.4];
        let b = vec![0.5, 0.25, 0.25];
        let sol = sinkhorn(&c, &a, &b, 0.1, 5).unwrap();
        // Five iterations are nowhere near convergence; the row side must
        // still be clean because its update runs last.
        assert!(sol.plan.row_residual() < 1e-12);
        assert!(sol.plan.col_residual() > 1e-9);
    }

    #[test]
    fn zero_mass_marginals_get_zero_rows() {
        let c = CostMatrix::new(Mat::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 })).unwrap();
        let a = vec![0.5, 0.0, 0.5];
        let b = vec![0.5, 0.5, 0.0];
        let sol = sinkhorn(&c, &a, &b, 0.05, 50).unwrap();
        for j in 0..3 {
            assert_eq!(sol.plan.plan().get(1, j), 0.0);
        }
        for i in 0..3 {
            assert_eq!(sol.plan.plan().get(i, 2), 0.0);
        }
        assert!(sol.plan.row_residual() < 1e-12);
    }

    #[test]
    fn cost_decreases_as_eps_shrinks_on_converged_solves() {
        // Cost range 0.3 keeps range/eps modest at the smallest eps; larger
        // ranges push the attainable residual floor above the tolerance.
        let c = CostMatrix::new(Mat::from_fn(4, 4, |i, j| {
            ((i as f64 - j as f64).abs() / 10.0).clamp(0.0, 2.0)
        }))
        .unwrap();
        let a = vec![0.1, 0.4, 0.3, 0.2];
        let b = vec![0.25, 0.25, 0.25, 0.25];
        let mut prev = f64::INFINITY;
        for eps in [0.5, 0.1, 0.02] {
            let (sol, converged) = sinkhorn_to_tolerance(&c, &a, &b, eps, 1e-11, 200_000).unwrap();
            assert!(converged);
            assert!(sol.cost <= prev + 1e-9, "eps {eps}: {} > {prev}", sol.cost);
            prev = sol.cost;
        }
    }

    #[test]
    fn entropic_cost_dominates_exact_cost() {
        let c = CostMatrix::new(Mat::from_fn(3, 4, |i, j| {
            (((i * 7 + j * 3) % 5) as f64) * 0.4
        }))
        .unwrap();
        let a = vec![0.2, 0.5, 0.3];
        let b = vec![0.1, 0.4, 0.2, 0.3];
        let (sol, converged) = sinkhorn_to_tolerance(&c, &a, &b, 0.02, 1e-11, 200_000).unwrap();
        assert!(converged);
        let (_, exact) = lp_oracle(&c, &a, &b).unwrap();
        assert!(sol.cost >= exact - 1e-9, "entropic {} below exact {exact}", sol.cost);
    }

    #[test]
    fn converged_plan_is_symmetric_for_symmetric_instances() {
        let c = CostMatrix::new(Mat::from_fn(3, 3, |i, j| {
            ((i as f64 - j as f64).abs() * 0.5).clamp(0.0, 2.0)
        }))
        .unwrap();
        let a = vec![0.3, 0.4, 0.3];
        let (sol, converged) = sinkhorn_to_tolerance(&c, &a, &a, 0.05, 1e-12, 100_000).unwrap();
        assert!(converged);
        for i in 0..3 {
            for j in 0..3 {
                let d = (sol.plan.plan().get(i, j) - sol.plan.plan().get(j, i)).abs();
                assert!(d < 1e-9);
            }
        }
    }

    #[test]
    fn subnormal_eps_reports_overflow() {
        let c = CostMatrix::new(Mat::from_vec(2, 2, vec![0.0, 2.0, 2.0, 0.0])).unwrap();
        let err = sinkhorn(&c, &uniform(2), &uniform(2), 1e-320, 5).unwrap_err();
        assert!(matches!(err, OtError::Overflow { .. }), "got {err:?}");
    }

    #[test]
    fn input_validation_is_exhaustive() {
        let c = CostMatrix::new(Mat::zeros(2, 2)).unwrap();
        let u = uniform(2);
        assert!(matches!(sinkhorn(&c, &u, &u, 0.0, 30), Err(OtError::BadEps(_))));
        assert!(matches!(sinkhorn(&c, &u, &u, 0.05, 0), Err(OtError::ZeroIterations)));
        assert!(matches!(
            sinkhorn(&c, &[1.0], &u, 0.05, 30),
            Err(OtError::MarginalLength { side: "row", .. })
        ));
        assert!(matches!(
            sinkhorn(&c, &[0.7, 0.2], &u, 0.05, 30),
            Err(OtError::MarginalSum { side: "row", .. })
        ));
        assert!(matches!(
            sinkhorn(&c, &[1.2, -0.2], &u, 0.05, 30),
            Err(OtError::BadMarginal { side: "row", index: 1, .. })
        ));
        assert!(matches!(
            sinkhorn(&c, &[0.0, 0.0], &u, 0.05, 30),
            Err(OtError::EmptySupport { side: "row" })
        ));
    }

    #[test]
    fn tolerance_mode_stops_early_and_reports_iteration_count() {
        let c = CostMatrix::new(Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0])).unwrap();
        let (sol, converged) = sinkhorn_to_tolerance(&c, &uniform(2), &uniform(2), 0.5, 1e-8, 10_000).unwrap();
        assert!(converged);
        assert!(sol.iterations < 10_000);
        assert!(sol.plan.col_residual() <= 1e-8);
    }
}

//! Exact reference solver for small transport instances.
//!
//! Transportation simplex over arbitrary-precision rationals: float inputs
//! are lifted exactly (every f64 is a dyadic rational), the column marginal
//! is rescaled so both sides balance exactly, and pivoting runs with exact
//! comparisons, so the returned cost is the true optimum of the lifted
//! instance with no rounding during the solve. Intended as a test oracle;
//! instances are capped at 8x8.

use num::{BigRational, Signed, ToPrimitive, Zero};
use std::cmp::min;
use std::collections::VecDeque;

use crate::mat::Mat;

use super::{check_marginals, CostMatrix, OtError, TransportPlan};

pub const LP_DIM_LIMIT: usize = 8;

/// Exact minimum-cost transport. Returns the optimal plan and its cost.
pub fn lp_oracle(c: &CostMatrix, a: &[f64], b: &[f64]) -> Result<(TransportPlan, f64), OtError> {
    if c.rows() > LP_DIM_LIMIT || c.cols() > LP_DIM_LIMIT {
        return Err(OtError::TooLarge { rows: c.rows(), cols: c.cols() });
    }
    check_marginals(c, a, b)?;

    let rows: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..b.len()).filter(|&j| b[j] > 0.0).collect();
    let ra: Vec<BigRational> = rows.iter().map(|&i| lift(a[i])).collect();
    let mut rb: Vec<BigRational> = cols.iter().map(|&j| lift(b[j])).collect();
    let rc: Vec<Vec<BigRational>> = rows
        .iter()
        .map(|&i| cols.iter().map(|&j| lift(c.mat().get(i, j))).collect())
        .collect();

    // Rescale the column side so supply and demand balance exactly; the two
    // float sums each sit within 1e-9 of 1 but rarely of each other.
    let sa: BigRational = ra.iter().fold(BigRational::zero(), |s, v| s + v);
    let sb: BigRational = rb.iter().fold(BigRational::zero(), |s, v| s + v);
    let scale = &sa / &sb;
    for v in &mut rb {
        *v = &*v * &scale;
    }

    let solved = solve_balanced(&rc, &ra, &rb)?;

    let mut plan = Mat::zeros(a.len(), b.len());
    for (si, &gi) in rows.iter().enumerate() {
        for (sj, &gj) in cols.iter().enumerate() {
            plan.set(gi, gj, ratio_to_f64(&solved.x[si][sj]));
        }
    }
    let plan = TransportPlan::new(plan, a.to_vec(), b.to_vec())?;
    Ok((plan, ratio_to_f64(&solved.cost)))
}

fn lift(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite input was validated")
}

/// Round-to-nearest conversion that stays accurate for the huge numerators
/// and denominators exact pivoting produces (plain numer/denom division
/// overflows to inf/inf for those).
fn ratio_to_f64(r: &BigRational) -> f64 {
    if r.is_zero() {
        return 0.0;
    }
    let neg = r.is_negative();
    let n = r.numer().magnitude();
    let d = r.denom().magnitude();
    let shift = 64usize.saturating_add(d.bits().saturating_sub(n.bits()) as usize);
    let q = (n << shift) / d;
    let mut v = q.to_f64().expect("quotient is a modest integer");
    // Unscale in chunks; a single 2^-shift factor can underflow to zero even
    // when the final value is representable.
    let mut rem = shift as i32;
    while rem > 0 {
        let step = rem.min(900);
        v *= 2f64.powi(-step);
        rem -= step;
    }
    if neg {
        -v
    } else {
        v
    }
}

struct Solved {
    x: Vec<Vec<BigRational>>,
    // The duals are the optimality certificate; only tests consume them.
    #[cfg_attr(not(test), allow(dead_code))]
    u: Vec<BigRational>,
    #[cfg_attr(not(test), allow(dead_code))]
    v: Vec<BigRational>,
    cost: BigRational,
}

/// Simplex on a balanced instance (sum of `ra` equals sum of `rb` exactly,
/// all entries strictly positive). Entering cell: first negative reduced
/// cost in row-major order. Leaving cell: lexicographically smallest among
/// the minimizers. Both rules together are Bland's rule for this tableau
/// ordering, so the walk cannot cycle.
fn solve_balanced(
    rc: &[Vec<BigRational>],
    ra: &[BigRational],
    rb: &[BigRational],
) -> Result<Solved, OtError> {
    let m = ra.len();
    let n = rb.len();
    let zero = BigRational::zero();

    // Northwest-corner start: a staircase walk that always yields a spanning
    // tree of m + n - 1 basic cells, degenerate zeros included.
    let mut x = vec![vec![BigRational::zero(); n]; m];
    let mut basic = vec![vec![false; n]; m];
    let mut supply = ra.to_vec();
    let mut demand = rb.to_vec();
    let (mut i, mut j) = (0usize, 0usize);
    loop {
        basic[i][j] = true;
        let t = min(supply[i].clone(), demand[j].clone());
        supply[i] = &supply[i] - &t;
        demand[j] = &demand[j] - &t;
        x[i][j] = t;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if supply[i].is_zero() && i < m - 1 {
            i += 1;
        } else {
            j += 1;
        }
    }

    for _pivot in 0..50_000 {
        let (u, v) = duals(rc, &basic)?;

        let mut entering = None;
        'scan: for i in 0..m {
            for j in 0..n {
                if !basic[i][j] && &rc[i][j] - &u[i] - &v[j] < zero {
                    entering = Some((i, j));
                    break 'scan;
                }
            }
        }
        let Some((ie, je)) = entering else {
            let mut cost = BigRational::zero();
            for i in 0..m {
                for j in 0..n {
                    if !x[i][j].is_zero() {
                        cost = cost + &x[i][j] * &rc[i][j];
                    }
                }
            }
            return Ok(Solved { x, u, v, cost });
        };

        let path = cycle_path(&basic, ie, je)?;
        // Walking the cycle from the entering cell, signs alternate; the
        // even-indexed path cells shrink.
        let mut theta: Option<(BigRational, (usize, usize))> = None;
        for (k, &(pi, pj)) in path.iter().enumerate() {
            if k % 2 == 0 {
                let candidate = (x[pi][pj].clone(), (pi, pj));
                theta = Some(match theta {
                    None => candidate,
                    Some(best) => {
                        if candidate.0 < best.0 || (candidate.0 == best.0 && candidate.1 < best.1) {
                            candidate
                        } else {
                            best
                        }
                    }
                });
            }
        }
        let (theta, leaving) = theta.ok_or(OtError::Internal("cycle without shrinking cells"))?;

        x[ie][je] = &x[ie][je] + &theta;
        basic[ie][je] = true;
        for (k, &(pi, pj)) in path.iter().enumerate() {
            if k % 2 == 0 {
                x[pi][pj] = &x[pi][pj] - &theta;
            } else {
                x[pi][pj] = &x[pi][pj] + &theta;
            }
        }
        basic[leaving.0][leaving.1] = false;
        debug_assert!(x[leaving.0][leaving.1].is_zero());
        debug_assert_eq!(
            basic.iter().flatten().filter(|&&b| b).count(),
            m + n - 1,
            "pivot broke the spanning tree"
        );
    }
    Err(OtError::Internal("pivot limit exceeded"))
}

/// Dual potentials from the basis tree, anchored at u[0] = 0.
fn duals(
    rc: &[Vec<BigRational>],
    basic: &[Vec<bool>],
) -> Result<(Vec<BigRational>, Vec<BigRational>), OtError> {
    let m = basic.len();
    let n = basic[0].len();
    let mut u: Vec<Option<BigRational>> = vec![None; m];
    let mut v: Vec<Option<BigRational>> = vec![None; n];
    u[0] = Some(BigRational::zero());
    loop {
        let mut progress = false;
        for i in 0..m {
            for j in 0..n {
                if !basic[i][j] {
                    continue;
                }
                match (&u[i], &v[j]) {
                    (Some(ui), None) => {
                        v[j] = Some(&rc[i][j] - ui);
                        progress = true;
                    }
                    (None, Some(vj)) => {
                        u[i] = Some(&rc[i][j] - vj);
                        progress = true;
                    }
                    _ => {}
                }
            }
        }
        if u.iter().all(Option::is_some) && v.iter().all(Option::is_some) {
            let u = u.into_iter().map(Option::unwrap).collect();
            let v = v.into_iter().map(Option::unwrap).collect();
            return Ok((u, v));
        }
        if !progress {
            return Err(OtError::Internal("basis tree is disconnected"));
        }
    }
}

/// Cells of the unique basic path from row `ie` to column `je`; prepending
/// the entering cell (ie, je) closes the cycle. Returned in walk order
/// starting from the cell that shares column `je` with the entering cell.
fn cycle_path(
    basic: &[Vec<bool>],
    ie: usize,
    je: usize,
) -> Result<Vec<(usize, usize)>, OtError> {
    let m = basic.len();
    let n = basic[0].len();
    let mut via_row: Vec<Option<(usize, usize)>> = vec![None; m];
    let mut via_col: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut seen_row = vec![false; m];
    let mut seen_col = vec![false; n];

    #[derive(Clone, Copy)]
    enum Node {
        Row(usize),
        Col(usize),
    }

    let mut queue = VecDeque::new();
    seen_row[ie] = true;
    queue.push_back(Node::Row(ie));
    while let Some(node) = queue.pop_front() {
        match node {
            Node::Row(i) => {
                for j in 0..n {
                    if basic[i][j] && !seen_col[j] {
                        seen_col[j] = true;
                        via_col[j] = Some((i, j));
                        queue.push_back(Node::Col(j));
                    }
                }
            }
            Node::Col(j) => {
                for i in 0..m {
                    if basic[i][j] && !seen_row[i] {
                        seen_row[i] = true;
                        via_row[i] = Some((i, j));
                        queue.push_back(Node::Row(i));
                    }
                }
            }
        }
    }

    let mut path = Vec::new();
    let mut cur = Node::Col(je);
    loop {
        match cur {
            Node::Col(j) => {
                let (ci, cj) = via_col[j].ok_or(OtError::Internal("entering column unreachable"))?;
                path.push((ci, cj));
                cur = Node::Row(ci);
            }
            Node::Row(i) if i == ie => return Ok(path),
            Node::Row(i) => {
                let (ci, cj) = via_row[i].ok_or(OtError::Internal("entering row unreachable"))?;
                path.push((ci, cj));
                cur = Node::Col(cj);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lifted_instance(
        c: &CostMatrix,
        a: &[f64],
        b: &[f64],
    ) -> (Vec<Vec<BigRational>>, Vec<BigRational>, Vec<BigRational>) {
        let rc = (0..c.rows())
            .map(|i| (0..c.cols()).map(|j| lift(c.mat().get(i, j))).collect())
            .collect();
        let ra: Vec<BigRational> = a.iter().map(|&v| lift(v)).collect();
        let mut rb: Vec<BigRational> = b.iter().map(|&v| lift(v)).collect();
        let sa = ra.iter().fold(BigRational::zero(), |s, v| s + v);
        let sb = rb.iter().fold(BigRational::zero(), |s, v| s + v);
        let scale = &sa / &sb;
        for v in &mut rb {
            *v = &*v * &scale;
        }
        (rc, ra, rb)
    }

    fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }

    fn random_cost(rng: &mut ChaCha8Rng, m: usize, n: usize) -> CostMatrix {
        CostMatrix::new(Mat::from_fn(m, n, |_, _| rng.random::<f64>() * 2.0)).unwrap()
    }

    #[test]
    fn zero_diagonal_identity_plan() {
        let c = CostMatrix::new(Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0])).unwrap();
        let (plan, cost) = lp_oracle(&c, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(cost, 0.0);
        assert_eq!(plan.plan().get(0, 0), 0.5);
        assert_eq!(plan.plan().get(1, 1), 0.5);
    }

    #[test]
    fn single_row_ships_the_column_marginal() {
        let c = CostMatrix::new(Mat::from_vec(1, 3, vec![0.3, 1.1, 0.2])).unwrap();
        let b = [0.2, 0.5, 0.3];
        let (plan, cost) = lp_oracle(&c, &[1.0], &b).unwrap();
        for j in 0..3 {
            assert!((plan.plan().get(0, j) - b[j]).abs() < 1e-15);
        }
        let expect = 0.2 * 0.3 + 0.5 * 1.1 + 0.3 * 0.2;
        assert!((cost - expect).abs() < 1e-12);
    }

    #[test]
    fn matches_two_by_two_closed_form() {
        // One free variable t = x00 in [max(0, a0 - b1), min(a0, b0)]; the
        // cost is affine in t, so the optimum sits at an endpoint.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let a = random_simplex(&mut rng, 2);
            let b = random_simplex(&mut rng, 2);
            let c = random_cost(&mut rng, 2, 2);
            let (plan, cost) = lp_oracle(&c, &a, &b).unwrap();

            let g = c.mat();
            let at = |t: f64| {
                g.get(0, 0) * t
                    + g.get(0, 1) * (a[0] - t)
                    + g.get(1, 0) * (b[0] - t)
                    + g.get(1, 1) * (a[1] - b[0] + t)
            };
            let lo = (a[0] - b[1]).max(0.0);
            let hi = a[0].min(b[0]);
            let expect = at(lo).min(at(hi));
            assert!((cost - expect).abs() < 1e-9, "cost {cost} vs closed form {expect}");
            assert!(plan.row_residual() < 1e-9);
            assert!(plan.col_residual() < 1e-9);
        }
    }

    #[test]
    fn never_beats_nor_loses_to_the_product_coupling_wrongly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (m, n) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let a = random_simplex(&mut rng, m);
            let b = random_simplex(&mut rng, n);
            let c = random_cost(&mut rng, m, n);
            let (_, cost) = lp_oracle(&c, &a, &b).unwrap();
            let mut product = 0.0;
            for i in 0..m {
                for j in 0..n {
                    product += a[i] * b[j] * c.mat().get(i, j);
                }
            }
            assert!(cost <= product + 1e-9);
            assert!(cost >= 0.0);
        }
    }

    #[test]
    fn duals_certify_optimality_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..25 {
            let (m, n) = (rng.random_range(2..=5), rng.random_range(2..=5));
            let a = random_simplex(&mut rng, m);
            let b = random_simplex(&mut rng, n);
            let c = random_cost(&mut rng, m, n);
            let (rc, ra, rb) = lifted_instance(&c, &a, &b);
            let sol = solve_balanced(&rc, &ra, &rb).unwrap();

            let zero = BigRational::zero();
            for i in 0..m {
                for j in 0..n {
                    let red = &rc[i][j] - &sol.u[i] - &sol.v[j];
                    assert!(red >= zero, "negative reduced cost at optimum");
                    if !sol.x[i][j].is_zero() {
                        assert!(red.is_zero(), "support cell with slack");
                    }
                }
            }
            // Strong duality holds exactly in rational arithmetic.
            let mut dual = BigRational::zero();
            for i in 0..m {
                dual = dual + &sol.u[i] * &ra[i];
            }
            for j in 0..n {
                dual = dual + &sol.v[j] * &rb[j];
            }
            assert_eq!(dual, sol.cost);
        }
    }

    #[test]
    fn transposed_instance_has_identical_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..25 {
            let (m, n) = (rng.random_range(1..=5), rng.random_range(1..=5));
            let a = random_simplex(&mut rng, m);
            let b = random_simplex(&mut rng, n);
            let c = random_cost(&mut rng, m, n);
            let (rc, ra, rb) = lifted_instance(&c, &a, &b);
            let fwd = solve_balanced(&rc, &ra, &rb).unwrap();

            let ct = c.transposed();
            let (rct, rbt, rat) = lifted_instance(&ct, &b, &a);
            let bwd = solve_balanced(&rct, &rbt, &rat).unwrap();
            // The rescale runs the other way round, so compare after undoing
            // it: forward solved (a, scale * b), backward (b, scale' * a).
            let sa = ra.iter().fold(BigRational::zero(), |s, v| s + v);
            let sb = rat.iter().fold(BigRational::zero(), |s, v| s + v);
            assert_eq!(&fwd.cost * &sb, &bwd.cost * &sa);
        }
    }

    #[test]
    fn degenerate_start_still_reaches_the_optimum() {
        // The northwest corner exhausts row 0 and column 0 simultaneously,
        // planting a zero-valued basic cell the pivot must handle.
        let c = CostMatrix::new(Mat::from_vec(2, 2, vec![0.0, 1.0, 0.0, 2.0])).unwrap();
        let (plan, cost) = lp_oracle(&c, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((cost - 0.5).abs() < 1e-15);
        assert!((plan.plan().get(0, 1) - 0.5).abs() < 1e-15);
        assert!((plan.plan().get(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_mass_rows_and_columns_are_preserved_as_zeros() {
        let c = CostMatrix::new(Mat::from_fn(3, 3, |i, j| {
            ((i as f64 - j as f64).abs() * 0.7).clamp(0.0, 2.0)
        }))
        .unwrap();
        let (plan, _) = lp_oracle(&c, &[0.5, 0.0, 0.5], &[0.4, 0.6, 0.0]).unwrap();
        for j in 0..3 {
            assert_eq!(plan.plan().get(1, j), 0.0);
        }
        for i in 0..3 {
            assert_eq!(plan.plan().get(i, 2), 0.0);
        }
        assert!(plan.row_residual() < 1e-9);
    }

    #[test]
    fn oversized_instances_are_refused() {
        let c = CostMatrix::new(Mat::zeros(9, 2)).unwrap();
        let a = vec![1.0 / 9.0; 9];
        let err = lp_oracle(&c, &a, &[0.5, 0.5]).unwrap_err();
        assert!(matches!(err, OtError::TooLarge { rows: 9, cols: 2 }));
    }

    #[test]
    fn float_lift_and_back_is_exact_for_representables() {
        assert_eq!(ratio_to_f64(&lift(0.5)), 0.5);
        assert_eq!(ratio_to_f64(&lift(0.1)), 0.1);
        assert_eq!(ratio_to_f64(&lift(1.75e-300)), 1.75e-300);
        assert_eq!(ratio_to_f64(&BigRational::zero()), 0.0);
        let third = lift(1.0) / lift(3.0);
        assert!((ratio_to_f64(&third) - 1.0 / 3.0).abs() < 1e-16);
        assert_eq!(ratio_to_f64(&-third.clone()), -ratio_to_f64(&third));
    }
}

//! Cosine transport costs, entropic transport via log-domain alternating
//! scaling, and an exact small-instance reference solver.

mod lp;
mod sinkhorn;

pub use lp::{lp_oracle, LP_DIM_LIMIT};
pub use sinkhorn::{sinkhorn, sinkhorn_to_tolerance, SinkhornSolution};

use thiserror::Error;

use crate::attnpool::{top_mass_indices, PatchTokens, PatchWeights};
use crate::losses::NORM_FLOOR;
use crate::mat::Mat;

#[derive(Debug, Error, PartialEq)]
pub enum OtError {
    #[error("cost entry at ({row}, {col}) is {value}, outside [0, 2]")]
    CostOutOfRange { row: usize, col: usize, value: f64 },
    #[error("non-finite cost entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("{side} marginal length {actual} does not match cost dimension {expected}")]
    MarginalLength { side: &'static str, expected: usize, actual: usize },
    #[error("{side} marginal entry {index} is {value}; entries must be finite and nonnegative")]
    BadMarginal { side: &'static str, index: usize, value: f64 },
    #[error("{side} marginal sums to {sum}, expected 1 within 1e-9")]
    MarginalSum { side: &'static str, sum: f64 },
    #[error("{side} marginal has empty support")]
    EmptySupport { side: &'static str },
    #[error("plan entry at ({row}, {col}) is negative")]
    NegativePlanEntry { row: usize, col: usize },
    #[error("plan mass is {mass}, expected 1 within 1e-9")]
    BadPlanMass { mass: f64 },
    #[error("eps must be positive and finite, got {0}")]
    BadEps(f64),
    #[error("iteration count must be at least 1")]
    ZeroIterations,
    #[error("scaled kernel overflows float64 at eps = {eps}; increase eps")]
    Overflow { eps: f64 },
    #[error("rho must lie in (0, 1], got {0}")]
    BadRho(f64),
    #[error("zero-norm row {row} on the {side} side")]
    ZeroNormRow { side: &'static str, row: usize },
    #[error("instance is {rows}x{cols}; the exact solver is limited to {LP_DIM_LIMIT}x{LP_DIM_LIMIT}")]
    TooLarge { rows: usize, cols: usize },
    #[error("internal: {0}")]
    Internal(&'static str),
}

/// Pairwise cost 1 - cos between patch rows; entries live in [0, 2].
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Mat);

impl CostMatrix {
    pub fn new(m: Mat) -> Result<Self, OtError> {
        for i in 0..m.rows() {
            for (j, &v) in m.row(i).iter().enumerate() {
                if !v.is_finite() {
                    return Err(OtError::NonFiniteCost { row: i, col: j });
                }
                if !(0.0..=2.0).contains(&v) {
                    return Err(OtError::CostOutOfRange { row: i, col: j, value: v });
                }
            }
        }
        Ok(CostMatrix(m))
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn mat(&self) -> &Mat {
        &self.0
    }

    pub fn transposed(&self) -> CostMatrix {
        CostMatrix(self.0.transpose())
    }
}

/// C[s][t] = 1 - cos(e_s, e_syn_t).
pub fn cosine_cost(e: &PatchTokens, e_syn: &PatchTokens) -> Result<CostMatrix, OtError> {
    let mut norms_a = Vec::with_capacity(e.patches());
    for s in 0..e.patches() {
        let n = e.row(s).iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < NORM_FLOOR {
            return Err(OtError::ZeroNormRow { side: "left", row: s });
        }
        norms_a.push(n);
    }
    let mut norms_b = Vec::with_capacity(e_syn.patches());
    for t in 0..e_syn.patches() {
        let n = e_syn.row(t).iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < NORM_FLOOR {
            return Err(OtError::ZeroNormRow { side: "right", row: t });
        }
        norms_b.push(n);
    }
    let mut c = Mat::zeros(e.patches(), e_syn.patches());
    for s in 0..e.patches() {
        for t in 0..e_syn.patches() {
            let dot: f64 = e.row(s).iter().zip(e_syn.row(t)).map(|(x, y)| x * y).sum();
            let cos = (dot / (norms_a[s] * norms_b[t])).clamp(-1.0, 1.0);
            c.set(s, t, 1.0 - cos);
        }
    }
    CostMatrix::new(c)
}

/// Top-mass truncation of patch weights followed by renormalization; the
/// truncation rule matches the one inside topk_softmax.
pub fn ot_marginals(w: &PatchWeights, rho: f64) -> Result<Vec<f64>, OtError> {
    if !(rho.is_finite() && rho > 0.0 && rho <= 1.0) {
        return Err(OtError::BadRho(rho));
    }
    let kept = top_mass_indices(w.as_slice(), rho);
    let kept_sum: f64 = kept.iter().map(|&i| w.as_slice()[i]).sum();
    if kept_sum <= 0.0 {
        return Err(OtError::EmptySupport { side: "weights" });
    }
    let mut out = vec![0.0; w.len()];
    for &i in &kept {
        out[i] = w.as_slice()[i] / kept_sum;
    }
    Ok(out)
}

/// Nonnegative plan with its prescribed marginals. Total mass is enforced;
/// per-row and per-column deviations are reported, not enforced, because a
/// fixed-iteration solve leaves a deliberate residual on one side.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    plan: Mat,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl TransportPlan {
    pub fn new(plan: Mat, a: Vec<f64>, b: Vec<f64>) -> Result<Self, OtError> {
        if a.len() != plan.rows() {
            return Err(OtError::MarginalLength { side: "row", expected: plan.rows(), actual: a.len() });
        }
        if b.len() != plan.cols() {
            return Err(OtError::MarginalLength { side: "column", expected: plan.cols(), actual: b.len() });
        }
        let mut mass = 0.0;
        for i in 0..plan.rows() {
            for (j, &v) in plan.row(i).iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(OtError::NegativePlanEntry { row: i, col: j });
                }
                mass += v;
            }
        }
        if (mass - 1.0).abs() > 1e-9 {
            return Err(OtError::BadPlanMass { mass });
        }
        Ok(TransportPlan { plan, a, b })
    }

    pub fn plan(&self) -> &Mat {
        &self.plan
    }

    pub fn row_marginal(&self) -> &[f64] {
        &self.a
    }

    pub fn col_marginal(&self) -> &[f64] {
        &self.b
    }

    pub fn realized_row_sums(&self) -> Vec<f64> {
        (0..self.plan.rows()).map(|i| self.plan.row(i).iter().sum()).collect()
    }

    pub fn realized_col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.plan.cols()];
        for i in 0..self.plan.rows() {
            for (j, &v) in self.plan.row(i).iter().enumerate() {
                sums[j] += v;
            }
        }
        sums
    }

    /// l1 distance between realized row sums and the prescribed row marginal.
    pub fn row_residual(&self) -> f64 {
        self.realized_row_sums().iter().zip(&self.a).map(|(s, m)| (s - m).abs()).sum()
    }

    pub fn col_residual(&self) -> f64 {
        self.realized_col_sums().iter().zip(&self.b).map(|(s, m)| (s - m).abs()).sum()
    }

    pub fn cost(&self, c: &CostMatrix) -> f64 {
        assert_eq!(
            (self.plan.rows(), self.plan.cols()),
            (c.rows(), c.cols()),
            "plan and cost dimensions differ"
        );
        let mut total = 0.0;
        for i in 0..self.plan.rows() {
            for (p, q) in self.plan.row(i).iter().zip(c.mat().row(i)) {
                total += p * q;
            }
        }
        total
    }
}

pub(crate) fn check_marginals(c: &CostMatrix, a: &[f64], b: &[f64]) -> Result<(), OtError> {
    if a.len() != c.rows() {
        return Err(OtError::MarginalLength { side: "row", expected: c.rows(), actual: a.len() });
    }
    if b.len() != c.cols() {
        return Err(OtError::MarginalLength { side: "column", expected: c.cols(), actual: b.len() });
    }
    for (side, m) in [("row", a), ("column", b)] {
        let mut sum = 0.0;
        let mut support = 0usize;
        for (i, &v) in m.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(OtError::BadMarginal { side, index: i, value: v });
            }
            if v > 0.0 {
                support += 1;
            }
            sum += v;
        }
        if support == 0 {
            return Err(OtError::EmptySupport { side });
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(OtError::MarginalSum { side, sum });
        }
    }
    Ok(())
}

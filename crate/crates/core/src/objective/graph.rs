//! Differentiable composites of the four loss terms.
//!
//! Each builder validates its data-dependent hazards against the eager tape
//! values before appending graph nodes, so backward never meets a NaN the
//! caller could have been told about. Retention sets are chosen eagerly and
//! frozen into constant masks: gradients flow through the surviving weights
//! and the renormalization, never through set membership.

use crate::attnpool::top_mass_indices;
use crate::autodiff::{NodeId, Tape};
use crate::losses::NORM_FLOOR;
use crate::mat::Mat;
use crate::ot::{self, CostMatrix};

use super::ObjectiveError;

/// Finite additive stand-in for minus infinity: exp(-1e9 / temperature)
/// underflows to exactly zero, which is the masking we want, without the
/// NaNs that a true -inf would spread through backward.
pub(crate) const MASK_NEG: f64 = -1e9;

/// Mean of log-likelihoods at the target entries of the kept rows, negated.
pub fn ce_node(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[usize],
    keep: &[bool],
) -> Result<NodeId, ObjectiveError> {
    let value = tape.value(logits);
    let (rows, vocab) = value.shape();
    if targets.len() != rows || keep.len() != rows {
        return Err(ObjectiveError::LogitsShape {
            rows,
            targets: targets.len(),
            keep: keep.len(),
        });
    }
    let mut entries = Vec::new();
    for r in 0..rows {
        if !keep[r] {
            continue;
        }
        if targets[r] >= vocab {
            return Err(ObjectiveError::TargetOutOfRange { row: r, target: targets[r], vocab });
        }
        if value.row(r).iter().any(|v| !v.is_finite()) {
            return Err(ObjectiveError::NonFiniteLogits { row: r });
        }
        entries.push((r, targets[r]));
    }
    if entries.is_empty() {
        return Err(ObjectiveError::NoUnmaskedPositions);
    }
    let lsm = tape.log_softmax_rows(logits);
    let picked = tape.gather_entries(lsm, entries);
    let mean = tape.mean_all(picked);
    Ok(tape.mul_const(mean, -1.0))
}

#[derive(Debug)]
pub struct PoolNodes {
    /// 1 x S truncated, renormalized attention weights.
    pub weights: NodeId,
    /// 1 x C pooled patch descriptor.
    pub pooled: NodeId,
    /// Indices whose weights survived truncation, ascending.
    pub kept: Vec<usize>,
}

/// Temperature softmax over saliency, top-mass truncation (the set frozen
/// from the eager value), renormalization, and weighted pooling of `feats`.
pub fn topk_pool_node(
    tape: &mut Tape,
    saliency: NodeId,
    feats: NodeId,
    tau: f64,
    rho: f64,
) -> Result<PoolNodes, ObjectiveError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(ObjectiveError::BadTemperature(tau));
    }
    if !(rho.is_finite() && rho > 0.0 && rho <= 1.0) {
        return Err(ObjectiveError::BadRho(rho));
    }
    let s_val = tape.value(saliency);
    if s_val.rows() != 1 {
        let (rows, cols) = s_val.shape();
        return Err(ObjectiveError::SaliencyNotRow { rows, cols });
    }
    if let Some(i) = s_val.row(0).iter().position(|v| !v.is_finite()) {
        return Err(ObjectiveError::NonFiniteSaliency { index: i });
    }
    let patches = s_val.cols();
    let f_val = tape.value(feats);
    if f_val.rows() != patches {
        return Err(ObjectiveError::PatchCountMismatch { saliency: patches, feats: f_val.rows() });
    }

    let scaled = tape.mul_const(saliency, 1.0 / tau);
    let raw = tape.softmax_rows(scaled);
    let kept = top_mass_indices(tape.value(raw).row(0), rho);
    for &i in &kept {
        if tape.value(raw).get(0, i) <= 0.0 {
            return Err(ObjectiveError::DegenerateWeights { index: i });
        }
    }
    let mut mask = Mat::zeros(1, patches);
    for &i in &kept {
        mask.set(0, i, 1.0);
    }
    let mask = tape.constant(mask);
    let masked = tape.mul(raw, mask);
    let weights = tape.simplex_norm(masked);
    let pooled = tape.matmul(weights, feats);
    Ok(PoolNodes { weights, pooled, kept })
}

/// 1 - cosine between two pooled descriptors.
pub fn pal_cos_node(
    tape: &mut Tape,
    pooled_real: NodeId,
    pooled_syn: NodeId,
) -> Result<NodeId, ObjectiveError> {
    for (branch, node) in [("real", pooled_real), ("synthetic", pooled_syn)] {
        let v = tape.value(node);
        if v.rows() != 1 {
            let (rows, cols) = v.shape();
            return Err(ObjectiveError::SaliencyNotRow { rows, cols });
        }
        let n = v.row(0).iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < NORM_FLOOR {
            return Err(ObjectiveError::ZeroNormPooled { branch });
        }
    }
    let (a, b) = (tape.value(pooled_real).shape(), tape.value(pooled_syn).shape());
    if a != b {
        return Err(ObjectiveError::DimMismatch { left: a, right: b });
    }
    let na = tape.l2_normalize_rows(pooled_real);
    let nb = tape.l2_normalize_rows(pooled_syn);
    let prod = tape.mul(na, nb);
    Ok(tape.sum_all(prod))
}

/// Symmetric contrastive loss over pooled descriptors: each of the 2B rows
/// anchors once, its counterpart in the other branch is the positive, and
/// every other row is a negative. A single pair has no negatives and scores
/// zero by definition.
pub fn infonce_node(
    tape: &mut Tape,
    pooled_real: &[NodeId],
    pooled_syn: &[NodeId],
    temp: f64,
) -> Result<NodeId, ObjectiveError> {
    if !(temp.is_finite() && temp > 0.0) {
        return Err(ObjectiveError::BadTemperature(temp));
    }
    if pooled_real.len() != pooled_syn.len() || pooled_real.is_empty() {
        return Err(ObjectiveError::BatchSizeMismatch {
            real: pooled_real.len(),
            synthetic: pooled_syn.len(),
        });
    }
    let b = pooled_real.len();
    let dim = tape.value(pooled_real[0]).cols();
    for &node in pooled_real.iter().chain(pooled_syn) {
        let v = tape.value(node);
        if v.rows() != 1 || v.cols() != dim {
            return Err(ObjectiveError::DimMismatch { left: (1, dim), right: v.shape() });
        }
        let n = v.row(0).iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < NORM_FLOOR {
            return Err(ObjectiveError::ZeroNormPooled { branch: "pooled" });
        }
    }
    if b == 1 {
        return Ok(tape.constant(Mat::scalar(0.0)));
    }

    let mut z = pooled_real[0];
    for &node in pooled_real[1..].iter().chain(pooled_syn) {
        z = tape.concat_rows(z, node);
    }
    let zn = tape.l2_normalize_rows(z);
    let sim = tape.matmul_nt(zn, zn);
    let scaled = tape.mul_const(sim, 1.0 / temp);
    let diag = Mat::from_fn(2 * b, 2 * b, |i, j| if i == j { MASK_NEG } else { 0.0 });
    let diag = tape.constant(diag);
    let masked = tape.add(scaled, diag);
    let lse = tape.logsumexp_rows(masked);
    let pairs: Vec<(usize, usize)> = (0..2 * b).map(|i| (i, (i + b) % (2 * b))).collect();
    let pos = tape.gather_entries(masked, pairs);
    let lse_row = tape.transpose(lse);
    let neg_pos = tape.mul_const(pos, -1.0);
    let diff = tape.add(lse_row, neg_pos);
    Ok(tape.mean_all(diff))
}

#[derive(Debug)]
pub struct TransportNodes {
    /// Scalar transport cost <P, C>.
    pub loss: NodeId,
    /// k x k' plan over the kept patches.
    pub plan: NodeId,
    /// Cost of the identical instance solved eagerly; the tape value of
    /// `loss` must agree with this to rounding.
    pub eager_cost: f64,
}

/// Fixed-iteration entropic transport between the kept patches of the two
/// branches, unrolled onto the tape. Marginals are the truncated attention
/// weights of each branch; the cost is pairwise 1 - cosine of the kept
/// patch features. The update schedule (columns, then rows) matches the
/// eager solver exactly.
#[allow(clippy::too_many_arguments)]
pub fn transport_loss_node(
    tape: &mut Tape,
    feats_real: NodeId,
    kept_real: &[usize],
    w_real: NodeId,
    feats_syn: NodeId,
    kept_syn: &[usize],
    w_syn: NodeId,
    eps: f64,
    iters: usize,
) -> Result<TransportNodes, ObjectiveError> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(ObjectiveError::BadEps(eps));
    }
    if iters == 0 {
        return Err(ObjectiveError::ZeroIterations);
    }
    for (branch, feats, kept, w) in [
        ("real", feats_real, kept_real, w_real),
        ("synthetic", feats_syn, kept_syn, w_syn),
    ] {
        if kept.is_empty() {
            return Err(ObjectiveError::EmptyRetention { branch });
        }
        let fv = tape.value(feats);
        let wv = tape.value(w);
        for &i in kept {
            if i >= fv.rows() || i >= wv.cols() {
                return Err(ObjectiveError::PatchCountMismatch {
                    saliency: wv.cols(),
                    feats: fv.rows(),
                });
            }
            if wv.get(0, i) <= 0.0 {
                return Err(ObjectiveError::DegenerateWeights { index: i });
            }
            let n = fv.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < NORM_FLOOR {
                return Err(ObjectiveError::ZeroNormPatchRow { branch, row: i });
            }
        }
    }

    let a_entries: Vec<(usize, usize)> = kept_real.iter().map(|&i| (0, i)).collect();
    let b_entries: Vec<(usize, usize)> = kept_syn.iter().map(|&i| (0, i)).collect();
    let a = tape.gather_entries(w_real, a_entries);
    let b = tape.gather_entries(w_syn, b_entries);

    let er = tape.gather_rows(feats_real, kept_real.to_vec());
    let es = tape.gather_rows(feats_syn, kept_syn.to_vec());
    let ern = tape.l2_normalize_rows(er);
    let esn = tape.l2_normalize_rows(es);
    let cosim = tape.matmul_nt(ern, esn);
    let neg_cos = tape.mul_const(cosim, -1.0);
    let cost = tape.add_const(neg_cos, 1.0);

    // Solve the same instance eagerly first: it validates the scaling and
    // anchors the unrolled value in tests.
    let eager_cost = {
        let c = tape.value(cost).map(|v| v.clamp(0.0, 2.0));
        let av = tape.value(a).row(0).to_vec();
        let bv = tape.value(b).row(0).to_vec();
        let asum: f64 = av.iter().sum();
        let bsum: f64 = bv.iter().sum();
        let an: Vec<f64> = av.iter().map(|v| v / asum).collect();
        let bn: Vec<f64> = bv.iter().map(|v| v / bsum).collect();
        let cm = CostMatrix::new(c).map_err(ObjectiveError::Transport)?;
        ot::sinkhorn(&cm, &an, &bn, eps, iters).map_err(ObjectiveError::Transport)?.cost
    };

    let a = tape.simplex_norm(a);
    let b = tape.simplex_norm(b);
    let la = tape.ln(a);
    let lb = tape.ln(b);
    let la_col = tape.transpose(la);
    let lb_col = tape.transpose(lb);

    let k = kept_real.len();
    let neg_cost = tape.mul_const(cost, -1.0);
    let mut f_col = tape.constant(Mat::zeros(k, 1));
    let mut g_row = None;
    for _ in 0..iters {
        let shifted = tape.add_colvec(neg_cost, f_col);
        let scaled = tape.mul_const(shifted, 1.0 / eps);
        let scaled_t = tape.transpose(scaled);
        let lse_cols = tape.logsumexp_rows(scaled_t);
        let neg_lse = tape.mul_const(lse_cols, -1.0);
        let g_gap = tape.add(lb_col, neg_lse);
        let g_col = tape.mul_const(g_gap, eps);
        let g = tape.transpose(g_col);

        let shifted = tape.add_rowvec(neg_cost, g);
        let scaled = tape.mul_const(shifted, 1.0 / eps);
        let lse_rows = tape.logsumexp_rows(scaled);
        let neg_lse = tape.mul_const(lse_rows, -1.0);
        let f_gap = tape.add(la_col, neg_lse);
        f_col = tape.mul_const(f_gap, eps);
        g_row = Some(g);
    }
    let g_row = g_row.expect("at least one iteration");

    let with_g = tape.add_rowvec(neg_cost, g_row);
    let with_f = tape.add_colvec(with_g, f_col);
    let log_plan = tape.mul_const(with_f, 1.0 / eps);
    let plan = tape.exp(log_plan);
    let weighted = tape.mul(plan, cost);
    let loss = tape.sum_all(weighted);
    Ok(TransportNodes { loss, plan, eager_cost })
}

//! Turn decoder cross-attention into text-conditioned patch weights and
//! pooled descriptors.
//!
//! The pipeline is: average attention rows over the last K layers, all heads
//! and valid token steps; sharpen with a temperature softmax; keep the
//! smallest descending-weight prefix holding at least `rho` cumulative mass;
//! renormalize; pool patch tokens under the resulting weights.

use thiserror::Error;

use crate::mat::Mat;

#[derive(Debug, Error, PartialEq)]
pub enum AttnError {
    #[error("attention stack dimension `{0}` is zero")]
    EmptyDim(&'static str),
    #[error("attention values length {actual} does not match layers*heads*tokens*patches = {expected}")]
    ValuesLength { expected: usize, actual: usize },
    #[error("token mask length {actual} does not match token count {expected}")]
    MaskLength { expected: usize, actual: usize },
    #[error("attention row (layer {layer}, head {head}, token {token}) sums to {sum}, expected 1 within 1e-6")]
    RowNotNormalized { layer: usize, head: usize, token: usize, sum: f64 },
    #[error("negative or non-finite attention value at (layer {layer}, head {head}, token {token}, patch {patch})")]
    BadValue { layer: usize, head: usize, token: usize, patch: usize },
    #[error("all tokens are masked")]
    AllTokensMasked,
    #[error("last_k is {requested} but the stack has {layers} layers")]
    LastKTooLarge { requested: usize, layers: usize },
    #[error("last_k must be at least 1")]
    LastKZero,
    #[error("non-finite saliency at index {0}")]
    NonFiniteSaliency(usize),
    #[error("saliency must be nonempty")]
    EmptySaliency,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("retained mass {0} must lie in (0, 1]")]
    BadMass(f64),
    #[error("weight vector sums to {0}, expected 1 within 1e-9")]
    NotOnSimplex(f64),
    #[error("weight vector has negative or non-finite entry at {0}")]
    BadWeight(usize),
    #[error("weight vector has empty support")]
    EmptySupport,
    #[error("{weights} weights vs {patches} patch rows")]
    PatchCountMismatch { weights: usize, patches: usize },
    #[error("non-finite patch feature at (patch {patch}, dim {dim})")]
    NonFiniteFeature { patch: usize, dim: usize },
}

/// Cross-attention probabilities for one image branch of one sample:
/// layers x heads x tokens x patches, with a per-token validity mask
/// (true = valid, false = PAD).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    layers: usize,
    heads: usize,
    tokens: usize,
    patches: usize,
    values: Vec<f64>,
    token_mask: Vec<bool>,
}

impl AttentionStack {
    /// Valid-token rows must be nonnegative and sum to 1 within 1e-6.
    /// Masked rows are never read, so they are not checked.
    pub fn new(
        layers: usize,
        heads: usize,
        tokens: usize,
        patches: usize,
        values: Vec<f64>,
        token_mask: Vec<bool>,
    ) -> Result<Self, AttnError> {
        for (name, dim) in [("layers", layers), ("heads", heads), ("tokens", tokens), ("patches", patches)] {
            if dim == 0 {
                return Err(AttnError::EmptyDim(name));
            }
        }
        let expected = layers * heads * tokens * patches;
        if values.len() != expected {
            return Err(AttnError::ValuesLength { expected, actual: values.len() });
        }
        if token_mask.len() != tokens {
            return Err(AttnError::MaskLength { expected: tokens, actual: token_mask.len() });
        }
        if !token_mask.iter().any(|&v| v) {
            return Err(AttnError::AllTokensMasked);
        }
        let stack = AttentionStack { layers, heads, tokens, patches, values, token_mask };
        for l in 0..layers {
            for h in 0..heads {
                for t in 0..tokens {
                    if !stack.token_mask[t] {
                        continue;
                    }
                    let row = stack.row(l, h, t);
                    let mut sum = 0.0;
                    for (p, &v) in row.iter().enumerate() {
                        if !v.is_finite() || v < 0.0 {
                            return Err(AttnError::BadValue { layer: l, head: h, token: t, patch: p });
                        }
                        sum += v;
                    }
                    if (sum - 1.0).abs() > 1e-6 {
                        return Err(AttnError::RowNotNormalized { layer: l, head: h, token: t, sum });
                    }
                }
            }
        }
        Ok(stack)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn token_mask(&self) -> &[bool] {
        &self.token_mask
    }

    pub fn row(&self, layer: usize, head: usize, token: usize) -> &[f64] {
        let base = ((layer * self.heads + head) * self.tokens + token) * self.patches;
        &self.values[base..base + self.patches]
    }
}

/// Length-S probability vector over patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchWeights(Vec<f64>);

impl PatchWeights {
    pub fn new(w: Vec<f64>) -> Result<Self, AttnError> {
        if w.is_empty() {
            return Err(AttnError::EmptySaliency);
        }
        let mut sum = 0.0;
        let mut support = 0usize;
        for (i, &v) in w.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(AttnError::BadWeight(i));
            }
            if v > 0.0 {
                support += 1;
            }
            sum += v;
        }
        if support == 0 {
            return Err(AttnError::EmptySupport);
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(AttnError::NotOnSimplex(sum));
        }
        Ok(PatchWeights(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn support(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// S x D projected patch descriptors for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokens(Mat);

impl PatchTokens {
    pub fn new(m: Mat) -> Result<Self, AttnError> {
        for p in 0..m.rows() {
            for (d, &v) in m.row(p).iter().enumerate() {
                if !v.is_finite() {
                    return Err(AttnError::NonFiniteFeature { patch: p, dim: d });
                }
            }
        }
        Ok(PatchTokens(m))
    }

    pub fn patches(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, p: usize) -> &[f64] {
        self.0.row(p)
    }

    pub fn mat(&self) -> &Mat {
        &self.0
    }
}

/// Mean attention row over the last `last_k` layers, all heads, and valid
/// tokens. The result inherits simplex normalization from the input rows.
pub fn aggregate_attention(stack: &AttentionStack, last_k: usize) -> Result<Vec<f64>, AttnError> {
    if last_k == 0 {
        return Err(AttnError::LastKZero);
    }
    if last_k > stack.layers() {
        return Err(AttnError::LastKTooLarge { requested: last_k, layers: stack.layers() });
    }
    let first_layer = stack.layers() - last_k;
    let valid: Vec<usize> =
        (0..stack.tokens()).filter(|&t| stack.token_mask()[t]).collect();
    let mut saliency = vec![0.0; stack.patches()];
    for l in first_layer..stack.layers() {
        for h in 0..stack.heads() {
            for &t in &valid {
                for (p, &v) in stack.row(l, h, t).iter().enumerate() {
                    saliency[p] += v;
                }
            }
        }
    }
    let count = (last_k * stack.heads() * valid.len()) as f64;
    for v in &mut saliency {
        *v /= count;
    }
    Ok(saliency)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetentionMode {
    /// Keep the smallest descending-weight prefix with cumulative mass >= rho.
    Mass,
    /// Keep ceil(rho * S) patches by descending weight; offered for comparison.
    Count,
}

/// Indices retained by descending-weight mass truncation, ties broken by
/// lower index. Returned sorted ascending.
pub fn top_mass_indices(weights: &[f64], rho: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b].partial_cmp(&weights[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for &i in &order {
        kept.push(i);
        cum += weights[i];
        if cum >= rho {
            break;
        }
    }
    kept.sort_unstable();
    kept
}

fn top_count_indices(weights: &[f64], rho: f64) -> Vec<usize> {
    let s = weights.len();
    let k = ((rho * s as f64).ceil() as usize).clamp(1, s);
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| {
        weights[b].partial_cmp(&weights[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

/// How close a saliency vector sits to a retention-set boundary: the minimum
/// over cut positions of |cumulative mass - rho|, also bounded by the weight
/// gap at the cut. Gradient checks reject points where this is tiny, because
/// the retained set is treated as a constant during differentiation.
pub fn retention_margin(saliency: &[f64], tau: f64, rho: f64) -> f64 {
    let p = match softmax_scaled(saliency, tau) {
        Ok(p) => p,
        Err(_) => return 0.0,
    };
    let mut sorted = p.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut margin = f64::INFINITY;
    for (i, &w) in sorted.iter().enumerate() {
        cum += w;
        margin = margin.min((cum - rho).abs());
        if cum >= rho {
            // Ties at the cut matter too: a vanishing gap between the last
            // kept weight and the first dropped one flips membership.
            if i + 1 < sorted.len() {
                margin = margin.min(w - sorted[i + 1]);
            }
            break;
        }
    }
    margin
}

pub fn softmax_scaled(saliency: &[f64], tau: f64) -> Result<Vec<f64>, AttnError> {
    if saliency.is_empty() {
        return Err(AttnError::EmptySaliency);
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(AttnError::BadTemperature(tau));
    }
    for (i, &v) in saliency.iter().enumerate() {
        if !v.is_finite() {
            return Err(AttnError::NonFiniteSaliency(i));
        }
    }
    let scaled: Vec<f64> = saliency.iter().map(|&v| v / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| e / sum).collect())
}

pub fn topk_softmax(saliency: &[f64], tau: f64, rho: f64) -> Result<PatchWeights, AttnError> {
    topk_softmax_mode(saliency, tau, rho, RetentionMode::Mass)
}

/// Temperature softmax, then truncation per `mode`, then renormalization.
pub fn topk_softmax_mode(
    saliency: &[f64],
    tau: f64,
    rho: f64,
    mode: RetentionMode,
) -> Result<PatchWeights, AttnError> {
    if !(rho.is_finite() && rho > 0.0 && rho <= 1.0) {
        return Err(AttnError::BadMass(rho));
    }
    let p = softmax_scaled(saliency, tau)?;
    let kept = match mode {
        RetentionMode::Mass => top_mass_indices(&p, rho),
        RetentionMode::Count => top_count_indices(&p, rho),
    };
    let mut w = vec![0.0; p.len()];
    let kept_sum: f64 = kept.iter().map(|&i| p[i]).sum();
    for &i in &kept {
        w[i] = p[i] / kept_sum;
    }
    PatchWeights::new(w)
}

/// r = sum_s w_s * e_s.
pub fn weighted_pool(w: &PatchWeights, e: &PatchTokens) -> Result<Vec<f64>, AttnError> {
    if w.len() != e.patches() {
        return Err(AttnError::PatchCountMismatch { weights: w.len(), patches: e.patches() });
    }
    let mut out = vec![0.0; e.dim()];
    for (s, &ws) in w.as_slice().iter().enumerate() {
        if ws == 0.0 {
            continue;
        }
        for (d, &v) in e.row(s).iter().enumerate() {
            out[d] += ws * v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stack_1x1(rows: Vec<Vec<f64>>, mask: Vec<bool>) -> AttentionStack {
        let tokens = rows.len();
        let patches = rows[0].len();
        let values = rows.into_iter().flatten().collect();
        AttentionStack::new(1, 1, tokens, patches, values, mask).unwrap()
    }

    #[test]
    fn aggregate_means_valid_rows() {
        let stack = stack_1x1(vec![vec![0.6, 0.4], vec![0.2, 0.8]], vec![true, true]);
        let s = aggregate_attention(&stack, 1).unwrap();
        assert!((s[0] - 0.4).abs() < 1e-12);
        assert!((s[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn aggregate_skips_pad_tokens() {
        let stack = stack_1x1(vec![vec![0.6, 0.4], vec![0.2, 0.8]], vec![true, false]);
        let s = aggregate_attention(&stack, 1).unwrap();
        assert_eq!(s, vec![0.6, 0.4]);
    }

    #[test]
    fn aggregate_with_k1_uses_only_the_last_layer() {
        // Layer 0 uniform, layer 1 concentrated; K=1 must ignore layer 0.
        let values = vec![0.5, 0.5, 0.9, 0.1];
        let stack = AttentionStack::new(2, 1, 1, 2, values, vec![true]).unwrap();
        let s = aggregate_attention(&stack, 1).unwrap();
        assert_eq!(s, vec![0.9, 0.1]);
        // Independent slice mean for K=2.
        let s2 = aggregate_attention(&stack, 2).unwrap();
        assert!((s2[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rejects_k_out_of_range() {
        let stack = stack_1x1(vec![vec![1.0]], vec![true]);
        assert_eq!(aggregate_attention(&stack, 2), Err(AttnError::LastKTooLarge { requested: 2, layers: 1 }));
        assert_eq!(aggregate_attention(&stack, 0), Err(AttnError::LastKZero));
    }

    #[test]
    fn all_masked_stack_is_rejected() {
        let err = AttentionStack::new(1, 1, 1, 2, vec![0.5, 0.5], vec![false]).unwrap_err();
        assert_eq!(err, AttnError::AllTokensMasked);
    }

    #[test]
    fn denormalized_row_is_rejected() {
        let err = AttentionStack::new(1, 1, 1, 2, vec![0.5, 0.6], vec![true]).unwrap_err();
        assert!(matches!(err, AttnError::RowNotNormalized { .. }));
    }

    #[test]
    fn topk_uniform_tie_keeps_lower_indices() {
        let w = topk_softmax(&[3.0, 3.0, 3.0, 3.0], 1.0, 0.5).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn topk_matches_hand_computed_example() {
        let w = topk_softmax(&[2.0, 1.0, 0.0, -1.0], 1.0, 0.8).unwrap();
        let expect = [0.7311, 0.2689, 0.0, 0.0];
        for (a, b) in w.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-4, "{:?}", w.as_slice());
        }
        // Same two survivors, exact renormalization: softmax over {2, 1}.
        let z = (1f64).exp() + (2f64).exp();
        assert!((w.as_slice()[0] - (2f64).exp() / z).abs() < 1e-12);
    }

    #[test]
    fn rho_one_keeps_the_full_softmax() {
        let s = [0.3, -1.2, 2.0, 0.0, 0.4];
        let w = topk_softmax(&s, 1.3, 1.0).unwrap();
        let p = softmax_scaled(&s, 1.3).unwrap();
        for (a, b) in w.as_slice().iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn small_tau_approaches_argmax() {
        let w = topk_softmax(&[0.2, 0.9, 0.1], 1e-3, 0.5).unwrap();
        assert!(w.as_slice()[1] > 0.999);
    }

    #[test]
    fn count_mode_keeps_a_fixed_number() {
        let w = topk_softmax_mode(&[5.0, 1.0, 0.5, 0.2], 1.0, 0.5, RetentionMode::Count).unwrap();
        let nonzero = w.as_slice().iter().filter(|&&v| v > 0.0).count();
        assert_eq!(nonzero, 2);
    }

    #[test]
    fn non_finite_saliency_is_rejected() {
        assert_eq!(topk_softmax(&[1.0, f64::NAN], 1.0, 0.5), Err(AttnError::NonFiniteSaliency(1)));
        assert_eq!(topk_softmax(&[1.0], 0.0, 0.5), Err(AttnError::BadTemperature(0.0)));
        assert_eq!(topk_softmax(&[1.0], 1.0, 0.0), Err(AttnError::BadMass(0.0)));
    }

    #[test]
    fn pool_selects_and_averages() {
        let e = PatchTokens::new(Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 5.0, 6.0, 7.0])).unwrap();
        let w = PatchWeights::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(weighted_pool(&w, &e).unwrap(), vec![1.0, 2.0, 3.0]);
        let w = PatchWeights::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(weighted_pool(&w, &e).unwrap(), vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn pool_rejects_length_mismatch() {
        let e = PatchTokens::new(Mat::zeros(2, 3)).unwrap();
        let w = PatchWeights::new(vec![0.5, 0.25, 0.25]).unwrap();
        assert!(matches!(weighted_pool(&w, &e), Err(AttnError::PatchCountMismatch { .. })));
    }

    #[test]
    fn retention_margin_flags_boundary_points() {
        // softmax of [ln 3, ln 1] = [0.75, 0.25]; rho = 0.75 sits exactly on the cut.
        let m = retention_margin(&[(3f64).ln(), 0.0], 1.0, 0.75);
        assert!(m < 1e-12);
        let m = retention_margin(&[(3f64).ln(), 0.0], 1.0, 0.6);
        assert!(m > 0.1);
    }

    /// Saliency vectors whose softmax has well-separated entries and cut
    /// positions, so permutation and retention behavior is unambiguous.
    fn distinct_saliency() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, 2..8).prop_filter("distinct entries", |v| {
            let mut s = v.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s.windows(2).all(|w| (w[1] - w[0]).abs() > 1e-3)
        })
    }

    proptest! {
        #[test]
        fn weights_are_a_simplex_vector(s in distinct_saliency(), rho in 0.05f64..1.0) {
            let w = topk_softmax(&s, 1.0, rho).unwrap();
            let sum: f64 = w.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(w.as_slice().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn permuting_saliency_permutes_weights(s in distinct_saliency(), rho in 0.05f64..1.0) {
            let n = s.len();
            let w = topk_softmax(&s, 1.0, rho).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            let permuted: Vec<f64> = perm.iter().map(|&i| s[i]).collect();
            let wp = topk_softmax(&permuted, 1.0, rho).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((wp.as_slice()[j] - w.as_slice()[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn constant_shift_leaves_weights_unchanged(s in distinct_saliency(), c in -5.0f64..5.0, rho in 0.05f64..1.0) {
            let w = topk_softmax(&s, 1.0, rho).unwrap();
            let shifted: Vec<f64> = s.iter().map(|&v| v + c).collect();
            let ws = topk_softmax(&shifted, 1.0, rho).unwrap();
            prop_assert_eq!(w.support(), ws.support());
            for (a, b) in w.as_slice().iter().zip(ws.as_slice()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn pooled_value_stays_in_the_convex_hull(
            s in distinct_saliency(),
            rho in 0.05f64..1.0,
            seed in 0u64..1000,
        ) {
            let n = s.len();
            let e = Mat::from_fn(n, 3, |i, j| {
                let x = (seed as f64 * 0.37 + i as f64 * 1.3 + j as f64 * 0.11).sin() * 2.0;
                x
            });
            let e = PatchTokens::new(e).unwrap();
            let w = topk_softmax(&s, 1.0, rho).unwrap();
            let r = weighted_pool(&w, &e).unwrap();
            for d in 0..3 {
                let col: Vec<f64> = (0..n).map(|p| e.row(p)[d]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(r[d] >= lo - 1e-9 && r[d] <= hi + 1e-9);
            }
        }

        #[test]
        fn smaller_tau_never_flattens_the_peak(s in distinct_saliency()) {
            // With truncation at any fixed rho, the top share only grows as
            // tau shrinks; checked on the full softmax (rho = 1).
            let hot = topk_softmax(&s, 0.5, 1.0).unwrap();
            let cold = topk_softmax(&s, 2.0, 1.0).unwrap();
            let max_hot = hot.as_slice().iter().cloned().fold(0.0, f64::max);
            let max_cold = cold.as_slice().iter().cloned().fold(0.0, f64::max);
            prop_assert!(max_hot >= max_cold - 1e-12);
        }

        #[test]
        fn aggregated_saliency_sums_to_one(
            layers in 1usize..3,
            heads in 1usize..3,
            tokens in 1usize..4,
            patches in 2usize..5,
            seed in 0u64..1000,
        ) {
            let mut values = Vec::new();
            for idx in 0..layers * heads * tokens {
                let raw: Vec<f64> = (0..patches)
                    .map(|p| ((seed + idx as u64) as f64 * 0.7 + p as f64).sin().abs() + 0.05)
                    .collect();
                let sum: f64 = raw.iter().sum();
                values.extend(raw.into_iter().map(|v| v / sum));
            }
            let stack = AttentionStack::new(layers, heads, tokens, patches, values, vec![true; tokens]).unwrap();
            for k in 1..=layers {
                let s = aggregate_attention(&stack, k).unwrap();
                let total: f64 = s.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
                prop_assert!(s.iter().all(|&v| v >= 0.0));
            }
        }
    }
}

//! Joint training objective: caption cross-entropy on the real branch,
//! optionally extended by descriptor alignment, a symmetric contrastive
//! term, and entropic transport when each image in the batch carries a
//! matched synthetic counterpart. The extension is all-or-none per batch.

mod gradcheck;
mod graph;

pub use gradcheck::grad_check;
pub(crate) use graph::MASK_NEG;
pub use graph::{
    ce_node, infonce_node, pal_cos_node, topk_pool_node, transport_loss_node, PoolNodes,
    TransportNodes,
};

use thiserror::Error;

use crate::autodiff::{NodeId, Tape};
use crate::numio::RunConfig;
use crate::ot::OtError;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("config: {0}")]
    Config(String),
    #[error("logits have {rows} rows but {targets} targets and {keep} keep flags")]
    LogitsShape { rows: usize, targets: usize, keep: usize },
    #[error("target {target} at row {row} exceeds vocabulary {vocab}")]
    TargetOutOfRange { row: usize, target: usize, vocab: usize },
    #[error("non-finite logits at row {row}")]
    NonFiniteLogits { row: usize },
    #[error("every position is masked out of the cross-entropy")]
    NoUnmaskedPositions,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("rho must lie in (0, 1], got {0}")]
    BadRho(f64),
    #[error("eps must be positive and finite, got {0}")]
    BadEps(f64),
    #[error("iteration count must be at least 1")]
    ZeroIterations,
    #[error("saliency must be a single row, got {rows}x{cols}")]
    SaliencyNotRow { rows: usize, cols: usize },
    #[error("non-finite saliency at index {index}")]
    NonFiniteSaliency { index: usize },
    #[error("saliency covers {saliency} patches but features have {feats} rows")]
    PatchCountMismatch { saliency: usize, feats: usize },
    #[error("retained weight at index {index} is not strictly positive")]
    DegenerateWeights { index: usize },
    #[error("pooled {branch} descriptor has vanishing norm")]
    ZeroNormPooled { branch: &'static str },
    #[error("{branch} patch row {row} has vanishing norm")]
    ZeroNormPatchRow { branch: &'static str, row: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    DimMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("batch has {real} real and {synthetic} synthetic descriptors")]
    BatchSizeMismatch { real: usize, synthetic: usize },
    #[error("empty retention set on the {branch} branch")]
    EmptyRetention { branch: &'static str },
    #[error(transparent)]
    Transport(#[from] OtError),
}

/// Ablation switch: `Synthetic` freezes the synthetic branch (its nodes are
/// detached copies), so alignment gradients reach only the real branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopGrad {
    #[default]
    Off,
    Synthetic,
}

/// Per-image graph handles for one real/synthetic pair.
#[derive(Debug, Clone, Copy)]
pub struct ImagePairNodes {
    /// 1 x S aggregated attention saliency, real branch.
    pub saliency_real: NodeId,
    /// S x C patch features, real branch.
    pub feats_real: NodeId,
    pub saliency_syn: NodeId,
    pub feats_syn: NodeId,
}

/// One batch: caption logits (flattened batch * steps rows) plus the
/// matched pairs, empty when the batch has no synthetic counterparts.
#[derive(Debug)]
pub struct JointBatchNodes<'a> {
    pub logits: NodeId,
    pub targets: &'a [usize],
    /// true = position contributes to the cross-entropy.
    pub keep: &'a [bool],
    pub pairs: &'a [ImagePairNodes],
    pub stop_grad: StopGrad,
}

/// Loss components as plain numbers; alignment terms are `None` on
/// caption-only batches. `total` always equals
/// ce + lambda_pal * pal + alpha * nce + beta * ot over the present terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub pal: Option<f64>,
    pub nce: Option<f64>,
    pub ot: Option<f64>,
    pub total: f64,
}

#[derive(Debug)]
pub struct JointLoss {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    /// Retention sets per pair (real, synthetic), for diagnostics.
    pub kept: Vec<(Vec<usize>, Vec<usize>)>,
}

pub fn joint_loss(
    tape: &mut Tape,
    batch: &JointBatchNodes,
    cfg: &RunConfig,
) -> Result<JointLoss, ObjectiveError> {
    cfg.validate().map_err(|e| ObjectiveError::Config(e.to_string()))?;

    let ce = ce_node(tape, batch.logits, batch.targets, batch.keep)?;
    let ce_value = tape.value(ce).get(0, 0);
    if batch.pairs.is_empty() {
        return Ok(JointLoss {
            total: ce,
            breakdown: LossBreakdown { ce: ce_value, pal: None, nce: None, ot: None, total: ce_value },
            kept: Vec::new(),
        });
    }

    let mut cos_nodes = Vec::with_capacity(batch.pairs.len());
    let mut ot_nodes = Vec::with_capacity(batch.pairs.len());
    let mut pooled_real = Vec::with_capacity(batch.pairs.len());
    let mut pooled_syn = Vec::with_capacity(batch.pairs.len());
    let mut kept_sets = Vec::with_capacity(batch.pairs.len());

    for pair in batch.pairs {
        let (sal_syn, feats_syn) = match batch.stop_grad {
            StopGrad::Off => (pair.saliency_syn, pair.feats_syn),
            StopGrad::Synthetic => {
                (tape.detach(pair.saliency_syn), tape.detach(pair.feats_syn))
            }
        };
        let real = topk_pool_node(tape, pair.saliency_real, pair.feats_real, cfg.tau_attn, cfg.rho)?;
        let syn = topk_pool_node(tape, sal_syn, feats_syn, cfg.tau_attn, cfg.rho)?;

        cos_nodes.push(pal_cos_node(tape, real.pooled, syn.pooled)?);
        let t = transport_loss_node(
            tape,
            pair.feats_real,
            &real.kept,
            real.weights,
            feats_syn,
            &syn.kept,
            syn.weights,
            cfg.ot_eps,
            cfg.ot_iters,
        )?;
        ot_nodes.push(t.loss);
        pooled_real.push(real.pooled);
        pooled_syn.push(syn.pooled);
        kept_sets.push((real.kept, syn.kept));
    }

    let mean_cos = stack_mean(tape, &cos_nodes);
    let neg_cos = tape.mul_const(mean_cos, -1.0);
    let pal = tape.add_const(neg_cos, 1.0);
    let nce = infonce_node(tape, &pooled_real, &pooled_syn, cfg.nce_temp)?;
    let ot = stack_mean(tape, &ot_nodes);

    let pal_w = tape.mul_const(pal, cfg.lambda_pal);
    let nce_w = tape.mul_const(nce, cfg.alpha);
    let ot_w = tape.mul_const(ot, cfg.beta);
    let t1 = tape.add(ce, pal_w);
    let t2 = tape.add(t1, nce_w);
    let total = tape.add(t2, ot_w);

    let breakdown = LossBreakdown {
        ce: ce_value,
        pal: Some(tape.value(pal).get(0, 0)),
        nce: Some(tape.value(nce).get(0, 0)),
        ot: Some(tape.value(ot).get(0, 0)),
        total: tape.value(total).get(0, 0),
    };
    Ok(JointLoss { total, breakdown, kept: kept_sets })
}

fn stack_mean(tape: &mut Tape, nodes: &[NodeId]) -> NodeId {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.concat_rows(acc, n);
    }
    tape.mean_all(acc)
}

//! Desk-scale captioner: frozen patch encoder, trainable bridge, and a small
//! pre-LN transformer decoder with per-head projection matrices.
//!
//! The encoder is a fixed random projection of raw patch features; everything
//! the optimizer touches lives in [`ParamSet`], enumerated by [`ParamLayout`]
//! in a deterministic order so optimizer moments and checkpoints can address
//! parameters by index. Forward passes are built on the reverse-mode tape;
//! the same graph builder serves teacher forcing and generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attnpool::AttentionStack;
use crate::autodiff::{NodeId, Tape};
use crate::mat::Mat;
use crate::objective::ImagePairNodes;

use super::data::{TripletBatch, EOS_ID, SHAPE_BASE, N_SHAPES};
use super::ToycapError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Raw per-patch feature length fed to the frozen encoder.
    pub raw_dim: usize,
    /// Frozen encoder output width.
    pub enc_dim: usize,
    /// Decoder width.
    pub model_dim: usize,
    /// Vocabulary size of the output head.
    pub vocab: usize,
    pub heads: usize,
    pub layers: usize,
    /// Teacher-forced sequence length (positional table size).
    pub seq_len: usize,
    pub patches: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            raw_dim: 20,
            enc_dim: 32,
            model_dim: 32,
            vocab: 64,
            heads: 2,
            layers: 2,
            seq_len: 9,
            patches: 4,
            mlp_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ToycapError> {
        for (name, v) in [
            ("raw_dim", self.raw_dim),
            ("enc_dim", self.enc_dim),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("seq_len", self.seq_len),
            ("patches", self.patches),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                return Err(ToycapError::Model(format!("{name} must be at least 1")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(ToycapError::Model(format!(
                "model_dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.vocab < SHAPE_BASE + N_SHAPES {
            return Err(ToycapError::Model(format!(
                "vocab {} cannot hold the caption token ids (need {})",
                self.vocab,
                SHAPE_BASE + N_SHAPES
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Fixed random projection from raw patch features to encoder tokens.
/// Rebuilt from its seed on load; never trained.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    w: Mat,
    b: Mat,
}

/// RNG stream reserved for encoder weights; batch streams count up from 1.
const ENCODER_STREAM: u64 = u64::MAX;

impl FrozenEncoder {
    pub fn new(cfg: &ModelConfig, seed: u64) -> FrozenEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ENCODER_STREAM);
        let scale = (6.0 / (cfg.raw_dim + cfg.enc_dim) as f64).sqrt();
        let mut w = Mat::zeros(cfg.raw_dim, cfg.enc_dim);
        for v in w.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
        let mut b = Mat::zeros(1, cfg.enc_dim);
        for v in b.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
        FrozenEncoder { w, b }
    }

    /// raw (S×raw_dim) -> tanh(raw·W + b), S×enc_dim.
    pub fn encode(&self, raw: &Mat) -> Mat {
        let mut out = raw.matmul(&self.w);
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) + self.b.get(0, c);
                out.set(r, c, v.tanh());
            }
        }
        out
    }
}

/// Unfreezing group of a parameter; stage 0 trains Bridge, stage 1 adds
/// TopLayer, stage 2 trains everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Bridge,
    TopLayer,
    Rest,
}

impl Group {
    pub fn trainable_at(self, stage: usize) -> bool {
        match self {
            Group::Bridge => true,
            Group::TopLayer => stage >= 1,
            Group::Rest => stage >= 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Xavier,
    Zero,
    One,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Whether decoupled weight decay applies; vectors are exempt.
    pub decay: bool,
    pub group: Group,
    init: InitKind,
}

/// Deterministic enumeration of every trainable tensor.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> ParamLayout {
        let d = cfg.model_dim;
        let dh = cfg.head_dim();
        let mut specs = Vec::new();
        let mut push = |name: String, rows: usize, cols: usize, group: Group, init: InitKind| {
            let decay = rows > 1 && cols > 1 && init == InitKind::Xavier;
            specs.push(ParamSpec { name, rows, cols, decay, group, init });
        };
        push("bridge.w".into(), cfg.enc_dim, d, Group::Bridge, InitKind::Xavier);
        push("bridge.b".into(), 1, d, Group::Bridge, InitKind::Zero);
        push("bridge.ln_g".into(), 1, d, Group::Bridge, InitKind::One);
        push("bridge.ln_b".into(), 1, d, Group::Bridge, InitKind::Zero);
        push("embed.tok".into(), cfg.vocab, d, Group::Rest, InitKind::Xavier);
        push("embed.pos".into(), cfg.seq_len, d, Group::Rest, InitKind::Xavier);
        for l in 0..cfg.layers {
            let group = if l + 1 == cfg.layers { Group::TopLayer } else { Group::Rest };
            let pre = format!("dec{l}");
            push(format!("{pre}.ln1_g"), 1, d, group, InitKind::One);
            push(format!("{pre}.ln1_b"), 1, d, group, InitKind::Zero);
            for h in 0..cfg.heads {
                for m in ["wq", "wk", "wv"] {
                    push(format!("{pre}.self{h}.{m}"), d, dh, group, InitKind::Xavier);
                }
                push(format!("{pre}.self{h}.wo"), dh, d, group, InitKind::Xavier);
            }
            push(format!("{pre}.ln2_g"), 1, d, group, InitKind::One);
            push(format!("{pre}.ln2_b"), 1, d, group, InitKind::Zero);
            for h in 0..cfg.heads {
                for m in ["wq", "wk", "wv"] {
                    push(format!("{pre}.cross{h}.{m}"), d, dh, group, InitKind::Xavier);
                }
                push(format!("{pre}.cross{h}.wo"), dh, d, group, InitKind::Xavier);
            }
            push(format!("{pre}.ln3_g"), 1, d, group, InitKind::One);
            push(format!("{pre}.ln3_b"), 1, d, group, InitKind::Zero);
            push(format!("{pre}.mlp.w1"), d, cfg.mlp_hidden, group, InitKind::Xavier);
            push(format!("{pre}.mlp.b1"), 1, cfg.mlp_hidden, group, InitKind::Zero);
            push(format!("{pre}.mlp.w2"), cfg.mlp_hidden, d, group, InitKind::Xavier);
            push(format!("{pre}.mlp.b2"), 1, d, group, InitKind::Zero);
        }
        push("final.ln_g".into(), 1, d, Group::Rest, InitKind::One);
        push("final.ln_b".into(), 1, d, Group::Rest, InitKind::Zero);
        push("head.w".into(), d, cfg.vocab, Group::Rest, InitKind::Xavier);
        push("head.b".into(), 1, cfg.vocab, Group::Rest, InitKind::Zero);
        ParamLayout { specs }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index(&self, name: &str) -> usize {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn trainable_at(&self, stage: usize) -> Vec<bool> {
        self.specs.iter().map(|s| s.group.trainable_at(stage)).collect()
    }
}

/// Parameter tensors in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub mats: Vec<Mat>,
}

impl ParamSet {
    /// Xavier-uniform matrices, unit gains, zero biases. Uses RNG stream 0 of
    /// `seed`, disjoint from batch streams.
    pub fn init(layout: &ParamLayout, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mats = layout
            .specs
            .iter()
            .map(|s| match s.init {
                InitKind::Zero => Mat::zeros(s.rows, s.cols),
                InitKind::One => Mat::filled(s.rows, s.cols, 1.0),
                InitKind::Xavier => {
                    let scale = (6.0 / (s.rows + s.cols) as f64).sqrt();
                    let mut m = Mat::zeros(s.rows, s.cols);
                    for v in m.data_mut() {
                        *v = rng.random_range(-scale..scale);
                    }
                    m
                }
            })
            .collect();
        ParamSet { mats }
    }
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub cfg: ModelConfig,
    pub encoder: FrozenEncoder,
    pub layout: ParamLayout,
    pub params: ParamSet,
    pub bos_id: usize,
    pub pad_id: usize,
    pub eos_id: usize,
    /// Seed the encoder and initial parameters were drawn from.
    pub init_seed: u64,
}

impl ToyModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<ToyModel, ToycapError> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        let params = ParamSet::init(&layout, seed);
        let encoder = FrozenEncoder::new(&cfg, seed);
        Ok(ToyModel {
            cfg,
            encoder,
            layout,
            params,
            bos_id: super::data::BOS_ID,
            pad_id: super::data::PAD_ID,
            eos_id: EOS_ID,
            init_seed: seed,
        })
    }

    pub fn param(&self, name: &str) -> &Mat {
        &self.params.mats[self.layout.index(name)]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Mat {
        let i = self.layout.index(name);
        &mut self.params.mats[i]
    }
}

/// Parameter nodes for one tape, aligned with the layout.
pub struct ParamNodes<'a> {
    layout: &'a ParamLayout,
    nodes: Vec<NodeId>,
    trainable: Vec<bool>,
}

impl<'a> ParamNodes<'a> {
    pub(crate) fn get(&self, name: &str) -> NodeId {
        self.nodes[self.layout.index(name)]
    }

    /// Node per layout slot, None where the slot was pushed as a constant.
    pub fn gradient_slots(&self) -> Vec<Option<NodeId>> {
        self.nodes
            .iter()
            .zip(&self.trainable)
            .map(|(&n, &t)| if t { Some(n) } else { None })
            .collect()
    }
}

/// Pushes every parameter onto the tape; frozen slots become constants so the
/// backward pass never touches them.
pub fn push_params<'a>(
    tape: &mut Tape,
    model: &'a ToyModel,
    trainable: &[bool],
) -> Result<ParamNodes<'a>, ToycapError> {
    if trainable.len() != model.layout.len() {
        return Err(ToycapError::Model(format!(
            "trainable mask has {} entries for {} parameters",
            trainable.len(),
            model.layout.len()
        )));
    }
    let nodes = model
        .params
        .mats
        .iter()
        .zip(trainable)
        .map(|(m, &t)| if t { tape.param(m.clone()) } else { tape.constant(m.clone()) })
        .collect();
    Ok(ParamNodes { layout: &model.layout, nodes, trainable: trainable.to_vec() })
}

fn layer_norm(tape: &mut Tape, x: NodeId, p: &ParamNodes, gain: &str, bias: &str) -> NodeId {
    let n = tape.layernorm_rows(x);
    let g = tape.mul_rowvec(n, p.get(gain));
    tape.add_rowvec(g, p.get(bias))
}

pub(crate) struct DecodeOut {
    pub logits: NodeId,
    /// Cross-attention probability nodes, layer-major then head; each is
    /// (prefix length)×S.
    pub cross: Vec<NodeId>,
}

/// Teacher-forced decoder on a token prefix against one image's patch tokens.
pub(crate) fn decoder_logits(
    tape: &mut Tape,
    p: &ParamNodes,
    cfg: &ModelConfig,
    feats: NodeId,
    tokens: &[usize],
) -> DecodeOut {
    let steps = tokens.len();
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

    let tok = tape.gather_rows(p.get("embed.tok"), tokens.to_vec());
    let pos_idx: Vec<usize> = (0..steps).collect();
    let pos = tape.gather_rows(p.get("embed.pos"), pos_idx);
    let mut x = tape.add(tok, pos);

    let causal = Mat::from_fn(steps, steps, |i, j| {
        if j <= i {
            0.0
        } else {
            crate::objective::MASK_NEG
        }
    });
    let causal = tape.constant(causal);

    let mut cross = Vec::with_capacity(cfg.layers * cfg.heads);
    for l in 0..cfg.layers {
        let pre = format!("dec{l}");

        let h1 = layer_norm(tape, x, p, &format!("{pre}.ln1_g"), &format!("{pre}.ln1_b"));
        let mut self_out: Option<NodeId> = None;
        for h in 0..cfg.heads {
            let at = format!("{pre}.self{h}");
            let q = tape.matmul(h1, p.get(&format!("{at}.wq")));
            let k = tape.matmul(h1, p.get(&format!("{at}.wk")));
            let v = tape.matmul(h1, p.get(&format!("{at}.wv")));
            let s = tape.matmul_nt(q, k);
            let s = tape.mul_const(s, scale);
            let s = tape.add(s, causal);
            let a = tape.softmax_rows(s);
            let ctx = tape.matmul(a, v);
            let proj = tape.matmul(ctx, p.get(&format!("{at}.wo")));
            self_out = Some(match self_out {
                None => proj,
                Some(acc) => tape.add(acc, proj),
            });
        }
        x = tape.add(x, self_out.expect("heads >= 1"));

        let h2 = layer_norm(tape, x, p, &format!("{pre}.ln2_g"), &format!("{pre}.ln2_b"));
        let mut cross_out: Option<NodeId> = None;
        for h in 0..cfg.heads {
            let at = format!("{pre}.cross{h}");
            let q = tape.matmul(h2, p.get(&format!("{at}.wq")));
            let k = tape.matmul(feats, p.get(&format!("{at}.wk")));
            let v = tape.matmul(feats, p.get(&format!("{at}.wv")));
            let s = tape.matmul_nt(q, k);
            let s = tape.mul_const(s, scale);
            let a = tape.softmax_rows(s);
            cross.push(a);
            let ctx = tape.matmul(a, v);
            let proj = tape.matmul(ctx, p.get(&format!("{at}.wo")));
            cross_out = Some(match cross_out {
                None => proj,
                Some(acc) => tape.add(acc, proj),
            });
        }
        x = tape.add(x, cross_out.expect("heads >= 1"));

        let h3 = layer_norm(tape, x, p, &format!("{pre}.ln3_g"), &format!("{pre}.ln3_b"));
        let m = tape.matmul(h3, p.get(&format!("{pre}.mlp.w1")));
        let m = tape.add_rowvec(m, p.get(&format!("{pre}.mlp.b1")));
        let m = tape.gelu(m);
        let m = tape.matmul(m, p.get(&format!("{pre}.mlp.w2")));
        let m = tape.add_rowvec(m, p.get(&format!("{pre}.mlp.b2")));
        x = tape.add(x, m);
    }

    let y = layer_norm(tape, x, p, "final.ln_g", "final.ln_b");
    let logits = tape.matmul(y, p.get("head.w"));
    let logits = tape.add_rowvec(logits, p.get("head.b"));
    DecodeOut { logits, cross }
}

/// Bridged patch tokens for one render: LN(enc·W + b) with affine, S×D.
/// The encoder output enters the tape as a constant; gradient stops there.
pub(crate) fn bridge_feats(tape: &mut Tape, p: &ParamNodes, model: &ToyModel, raw: &Mat) -> NodeId {
    let enc = tape.constant(model.encoder.encode(raw));
    let x = tape.matmul(enc, p.get("bridge.w"));
    let x = tape.add_rowvec(x, p.get("bridge.b"));
    layer_norm(tape, x, p, "bridge.ln_g", "bridge.ln_b")
}

/// Mean cross-attention over the last `last_k` layers, all heads, and valid
/// token rows; 1×S, matching the eager stack aggregation.
fn saliency_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    cross: &[NodeId],
    valid: &[usize],
    last_k: usize,
) -> NodeId {
    let first = cfg.layers - last_k;
    let mut acc: Option<NodeId> = None;
    for l in first..cfg.layers {
        for h in 0..cfg.heads {
            let rows = tape.gather_rows(cross[l * cfg.heads + h], valid.to_vec());
            acc = Some(match acc {
                None => rows,
                Some(a) => tape.add(a, rows),
            });
        }
    }
    let acc = acc.expect("last_k >= 1");
    let ones = tape.constant(Mat::filled(1, valid.len(), 1.0));
    let summed = tape.matmul(ones, acc);
    let count = (last_k * cfg.heads * valid.len()) as f64;
    tape.mul_const(summed, 1.0 / count)
}

#[derive(Debug, Clone)]
pub struct ForwardOptions {
    /// Run the synthetic branch and emit pairing nodes.
    pub include_synthetic: bool,
    /// Decoder layers whose cross-attention feeds the saliency.
    pub last_k: usize,
    /// Per-layout-slot trainability; frozen slots get no gradient.
    pub trainable: Vec<bool>,
}

impl ForwardOptions {
    pub fn full(model: &ToyModel, last_k: usize) -> ForwardOptions {
        ForwardOptions {
            include_synthetic: true,
            last_k,
            trainable: vec![true; model.layout.len()],
        }
    }
}

#[derive(Debug)]
pub struct ForwardPass {
    /// Stacked teacher-forced logits, (B·seq_len)×V, image-major.
    pub logits: NodeId,
    pub flat_targets: Vec<usize>,
    /// True where the position contributes to the caption loss.
    pub keep: Vec<bool>,
    /// One entry per image when the synthetic branch ran; empty otherwise.
    pub pairs: Vec<ImagePairNodes>,
    /// Gradient slot per layout index; None where frozen.
    pub param_slots: Vec<Option<NodeId>>,
    pub real_stacks: Vec<AttentionStack>,
    pub syn_stacks: Vec<AttentionStack>,
}

fn stack_from(
    tape: &Tape,
    cfg: &ModelConfig,
    cross: &[NodeId],
    token_mask: Vec<bool>,
) -> Result<AttentionStack, ToycapError> {
    let steps = token_mask.len();
    let mut values = Vec::with_capacity(cfg.layers * cfg.heads * steps * cfg.patches);
    for node in cross {
        values.extend_from_slice(tape.value(*node).data());
    }
    Ok(AttentionStack::new(cfg.layers, cfg.heads, steps, cfg.patches, values, token_mask)?)
}

pub fn forward(
    tape: &mut Tape,
    model: &ToyModel,
    batch: &TripletBatch,
    opts: &ForwardOptions,
) -> Result<ForwardPass, ToycapError> {
    let cfg = &model.cfg;
    cfg.validate()?;
    if opts.last_k == 0 || opts.last_k > cfg.layers {
        return Err(ToycapError::Model(format!(
            "last_k must lie in 1..={}, got {}",
            cfg.layers, opts.last_k
        )));
    }
    if batch.patches() != cfg.patches || batch.raw_dim() != cfg.raw_dim {
        return Err(ToycapError::ShapeMismatch(format!(
            "batch patches {}×{} do not match model {}×{}",
            batch.patches(),
            batch.raw_dim(),
            cfg.patches,
            cfg.raw_dim
        )));
    }
    if batch.seq_len() != cfg.seq_len {
        return Err(ToycapError::ShapeMismatch(format!(
            "batch sequence length {} does not match model {}",
            batch.seq_len(),
            cfg.seq_len
        )));
    }
    for i in 0..batch.batch() {
        for (pos, &id) in batch.input_tokens(i).iter().enumerate() {
            if id >= cfg.vocab {
                return Err(ToycapError::TokenOutOfRange { image: i, pos, id, vocab: cfg.vocab });
            }
        }
    }

    let p = push_params(tape, model, &opts.trainable)?;
    let mut logit_blocks = Vec::with_capacity(batch.batch());
    let mut flat_targets = Vec::new();
    let mut keep = Vec::new();
    let mut pairs = Vec::new();
    let mut real_stacks = Vec::with_capacity(batch.batch());
    let mut syn_stacks = Vec::new();

    for i in 0..batch.batch() {
        let mask = batch.mask(i);
        let token_mask: Vec<bool> = mask.iter().map(|&m| !m).collect();
        let valid: Vec<usize> =
            (0..mask.len()).filter(|&t| token_mask[t]).collect();

        let feats_real = bridge_feats(tape, &p, model, batch.raw_real(i));
        let real = decoder_logits(tape, &p, cfg, feats_real, batch.input_tokens(i));
        logit_blocks.push(real.logits);
        flat_targets.extend_from_slice(batch.target_tokens(i));
        keep.extend(token_mask.iter().copied());
        real_stacks.push(stack_from(tape, cfg, &real.cross, token_mask.clone())?);

        if opts.include_synthetic {
            let feats_syn = bridge_feats(tape, &p, model, batch.raw_syn(i));
            let syn = decoder_logits(tape, &p, cfg, feats_syn, batch.input_tokens(i));
            syn_stacks.push(stack_from(tape, cfg, &syn.cross, token_mask.clone())?);
            pairs.push(ImagePairNodes {
                saliency_real: saliency_node(tape, cfg, &real.cross, &valid, opts.last_k),
                feats_real,
                saliency_syn: saliency_node(tape, cfg, &syn.cross, &valid, opts.last_k),
                feats_syn,
            });
        }
    }

    let mut logits = logit_blocks[0];
    for block in &logit_blocks[1..] {
        logits = tape.concat_rows(logits, *block);
    }
    Ok(ForwardPass {
        logits,
        flat_targets,
        keep,
        pairs,
        param_slots: p.gradient_slots(),
        real_stacks,
        syn_stacks,
    })
}

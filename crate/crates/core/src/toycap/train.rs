//! Training loop: decoupled-weight-decay Adam, a one-cycle learning rate, and
//! global-norm gradient clipping, with optional gradient accumulation and
//! staged decoder unfreezing. The loop is single threaded and replayable:
//! step `s` always consumes batches `s*accum .. (s+1)*accum` of the dataset
//! cycle, so a resumed run retraces the original one exactly.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::mat::Mat;
use crate::numio::RunConfig;
use crate::objective::{joint_loss, JointBatchNodes, JointLoss, LossBreakdown, StopGrad};

use super::data::TripletBatch;
use super::model::{forward, ForwardOptions, ModelConfig, ToyModel};
use super::ToycapError;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Which loss the loop optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Caption loss plus the alignment terms on matched pairs.
    #[default]
    Full,
    /// Caption loss alone; the synthetic branch is never built.
    CaptionOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub model: ModelConfig,
    pub lr_peak: f64,
    pub lr_floor: f64,
    /// Fraction of optimizer steps spent warming up linearly to the peak.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Micro-batches averaged into one optimizer step.
    pub accum: usize,
    /// Staged unfreezing: bridge only, then bridge plus the top decoder
    /// layer, then everything, switching at 1/6 and 2/6 of total steps.
    pub unfreeze: bool,
    pub mode: TrainMode,
    pub stop_grad: StopGrad,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            model: ModelConfig::default(),
            lr_peak: 3e-3,
            lr_floor: 1e-5,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            clip_norm: 1.0,
            accum: 1,
            unfreeze: false,
            mode: TrainMode::Full,
            stop_grad: StopGrad::Off,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<(), ToycapError> {
        self.model.validate()?;
        if !(self.lr_peak.is_finite() && self.lr_peak > 0.0) {
            return Err(ToycapError::Model(format!("lr_peak must be positive, got {}", self.lr_peak)));
        }
        if !(self.lr_floor.is_finite() && self.lr_floor > 0.0 && self.lr_floor <= self.lr_peak) {
            return Err(ToycapError::Model(format!(
                "lr_floor must lie in (0, lr_peak], got {}",
                self.lr_floor
            )));
        }
        if !(self.warmup_frac.is_finite() && (0.0..1.0).contains(&self.warmup_frac)) {
            return Err(ToycapError::Model(format!(
                "warmup_frac must lie in [0, 1), got {}",
                self.warmup_frac
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(ToycapError::Model(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(ToycapError::Model(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if self.accum == 0 {
            return Err(ToycapError::Model("accum must be at least 1".into()));
        }
        Ok(())
    }
}

/// Warmup linearly to the peak over the first `warmup_frac` of steps, then
/// cosine-anneal toward the floor.
pub fn one_cycle_lr(step: usize, total: usize, peak: f64, floor: f64, warmup_frac: f64) -> f64 {
    assert!(total > 0 && step < total, "step {step} outside schedule of {total}");
    let warm = ((warmup_frac * total as f64).round() as usize).min(total.saturating_sub(1));
    if step < warm {
        return peak * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let progress = (step - warm) as f64 / span;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second Adam moments in layout order, plus the update count used
/// for bias correction. Frozen slots keep stale moments until unfrozen.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub count: usize,
}

impl AdamMoments {
    pub fn zeros(model: &ToyModel) -> AdamMoments {
        let shaped: Vec<Mat> =
            model.layout.specs().iter().map(|s| Mat::zeros(s.rows, s.cols)).collect();
        AdamMoments { m: shaped.clone(), v: shaped, count: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer steps completed.
    pub step: usize,
    /// Learning rate applied at the last completed step.
    pub lr: f64,
    pub clip_norm: f64,
    pub unfreeze_stage: usize,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub losses: LossBreakdown,
}

#[derive(Debug)]
pub struct TrainRun {
    pub model: ToyModel,
    pub history: Vec<StepMetrics>,
    pub state: TrainState,
    pub moments: AdamMoments,
}

/// A resumable point in a run: the model, optimizer moments, completed step
/// count, and the history so far.
pub struct Snapshot {
    pub model: ToyModel,
    pub moments: AdamMoments,
    pub step: usize,
    pub history: Vec<StepMetrics>,
}

impl Snapshot {
    pub fn fresh(cfg: &RunConfig, opts: &TrainOptions) -> Result<Snapshot, ToycapError> {
        opts.validate()?;
        let model = ToyModel::new(opts.model.clone(), cfg.seed)?;
        let moments = AdamMoments::zeros(&model);
        Ok(Snapshot { model, moments, step: 0, history: Vec::new() })
    }
}

/// Trains a freshly initialized model with default options.
pub fn train(
    dataset: &[TripletBatch],
    cfg: &RunConfig,
    epochs: usize,
) -> Result<TrainRun, ToycapError> {
    train_with(dataset, cfg, epochs, &TrainOptions::default())
}

pub fn train_with(
    dataset: &[TripletBatch],
    cfg: &RunConfig,
    epochs: usize,
    opts: &TrainOptions,
) -> Result<TrainRun, ToycapError> {
    let snap = Snapshot::fresh(cfg, opts)?;
    train_span(dataset, cfg, epochs, opts, snap, None)
}

fn unfreeze_stage(opts: &TrainOptions, step: usize, total: usize) -> usize {
    if !opts.unfreeze {
        return 2;
    }
    if 6 * step < total {
        0
    } else if 3 * step < total {
        1
    } else {
        2
    }
}

fn average_breakdown(parts: &[LossBreakdown]) -> Result<LossBreakdown, ToycapError> {
    let n = parts.len() as f64;
    let mean_opt = |pick: fn(&LossBreakdown) -> Option<f64>| -> Result<Option<f64>, ToycapError> {
        let present = parts.iter().filter_map(pick).count();
        if present == 0 {
            Ok(None)
        } else if present == parts.len() {
            Ok(Some(parts.iter().filter_map(pick).sum::<f64>() / n))
        } else {
            Err(ToycapError::Model(
                "micro-batches within one step disagree on loss terms".into(),
            ))
        }
    };
    Ok(LossBreakdown {
        ce: parts.iter().map(|p| p.ce).sum::<f64>() / n,
        pal: mean_opt(|p| p.pal)?,
        nce: mean_opt(|p| p.nce)?,
        ot: mean_opt(|p| p.ot)?,
        total: parts.iter().map(|p| p.total).sum::<f64>() / n,
    })
}

/// Runs steps `snap.step .. stop_step` of the schedule defined by the full
/// `epochs * dataset` cycle, so a stopped run continues exactly where it left
/// off. `stop_step: None` runs to the end. The dataset, config, epoch count,
/// and options must match the original run for the replay to be exact.
pub fn train_span(
    dataset: &[TripletBatch],
    cfg: &RunConfig,
    epochs: usize,
    opts: &TrainOptions,
    snap: Snapshot,
    stop_step: Option<usize>,
) -> Result<TrainRun, ToycapError> {
    opts.validate()?;
    cfg.validate().map_err(|e| ToycapError::Model(e.to_string()))?;
    let Snapshot { mut model, mut moments, step: start_step, history: prior_history } = snap;
    if dataset.is_empty() {
        return Err(ToycapError::Model("dataset must hold at least one batch".into()));
    }
    if epochs == 0 {
        return Err(ToycapError::Model("epochs must be at least 1".into()));
    }
    let micro_total = epochs * dataset.len();
    if micro_total % opts.accum != 0 {
        return Err(ToycapError::Model(format!(
            "accum {} does not divide the {micro_total} micro-batches",
            opts.accum
        )));
    }
    let total_steps = micro_total / opts.accum;
    if start_step > total_steps {
        return Err(ToycapError::Model(format!(
            "start step {start_step} exceeds schedule of {total_steps}"
        )));
    }
    let stop = stop_step.unwrap_or(total_steps).min(total_steps);
    if stop < start_step {
        return Err(ToycapError::Model(format!(
            "stop step {stop} precedes start step {start_step}"
        )));
    }
    if moments.m.len() != model.layout.len() || moments.v.len() != model.layout.len() {
        return Err(ToycapError::Model("moment tensors do not match the parameter layout".into()));
    }

    let mut history = prior_history;
    let mut state = TrainState {
        step: start_step,
        lr: history.last().map_or(0.0, |m| m.lr),
        clip_norm: opts.clip_norm,
        unfreeze_stage: unfreeze_stage(opts, start_step.saturating_sub(1), total_steps),
        rng_seed: cfg.seed,
    };

    for step in start_step..stop {
        let stage = unfreeze_stage(opts, step, total_steps);
        let trainable = model.layout.trainable_at(stage);
        let lr = one_cycle_lr(step, total_steps, opts.lr_peak, opts.lr_floor, opts.warmup_frac);

        let mut acc: Vec<Option<Mat>> = vec![None; model.layout.len()];
        let mut parts = Vec::with_capacity(opts.accum);
        for j in 0..opts.accum {
            let micro = step * opts.accum + j;
            let batch = &dataset[micro % dataset.len()];
            let mut tape = Tape::new();
            let fwd_opts = ForwardOptions {
                include_synthetic: opts.mode == TrainMode::Full,
                last_k: cfg.last_k,
                trainable: trainable.clone(),
            };
            let fwd = forward(&mut tape, &model, batch, &fwd_opts)?;
            let joint: JointLoss = joint_loss(
                &mut tape,
                &JointBatchNodes {
                    logits: fwd.logits,
                    targets: &fwd.flat_targets,
                    keep: &fwd.keep,
                    pairs: &fwd.pairs,
                    stop_grad: opts.stop_grad,
                },
                cfg,
            )?;
            if !joint.breakdown.total.is_finite() {
                return Err(ToycapError::Diverged { step, value: joint.breakdown.total });
            }
            parts.push(joint.breakdown);
            let grads = tape
                .backward(joint.total)
                .map_err(|e| ToycapError::Model(format!("backward pass failed: {e}")))?;
            let inv = 1.0 / opts.accum as f64;
            for (i, slot) in fwd.param_slots.iter().enumerate() {
                let Some(node) = slot else { continue };
                let Some(g) = grads.get(*node) else { continue };
                match &mut acc[i] {
                    Some(a) => a.add_assign_scaled(g, inv),
                    empty => {
                        let mut a = Mat::zeros(g.rows(), g.cols());
                        a.add_assign_scaled(g, inv);
                        *empty = Some(a);
                    }
                }
            }
        }

        let mut sq_sum = 0.0;
        for g in acc.iter().flatten() {
            sq_sum += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        let grad_norm = sq_sum.sqrt();
        if !grad_norm.is_finite() {
            return Err(ToycapError::Diverged { step, value: grad_norm });
        }
        let clip_scale = if grad_norm > opts.clip_norm { opts.clip_norm / grad_norm } else { 1.0 };

        moments.count += 1;
        let t = moments.count as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for i in 0..model.layout.len() {
            let Some(g) = &acc[i] else { continue };
            let spec = &model.layout.specs()[i];
            let p = &mut model.params.mats[i];
            let m = &mut moments.m[i];
            let v = &mut moments.v[i];
            for k in 0..p.len() {
                let gk = g.data()[k] * clip_scale;
                m.data_mut()[k] = BETA1 * m.data()[k] + (1.0 - BETA1) * gk;
                v.data_mut()[k] = BETA2 * v.data()[k] + (1.0 - BETA2) * gk * gk;
                let mhat = m.data()[k] / bc1;
                let vhat = v.data()[k] / bc2;
                let mut upd = lr * mhat / (vhat.sqrt() + ADAM_EPS);
                if spec.decay {
                    upd += lr * opts.weight_decay * p.data()[k];
                }
                p.data_mut()[k] -= upd;
            }
        }

        history.push(StepMetrics { step, lr, grad_norm, losses: average_breakdown(&parts)? });
        state = TrainState {
            step: step + 1,
            lr,
            clip_norm: opts.clip_norm,
            unfreeze_stage: stage,
            rng_seed: cfg.seed,
        };
    }

    Ok(TrainRun { model, history, state, moments })
}

//! Masked cross-entropy over teacher-forced logits, the pooled-descriptor
//! alignment loss 1 - cos, and paired InfoNCE over a real/synthetic batch.

use thiserror::Error;

use crate::mat::Mat;

/// Norms below this are treated as zero vectors and rejected rather than
/// silently clamped.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("vector lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("vector norm below {NORM_FLOOR} at row {0}")]
    ZeroNorm(usize),
    #[error("non-finite input at row {0}")]
    NonFiniteInput(usize),
    #[error("non-finite result in {0}")]
    NonFinite(&'static str),
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("batch must be nonempty")]
    EmptyBatch,
    #[error("logits length {actual} does not match batch*steps*vocab = {expected}")]
    LogitsLength { expected: usize, actual: usize },
    #[error("targets/mask length {actual} does not match batch*steps = {expected}")]
    TargetsLength { expected: usize, actual: usize },
    #[error("target {target} at position {position} outside vocabulary of {vocab}")]
    TargetOutOfRange { position: usize, target: usize, vocab: usize },
    #[error("every position is masked")]
    AllMasked,
    #[error("non-finite logit at position {0}")]
    NonFiniteLogit(usize),
}

/// Teacher-forced logits with targets and a PAD mask.
/// `pad[b*steps + t] == true` marks a position excluded from the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch {
    batch: usize,
    steps: usize,
    vocab: usize,
    logits: Vec<f64>,
    targets: Vec<usize>,
    pad: Vec<bool>,
}

impl LogitsBatch {
    pub fn new(
        batch: usize,
        steps: usize,
        vocab: usize,
        logits: Vec<f64>,
        targets: Vec<usize>,
        pad: Vec<bool>,
    ) -> Result<Self, LossError> {
        if batch == 0 || steps == 0 || vocab == 0 {
            return Err(LossError::EmptyBatch);
        }
        let positions = batch * steps;
        if logits.len() != positions * vocab {
            return Err(LossError::LogitsLength { expected: positions * vocab, actual: logits.len() });
        }
        if targets.len() != positions {
            return Err(LossError::TargetsLength { expected: positions, actual: targets.len() });
        }
        if pad.len() != positions {
            return Err(LossError::TargetsLength { expected: positions, actual: pad.len() });
        }
        if pad.iter().all(|&m| m) {
            return Err(LossError::AllMasked);
        }
        for (pos, (&t, &masked)) in targets.iter().zip(&pad).enumerate() {
            if !masked && t >= vocab {
                return Err(LossError::TargetOutOfRange { position: pos, target: t, vocab });
            }
        }
        for (i, &v) in logits.iter().enumerate() {
            if !v.is_finite() {
                return Err(LossError::NonFiniteLogit(i / vocab));
            }
        }
        Ok(LogitsBatch { batch, steps, vocab, logits, targets, pad })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn unmasked_count(&self) -> usize {
        self.pad.iter().filter(|&&m| !m).count()
    }

    fn position_logits(&self, pos: usize) -> &[f64] {
        &self.logits[pos * self.vocab..(pos + 1) * self.vocab]
    }
}

/// Mean negative log-likelihood over unmasked positions.
pub fn masked_ce(batch: &LogitsBatch) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for pos in 0..batch.batch * batch.steps {
        if batch.pad[pos] {
            continue;
        }
        let row = batch.position_logits(pos);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[batch.targets[pos]];
        count += 1;
    }
    total / count as f64
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, LossError> {
    if a.len() != b.len() {
        return Err(LossError::LengthMismatch { left: a.len(), right: b.len() });
    }
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        if !x.is_finite() || !y.is_finite() {
            return Err(LossError::NonFiniteInput(i));
        }
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < NORM_FLOOR {
        return Err(LossError::ZeroNorm(0));
    }
    if nb < NORM_FLOOR {
        return Err(LossError::ZeroNorm(1));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    // Rounding can push |cos| past 1 by an ulp; the clamp keeps pal_loss in [0, 2].
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// 1 - cos(r, r_syn), in [0, 2].
pub fn pal_loss(r: &[f64], r_syn: &[f64]) -> Result<f64, LossError> {
    Ok(1.0 - cosine(r, r_syn)?)
}

/// Paired pooled descriptors: row i of `real` and row i of `synthetic`
/// come from the same caption.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledPairBatch {
    real: Mat,
    synthetic: Mat,
}

impl PooledPairBatch {
    pub fn new(real: Mat, synthetic: Mat) -> Result<Self, LossError> {
        if real.shape() != synthetic.shape() {
            return Err(LossError::LengthMismatch { left: real.len(), right: synthetic.len() });
        }
        for (which, m) in [(0, &real), (1, &synthetic)] {
            for i in 0..m.rows() {
                let row = m.row(i);
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(LossError::NonFiniteInput(i));
                }
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < NORM_FLOOR {
                    let _ = which;
                    return Err(LossError::ZeroNorm(i));
                }
            }
        }
        Ok(PooledPairBatch { real, synthetic })
    }

    pub fn batch(&self) -> usize {
        self.real.rows()
    }

    pub fn dim(&self) -> usize {
        self.real.cols()
    }

    pub fn real(&self) -> &Mat {
        &self.real
    }

    pub fn synthetic(&self) -> &Mat {
        &self.synthetic
    }
}

/// InfoNCE over the 2B pooled descriptors. Every vector anchors once; its
/// positive is the paired counterpart and the other 2B-2 vectors are
/// negatives. The positive also appears in the denominator, so the loss is
/// nonnegative. B = 1 returns 0: the denominator equals the numerator.
pub fn infonce(batch: &PooledPairBatch, temp: f64) -> Result<f64, LossError> {
    if !(temp.is_finite() && temp > 0.0) {
        return Err(LossError::BadTemperature(temp));
    }
    let b = batch.batch();
    if b == 1 {
        return Ok(0.0);
    }
    let d = batch.dim();
    let n = 2 * b;
    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        let row = if i < b { batch.real.row(i) } else { batch.synthetic.row(i - b) };
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        z.push(row.iter().map(|x| x / norm).collect::<Vec<f64>>());
    }
    let mut total = 0.0;
    for i in 0..n {
        let partner = (i + b) % n;
        let sims: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let dot: f64 = (0..d).map(|k| z[i][k] * z[j][k]).sum();
                dot / temp
            })
            .collect();
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + sims.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        let pos: f64 = (0..d).map(|k| z[i][k] * z[partner][k]).sum::<f64>() / temp;
        total += lse - pos;
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(LossError::NonFinite("infonce"));
    }
    Ok(loss)
}

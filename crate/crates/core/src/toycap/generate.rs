//! Decoding: beam search from a forced BOS with PAD/BOS bans and a
//! no-repeat-bigram constraint. Width 1 reduces to greedy argmax.

use crate::autodiff::Tape;
use crate::mat::Mat;

use super::model::{bridge_feats, decoder_logits, push_params, ToyModel};
use super::ToycapError;

/// Log-probabilities over the vocabulary for the next token after `prefix`,
/// conditioned on one image's raw patch features.
pub fn next_token_logprobs(
    model: &ToyModel,
    patches: &Mat,
    prefix: &[usize],
) -> Result<Vec<f64>, ToycapError> {
    let cfg = &model.cfg;
    if patches.shape() != (cfg.patches, cfg.raw_dim) {
        return Err(ToycapError::ShapeMismatch(format!(
            "patches are {}×{}, model expects {}×{}",
            patches.rows(),
            patches.cols(),
            cfg.patches,
            cfg.raw_dim
        )));
    }
    if prefix.is_empty() || prefix.len() > cfg.seq_len {
        return Err(ToycapError::Model(format!(
            "prefix length must lie in 1..={}, got {}",
            cfg.seq_len,
            prefix.len()
        )));
    }
    for (pos, &id) in prefix.iter().enumerate() {
        if id >= cfg.vocab {
            return Err(ToycapError::TokenOutOfRange { image: 0, pos, id, vocab: cfg.vocab });
        }
    }
    let mut tape = Tape::new();
    let frozen = vec![false; model.layout.len()];
    let p = push_params(&mut tape, model, &frozen)?;
    let feats = bridge_feats(&mut tape, &p, model, patches);
    let out = decoder_logits(&mut tape, &p, cfg, feats, prefix);
    let logits = tape.value(out.logits);
    let last = logits.row(logits.rows() - 1);
    let max = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + last.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(last.iter().map(|v| v - lse).collect())
}

fn has_bigram(seq: &[usize], prev: usize, next: usize) -> bool {
    seq.windows(2).any(|w| w[0] == prev && w[1] == next)
}

fn allowed(model: &ToyModel, seq: &[usize], candidate: usize) -> bool {
    if candidate == model.pad_id || candidate == model.bos_id {
        return false;
    }
    let prev = *seq.last().expect("sequences always start with BOS");
    !has_bigram(seq, prev, candidate)
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<usize>,
    score: f64,
}

/// Decodes one caption. The sequence starts at BOS and stops at EOS or after
/// `max_len` tokens in total; the positional table bounds the usable length.
/// Scores are summed token log-probabilities without length normalization;
/// ties prefer finished beams, then earlier candidates.
pub fn generate(
    model: &ToyModel,
    patches: &Mat,
    max_len: usize,
    beams: usize,
) -> Result<Vec<usize>, ToycapError> {
    if beams == 0 {
        return Err(ToycapError::BeamWidth);
    }
    if max_len == 0 {
        return Err(ToycapError::Model("max_len must be at least 1".into()));
    }
    let cap = max_len.min(model.cfg.seq_len);
    let mut live = vec![Beam { tokens: vec![model.bos_id], score: 0.0 }];
    let mut finished: Option<Beam> = None;

    while !live.is_empty() && live[0].tokens.len() < cap {
        let mut candidates: Vec<Beam> = Vec::new();
        for beam in &live {
            let logprobs = next_token_logprobs(model, patches, &beam.tokens)?;
            for (id, lp) in logprobs.iter().enumerate() {
                if !allowed(model, &beam.tokens, id) {
                    continue;
                }
                let mut tokens = beam.tokens.clone();
                tokens.push(id);
                candidates.push(Beam { tokens, score: beam.score + lp });
            }
        }
        if candidates.is_empty() {
            break;
        }
        // Stable sort keeps beam-major, token-ascending insertion order on
        // ties, so selection is deterministic.
        candidates.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        candidates.truncate(beams);
        live = Vec::new();
        for c in candidates {
            if *c.tokens.last().unwrap() == model.eos_id {
                let better = match &finished {
                    None => true,
                    Some(f) => c.score > f.score,
                };
                if better {
                    finished = Some(c);
                }
            } else {
                live.push(c);
            }
        }
    }

    let best_live = live.into_iter().max_by(|a, b| a.score.partial_cmp(&b.score).unwrap());
    let best = match (finished, best_live) {
        (Some(f), Some(l)) => {
            if l.score > f.score {
                l
            } else {
                f
            }
        }
        (Some(f), None) => f,
        (None, Some(l)) => l,
        (None, None) => Beam { tokens: vec![model.bos_id], score: 0.0 },
    };
    Ok(best.tokens)
}

//! Caption-pair bookkeeping: cosine verification of cross-lingual embedding
//! pairs, prompt assembly with hash sidecars, bilingual token truncation, and
//! shard merging with a recomputable audit. Embedding inference, translation,
//! and image generation happen elsewhere; this module only keeps their books.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mat::Mat;
use crate::numio::{read_records, CaptionPairRecord, NumioError, RecordFormat};

pub const DEFAULT_THRESHOLD: f64 = 0.55;
pub const DEFAULT_CAP: usize = 77;
pub const DEFAULT_EN_BUDGET: usize = 37;
pub const DEFAULT_BN_BUDGET: usize = 40;
pub const DEFAULT_NEGATIVE_PROMPT: &str = "low quality, bad anatomy, watermark";
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Error)]
pub enum DatapipeError {
    #[error("caption {caption_id}: embedding norm below {floor:e}")]
    ZeroNormEmbedding { caption_id: u64, floor: f64 },
    #[error("caption {caption_id}: embedding lengths differ ({en} vs {bn})")]
    DimMismatch { caption_id: u64, en: usize, bn: usize },
    #[error("caption {caption_id}: empty embedding")]
    EmptyEmbedding { caption_id: u64 },
    #[error("English text must be nonempty")]
    EmptyEnglish,
    #[error("threshold must be finite, got {0}")]
    BadThreshold(f64),
    #[error("sidecar hash is {stored} but the prompt hashes to {computed}")]
    HashMismatch { stored: String, computed: String },
    #[error("shard {path}: {source}")]
    Shard { path: PathBuf, source: NumioError },
    #[error("shard {path}: unrecognized record format")]
    UnknownFormat { path: PathBuf },
    #[error("caption {caption_id}: duplicate with conflicting text")]
    ConflictingDuplicate { caption_id: u64 },
    #[error("embeddings have {rows} rows for {records} records")]
    RowMismatch { rows: usize, records: usize },
    #[error("embedding width {0} is not an even split into two languages")]
    OddWidth(usize),
}

/// Norms below this count as zero; matches the pooling floor so a vector
/// rejected here would also be rejected as a descriptor.
pub const EMB_NORM_FLOOR: f64 = 1e-12;

/// One caption's English and Bengali sentence embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    caption_id: u64,
    emb_en: Vec<f64>,
    emb_bn: Vec<f64>,
}

impl EmbeddingPair {
    pub fn new(caption_id: u64, emb_en: Vec<f64>, emb_bn: Vec<f64>) -> Result<Self, DatapipeError> {
        if emb_en.is_empty() || emb_bn.is_empty() {
            return Err(DatapipeError::EmptyEmbedding { caption_id });
        }
        if emb_en.len() != emb_bn.len() {
            return Err(DatapipeError::DimMismatch {
                caption_id,
                en: emb_en.len(),
                bn: emb_bn.len(),
            });
        }
        for side in [&emb_en, &emb_bn] {
            let norm = side.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm < EMB_NORM_FLOOR {
                return Err(DatapipeError::ZeroNormEmbedding {
                    caption_id,
                    floor: EMB_NORM_FLOOR,
                });
            }
        }
        Ok(EmbeddingPair { caption_id, emb_en, emb_bn })
    }

    pub fn caption_id(&self) -> u64 {
        self.caption_id
    }
}

/// Cosine similarity plus the acceptance decision at `threshold`. Equality
/// counts as accepted.
pub fn verify_pair(pair: &EmbeddingPair, threshold: f64) -> Result<(f64, bool), DatapipeError> {
    if !threshold.is_finite() {
        return Err(DatapipeError::BadThreshold(threshold));
    }
    let dot: f64 = pair.emb_en.iter().zip(&pair.emb_bn).map(|(a, b)| a * b).sum();
    let na = pair.emb_en.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = pair.emb_bn.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sim = dot / (na * nb);
    Ok((sim, sim >= threshold))
}

pub fn whitespace_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// Exactly `A photo of: {EN}. In Bengali: {BN}`.
pub fn build_prompt(text_en: &str, text_bn: &str) -> Result<String, DatapipeError> {
    if text_en.is_empty() {
        return Err(DatapipeError::EmptyEnglish);
    }
    Ok(format!("A photo of: {text_en}. In Bengali: {text_bn}"))
}

/// Trims one side to its budget: rightmost stopword occurrences go first,
/// one at a time, until the budget is met or no stopwords remain; only then
/// are trailing tokens cut. Surviving tokens keep their order.
fn trim_side(tokens: &[String], budget: usize, stopwords: &HashSet<String>) -> Vec<String> {
    let mut out: Vec<String> = tokens.to_vec();
    while out.len() > budget {
        match out.iter().rposition(|t| stopwords.contains(t)) {
            Some(i) => {
                out.remove(i);
            }
            None => {
                out.truncate(budget);
                break;
            }
        }
    }
    out
}

/// Per-language budget pass, then a combined cap enforced by trimming the
/// Bengali tail first and the English tail after that. Budgets are never
/// transferred between languages.
pub fn truncate_bilingual(
    en_tokens: &[String],
    bn_tokens: &[String],
    cap: usize,
    en_budget: usize,
    bn_budget: usize,
    en_stopwords: &HashSet<String>,
    bn_stopwords: &HashSet<String>,
) -> (Vec<String>, Vec<String>) {
    let mut en = trim_side(en_tokens, en_budget, en_stopwords);
    let mut bn = trim_side(bn_tokens, bn_budget, bn_stopwords);
    if en.len() + bn.len() > cap {
        let keep_bn = cap.saturating_sub(en.len()).min(bn.len());
        bn.truncate(keep_bn);
    }
    if en.len() + bn.len() > cap {
        en.truncate(cap);
    }
    (en, bn)
}

pub fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        write!(hex, "{byte:02x}").expect("writing to a String cannot fail");
    }
    hex
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSidecar {
    pub prompt: String,
    /// Sorted map so serialized sidecars are byte-stable.
    pub model_versions: BTreeMap<String, String>,
    pub negative_prompt: String,
    pub seed: u64,
    pub sha256_of_prompt: String,
}

impl PromptSidecar {
    pub fn validate(&self) -> Result<(), DatapipeError> {
        let computed = sha256_hex(&self.prompt);
        if computed != self.sha256_of_prompt {
            return Err(DatapipeError::HashMismatch {
                stored: self.sha256_of_prompt.clone(),
                computed,
            });
        }
        Ok(())
    }
}

pub fn sidecar_for(
    prompt: &str,
    model_versions: BTreeMap<String, String>,
    seed: u64,
) -> PromptSidecar {
    PromptSidecar {
        prompt: prompt.to_owned(),
        model_versions,
        negative_prompt: DEFAULT_NEGATIVE_PROMPT.to_owned(),
        seed,
        sha256_of_prompt: sha256_hex(prompt),
    }
}

/// Fills `similarity` and `valid` on each record from the matching row of
/// `embeddings`, whose columns split evenly into the two languages.
pub fn verify_shard(
    records: &mut [CaptionPairRecord],
    embeddings: &Mat,
    threshold: f64,
) -> Result<MergeSummary, DatapipeError> {
    if embeddings.rows() != records.len() {
        return Err(DatapipeError::RowMismatch {
            rows: embeddings.rows(),
            records: records.len(),
        });
    }
    if embeddings.cols() % 2 != 0 {
        return Err(DatapipeError::OddWidth(embeddings.cols()));
    }
    let half = embeddings.cols() / 2;
    let mut summary = MergeSummary::default();
    for (rec, row) in records.iter_mut().zip((0..embeddings.rows()).map(|r| embeddings.row(r))) {
        let pair =
            EmbeddingPair::new(rec.caption_id, row[..half].to_vec(), row[half..].to_vec())?;
        let (sim, valid) = verify_pair(&pair, threshold)?;
        rec.similarity = Some(sim);
        rec.valid = Some(valid);
        summary.total += 1;
        if valid {
            summary.accepted += 1;
        } else {
            summary.rejected += 1;
        }
    }
    Ok(summary)
}

/// Verifies several shards on worker threads, one per shard; results come
/// back in input order, so the outcome matches a sequential pass.
pub fn verify_shards(
    shards: &mut [(Vec<CaptionPairRecord>, Mat)],
    threshold: f64,
) -> Result<MergeSummary, DatapipeError> {
    let summaries: Vec<Result<MergeSummary, DatapipeError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter_mut()
            .map(|(records, emb)| scope.spawn(|| verify_shard(records, emb, threshold)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("verifier thread panicked")).collect()
    });
    let mut total = MergeSummary::default();
    for s in summaries {
        let s = s?;
        total.total += s.total;
        total.accepted += s.accepted;
        total.rejected += s.rejected;
        total.unverified += s.unverified;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MergeSummary {
    pub total: usize,
    pub duplicates: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Records carrying no acceptance flag.
    pub unverified: usize,
}

/// Concatenates shards in order, keeping the first occurrence of each
/// caption id. A duplicate that disagrees on either text is a hard error;
/// one that only disagrees on similarity metadata is dropped and counted.
pub fn merge_records(
    shards: Vec<Vec<CaptionPairRecord>>,
) -> Result<(Vec<CaptionPairRecord>, MergeSummary), DatapipeError> {
    let mut merged: Vec<CaptionPairRecord> = Vec::new();
    let mut by_id: std::collections::HashMap<u64, usize> = std::collections::HashMap::new();
    let mut summary = MergeSummary::default();
    for shard in shards {
        for rec in shard {
            if let Some(&first) = by_id.get(&rec.caption_id) {
                let kept = &merged[first];
                if kept.text_en != rec.text_en || kept.text_bn != rec.text_bn {
                    return Err(DatapipeError::ConflictingDuplicate { caption_id: rec.caption_id });
                }
                summary.duplicates += 1;
                continue;
            }
            by_id.insert(rec.caption_id, merged.len());
            match rec.valid {
                Some(true) => summary.accepted += 1,
                Some(false) => summary.rejected += 1,
                None => summary.unverified += 1,
            }
            summary.total += 1;
            merged.push(rec);
        }
    }
    Ok((merged, summary))
}

pub fn merge_shards(paths: &[PathBuf]) -> Result<(Vec<CaptionPairRecord>, MergeSummary), DatapipeError> {
    let mut shards = Vec::with_capacity(paths.len());
    for path in paths {
        let format = RecordFormat::from_path(path)
            .ok_or_else(|| DatapipeError::UnknownFormat { path: path.clone() })?;
        let file = File::open(path).map_err(|e| DatapipeError::Shard {
            path: path.clone(),
            source: NumioError::Io(e),
        })?;
        let records = read_records(file, format)
            .map_err(|e| DatapipeError::Shard { path: path.clone(), source: e })?;
        shards.push(records);
    }
    merge_records(shards)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AuditReport {
    pub checked: usize,
    /// Ids whose stored flag disagrees with `similarity >= threshold`.
    pub flag_mismatches: Vec<u64>,
    /// Ids missing a similarity or flag.
    pub incomplete: Vec<u64>,
    /// Ids whose recomputed similarity drifted beyond tolerance; only filled
    /// when embeddings are supplied.
    pub similarity_drift: Vec<u64>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.flag_mismatches.is_empty()
            && self.incomplete.is_empty()
            && self.similarity_drift.is_empty()
    }
}

/// Checks that every stored flag equals `similarity >= threshold`.
pub fn audit_records(records: &[CaptionPairRecord], threshold: f64) -> AuditReport {
    let mut report = AuditReport::default();
    for rec in records {
        report.checked += 1;
        match (rec.similarity, rec.valid) {
            (Some(sim), Some(valid)) => {
                if valid != (sim >= threshold) {
                    report.flag_mismatches.push(rec.caption_id);
                }
            }
            _ => report.incomplete.push(rec.caption_id),
        }
    }
    report
}

/// Full audit: flag consistency plus similarity recomputation from the
/// embedding rows (aligned with the records as in [`verify_shard`]).
pub fn audit_with_embeddings(
    records: &[CaptionPairRecord],
    embeddings: &Mat,
    threshold: f64,
    tolerance: f64,
) -> Result<AuditReport, DatapipeError> {
    if embeddings.rows() != records.len() {
        return Err(DatapipeError::RowMismatch {
            rows: embeddings.rows(),
            records: records.len(),
        });
    }
    if embeddings.cols() % 2 != 0 {
        return Err(DatapipeError::OddWidth(embeddings.cols()));
    }
    let half = embeddings.cols() / 2;
    let mut report = audit_records(records, threshold);
    for (i, rec) in records.iter().enumerate() {
        let row = embeddings.row(i);
        let pair =
            EmbeddingPair::new(rec.caption_id, row[..half].to_vec(), row[half..].to_vec())?;
        let (sim, _) = verify_pair(&pair, threshold)?;
        match rec.similarity {
            Some(stored) if (stored - sim).abs() <= tolerance => {}
            _ => report.similarity_drift.push(rec.caption_id),
        }
    }
    Ok(report)
}

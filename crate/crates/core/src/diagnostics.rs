//! Distribution-level diagnostics for embedding clouds (centroid gap, RBF
//! kernel discrepancy, 2-D principal projection) and corpus BLEU for caption
//! quality. All of it is deterministic; the only knob with a heuristic
//! default is the kernel bandwidth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mat::Mat;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("non-finite entry at point {row}, coordinate {col}")]
    NonFiniteEntry { row: usize, col: usize },
    #[error("sets live in different dimensions ({a} vs {b})")]
    DimMismatch { a: usize, b: usize },
    #[error("bandwidth must be positive and finite, got {0}")]
    BadBandwidth(f64),
    #[error("all points coincide, no principal axes exist")]
    DegenerateCloud,
    #[error("projection needs at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("{candidates} candidates but {references} references")]
    CorpusMismatch { candidates: usize, references: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("n-gram order must be between 1 and 4, got {0}")]
    BadOrder(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetLabel {
    Real,
    Synthetic,
}

/// A labeled cloud of row vectors, one embedding per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    points: Mat,
    label: SetLabel,
}

impl EmbeddingSet {
    /// `Mat` already guarantees at least one point and one coordinate; this
    /// only screens for non-finite entries.
    pub fn new(points: Mat, label: SetLabel) -> Result<Self, DiagnosticsError> {
        for i in 0..points.rows() {
            for (j, v) in points.row(i).iter().enumerate() {
                if !v.is_finite() {
                    return Err(DiagnosticsError::NonFiniteEntry { row: i, col: j });
                }
            }
        }
        Ok(EmbeddingSet { points, label })
    }

    pub fn points(&self) -> &Mat {
        &self.points
    }

    pub fn label(&self) -> SetLabel {
        self.label
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }
}

fn check_dims(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<(), DiagnosticsError> {
    if a.dim() != b.dim() {
        return Err(DiagnosticsError::DimMismatch { a: a.dim(), b: b.dim() });
    }
    Ok(())
}

fn mean_point(points: &Mat) -> Vec<f64> {
    let mut mean = vec![0.0; points.cols()];
    for i in 0..points.rows() {
        for (m, v) in mean.iter_mut().zip(points.row(i)) {
            *m += v;
        }
    }
    let inv = 1.0 / points.rows() as f64;
    for m in &mut mean {
        *m *= inv;
    }
    mean
}

/// Euclidean distance between the two set means.
pub fn centroid_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64, DiagnosticsError> {
    check_dims(a, b)?;
    let (ma, mb) = (mean_point(&a.points), mean_point(&b.points));
    let sq: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sq.sqrt())
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn kernel_mean(x: &Mat, y: &Mat, sigma: f64) -> f64 {
    let inv = -1.0 / (2.0 * sigma * sigma);
    let mut total = 0.0;
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            total += (sq_dist(x.row(i), y.row(j)) * inv).exp();
        }
    }
    total / (x.rows() * y.rows()) as f64
}

/// Squared maximum mean discrepancy under the Gaussian kernel
/// exp(−‖x−y‖² / 2σ²), as the biased V-statistic. Keeping the diagonal
/// terms makes identical samples score exactly zero; the price is an upward
/// bias of order 1/N against the unbiased U-statistic.
pub fn mmd2_rbf(a: &EmbeddingSet, b: &EmbeddingSet, sigma: f64) -> Result<f64, DiagnosticsError> {
    check_dims(a, b)?;
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(DiagnosticsError::BadBandwidth(sigma));
    }
    let aa = kernel_mean(&a.points, &a.points, sigma);
    let bb = kernel_mean(&b.points, &b.points, sigma);
    let ab = kernel_mean(&a.points, &b.points, sigma);
    Ok(aa + bb - 2.0 * ab)
}

/// Median pairwise Euclidean distance over the pooled points. Errors when
/// every pooled point coincides, since a zero bandwidth is unusable.
pub fn median_pairwise_sigma(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64, DiagnosticsError> {
    check_dims(a, b)?;
    let pooled: Vec<&[f64]> = (0..a.len())
        .map(|i| a.points.row(i))
        .chain((0..b.len()).map(|i| b.points.row(i)))
        .collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return Err(DiagnosticsError::TooFewPoints(pooled.len()));
    }
    dists.sort_by(|x, y| x.partial_cmp(y).expect("distances are finite"));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if median <= 0.0 {
        return Err(DiagnosticsError::BadBandwidth(median));
    }
    Ok(median)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// (eigenvalues, eigenvectors-as-columns), unsorted.
fn jacobi_eigh(m: &Mat) -> (Vec<f64>, Mat) {
    let n = m.rows();
    debug_assert_eq!(n, m.cols());
    let mut a = m.clone();
    let mut v = Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 });
    let frob2 = a.sum_sq();
    for _ in 0..100 {
        let off2: f64 = (0..n)
            .flat_map(|p| (0..n).filter(move |q| *q != p).map(move |q| (p, q)))
            .map(|(p, q)| a.get(p, q) * a.get(p, q))
            .sum();
        if off2 <= frob2 * 1e-28 + f64::MIN_POSITIVE {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    ((0..n).map(|i| a.get(i, i)).collect(), v)
}

/// Output of [`pca_2d`]: per-point coordinates along the top two principal
/// axes plus the variance each axis explains.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection2D {
    pub coords: Mat,
    pub explained: [f64; 2],
}

/// Projects mean-centered points onto their top two principal axes. Axis
/// signs follow a fixed convention (the entry of largest magnitude in each
/// axis is positive), so repeated runs agree bitwise. One-dimensional input
/// gets a zero second coordinate.
pub fn pca_2d(points: &Mat) -> Result<Projection2D, DiagnosticsError> {
    if points.rows() < 2 {
        return Err(DiagnosticsError::TooFewPoints(points.rows()));
    }
    let (n, d) = points.shape();
    let mean = mean_point(points);
    let centered = Mat::from_fn(n, d, |i, j| points.get(i, j) - mean[j]);
    if centered.sum_sq() == 0.0 {
        return Err(DiagnosticsError::DegenerateCloud);
    }
    let cov = centered.matmul_tn(&centered).scale(1.0 / n as f64);
    let (vals, vecs) = jacobi_eigh(&cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| vals[j].partial_cmp(&vals[i]).expect("eigenvalues are finite"));

    let mut axes = Mat::zeros(d, 2);
    let mut explained = [0.0; 2];
    for (slot, &col) in order.iter().take(2).enumerate() {
        let axis: Vec<f64> = (0..d).map(|r| vecs.get(r, col)).collect();
        let lead = axis
            .iter()
            .enumerate()
            .max_by(|(_, x), (_, y)| x.abs().partial_cmp(&y.abs()).expect("finite loadings"))
            .map(|(i, _)| i)
            .expect("axis is nonempty");
        let flip = if axis[lead] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            axes.set(r, slot, flip * axis[r]);
        }
        explained[slot] = vals[col].max(0.0);
    }
    Ok(Projection2D { coords: centered.matmul(&axes), explained })
}

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> std::collections::HashMap<&'a [String], usize> {
    let mut counts = std::collections::HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-1..max_n, each on a 0..100 scale. Cumulative scores: BLEU-n
/// is the geometric mean of clipped precisions for orders 1..n times the
/// brevity penalty exp(1 − r/c) applied when the candidate corpus is the
/// shorter side. No smoothing, so a zero precision zeroes that order up.
pub fn bleu_n(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    max_n: usize,
) -> Result<Vec<f64>, DiagnosticsError> {
    if candidates.len() != references.len() {
        return Err(DiagnosticsError::CorpusMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(DiagnosticsError::EmptyCorpus);
    }
    if max_n == 0 || max_n > 4 {
        return Err(DiagnosticsError::BadOrder(max_n));
    }

    let cand_len: usize = candidates.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    let mut matched = vec![0usize; max_n];
    let mut possible = vec![0usize; max_n];
    for (cand, reference) in candidates.iter().zip(references) {
        for n in 1..=max_n {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(cand, n) {
                matched[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            possible[n - 1] += cand.len().saturating_sub(n - 1).min(cand.len());
        }
    }

    if cand_len == 0 {
        return Ok(vec![0.0; max_n]);
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| if possible[i] == 0 { 0.0 } else { matched[i] as f64 / possible[i] as f64 })
        .collect();
    Ok((1..=max_n)
        .map(|n| {
            if precisions[..n].iter().any(|&p| p == 0.0) {
                return 0.0;
            }
            let log_mean = precisions[..n].iter().map(|p| p.ln()).sum::<f64>() / n as f64;
            100.0 * bp * log_mean.exp()
        })
        .collect())
}

/// Alignment scorecard for a pair of clouds: centroid gap, ambient kernel
/// discrepancy, and the same discrepancy inside a shared 2-D projection
/// (the projection is fit on the pooled points so both sets share axes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub label_a: SetLabel,
    pub label_b: SetLabel,
    pub points_a: usize,
    pub points_b: usize,
    pub centroid_distance: f64,
    pub bandwidth: f64,
    pub mmd2: f64,
    pub mmd2_projected: f64,
    pub explained_variance: [f64; 2],
}

pub fn alignment_report(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    bandwidth: Option<f64>,
) -> Result<AlignmentReport, DiagnosticsError> {
    check_dims(a, b)?;
    let sigma = match bandwidth {
        Some(s) => s,
        None => median_pairwise_sigma(a, b)?,
    };
    let centroid = centroid_distance(a, b)?;
    let mmd2 = mmd2_rbf(a, b, sigma)?;

    let pooled = Mat::from_fn(a.len() + b.len(), a.dim(), |i, j| {
        if i < a.len() {
            a.points.get(i, j)
        } else {
            b.points.get(i - a.len(), j)
        }
    });
    let proj = pca_2d(&pooled)?;
    let split = |lo: usize, hi: usize, label| {
        EmbeddingSet::new(Mat::from_fn(hi - lo, 2, |i, j| proj.coords.get(lo + i, j)), label)
    };
    let pa = split(0, a.len(), a.label)?;
    let pb = split(a.len(), a.len() + b.len(), b.label)?;
    let mmd2_projected = mmd2_rbf(&pa, &pb, sigma)?;

    Ok(AlignmentReport {
        label_a: a.label,
        label_b: b.label,
        points_a: a.len(),
        points_b: b.len(),
        centroid_distance: centroid,
        bandwidth: sigma,
        mmd2,
        mmd2_projected,
        explained_variance: proj.explained,
    })
}

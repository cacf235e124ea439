//! Soft-to-hard vector quantization.
//!
//! Each L-dimensional code vector is assigned to M learnable centroids
//! through a softmax over negative Euclidean distances, scaled by an
//! annealing factor alpha. During training the quantized vector is the
//! convex combination of centroids under those probabilities; at test time
//! it is the nearest centroid. Centroid-usage histograms give the entropy
//! that drives bitrate control.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{HasParams, ParamVisitor};

#[derive(Error, Debug)]
pub enum QuantizerError {
    #[error("code vector contains non-finite values")]
    NonFiniteInput,
    #[error("alpha must be positive, got {0}")]
    BadAlpha(f64),
    #[error("codebook needs at least 2 centroids, got {0}")]
    TooFewCentroids(usize),
    #[error("codebook contains non-finite centroids")]
    NonFiniteCentroids,
    #[error("dimension mismatch: code has {code} dims, codebook has {codebook}")]
    DimMismatch { code: usize, codebook: usize },
    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),
}

/// M learnable centroids of dimension L for one source's codes.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// (M, L) centroid matrix.
    pub centroids: Array2<f64>,
    /// 0 = speech, 1 = noise (or 0 = mixture for the baseline codec).
    pub source_index: usize,
}

impl Codebook {
    pub fn new(centroids: Array2<f64>, source_index: usize) -> Result<Self, QuantizerError> {
        if centroids.nrows() < 2 {
            return Err(QuantizerError::TooFewCentroids(centroids.nrows()));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(QuantizerError::NonFiniteCentroids);
        }
        let mut cb = Self {
            centroids,
            source_index,
        };
        cb.jitter_duplicates();
        Ok(cb)
    }

    pub fn num_centroids(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Bit-identical centroid rows break nearest-centroid ties everywhere;
    /// nudge later duplicates by a tiny deterministic offset.
    fn jitter_duplicates(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0de);
        let m = self.centroids.nrows();
        for i in 1..m {
            let mut attempts = 0;
            while (0..i).any(|j| self.centroids.row(j) == self.centroids.row(i)) {
                let jitter: Vec<f64> = (0..self.centroids.ncols())
                    .map(|_| rng.random_range(-1e-6..1e-6))
                    .collect();
                for (k, &dv) in jitter.iter().enumerate() {
                    self.centroids[(i, k)] += dv;
                }
                attempts += 1;
                assert!(attempts < 100, "could not de-duplicate centroids");
            }
        }
    }
}

/// Exponential annealing of the softmax scale: alpha starts at
/// `alpha_start`, multiplies by `growth` once per epoch and is clamped at
/// `alpha_max`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AlphaSchedule {
    pub alpha_start: f64,
    pub alpha_max: f64,
    pub growth: f64,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        // Reaches alpha_max from alpha_start in 20 epochs.
        Self {
            alpha_start: 10.0,
            alpha_max: 500.0,
            growth: (500.0f64 / 10.0).powf(1.0 / 20.0),
        }
    }
}

impl AlphaSchedule {
    pub fn alpha_at(&self, epochs_since_quantization_start: usize) -> f64 {
        let a = self.alpha_start * self.growth.powi(epochs_since_quantization_start as i32);
        a.min(self.alpha_max)
    }

    pub fn validate(&self) -> Result<(), QuantizerError> {
        if self.alpha_start <= 0.0 {
            return Err(QuantizerError::BadAlpha(self.alpha_start));
        }
        if self.growth < 1.0 || self.alpha_max < self.alpha_start {
            return Err(QuantizerError::BadAlpha(self.growth));
        }
        Ok(())
    }
}

/// Per-code-vector cluster membership: distances to every centroid and the
/// softmax probabilities over them.
#[derive(Debug, Clone)]
pub struct SoftAssignment {
    pub p: Array1<f64>,
    pub d: Array1<f64>,
}

/// Centroid-usage frequencies for one source.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageHistogram {
    pub q: Array1<f64>,
    pub basis: CountBasis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountBasis {
    /// Mean of soft probabilities over a batch (training-time estimate).
    SoftBatch,
    /// Normalized hard-index counts over a corpus (reported entropy).
    HardCorpus,
}

impl UsageHistogram {
    pub fn new(q: Array1<f64>, basis: CountBasis) -> Result<Self, QuantizerError> {
        if q.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(QuantizerError::InvalidHistogram(
                "negative or non-finite frequency".into(),
            ));
        }
        let total: f64 = q.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(QuantizerError::InvalidHistogram(format!(
                "frequencies sum to {total}, expected 1"
            )));
        }
        Ok(Self { q, basis })
    }

    pub fn from_counts(counts: &[u64]) -> Result<Self, QuantizerError> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(QuantizerError::InvalidHistogram("all counts are zero".into()));
        }
        let q = Array1::from_iter(counts.iter().map(|&c| c as f64 / total as f64));
        Self::new(q, CountBasis::HardCorpus)
    }
}

fn check_code(y: &[f64], codebook: &Codebook) -> Result<(), QuantizerError> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(QuantizerError::NonFiniteInput);
    }
    if y.len() != codebook.dim() {
        return Err(QuantizerError::DimMismatch {
            code: y.len(),
            codebook: codebook.dim(),
        });
    }
    Ok(())
}

fn euclidean(y: &[f64], centroid: ndarray::ArrayView1<'_, f64>) -> f64 {
    y.iter()
        .zip(centroid.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Distances to all centroids and the softmax of their negatives, scaled by
/// `alpha`. The softmax subtracts the max argument first, so arbitrarily
/// large `alpha * d` cannot overflow.
pub fn soft_assign(
    y: &[f64],
    codebook: &Codebook,
    alpha: f64,
) -> Result<SoftAssignment, QuantizerError> {
    if alpha <= 0.0 {
        return Err(QuantizerError::BadAlpha(alpha));
    }
    check_code(y, codebook)?;
    let d = Array1::from_iter(codebook.centroids.outer_iter().map(|c| euclidean(y, c)));
    let s_max = d.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(-alpha * v));
    let mut p = d.mapv(|v| (-alpha * v - s_max).exp());
    let total = p.sum();
    p /= total;
    Ok(SoftAssignment { p, d })
}

/// Training-path quantization: the convex combination of centroids weighted
/// by the soft assignment.
pub fn soft_quantize(assignment: &SoftAssignment, codebook: &Codebook) -> Array1<f64> {
    assert_eq!(assignment.p.len(), codebook.num_centroids());
    let mut out = Array1::zeros(codebook.dim());
    for (pm, centroid) in assignment.p.iter().zip(codebook.centroids.outer_iter()) {
        out.scaled_add(*pm, &centroid);
    }
    out
}

/// Test-path quantization: nearest centroid, ties broken by lowest index.
pub fn hard_quantize(
    y: &[f64],
    codebook: &Codebook,
) -> Result<(usize, Array1<f64>), QuantizerError> {
    check_code(y, codebook)?;
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (m, centroid) in codebook.centroids.outer_iter().enumerate() {
        let d = euclidean(y, centroid);
        if d < best_d {
            best_d = d;
            best = m;
        }
    }
    Ok((best, codebook.centroids.row(best).to_owned()))
}

/// Shannon entropy of a usage histogram, in bits; 0 log 0 := 0.
pub fn estimate_entropy(hist: &UsageHistogram) -> f64 {
    entropy_bits(hist.q.as_slice().expect("contiguous"))
}

pub(crate) fn entropy_bits(q: &[f64]) -> f64 {
    -q.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.log2())
        .sum::<f64>()
}

/// Derivative of [`entropy_bits`] with respect to each frequency.
pub(crate) fn entropy_grad_bits(q: &[f64]) -> Vec<f64> {
    q.iter()
        .map(|&v| {
            if v > 0.0 {
                -(v.ln() + 1.0) / std::f64::consts::LN_2
            } else {
                0.0
            }
        })
        .collect()
}

/// Training-time usage: mean soft probability per centroid over every code
/// vector in the batch. `p` has shape (batch, columns, M).
pub fn soft_usage(p: &Array3<f64>) -> UsageHistogram {
    let (b, cols, m) = p.dim();
    let n = (b * cols) as f64;
    let mut q = Array1::zeros(m);
    for bi in 0..b {
        for c in 0..cols {
            for mi in 0..m {
                q[mi] += p[(bi, c, mi)];
            }
        }
    }
    q /= n;
    UsageHistogram {
        q,
        basis: CountBasis::SoftBatch,
    }
}

/// Evaluation-time usage: normalized hard-index counts.
pub fn hard_usage(indices: &[usize], num_centroids: usize) -> Result<UsageHistogram, QuantizerError> {
    let mut counts = vec![0u64; num_centroids];
    for &idx in indices {
        assert!(idx < num_centroids, "index {idx} out of range");
        counts[idx] += 1;
    }
    UsageHistogram::from_counts(&counts)
}

/// Batched soft-to-hard VQ over a (batch, L, P) code map, with the backward
/// pass for both the quantized-output path and the usage-entropy path.
pub struct VqLayer {
    pub name: String,
    pub codebook: Codebook,
    pub grad_centroids: Array2<f64>,
    cache: Option<VqCache>,
}

struct VqCache {
    codes: Array3<f64>,
    p: Array3<f64>, // (B, P, M)
    d: Array3<f64>, // (B, P, M)
    alpha: f64,
}

impl VqLayer {
    pub fn new(name: impl Into<String>, codebook: Codebook) -> Self {
        let shape = codebook.centroids.raw_dim();
        Self {
            name: name.into(),
            codebook,
            grad_centroids: Array2::zeros(shape),
            cache: None,
        }
    }

    /// Soft-quantize every column of the code map and return the quantized
    /// map plus the batch usage histogram.
    pub fn forward_train(
        &mut self,
        codes: &Array3<f64>,
        alpha: f64,
        train: bool,
    ) -> (Array3<f64>, UsageHistogram) {
        let (b, l, cols) = codes.dim();
        assert_eq!(l, self.codebook.dim(), "{}: bad code dimension", self.name);
        let m = self.codebook.num_centroids();
        let mut p = Array3::zeros((b, cols, m));
        let mut d = Array3::zeros((b, cols, m));
        let mut quantized = Array3::zeros((b, l, cols));
        let mut y = vec![0.0; l];
        for bi in 0..b {
            for c in 0..cols {
                for (k, v) in y.iter_mut().enumerate() {
                    *v = codes[(bi, k, c)];
                }
                let a = soft_assign(&y, &self.codebook, alpha).expect("valid code column");
                let q = soft_quantize(&a, &self.codebook);
                for k in 0..l {
                    quantized[(bi, k, c)] = q[k];
                }
                p.index_axis_mut(Axis(0), bi).row_mut(c).assign(&a.p);
                d.index_axis_mut(Axis(0), bi).row_mut(c).assign(&a.d);
            }
        }
        let usage = soft_usage(&p);
        if train {
            self.cache = Some(VqCache {
                codes: codes.clone(),
                p,
                d,
                alpha,
            });
        }
        (quantized, usage)
    }

    /// Backward for [`Self::forward_train`]. `grad_quantized` is the loss
    /// gradient on the quantized map; `grad_usage` (if any) is the loss
    /// gradient on the batch usage histogram. Accumulates centroid
    /// gradients and returns the gradient on the input codes.
    pub fn backward(
        &mut self,
        grad_quantized: &Array3<f64>,
        grad_usage: Option<&Array1<f64>>,
    ) -> Array3<f64> {
        let cache = self.cache.take().expect("backward without forward");
        let (b, l, cols) = cache.codes.dim();
        let m = self.codebook.num_centroids();
        let n = (b * cols) as f64;
        let mut grad_codes = Array3::zeros((b, l, cols));
        let mut grad_p = vec![0.0; m];
        for bi in 0..b {
            for c in 0..cols {
                let p_row = cache.p.index_axis(Axis(0), bi);
                let p_row = p_row.row(c);
                // dL/dp from the quantized output: <grad_out, centroid_m> ...
                for (mi, gp) in grad_p.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for k in 0..l {
                        acc += grad_quantized[(bi, k, c)] * self.codebook.centroids[(mi, k)];
                    }
                    // ... plus the usage path: q_m = mean of p_m over the batch.
                    if let Some(gq) = grad_usage {
                        acc += gq[mi] / n;
                    }
                    *gp = acc;
                }
                // centroid gradient from the convex combination
                for mi in 0..m {
                    let pm = p_row[mi];
                    if pm != 0.0 {
                        for k in 0..l {
                            self.grad_centroids[(mi, k)] += pm * grad_quantized[(bi, k, c)];
                        }
                    }
                }
                // softmax jacobian: u = -alpha d, grad_u = p (.) (grad_p - <grad_p, p>)
                let dot: f64 = grad_p.iter().zip(p_row.iter()).map(|(g, p)| g * p).sum();
                for mi in 0..m {
                    let grad_u = p_row[mi] * (grad_p[mi] - dot);
                    let grad_d = -cache.alpha * grad_u;
                    if grad_d == 0.0 {
                        continue;
                    }
                    let dist = cache.d[(bi, c, mi)];
                    if dist < 1e-12 {
                        continue; // direction undefined exactly at a centroid
                    }
                    for k in 0..l {
                        let dir = (cache.codes[(bi, k, c)] - self.codebook.centroids[(mi, k)]) / dist;
                        grad_codes[(bi, k, c)] += grad_d * dir;
                        self.grad_centroids[(mi, k)] -= grad_d * dir;
                    }
                }
            }
        }
        grad_codes
    }

    /// Nearest-centroid index for every column; ties go to the lowest index.
    pub fn hard_indices(&self, codes: &Array3<f64>) -> Array2<usize> {
        let (b, l, cols) = codes.dim();
        assert_eq!(l, self.codebook.dim());
        let mut out = Array2::zeros((b, cols));
        let mut y = vec![0.0; l];
        for bi in 0..b {
            for c in 0..cols {
                for (k, v) in y.iter_mut().enumerate() {
                    *v = codes[(bi, k, c)];
                }
                let (idx, _) = hard_quantize(&y, &self.codebook).expect("finite codes");
                out[(bi, c)] = idx;
            }
        }
        out
    }

    /// Centroid lookup: indices (B, P) back to a (B, L, P) code map.
    pub fn lookup(&self, indices: &Array2<usize>) -> Array3<f64> {
        let (b, cols) = indices.dim();
        let l = self.codebook.dim();
        let mut out = Array3::zeros((b, l, cols));
        for bi in 0..b {
            for c in 0..cols {
                let row = self.codebook.centroids.row(indices[(bi, c)]);
                for k in 0..l {
                    out[(bi, k, c)] = row[k];
                }
            }
        }
        out
    }
}

impl HasParams for VqLayer {
    fn visit_params(&mut self, visitor: &mut dyn ParamVisitor) {
        visitor.visit(
            &format!("{}.centroids", self.name),
            self.codebook.centroids.view_mut().into_dyn(),
            self.grad_centroids.view_mut().into_dyn(),
        );
    }
}

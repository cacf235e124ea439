//! Three-stage training.
//!
//! Stage 1 learns to denoise with codes passed through unquantized. When
//! validation loss plateaus, centroids are initialized by k-means over
//! encoder outputs and stage 2 turns on soft-to-hard quantization with an
//! annealed softmax scale. Stage 3 adds the entropy-control terms: a squared
//! error between the target total entropy and the sum of per-source
//! entropies, and a squared error on the speech/noise entropy ratio.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsp::{self, DspError, FrameSpec};
use crate::manifest::{Manifest, ManifestRow, Split};
use crate::model::{CodecModel, ModelConfig, ModelError, ModelKind};
use crate::nn::{Adam, HasParams, ParamVisitor};
use crate::quantizer::{
    entropy_grad_bits, estimate_entropy, AlphaSchedule, Codebook, QuantizerError,
    UsageHistogram, VqLayer,
};
use crate::wav::{self, WavError};

#[derive(Error, Debug)]
pub enum TrainingError {
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("quantizer error: {0}")]
    Quantizer(#[from] QuantizerError),
    #[error("dsp error: {0}")]
    Dsp(#[from] DspError),
    #[error("wav error: {0}")]
    Wav(#[from] WavError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest has no {0} rows")]
    EmptySplit(&'static str),
    #[error("{path}: sample rate {got} Hz, expected {expected} Hz")]
    SampleRateMismatch {
        path: String,
        got: u32,
        expected: u32,
    },
    #[error("non-finite loss at epoch {epoch} (stage {stage})")]
    NonFiniteLoss { epoch: usize, stage: u8 },
    #[error("stage 3 loss requires usage histograms")]
    MissingHistograms,
    #[error("invalid loss config: {0}")]
    BadLossConfig(String),
}

/// Weights and targets of the training loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub lambda_mse: f64,
    pub lambda_ent_total: f64,
    pub lambda_ratio: f64,
    /// Target total entropy over all sources, bits per code vector.
    pub xi_total_bits: f64,
    /// Target speech/noise entropy ratio.
    pub psi_ratio: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_mse: 1.0,
            lambda_ent_total: 1.0 / 5.0,
            lambda_ratio: 1.0 / 60.0,
            xi_total_bits: 2.0,
            psi_ratio: 3.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.lambda_mse < 0.0 || self.lambda_ent_total < 0.0 || self.lambda_ratio < 0.0 {
            return Err(TrainingError::BadLossConfig("negative loss weight".into()));
        }
        if self.xi_total_bits <= 0.0 {
            return Err(TrainingError::BadLossConfig(format!(
                "target total entropy {} must be positive",
                self.xi_total_bits
            )));
        }
        if self.psi_ratio <= 0.0 {
            return Err(TrainingError::BadLossConfig(format!(
                "target entropy ratio {} must be positive",
                self.psi_ratio
            )));
        }
        Ok(())
    }
}

/// Denominator floor for the entropy-ratio term, in bits.
pub const RATIO_DENOM_FLOOR: f64 = 1e-3;

/// Training stages, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// Codes pass through unquantized; the model learns separation.
    Denoising,
    /// Soft-to-hard quantization active, alpha annealing.
    Quantization,
    /// Entropy-control loss terms active.
    EntropyControl,
}

impl Stage {
    pub fn index(self) -> u8 {
        match self {
            Stage::Denoising => 1,
            Stage::Quantization => 2,
            Stage::EntropyControl => 3,
        }
    }

    pub fn from_index(i: u8) -> Option<Stage> {
        match i {
            1 => Some(Stage::Denoising),
            2 => Some(Stage::Quantization),
            3 => Some(Stage::EntropyControl),
            _ => None,
        }
    }

    fn next(self) -> Option<Stage> {
        match self {
            Stage::Denoising => Some(Stage::Quantization),
            Stage::Quantization => Some(Stage::EntropyControl),
            Stage::EntropyControl => None,
        }
    }
}

/// Patience thresholds: a stage advances after `stage_patience` consecutive
/// epochs without validation improvement; training stops after
/// `stop_patience` such epochs in the final stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EarlyStopPolicy {
    pub stage_patience: usize,
    pub stop_patience: usize,
}

impl Default for EarlyStopPolicy {
    fn default() -> Self {
        Self {
            stage_patience: 3,
            stop_patience: 10,
        }
    }
}

/// Where the stage machine stands after an epoch's validation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageDecision {
    Continue,
    /// Move to `Stage::next()`.
    Advance,
    Stop,
}

/// Stage progress: epochs spent, best validation loss within the stage, and
/// epochs since it last improved. Stages only move forward.
#[derive(Debug, Clone)]
pub struct StageState {
    pub stage: Stage,
    pub epochs_in_stage: usize,
    pub best_validation_loss: f64,
    pub epochs_since_improvement: usize,
}

impl Default for StageState {
    fn default() -> Self {
        Self {
            stage: Stage::Denoising,
            epochs_in_stage: 0,
            best_validation_loss: f64::INFINITY,
            epochs_since_improvement: 0,
        }
    }
}

impl StageState {
    /// Record one epoch's validation loss and decide whether to continue,
    /// advance the stage, or stop. `epoch_cap` (if any) forces the decision
    /// once the stage has run that many epochs. Stage 1 never advances
    /// before `min_first_stage_epochs`. Returns the decision along with
    /// whether this epoch improved the within-stage best.
    pub fn observe(
        &mut self,
        validation_loss: f64,
        policy: &EarlyStopPolicy,
        min_first_stage_epochs: usize,
        epoch_cap: Option<usize>,
    ) -> (StageDecision, bool) {
        self.epochs_in_stage += 1;
        let improved = validation_loss < self.best_validation_loss;
        if improved {
            self.best_validation_loss = validation_loss;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }

        let capped = epoch_cap.is_some_and(|cap| self.epochs_in_stage >= cap);
        let decision = match self.stage {
            Stage::EntropyControl => {
                if self.epochs_since_improvement >= policy.stop_patience || capped {
                    StageDecision::Stop
                } else {
                    StageDecision::Continue
                }
            }
            Stage::Denoising | Stage::Quantization => {
                let min_epochs = if self.stage == Stage::Denoising {
                    min_first_stage_epochs
                } else {
                    0
                };
                let triggered = self.epochs_since_improvement >= policy.stage_patience
                    && self.epochs_in_stage >= min_epochs;
                if triggered || capped {
                    StageDecision::Advance
                } else {
                    StageDecision::Continue
                }
            }
        };
        if decision == StageDecision::Advance {
            self.stage = self.stage.next().expect("final stage never advances");
            self.epochs_in_stage = 0;
            self.best_validation_loss = f64::INFINITY;
            self.epochs_since_improvement = 0;
        }
        (decision, improved)
    }
}

/// Mean squared error over every element of same-shaped arrays.
pub fn mse(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "mse over mismatched shapes");
    let n = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Entropy penalty of the source-aware loss: total-entropy term plus
/// ratio term, with the ratio denominator floored at [`RATIO_DENOM_FLOOR`].
pub fn entropy_penalty(h_speech: f64, h_noise: f64, cfg: &LossConfig) -> f64 {
    let total = cfg.lambda_ent_total * (cfg.xi_total_bits - h_speech - h_noise).powi(2);
    let denom = h_noise.max(RATIO_DENOM_FLOOR);
    let ratio = cfg.lambda_ratio * (cfg.psi_ratio - h_speech / denom).powi(2);
    total + ratio
}

/// Partial derivatives of [`entropy_penalty`] with respect to the two
/// entropies. The floor zeroes the ratio path through h_noise when active.
fn entropy_penalty_grads(h_speech: f64, h_noise: f64, cfg: &LossConfig) -> (f64, f64) {
    let diff = cfg.xi_total_bits - h_speech - h_noise;
    let denom = h_noise.max(RATIO_DENOM_FLOOR);
    let ratio_err = cfg.psi_ratio - h_speech / denom;
    let mut g1 = -2.0 * cfg.lambda_ent_total * diff - 2.0 * cfg.lambda_ratio * ratio_err / denom;
    let mut g2 = -2.0 * cfg.lambda_ent_total * diff;
    if h_noise > RATIO_DENOM_FLOOR {
        g2 += 2.0 * cfg.lambda_ratio * ratio_err * h_speech / (denom * denom);
    }
    // keep -0.0 out of comparisons
    if g1 == 0.0 {
        g1 = 0.0;
    }
    if g2 == 0.0 {
        g2 = 0.0;
    }
    (g1, g2)
}

/// The full source-aware training loss on one batch of frames: MSE on the
/// speech reconstruction and on the mixture reconstruction, plus (in the
/// final stage) the entropy-control terms from the two usage histograms.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    speech: &Array3<f64>,
    speech_hat: &Array3<f64>,
    mixture: &Array3<f64>,
    mixture_hat: &Array3<f64>,
    hist_speech: Option<&UsageHistogram>,
    hist_noise: Option<&UsageHistogram>,
    cfg: &LossConfig,
    stage: Stage,
) -> Result<f64, TrainingError> {
    let mut loss = cfg.lambda_mse * (mse(speech, speech_hat) + mse(mixture, mixture_hat));
    if stage == Stage::EntropyControl {
        let (h1, h2) = match (hist_speech, hist_noise) {
            (Some(a), Some(b)) => (estimate_entropy(a), estimate_entropy(b)),
            _ => return Err(TrainingError::MissingHistograms),
        };
        loss += entropy_penalty(h1, h2, cfg);
    }
    Ok(loss)
}

/// Loss components of one forward pass.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub mse_speech: f64,
    pub mse_mixture: f64,
    /// Per-stream batch entropies, empty before quantization starts.
    pub entropies: Vec<f64>,
}

/// One forward pass of the stage-appropriate loss over a batch, with the
/// matching backward pass when `compute_grads` is set. Parameter gradients
/// accumulate into the model's buffers.
pub fn forward_backward(
    model: &mut CodecModel,
    mixture: &Array3<f64>,
    speech: &Array3<f64>,
    cfg: &LossConfig,
    stage: Stage,
    alpha: f64,
    compute_grads: bool,
) -> Result<StepOutput, TrainingError> {
    let k = model.streams();
    let l = model.cfg.vq_dim;
    let quantizing = stage != Stage::Denoising;
    if quantizing {
        assert_eq!(model.vq.len(), k, "quantizers must exist from stage 2 on");
    }

    let code_map = model.encode(mixture, compute_grads);
    let blocks: Vec<Array3<f64>> = (0..k)
        .map(|ki| code_map.slice(ndarray::s![.., ki * l..(ki + 1) * l, ..]).to_owned())
        .collect();

    let mut usages: Vec<UsageHistogram> = Vec::new();
    let quantized: Vec<Array3<f64>> = if quantizing {
        let mut out = Vec::with_capacity(k);
        for (ki, block) in blocks.iter().enumerate() {
            let (q, usage) = model.vq[ki].forward_train(block, alpha, compute_grads);
            out.push(q);
            usages.push(usage);
        }
        out
    } else {
        blocks.clone()
    };

    let (sources, mixture_hat) = model.decode(&quantized, compute_grads);

    let source_aware = model.kind == ModelKind::Sanac;
    let mse_speech = if source_aware { mse(&sources[0], speech) } else { 0.0 };
    let mse_mixture = mse(&mixture_hat, mixture);
    let mut loss = cfg.lambda_mse * (mse_speech + mse_mixture);

    let entropies: Vec<f64> = usages.iter().map(estimate_entropy).collect();
    let mut usage_grads: Vec<Option<Array1<f64>>> = vec![None; k];
    if stage == Stage::EntropyControl {
        if source_aware {
            let (h1, h2) = (entropies[0], entropies[1]);
            loss += entropy_penalty(h1, h2, cfg);
            if compute_grads {
                let (g1, g2) = entropy_penalty_grads(h1, h2, cfg);
                for (ki, g) in [(0usize, g1), (1usize, g2)] {
                    let dh = entropy_grad_bits(usages[ki].q.as_slice().expect("contiguous"));
                    usage_grads[ki] = Some(Array1::from_iter(dh.into_iter().map(|v| v * g)));
                }
            }
        } else {
            // one code stream: only the total-entropy target applies
            let h = entropies[0];
            loss += cfg.lambda_ent_total * (cfg.xi_total_bits - h).powi(2);
            if compute_grads {
                let g = -2.0 * cfg.lambda_ent_total * (cfg.xi_total_bits - h);
                let dh = entropy_grad_bits(usages[0].q.as_slice().expect("contiguous"));
                usage_grads[0] = Some(Array1::from_iter(dh.into_iter().map(|v| v * g)));
            }
        }
    }

    if compute_grads {
        let n = mixture_hat.len() as f64;
        let grad_mixture = (&mixture_hat - mixture) * (2.0 * cfg.lambda_mse / n);
        let mut grad_sources: Vec<Array3<f64>> = (0..k).map(|_| grad_mixture.clone()).collect();
        if source_aware {
            let ns = sources[0].len() as f64;
            grad_sources[0] += &((&sources[0] - speech) * (2.0 * cfg.lambda_mse / ns));
        }
        let grad_quantized = model.decode_backward(&grad_sources);
        let grad_blocks: Vec<Array3<f64>> = if quantizing {
            grad_quantized
                .iter()
                .enumerate()
                .map(|(ki, g)| model.vq[ki].backward(g, usage_grads[ki].as_ref()))
                .collect()
        } else {
            grad_quantized
        };
        let mut grad_code_map = Array3::zeros(code_map.raw_dim());
        for (ki, g) in grad_blocks.iter().enumerate() {
            grad_code_map
                .slice_mut(ndarray::s![.., ki * l..(ki + 1) * l, ..])
                .assign(g);
        }
        model.encode_backward(&grad_code_map);
    }

    Ok(StepOutput {
        loss,
        mse_speech,
        mse_mixture,
        entropies,
    })
}

/// Lloyd's k-means with k-means++ seeding. Points are rows of `points`.
/// Degenerate inputs (fewer distinct points than clusters) fill the
/// remaining centroids with jittered copies.
pub fn kmeans(
    points: &Array2<f64>,
    m: usize,
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let (n, dim) = points.dim();
    assert!(n > 0, "k-means needs at least one point");

    // k-means++ seeding
    let mut centroids: Vec<Array1<f64>> = Vec::with_capacity(m);
    let first = rng.random_range(0..n);
    centroids.push(points.row(first).to_owned());
    let mut dist2: Vec<f64> = (0..n)
        .map(|i| {
            let d = &points.row(i) - &centroids[0];
            d.dot(&d)
        })
        .collect();
    while centroids.len() < m {
        let total: f64 = dist2.iter().sum();
        if total <= 0.0 {
            break; // every remaining point coincides with a chosen centroid
        }
        let mut draw = rng.random_range(0.0..total);
        let mut chosen = n - 1;
        for (i, &d) in dist2.iter().enumerate() {
            if draw < d {
                chosen = i;
                break;
            }
            draw -= d;
        }
        let c = points.row(chosen).to_owned();
        for i in 0..n {
            let d = &points.row(i) - &c;
            dist2[i] = dist2[i].min(d.dot(&d));
        }
        centroids.push(c);
    }
    // fill out degenerate seedings with jittered copies
    let seeded = centroids.len();
    while centroids.len() < m {
        let base = centroids[centroids.len() % seeded].clone();
        let jitter = Array1::from_iter((0..dim).map(|_| rng.random_range(-1e-6..1e-6)));
        centroids.push(base + jitter);
    }

    let mut centroid_mat = Array2::zeros((m, dim));
    for (i, c) in centroids.iter().enumerate() {
        centroid_mat.row_mut(i).assign(c);
    }

    // Lloyd iterations; an empty cluster keeps its previous centroid.
    let mut assignment = vec![0usize; n];
    for _ in 0..iterations {
        for (i, a) in assignment.iter_mut().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..m {
                let d = &points.row(i) - &centroid_mat.row(c);
                let d = d.dot(&d);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            *a = best;
        }
        let mut sums = Array2::<f64>::zeros((m, dim));
        let mut counts = vec![0usize; m];
        for (i, &a) in assignment.iter().enumerate() {
            let mut row = sums.row_mut(a);
            row += &points.row(i);
            counts[a] += 1;
        }
        for c in 0..m {
            if counts[c] > 0 {
                let mean = sums.row(c).mapv(|v| v / counts[c] as f64);
                centroid_mat.row_mut(c).assign(&mean);
            }
        }
    }
    centroid_mat
}

/// Sum of squared distances from every point to its nearest centroid.
pub fn kmeans_inertia(points: &Array2<f64>, centroids: &Array2<f64>) -> f64 {
    points
        .outer_iter()
        .map(|p| {
            centroids
                .outer_iter()
                .map(|c| {
                    let d = &p - &c;
                    d.dot(&d)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Run the stage-1 encoder over sample frames and cluster each source's
/// L-dimensional code columns into one codebook per stream.
pub fn init_codebooks(
    model: &mut CodecModel,
    sample_frames: &Array3<f64>,
    codebook_size: usize,
    kmeans_iterations: usize,
    seed: u64,
) -> Result<Vec<Codebook>, TrainingError> {
    let k = model.streams();
    let l = model.cfg.vq_dim;
    let code_map = model.encode(sample_frames, false);
    let (b, _, p) = code_map.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut books = Vec::with_capacity(k);
    for ki in 0..k {
        let mut points = Array2::zeros((b * p, l));
        for bi in 0..b {
            for c in 0..p {
                for d in 0..l {
                    points[(bi * p + c, d)] = code_map[(bi, ki * l + d, c)];
                }
            }
        }
        let centroids = kmeans(&points, codebook_size, kmeans_iterations, &mut rng);
        books.push(Codebook::new(centroids, ki)?);
    }
    Ok(books)
}

/// Frames of one utterance: the mixture and its aligned clean sources.
pub struct UtteranceFrames {
    pub mixture: Array3<f64>,
    pub speech: Array3<f64>,
    pub noise: Array3<f64>,
    pub original_length: usize,
}

impl UtteranceFrames {
    pub fn num_frames(&self) -> usize {
        self.mixture.dim().0
    }
}

fn frames_to_array(seq: &dsp::FrameSequence) -> Array3<f64> {
    let n = seq.spec.frame_size;
    let mut out = Array3::zeros((seq.len(), 1, n));
    for (i, f) in seq.frames().iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .row_mut(0)
            .assign(&Array1::from_vec(f.clone()));
    }
    out
}

fn resolve(base: Option<&Path>, path: &Path) -> PathBuf {
    match base {
        Some(b) if path.is_relative() => b.join(path),
        _ => path.to_path_buf(),
    }
}

/// Load one manifest row: read both wavs, mix at the row's SNR, and segment
/// mixture/speech/noise with identical framing.
pub fn load_utterance(
    row: &ManifestRow,
    base: Option<&Path>,
    spec: &FrameSpec,
    expected_rate: u32,
) -> Result<UtteranceFrames, TrainingError> {
    let speech = wav::read_wav(&resolve(base, &row.speech))?;
    let noise = wav::read_wav(&resolve(base, &row.noise))?;
    for (sig, path) in [(&speech, &row.speech), (&noise, &row.noise)] {
        if sig.sample_rate != expected_rate {
            return Err(TrainingError::SampleRateMismatch {
                path: path.display().to_string(),
                got: sig.sample_rate,
                expected: expected_rate,
            });
        }
    }
    let (mixture, scaled_noise) = dsp::mix_at_snr(&speech, &noise, row.snr_db)?;
    let mix_seq = dsp::segment(&mixture, spec)?;
    let speech_seq = dsp::segment(&speech, spec)?;
    let noise_seq = dsp::segment(&scaled_noise, spec)?;
    Ok(UtteranceFrames {
        original_length: mixture.len(),
        mixture: frames_to_array(&mix_seq),
        speech: frames_to_array(&speech_seq),
        noise: frames_to_array(&noise_seq),
    })
}

/// Everything `run_training` needs besides the manifest.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub alpha: AlphaSchedule,
    pub policy: EarlyStopPolicy,
    pub frame: FrameSpec,
    pub sample_rate: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub codebook_size: usize,
    pub kmeans_iterations: usize,
    /// How many training frames feed the k-means centroid initialization.
    pub centroid_sample_frames: usize,
    /// Optional per-stage epoch caps (desk-scale runs); `None` leaves the
    /// patience triggers fully in charge.
    pub max_epochs_per_stage: [Option<usize>; 3],
    /// Stage 1 runs at least this many epochs before it may advance.
    pub min_first_stage_epochs: usize,
    /// Append one JSON record per epoch here, when set.
    pub log_path: Option<PathBuf>,
    /// Per-epoch progress lines on stderr.
    pub verbose: bool,
}

impl TrainOptions {
    pub fn new(kind: ModelKind, model: ModelConfig) -> Self {
        Self {
            kind,
            model,
            loss: LossConfig::default(),
            alpha: AlphaSchedule::default(),
            policy: EarlyStopPolicy::default(),
            frame: FrameSpec::default_16k(),
            sample_rate: 16000,
            learning_rate: 1e-4,
            batch_size: 64,
            seed: 0,
            codebook_size: 128,
            kmeans_iterations: 20,
            centroid_sample_frames: 1024,
            max_epochs_per_stage: [None, None, None],
            min_first_stage_epochs: 3,
            log_path: None,
            verbose: false,
        }
    }
}

/// One epoch's log record.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub entropies: Vec<f64>,
    pub alpha: f64,
}

/// Output of [`run_training`]: the trained model (best final-stage
/// validation parameters), the annealing state it ended at, and the
/// per-epoch history.
pub struct TrainingResult {
    pub model: CodecModel,
    pub alpha: f64,
    pub stage: Stage,
    pub history: Vec<EpochRecord>,
}

struct BatchIter<'a> {
    utterances: &'a [UtteranceFrames],
    order: Vec<(usize, usize)>,
    batch_size: usize,
    next: usize,
    frame_size: usize,
}

impl<'a> BatchIter<'a> {
    fn new(
        utterances: &'a [UtteranceFrames],
        batch_size: usize,
        frame_size: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Self {
        let mut utt_order: Vec<usize> = (0..utterances.len()).collect();
        if let Some(rng) = rng {
            utt_order.shuffle(rng);
        }
        let mut order = Vec::new();
        for &u in &utt_order {
            for f in 0..utterances[u].num_frames() {
                order.push((u, f));
            }
        }
        Self {
            utterances,
            order,
            batch_size,
            next: 0,
            frame_size,
        }
    }
}

impl Iterator for BatchIter<'_> {
    type Item = (Array3<f64>, Array3<f64>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let b = end - self.next;
        let mut mixture = Array3::zeros((b, 1, self.frame_size));
        let mut speech = Array3::zeros((b, 1, self.frame_size));
        for (i, &(u, f)) in self.order[self.next..end].iter().enumerate() {
            mixture
                .index_axis_mut(Axis(0), i)
                .assign(&self.utterances[u].mixture.index_axis(Axis(0), f));
            speech
                .index_axis_mut(Axis(0), i)
                .assign(&self.utterances[u].speech.index_axis(Axis(0), f));
        }
        self.next = end;
        Some((mixture, speech))
    }
}

fn snapshot_params(model: &mut CodecModel) -> HashMap<String, ndarray::ArrayD<f64>> {
    struct Save(HashMap<String, ndarray::ArrayD<f64>>);
    impl ParamVisitor for Save {
        fn visit(
            &mut self,
            name: &str,
            value: ndarray::ArrayViewMutD<'_, f64>,
            _: ndarray::ArrayViewMutD<'_, f64>,
        ) {
            self.0.insert(name.to_string(), value.to_owned());
        }
    }
    let mut s = Save(HashMap::new());
    model.visit_params(&mut s);
    s.0
}

fn restore_params(model: &mut CodecModel, saved: &HashMap<String, ndarray::ArrayD<f64>>) {
    struct Load<'a>(&'a HashMap<String, ndarray::ArrayD<f64>>);
    impl ParamVisitor for Load<'_> {
        fn visit(
            &mut self,
            name: &str,
            mut value: ndarray::ArrayViewMutD<'_, f64>,
            _: ndarray::ArrayViewMutD<'_, f64>,
        ) {
            let saved = self.0.get(name).expect("snapshot covers every parameter");
            value.assign(saved);
        }
    }
    model.visit_params(&mut Load(saved));
}

/// Deterministic sample of training frames for centroid initialization.
fn centroid_sample(
    utterances: &[UtteranceFrames],
    count: usize,
    frame_size: usize,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let mut all: Vec<(usize, usize)> = Vec::new();
    for (u, utt) in utterances.iter().enumerate() {
        for f in 0..utt.num_frames() {
            all.push((u, f));
        }
    }
    all.shuffle(rng);
    all.truncate(count.max(1).min(all.len()));
    let mut out = Array3::zeros((all.len(), 1, frame_size));
    for (i, &(u, f)) in all.iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .assign(&utterances[u].mixture.index_axis(Axis(0), f));
    }
    out
}

/// Train a codec through the three stages. Fully deterministic for a fixed
/// seed: data order, initialization, and centroid seeding all derive from
/// `opts.seed`.
pub fn run_training(
    manifest: &Manifest,
    manifest_base: Option<&Path>,
    opts: &TrainOptions,
) -> Result<TrainingResult, TrainingError> {
    opts.loss.validate()?;
    opts.alpha.validate()?;
    let train_rows = manifest.split(Split::Train);
    let val_rows = manifest.split(Split::Val);
    if train_rows.is_empty() {
        return Err(TrainingError::EmptySplit("train"));
    }
    if val_rows.is_empty() {
        return Err(TrainingError::EmptySplit("val"));
    }

    let load = |rows: &[&ManifestRow]| -> Result<Vec<UtteranceFrames>, TrainingError> {
        rows.iter()
            .map(|r| load_utterance(r, manifest_base, &opts.frame, opts.sample_rate))
            .collect()
    };
    let train_utts = load(&train_rows)?;
    let val_utts = load(&val_rows)?;

    let mut model = CodecModel::new(opts.kind, opts.model, opts.seed)?;
    let mut adam = Adam::new(opts.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = StageState::default();
    let mut history = Vec::new();
    let mut quant_epochs: Option<usize> = None;
    let mut best_final: Option<(f64, HashMap<String, ndarray::ArrayD<f64>>, f64)> = None;

    let mut log_file = match &opts.log_path {
        Some(p) => Some(std::fs::File::create(p)?),
        None => None,
    };

    for epoch in 0.. {
        let stage = state.stage;
        let alpha = match quant_epochs {
            Some(e) => opts.alpha.alpha_at(e),
            None => opts.alpha.alpha_start,
        };

        // training pass
        let mut train_loss = 0.0;
        let mut train_frames = 0usize;
        for (mix, speech) in BatchIter::new(&train_utts, opts.batch_size, opts.model.frame_size, Some(&mut rng))
        {
            let b = mix.dim().0;
            model.zero_grads();
            let out = forward_backward(&mut model, &mix, &speech, &opts.loss, stage, alpha, true)?;
            if !out.loss.is_finite() {
                return Err(TrainingError::NonFiniteLoss {
                    epoch,
                    stage: stage.index(),
                });
            }
            adam.step(&mut model);
            train_loss += out.loss * b as f64;
            train_frames += b;
        }
        train_loss /= train_frames as f64;

        // validation pass
        let mut val_loss = 0.0;
        let mut val_frames = 0usize;
        let mut val_entropy_acc: Vec<f64> = Vec::new();
        let mut val_batches = 0usize;
        for (mix, speech) in BatchIter::new(&val_utts, opts.batch_size, opts.model.frame_size, None) {
            let b = mix.dim().0;
            let out = forward_backward(&mut model, &mix, &speech, &opts.loss, stage, alpha, false)?;
            if !out.loss.is_finite() {
                return Err(TrainingError::NonFiniteLoss {
                    epoch,
                    stage: stage.index(),
                });
            }
            val_loss += out.loss * b as f64;
            val_frames += b;
            if !out.entropies.is_empty() {
                if val_entropy_acc.is_empty() {
                    val_entropy_acc = vec![0.0; out.entropies.len()];
                }
                for (a, h) in val_entropy_acc.iter_mut().zip(&out.entropies) {
                    *a += h;
                }
                val_batches += 1;
            }
        }
        val_loss /= val_frames as f64;
        let entropies: Vec<f64> = if val_batches > 0 {
            val_entropy_acc.iter().map(|a| a / val_batches as f64).collect()
        } else {
            Vec::new()
        };

        let record = EpochRecord {
            epoch,
            stage: stage.index(),
            train_loss,
            validation_loss: val_loss,
            entropies,
            alpha,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record).expect("serializable"))?;
        }
        if opts.verbose {
            eprintln!(
                "epoch {:3} stage {} train {:.6} val {:.6} H {:?} alpha {:.1}",
                record.epoch, record.stage, record.train_loss, record.validation_loss,
                record.entropies, record.alpha
            );
        }
        history.push(record);

        let cap = opts.max_epochs_per_stage[(stage.index() - 1) as usize];
        let (decision, improved) =
            state.observe(val_loss, &opts.policy, opts.min_first_stage_epochs, cap);

        if stage == Stage::EntropyControl
            && improved
            && best_final.as_ref().is_none_or(|(best, _, _)| val_loss < *best)
        {
            best_final = Some((val_loss, snapshot_params(&mut model), alpha));
        }

        if quant_epochs.is_some() {
            quant_epochs = Some(quant_epochs.unwrap() + 1);
        }

        match decision {
            StageDecision::Continue => {}
            StageDecision::Advance => {
                if state.stage == Stage::Quantization {
                    let sample = centroid_sample(
                        &train_utts,
                        opts.centroid_sample_frames,
                        opts.model.frame_size,
                        &mut rng,
                    );
                    let books = init_codebooks(
                        &mut model,
                        &sample,
                        opts.codebook_size,
                        opts.kmeans_iterations,
                        opts.seed ^ 0x5eed,
                    )?;
                    model.vq = books
                        .into_iter()
                        .enumerate()
                        .map(|(ki, cb)| VqLayer::new(format!("vq.stream{ki}"), cb))
                        .collect();
                    quant_epochs = Some(0);
                }
            }
            StageDecision::Stop => break,
        }
    }

    let final_alpha = match (&best_final, quant_epochs) {
        (Some((_, _, a)), _) => *a,
        (None, Some(e)) => opts.alpha.alpha_at(e),
        (None, None) => opts.alpha.alpha_start,
    };
    if let Some((_, params, _)) = &best_final {
        restore_params(&mut model, params);
    }
    Ok(TrainingResult {
        model,
        alpha: final_alpha,
        stage: state.stage,
        history,
    })
}

/// Hard-count entropy of a trained codec over a set of utterances: every
/// frame is encoded and hard-quantized; per-stream index histograms give
/// the entropies, and a Huffman code built from those histograms gives the
/// exact payload size in bits (excluding container overhead).
pub struct CorpusEntropy {
    pub entropies: Vec<f64>,
    pub histograms: Vec<UsageHistogram>,
    pub payload_bits: u64,
    pub code_slots: u64,
}

pub fn measure_corpus_entropy(
    model: &mut CodecModel,
    utterances: &[UtteranceFrames],
) -> Result<CorpusEntropy, TrainingError> {
    let k = model.streams();
    let l = model.cfg.vq_dim;
    assert_eq!(model.vq.len(), k, "entropy measurement needs trained codebooks");
    let m = model.vq[0].codebook.num_centroids();
    let mut indices: Vec<Vec<usize>> = vec![Vec::new(); k];
    for utt in utterances {
        let codes = model.encode(&utt.mixture, false);
        for ki in 0..k {
            let block = codes
                .slice(ndarray::s![.., ki * l..(ki + 1) * l, ..])
                .to_owned();
            let idx = model.vq[ki].hard_indices(&block);
            indices[ki].extend(idx.iter().copied());
        }
    }
    let mut entropies = Vec::with_capacity(k);
    let mut histograms = Vec::with_capacity(k);
    let mut payload_bits = 0u64;
    let mut code_slots = 0u64;
    for ki in 0..k {
        let hist = crate::quantizer::hard_usage(&indices[ki], m)?;
        entropies.push(estimate_entropy(&hist));
        let table = crate::bitstream::build_huffman(&hist)
            .expect("histogram from hard counts is non-empty");
        for &idx in &indices[ki] {
            payload_bits += table.lengths[idx] as u64;
        }
        code_slots += indices[ki].len() as u64;
        histograms.push(hist);
    }
    // both streams fill the same slots; count column slots once per stream pair
    code_slots /= k as u64;
    Ok(CorpusEntropy {
        entropies,
        histograms,
        payload_bits,
        code_slots,
    })
}

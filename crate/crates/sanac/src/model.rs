//! Codec architectures.
//!
//! The source-aware codec encodes a mixture frame into a (K*L x P) code map
//! whose K contiguous L-channel blocks belong to one source each, quantizes
//! each block with its own codebook, and decodes every source with shared
//! decoder weights after a joint transformation block. The baseline variant
//! is the same trunk with a single L-channel code map and a single decode
//! pass that reconstructs only the mixture.
//!
//! Shared decoder-side layers process all sources in one call by folding
//! the source axis into the batch axis, so parameter gradients accumulate
//! across sources without duplicated weights.

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{
    subpixel_backward, subpixel_forward, Bottleneck, Conv1d, HasParams, LeakyRelu, ParamVisitor,
};
use crate::quantizer::VqLayer;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("frame has {got} samples, expected {expected}")]
    BadFrameLength { got: usize, expected: usize },
    #[error("code map has {got} rows, expected {expected}")]
    BadCodeRows { got: usize, expected: usize },
    #[error("expected {expected} source codes, got {got}")]
    WrongStreamCount { got: usize, expected: usize },
    #[error("source code has {got} rows, expected vq_dim {expected}")]
    BadSourceRows { got: usize, expected: usize },
    #[error("channel count {0} is odd; sub-pixel upsampling interlaces channel pairs")]
    OddChannels(usize),
}

/// Which codec variant a model implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Source-aware: K code blocks, K decoded sources plus their sum.
    Sanac,
    /// One code block, one decode pass, mixture only.
    Baseline,
}

/// Architecture dimensions. The defaults are the full-size codec:
/// 512-sample frames, 6x256 code maps per source, a 30-channel trunk with
/// 10-channel bottlenecks and a 60-channel transformation block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub frame_size: usize,
    pub code_length: usize,
    pub vq_dim: usize,
    pub num_sources: usize,
    pub trunk_channels: usize,
    pub bottleneck_channels: usize,
    pub transform_channels: usize,
    pub conv_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_size: 512,
            code_length: 256,
            vq_dim: 6,
            num_sources: 2,
            trunk_channels: 30,
            bottleneck_channels: 10,
            transform_channels: 60,
            conv_kernel: 9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.frame_size == 0 || self.frame_size % 2 != 0 {
            return Err(ModelError::BadConfig(format!(
                "frame_size {} must be positive and even",
                self.frame_size
            )));
        }
        if self.code_length != self.frame_size / 2 {
            return Err(ModelError::BadConfig(format!(
                "code_length {} must be frame_size/2 = {}",
                self.code_length,
                self.frame_size / 2
            )));
        }
        if self.num_sources < 2 {
            return Err(ModelError::BadConfig(format!(
                "num_sources {} must be at least 2",
                self.num_sources
            )));
        }
        if self.vq_dim == 0 || self.trunk_channels == 0 || self.bottleneck_channels == 0 {
            return Err(ModelError::BadConfig("channel counts must be positive".into()));
        }
        if self.transform_channels != self.num_sources * self.trunk_channels {
            return Err(ModelError::BadConfig(format!(
                "transform_channels {} must be num_sources * trunk_channels = {}",
                self.transform_channels,
                self.num_sources * self.trunk_channels
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(ModelError::BadConfig(format!(
                "conv_kernel {} must be odd",
                self.conv_kernel
            )));
        }
        // total code dimension D = K*L*P splits evenly by construction
        Ok(())
    }

    /// Total code dimension D across all sources.
    pub fn total_code_dim(&self) -> usize {
        self.num_sources * self.vq_dim * self.code_length
    }
}

/// Split a (K*L x P) code map into K contiguous (L x P) blocks; block k is
/// channel rows [k*L, (k+1)*L). Concatenating the blocks reproduces the map.
pub fn split_codes(code_map: &Array2<f64>, vq_dim: usize) -> Result<Vec<Array2<f64>>, ModelError> {
    let rows = code_map.nrows();
    if rows == 0 || rows % vq_dim != 0 {
        return Err(ModelError::BadCodeRows {
            got: rows,
            expected: vq_dim,
        });
    }
    Ok((0..rows / vq_dim)
        .map(|k| {
            code_map
                .slice(ndarray::s![k * vq_dim..(k + 1) * vq_dim, ..])
                .to_owned()
        })
        .collect())
}

/// Inverse of [`split_codes`]: stack the source blocks back into one map.
pub fn embed_codes(blocks: &[Array2<f64>]) -> Result<Array2<f64>, ModelError> {
    if blocks.is_empty() {
        return Err(ModelError::WrongStreamCount { got: 0, expected: 1 });
    }
    let l = blocks[0].nrows();
    let p = blocks[0].ncols();
    let mut out = Array2::zeros((blocks.len() * l, p));
    for (k, block) in blocks.iter().enumerate() {
        if block.nrows() != l || block.ncols() != p {
            return Err(ModelError::BadSourceRows {
                got: block.nrows(),
                expected: l,
            });
        }
        out.slice_mut(ndarray::s![k * l..(k + 1) * l, ..]).assign(block);
    }
    Ok(out)
}

/// Sub-pixel upsampling of a single (C x T) map to (C/2 x 2T):
/// out[c, 2t] = in[2c, t], out[c, 2t+1] = in[2c+1, t].
pub fn subpixel_upsample(map: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
    let (c, t) = map.dim();
    if c % 2 != 0 {
        return Err(ModelError::OddChannels(c));
    }
    let x = map
        .to_owned()
        .into_shape_with_order((1, c, t))
        .expect("contiguous");
    let y = subpixel_forward(&x);
    Ok(y.index_axis(Axis(0), 0).to_owned())
}

/// K arrays of (B, C, T) stacked along the batch axis into (K*B, C, T);
/// stream k occupies batch rows [k*B, (k+1)*B).
fn stack_streams(streams: &[Array3<f64>]) -> Array3<f64> {
    let (b, c, t) = streams[0].dim();
    let k = streams.len();
    let mut out = Array3::zeros((k * b, c, t));
    for (ki, s) in streams.iter().enumerate() {
        assert_eq!(s.dim(), (b, c, t));
        out.slice_mut(ndarray::s![ki * b..(ki + 1) * b, .., ..]).assign(s);
    }
    out
}

fn unstack_streams(x: &Array3<f64>, k: usize) -> Vec<Array3<f64>> {
    let (kb, _, _) = x.dim();
    assert!(kb % k == 0);
    let b = kb / k;
    (0..k)
        .map(|ki| x.slice(ndarray::s![ki * b..(ki + 1) * b, .., ..]).to_owned())
        .collect()
}

/// (K*B, C, T) batch-stacked streams to a (B, K*C, T) channel concatenation.
fn streams_to_channels(x: &Array3<f64>, k: usize) -> Array3<f64> {
    let (kb, c, t) = x.dim();
    assert!(kb % k == 0);
    let b = kb / k;
    let mut out = Array3::zeros((b, k * c, t));
    for ki in 0..k {
        for bi in 0..b {
            out.slice_mut(ndarray::s![bi, ki * c..(ki + 1) * c, ..])
                .assign(&x.index_axis(Axis(0), ki * b + bi));
        }
    }
    out
}

/// Inverse of [`streams_to_channels`].
fn channels_to_streams(x: &Array3<f64>, k: usize) -> Array3<f64> {
    let (b, kc, t) = x.dim();
    assert!(kc % k == 0);
    let c = kc / k;
    let mut out = Array3::zeros((k * b, c, t));
    for ki in 0..k {
        for bi in 0..b {
            out.index_axis_mut(Axis(0), ki * b + bi)
                .assign(&x.slice(ndarray::s![bi, ki * c..(ki + 1) * c, ..]));
        }
    }
    out
}

/// Encoder + decoder for either codec variant, with explicit backward
/// passes. Quantizers are attached from training stage 2 onward; before
/// that, `vq` is empty and codes pass through unquantized.
pub struct CodecModel {
    pub kind: ModelKind,
    pub cfg: ModelConfig,
    // encoder: lift -> two bottlenecks -> strided downsample -> bottleneck
    // -> linear channel change to the code map
    lift: Conv1d,
    lift_act: LeakyRelu,
    enc_block0: Bottleneck,
    enc_block1: Bottleneck,
    down: Conv1d,
    down_act: LeakyRelu,
    enc_block2: Bottleneck,
    to_codes: Conv1d,
    // decoder, shared across sources: channel change to 2*trunk at length P,
    // sub-pixel upsample to trunk x N, joint transformation over the
    // channel-concatenated sources, then bottlenecks and a linear projection
    expand: Conv1d,
    expand_act: LeakyRelu,
    transform0: Bottleneck,
    transform1: Bottleneck,
    dec_block0: Bottleneck,
    dec_block1: Bottleneck,
    project: Conv1d,
    /// One quantizer per code stream, present from stage 2 on.
    pub vq: Vec<VqLayer>,
}

impl CodecModel {
    pub fn new(kind: ModelKind, cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = cfg.conv_kernel;
        let trunk = cfg.trunk_channels;
        let reduced = cfg.bottleneck_channels;
        let streams = match kind {
            ModelKind::Sanac => cfg.num_sources,
            ModelKind::Baseline => 1,
        };
        let transform_ch = streams * trunk;
        let transform_reduced = streams * reduced;
        let rng = &mut rng;
        Ok(Self {
            kind,
            cfg,
            lift: Conv1d::new("encoder.lift", 1, trunk, k, 1, rng),
            lift_act: LeakyRelu::default(),
            enc_block0: Bottleneck::new("encoder.block0", trunk, reduced, k, rng),
            enc_block1: Bottleneck::new("encoder.block1", trunk, reduced, k, rng),
            down: Conv1d::new("encoder.down", trunk, trunk, k, 2, rng),
            down_act: LeakyRelu::default(),
            enc_block2: Bottleneck::new("encoder.block2", trunk, reduced, k, rng),
            to_codes: Conv1d::new("encoder.to_codes", trunk, streams * cfg.vq_dim, k, 1, rng),
            expand: Conv1d::new("decoder.expand", cfg.vq_dim, 2 * trunk, k, 1, rng),
            expand_act: LeakyRelu::default(),
            transform0: Bottleneck::new("transform.block0", transform_ch, transform_reduced, k, rng),
            transform1: Bottleneck::new("transform.block1", transform_ch, transform_reduced, k, rng),
            dec_block0: Bottleneck::new("decoder.block0", trunk, reduced, k, rng),
            dec_block1: Bottleneck::new("decoder.block1", trunk, reduced, k, rng),
            project: Conv1d::new("decoder.project", trunk, 1, k, 1, rng),
            vq: Vec::new(),
        })
    }

    /// Number of parallel code streams: K sources for the source-aware
    /// codec, one for the baseline.
    pub fn streams(&self) -> usize {
        match self.kind {
            ModelKind::Sanac => self.cfg.num_sources,
            ModelKind::Baseline => 1,
        }
    }

    /// Encode a batch of frames (B, 1, N) into code maps (B, streams*L, P).
    pub fn encode(&mut self, frames: &Array3<f64>, train: bool) -> Array3<f64> {
        let (b, ch, n) = frames.dim();
        assert_eq!(ch, 1, "encoder input must be single-channel");
        assert_eq!(n, self.cfg.frame_size, "frame length {n} != {}", self.cfg.frame_size);
        let h = self.lift_act.forward(&self.lift.forward(frames, train), train);
        assert_eq!(h.dim(), (b, self.cfg.trunk_channels, n));
        let h = self.enc_block0.forward(&h, train);
        let h = self.enc_block1.forward(&h, train);
        let h = self.down_act.forward(&self.down.forward(&h, train), train);
        assert_eq!(h.dim(), (b, self.cfg.trunk_channels, self.cfg.code_length));
        let h = self.enc_block2.forward(&h, train);
        let codes = self.to_codes.forward(&h, train);
        assert_eq!(
            codes.dim(),
            (b, self.streams() * self.cfg.vq_dim, self.cfg.code_length)
        );
        codes
    }

    pub fn encode_backward(&mut self, grad_codes: &Array3<f64>) -> Array3<f64> {
        let g = self.to_codes.backward(grad_codes);
        let g = self.enc_block2.backward(&g);
        let g = self.down.backward(&self.down_act.backward(&g));
        let g = self.enc_block1.backward(&g);
        let g = self.enc_block0.backward(&g);
        self.lift.backward(&self.lift_act.backward(&g))
    }

    /// Decode per-stream code maps, each (B, L, P), into one waveform frame
    /// batch per stream plus their sum as the mixture estimate.
    pub fn decode(&mut self, stream_codes: &[Array3<f64>], train: bool) -> (Vec<Array3<f64>>, Array3<f64>) {
        let k = self.streams();
        assert_eq!(stream_codes.len(), k, "expected {k} code streams");
        let (b, l, p) = stream_codes[0].dim();
        assert_eq!(l, self.cfg.vq_dim);
        assert_eq!(p, self.cfg.code_length);
        let trunk = self.cfg.trunk_channels;
        let n = self.cfg.frame_size;

        // fold sources into the batch axis so shared layers run once
        let stacked = stack_streams(stream_codes); // (K*B, L, P)
        let h = self.expand_act.forward(&self.expand.forward(&stacked, train), train);
        assert_eq!(h.dim(), (k * b, 2 * trunk, p));
        let h = subpixel_forward(&h); // (K*B, trunk, N)
        assert_eq!(h.dim(), (k * b, trunk, n));
        let joint = streams_to_channels(&h, k); // (B, K*trunk, N)
        let joint = self.transform0.forward(&joint, train);
        let joint = self.transform1.forward(&joint, train);
        let h = channels_to_streams(&joint, k); // (K*B, trunk, N)
        let h = self.dec_block0.forward(&h, train);
        let h = self.dec_block1.forward(&h, train);
        let out = self.project.forward(&h, train); // (K*B, 1, N)
        let sources = unstack_streams(&out, k);
        let mut mixture = sources[0].clone();
        for s in &sources[1..] {
            mixture += s;
        }
        (sources, mixture)
    }

    /// Backward for [`Self::decode`]. Takes one gradient per stream output
    /// (the caller folds the mixture-loss gradient into each stream, since
    /// the mixture is their sum) and returns gradients on the stream codes.
    pub fn decode_backward(&mut self, grad_sources: &[Array3<f64>]) -> Vec<Array3<f64>> {
        let k = self.streams();
        assert_eq!(grad_sources.len(), k);
        let g = stack_streams(grad_sources);
        let g = self.project.backward(&g);
        let g = self.dec_block1.backward(&g);
        let g = self.dec_block0.backward(&g);
        let g = streams_to_channels(&g, k);
        let g = self.transform1.backward(&g);
        let g = self.transform0.backward(&g);
        let g = channels_to_streams(&g, k);
        let g = subpixel_backward(&g, 2 * self.cfg.trunk_channels);
        let g = self.expand.backward(&self.expand_act.backward(&g));
        unstack_streams(&g, k)
    }

    /// Encode one frame into its (streams*L x P) code map.
    pub fn encode_frame(&mut self, frame: &[f64]) -> Result<Array2<f64>, ModelError> {
        if frame.len() != self.cfg.frame_size {
            return Err(ModelError::BadFrameLength {
                got: frame.len(),
                expected: self.cfg.frame_size,
            });
        }
        let x = Array3::from_shape_vec((1, 1, frame.len()), frame.to_vec()).expect("shape");
        let codes = self.encode(&x, false);
        Ok(codes.index_axis(Axis(0), 0).to_owned())
    }

    /// Decode one frame's source codes (each L x P) into per-source frames
    /// and the mixture frame.
    pub fn decode_frame(
        &mut self,
        source_codes: &[Array2<f64>],
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>), ModelError> {
        if source_codes.len() != self.streams() {
            return Err(ModelError::WrongStreamCount {
                got: source_codes.len(),
                expected: self.streams(),
            });
        }
        let mut streams = Vec::with_capacity(source_codes.len());
        for block in source_codes {
            if block.nrows() != self.cfg.vq_dim {
                return Err(ModelError::BadSourceRows {
                    got: block.nrows(),
                    expected: self.cfg.vq_dim,
                });
            }
            let (l, p) = block.dim();
            streams.push(
                block
                    .to_owned()
                    .into_shape_with_order((1, l, p))
                    .expect("contiguous"),
            );
        }
        let (sources, mixture) = self.decode(&streams, false);
        let sources = sources
            .into_iter()
            .map(|s| s.index_axis(Axis(0), 0).row(0).to_vec())
            .collect();
        let mixture = mixture.index_axis(Axis(0), 0).row(0).to_vec();
        Ok((sources, mixture))
    }
}

impl HasParams for CodecModel {
    fn visit_params(&mut self, visitor: &mut dyn ParamVisitor) {
        self.lift.visit_params(visitor);
        self.enc_block0.visit_params(visitor);
        self.enc_block1.visit_params(visitor);
        self.down.visit_params(visitor);
        self.enc_block2.visit_params(visitor);
        self.to_codes.visit_params(visitor);
        self.expand.visit_params(visitor);
        self.transform0.visit_params(visitor);
        self.transform1.visit_params(visitor);
        self.dec_block0.visit_params(visitor);
        self.dec_block1.visit_params(visitor);
        self.project.visit_params(visitor);
        for vq in &mut self.vq {
            vq.visit_params(visitor);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            frame_size: 32,
            code_length: 16,
            vq_dim: 3,
            num_sources: 2,
            trunk_channels: 6,
            bottleneck_channels: 2,
            transform_channels: 12,
            conv_kernel: 5,
        }
    }

    fn random_frames(seed: u64, b: usize, n: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((b, 1, n), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn default_config_code_map_is_12_by_256() {
        let mut model = CodecModel::new(ModelKind::Sanac, ModelConfig::default(), 1).unwrap();
        let frame: Vec<f64> = (0..512).map(|i| (i as f64 * 0.01).sin()).collect();
        let map = model.encode_frame(&frame).unwrap();
        assert_eq!(map.dim(), (12, 256));
    }

    #[test]
    fn encode_is_deterministic() {
        let mut model = CodecModel::new(ModelKind::Sanac, tiny_cfg(), 2).unwrap();
        let x = random_frames(3, 2, 32);
        let a = model.encode(&x, false);
        let b = model.encode(&x, false);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_frame_maps_to_zero_codes_with_fresh_biases() {
        // biases initialize to zero and every nonlinearity fixes 0
        let mut model = CodecModel::new(ModelKind::Sanac, tiny_cfg(), 4).unwrap();
        let map = model.encode_frame(&vec![0.0; 32]).unwrap();
        assert!(map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_frame_rejects_wrong_length() {
        let mut model = CodecModel::new(ModelKind::Sanac, tiny_cfg(), 4).unwrap();
        assert!(matches!(
            model.encode_frame(&vec![0.0; 31]),
            Err(ModelError::BadFrameLength { got: 31, expected: 32 })
        ));
    }

    #[test]
    fn split_embed_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = Array2::from_shape_fn((12, 256), |_| rng.random_range(-1.0..1.0));
        let blocks = split_codes(&map, 6).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].dim(), (6, 256));
        assert_eq!(blocks[0], map.slice(ndarray::s![0..6, ..]));
        assert_eq!(blocks[1], map.slice(ndarray::s![6..12, ..]));
        let back = embed_codes(&blocks).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn padded_source_codes_have_disjoint_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let map = Array2::from_shape_fn((12, 8), |_| rng.random_range(-1.0..1.0));
        let blocks = split_codes(&map, 6).unwrap();
        // zero-pad each block back to full size, then check orthogonality
        let mut padded = Vec::new();
        for (k, block) in blocks.iter().enumerate() {
            let mut full = Array2::zeros((12, 8));
            full.slice_mut(ndarray::s![k * 6..(k + 1) * 6, ..]).assign(block);
            padded.push(full);
        }
        let dot: f64 = (&padded[0] * &padded[1]).sum();
        assert_eq!(dot, 0.0);
    }

    #[test]
    fn subpixel_upsample_examples() {
        let m = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = subpixel_upsample(&m).unwrap();
        assert_eq!(up.dim(), (1, 4));
        assert_eq!(up.as_slice().unwrap(), &[1.0, 3.0, 2.0, 4.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = Array2::from_shape_fn((30, 256), |_| rng.random_range(-1.0..1.0));
        let up = subpixel_upsample(&m).unwrap();
        assert_eq!(up.dim(), (15, 512));
        assert!((up.sum() - m.sum()).abs() < 1e-9);

        let odd = Array2::zeros((3, 4));
        assert!(matches!(subpixel_upsample(&odd), Err(ModelError::OddChannels(3))));
    }

    #[test]
    fn decode_produces_one_frame_per_source_and_their_sum() {
        let cfg = tiny_cfg();
        let mut model = CodecModel::new(ModelKind::Sanac, cfg, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let codes: Vec<Array3<f64>> = (0..2)
            .map(|_| Array3::from_shape_fn((3, cfg.vq_dim, cfg.code_length), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let (sources, mixture) = model.decode(&codes, false);
        assert_eq!(sources.len(), 2);
        for s in &sources {
            assert_eq!(s.dim(), (3, 1, cfg.frame_size));
        }
        let sum = &sources[0] + &sources[1];
        assert_eq!(mixture, sum, "mixture is exactly the sum of the sources");
    }

    #[test]
    fn permuting_source_codes_changes_the_outputs() {
        let cfg = tiny_cfg();
        let mut model = CodecModel::new(ModelKind::Sanac, cfg, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Array3::from_shape_fn((1, cfg.vq_dim, cfg.code_length), |_| rng.random_range(-1.0..1.0));
        let b = Array3::from_shape_fn((1, cfg.vq_dim, cfg.code_length), |_| rng.random_range(-1.0..1.0));
        let (fwd, _) = model.decode(&[a.clone(), b.clone()], false);
        let (swapped, _) = model.decode(&[b, a], false);
        assert_ne!(fwd[0], swapped[0], "swapping the code slots must change the decode");
        // repeat of the same inputs is bit-identical
        let cfg2 = tiny_cfg();
        let mut model2 = CodecModel::new(ModelKind::Sanac, cfg2, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a2 = Array3::from_shape_fn((1, cfg2.vq_dim, cfg2.code_length), |_| rng.random_range(-1.0..1.0));
        let b2 = Array3::from_shape_fn((1, cfg2.vq_dim, cfg2.code_length), |_| rng.random_range(-1.0..1.0));
        let (fwd2, _) = model2.decode(&[a2, b2], false);
        assert_eq!(fwd[0], fwd2[0]);
    }

    #[test]
    fn baseline_has_single_code_block_and_single_output() {
        let mut model = CodecModel::new(ModelKind::Baseline, ModelConfig::default(), 12).unwrap();
        let frame: Vec<f64> = (0..512).map(|i| (i as f64 * 0.02).cos()).collect();
        let map = model.encode_frame(&frame).unwrap();
        assert_eq!(map.dim(), (6, 256));
        let (sources, mixture) = model.decode_frame(&[map]).unwrap();
        assert_eq!(sources.len(), 1);
        assert_eq!(mixture.len(), 512);
        assert_eq!(sources[0], mixture);
    }

    #[test]
    fn parameter_counts_are_sane() {
        let mut sanac = CodecModel::new(ModelKind::Sanac, ModelConfig::default(), 13).unwrap();
        let mut baseline = CodecModel::new(ModelKind::Baseline, ModelConfig::default(), 13).unwrap();
        let sanac_params = sanac.param_count();
        let baseline_params = baseline.param_count();
        assert!(
            baseline_params < sanac_params,
            "baseline {baseline_params} should be smaller than source-aware {sanac_params}"
        );
        assert!(sanac_params < 1_500_000, "{sanac_params} params exceeds the sanity bound");
    }

    #[test]
    fn decode_frame_rejects_wrong_stream_count() {
        let cfg = tiny_cfg();
        let mut model = CodecModel::new(ModelKind::Sanac, cfg, 14).unwrap();
        let block = Array2::zeros((cfg.vq_dim, cfg.code_length));
        assert!(matches!(
            model.decode_frame(&[block]),
            Err(ModelError::WrongStreamCount { got: 1, expected: 2 })
        ));
    }

    #[test]
    fn stream_stacking_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let streams: Vec<Array3<f64>> = (0..3)
            .map(|_| Array3::from_shape_fn((2, 4, 5), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let stacked = stack_streams(&streams);
        assert_eq!(unstack_streams(&stacked, 3), streams);
        let channels = streams_to_channels(&stacked, 3);
        assert_eq!(channels.dim(), (2, 12, 5));
        assert_eq!(channels_to_streams(&channels, 3), stacked);
    }

    #[test]
    fn full_pipeline_gradients_flow_end_to_end() {
        // encode -> split -> decode with an L2 head; finite differences on a
        // few parameters through the whole stack.
        let cfg = tiny_cfg();
        let mut model = CodecModel::new(ModelKind::Sanac, cfg, 16).unwrap();
        let x = random_frames(17, 2, cfg.frame_size);

        let run = |model: &mut CodecModel, x: &Array3<f64>, train: bool| -> f64 {
            let codes = model.encode(x, train);
            let blocks: Vec<Array3<f64>> = (0..2)
                .map(|k| {
                    codes
                        .slice(ndarray::s![.., k * cfg.vq_dim..(k + 1) * cfg.vq_dim, ..])
                        .to_owned()
                })
                .collect();
            let (sources, mixture) = model.decode(&blocks, train);
            sources.iter().map(|s| s.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
                + mixture.iter().map(|v| v * v).sum::<f64>()
        };

        // analytic grads
        model.zero_grads();
        let codes = model.encode(&x, true);
        let blocks: Vec<Array3<f64>> = (0..2)
            .map(|k| codes.slice(ndarray::s![.., k * cfg.vq_dim..(k + 1) * cfg.vq_dim, ..]).to_owned())
            .collect();
        let (sources, mixture) = model.decode(&blocks, true);
        let grad_mix = mixture.mapv(|v| 2.0 * v);
        let grads: Vec<Array3<f64>> = sources.iter().map(|s| s.mapv(|v| 2.0 * v) + &grad_mix).collect();
        let grad_blocks = model.decode_backward(&grads);
        let mut grad_codes = Array3::zeros(codes.raw_dim());
        for (k, g) in grad_blocks.iter().enumerate() {
            grad_codes
                .slice_mut(ndarray::s![.., k * cfg.vq_dim..(k + 1) * cfg.vq_dim, ..])
                .assign(g);
        }
        model.encode_backward(&grad_codes);

        // compare a handful of entries against central differences
        struct Probe {
            target: &'static str,
            entry: usize,
            analytic: f64,
        }
        let mut probes = vec![
            Probe { target: "encoder.lift.weight", entry: 3, analytic: 0.0 },
            Probe { target: "decoder.project.weight", entry: 7, analytic: 0.0 },
            Probe { target: "transform.block0.conv.weight", entry: 11, analytic: 0.0 },
            Probe { target: "decoder.expand.bias", entry: 2, analytic: 0.0 },
        ];
        struct Reader<'a>(&'a mut Vec<Probe>);
        impl ParamVisitor for Reader<'_> {
            fn visit(&mut self, name: &str, _: ndarray::ArrayViewMutD<'_, f64>, grad: ndarray::ArrayViewMutD<'_, f64>) {
                for p in self.0.iter_mut() {
                    if p.target == name {
                        p.analytic = *grad.iter().nth(p.entry).unwrap();
                    }
                }
            }
        }
        model.visit_params(&mut Reader(&mut probes));

        let eps = 1e-5;
        for probe in &probes {
            struct Bump<'a> {
                target: &'a str,
                entry: usize,
                delta: f64,
            }
            impl ParamVisitor for Bump<'_> {
                fn visit(&mut self, name: &str, mut value: ndarray::ArrayViewMutD<'_, f64>, _: ndarray::ArrayViewMutD<'_, f64>) {
                    if name == self.target {
                        *value.iter_mut().nth(self.entry).unwrap() += self.delta;
                    }
                }
            }
            model.visit_params(&mut Bump { target: probe.target, entry: probe.entry, delta: eps });
            let lp = run(&mut model, &x, false);
            model.visit_params(&mut Bump { target: probe.target, entry: probe.entry, delta: -2.0 * eps });
            let lm = run(&mut model, &x, false);
            model.visit_params(&mut Bump { target: probe.target, entry: probe.entry, delta: eps });
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (probe.analytic - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-4, "{}[{}]: analytic {} vs fd {fd}", probe.target, probe.entry, probe.analytic);
        }
    }
}

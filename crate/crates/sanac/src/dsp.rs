//! Time-domain signal plumbing: framing, overlap-add reconstruction with a
//! Hann crossfade, and SNR-controlled speech/noise mixing.
//!
//! Analysis frames are taken unwindowed; the crossfade window is applied at
//! synthesis time only, over the overlapping region between adjacent frames,
//! so that segment → overlap_add is an identity (up to rounding).

use thiserror::Error;

#[derive(Error, Debug)]
pub enum DspError {
    #[error("signal is empty")]
    EmptySignal,
    #[error("signal contains non-finite samples")]
    NonFiniteSamples,
    #[error("sample rate must be positive")]
    BadSampleRate,
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("{0} signal has zero power; SNR is undefined")]
    ZeroPower(&'static str),
    #[error("invalid frame spec: {0}")]
    BadFrameSpec(String),
    #[error("frame {index} has {got} samples, expected {expected}")]
    BadFrameLength {
        index: usize,
        got: usize,
        expected: usize,
    },
}

/// A mono waveform with its sample rate. Samples are dimensionless
/// amplitudes, nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, DspError> {
        if sample_rate == 0 {
            return Err(DspError::BadSampleRate);
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(DspError::NonFiniteSamples);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean square of the samples.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Framing geometry: frames of `frame_size` samples placed every `hop`
/// samples, with adjacent frames cross-faded over `crossfade_len` samples
/// using the two halves of a periodic Hann window of length
/// `2 * crossfade_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSpec {
    pub frame_size: usize,
    pub hop: usize,
    pub crossfade_len: usize,
}

impl FrameSpec {
    /// `hop` is derived as `frame_size - crossfade_len`.
    pub fn new(frame_size: usize, crossfade_len: usize) -> Result<Self, DspError> {
        if frame_size == 0 {
            return Err(DspError::BadFrameSpec("frame_size must be positive".into()));
        }
        if crossfade_len == 0 || crossfade_len >= frame_size {
            return Err(DspError::BadFrameSpec(format!(
                "crossfade_len {crossfade_len} must be in 1..frame_size ({frame_size})"
            )));
        }
        Ok(Self {
            frame_size,
            hop: frame_size - crossfade_len,
            crossfade_len,
        })
    }

    /// 512-sample frames with a 64-sample overlap (hop 448).
    pub fn default_16k() -> Self {
        Self::new(512, 64).expect("default spec is valid")
    }

    pub fn window_len(&self) -> usize {
        2 * self.crossfade_len
    }

    /// Rising half of the periodic Hann window of length `window_len()`:
    /// w[t] = 0.5 (1 - cos(2 pi t / W)) for t in [0, W/2).
    pub fn rising_half(&self) -> Vec<f64> {
        let w = self.window_len();
        (0..self.crossfade_len)
            .map(|t| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * t as f64 / w as f64).cos()))
            .collect()
    }

    /// Falling half: w[t + W/2] for t in [0, W/2). Complementary to the
    /// rising half: rise[t] + fall[t] = 1 for every t.
    pub fn falling_half(&self) -> Vec<f64> {
        let w = self.window_len();
        (self.crossfade_len..w)
            .map(|t| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * t as f64 / w as f64).cos()))
            .collect()
    }

    /// Number of frames needed to cover `len` samples (last frame zero-padded).
    pub fn frame_count(&self, len: usize) -> usize {
        if len <= self.frame_size {
            1
        } else {
            (len - self.frame_size).div_ceil(self.hop) + 1
        }
    }
}

/// Overlapping fixed-length frames of a waveform, plus the geometry and the
/// original sample count needed to invert the segmentation.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    frames: Vec<Vec<f64>>,
    pub spec: FrameSpec,
    pub original_length: usize,
    pub sample_rate: u32,
}

impl FrameSequence {
    /// Wrap synthesized frames (e.g. decoder output) in a sequence. Every
    /// frame must be exactly `spec.frame_size` long.
    pub fn from_frames(
        frames: Vec<Vec<f64>>,
        spec: FrameSpec,
        original_length: usize,
        sample_rate: u32,
    ) -> Result<Self, DspError> {
        for (index, f) in frames.iter().enumerate() {
            if f.len() != spec.frame_size {
                return Err(DspError::BadFrameLength {
                    index,
                    got: f.len(),
                    expected: spec.frame_size,
                });
            }
        }
        Ok(Self {
            frames,
            spec,
            original_length,
            sample_rate,
        })
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Cut a signal into overlapping frames. Frame i starts at sample `i * hop`;
/// the final frame is zero-padded. A signal shorter than one frame yields a
/// single zero-padded frame.
pub fn segment(signal: &AudioSignal, spec: &FrameSpec) -> Result<FrameSequence, DspError> {
    if signal.is_empty() {
        return Err(DspError::EmptySignal);
    }
    let len = signal.len();
    let n_frames = spec.frame_count(len);
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let start = i * spec.hop;
        let mut frame = vec![0.0; spec.frame_size];
        let end = (start + spec.frame_size).min(len);
        frame[..end - start].copy_from_slice(&signal.samples[start..end]);
        frames.push(frame);
    }
    Ok(FrameSequence {
        frames,
        spec: *spec,
        original_length: len,
        sample_rate: signal.sample_rate,
    })
}

/// Reconstruct a waveform from frames. Adjacent frames are cross-faded over
/// the overlap region with the complementary Hann halves; everything else is
/// copied verbatim. Output is truncated to `original_length`.
pub fn overlap_add(frames: &FrameSequence) -> AudioSignal {
    let spec = &frames.spec;
    if frames.is_empty() {
        return AudioSignal {
            samples: Vec::new(),
            sample_rate: frames.sample_rate,
        };
    }
    let total = (frames.len() - 1) * spec.hop + spec.frame_size;
    let rise = spec.rising_half();
    let fall = spec.falling_half();
    let mut out = vec![0.0; total];
    for (i, frame) in frames.frames.iter().enumerate() {
        let start = i * spec.hop;
        if i == 0 {
            out[..spec.frame_size].copy_from_slice(frame);
        } else {
            // out[start..start+cf] currently holds the previous frame's tail.
            for t in 0..spec.crossfade_len {
                out[start + t] = out[start + t] * fall[t] + frame[t] * rise[t];
            }
            out[start + spec.crossfade_len..start + spec.frame_size]
                .copy_from_slice(&frame[spec.crossfade_len..]);
        }
    }
    out.truncate(frames.original_length);
    AudioSignal {
        samples: out,
        sample_rate: frames.sample_rate,
    }
}

/// Scale `noise` so that the speech-to-noise power ratio equals `snr_db`,
/// then add it to `speech`. Noise is looped or truncated to the speech
/// length first. Returns the mixture and the scaled noise.
pub fn mix_at_snr(
    speech: &AudioSignal,
    noise: &AudioSignal,
    snr_db: f64,
) -> Result<(AudioSignal, AudioSignal), DspError> {
    if speech.sample_rate != noise.sample_rate {
        return Err(DspError::SampleRateMismatch(
            speech.sample_rate,
            noise.sample_rate,
        ));
    }
    if speech.is_empty() {
        return Err(DspError::EmptySignal);
    }
    let p_speech = speech.power();
    if p_speech == 0.0 {
        return Err(DspError::ZeroPower("speech"));
    }
    if noise.is_empty() || noise.power() == 0.0 {
        return Err(DspError::ZeroPower("noise"));
    }
    let fitted: Vec<f64> = (0..speech.len())
        .map(|i| noise.samples[i % noise.len()])
        .collect();
    let p_noise = fitted.iter().map(|s| s * s).sum::<f64>() / fitted.len() as f64;
    if p_noise == 0.0 {
        return Err(DspError::ZeroPower("noise"));
    }
    let gain = (p_speech / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = fitted.iter().map(|s| s * gain).collect();
    let mixture: Vec<f64> = speech
        .samples
        .iter()
        .zip(&scaled)
        .map(|(s, n)| s + n)
        .collect();
    Ok((
        AudioSignal {
            samples: mixture,
            sample_rate: speech.sample_rate,
        },
        AudioSignal {
            samples: scaled,
            sample_rate: speech.sample_rate,
        },
    ))
}

/// Measured power ratio of two aligned signals, in dB.
pub fn measure_snr_db(signal: &AudioSignal, noise: &AudioSignal) -> Result<f64, DspError> {
    let ps = signal.power();
    let pn = noise.power();
    if ps == 0.0 {
        return Err(DspError::ZeroPower("signal"));
    }
    if pn == 0.0 {
        return Err(DspError::ZeroPower("noise"));
    }
    Ok(10.0 * (ps / pn).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_signal(rng: &mut ChaCha8Rng, len: usize) -> AudioSignal {
        let samples: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        AudioSignal::new(samples, 16000).unwrap()
    }

    /// Reference segmentation: enumerate start offsets until the whole
    /// signal is covered, padding the last frame with zeros. Independent of
    /// the arithmetic used by `segment`.
    fn oracle_segment(samples: &[f64], frame: usize, hop: usize) -> Vec<Vec<f64>> {
        let mut frames = Vec::new();
        let mut start = 0usize;
        loop {
            let mut f = vec![0.0; frame];
            for t in 0..frame {
                if start + t < samples.len() {
                    f[t] = samples[start + t];
                }
            }
            frames.push(f);
            if start + frame >= samples.len() {
                break;
            }
            start += hop;
        }
        frames
    }

    #[test]
    fn segment_960_samples_gives_two_frames() {
        let spec = FrameSpec::default_16k();
        let sig = AudioSignal::new((0..960).map(|i| i as f64).collect(), 16000).unwrap();
        let seq = segment(&sig, &spec).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.frames()[0][0], 0.0);
        assert_eq!(seq.frames()[1][0], 448.0); // frame 1 starts at sample 448
        assert_eq!(seq.original_length, 960);
    }

    #[test]
    fn segment_exact_frame_no_padding() {
        let spec = FrameSpec::default_16k();
        let sig = AudioSignal::new(vec![0.5; 512], 16000).unwrap();
        let seq = segment(&sig, &spec).unwrap();
        assert_eq!(seq.len(), 1);
        assert!(seq.frames()[0].iter().all(|&s| s == 0.5));
    }

    #[test]
    fn segment_matches_offset_enumeration_oracle() {
        // The 1000-sample case: the oracle decides the frame count and the
        // padding, not closed-form arithmetic.
        let spec = FrameSpec::default_16k();
        let samples: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.01).sin()).collect();
        let oracle = oracle_segment(&samples, 512, 448);
        assert_eq!(oracle.len(), 3);
        let pad = oracle.last().unwrap().iter().rev().take_while(|&&s| s == 0.0).count();
        assert_eq!(pad, 408);

        let sig = AudioSignal::new(samples, 16000).unwrap();
        let seq = segment(&sig, &spec).unwrap();
        assert_eq!(seq.len(), oracle.len());
        for (got, want) in seq.frames().iter().zip(&oracle) {
            assert_eq!(got, want);
        }
    }

    #[test]
    fn segment_short_signal_pads_single_frame() {
        let spec = FrameSpec::default_16k();
        let sig = AudioSignal::new(vec![1.0; 100], 16000).unwrap();
        let seq = segment(&sig, &spec).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.frames()[0][99], 1.0);
        assert_eq!(seq.frames()[0][100], 0.0);
    }

    #[test]
    fn segment_rejects_empty_signal() {
        let spec = FrameSpec::default_16k();
        let sig = AudioSignal {
            samples: vec![],
            sample_rate: 16000,
        };
        assert!(matches!(segment(&sig, &spec), Err(DspError::EmptySignal)));
    }

    #[test]
    fn window_halves_are_complementary() {
        let spec = FrameSpec::default_16k();
        let rise = spec.rising_half();
        let fall = spec.falling_half();
        assert_eq!(rise.len(), 64);
        assert_eq!(fall.len(), 64);
        for t in 0..64 {
            assert!(
                (rise[t] + fall[t] - 1.0).abs() <= 1e-9,
                "complementarity violated at t={t}: {}",
                rise[t] + fall[t]
            );
        }
        assert_eq!(rise[0], 0.0);
    }

    #[test]
    fn segment_overlap_add_is_identity() {
        let spec = FrameSpec::default_16k();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for len in [512usize, 513, 960, 1000, 4480, 511, 1] {
            let sig = random_signal(&mut rng, len);
            let rec = overlap_add(&segment(&sig, &spec).unwrap());
            assert_eq!(rec.len(), sig.len());
            let max_err = sig
                .samples
                .iter()
                .zip(&rec.samples)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err <= 1e-6, "len {len}: max err {max_err}");
        }
    }

    #[test]
    fn overlap_add_constant_signal_stays_constant() {
        let spec = FrameSpec::default_16k();
        let sig = AudioSignal::new(vec![1.0; 2000], 16000).unwrap();
        let rec = overlap_add(&segment(&sig, &spec).unwrap());
        for (i, &s) in rec.samples.iter().enumerate() {
            assert!((s - 1.0).abs() <= 1e-9, "sample {i} = {s}");
        }
    }

    #[test]
    fn overlap_add_single_frame_is_verbatim() {
        let spec = FrameSpec::default_16k();
        let frame: Vec<f64> = (0..512).map(|i| (i as f64 * 0.1).cos()).collect();
        let seq = FrameSequence::from_frames(vec![frame.clone()], spec, 512, 16000).unwrap();
        let rec = overlap_add(&seq);
        assert_eq!(rec.samples, frame);
    }

    #[test]
    fn overlap_add_empty_sequence_is_empty_signal() {
        let seq = FrameSequence::from_frames(vec![], FrameSpec::default_16k(), 0, 16000).unwrap();
        assert!(overlap_add(&seq).is_empty());
    }

    #[test]
    fn from_frames_rejects_wrong_length() {
        let spec = FrameSpec::default_16k();
        let err = FrameSequence::from_frames(vec![vec![0.0; 100]], spec, 100, 16000);
        assert!(matches!(err, Err(DspError::BadFrameLength { .. })));
    }

    #[test]
    fn mix_equal_power_at_0db_has_unit_gain() {
        let speech = AudioSignal::new(vec![0.5, -0.5, 0.5, -0.5], 16000).unwrap();
        let noise = AudioSignal::new(vec![-0.5, 0.5, -0.5, 0.5], 16000).unwrap();
        let (_, scaled) = mix_at_snr(&speech, &noise, 0.0).unwrap();
        for (a, b) in scaled.samples.iter().zip(&noise.samples) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn mix_equal_power_at_5db_scales_noise() {
        let speech = AudioSignal::new(vec![0.5, -0.5, 0.5, -0.5], 16000).unwrap();
        let noise = AudioSignal::new(vec![-0.5, 0.5, -0.5, 0.5], 16000).unwrap();
        let (_, scaled) = mix_at_snr(&speech, &noise, 5.0).unwrap();
        let g = scaled.samples[0].abs() / 0.5;
        assert!((g - 10f64.powf(-5.0 / 20.0)).abs() <= 1e-12, "gain {g}");
        // Verify the resulting power ratio really is 5 dB.
        let snr = measure_snr_db(&speech, &scaled).unwrap();
        assert!((snr - 5.0).abs() <= 1e-9, "snr {snr}");
    }

    #[test]
    fn mix_measured_snr_matches_request() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let speech = random_signal(&mut rng, 4000);
        let noise = random_signal(&mut rng, 2500); // shorter: exercises looping
        for snr_db in [-3.0, 0.0, 5.0, 12.5] {
            let (_, scaled) = mix_at_snr(&speech, &noise, snr_db).unwrap();
            assert_eq!(scaled.len(), speech.len());
            let measured = measure_snr_db(&speech, &scaled).unwrap();
            assert!(
                (measured - snr_db).abs() <= 1e-6,
                "requested {snr_db}, measured {measured}"
            );
        }
    }

    #[test]
    fn mix_rejects_silent_input() {
        let speech = AudioSignal::new(vec![0.0; 100], 16000).unwrap();
        let noise = AudioSignal::new(vec![0.1; 100], 16000).unwrap();
        assert!(matches!(
            mix_at_snr(&speech, &noise, 0.0),
            Err(DspError::ZeroPower("speech"))
        ));
        assert!(matches!(
            mix_at_snr(&noise, &speech, 0.0),
            Err(DspError::ZeroPower("noise"))
        ));
    }

    #[test]
    fn mix_rejects_rate_mismatch() {
        let a = AudioSignal::new(vec![0.1; 10], 16000).unwrap();
        let b = AudioSignal::new(vec![0.1; 10], 8000).unwrap();
        assert!(matches!(
            mix_at_snr(&a, &b, 0.0),
            Err(DspError::SampleRateMismatch(16000, 8000))
        ));
    }
}

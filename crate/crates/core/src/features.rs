//! Log-mel front end, fixed-length cropping and corpus-level normalization.

use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio at [`SAMPLE_RATE`], amplitudes in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::invalid(
                "waveform",
                format!("sample rate must be {SAMPLE_RATE} Hz, got {sample_rate}"),
            ));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MelScale {
    Htk,
    Slaney,
}

impl MelScale {
    pub fn hz_to_mel(self, hz: f64) -> f64 {
        match self {
            MelScale::Htk => 2595.0 * (1.0 + hz / 700.0).log10(),
            MelScale::Slaney => {
                let (f_sp, min_log_hz) = (200.0 / 3.0, 1000.0);
                let min_log_mel = min_log_hz / f_sp;
                let logstep = 6.4f64.ln() / 27.0;
                if hz >= min_log_hz {
                    min_log_mel + (hz / min_log_hz).ln() / logstep
                } else {
                    hz / f_sp
                }
            }
        }
    }

    pub fn mel_to_hz(self, mel: f64) -> f64 {
        match self {
            MelScale::Htk => 700.0 * (10f64.powf(mel / 2595.0) - 1.0),
            MelScale::Slaney => {
                let (f_sp, min_log_hz) = (200.0 / 3.0, 1000.0);
                let min_log_mel = min_log_hz / f_sp;
                let logstep = 6.4f64.ln() / 27.0;
                if mel >= min_log_mel {
                    min_log_hz * (logstep * (mel - min_log_mel)).exp()
                } else {
                    mel * f_sp
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    Natural,
    Ten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    pub mel_scale: MelScale,
    pub log_base: LogBase,
    /// Length of training and evaluation crops.
    pub crop_s: f64,
    /// z-score features with corpus statistics before the encoder and the
    /// quantizer.
    pub normalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            window: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-6,
            mel_scale: MelScale::Htk,
            log_base: LogBase::Natural,
            crop_s: 3.0,
            normalize: true,
        }
    }
}

impl FeatureConfig {
    pub fn frame_hop_s(&self) -> f64 {
        self.hop as f64 / SAMPLE_RATE as f64
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.window {
            0
        } else {
            1 + (num_samples - self.window) / self.hop
        }
    }

    /// Frames in a crop of `crop_s` seconds.
    pub fn crop_frames(&self) -> usize {
        (self.crop_s / self.frame_hop_s()).round() as usize
    }

    fn validate(&self) -> Result<()> {
        let ok = self.window >= 1
            && self.hop >= 1
            && self.n_fft >= self.window
            && self.n_mels >= 1
            && self.f_min >= 0.0
            && self.f_max > self.f_min
            && self.f_max <= SAMPLE_RATE as f64 / 2.0
            && self.log_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("logmel", format!("invalid feature config {self:?}")))
        }
    }
}

/// `T×F` log-mel frames of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Tensor<f32>,
    pub frame_hop_s: f64,
    pub source_id: String,
}

impl FeatureSequence {
    pub fn new(frames: Tensor<f32>, frame_hop_s: f64, source_id: impl Into<String>) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(Error::invalid(
                "features",
                format!("frames must be T×F, got {:?}", frames.shape()),
            ));
        }
        Ok(FeatureSequence {
            frames,
            frame_hop_s,
            source_id: source_id.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.frames.row(t)
    }

    fn with_frames(&self, frames: Tensor<f32>) -> Self {
        FeatureSequence {
            frames,
            frame_hop_s: self.frame_hop_s,
            source_id: self.source_id.clone(),
        }
    }
}

/// Triangular filters, `n_mels × (n_fft/2 + 1)`, row-major.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Vec<Vec<f64>> {
    let bins = cfg.n_fft / 2 + 1;
    let scale = cfg.mel_scale;
    let (lo, hi) = (scale.hz_to_mel(cfg.f_min), scale.hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| scale.mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = SAMPLE_RATE as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - left) / (center - left);
                    let down = (right - f) / (right - center);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Centre frequency in Hz of every mel filter.
pub fn mel_centers(cfg: &FeatureConfig) -> Vec<f64> {
    let scale = cfg.mel_scale;
    let (lo, hi) = (scale.hz_to_mel(cfg.f_min), scale.hz_to_mel(cfg.f_max));
    (1..=cfg.n_mels)
        .map(|i| scale.mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Reusable log-mel extractor (window, filterbank and FFT plan built once).
pub struct LogMel {
    cfg: FeatureConfig,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogMel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel").field("cfg", &self.cfg).finish()
    }
}

impl LogMel {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        // periodic Hann
        let window = (0..cfg.window)
            .map(|n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / cfg.window as f64).cos()
            })
            .collect();
        let filters = mel_filterbank(&cfg);
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(LogMel {
            cfg,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn compute(&self, wave: &Waveform, source_id: impl Into<String>) -> Result<FeatureSequence> {
        let cfg = &self.cfg;
        if wave.sample_rate() != SAMPLE_RATE {
            return Err(Error::invalid(
                "logmel",
                format!("sample rate must be {SAMPLE_RATE} Hz"),
            ));
        }
        let samples = wave.samples();
        if samples.len() < cfg.window {
            return Err(Error::invalid(
                "logmel",
                format!(
                    "waveform has {} samples, need at least {}",
                    samples.len(),
                    cfg.window
                ),
            ));
        }
        let frames = cfg.num_frames(samples.len());
        let bins = cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f64; bins];
        let mut out = Vec::with_capacity(frames * cfg.n_mels);
        for t in 0..frames {
            let start = t * cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < cfg.window {
                    Complex::new(samples[start + i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filter in &self.filters {
                let energy: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
                let v = energy + cfg.log_floor;
                let logged = match cfg.log_base {
                    LogBase::Natural => v.ln(),
                    LogBase::Ten => v.log10(),
                };
                out.push(logged as f32);
            }
        }
        let frames = Tensor::new([frames, cfg.n_mels], out)?;
        FeatureSequence::new(frames, cfg.frame_hop_s(), source_id)
    }
}

/// One-shot log-mel extraction.
pub fn logmel(wave: &Waveform, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    LogMel::new(cfg.clone())?.compute(wave, "")
}

/// Crops `frames` consecutive frames at a uniformly random offset. Shorter
/// inputs are tiled (repeat-padded) up to the target length.
pub fn random_crop<R: Rng + ?Sized>(
    f: &FeatureSequence,
    frames: usize,
    rng: &mut R,
) -> Result<FeatureSequence> {
    let t = f.num_frames();
    if t == 0 {
        return Err(Error::invalid("random_crop", "empty feature sequence"));
    }
    if t >= frames {
        let offset = rng.random_range(0..=t - frames);
        return crop_at(f, offset, frames);
    }
    Ok(repeat_pad(f, frames))
}

/// `frames` consecutive frames starting at `offset`.
pub fn crop_at(f: &FeatureSequence, offset: usize, frames: usize) -> Result<FeatureSequence> {
    if offset + frames > f.num_frames() {
        return Err(Error::invalid(
            "crop",
            format!("{offset}+{frames} exceeds {} frames", f.num_frames()),
        ));
    }
    let dim = f.dim();
    let data = f.frames.data()[offset * dim..(offset + frames) * dim].to_vec();
    Ok(f.with_frames(Tensor::new([frames, dim], data)?))
}

/// Tiles the sequence until it is exactly `frames` long.
pub fn repeat_pad(f: &FeatureSequence, frames: usize) -> FeatureSequence {
    let dim = f.dim();
    let t = f.num_frames();
    let mut data = Vec::with_capacity(frames * dim);
    for i in 0..frames {
        data.extend_from_slice(f.frame(i % t));
    }
    f.with_frames(Tensor::new([frames, dim], data).expect("consistent shape"))
}

/// Deterministic evaluation crop: the leading `frames` frames, or the
/// repeat-padded sequence when shorter.
pub fn center_or_pad(f: &FeatureSequence, frames: usize) -> Result<FeatureSequence> {
    let t = f.num_frames();
    if t == 0 {
        return Err(Error::invalid("crop", "empty feature sequence"));
    }
    if t >= frames {
        crop_at(f, (t - frames) / 2, frames)
    } else {
        Ok(repeat_pad(f, frames))
    }
}

pub const STD_FLOOR: f32 = 1e-5;

/// Per-dimension mean and standard deviation over a training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for s in seqs {
            if sum.is_empty() {
                sum = vec![0.0; s.dim()];
                sq = vec![0.0; s.dim()];
            } else if s.dim() != sum.len() {
                return Err(Error::shape("feature_stats", &[&[sum.len()], &[s.dim()]]));
            }
            for t in 0..s.num_frames() {
                for (d, &v) in s.frame(t).iter().enumerate() {
                    sum[d] += v as f64;
                    sq[d] += v as f64 * v as f64;
                }
            }
            count += s.num_frames();
        }
        if count == 0 {
            return Err(Error::invalid("feature_stats", "no frames"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0)).sqrt() as f32)
            .collect();
        Ok(FeatureStats {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    /// Zero mean, unit std: normalization becomes a no-op.
    pub fn identity(dim: usize) -> Self {
        FeatureStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `(x − mean) / max(std, 1e-5)` per dimension.
pub fn normalize_features(f: &FeatureSequence, stats: &FeatureStats) -> Result<FeatureSequence> {
    if f.dim() != stats.dim() {
        return Err(Error::shape("normalize_features", &[f.frames.shape(), &[stats.dim()]]));
    }
    let dim = f.dim();
    let mut frames = f.frames.clone();
    for row in frames.data_mut().chunks_mut(dim) {
        for ((v, &m), &s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - m) / s.max(STD_FLOOR);
        }
    }
    Ok(f.with_frames(frames))
}

//! Time-axis span masking calibrated to a target coverage.
//!
//! Every frame position independently starts a span of `m` frames with
//! probability `ρ = 1 − (1 − c)^(1/m)`, spans may overlap, and a frame is
//! masked when at least one span covers it. Starts are also drawn for the
//! `m − 1` virtual positions before the first frame (spans clipped to the
//! sequence), so every frame, including the leading ones, is covered with
//! probability `1 − (1 − ρ)^m`.
//!
//! A draw with no masked position is redrawn once, which adds `P(empty) · c`
//! to the expected coverage. [`sample_mask`] therefore solves for the `ρ`
//! that makes the expected coverage after the redraw exactly `c` for the
//! given length; [`start_probability`] is its long-sequence limit.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::numerics::Tensor;

/// Mask span sizes swept in the experiments, in milliseconds.
pub const SPAN_STEPS_MS: [u32; 6] = [80, 160, 240, 320, 400, 480];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Replacement {
    /// i.i.d. `N(0, std²)` values.
    Noise { std: f64 },
    Zero,
}

/// When a sub-sampled position counts as masked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionRule {
    /// At least one of its raw frames is masked.
    Any,
    /// All of its raw frames are masked.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// 0 disables masking entirely.
    pub span_ms: u32,
    pub target_coverage: f64,
    pub frame_hop_ms: u32,
    pub sub_sampling_factor: usize,
    pub replacement: Replacement,
    pub position_rule: PositionRule,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            span_ms: 240,
            target_coverage: 0.35,
            frame_hop_ms: 10,
            sub_sampling_factor: 4,
            replacement: Replacement::Noise { std: 0.1 },
            position_rule: PositionRule::Any,
        }
    }
}

impl MaskConfig {
    pub fn with_span(mut self, span_ms: u32) -> Self {
        self.span_ms = span_ms;
        self
    }

    pub fn enabled(&self) -> bool {
        self.span_ms > 0
    }

    pub fn span_frames(&self) -> usize {
        (self.span_ms / self.frame_hop_ms.max(1)) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_hop_ms == 0 || !self.span_ms.is_multiple_of(self.frame_hop_ms) {
            return Err(Error::invalid(
                "mask_config",
                format!(
                    "span {} ms is not a multiple of the {} ms hop",
                    self.span_ms, self.frame_hop_ms
                ),
            ));
        }
        if !(self.target_coverage > 0.0 && self.target_coverage < 1.0) {
            return Err(Error::invalid(
                "mask_config",
                format!("target coverage {} not in (0, 1)", self.target_coverage),
            ));
        }
        if self.sub_sampling_factor == 0 {
            return Err(Error::invalid("mask_config", "sub-sampling factor must be ≥ 1"));
        }
        if let Replacement::Noise { std } = self.replacement {
            if !(std >= 0.0 && std.is_finite()) {
                return Err(Error::invalid("mask_config", "noise std must be finite and ≥ 0"));
            }
        }
        Ok(())
    }
}

/// Per-frame span start probability giving the configured coverage.
pub fn start_probability(cfg: &MaskConfig) -> Result<f64> {
    let m = cfg.span_frames();
    if m < 1 {
        return Err(Error::invalid(
            "start_probability",
            format!("span of {} ms is shorter than one frame", cfg.span_ms),
        ));
    }
    coverage_start_probability(cfg.target_coverage, m)
}

pub fn coverage_start_probability(coverage: f64, span_frames: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&coverage) || span_frames == 0 {
        return Err(Error::invalid(
            "start_probability",
            format!("coverage {coverage}, span {span_frames} frames"),
        ));
    }
    Ok(1.0 - (1.0 - coverage).powf(1.0 / span_frames as f64))
}

/// Masked raw frames and the sub-sampled positions they touch.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub raw_masked: Vec<bool>,
    /// Sorted sub-sampled indices.
    pub masked_positions: Vec<usize>,
    pub start_prob: f64,
    pub sub_sampling_factor: usize,
}

impl MaskPlan {
    pub fn empty(frames: usize, sub_sampling_factor: usize) -> Self {
        Self::from_raw(vec![false; frames], sub_sampling_factor, PositionRule::Any, 0.0)
    }

    pub fn from_raw(raw_masked: Vec<bool>, s: usize, rule: PositionRule, start_prob: f64) -> Self {
        let s = s.max(1);
        let masked_positions = raw_masked
            .chunks(s)
            .enumerate()
            .filter(|(_, chunk)| match rule {
                PositionRule::Any => chunk.iter().any(|&m| m),
                // a short tail chunk still stands for a full stack of frames
                PositionRule::All => chunk.len() == s && chunk.iter().all(|&m| m),
            })
            .map(|(u, _)| u)
            .collect();
        MaskPlan {
            raw_masked,
            masked_positions,
            start_prob,
            sub_sampling_factor: s,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.raw_masked.len()
    }

    pub fn num_positions(&self) -> usize {
        self.raw_masked.len().div_ceil(self.sub_sampling_factor)
    }

    pub fn masked_frames(&self) -> usize {
        self.raw_masked.iter().filter(|&&m| m).count()
    }

    /// Fraction of raw frames masked.
    pub fn coverage(&self) -> f64 {
        if self.raw_masked.is_empty() {
            0.0
        } else {
            self.masked_frames() as f64 / self.raw_masked.len() as f64
        }
    }

    pub fn is_empty(&self) -> bool {
        self.masked_positions.is_empty()
    }

    /// Membership flags over sub-sampled positions.
    pub fn position_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.num_positions()];
        for &u in &self.masked_positions {
            mask[u] = true;
        }
        mask
    }
}

fn draw_spans<R: Rng + ?Sized>(frames: usize, span: usize, rho: f64, rng: &mut R) -> Vec<bool> {
    let mut raw = vec![false; frames];
    if rho <= 0.0 {
        return raw;
    }
    // Spans are indexed by their last frame; starts run from -(span-1) so the
    // leading frames are reachable by `span` starts like every other frame.
    for last in 0..frames + span - 1 {
        if rng.random::<f64>() < rho {
            let lo = last.saturating_sub(span - 1);
            let hi = (last + 1).min(frames);
            raw[lo..hi].iter_mut().for_each(|m| *m = true);
        }
    }
    raw
}

/// Start probability for `frames`-long sequences such that the expected
/// coverage, counting the single redraw of an empty draw, equals the target.
/// Exact under the `Any` position rule, where an empty position set means no
/// masked frame at all.
pub fn length_start_probability(cfg: &MaskConfig, frames: usize) -> Result<f64> {
    let rho_inf = start_probability(cfg)?;
    let m = cfg.span_frames() as f64;
    let starts = (frames + cfg.span_frames() - 1) as f64;
    let c = cfg.target_coverage;
    let expected = |rho: f64| {
        let q = 1.0 - rho;
        (1.0 - q.powf(m)) * (1.0 + q.powf(starts))
    };
    // expected(ρ_inf) ≥ c and expected(0) = 0; bisect for the root.
    let (mut lo, mut hi) = (0.0, rho_inf);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Draws a mask for `frames` raw frames. An empty sub-sampled set is redrawn
/// once and then accepted as-is.
pub fn sample_mask<R: Rng + ?Sized>(frames: usize, cfg: &MaskConfig, rng: &mut R) -> Result<MaskPlan> {
    cfg.validate()?;
    if !cfg.enabled() {
        return Ok(MaskPlan::empty(frames, cfg.sub_sampling_factor));
    }
    let rho = length_start_probability(cfg, frames)?;
    sample_mask_with_probability(frames, cfg.span_frames(), rho, cfg, rng)
}

pub fn sample_mask_with_probability<R: Rng + ?Sized>(
    frames: usize,
    span: usize,
    rho: f64,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<MaskPlan> {
    if span == 0 || !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(
            "sample_mask",
            format!("span {span} frames, start probability {rho}"),
        ));
    }
    let s = cfg.sub_sampling_factor;
    let mut plan = MaskPlan::from_raw(draw_spans(frames, span, rho, rng), s, cfg.position_rule, rho);
    if plan.is_empty() {
        plan = MaskPlan::from_raw(draw_spans(frames, span, rho, rng), s, cfg.position_rule, rho);
    }
    Ok(plan)
}

/// Replaces masked frames; unmasked frames are copied bit-exactly.
pub fn apply_mask<R: Rng + ?Sized>(
    f: &FeatureSequence,
    plan: &MaskPlan,
    replacement: Replacement,
    rng: &mut R,
) -> Result<FeatureSequence> {
    if plan.num_frames() != f.num_frames() {
        return Err(Error::shape(
            "apply_mask",
            &[f.frames.shape(), &[plan.num_frames()]],
        ));
    }
    let dim = f.dim();
    let mut data = f.frames.data().to_vec();
    let noise = match replacement {
        Replacement::Noise { std } => Some(
            Normal::new(0.0f32, std as f32)
                .map_err(|e| Error::invalid("apply_mask", e.to_string()))?,
        ),
        Replacement::Zero => None,
    };
    for (t, row) in data.chunks_mut(dim).enumerate() {
        if !plan.raw_masked[t] {
            continue;
        }
        for v in row.iter_mut() {
            *v = match &noise {
                Some(n) => n.sample(rng),
                None => 0.0,
            };
        }
    }
    let mut out = f.clone();
    out.frames = Tensor::new(f.frames.shape().to_vec(), data)?;
    Ok(out)
}

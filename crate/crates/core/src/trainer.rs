//! Training loop: crop, normalize, pseudo-label, mask, encode, joint loss,
//! backward, Adam.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datasets::FeatureSet;
use crate::error::{Error, Result};
use crate::features::{normalize_features, random_crop, FeatureSequence, FeatureStats};
use crate::encoder::EncoderConfig;
use crate::masking::{apply_mask, sample_mask, MaskConfig, MaskPlan};
use crate::metrics::{evaluate, EvalReport, ModelView};
use crate::model::{batch_loss, batch_pseudo_hits, init_model, ModelConfig, Utterance};
use crate::numerics::{finite_difference_check, Coverage, GradCheckReport, Graph, ParamStore, Tensor};
use crate::optim::{adam_step, lr_schedule, AdamConfig, AdamState};
use crate::rpq::{init_quantizer, quantize, stack_frames, QuantizerConfig, QuantizerState};
use crate::seeds::{substream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    /// 5000 at full scale.
    pub warmup_steps: u64,
    /// 256 at full scale.
    pub batch_size: usize,
    pub total_steps: u64,
    pub lambda: f64,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps_adam: f64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 1e-3,
            warmup_steps: 500,
            batch_size: 32,
            total_steps: 2000,
            lambda: 0.5,
            seed: 0,
            betas: (0.9, 0.999),
            eps_adam: 1e-8,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::Config(format!("train: {reason}")));
        if self.warmup_steps == 0 {
            return fail("warmup_steps must be at least 1".into());
        }
        if self.total_steps < self.warmup_steps {
            return fail(format!(
                "total_steps {} is below warmup_steps {}",
                self.total_steps, self.warmup_steps
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.peak_lr > 0.0) {
            return fail(format!("peak_lr {}", self.peak_lr));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps_adam,
            clip_norm: self.clip_norm,
        }
    }
}

/// Everything a training run depends on besides the data.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub quantizer: QuantizerConfig,
    pub train: TrainConfig,
    /// Training crop length in frames.
    pub crop_frames: usize,
    /// z-score with training-set statistics; identity statistics otherwise.
    pub normalize: bool,
    /// Stored verbatim in the checkpoint.
    pub config_echo: serde_json::Value,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mask.validate()?;
        self.train.validate()?;
        let fail = |reason: String| Err(Error::Config(reason));
        if self.model.codebook_size != self.quantizer.codebook_size {
            return fail(format!(
                "model codebook size {} differs from quantizer codebook size {}",
                self.model.codebook_size, self.quantizer.codebook_size
            ));
        }
        if self.mask.sub_sampling_factor != self.model.encoder.sub_sampling_factor {
            return fail(format!(
                "mask sub-sampling factor {} differs from encoder factor {}",
                self.mask.sub_sampling_factor, self.model.encoder.sub_sampling_factor
            ));
        }
        if self.train.lambda > 0.0 && !self.mask.enabled() {
            return fail("lambda > 0 needs masked positions; set span_ms > 0 or lambda = 0".into());
        }
        if self.crop_frames < self.model.encoder.sub_sampling_factor {
            return fail(format!("crop of {} frames is too short", self.crop_frames));
        }
        Ok(())
    }

    pub fn quantizer_seed(&self) -> u64 {
        substream(self.train.seed, Stream::Quantizer, 0).random()
    }

    pub fn init_quantizer(&self) -> Result<QuantizerState> {
        init_quantizer(
            self.quantizer.codebook_dim,
            self.quantizer.codebook_size,
            self.model.feature_dim * self.model.encoder.sub_sampling_factor,
            self.quantizer_seed(),
        )
    }
}

/// One JSON-lines record per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss_s: f64,
    /// Absent in supervised-only mode or when nothing was masked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_u: Option<f64>,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_label_acc: Option<f64>,
    pub masked: usize,
    /// Wall-clock time since the run started; the only non-reproducible field.
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    /// Masked pseudo-label accuracy pooled over the last epoch's steps.
    pub final_epoch_pseudo_acc: Option<f64>,
    pub validation: Option<EvalReport>,
    pub quantizer_calls: usize,
}

impl TrainOutcome {
    pub fn view(&self, crop_frames: usize) -> ModelView<'_> {
        self.checkpoint.view(crop_frames)
    }
}

impl Checkpoint {
    pub fn view(&self, crop_frames: usize) -> ModelView<'_> {
        ModelView {
            model: &self.model,
            params: &self.params,
            stats: &self.stats,
            languages: &self.languages,
            crop_frames,
        }
    }
}

const CROP_INDEX: u64 = 1 << 40;

/// Item order for `epoch`: a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, Stream::Data, epoch));
    order
}

/// Crops, normalizes, pseudo-labels (when `quantizer` is given) and masks
/// the items of one batch. Randomness comes from the step's own substreams.
pub fn prepare_batch(
    setup: &TrainSetup,
    data: &FeatureSet,
    indices: &[usize],
    stats: &FeatureStats,
    quantizer: Option<&QuantizerState>,
    step: u64,
) -> Result<Vec<Utterance>> {
    let seed = setup.train.seed;
    let mut crop_rng = substream(seed, Stream::Data, CROP_INDEX + step);
    let mut mask_rng = substream(seed, Stream::Mask, step);
    let s = setup.model.encoder.sub_sampling_factor;
    indices
        .iter()
        .map(|&i| {
            let item = &data.items[i];
            let cropped = random_crop(&item.features, setup.crop_frames, &mut crop_rng)?;
            let clean = normalize_features(&cropped, stats)?;
            let targets = match quantizer {
                Some(q) => Some(quantize(&stack_frames(&clean, s)?, q)?),
                None => None,
            };
            let plan = sample_mask(clean.num_frames(), &setup.mask, &mut mask_rng)?;
            let features = apply_mask(&clean, &plan, setup.mask.replacement, &mut mask_rng)?;
            Ok(Utterance {
                features,
                label: item.label,
                targets,
                masked_positions: plan.masked_positions,
            })
        })
        .collect()
}

pub fn train(
    setup: &TrainSetup,
    data: &FeatureSet,
    eval: Option<&FeatureSet>,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutcome> {
    setup.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    if data.languages.len() != setup.model.num_langs {
        return Err(Error::Config(format!(
            "data has {} languages, model expects {}",
            data.languages.len(),
            setup.model.num_langs
        )));
    }
    let cfg = &setup.train;
    let stats = FeatureStats::from_sequences(data.items.iter().map(|it| &it.features))?;
    let stats = if setup.normalize { stats } else { FeatureStats::identity(stats.dim()) };
    if stats.dim() != setup.model.feature_dim {
        return Err(Error::Config(format!(
            "features have {} dimensions, model expects {}",
            stats.dim(),
            setup.model.feature_dim
        )));
    }
    let mut params = init_model(&setup.model, &mut substream(cfg.seed, Stream::Init, 0))?;
    let quantizer = setup.init_quantizer()?;
    let use_quantizer = cfg.lambda > 0.0;
    let mut adam = AdamState::new(&params);
    let adam_cfg = cfg.adam();

    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let last_epoch_from = cfg.total_steps.saturating_sub(steps_per_epoch) + 1;
    let mut order = Vec::new();
    let mut order_epoch = u64::MAX;
    let mut final_hits = (0usize, 0usize);
    let mut log = Vec::with_capacity(cfg.total_steps as usize);
    let started = Instant::now();

    for step in 1..=cfg.total_steps {
        let epoch = (step - 1) / steps_per_epoch;
        if epoch != order_epoch {
            order = epoch_order(cfg.seed, epoch, n);
            order_epoch = epoch;
        }
        let pos = ((step - 1) % steps_per_epoch) as usize * cfg.batch_size;
        let indices = &order[pos..(pos + cfg.batch_size).min(n)];
        let batch = prepare_batch(setup, data, indices, &stats, use_quantizer.then_some(&quantizer), step)?;

        let mut g = Graph::new();
        let vars = g.bind(&params);
        let loss = batch_loss(&mut g, &setup.model, &vars, &batch, cfg.lambda)?;
        let grads = g.backward(loss.total)?;
        let lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps)?;
        adam_step(&mut params, &grads, &mut adam, lr, &adam_cfg)?;

        let hits = batch_pseudo_hits(&g, &loss, &batch);
        if step >= last_epoch_from {
            final_hits.0 += hits.0;
            final_hits.1 += hits.1;
        }
        let record = StepLog {
            step,
            lr,
            loss_s: g.value(loss.supervised).item() as f64,
            loss_u: loss.unsupervised.map(|u| g.value(u).item() as f64),
            loss: g.value(loss.total).item() as f64,
            pseudo_label_acc: (hits.1 > 0).then(|| hits.0 as f64 / hits.1 as f64),
            masked: loss.masked_count,
            elapsed_ms: started.elapsed().as_millis() as u64,
        };
        on_step(&record);
        log.push(record);
    }

    let checkpoint = Checkpoint {
        config: setup.config_echo.clone(),
        model: setup.model.clone(),
        languages: data.languages.clone(),
        step: cfg.total_steps,
        params,
        adam,
        quantizer,
        stats,
    };
    let validation = match eval {
        Some(ev) => Some(evaluate(&checkpoint.view(setup.crop_frames), ev)?),
        None => None,
    };
    Ok(TrainOutcome {
        quantizer_calls: checkpoint.quantizer.calls(),
        final_epoch_pseudo_acc: (final_hits.1 > 0).then(|| final_hits.0 as f64 / final_hits.1 as f64),
        checkpoint,
        log,
        validation,
    })
}

/// Settings for checking the batch objective against central differences
/// on a shrunken copy of the configured model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub feature_dim: usize,
    pub num_langs: usize,
    pub codebook_size: usize,
    pub frames: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub step: f64,
    pub tolerance: f64,
    /// Probe at most this many elements per parameter; all when `None`.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            dim: 8,
            num_layers: 2,
            num_heads: 2,
            feature_dim: 16,
            num_langs: 3,
            codebook_size: 8,
            frames: 32,
            batch_size: 2,
            lambda: 0.5,
            step: 1e-4,
            tolerance: 1e-4,
            max_per_param: None,
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    /// `base` with the probe's dimensions; the MLM head taps the first block.
    pub fn model(&self, base: &EncoderConfig) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                dim: self.dim,
                num_layers: self.num_layers,
                num_heads: self.num_heads,
                tap_layer: 1,
                ..base.clone()
            },
            feature_dim: self.feature_dim,
            num_langs: self.num_langs,
            codebook_size: self.codebook_size,
        }
    }
}

/// Checks gradients of the full joint objective (masking, encoder, both
/// heads) in 64-bit precision on random features.
pub fn check_objective_gradients(
    base: &EncoderConfig,
    mask: &MaskConfig,
    codebook_dim: usize,
    gc: &GradcheckConfig,
) -> Result<GradCheckReport> {
    let model = gc.model(base);
    model.validate()?;
    mask.validate()?;
    let params: ParamStore<f64> = init_model(&model, &mut substream(gc.seed, Stream::Init, 0))?;
    let s = model.encoder.sub_sampling_factor;
    let q = init_quantizer(
        codebook_dim,
        model.codebook_size,
        model.feature_dim * s,
        substream(gc.seed, Stream::Quantizer, 0).random(),
    )?;
    let mut data_rng = substream(gc.seed, Stream::Data, 0);
    let mut mask_rng = substream(gc.seed, Stream::Mask, 0);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let batch = (0..gc.batch_size)
        .map(|b| {
            let frames = Tensor::from_fn([gc.frames, model.feature_dim], |_| normal.sample(&mut data_rng));
            let clean = FeatureSequence::new(frames, mask.frame_hop_ms as f64 / 1000.0, format!("probe{b}"))?;
            let targets = quantize(&stack_frames(&clean, s)?, &q)?;
            let plan = if mask.enabled() {
                sample_mask(gc.frames, mask, &mut mask_rng)?
            } else {
                MaskPlan::empty(gc.frames, s)
            };
            Ok(Utterance {
                features: apply_mask(&clean, &plan, mask.replacement, &mut mask_rng)?,
                label: b % model.num_langs,
                targets: Some(targets),
                masked_positions: plan.masked_positions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let coverage = gc.max_per_param.map_or(Coverage::All, Coverage::Strided);
    finite_difference_check(
        |g, vars| Ok(batch_loss(g, &model, vars, &batch, gc.lambda)?.total),
        &params,
        gc.step,
        gc.tolerance,
        coverage,
    )
}

//! Encoder plus both heads, and the batch objective that ties them together.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{check_encoder_params, encode, encode_batch, init_encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::numerics::{Graph, ParamStore, ParamVars, Scalar, Tensor, Var};
use crate::objectives::{
    classify_log_probs, head, joint_loss_var, mlm_log_probs, pool, row_argmax, CLASSIFIER, MLM_HEAD,
};
use crate::rpq::PseudoLabelSeq;

/// Standard deviation of the head weights at initialization. Small heads keep
/// the untrained losses at `ln N` and `ln M`.
pub const HEAD_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub feature_dim: usize,
    pub num_langs: usize,
    pub codebook_size: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.feature_dim == 0 || self.num_langs < 2 || self.codebook_size == 0 {
            return Err(Error::invalid(
                "model_config",
                format!(
                    "feature_dim {}, num_langs {}, codebook_size {}",
                    self.feature_dim, self.num_langs, self.codebook_size
                ),
            ));
        }
        Ok(())
    }
}

fn add_head<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize, out: usize) {
    let normal = Normal::new(0.0, HEAD_INIT_STD).expect("valid std");
    store.insert(
        format!("{name}.w"),
        Tensor::from_fn([dim, out], |_| T::lit(normal.sample(rng))),
    );
    store.insert(format!("{name}.b"), Tensor::zeros([out]));
}

pub fn init_model<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = init_encoder(&cfg.encoder, cfg.feature_dim, rng)?;
    let dim = cfg.encoder.dim;
    add_head(&mut store, rng, CLASSIFIER, dim, cfg.num_langs);
    add_head(&mut store, rng, MLM_HEAD, dim, cfg.codebook_size);
    Ok(store)
}

/// Verifies that `params` has every array `cfg` requires, with matching shapes.
pub fn check_model_params<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>) -> Result<()> {
    check_encoder_params(&cfg.encoder, cfg.feature_dim, params)?;
    let dim = cfg.encoder.dim;
    for (head, out) in [(CLASSIFIER, cfg.num_langs), (MLM_HEAD, cfg.codebook_size)] {
        for (suffix, shape) in [("w", vec![dim, out]), ("b", vec![out])] {
            let got = params.get(&format!("{head}.{suffix}"))?;
            if got.shape() != shape.as_slice() {
                return Err(Error::shape("model_params", &[&shape, got.shape()]));
            }
        }
    }
    Ok(())
}

/// One training utterance after cropping, normalization and masking.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub features: FeatureSequence,
    pub label: usize,
    /// Pseudo-labels of the unmasked input at sub-sampled rate; `None` when
    /// the unsupervised branch is off.
    pub targets: Option<PseudoLabelSeq>,
    pub masked_positions: Vec<usize>,
}

/// Graph handles for one batch objective.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: Var,
    /// Mean supervised loss over the batch.
    pub supervised: Var,
    /// Mean unsupervised loss over utterances with masked positions.
    pub unsupervised: Option<Var>,
    /// Language log-probabilities, `B×N`.
    pub log_probs: Var,
    /// Pseudo-label log-probabilities for all stacked positions, `ΣU×M`;
    /// absent when the unsupervised branch is off.
    pub mlm_log_probs: Option<Var>,
    /// Sub-sampled length of each utterance.
    pub segments: Vec<usize>,
    pub masked_count: usize,
}

fn stack_features<T: Scalar>(batch: &[Utterance], feature_dim: usize) -> Result<Tensor<T>> {
    let rows: usize = batch.iter().map(|u| u.features.num_frames()).sum();
    let mut data = Vec::with_capacity(rows * feature_dim);
    for u in batch {
        if u.features.dim() != feature_dim {
            return Err(Error::shape("batch_loss", &[u.features.frames.shape(), &[feature_dim]]));
        }
        data.extend(u.features.frames.data().iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new([rows, feature_dim], data)
}

fn check_targets(u: &Utterance, positions: usize, codes: usize) -> Result<()> {
    let targets = u.targets.as_ref().expect("checked by caller");
    let fail = |reason: String| Err(Error::invalid("unsupervised_loss", reason));
    if targets.len() != positions {
        return fail(format!("{} pseudo-labels for {positions} positions", targets.len()));
    }
    if let Some(&bad) = targets.labels.iter().find(|&&z| z >= codes) {
        return fail(format!("pseudo-label {bad} out of range for {codes} codes"));
    }
    if let Some(&bad) = u.masked_positions.iter().find(|&&t| t >= positions) {
        return fail(format!("masked position {bad} out of range for {positions} positions"));
    }
    Ok(())
}

/// `(1 − λ)·mean_b L_s + λ·mean_b L_u` over one row-stacked forward pass,
/// where the `L_u` mean runs over utterances with masked positions. The MLM
/// head is not evaluated when `λ = 0`.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    vars: &ParamVars,
    batch: &[Utterance],
    lambda: f64,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("batch_loss", "empty batch"));
    }
    let n = cfg.num_langs;
    if let Some(u) = batch.iter().find(|u| u.label >= n) {
        return Err(Error::invalid(
            "supervised_loss",
            format!("label {} out of range for {n} classes", u.label),
        ));
    }
    let frames: Vec<usize> = batch.iter().map(|u| u.features.num_frames()).collect();
    let x = g.constant(stack_features(batch, cfg.feature_dim)?);
    let enc = encode_batch(g, &cfg.encoder, vars, x, &frames)?;
    let rows: usize = enc.segments.iter().sum();
    let b = batch.len();

    // mean pooling per utterance as a B×ΣU averaging matrix
    let mut pool = Tensor::zeros([b, rows]);
    let mut offsets = Vec::with_capacity(b);
    let mut start = 0;
    for (i, &len) in enc.segments.iter().enumerate() {
        for r in start..start + len {
            pool.data_mut()[i * rows + r] = T::lit(1.0 / len as f64);
        }
        offsets.push(start);
        start += len;
    }
    let pool = g.constant(pool);
    let pooled = g.matmul(pool, enc.output)?;
    let logits = head(g, vars, CLASSIFIER, pooled)?;
    let log_probs = g.log_softmax(logits, 1)?;
    let mut y = Tensor::zeros([b, n]);
    for (i, u) in batch.iter().enumerate() {
        y.data_mut()[i * n + u.label] = T::lit(-1.0 / b as f64);
    }
    let y = g.constant(y);
    let picked = g.mul(log_probs, y)?;
    let supervised = g.sum(picked);

    let mut unsupervised = None;
    let mut mlm = None;
    let mut masked_count = 0;
    let active: Vec<usize> = (0..b).filter(|&i| batch[i].targets.is_some()).collect();
    if lambda > 0.0 && !active.is_empty() {
        let m = cfg.codebook_size;
        for &i in &active {
            check_targets(&batch[i], enc.segments[i], m)?;
        }
        let lq = mlm_log_probs(g, vars, enc.tapped)?;
        mlm = Some(lq);
        let contributing: Vec<usize> =
            active.into_iter().filter(|&i| !batch[i].masked_positions.is_empty()).collect();
        if !contributing.is_empty() {
            let mut rows_sel = Vec::new();
            let mut weights = Vec::new();
            for &i in &contributing {
                let u = &batch[i];
                let w = -1.0 / (u.masked_positions.len() * contributing.len()) as f64;
                let labels = &u.targets.as_ref().expect("active").labels;
                for &t in &u.masked_positions {
                    rows_sel.push(offsets[i] + t);
                    weights.push((labels[t], w));
                }
            }
            masked_count = rows_sel.len();
            let mut z = Tensor::zeros([rows_sel.len(), m]);
            for (r, &(label, w)) in weights.iter().enumerate() {
                z.data_mut()[r * m + label] = T::lit(w);
            }
            let selected = g.gather_rows(lq, &rows_sel)?;
            let z = g.constant(z);
            let picked = g.mul(selected, z)?;
            unsupervised = Some(g.sum(picked));
        }
    }
    let total = joint_loss_var(g, supervised, unsupervised, lambda)?;
    Ok(BatchLoss {
        total,
        supervised,
        unsupervised,
        log_probs,
        mlm_log_probs: mlm,
        segments: enc.segments,
        masked_count,
    })
}

/// Masked-position `(correct, total)` pseudo-label counts for a batch.
pub fn batch_pseudo_hits<T: Scalar>(g: &Graph<T>, loss: &BatchLoss, batch: &[Utterance]) -> (usize, usize) {
    let Some(lq) = loss.mlm_log_probs else {
        return (0, 0);
    };
    let lq = g.value(lq);
    let mut acc = (0, 0);
    let mut offset = 0;
    for (u, &len) in batch.iter().zip(&loss.segments) {
        if let Some(targets) = &u.targets {
            for &t in &u.masked_positions {
                acc.0 += usize::from(row_argmax(lq.row(offset + t)) == targets.labels[t]);
                acc.1 += 1;
            }
        }
        offset += len;
    }
    acc
}

/// Class probabilities and pooled embedding for one unmasked utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        row_argmax(&self.probs)
    }
}

pub fn predict<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>, features: &FeatureSequence) -> Result<Prediction> {
    let mut g = Graph::new();
    let vars = g.bind_frozen(params);
    let x = g.constant(features.frames.cast::<T>());
    let enc = encode(&mut g, &cfg.encoder, &vars, x)?;
    let pooled = pool(&mut g, enc.output)?;
    let lp = classify_log_probs(&mut g, &vars, enc.output)?;
    let to_f64 = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    Ok(Prediction {
        probs: to_f64(g.value(lp)).into_iter().map(f64::exp).collect(),
        embedding: to_f64(g.value(pooled)),
    })
}

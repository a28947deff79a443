//! Declarative run configuration: one JSON document, every field defaulted,
//! unknown keys rejected and listed together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datasets::{featurize, generate_synthetic, load_manifest, split, Dataset, FeatureSet};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, LogMel};
use crate::masking::MaskConfig;
use crate::model::ModelConfig;
use crate::rpq::QuantizerConfig;
use crate::trainer::{GradcheckConfig, TrainConfig, TrainSetup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticData {
    pub num_langs: usize,
    pub utts_per_lang: usize,
    pub duration_s: f64,
    pub seed: u64,
    /// Per-language share of utterances used for training.
    pub train_frac: f64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            num_langs: 4,
            utts_per_lang: 70,
            duration_s: 3.0,
            seed: 0,
            train_frac: 50.0 / 70.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestData {
    pub path: PathBuf,
    /// Held-out manifest; when absent `path` is split stratified.
    #[serde(default)]
    pub eval_path: Option<PathBuf>,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_train_frac() -> f64 {
    0.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic(SyntheticData),
    Manifest(ManifestData),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticData::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub spans_ms: Vec<u32>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            spans_ms: (0..=6).map(|i| i * 80).collect(),
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub mask: MaskConfig,
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    pub sweep: SweepConfig,
    pub gradcheck: GradcheckConfig,
}

/// Train and held-out splits sharing one language inventory.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
}

#[derive(Clone, Debug)]
pub struct FeatureSplits {
    pub train: FeatureSet,
    pub eval: FeatureSet,
}

fn unknown_field(msg: &str) -> Option<&str> {
    let rest = msg.strip_prefix("unknown field `")?;
    rest.split('`').next()
}

/// Removes `key` from the object at `path`, or at its parent when the path
/// already ends in `key`. Returns the dotted location of the removed key.
fn remove_key(value: &mut Value, path: &serde_path_to_error::Path, key: &str) -> Option<String> {
    use serde_path_to_error::Segment;
    let mut segs: Vec<&Segment> = path.iter().collect();
    if matches!(segs.last(), Some(Segment::Map { key: k }) if k == key) {
        segs.pop();
    }
    let mut parts: Vec<String> = Vec::new();
    let mut node = value;
    for seg in segs {
        match seg {
            Segment::Map { key } => parts.push(key.clone()),
            Segment::Seq { index } => parts.push(index.to_string()),
            _ => {}
        }
        node = match (seg, node) {
            (Segment::Map { key }, Value::Object(m)) => m.get_mut(key)?,
            (Segment::Seq { index }, Value::Array(a)) => a.get_mut(*index)?,
            (Segment::Enum { .. } | Segment::Unknown, n) => n,
            _ => return None,
        };
    }
    match node {
        Value::Object(m) => m.remove(key).map(|_| {
            parts.push(key.to_string());
            parts.join(".")
        }),
        _ => None,
    }
}

impl RunConfig {
    /// Parses and validates. Every unknown key is reported, not just the
    /// first.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let mut unknown = Vec::new();
        loop {
            match serde_path_to_error::deserialize::<_, RunConfig>(value.clone()) {
                Ok(cfg) if unknown.is_empty() => {
                    cfg.validate()?;
                    return Ok(cfg);
                }
                Ok(_) => break,
                Err(e) => {
                    let path = e.path().clone();
                    let msg = e.into_inner().to_string();
                    let removed = unknown_field(&msg).and_then(|key| remove_key(&mut value, &path, key));
                    match removed {
                        Some(full) => unknown.push(full),
                        None if unknown.is_empty() => {
                            return Err(Error::Config(format!("{path}: {msg}")));
                        }
                        None => break,
                    }
                }
            }
        }
        Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
    }

    /// Reads a config file. Relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DataConfig::Manifest(m) = &mut cfg.data {
            m.path = base.join(&m.path);
            if let Some(e) = &mut m.eval_path {
                *e = base.join(&*e);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::Config(reason));
        self.mask.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        LogMel::new(self.features.clone())?;
        let hop_ms = self.features.frame_hop_s() * 1000.0;
        if (hop_ms - self.mask.frame_hop_ms as f64).abs() > 1e-9 {
            return fail(format!(
                "mask.frame_hop_ms {} differs from the {hop_ms} ms feature hop",
                self.mask.frame_hop_ms
            ));
        }
        if self.mask.sub_sampling_factor != self.encoder.sub_sampling_factor {
            return fail(format!(
                "mask.sub_sampling_factor {} differs from encoder.sub_sampling_factor {}",
                self.mask.sub_sampling_factor, self.encoder.sub_sampling_factor
            ));
        }
        let frac = match &self.data {
            DataConfig::Synthetic(s) => {
                if s.num_langs < 2 || s.utts_per_lang < 2 || s.duration_s <= 0.0 {
                    return fail(format!("invalid synthetic data {s:?}"));
                }
                Some(s.train_frac)
            }
            DataConfig::Manifest(m) => m.eval_path.is_none().then_some(m.train_frac),
        };
        if let Some(f) = frac {
            if !(f > 0.0 && f < 1.0) {
                return fail(format!("train_frac {f} not in (0, 1)"));
            }
        }
        if self.sweep.spans_ms.is_empty() || self.sweep.seeds.is_empty() {
            return fail("sweep needs at least one span and one seed".into());
        }
        Ok(())
    }

    /// The config as stored in every artifact.
    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn frontend(&self) -> Result<LogMel> {
        LogMel::new(self.features.clone())
    }

    pub fn crop_frames(&self) -> usize {
        self.features.crop_frames()
    }

    pub fn model_config(&self, num_langs: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            feature_dim: self.features.n_mels,
            num_langs,
            codebook_size: self.quantizer.codebook_size,
        }
    }

    pub fn train_setup(&self, num_langs: usize) -> Result<TrainSetup> {
        let setup = TrainSetup {
            model: self.model_config(num_langs),
            mask: self.mask.clone(),
            quantizer: self.quantizer.clone(),
            train: self.train.clone(),
            crop_frames: self.crop_frames(),
            normalize: self.features.normalize,
            config_echo: self.echo(),
        };
        setup.validate()?;
        Ok(setup)
    }

    pub fn datasets(&self) -> Result<Splits> {
        let (train, eval) = match &self.data {
            DataConfig::Synthetic(s) => {
                let corpus = generate_synthetic(s.num_langs, s.utts_per_lang, s.duration_s, s.seed)?;
                split(&corpus.dataset, s.train_frac, s.seed)?
            }
            DataConfig::Manifest(m) => {
                let train = load_manifest(&m.path)?.dataset;
                match &m.eval_path {
                    Some(p) => {
                        let eval = load_manifest(p)?.dataset;
                        if eval.languages != train.languages {
                            return Err(Error::Config(format!(
                                "eval languages {:?} differ from train languages {:?}",
                                eval.languages, train.languages
                            )));
                        }
                        (train, eval)
                    }
                    None => split(&train, m.train_frac, m.split_seed)?,
                }
            }
        };
        Ok(Splits { train, eval })
    }

    pub fn features(&self) -> Result<FeatureSplits> {
        let splits = self.datasets()?;
        let frontend = self.frontend()?;
        Ok(FeatureSplits {
            train: featurize(&splits.train, &frontend)?,
            eval: featurize(&splits.eval, &frontend)?,
        })
    }
}

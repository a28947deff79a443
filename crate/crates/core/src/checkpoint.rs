//! Binary checkpoint: a `u64` little-endian length, a UTF-8 JSON header
//! describing every array, then the arrays as little-endian `f32` in header
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureStats;
use crate::model::{check_model_params, ModelConfig};
use crate::numerics::{ParamStore, Tensor};
use crate::optim::AdamState;
use crate::rpq::QuantizerState;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Echo of the full run configuration.
    pub config: serde_json::Value,
    pub model: ModelConfig,
    pub languages: Vec<String>,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub adam: AdamState,
    pub quantizer: QuantizerState,
    pub stats: FeatureStats,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset from the start of the body.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: serde_json::Value,
    model: ModelConfig,
    languages: Vec<String>,
    step: u64,
    adam_t: u64,
    quantizer_seed: u64,
    arrays: Vec<ArrayEntry>,
}

const PARAM: &str = "param/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";
const PROJECTION: &str = "quantizer/projection";
const CODEBOOK: &str = "quantizer/codebook";
const MEAN: &str = "features/mean";
const STD: &str = "features/std";

fn vector(v: &[f32]) -> Tensor<f32> {
    Tensor::new([v.len()], v.to_vec()).expect("1-d")
}

impl Checkpoint {
    fn arrays(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (prefix, store) in [(PARAM, &self.params), (ADAM_M, &self.adam.m), (ADAM_V, &self.adam.v)] {
            out.extend(store.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())));
        }
        out.push((PROJECTION.into(), self.quantizer.projection().clone()));
        out.push((CODEBOOK.into(), self.quantizer.codebook().clone()));
        out.push((MEAN.into(), vector(&self.stats.mean)));
        out.push((STD.into(), vector(&self.stats.std)));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arrays = self.arrays();
        let mut offset = 0u64;
        let entries = arrays
            .iter()
            .map(|(name, t)| {
                let e = ArrayEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            model: self.model.clone(),
            languages: self.languages.clone(),
            step: self.step,
            adam_t: self.adam.t,
            quantizer_seed: self.quantizer.seed(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("truncated length prefix".into()))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let body_start = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {header_len} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[8..body_start])?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let body = &bytes[body_start..];

        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        let (mut projection, mut codebook, mut mean, mut std) = (None, None, None, None);
        let mut expected_offset = 0u64;
        for e in &header.arrays {
            if e.dtype != "f32" {
                return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(bad(format!("{}: offset {} out of order", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let chunk = body
                .get(start..start + 4 * n)
                .ok_or_else(|| bad(format!("{}: body truncated", e.name)))?;
            expected_offset += 4 * n as u64;
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            let name = e.name.as_str();
            if let Some(n) = name.strip_prefix(PARAM) {
                params.insert(n, t);
            } else if let Some(n) = name.strip_prefix(ADAM_M) {
                m.insert(n, t);
            } else if let Some(n) = name.strip_prefix(ADAM_V) {
                v.insert(n, t);
            } else {
                let slot = match name {
                    PROJECTION => &mut projection,
                    CODEBOOK => &mut codebook,
                    MEAN => &mut mean,
                    STD => &mut std,
                    _ => return Err(bad(format!("unknown array {name}"))),
                };
                *slot = Some(t);
            }
        }
        if expected_offset as usize != body.len() {
            return Err(bad(format!(
                "{} trailing bytes after arrays",
                body.len() as i64 - expected_offset as i64
            )));
        }
        let missing = |what: &str| bad(format!("missing array {what}"));
        let quantizer = QuantizerState::from_parts(
            projection.ok_or_else(|| missing(PROJECTION))?,
            codebook.ok_or_else(|| missing(CODEBOOK))?,
            header.quantizer_seed,
        )?;
        let stats = FeatureStats {
            mean: mean.ok_or_else(|| missing(MEAN))?.into_data(),
            std: std.ok_or_else(|| missing(STD))?.into_data(),
        };
        check_model_params(&header.model, &params)?;
        if header.languages.len() != header.model.num_langs {
            return Err(bad(format!(
                "{} languages for a {}-way classifier",
                header.languages.len(),
                header.model.num_langs
            )));
        }
        Ok(Checkpoint {
            config: header.config,
            model: header.model,
            languages: header.languages,
            step: header.step,
            params,
            adam: AdamState { m, v, t: header.adam_t },
            quantizer,
            stats,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

//! Convolutional sub-sampling front end followed by Conformer-style blocks.
//!
//! Each block is
//! `x + ½FFN → + MHSA → + ConvModule → + ½FFN → LayerNorm`, with every
//! sub-module pre-normed. Positions are absolute sinusoids added once after
//! sub-sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, ParamVars, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// 16 in Conformer(S).
    pub num_layers: usize,
    /// 144 in Conformer(S).
    pub dim: usize,
    pub num_heads: usize,
    pub conv_kernel: usize,
    pub ff_mult: usize,
    pub sub_sampling_factor: usize,
    /// 1-based index of the block whose output feeds the MLM head.
    pub tap_layer: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 4,
            dim: 64,
            num_heads: 4,
            conv_kernel: 15,
            ff_mult: 4,
            sub_sampling_factor: 4,
            tap_layer: 3,
        }
    }
}

impl EncoderConfig {
    /// Conformer(S) dimensions, tapping the 15th of 16 blocks.
    pub fn full_scale() -> Self {
        EncoderConfig {
            num_layers: 16,
            dim: 144,
            num_heads: 4,
            tap_layer: 15,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::invalid("encoder_config", reason));
        if self.num_layers == 0 || self.dim == 0 || self.num_heads == 0 || self.ff_mult == 0 {
            return fail(format!("sizes must be positive: {self:?}"));
        }
        if !self.dim.is_multiple_of(self.num_heads) {
            return fail(format!("dim {} not divisible by {} heads", self.dim, self.num_heads));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return fail(format!("conv kernel {} must be odd", self.conv_kernel));
        }
        if !(1..=self.num_layers).contains(&self.tap_layer) {
            return fail(format!(
                "tap layer {} outside 1..={}",
                self.tap_layer, self.num_layers
            ));
        }
        if !self.sub_sampling_factor.is_power_of_two() {
            return fail(format!(
                "sub-sampling factor {} must be a power of two",
                self.sub_sampling_factor
            ));
        }
        Ok(())
    }

    /// Stride-2 convolutions in the front end.
    pub fn num_subsample_convs(&self) -> usize {
        self.sub_sampling_factor.trailing_zeros() as usize
    }

    pub fn output_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.sub_sampling_factor)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Output of the last block, `U×dim`.
    pub output: Var,
    /// Output of block `tap_layer`, `U×dim`.
    pub tapped: Var,
    /// Sub-sampled length of each stacked utterance.
    pub segments: Vec<usize>,
}

fn xavier<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn([fan_in, fan_out], |_| T::lit(rng.random_range(-b..=b)))
}

fn add_linear<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) {
    store.insert(format!("{name}.w"), xavier(rng, fan_in, fan_out));
    store.insert(format!("{name}.b"), Tensor::zeros([fan_out]));
}

fn add_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Tensor::full([dim], T::one()));
    store.insert(format!("{name}.b"), Tensor::zeros([dim]));
}

pub fn block_prefix(layer: usize) -> String {
    format!("enc.block{layer:02}")
}

/// Draws encoder parameters for `feature_dim`-dimensional input frames.
pub fn init_encoder<T: Scalar, R: Rng + ?Sized>(
    cfg: &EncoderConfig,
    feature_dim: usize,
    rng: &mut R,
) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let d = cfg.dim;
    let mut channels = feature_dim;
    for i in 0..cfg.num_subsample_convs() {
        add_linear(&mut store, rng, &format!("enc.sub.conv{i}"), 3 * channels, d);
        channels = d;
    }
    add_linear(&mut store, rng, "enc.sub.out", channels, d);

    for layer in 0..cfg.num_layers {
        let p = block_prefix(layer);
        for ff in ["ff1", "ff2"] {
            add_norm(&mut store, &format!("{p}.{ff}.ln"), d);
            add_linear(&mut store, rng, &format!("{p}.{ff}.up"), d, d * cfg.ff_mult);
            add_linear(&mut store, rng, &format!("{p}.{ff}.down"), d * cfg.ff_mult, d);
        }
        add_norm(&mut store, &format!("{p}.att.ln"), d);
        for proj in ["q", "k", "v", "o"] {
            add_linear(&mut store, rng, &format!("{p}.att.{proj}"), d, d);
        }
        add_norm(&mut store, &format!("{p}.conv.ln"), d);
        add_linear(&mut store, rng, &format!("{p}.conv.pw1"), d, 2 * d);
        let kb = 1.0 / (cfg.conv_kernel as f64).sqrt();
        store.insert(
            format!("{p}.conv.dw.w"),
            Tensor::from_fn([cfg.conv_kernel, d], |_| T::lit(rng.random_range(-kb..=kb))),
        );
        store.insert(format!("{p}.conv.dw.b"), Tensor::zeros([d]));
        add_linear(&mut store, rng, &format!("{p}.conv.pw2"), d, d);
        add_norm(&mut store, &format!("{p}.out_ln"), d);
    }
    Ok(store)
}

/// Checks that `store` holds every encoder parameter with the right shape.
pub fn check_encoder_params<T: Scalar>(
    cfg: &EncoderConfig,
    feature_dim: usize,
    store: &ParamStore<T>,
) -> Result<()> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let reference: ParamStore<T> = init_encoder(cfg, feature_dim, &mut rng)?;
    for (name, t) in reference.iter() {
        let have = store.get(name)?;
        if have.shape() != t.shape() {
            return Err(Error::Shape {
                op: "encoder_params",
                shapes: vec![have.shape().to_vec(), t.shape().to_vec()],
            });
        }
    }
    Ok(())
}

fn linear<T: Scalar>(g: &mut Graph<T>, vars: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let w = vars.get(&format!("{name}.w"))?;
    let b = vars.get(&format!("{name}.b"))?;
    g.linear(x, w, b)
}

fn norm<T: Scalar>(g: &mut Graph<T>, vars: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let gamma = vars.get(&format!("{name}.g"))?;
    let beta = vars.get(&format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Kernel-3, stride-2, padding-1 convolution over time, applied to each
/// segment of a row-stacked batch independently. Implemented as a gathered
/// `⌈T/2⌉×3C` patch matrix times a `3C×C′` weight.
fn strided_conv<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    name: &str,
    x: Var,
    segs: &[usize],
) -> Result<(Var, Vec<usize>)> {
    let (rows, channels) = (g.shape(x)[0], g.shape(x)[1]);
    let zero = g.constant(Tensor::zeros([1, channels]));
    let padded = g.concat(&[x, zero], 0)?;
    let mut indices = Vec::new();
    let mut out_segs = Vec::with_capacity(segs.len());
    let mut start = 0;
    for &len in segs {
        let out = len.div_ceil(2);
        for o in 0..out {
            for j in [2 * o as isize - 1, 2 * o as isize, 2 * o as isize + 1] {
                let inside = j >= 0 && (j as usize) < len;
                indices.push(if inside { start + j as usize } else { rows });
            }
        }
        out_segs.push(out);
        start += len;
    }
    let total: usize = out_segs.iter().sum();
    let patches = g.gather_rows(padded, &indices)?;
    let patches = g.reshape(patches, &[total, 3 * channels])?;
    let y = linear(g, vars, name, patches)?;
    Ok((g.swish(y), out_segs))
}

pub fn sinusoidal_positions<T: Scalar>(steps: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn([steps, dim], |i| {
        let (pos, c) = ((i / dim) as f64, i % dim);
        let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / dim as f64);
        T::lit(if c % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        })
    })
}

fn check_segments(rows: usize, segs: &[usize]) -> Result<()> {
    if segs.is_empty() || segs.iter().sum::<usize>() != rows {
        return Err(Error::invalid(
            "encode",
            format!("segments {segs:?} do not cover {rows} rows"),
        ));
    }
    Ok(())
}

/// Front end: strided convolutions, projection to `dim`, positions.
/// Returns the sub-sampled segment lengths.
pub fn sub_sample<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    vars: &ParamVars,
    x: Var,
    segs: &[usize],
) -> Result<(Var, Vec<usize>)> {
    check_segments(g.shape(x)[0], segs)?;
    if let Some(&short) = segs.iter().find(|&&l| l < cfg.sub_sampling_factor) {
        return Err(Error::invalid(
            "sub_sample",
            format!("{short} frames is fewer than the sub-sampling factor {}", cfg.sub_sampling_factor),
        ));
    }
    let (mut h, mut segs) = (x, segs.to_vec());
    for i in 0..cfg.num_subsample_convs() {
        (h, segs) = strided_conv(g, vars, &format!("enc.sub.conv{i}"), h, &segs)?;
    }
    let h = linear(g, vars, "enc.sub.out", h)?;
    let mut pos = Vec::with_capacity(g.value(h).len());
    for &len in &segs {
        pos.extend_from_slice(sinusoidal_positions::<T>(len, cfg.dim).data());
    }
    let pos = g.constant(Tensor::new([segs.iter().sum::<usize>(), cfg.dim], pos)?);
    Ok((g.add(h, pos)?, segs))
}

/// Applies `f` to each segment's rows and restacks the results.
fn per_segment<T: Scalar>(
    g: &mut Graph<T>,
    xs: &[Var],
    segs: &[usize],
    mut f: impl FnMut(&mut Graph<T>, &[Var]) -> Result<Var>,
) -> Result<Var> {
    if segs.len() == 1 {
        return f(g, xs);
    }
    let mut outs = Vec::with_capacity(segs.len());
    let mut start = 0;
    for &len in segs {
        let parts = xs
            .iter()
            .map(|&x| g.slice(x, 0, start, start + len))
            .collect::<Result<Vec<_>>>()?;
        outs.push(f(g, &parts)?);
        start += len;
    }
    g.concat(&outs, 0)
}

fn feed_forward<T: Scalar>(g: &mut Graph<T>, vars: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let h = norm(g, vars, &format!("{name}.ln"), x)?;
    let h = linear(g, vars, &format!("{name}.up"), h)?;
    let h = g.swish(h);
    linear(g, vars, &format!("{name}.down"), h)
}

fn self_attention<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    vars: &ParamVars,
    name: &str,
    x: Var,
    segs: &[usize],
) -> Result<Var> {
    let h = norm(g, vars, &format!("{name}.ln"), x)?;
    let q = linear(g, vars, &format!("{name}.q"), h)?;
    let k = linear(g, vars, &format!("{name}.k"), h)?;
    let v = linear(g, vars, &format!("{name}.v"), h)?;
    let head_dim = cfg.dim / cfg.num_heads;
    let scale = T::lit(1.0 / (head_dim as f64).sqrt());
    let ctx = per_segment(g, &[q, k, v], segs, |g, qkv| {
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let (lo, hi) = (head * head_dim, (head + 1) * head_dim);
            let qh = g.slice(qkv[0], 1, lo, hi)?;
            let kh = g.slice(qkv[1], 1, lo, hi)?;
            let vh = g.slice(qkv[2], 1, lo, hi)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores, 1)?;
            heads.push(g.matmul(weights, vh)?);
        }
        g.concat(&heads, 1)
    })?;
    linear(g, vars, &format!("{name}.o"), ctx)
}

fn conv_module<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    vars: &ParamVars,
    name: &str,
    x: Var,
    segs: &[usize],
) -> Result<Var> {
    let d = cfg.dim;
    let h = norm(g, vars, &format!("{name}.ln"), x)?;
    let h = linear(g, vars, &format!("{name}.pw1"), h)?;
    // GLU
    let a = g.slice(h, 1, 0, d)?;
    let b = g.slice(h, 1, d, 2 * d)?;
    let gate = g.sigmoid(b);
    let h = g.mul(a, gate)?;
    let kernel = vars.get(&format!("{name}.dw.w"))?;
    let h = per_segment(g, &[h], segs, |g, x| g.depthwise_conv1d(x[0], kernel))?;
    let bias = vars.get(&format!("{name}.dw.b"))?;
    let bias = g.expand_rows(bias, g.shape(h)[0])?;
    let h = g.add(h, bias)?;
    let h = g.swish(h);
    linear(g, vars, &format!("{name}.pw2"), h)
}

/// One Conformer block over a row-stacked batch with sub-sampled segment
/// lengths `segs`; `prefix` selects its parameters.
pub fn conformer_block<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
    segs: &[usize],
) -> Result<Var> {
    check_segments(g.shape(x)[0], segs)?;
    let half = T::lit(0.5);
    let f = feed_forward(g, vars, &format!("{prefix}.ff1"), x)?;
    let f = g.scale(f, half);
    let x = g.add(x, f)?;
    let a = self_attention(g, cfg, vars, &format!("{prefix}.att"), x, segs)?;
    let x = g.add(x, a)?;
    let c = conv_module(g, cfg, vars, &format!("{prefix}.conv"), x, segs)?;
    let x = g.add(x, c)?;
    let f = feed_forward(g, vars, &format!("{prefix}.ff2"), x)?;
    let f = g.scale(f, half);
    let x = g.add(x, f)?;
    norm(g, vars, &format!("{prefix}.out_ln"), x)
}

/// Runs the front end and every block on a `T×F` feature matrix.
pub fn encode<T: Scalar>(g: &mut Graph<T>, cfg: &EncoderConfig, vars: &ParamVars, features: Var) -> Result<EncoderOutput> {
    let rows = g.shape(features)[0];
    encode_batch(g, cfg, vars, features, &[rows])
}

/// Encodes utterances stacked along rows; `frames[b]` is the length of
/// utterance `b`. Utterances never attend to or convolve across each other.
pub fn encode_batch<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    vars: &ParamVars,
    features: Var,
    frames: &[usize],
) -> Result<EncoderOutput> {
    cfg.validate()?;
    let (mut h, segments) = sub_sample(g, cfg, vars, features, frames)?;
    let mut tapped = h;
    for layer in 0..cfg.num_layers {
        h = conformer_block(g, cfg, vars, &block_prefix(layer), h, &segments)?;
        if layer + 1 == cfg.tap_layer {
            tapped = h;
        }
    }
    Ok(EncoderOutput {
        output: h,
        tapped,
        segments,
    })
}

//! Random-projection quantizer producing frame-level pseudo-labels.
//!
//! A stacked feature frame `x` is labelled with
//! `argmin_j ‖ Aₓ/‖Aₓ‖ − c_j ‖` where the projection `A` and the unit-norm
//! codebook `{c_j}` are drawn once from a seed and never trained.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub codebook_dim: usize,
    pub codebook_size: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            codebook_dim: 16,
            codebook_size: 256,
        }
    }
}

/// Frozen projection and codebook.
#[derive(Clone, Debug)]
pub struct QuantizerState {
    projection: Tensor<f32>,
    codebook: Tensor<f32>,
    seed: u64,
    calls: Arc<AtomicUsize>,
}

impl PartialEq for QuantizerState {
    fn eq(&self, other: &Self) -> bool {
        self.projection == other.projection
            && self.codebook == other.codebook
            && self.seed == other.seed
    }
}

/// One codebook index per sub-sampled position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelSeq {
    pub labels: Vec<usize>,
}

impl PseudoLabelSeq {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Draws `A ~ U(−b, b)` with `b = sqrt(6 / (D + F′))` and a standard-normal
/// codebook whose rows are scaled to unit length.
pub fn init_quantizer(dim: usize, size: usize, input_dim: usize, seed: u64) -> Result<QuantizerState> {
    if dim == 0 || size == 0 || input_dim == 0 {
        return Err(Error::invalid(
            "init_quantizer",
            format!("dimensions must be positive (D={dim}, M={size}, F'={input_dim})"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (6.0 / (dim + input_dim) as f64).sqrt() as f32;
    let projection = Tensor::from_fn([dim, input_dim], |_| rng.random_range(-bound..=bound));
    let mut codebook = Vec::with_capacity(size * dim);
    for _ in 0..size {
        let row: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        codebook.extend(row.iter().map(|v| (v / norm) as f32));
    }
    QuantizerState::from_parts(projection, Tensor::new([size, dim], codebook)?, seed)
}

impl QuantizerState {
    pub fn from_parts(projection: Tensor<f32>, codebook: Tensor<f32>, seed: u64) -> Result<Self> {
        let (ps, cs) = (projection.shape(), codebook.shape());
        if ps.len() != 2 || cs.len() != 2 || ps[0] != cs[1] {
            return Err(Error::shape("quantizer", &[ps, cs]));
        }
        for j in 0..cs[0] {
            let norm = codebook.row(j).iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(
                    "quantizer",
                    format!("codebook row {j} has norm {norm}"),
                ));
            }
        }
        Ok(QuantizerState {
            projection,
            codebook,
            seed,
            calls: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn projection(&self) -> &Tensor<f32> {
        &self.projection
    }

    pub fn codebook(&self) -> &Tensor<f32> {
        &self.codebook
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn codebook_dim(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.projection.shape()[1]
    }

    /// Number of [`quantize`] invocations on this state (shared by clones).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Nearest codebook entry to the normalized projection of `x`.
    pub fn label<T: Scalar>(&self, x: &[T]) -> usize {
        let d = self.codebook_dim();
        let f = self.input_dim();
        let mut v = vec![T::zero(); d];
        for (i, vi) in v.iter_mut().enumerate() {
            let row = &self.projection.data()[i * f..(i + 1) * f];
            *vi = row.iter().zip(x).map(|(&a, &b)| T::lit(a as f64) * b).sum();
        }
        let norm = v.iter().map(|&e| e * e).sum::<T>().sqrt();
        if !(norm.as_f64() >= 1e-12) {
            return 0;
        }
        v.iter_mut().for_each(|e| *e = *e / norm);
        let mut best = (0, T::infinity());
        for j in 0..self.codebook_size() {
            let dist = self
                .codebook
                .row(j)
                .iter()
                .zip(&v)
                .map(|(&c, &e)| {
                    let diff = e - T::lit(c as f64);
                    diff * diff
                })
                .sum::<T>();
            if dist < best.1 {
                best = (j, dist);
            }
        }
        best.0
    }
}

/// Concatenates each run of `s` frames into one row; the final row is
/// zero-padded to a full stack.
pub fn stack_frames(f: &FeatureSequence, s: usize) -> Result<Tensor<f32>> {
    if s == 0 {
        return Err(Error::invalid("stack_frames", "stacking factor must be ≥ 1"));
    }
    let (t, dim) = (f.num_frames(), f.dim());
    let rows = t.div_ceil(s);
    let mut data = vec![0.0f32; rows * s * dim];
    data[..t * dim].copy_from_slice(f.frames.data());
    Tensor::new([rows, s * dim], data)
}

/// Labels every row of a `U×F′` stacked matrix.
pub fn quantize<T: Scalar>(stacked: &Tensor<T>, q: &QuantizerState) -> Result<PseudoLabelSeq> {
    if stacked.shape().len() != 2 || stacked.shape()[1] != q.input_dim() {
        return Err(Error::shape(
            "quantize",
            &[stacked.shape(), &[q.codebook_dim(), q.input_dim()]],
        ));
    }
    q.calls.fetch_add(1, Ordering::Relaxed);
    let labels = (0..stacked.rows()).map(|u| q.label(stacked.row(u))).collect();
    Ok(PseudoLabelSeq { labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
        let n = Normal::new(0.0f32, 1.0).unwrap();
        Tensor::from_fn([rows, cols], |_| rng.sample(n))
    }

    #[test]
    fn projection_within_xavier_bound() {
        let q = init_quantizer(16, 64, 320, 1).unwrap();
        let b = (6.0f64 / 336.0).sqrt() as f32;
        assert!(q.projection().data().iter().all(|v| v.abs() <= b));
    }

    #[test]
    fn codebook_rows_unit_norm() {
        let q = init_quantizer(16, 1024, 320, 2).unwrap();
        for j in 0..1024 {
            let n: f64 = q.codebook().row(j).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn same_seed_same_state() {
        let a = init_quantizer(16, 64, 80, 9).unwrap();
        let b = init_quantizer(16, 64, 80, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_quantizer(16, 64, 80, 10).unwrap());
        assert!(init_quantizer(0, 64, 80, 9).is_err());
    }

    fn seq(t: usize, dim: usize) -> FeatureSequence {
        let frames = Tensor::from_fn([t, dim], |i| i as f32);
        FeatureSequence::new(frames, 0.01, "s").unwrap()
    }

    #[test]
    fn stacking_layouts() {
        let f = seq(8, 3);
        assert_eq!(stack_frames(&f, 1).unwrap(), f.frames);

        let s = stack_frames(&f, 4).unwrap();
        assert_eq!(s.shape(), &[2, 12]);
        assert_eq!(s.row(0), (0..12).map(|v| v as f32).collect::<Vec<_>>().as_slice());

        let s = stack_frames(&seq(7, 3), 4).unwrap();
        assert_eq!(s.shape(), &[2, 12]);
        let expected: Vec<f32> = (12..21).map(|v| v as f32).chain([0.0; 3]).collect();
        assert_eq!(s.row(1), expected.as_slice());
    }

    #[test]
    fn exact_codeword_gets_its_label() {
        // Identity projection: a scaled codeword normalizes back onto itself.
        let d = 4;
        let projection = Tensor::identity(d);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = Vec::new();
        for _ in 0..8 {
            let r: Vec<f32> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = r.iter().map(|v| v * v).sum::<f32>().sqrt();
            rows.push(r.iter().map(|v| v / n).collect::<Vec<f32>>());
        }
        let codebook = Tensor::from_rows(&rows).unwrap();
        let q = QuantizerState::from_parts(projection, codebook.clone(), 0).unwrap();
        let x = Tensor::new([1, d], codebook.row(5).iter().map(|v| v * 3.0).collect()).unwrap();
        assert_eq!(quantize(&x, &q).unwrap().labels, vec![5]);
    }

    #[test]
    fn argmin_distance_equals_argmax_cosine() {
        let q = init_quantizer(16, 256, 80, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_rows(&mut rng, 1000, 80);
        let labels = quantize(&x, &q).unwrap().labels;
        for (u, &label) in labels.iter().enumerate() {
            let v: Vec<f64> = (0..16)
                .map(|i| {
                    q.projection().row(i).iter().zip(x.row(u)).map(|(&a, &b)| a as f64 * b as f64).sum()
                })
                .collect();
            let dots: Vec<f64> = (0..256)
                .map(|j| q.codebook().row(j).iter().zip(&v).map(|(&c, &e)| c as f64 * e).sum())
                .collect();
            let best = (0..256).max_by(|&a, &b| dots[a].total_cmp(&dots[b])).unwrap();
            assert_eq!(label, best, "row {u}");
        }
    }

    #[test]
    fn positive_scaling_keeps_labels() {
        let q = init_quantizer(16, 64, 80, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_rows(&mut rng, 1000, 80);
        let base = quantize(&x, &q).unwrap();
        for scale in [1e-3f32, 0.5, 7.0, 1e3] {
            assert_eq!(quantize(&x.map(|v| v * scale), &q).unwrap(), base);
        }
    }

    #[test]
    fn zero_frame_gets_fallback_label() {
        let q = init_quantizer(16, 64, 80, 8).unwrap();
        let x = Tensor::<f32>::zeros([3, 80]);
        assert_eq!(quantize(&x, &q).unwrap().labels, vec![0, 0, 0]);
    }

    #[test]
    fn width_mismatch_rejected() {
        let q = init_quantizer(16, 64, 80, 8).unwrap();
        assert!(quantize(&Tensor::<f32>::zeros([3, 81]), &q).is_err());
    }

    #[test]
    fn labels_agree_across_precisions_with_margin() {
        let q = init_quantizer(16, 64, 80, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_rows(&mut rng, 500, 80);
        let wide: Tensor<f64> = x.cast();
        let a = quantize(&x, &q).unwrap().labels;
        let b = quantize(&wide, &q).unwrap().labels;
        let mut compared = 0;
        for u in 0..500 {
            let v: Vec<f64> = (0..16)
                .map(|i| q.projection().row(i).iter().zip(wide.row(u)).map(|(&a, &b)| a as f64 * b).sum())
                .collect();
            let n = v.iter().map(|e| e * e).sum::<f64>().sqrt();
            let mut d: Vec<f64> = (0..64)
                .map(|j| {
                    q.codebook().row(j).iter().zip(&v).map(|(&c, &e)| (e / n - c as f64).powi(2)).sum::<f64>().sqrt()
                })
                .collect();
            d.sort_by(f64::total_cmp);
            if d[1] - d[0] > 1e-3 {
                compared += 1;
                assert_eq!(a[u], b[u]);
            }
        }
        assert!(compared > 400);
    }

    #[test]
    fn white_noise_uses_whole_codebook() {
        // Monte Carlo utilisation check: every code within [0.1/M, 10/M].
        let m = 64;
        let q = init_quantizer(16, m, 320, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random_rows(&mut rng, 100_000, 320);
        let labels = quantize(&x, &q).unwrap().labels;
        let mut counts = vec![0usize; m];
        labels.iter().for_each(|&l| counts[l] += 1);
        for (j, &c) in counts.iter().enumerate() {
            let freq = c as f64 / 100_000.0;
            assert!(freq >= 0.1 / m as f64 && freq <= 10.0 / m as f64, "code {j}: {freq}");
        }
    }

    #[test]
    fn call_counter_tracks_quantize() {
        let q = init_quantizer(4, 8, 8, 1).unwrap();
        let clone = q.clone();
        assert_eq!(q.calls(), 0);
        quantize(&Tensor::<f32>::zeros([2, 8]), &clone).unwrap();
        assert_eq!(q.calls(), 1);
    }
}

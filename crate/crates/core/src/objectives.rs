//! Language classifier head, masked pseudo-label head and their losses.
//!
//! All losses are built from log-softmax outputs; probabilities are only
//! materialized for reporting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamVars, Scalar, Tensor, Var};
use crate::rpq::PseudoLabelSeq;

pub const CLASSIFIER: &str = "cls";
pub const MLM_HEAD: &str = "mlm";

/// Per-batch loss values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub unsupervised: f64,
    pub total: f64,
    pub lambda: f64,
    pub masked_count: usize,
}

pub(crate) fn head<T: Scalar>(g: &mut Graph<T>, vars: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let w = vars.get(&format!("{name}.w"))?;
    let b = vars.get(&format!("{name}.b"))?;
    g.linear(x, w, b)
}

/// Mean-pooled encoder output, `[dim]`.
pub fn pool<T: Scalar>(g: &mut Graph<T>, output: Var) -> Result<Var> {
    if g.shape(output).first().copied().unwrap_or(0) == 0 {
        return Err(Error::invalid("pool", "no frames to pool"));
    }
    g.mean_axis(output, 0)
}

/// Log language probabilities `log softmax(W·mean_t(h_t) + b)`, shape `[N]`.
pub fn classify_log_probs<T: Scalar>(g: &mut Graph<T>, vars: &ParamVars, output: Var) -> Result<Var> {
    let pooled = pool(g, output)?;
    let dim = g.shape(pooled)[0];
    let row = g.reshape(pooled, &[1, dim])?;
    let logits = head(g, vars, CLASSIFIER, row)?;
    let n = g.shape(logits)[1];
    let logits = g.reshape(logits, &[n])?;
    g.log_softmax(logits, 0)
}

/// Language probability vector `p`.
pub fn classify<T: Scalar>(g: &mut Graph<T>, vars: &ParamVars, output: Var) -> Result<Var> {
    let log_p = classify_log_probs(g, vars, output)?;
    Ok(g.exp(log_p))
}

fn one_hot<T: Scalar>(rows: usize, cols: usize, hot: impl Fn(usize) -> usize) -> Tensor<T> {
    let mut t = Tensor::zeros([rows, cols]);
    for r in 0..rows {
        t.data_mut()[r * cols + hot(r)] = T::one();
    }
    t
}

/// `−Σ_i y_i log p_i` for a single utterance.
pub fn supervised_loss<T: Scalar>(g: &mut Graph<T>, log_p: Var, label: usize) -> Result<Var> {
    let n = g.shape(log_p)[0];
    if label >= n {
        return Err(Error::invalid(
            "supervised_loss",
            format!("label {label} out of range for {n} classes"),
        ));
    }
    let y = g.constant(one_hot::<T>(1, n, |_| label).reshape([n])?);
    let picked = g.mul(log_p, y)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -T::one()))
}

/// Row-wise log pseudo-label probabilities `log q_u`, shape `U×M`.
pub fn mlm_log_probs<T: Scalar>(g: &mut Graph<T>, vars: &ParamVars, tapped: Var) -> Result<Var> {
    let logits = head(g, vars, MLM_HEAD, tapped)?;
    g.log_softmax(logits, 1)
}

/// Row-wise pseudo-label probabilities `q_u`.
pub fn mlm_head<T: Scalar>(g: &mut Graph<T>, vars: &ParamVars, tapped: Var) -> Result<Var> {
    let log_q = mlm_log_probs(g, vars, tapped)?;
    Ok(g.exp(log_q))
}

/// Mean negative log-likelihood of the pseudo-labels over the masked
/// positions only. `None` when no position is masked: the utterance then
/// contributes nothing.
pub fn unsupervised_loss<T: Scalar>(
    g: &mut Graph<T>,
    log_q: Var,
    targets: &PseudoLabelSeq,
    masked: &[usize],
) -> Result<Option<Var>> {
    let (rows, m) = (g.shape(log_q)[0], g.shape(log_q)[1]);
    if targets.len() != rows {
        return Err(Error::shape("unsupervised_loss", &[g.shape(log_q), &[targets.len()]]));
    }
    if let Some(&bad) = masked.iter().find(|&&u| u >= rows) {
        return Err(Error::invalid(
            "unsupervised_loss",
            format!("masked position {bad} out of range for {rows} positions"),
        ));
    }
    if let Some(&bad) = targets.labels.iter().find(|&&z| z >= m) {
        return Err(Error::invalid(
            "unsupervised_loss",
            format!("pseudo-label {bad} out of range for {m} codes"),
        ));
    }
    if masked.is_empty() {
        return Ok(None);
    }
    let selected = g.gather_rows(log_q, masked)?;
    let z = g.constant(one_hot(masked.len(), m, |r| targets.labels[masked[r]]));
    let picked = g.mul(selected, z)?;
    let total = g.sum(picked);
    Ok(Some(g.scale(total, T::lit(-1.0 / masked.len() as f64))))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(
            "joint_loss",
            format!("lambda {lambda} outside [0, 1]"),
        ));
    }
    Ok(())
}

/// `(1 − λ)·L_s + λ·L_u`.
pub fn joint_loss(supervised: f64, unsupervised: f64, lambda: f64, masked_count: usize) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    Ok(LossBreakdown {
        supervised,
        unsupervised,
        total: (1.0 - lambda) * supervised + lambda * unsupervised,
        lambda,
        masked_count,
    })
}

/// Graph form of [`joint_loss`]. `unsupervised` may be absent (no masked
/// positions, or λ = 0), in which case it contributes zero.
pub fn joint_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    supervised: Var,
    unsupervised: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    check_lambda(lambda)?;
    let s = g.scale(supervised, T::lit(1.0 - lambda));
    match unsupervised {
        Some(u) if lambda > 0.0 => {
            let u = g.scale(u, T::lit(lambda));
            g.add(s, u)
        }
        _ => Ok(s),
    }
}

/// Fraction of masked positions whose most probable code is the
/// pseudo-label; `None` when nothing is masked.
pub fn pseudo_label_accuracy<T: Scalar>(q: &Tensor<T>, targets: &PseudoLabelSeq, masked: &[usize]) -> Option<f64> {
    let (hits, total) = pseudo_label_hits(q, targets, masked);
    (total > 0).then(|| hits as f64 / total as f64)
}

/// `(correct, masked)` counts behind [`pseudo_label_accuracy`].
pub fn pseudo_label_hits<T: Scalar>(q: &Tensor<T>, targets: &PseudoLabelSeq, masked: &[usize]) -> (usize, usize) {
    let hits = masked
        .iter()
        .filter(|&&u| row_argmax(q.row(u)) == targets.labels[u])
        .count();
    (hits, masked.len())
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn row_argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, Coverage, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head_params(dim: usize, n: usize, m: usize, zero: bool, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: [usize; 2]| {
            Tensor::from_fn(shape, |_| if zero { 0.0 } else { rng.random_range(-1.0..1.0) })
        };
        let mut p = ParamStore::new();
        p.insert("cls.w", draw([dim, n]));
        p.insert("cls.b", Tensor::zeros([n]));
        p.insert("mlm.w", draw([dim, m]));
        p.insert("mlm.b", Tensor::zeros([m]));
        p
    }

    fn hidden(seed: u64, u: usize, dim: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([u, dim], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn class_probabilities_sum_to_one() {
        let params = head_params(6, 11, 8, false, 0);
        let mut g = Graph::new();
        let vars = g.bind_frozen(&params);
        let h = g.constant(hidden(1, 9, 6));
        let p = classify(&mut g, &vars, h).unwrap();
        let total: f64 = g.value(p).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(g.value(p).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let params = head_params(6, 11, 8, true, 0);
        let mut g = Graph::new();
        let vars = g.bind_frozen(&params);
        let h = g.constant(hidden(1, 9, 6));
        let p = classify(&mut g, &vars, h).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 1.0 / 11.0).abs() < 1e-12));
        let log_p = classify_log_probs(&mut g, &vars, h).unwrap();
        let loss = supervised_loss(&mut g, log_p, 3).unwrap();
        assert!((g.value(loss).item() - 11f64.ln()).abs() < 1e-12);
        assert!((11f64.ln() - 2.3979).abs() < 1e-4);
    }

    #[test]
    fn time_permutation_does_not_change_class_probabilities() {
        let params = head_params(6, 4, 8, false, 2);
        let h = hidden(3, 7, 6);
        let mut rows: Vec<Vec<f64>> = (0..7).map(|r| h.row(r).to_vec()).collect();
        rows.reverse();
        rows.swap(1, 4);
        let permuted = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::new();
        let vars = g.bind_frozen(&params);
        let a = g.constant(h);
        let b = g.constant(permuted);
        let pa = classify(&mut g, &vars, a).unwrap();
        let pb = classify(&mut g, &vars, b).unwrap();
        assert!(g.value(pa).max_abs_diff(g.value(pb)) < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_has_zero_loss() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::new([3], vec![-1e4, 0.0, -1e4]).unwrap());
        let log_p = g.log_softmax(logits, 0).unwrap();
        let loss = supervised_loss(&mut g, log_p, 1).unwrap();
        assert!(g.value(loss).item().abs() < 1e-12);
        // a zero-probability true class stays finite through log-softmax
        let wrong = supervised_loss(&mut g, log_p, 0).unwrap();
        assert!(g.value(wrong).item().is_finite());
        assert!(supervised_loss(&mut g, log_p, 3).is_err());
    }

    #[test]
    fn supervised_loss_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..20 {
            let mut params = ParamStore::new();
            params.insert("logits", Tensor::from_fn([5], |_| rng.random_range(-3.0..3.0)));
            let label = case % 5;
            let report = finite_difference_check(
                |g, vars| {
                    let log_p = g.log_softmax(vars.get("logits")?, 0)?;
                    supervised_loss(g, log_p, label)
                },
                &params,
                1e-5,
                1e-6,
                Coverage::All,
            )
            .unwrap();
            assert!(report.passed(), "{}", report.max_rel_err());
        }
    }

    #[test]
    fn mlm_rows_are_distributions() {
        let params = head_params(6, 4, 256, false, 5);
        let mut g = Graph::new();
        let vars = g.bind_frozen(&params);
        let h = g.constant(hidden(6, 10, 6));
        let q = mlm_head(&mut g, &vars, h).unwrap();
        assert_eq!(g.shape(q), &[10, 256]);
        for r in 0..10 {
            let total: f64 = g.value(q).row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
        let zero = head_params(6, 4, 256, true, 5);
        let vars = g.bind_frozen(&zero);
        let q = mlm_head(&mut g, &vars, h).unwrap();
        assert!(g.value(q).data().iter().all(|&v| (v - 1.0 / 256.0).abs() < 1e-12));
    }

    #[test]
    fn unsupervised_loss_values() {
        let targets = PseudoLabelSeq {
            labels: vec![3, 0, 255, 7],
        };
        // uniform q → ln M whichever positions are masked
        let mut g = Graph::<f64>::new();
        let zeros = g.constant(Tensor::zeros([4, 256]));
        let log_q = g.log_softmax(zeros, 1).unwrap();
        let loss = unsupervised_loss(&mut g, log_q, &targets, &[0, 2]).unwrap().unwrap();
        assert!((g.value(loss).item() - 256f64.ln()).abs() < 1e-12);
        assert!((256f64.ln() - 5.545).abs() < 1e-3);

        // one-hot q at the targets → 0
        let mut sharp = Tensor::full([4, 256], -1e4);
        for (u, &z) in targets.labels.iter().enumerate() {
            sharp.data_mut()[u * 256 + z] = 0.0;
        }
        let sharp = g.constant(sharp);
        let log_q = g.log_softmax(sharp, 1).unwrap();
        let loss = unsupervised_loss(&mut g, log_q, &targets, &[0, 1, 2, 3]).unwrap().unwrap();
        assert!(g.value(loss).item().abs() < 1e-12);

        assert!(unsupervised_loss(&mut g, log_q, &targets, &[]).unwrap().is_none());
        assert!(unsupervised_loss(&mut g, log_q, &targets, &[4]).is_err());
    }

    #[test]
    fn unmasked_rows_do_not_affect_unsupervised_loss() {
        let targets = PseudoLabelSeq {
            labels: vec![1, 2, 3, 0, 1],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = Tensor::<f64>::from_fn([5, 4], |_| rng.random_range(-2.0..2.0));
        let mut perturbed = base.clone();
        for u in [0, 3] {
            perturbed.row_mut(u).iter_mut().for_each(|v| *v += rng.random_range(-5.0..5.0));
        }
        let masked = [1, 2, 4];
        let mut g = Graph::new();
        let mut value = |t: Tensor<f64>| {
            let x = g.constant(t);
            let lq = g.log_softmax(x, 1).unwrap();
            let l = unsupervised_loss(&mut g, lq, &targets, &masked).unwrap().unwrap();
            g.value(l).item()
        };
        assert_eq!(value(base), value(perturbed));
    }

    #[test]
    fn joint_loss_cases() {
        let l = joint_loss(2.0, 4.0, 0.5, 10).unwrap();
        assert_eq!(l.total, 3.0);
        assert_eq!(joint_loss(2.0, 4.0, 0.0, 0).unwrap().total, 2.0);
        assert_eq!(joint_loss(2.0, 4.0, 1.0, 0).unwrap().total, 4.0);
        assert!(joint_loss(2.0, 4.0, 1.5, 0).is_err());
        assert!(joint_loss(2.0, 4.0, -0.1, 0).is_err());
    }

    #[test]
    fn accuracy_counts_masked_positions_only() {
        let targets = PseudoLabelSeq {
            labels: vec![0, 1, 2, 1],
        };
        let q = Tensor::<f64>::from_rows(&[
            vec![0.9, 0.05, 0.05],
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.1, 0.8],
            vec![0.2, 0.7, 0.1],
        ])
        .unwrap();
        assert_eq!(pseudo_label_accuracy(&q, &targets, &[0, 2, 3]), Some(1.0));
        assert_eq!(pseudo_label_accuracy(&q, &targets, &[0, 1]), Some(0.5));
        assert_eq!(pseudo_label_accuracy(&q, &targets, &[]), None);
    }

    #[test]
    fn random_predictions_hit_chance() {
        // Monte Carlo: random q rows against random targets, M = 256.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (rows, m) = (40_000, 256);
        let q = Tensor::<f32>::from_fn([rows, m], |_| rng.random());
        let targets = PseudoLabelSeq {
            labels: (0..rows).map(|_| rng.random_range(0..m)).collect(),
        };
        let masked: Vec<usize> = (0..rows).collect();
        let acc = pseudo_label_accuracy(&q, &targets, &masked).unwrap();
        let chance = 1.0 / m as f64;
        // binomial std ≈ 3.1e-4 at this size
        assert!((acc - chance).abs() < 1.5e-3, "{acc}");
    }
}

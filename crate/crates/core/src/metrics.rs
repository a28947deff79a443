//! Error rate, per-language precision / recall / F1, confusion matrices,
//! masking sweeps and embedding export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::FeatureSet;
use crate::error::{Error, Result};
use crate::features::{center_or_pad, normalize_features, FeatureStats};
use crate::model::{predict, ModelConfig, Prediction};
use crate::numerics::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageScore {
    pub code: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub error_rate: f64,
    pub per_language: Vec<LanguageScore>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub num_utts: usize,
}

/// `2PR / (P + R)`, zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl EvalReport {
    pub fn from_predictions(languages: &[String], labels: &[usize], predicted: &[usize]) -> Result<Self> {
        let n = languages.len();
        if labels.len() != predicted.len() || labels.is_empty() {
            return Err(Error::invalid(
                "eval_report",
                format!("{} labels, {} predictions", labels.len(), predicted.len()),
            ));
        }
        if let Some(&bad) = labels.iter().chain(predicted).find(|&&c| c >= n) {
            return Err(Error::invalid("eval_report", format!("class {bad} outside {n} languages")));
        }
        let mut confusion = vec![vec![0usize; n]; n];
        for (&y, &p) in labels.iter().zip(predicted) {
            confusion[y][p] += 1;
        }
        let num_utts = labels.len();
        let correct: usize = (0..n).map(|i| confusion[i][i]).sum();
        let per_language: Vec<LanguageScore> = (0..n)
            .map(|i| {
                let support: usize = confusion[i].iter().sum();
                let predicted_as: usize = confusion.iter().map(|row| row[i]).sum();
                let tp = confusion[i][i] as f64;
                let precision = if predicted_as > 0 { tp / predicted_as as f64 } else { 0.0 };
                let recall = if support > 0 { tp / support as f64 } else { 0.0 };
                LanguageScore {
                    code: languages[i].clone(),
                    precision,
                    recall,
                    f1: f1_score(precision, recall),
                    support,
                }
            })
            .collect();
        let mean = |f: fn(&LanguageScore) -> f64| per_language.iter().map(f).sum::<f64>() / n as f64;
        Ok(EvalReport {
            error_rate: 1.0 - correct as f64 / num_utts as f64,
            macro_precision: mean(|s| s.precision),
            macro_recall: mean(|s| s.recall),
            macro_f1: mean(|s| s.f1),
            per_language,
            confusion,
            num_utts,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-language rows followed by the macro-average row.
pub fn f1_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>7} {:>7} {:>7} {:>8}", "lang", "F1", "P", "R", "support");
    for s in &report.per_language {
        let _ = writeln!(
            out,
            "{:<10} {:>7.2} {:>7.2} {:>7.2} {:>8}",
            s.code,
            100.0 * s.f1,
            100.0 * s.precision,
            100.0 * s.recall,
            s.support
        );
    }
    let _ = writeln!(
        out,
        "{:<10} {:>7.2} {:>7.2} {:>7.2} {:>8}",
        "Avg",
        100.0 * report.macro_f1,
        100.0 * report.macro_precision,
        100.0 * report.macro_recall,
        report.num_utts
    );
    out
}

/// Everything needed to run inference.
#[derive(Clone, Copy, Debug)]
pub struct ModelView<'a> {
    pub model: &'a ModelConfig,
    pub params: &'a ParamStore<f32>,
    pub stats: &'a FeatureStats,
    pub languages: &'a [String],
    pub crop_frames: usize,
}

impl ModelView<'_> {
    /// Unmasked prediction on the deterministic evaluation crop.
    pub fn predict(&self, features: &crate::features::FeatureSequence) -> Result<Prediction> {
        let cropped = center_or_pad(features, self.crop_frames)?;
        predict(self.model, self.params, &normalize_features(&cropped, self.stats)?)
    }

    fn check_inventory(&self, eval: &FeatureSet) -> Result<()> {
        if eval.languages != self.languages {
            return Err(Error::invalid(
                "evaluate",
                format!("model languages {:?} differ from data languages {:?}", self.languages, eval.languages),
            ));
        }
        Ok(())
    }
}

pub fn evaluate(view: &ModelView, eval: &FeatureSet) -> Result<EvalReport> {
    view.check_inventory(eval)?;
    let mut predicted = Vec::with_capacity(eval.len());
    for it in &eval.items {
        predicted.push(view.predict(&it.features)?.argmax());
    }
    let labels: Vec<usize> = eval.items.iter().map(|it| it.label).collect();
    EvalReport::from_predictions(view.languages, &labels, &predicted)
}

/// CSV with `id,lang,e0,…` and one row per utterance.
pub fn embeddings_csv(view: &ModelView, eval: &FeatureSet) -> Result<String> {
    view.check_inventory(eval)?;
    let mut out = String::from("id,lang");
    for d in 0..view.model.encoder.dim {
        let _ = write!(out, ",e{d}");
    }
    out.push('\n');
    for it in &eval.items {
        let p = view.predict(&it.features)?;
        out.push_str(&it.id);
        out.push(',');
        out.push_str(&eval.languages[it.label]);
        for v in p.embedding {
            let _ = write!(out, ",{}", v as f32);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(view: &ModelView, eval: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv = embeddings_csv(view, eval)?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Supervised,
    Joint,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::Joint => "joint",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub span_ms: u32,
    pub seed: u64,
    pub error_rate: f64,
    pub pseudo_label_acc: Option<f64>,
}

/// Result of one sweep run: evaluation report and, for joint runs, the
/// final-epoch masked pseudo-label accuracy.
pub type RunResult = (EvalReport, Option<f64>);

/// Trains one model per `(seed, span, mode)` through `train_fn`. Span 0
/// has no masked positions and so is run supervised-only.
pub fn masking_sweep(
    spans: &[u32],
    seeds: &[u64],
    mut train_fn: impl FnMut(Mode, u32, u64) -> Result<RunResult>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for &span in spans {
            let modes: &[Mode] = if span == 0 {
                &[Mode::Supervised]
            } else {
                &[Mode::Supervised, Mode::Joint]
            };
            for &mode in modes {
                let (report, acc) = train_fn(mode, span, seed)?;
                rows.push(SweepRow {
                    mode,
                    span_ms: span,
                    seed,
                    error_rate: report.error_rate,
                    pseudo_label_acc: acc,
                });
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("mode,span_ms,seed,error_rate,pseudo_label_acc\n");
    for r in rows {
        let acc = r.pseudo_label_acc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", r.mode.as_str(), r.span_ms, r.seed, r.error_rate, acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn langs(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i}")).collect()
    }

    fn labelled_pairs() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (2usize..6).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 1..60)))
    }

    proptest! {
        #[test]
        fn report_is_consistent_with_counts((n, pairs) in labelled_pairs()) {
            let (labels, predicted): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let r = EvalReport::from_predictions(&langs(n), &labels, &predicted).unwrap();
            let wrong = pairs.iter().filter(|(y, p)| y != p).count();
            prop_assert!((r.error_rate - wrong as f64 / pairs.len() as f64).abs() < 1e-12);
            prop_assert_eq!(r.confusion.iter().flatten().sum::<usize>(), pairs.len());
            for (i, s) in r.per_language.iter().enumerate() {
                prop_assert_eq!(s.support, labels.iter().filter(|&&y| y == i).count());
                prop_assert!((0.0..=1.0).contains(&s.f1));
                prop_assert!(s.f1 <= s.precision.max(s.recall) + 1e-12);
                prop_assert!(s.f1 >= s.precision.min(s.recall) - 1e-12);
            }
            // Micro recall over all utterances equals accuracy.
            let recall_weighted: f64 = r.per_language.iter().map(|s| s.recall * s.support as f64).sum();
            prop_assert!((recall_weighted / pairs.len() as f64 - (1.0 - r.error_rate)).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictions() {
        let labels = vec![0, 1, 2, 1, 0];
        let r = EvalReport::from_predictions(&langs(3), &labels, &labels).unwrap();
        assert_eq!(r.error_rate, 0.0);
        assert!(r.per_language.iter().all(|s| s.f1 == 1.0));
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let r = EvalReport::from_predictions(&langs(4), &labels, &[0; 40]).unwrap();
        assert!((r.error_rate - 0.75).abs() < 1e-12);
        assert_eq!(r.per_language[0].recall, 1.0);
        assert!((r.per_language[0].precision - 0.25).abs() < 1e-12);
        assert_eq!(r.per_language[1].f1, 0.0);
        assert_eq!(r.confusion[2][0], 10);
    }

    #[test]
    fn report_invariants() {
        let labels = vec![0, 0, 1, 1, 2, 2, 2];
        let preds = vec![0, 1, 1, 2, 2, 2, 0];
        let r = EvalReport::from_predictions(&langs(3), &labels, &preds).unwrap();
        let total: usize = r.confusion.iter().flatten().sum();
        assert_eq!(total, r.num_utts);
        let trace: usize = (0..3).map(|i| r.confusion[i][i]).sum();
        assert!((r.error_rate - (1.0 - trace as f64 / 7.0)).abs() < 1e-12);
        for (i, s) in r.per_language.iter().enumerate() {
            let row: usize = r.confusion[i].iter().sum();
            assert!((s.recall - r.confusion[i][i] as f64 / row as f64).abs() < 1e-12);
            for v in [s.precision, s.recall, s.f1] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        let mean_f1 = r.per_language.iter().map(|s| s.f1).sum::<f64>() / 3.0;
        assert!((r.macro_f1 - mean_f1).abs() < 1e-12);
    }

    #[test]
    fn two_class_accuracy_matches_confusion() {
        let labels = vec![0, 0, 0, 1, 1, 1];
        let preds = vec![0, 1, 0, 1, 1, 0];
        let r = EvalReport::from_predictions(&langs(2), &labels, &preds).unwrap();
        let acc = labels.iter().zip(&preds).filter(|(a, b)| a == b).count() as f64 / 6.0;
        assert!((acc - (1.0 - r.error_rate)).abs() < 1e-12);
    }

    #[test]
    fn f1_degenerate_cases() {
        assert_eq!(f1_score(1.0, 1.0), 1.0);
        assert_eq!(f1_score(1.0, 0.0), 0.0);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn invalid_inputs() {
        assert!(EvalReport::from_predictions(&langs(2), &[0, 1], &[0]).is_err());
        assert!(EvalReport::from_predictions(&langs(2), &[0, 2], &[0, 1]).is_err());
        assert!(EvalReport::from_predictions(&langs(2), &[], &[]).is_err());
    }

    #[test]
    fn table_has_average_row() {
        let r = EvalReport::from_predictions(&langs(2), &[0, 1], &[0, 0]).unwrap();
        let t = f1_table(&r);
        assert_eq!(t.lines().count(), 4);
        assert!(t.lines().last().unwrap().starts_with("Avg"));
    }

    #[test]
    fn report_json_round_trip() {
        let r = EvalReport::from_predictions(&langs(3), &[0, 1, 2], &[0, 2, 2]).unwrap();
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn sweep_runs_span_zero_supervised_only() {
        let spans = [0, 80, 160, 240, 320, 400, 480];
        let mut calls = Vec::new();
        let rows = masking_sweep(&spans, &[7], |mode, span, seed| {
            calls.push((mode, span, seed));
            let r = EvalReport::from_predictions(&langs(2), &[0, 1], &[0, 1])?;
            Ok((r, (mode == Mode::Joint).then_some(0.5)))
        })
        .unwrap();
        let joint = rows.iter().filter(|r| r.mode == Mode::Joint).count();
        let sup = rows.iter().filter(|r| r.mode == Mode::Supervised).count();
        assert_eq!((joint, sup), (6, 7));
        assert!(!calls.contains(&(Mode::Joint, 0, 7)));
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("mode,span_ms,seed,error_rate,pseudo_label_acc\n"));
        assert_eq!(csv.lines().count(), 14);
        assert!(csv.contains("supervised,0,7,0,\n"));
        assert!(csv.contains("joint,240,7,0,0.5\n"));
    }
}

//! Labelled audio corpora: JSON-lines manifests, a seeded synthetic
//! generator, stratified splits and feature extraction.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSequence, LogMel, Waveform, SAMPLE_RATE};
use crate::seeds::{substream, Stream};
use crate::wav::{read_wav, write_wav};

#[derive(Clone, Debug, PartialEq)]
pub enum AudioSource {
    Memory(Waveform),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioItem {
    pub id: String,
    pub label: usize,
    pub source: AudioSource,
}

/// Utterances with a language inventory; `label` indexes `languages`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub languages: Vec<String>,
    pub items: Vec<AudioItem>,
}

impl Dataset {
    pub fn num_langs(&self) -> usize {
        self.languages.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Audio for item `i`; file-backed items are read on each call.
    pub fn waveform(&self, i: usize) -> Result<Waveform> {
        match &self.items[i].source {
            AudioSource::Memory(w) => Ok(w.clone()),
            AudioSource::File(p) => read_wav(p),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_langs()];
        for it in &self.items {
            counts[it.label] += 1;
        }
        counts
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    path: PathBuf,
    lang: String,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub dataset: Dataset,
    /// Paths listed more than once (kept, reported).
    pub duplicate_paths: Vec<PathBuf>,
}

/// Reads `{"path": …, "lang": …}` lines. Relative paths are resolved
/// against the manifest's directory; languages are indexed in sorted order.
/// Audio is not opened here.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let err = |line: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| err(i + 1, e.to_string()))?;
        if rec.lang.is_empty() {
            return Err(err(i + 1, "empty language code".into()));
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(err(0, "no records".into()));
    }
    let languages: Vec<String> = records
        .iter()
        .map(|r| r.lang.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut seen = BTreeSet::new();
    let mut duplicate_paths = Vec::new();
    let items = records
        .into_iter()
        .map(|r| {
            let full = if r.path.is_absolute() { r.path.clone() } else { base.join(&r.path) };
            if !seen.insert(full.clone()) {
                duplicate_paths.push(full.clone());
            }
            AudioItem {
                id: r.path.with_extension("").to_string_lossy().into_owned(),
                label: languages.binary_search(&r.lang).expect("inventory built from records"),
                source: AudioSource::File(full),
            }
        })
        .collect();
    Ok(Manifest {
        dataset: Dataset { languages, items },
        duplicate_paths,
    })
}

/// Writes every item as `<dir>/wav/<id>.wav` plus `<dir>/manifest.jsonl`.
pub fn write_corpus(ds: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let wav_dir = dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut manifest = String::new();
    for (i, item) in ds.items.iter().enumerate() {
        let rel = PathBuf::from("wav").join(format!("{}.wav", item.id));
        write_wav(dir.join(&rel), &ds.waveform(i)?)?;
        let line = serde_json::json!({
            "path": rel.to_string_lossy(),
            "lang": ds.languages[item.label],
        });
        manifest.push_str(&line.to_string());
        manifest.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Size of the shared unit pool.
pub const UNIT_POOL: usize = 20;
const UNITS_PER_LANG: usize = 8;

/// A formant-like sound unit: two resonances over a harmonic source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitGenerator {
    pub f1: f64,
    pub f2: f64,
    pub bandwidth: f64,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguageSpec {
    pub index: usize,
    /// Indices into the shared unit pool.
    pub inventory: Vec<usize>,
    /// Row-stochastic, over `inventory`.
    pub transitions: Vec<Vec<f64>>,
    pub unit_ms: (f64, f64),
    /// dB per octave relative to 500 Hz.
    pub tilt_db: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    pub units: Vec<UnitGenerator>,
    pub specs: Vec<SyntheticLanguageSpec>,
}

/// Language code for synthetic language `i`; zero-padded so sorted order
/// equals index order.
pub fn synthetic_code(i: usize) -> String {
    format!("syn{i:02}")
}

const POOL_INDEX: u64 = 1 << 40;
const SPEC_INDEX: u64 = 1 << 41;

fn unit_pool(seed: u64) -> Vec<UnitGenerator> {
    let mut rng = substream(seed, Stream::Synth, POOL_INDEX);
    (0..UNIT_POOL)
        .map(|_| UnitGenerator {
            f1: rng.random_range(250.0..900.0),
            f2: rng.random_range(950.0..2800.0),
            bandwidth: rng.random_range(80.0..200.0),
            noise: rng.random_range(0.01..0.3),
        })
        .collect()
}

fn language_spec(seed: u64, index: usize) -> SyntheticLanguageSpec {
    let mut rng = substream(seed, Stream::Synth, SPEC_INDEX + index as u64);
    let mut pool: Vec<usize> = (0..UNIT_POOL).collect();
    pool.shuffle(&mut rng);
    let mut inventory = pool[..UNITS_PER_LANG].to_vec();
    inventory.sort_unstable();
    let gamma = Gamma::new(0.5, 1.0).expect("valid shape");
    let transitions = (0..UNITS_PER_LANG)
        .map(|_| {
            let row: Vec<f64> = (0..UNITS_PER_LANG).map(|_| gamma.sample(&mut rng) + 1e-3).collect();
            let total: f64 = row.iter().sum();
            row.into_iter().map(|v| v / total).collect()
        })
        .collect();
    SyntheticLanguageSpec {
        index,
        inventory,
        transitions,
        unit_ms: (60.0, 160.0),
        tilt_db: rng.random_range(-2.0..2.0),
    }
}

fn next_unit<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let mut u: f64 = rng.random();
    for (j, &p) in row.iter().enumerate() {
        if u < p {
            return j;
        }
        u -= p;
    }
    row.len() - 1
}

fn render_unit<R: Rng + ?Sized>(unit: &UnitGenerator, f0: f64, tilt_db: f64, len: usize, rng: &mut R, out: &mut Vec<f32>) {
    let sr = SAMPLE_RATE as f64;
    let mut partials = Vec::new();
    let mut h = 1.0;
    while h * f0 < 7000.0 {
        let f = h * f0;
        let res = |c: f64| (-(f - c).powi(2) / (2.0 * unit.bandwidth.powi(2))).exp();
        let tilt = 10f64.powf(tilt_db * (f / 500.0).log2() / 20.0);
        let amp = (res(unit.f1) + 0.7 * res(unit.f2) + 0.01) * tilt;
        partials.push((2.0 * PI * f / sr, amp, rng.random_range(0.0..2.0 * PI)));
        h += 1.0;
    }
    let fade = (0.005 * sr) as usize;
    for n in 0..len {
        let t = n as f64;
        let mut v: f64 = partials.iter().map(|&(w, a, ph)| a * (w * t + ph).sin()).sum();
        v += unit.noise * rng.sample::<f64, _>(StandardNormal);
        let edge = n.min(len - 1 - n);
        if edge < fade {
            v *= 0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos();
        }
        out.push(v as f32);
    }
}

fn render_utterance(
    spec: &SyntheticLanguageSpec,
    units: &[UnitGenerator],
    samples: usize,
    seed: u64,
    utt_index: u64,
) -> Result<Waveform> {
    let mut rng = substream(seed, Stream::Synth, utt_index);
    let f0 = rng.random_range(100.0..220.0);
    let tilt = spec.tilt_db + rng.random_range(-0.5..0.5);
    let mut out = Vec::with_capacity(samples + SAMPLE_RATE as usize);
    let mut state = rng.random_range(0..spec.inventory.len());
    while out.len() < samples {
        let ms = rng.random_range(spec.unit_ms.0..spec.unit_ms.1);
        let len = (ms * SAMPLE_RATE as f64 / 1000.0) as usize;
        render_unit(&units[spec.inventory[state]], f0, tilt, len, &mut rng, &mut out);
        state = next_unit(&spec.transitions[state], &mut rng);
    }
    out.truncate(samples);
    let peak = out.iter().fold(0f32, |m, v| m.max(v.abs()));
    let gain = rng.random_range(0.5..0.9) / peak.max(1e-9);
    out.iter_mut().for_each(|v| *v *= gain);
    Waveform::new(out, SAMPLE_RATE)
}

/// Balanced in-memory corpus of `num_langs × utts_per_lang` utterances,
/// deterministic in `seed`.
pub fn generate_synthetic(num_langs: usize, utts_per_lang: usize, duration_s: f64, seed: u64) -> Result<SyntheticCorpus> {
    if num_langs < 2 {
        return Err(Error::invalid("generate_synthetic", "need at least 2 languages"));
    }
    if !(duration_s > 0.0) {
        return Err(Error::invalid("generate_synthetic", format!("duration {duration_s} s")));
    }
    let units = unit_pool(seed);
    let specs: Vec<_> = (0..num_langs).map(|i| language_spec(seed, i)).collect();
    let samples = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut items = Vec::with_capacity(num_langs * utts_per_lang);
    for (l, spec) in specs.iter().enumerate() {
        for u in 0..utts_per_lang {
            let index = (l * utts_per_lang + u) as u64;
            items.push(AudioItem {
                id: format!("{}_{u:04}", synthetic_code(l)),
                label: l,
                source: AudioSource::Memory(render_utterance(spec, &units, samples, seed, index)?),
            });
        }
    }
    Ok(SyntheticCorpus {
        dataset: Dataset {
            languages: (0..num_langs).map(synthetic_code).collect(),
            items,
        },
        units,
        specs,
    })
}

/// Stratified split: each language contributes `round(n · train_frac)`
/// items (at least one to each side) to the training part. Item order within
/// each part follows the input.
pub fn split(ds: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::invalid("split", format!("train_frac {train_frac} outside (0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, it) in ds.items.iter().enumerate() {
        by_class.entry(it.label).or_default().push(i);
    }
    let mut in_train = vec![false; ds.len()];
    for (&class, idx) in &by_class {
        if idx.len() < 2 {
            return Err(Error::invalid(
                "split",
                format!("language {} has {} item(s)", ds.languages[class], idx.len()),
            ));
        }
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut substream(seed, Stream::Split, class as u64));
        let k = ((idx.len() as f64 * train_frac).round() as usize).clamp(1, idx.len() - 1);
        for &i in &shuffled[..k] {
            in_train[i] = true;
        }
    }
    let part = |keep: bool| Dataset {
        languages: ds.languages.clone(),
        items: ds
            .items
            .iter()
            .zip(&in_train)
            .filter(|(_, &t)| t == keep)
            .map(|(it, _)| it.clone())
            .collect(),
    };
    Ok((part(true), part(false)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures {
    pub id: String,
    pub label: usize,
    pub features: FeatureSequence,
}

/// Log-mel features for a whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub languages: Vec<String>,
    pub items: Vec<LabeledFeatures>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub fn featurize(ds: &Dataset, frontend: &LogMel) -> Result<FeatureSet> {
    let items = ds
        .items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            Ok(LabeledFeatures {
                id: it.id.clone(),
                label: it.label,
                features: frontend.compute(&ds.waveform(i)?, it.id.clone())?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FeatureSet {
        languages: ds.languages.clone(),
        items,
    })
}

fn mean_frame(f: &FeatureSequence) -> Vec<f64> {
    let mut m = vec![0.0; f.dim()];
    for t in 0..f.num_frames() {
        for (a, &v) in m.iter_mut().zip(f.frame(t)) {
            *a += v as f64;
        }
    }
    m.iter_mut().for_each(|a| *a /= f.num_frames().max(1) as f64);
    m
}

/// Accuracy on `eval` of a nearest-class-mean classifier over per-utterance
/// mean log-mel vectors fitted on `train`.
pub fn nearest_class_mean_accuracy(train: &FeatureSet, eval: &FeatureSet) -> Result<f64> {
    let n = train.languages.len();
    if train.is_empty() || eval.is_empty() {
        return Err(Error::invalid("nearest_class_mean", "empty feature set"));
    }
    let dim = train.items[0].features.dim();
    let mut centroids = vec![vec![0.0; dim]; n];
    let mut counts = vec![0usize; n];
    for it in &train.items {
        for (c, v) in centroids[it.label].iter_mut().zip(mean_frame(&it.features)) {
            *c += v;
        }
        counts[it.label] += 1;
    }
    for (c, &k) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= k.max(1) as f64);
    }
    let correct = eval
        .items
        .iter()
        .filter(|it| {
            let m = mean_frame(&it.features);
            let dist = |c: &Vec<f64>| c.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..n)
                .filter(|&k| counts[k] > 0)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap_or(0);
            best == it.label
        })
        .count();
    Ok(correct as f64 / eval.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureConfig;

    #[test]
    fn synthetic_shape_and_balance() {
        let c = generate_synthetic(4, 50, 3.0, 1).unwrap();
        assert_eq!(c.dataset.len(), 200);
        assert_eq!(c.dataset.class_counts(), vec![50; 4]);
        for i in 0..c.dataset.len() {
            let w = c.dataset.waveform(i).unwrap();
            assert_eq!(w.samples().len(), 48_000);
            assert!(w.samples().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(3, 2, 0.5, 11).unwrap();
        let b = generate_synthetic(3, 2, 0.5, 11).unwrap();
        let c = generate_synthetic(3, 2, 0.5, 12).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn language_specs_are_valid_and_distinct() {
        let c = generate_synthetic(6, 1, 0.2, 3).unwrap();
        for s in &c.specs {
            assert_eq!(s.inventory.len(), UNITS_PER_LANG);
            assert!(s.inventory.iter().all(|&u| u < UNIT_POOL));
            for row in &s.transitions {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        for (i, a) in c.specs.iter().enumerate() {
            for b in &c.specs[i + 1..] {
                assert!(a.inventory != b.inventory || a.transitions != b.transitions);
            }
        }
        assert!(generate_synthetic(1, 1, 1.0, 0).is_err());
    }

    #[test]
    fn split_is_stratified_disjoint_and_deterministic() {
        let ds = generate_synthetic(4, 50, 0.05, 2).unwrap().dataset;
        let (tr, ev) = split(&ds, 0.8, 5).unwrap();
        assert_eq!((tr.len(), ev.len()), (160, 40));
        assert_eq!(tr.class_counts(), vec![40; 4]);
        assert_eq!(ev.class_counts(), vec![10; 4]);
        let ids = |d: &Dataset| d.items.iter().map(|i| i.id.clone()).collect::<BTreeSet<_>>();
        assert!(ids(&tr).is_disjoint(&ids(&ev)));
        assert_eq!(ids(&tr).union(&ids(&ev)).count(), 200);
        let (tr2, _) = split(&ds, 0.8, 5).unwrap();
        assert_eq!(tr, tr2);
        let (tr3, _) = split(&ds, 0.8, 6).unwrap();
        assert_ne!(tr, tr3);
    }

    #[test]
    fn split_rejects_tiny_classes() {
        let ds = generate_synthetic(2, 1, 0.05, 2).unwrap().dataset;
        assert!(split(&ds, 0.5, 0).is_err());
        let ds = generate_synthetic(2, 2, 0.05, 2).unwrap().dataset;
        assert!(split(&ds, 0.0, 0).is_err());
        assert!(split(&ds, 1.0, 0).is_err());
    }

    fn write_manifest(dir: &Path, lines: &[&str]) -> PathBuf {
        let p = dir.join("m.jsonl");
        std::fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    #[test]
    fn manifest_indexing_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            &[r#"{"path": "b.wav", "lang": "fr"}"#, r#"{"path": "a.wav", "lang": "en"}"#],
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.dataset.languages, vec!["en", "fr"]);
        assert_eq!(m.dataset.items[0].label, 1);
        assert_eq!(m.dataset.items[1].label, 0);
        assert!(m.duplicate_paths.is_empty());
        // unreadable audio fails only on access, naming the file
        match m.dataset.waveform(0) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("b.wav")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_manifest(dir.path().join("none.jsonl")), Err(Error::Io { .. })));
        let empty = write_manifest(dir.path(), &[""]);
        assert!(matches!(load_manifest(&empty), Err(Error::Manifest { .. })));
        let unknown = write_manifest(dir.path(), &[r#"{"path": "a.wav", "lang": "en", "x": 1}"#]);
        match load_manifest(&unknown) {
            Err(Error::Manifest { line, reason, .. }) => {
                assert_eq!(line, 1);
                assert!(reason.contains("unknown field"));
            }
            other => panic!("{other:?}"),
        }
        let dup = write_manifest(
            dir.path(),
            &[r#"{"path": "a.wav", "lang": "en"}"#, r#"{"path": "a.wav", "lang": "en"}"#],
        );
        let m = load_manifest(&dup).unwrap();
        assert_eq!(m.dataset.len(), 2);
        assert_eq!(m.duplicate_paths.len(), 1);
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(2, 2, 0.1, 4).unwrap().dataset;
        let manifest = write_corpus(&ds, dir.path()).unwrap();
        let back = load_manifest(&manifest).unwrap().dataset;
        assert_eq!(back.languages, ds.languages);
        for i in 0..ds.len() {
            assert_eq!(back.items[i].label, ds.items[i].label);
            let (a, b) = (ds.waveform(i).unwrap(), back.waveform(i).unwrap());
            let err = a.samples().iter().zip(b.samples()).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
            assert!(err <= 2.0 / 32767.0, "{err}");
        }
    }

    #[test]
    fn nearest_class_mean_separates_synthetic_languages() {
        let ds = generate_synthetic(4, 30, 1.0, 0).unwrap().dataset;
        let (tr, ev) = split(&ds, 0.5, 0).unwrap();
        let frontend = LogMel::new(FeatureConfig::default()).unwrap();
        let acc = nearest_class_mean_accuracy(&featurize(&tr, &frontend).unwrap(), &featurize(&ev, &frontend).unwrap())
            .unwrap();
        assert!(acc > 0.6, "{acc}");
    }
}

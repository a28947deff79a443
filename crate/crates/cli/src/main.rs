use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use contextlid::checkpoint::Checkpoint;
use contextlid::config::{DataConfig, RunConfig};
use contextlid::datasets::{featurize, generate_synthetic, write_corpus};
use contextlid::features::{normalize_features, FeatureStats};
use contextlid::metrics::{evaluate, f1_table, masking_sweep, sweep_csv, Mode};
use contextlid::rpq::{quantize, stack_frames};
use contextlid::trainer::{check_objective_gradients, train, StepLog};
use contextlid::wav::read_wav;
use contextlid::Error;

#[derive(Parser)]
#[command(name = "contextlid", version, about = "Joint supervised and masked pseudo-label training for spoken language ID")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the configured synthetic corpus as WAV files plus a manifest.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes model.ckpt, train_log.jsonl and validation.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Supervised vs joint error rate across masking spans, as CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full training objective.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Dump the pseudo-labels of one WAV file.
    Quantize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        /// Use this checkpoint's quantizer and feature statistics.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))
        .map_err(Failure::Usage)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let DataConfig::Synthetic(s) = &cfg.data else {
        bail!("synth needs a synthetic data section");
    };
    let corpus = generate_synthetic(s.num_langs, s.utts_per_lang, s.duration_s, s.seed)?;
    create_dir(out)?;
    let manifest = write_corpus(&corpus.dataset, out)?;
    write_json(&out.join("config.json"), &cfg.echo())?;
    println!("wrote {} utterances, manifest {}", corpus.dataset.len(), manifest.display());
    Ok(())
}

fn run_train(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let data = cfg.features()?;
    let setup = cfg.train_setup(data.train.languages.len())?;
    create_dir(out)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "{}", json!({ "config": cfg.echo() }))?;
    let mut io_err = None;
    let total = cfg.train.total_steps;
    let outcome = train(&setup, &data.train, Some(&data.eval), &mut |rec: &StepLog| {
        if io_err.is_none() {
            let line = serde_json::to_string(rec).expect("log record serializes");
            io_err = writeln!(log, "{line}").err();
        }
        if rec.step.is_multiple_of(100) || rec.step == total {
            eprintln!("step {}/{} loss {:.4}", rec.step, total, rec.loss);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing training log");
    }
    log.flush()?;
    let ckpt = out.join("model.ckpt");
    outcome.checkpoint.save(&ckpt)?;
    let report = outcome.validation.expect("eval split given");
    write_json(
        &out.join("validation.json"),
        &json!({
            "config": cfg.echo(),
            "step": outcome.checkpoint.step,
            "final_epoch_pseudo_label_acc": outcome.final_epoch_pseudo_acc,
            "report": report,
        }),
    )?;
    println!("error_rate={} checkpoint={}", report.error_rate, ckpt.display());
    Ok(())
}

fn run_eval(cfg: &RunConfig, checkpoint: &Path, report_path: &Path) -> anyhow::Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let splits = cfg.datasets()?;
    let eval = featurize(&splits.eval, &cfg.frontend()?)?;
    let report = evaluate(&ck.view(cfg.crop_frames()), &eval)?;
    write_json(
        report_path,
        &json!({ "config": ck.config, "step": ck.step, "report": report }),
    )?;
    print!("{}", f1_table(&report));
    println!("error_rate={}", report.error_rate);
    Ok(())
}

fn run_sweep(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let data = cfg.features()?;
    let num_langs = data.train.languages.len();
    let rows = masking_sweep(&cfg.sweep.spans_ms, &cfg.sweep.seeds, |mode, span, seed| {
        let mut run = cfg.clone();
        run.mask.span_ms = span;
        run.train.seed = seed;
        if mode == Mode::Supervised {
            run.train.lambda = 0.0;
        }
        let setup = run.train_setup(num_langs)?;
        let outcome = train(&setup, &data.train, Some(&data.eval), &mut |_| {})?;
        let report = outcome.validation.expect("eval split given");
        eprintln!("{} span={span} seed={seed} error_rate={}", mode.as_str(), report.error_rate);
        Ok((report, outcome.final_epoch_pseudo_acc))
    })?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let text = format!("# config: {}\n{}", cfg.echo(), sweep_csv(&rows));
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}

fn run_gradcheck(cfg: &RunConfig) -> anyhow::Result<()> {
    let report = check_objective_gradients(&cfg.encoder, &cfg.mask, cfg.quantizer.codebook_dim, &cfg.gradcheck)?;
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "{verdict} max_rel_err={:.3e} tolerance={:e} elements={}",
        report.max_rel_err(),
        report.tolerance,
        report.elements_checked()
    );
    for p in &report.params {
        if p.failures > 0 {
            println!("  {} failures={} max_rel_err={:.3e}", p.name, p.failures, p.max_rel_err);
        }
    }
    if !report.passed() {
        bail!("gradient check failed");
    }
    Ok(())
}

fn run_quantize(cfg: &RunConfig, audio: &Path, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let wave = read_wav(audio)?;
    let feats = cfg.frontend()?.compute(&wave, audio.display().to_string())?;
    let (quantizer, stats, echo) = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            (ck.quantizer, ck.stats, ck.config)
        }
        None => {
            let setup = cfg.train_setup(2)?;
            let stats = if cfg.features.normalize {
                FeatureStats::from_sequences([&feats])?
            } else {
                FeatureStats::identity(feats.dim())
            };
            (setup.init_quantizer()?, stats, cfg.echo())
        }
    };
    let clean = normalize_features(&feats, &stats)?;
    let labels = quantize(&stack_frames(&clean, cfg.encoder.sub_sampling_factor)?, &quantizer)?;
    println!(
        "{}",
        json!({
            "config": echo,
            "audio": audio.display().to_string(),
            "frames": feats.num_frames(),
            "labels": labels.labels,
        })
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { config, out } => synth(&load_config(&config)?, &out)?,
        Command::Train { config, out } => run_train(&load_config(&config)?, &out)?,
        Command::Eval {
            config,
            checkpoint,
            report,
        } => run_eval(&load_config(&config)?, &checkpoint, &report)?,
        Command::Sweep { config, out } => run_sweep(&load_config(&config)?, &out)?,
        Command::Gradcheck { config } => run_gradcheck(&load_config(&config)?)?,
        Command::Quantize {
            config,
            audio,
            checkpoint,
        } => run_quantize(&load_config(&config)?, &audio, checkpoint.as_deref())?,
    }
    Ok(())
}

fn report_error(kind: &str, e: &anyhow::Error) {
    let config_error = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
    let msg = json!({
        "error": kind,
        "message": format!("{e:#}"),
        "config_error": config_error,
    });
    eprintln!("{msg}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            report_error("usage", &e);
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            report_error("runtime", &e);
            ExitCode::from(2)
        }
    }
}

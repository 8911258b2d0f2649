use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use spinbnn::checkpoint::Checkpoint;
use spinbnn::config::{EvalMode, RunConfig};
use spinbnn::crossbar::mapping_records;
use spinbnn::data::{gen_synthetic, Dataset, Synthetic};
use spinbnn::device::{calibrate_current, switching_probability};
use spinbnn::eval::{corrupt, ood_rate, Corruption};
use spinbnn::resource::{
    compare_methods, count_dropout_modules, count_events, energy_estimate, plan_model, reference_events, CostTable,
    REFERENCE_ENERGY_UJ,
};
use spinbnn::rng::{domain, Sampler};
use spinbnn::train::{run_eval, run_training};
use spinbnn::Error;

#[derive(Parser)]
#[command(name = "spinbnn", version, about = "Bayesian binary networks on simulated spintronic crossbars")]
struct Cli {
    /// INI run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints and reports.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ideal,
    Device,
}

impl From<Mode> for EvalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Ideal => EvalMode::Ideal,
            Mode::Device => EvalMode::Device,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OodSource {
    /// Uniform noise far outside the per-feature range of the test set.
    FarUniform,
    GaussianNoise,
    UniformNoise,
    Rotation,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write `model.nspn` to the output directory.
    Train,
    /// Monte Carlo evaluation of a checkpoint on the test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Also write one JSON line per test sample to `records.jsonl`.
        #[arg(long)]
        records: bool,
    },
    /// Out-of-distribution detection rate against the test set.
    Ood {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "far-uniform")]
        source: OodSource,
        /// Corruption severity; ignored by `far-uniform`.
        #[arg(long, default_value_t = 0.5)]
        severity: f64,
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Crossbar mapping of the configured model, one record per array.
    Map,
    /// Event counts and energy per inference.
    Energy {
        /// Reference CNN for every method, with the calibration targets.
        #[arg(long)]
        reference: bool,
        #[arg(long)]
        passes: Option<u64>,
    },
    /// Write currents calibrated to the given switching probabilities.
    DeviceCal {
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.5")]
        p: Vec<f64>,
    },
    /// Write a synthetic dataset as JSON lines.
    GenData {
        #[arg(long, default_value = "two_moons")]
        kind: String,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
}

fn emit(out: &mut impl Write, value: &serde_json::Value) -> Result<()> {
    writeln!(out, "{value}")?;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn far_uniform(test: &Dataset, seed: u64) -> Dataset {
    let (n, d) = (test.x.rows(), test.x.cols());
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for r in 0..n {
        for (j, &v) in test.x.row(r).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let mut s = Sampler::from_path(seed, &[domain::CORRUPT, 0]);
    let mut out = test.clone();
    for r in 0..n {
        for j in 0..d {
            let w = (hi[j] - lo[j]).max(1.0);
            let u = s.uniform();
            let off = w + 2.0 * w * u;
            out.x.data_mut()[r * d + j] = if s.uniform() < 0.5 { lo[j] - off } else { hi[j] + off };
        }
    }
    out
}

fn run(cli: &Cli) -> Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli)?;
            let (train, _) = cfg.datasets()?;
            let outcome = run_training(&cfg, &train)?;
            for log in &outcome.history {
                emit(&mut out, &serde_json::to_value(log)?)?;
            }
            fs::create_dir_all(&cli.out)?;
            let path = cli.out.join("model.nspn");
            outcome.checkpoint.save(&path)?;
            emit(&mut out, &json!({ "checkpoint": path.display().to_string(), "diverged": outcome.divergence.is_some() }))?;
            outcome.into_result()?;
        }
        Command::Eval {
            checkpoint,
            passes,
            mode,
            records,
        } => {
            let cfg = load_config(cli)?;
            let ck = load_checkpoint(checkpoint)?;
            let (_, test) = cfg.datasets()?;
            let passes = passes.unwrap_or(cfg.train.passes);
            let mode = mode.map_or(cfg.train.eval_mode, EvalMode::from);
            let res = run_eval(&cfg, &ck.model, &test, passes, mode)?;
            let r = &res.report;
            let mean_entropy = r.entropy.iter().sum::<f64>() / r.entropy.len().max(1) as f64;
            emit(
                &mut out,
                &json!({
                    "accuracy": r.accuracy,
                    "nll": r.nll,
                    "mean_entropy": mean_entropy,
                    "passes": passes,
                    "mode": format!("{mode:?}").to_lowercase(),
                    "samples": test.len(),
                    "measured_events": res.measured,
                    "events_per_inference": res.predicted,
                }),
            )?;
            if *records {
                fs::create_dir_all(&cli.out)?;
                let mut f = io::BufWriter::new(fs::File::create(cli.out.join("records.jsonl"))?);
                for rec in r.records(&test.labels) {
                    emit(&mut f, &serde_json::to_value(rec)?)?;
                }
                f.flush()?;
            }
        }
        Command::Ood {
            checkpoint,
            source,
            severity,
            passes,
            mode,
        } => {
            let cfg = load_config(cli)?;
            let ck = load_checkpoint(checkpoint)?;
            let (_, test) = cfg.datasets()?;
            let passes = passes.unwrap_or(cfg.train.passes);
            let mode = mode.map_or(cfg.train.eval_mode, EvalMode::from);
            let ood = match source {
                OodSource::FarUniform => far_uniform(&test, cfg.seed),
                other => {
                    let kind = match other {
                        OodSource::GaussianNoise => Corruption::GaussianNoise,
                        OodSource::UniformNoise => Corruption::UniformNoise,
                        _ => Corruption::Rotation,
                    };
                    let mut s = Sampler::from_path(cfg.seed, &[domain::CORRUPT, 1]);
                    let mut d = test.clone();
                    d.x = corrupt(&test.x, kind, *severity, test.shape, &mut s)?;
                    d
                }
            };
            let id = run_eval(&cfg, &ck.model, &test, passes, mode)?.report;
            let od = run_eval(&cfg, &ck.model, &ood, passes, mode)?.report;
            let score = |r: &spinbnn::eval::UncertaintyReport| match cfg.train.ood_score {
                spinbnn::eval::ScoreKind::Entropy => r.entropy.clone(),
                spinbnn::eval::ScoreKind::MaxProb => r.max_prob_scores(),
            };
            let res = ood_rate(&score(&id), &score(&od), cfg.train.ood_quantile, cfg.train.ood_score)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            emit(
                &mut out,
                &json!({
                    "detection_rate": res.detection_rate,
                    "threshold": res.threshold,
                    "score_kind": res.score_kind,
                    "quantile": cfg.train.ood_quantile,
                    "id_mean_entropy": mean(&id.entropy),
                    "ood_mean_entropy": mean(&od.entropy),
                    "id_accuracy": id.accuracy,
                }),
            )?;
        }
        Command::Map => {
            let cfg = load_config(cli)?;
            let spec = cfg.model_spec()?;
            let x = &cfg.crossbar.array;
            let plans = plan_model(&spec, cfg.crossbar.strategy, x.max_rows, x.max_cols)?;
            for (l, plan) in plans.iter().enumerate() {
                match plan {
                    Some(p) => {
                        for rec in mapping_records(l, p, x.max_rows, x.max_cols) {
                            emit(&mut out, &serde_json::to_value(rec)?)?;
                        }
                    }
                    None => emit(&mut out, &json!({ "layer": l, "mapped": false }))?,
                }
            }
            emit(
                &mut out,
                &json!({
                    "arrays": plans.iter().flatten().map(|p| p.crossbar_count).sum::<usize>(),
                    "dropout_modules": count_dropout_modules(&spec),
                }),
            )?;
        }
        Command::Energy { reference, passes } => {
            let costs = CostTable::calibrated();
            if *reference {
                let mut entries = Vec::new();
                for (method, target) in REFERENCE_ENERGY_UJ {
                    let counts = reference_events(method)?;
                    entries.push((method, counts));
                    let e = energy_estimate(&counts, &costs);
                    emit(
                        &mut out,
                        &json!({
                            "method": method.name(),
                            "target_uj": target,
                            "energy_uj": e.total_uj,
                            "counts": counts,
                        }),
                    )?;
                }
                emit(&mut out, &json!({ "comparison": compare_methods(&entries, &costs)? }))?;
            } else {
                let cfg = load_config(cli)?;
                let spec = cfg.model_spec()?;
                let x = &cfg.crossbar.array;
                let plans = plan_model(&spec, cfg.crossbar.strategy, x.max_rows, x.max_cols)?;
                let t = passes.unwrap_or(cfg.train.passes as u64);
                let counts = count_events(&spec, t, &plans)?;
                let e = energy_estimate(&counts, &costs);
                emit(
                    &mut out,
                    &json!({
                        "method": spec.method.name(),
                        "passes": t,
                        "energy_uj": e.total_uj,
                        "breakdown": e.breakdown,
                        "counts": counts,
                        "costs_pj": costs,
                    }),
                )?;
            }
        }
        Command::DeviceCal { p } => {
            let cfg = load_config(cli)?;
            for &target in p {
                let current = calibrate_current(target, cfg.device.pulse, &cfg.device.mtj)?;
                let realized = switching_probability(current, cfg.device.pulse, &cfg.device.mtj)?;
                emit(
                    &mut out,
                    &json!({ "p": target, "current": current, "pulse": cfg.device.pulse, "realized_p": realized }),
                )?;
            }
        }
        Command::GenData { kind, n, noise } => {
            let Some(kind) = Synthetic::from_name(kind) else {
                bail!(Error::Config {
                    field: "kind".into(),
                    message: format!("unknown synthetic dataset `{kind}`"),
                });
            };
            let seed = cli.seed.unwrap_or(0);
            let data = gen_synthetic(kind, *n, *noise, seed)?;
            for (r, &label) in data.labels.iter().enumerate() {
                emit(&mut out, &json!({ "x": data.x.row(r), "label": label }))?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config { .. }) => 2,
        Some(Error::Parse { .. } | Error::Io(_)) => 3,
        Some(Error::Divergence { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `vqcsi` command-line front end.
//!
//! Every verb writes CSV artifacts into `--out` and prints a one-line JSON
//! summary on success. Failures exit with status 1 (2 for usage errors) and
//! print a JSON object `{"error": {"kind": ..., "message": ...}}` on stderr.

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vqcsi::checkpoint;
use vqcsi::config::RunConfig;
use vqcsi::experiments::{
    codeword_interpretability, entropy_summary_csv, histogram_csv, interpret_csv, locality_csv, rate_sweep, sweep_csv,
    usage_histograms,
};
use vqcsi::trainer::{evaluate_baseline, evaluate_on, metrics_csv, test_set, usage_csv, Baseline, Trainer};
use vqcsi::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Desk,
}

#[derive(Debug, Parser)]
#[command(
    name = "vqcsi",
    version,
    about = "Train and evaluate learned CSI feedback for multi-user precoding"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// TOML run configuration.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration, used when no --config is given.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Train one model; writes metrics.csv, usage.csv and model.ckpt.
    Train,
    /// Evaluate a checkpoint and the full-CSI baselines on held-out channels.
    Eval {
        /// Defaults to <out>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sum rate against feedback bits for every method.
    Sweep,
    /// Single-path codeword/angle association and the locality test.
    Interpret {
        /// Use this single-path checkpoint instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-epoch codeword usage for the learned and sign quantizers.
    Histograms,
    /// Print the resolved configuration as TOML.
    Config,
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
            code: 1,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut run = match (&cli.config, cli.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(Preset::Full)) => RunConfig::full(),
        (None, _) => RunConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        run.train.seed = seed;
    }
    run.validate()?;
    Ok(run)
}

fn write(dir: &Path, name: &str, contents: &str, written: &mut Vec<String>) -> Result<(), Failure> {
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    written.push(path.display().to_string());
    Ok(())
}

fn run(cli: &Cli) -> Result<serde_json::Value, Failure> {
    let run = resolve_config(cli)?;
    if let Verb::Config = cli.verb {
        print!("{}", run.to_toml());
        return Ok(json!({ "status": "ok", "config_hash": run.hash() }));
    }
    std::fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    let mut written = Vec::new();
    let mut summary = serde_json::Map::new();
    let mut hash = match cli.verb {
        Verb::Train => run.train.hash(),
        _ => run.hash(),
    };
    match &cli.verb {
        Verb::Train => {
            let cfg = &run.train;
            let mut trainer = Trainer::new(cfg)?;
            let result = trainer.run();
            write(out, "metrics.csv", &metrics_csv(cfg, trainer.metrics()), &mut written)?;
            write(out, "usage.csv", &usage_csv(cfg, trainer.usage()), &mut written)?;
            let ckpt = out.join("model.ckpt");
            checkpoint::save(&ckpt, cfg, trainer.model())?;
            written.push(ckpt.display().to_string());
            result?;
            if let Some(m) = trainer.metrics().last() {
                summary.insert("final_loss".into(), json!(m.loss));
                summary.insert("final_sum_rate".into(), json!(m.sum_rate));
            }
        }
        Verb::Eval { checkpoint: path } => {
            let path = path.clone().unwrap_or_else(|| out.join("model.ckpt"));
            let (cfg, model) = checkpoint::load(&path)?;
            if cli.config.is_some() {
                model.check_compatible(&run.train)?;
            }
            let set = test_set(&cfg, run.experiment.test_samples, run.train.seed);
            hash = cfg.hash();
            let mut csv = format!("# config_hash={hash} seed={}\n", run.train.seed);
            csv.push_str("method,mean_sum_rate,ci95");
            for k in 1..=cfg.channel.users {
                csv.push_str(&format!(",rate_ue_{k}"));
            }
            csv.push('\n');
            let learned = evaluate_on(&model, &cfg, &set)?;
            let mut rows = vec![("model", learned)];
            for kind in [Baseline::Mrt, Baseline::Zf] {
                rows.push((kind.name(), evaluate_baseline(kind, &set)?));
            }
            for (name, e) in &rows {
                csv.push_str(&format!("{name},{},{}", e.mean_sum_rate, e.ci95));
                for r in &e.per_ue_rates {
                    csv.push_str(&format!(",{r}"));
                }
                csv.push('\n');
                summary.insert(format!("{name}_sum_rate"), json!(e.mean_sum_rate));
            }
            write(out, "eval.csv", &csv, &mut written)?;
        }
        Verb::Sweep => {
            let rows = rate_sweep(&run)?;
            let failed = rows.iter().filter(|r| r.mean_sum_rate.is_nan()).count();
            summary.insert("failed_points".into(), json!(failed));
            write(out, "sweep.csv", &sweep_csv(&run, &rows), &mut written)?;
        }
        Verb::Interpret { checkpoint: path } => {
            let trained = path.as_deref().map(checkpoint::load).transpose()?;
            let interp = codeword_interpretability(&run, trained)?;
            summary.insert("p_value".into(), json!(interp.locality.p_value));
            write(out, "interpret.csv", &interpret_csv(&run, &interp), &mut written)?;
            write(out, "locality.csv", &locality_csv(&run, &interp.locality), &mut written)?;
        }
        Verb::Histograms => {
            let runs = usage_histograms(&run)?;
            for h in &runs {
                summary.insert(format!("{}_final_entropy_bits", h.method), json!(h.final_entropy()));
                write(
                    out,
                    &format!("histograms_{}.csv", h.method),
                    &histogram_csv(&run, h),
                    &mut written,
                )?;
            }
            write(
                out,
                "usage_entropy.csv",
                &entropy_summary_csv(&run, &runs),
                &mut written,
            )?;
        }
        Verb::Config => unreachable!("handled above"),
    }
    summary.insert("status".into(), json!("ok"));
    summary.insert("config_hash".into(), json!(hash));
    summary.insert("seed".into(), json!(run.train.seed));
    summary.insert("artifacts".into(), json!(written));
    Ok(serde_json::Value::Object(summary))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let failure = Failure {
                kind: "usage",
                message: e.to_string().trim().to_string(),
                code: 2,
            };
            return report(failure);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": f.kind, "message": f.message } }));
    ExitCode::from(f.code)
}

//! Experiment drivers: rate against feedback budget, codeword interpretability
//! and codeword usage over training. Every CSV starts with a comment line
//! carrying the configuration hash and seed.

use crate::channel::sample_channels;
use crate::config::{QuantizerKind, RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{stream, Purpose, SimRng};
use crate::trainer::{evaluate_baseline, evaluate_on, test_set, train, Baseline, EpochMetrics, EpochUsage, TestSet};
use rand::seq::SliceRandom;
use std::fmt::Write as _;

pub fn artifact_header(run: &RunConfig) -> String {
    format!("# config_hash={} seed={}\n", run.hash(), run.train.seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub bits: usize,
    pub method: String,
    /// NaN when the sub-run failed.
    pub mean_sum_rate: f64,
    pub ci95: f64,
}

/// Training configuration of a learned sweep method at `bits` per user.
pub fn method_config(base: &TrainConfig, method: &str, bits: usize) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match method {
        "vq_mi" => cfg.model.quantizer = QuantizerKind::Vq,
        "vq_plain" => {
            cfg.model.quantizer = QuantizerKind::Vq;
            cfg.loss.gamma = 0.0;
        }
        "sign" => cfg.model.quantizer = QuantizerKind::Sign,
        other => return Err(Error::Config(format!("unknown method {other}"))),
    }
    cfg.with_feedback_bits(bits)
}

fn learned_point(cfg: &TrainConfig, set: &TestSet) -> Result<(f64, f64)> {
    let t = train(cfg)?;
    let e = evaluate_on(t.model(), cfg, set)?;
    Ok((e.mean_sum_rate, e.ci95))
}

/// Trains and evaluates every method at every sweep point on one shared test
/// set. A failed sub-run yields a NaN row and the sweep continues.
pub fn rate_sweep(run: &RunConfig) -> Result<Vec<SweepRow>> {
    run.validate()?;
    let base = &run.train;
    let set = test_set(base, run.experiment.test_samples, base.seed);
    let mut methods = vec!["vq_mi", "vq_plain"];
    if run.experiment.baselines.sign {
        methods.push("sign");
    }
    let mut oracle = Vec::new();
    for (on, kind) in [
        (run.experiment.baselines.mrt, Baseline::Mrt),
        (run.experiment.baselines.zf, Baseline::Zf),
    ] {
        if on {
            let e = evaluate_baseline(kind, &set)?;
            oracle.push((kind.name(), e.mean_sum_rate, e.ci95));
        }
    }
    let mut rows = Vec::new();
    for &bits in &run.experiment.sweep_bits {
        for &method in &methods {
            let point = method_config(base, method, bits).and_then(|cfg| learned_point(&cfg, &set));
            let (mean, ci) = match point {
                Ok(v) => v,
                Err(e) => {
                    log::error!("sweep point {bits} bits, {method}: {e}");
                    (f64::NAN, f64::NAN)
                }
            };
            rows.push(SweepRow {
                bits,
                method: method.to_string(),
                mean_sum_rate: mean,
                ci95: ci,
            });
        }
        for &(name, mean, ci) in &oracle {
            rows.push(SweepRow {
                bits,
                method: name.to_string(),
                mean_sum_rate: mean,
                ci95: ci,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(run: &RunConfig, rows: &[SweepRow]) -> String {
    let mut out = artifact_header(run);
    out.push_str("B,method,mean_sum_rate,ci95\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.bits, r.method, r.mean_sum_rate, r.ci95);
    }
    out
}

/// Single-path channels, one codebook of `interpret_bits` bits per user.
pub fn interpret_config(run: &RunConfig) -> Result<TrainConfig> {
    let mut cfg = run.train.clone();
    cfg.channel.paths = 1;
    cfg.model.quantizer = QuantizerKind::Vq;
    cfg.model.codebooks = 1;
    cfg.model.bits_per_codebook = run.experiment.interpret_bits as u32;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpretRow {
    pub sample: usize,
    pub aod: f64,
    pub abs_alpha: f64,
    pub indices: Vec<usize>,
}

/// Outcome of the angle-locality permutation test.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalityTest {
    /// Pooled within-codeword variance of the angle of departure.
    pub observed: f64,
    /// Mean of the same statistic over random relabelings.
    pub permuted_mean: f64,
    pub p_value: f64,
    pub permutations: usize,
}

#[derive(Debug, Clone)]
pub struct Interpretation {
    pub config: TrainConfig,
    /// First user's channels and feedback indices.
    pub rows: Vec<InterpretRow>,
    pub locality: LocalityTest,
}

/// `Σ_g Σ_{i∈g} (x_i − mean_g)² / n`.
pub fn within_group_dispersion(values: &[f64], labels: &[usize]) -> f64 {
    let groups = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sum = vec![0.0; groups];
    let mut count = vec![0usize; groups];
    for (&v, &l) in values.iter().zip(labels) {
        sum[l] += v;
        count[l] += 1;
    }
    let mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    values
        .iter()
        .zip(labels)
        .map(|(&v, &l)| (v - mean[l]).powi(2))
        .sum::<f64>()
        / values.len() as f64
}

/// One-sided permutation test of whether samples sharing a label have more
/// similar `values` than a random partition with the same group sizes.
pub fn locality_test(values: &[f64], labels: &[usize], permutations: usize, rng: &mut SimRng) -> LocalityTest {
    let observed = within_group_dispersion(values, labels);
    let mut shuffled = labels.to_vec();
    let mut as_small = 0usize;
    let mut total = 0.0;
    for _ in 0..permutations {
        shuffled.shuffle(rng);
        let d = within_group_dispersion(values, &shuffled);
        total += d;
        if d <= observed {
            as_small += 1;
        }
    }
    LocalityTest {
        observed,
        permuted_mean: total / permutations.max(1) as f64,
        p_value: (1 + as_small) as f64 / (1 + permutations) as f64,
        permutations,
    }
}

/// Quantizes `interpret_samples` fresh single-path channels with a model
/// trained under [`interpret_config`], or with `trained` when given.
pub fn codeword_interpretability(run: &RunConfig, trained: Option<(TrainConfig, Model)>) -> Result<Interpretation> {
    run.validate()?;
    let (cfg, model) = match trained {
        Some((cfg, model)) => {
            if cfg.channel.paths != 1 {
                return Err(Error::Config(format!(
                    "interpretability needs a single-path model, checkpoint was trained with {} paths",
                    cfg.channel.paths
                )));
            }
            model.check_compatible(&cfg)?;
            (cfg, model)
        }
        None => {
            let cfg = interpret_config(run)?;
            let model = train(&cfg)?.into_model();
            (cfg, model)
        }
    };
    let n = run.experiment.interpret_samples;
    let seed = run.train.seed;
    let mut set = test_set(&cfg, n, seed);
    // A channel set of its own, distinct from the rate evaluation channels.
    set.batch = sample_channels(&cfg.channel, n, &mut stream(seed, Purpose::EvalChannels, 1));
    let inf = model.infer(&set.batch, &set.noise, cfg.model.codebooks)?;
    let fb = &inf.feedback[0];
    let rows: Vec<InterpretRow> = (0..n)
        .map(|s| InterpretRow {
            sample: s,
            aod: set.batch.aods_of(s, 0)[0],
            abs_alpha: set.batch.gains_of(s, 0)[0].norm(),
            indices: (0..fb.sub_quantizers).map(|j| fb.index(s, j)).collect(),
        })
        .collect();
    let aods: Vec<f64> = rows.iter().map(|r| r.aod).collect();
    let labels: Vec<usize> = rows
        .iter()
        .map(|r| joint_label(&r.indices, 1 << cfg.model.bits_per_codebook))
        .collect();
    let locality = locality_test(
        &aods,
        &labels,
        run.experiment.permutations,
        &mut stream(seed, Purpose::Permutation, 0),
    );
    Ok(Interpretation {
        config: cfg,
        rows,
        locality,
    })
}

fn joint_label(indices: &[usize], size: usize) -> usize {
    indices.iter().rev().fold(0, |acc, &i| acc * size + i)
}

pub fn interpret_csv(run: &RunConfig, interp: &Interpretation) -> String {
    let mut out = artifact_header(run);
    let n = interp.config.model.codebooks;
    out.push_str("sample,aod,abs_alpha");
    for j in 1..=n {
        let _ = write!(out, ",index_{j}");
    }
    out.push('\n');
    for r in &interp.rows {
        let _ = write!(out, "{},{},{}", r.sample, r.aod, r.abs_alpha);
        for i in &r.indices {
            let _ = write!(out, ",{i}");
        }
        out.push('\n');
    }
    out
}

pub fn locality_csv(run: &RunConfig, t: &LocalityTest) -> String {
    format!(
        "{}observed_dispersion,permuted_mean_dispersion,p_value,permutations\n{},{},{},{}\n",
        artifact_header(run),
        t.observed,
        t.permuted_mean,
        t.p_value,
        t.permutations
    )
}

#[derive(Debug, Clone)]
pub struct HistogramRun {
    pub method: &'static str,
    pub config: TrainConfig,
    pub metrics: Vec<EpochMetrics>,
    pub usage: Vec<EpochUsage>,
}

impl HistogramRun {
    /// Final-epoch usage entropy averaged over users, in bits.
    pub fn final_entropy(&self) -> f64 {
        let last = self.metrics.last().expect("at least one epoch");
        last.usage_entropy.iter().sum::<f64>() / last.usage_entropy.len() as f64
    }
}

/// Trains the learned quantizer and the sign baseline at `histogram_bits`
/// with identical seeds and keeps their per-epoch usage.
pub fn usage_histograms(run: &RunConfig) -> Result<Vec<HistogramRun>> {
    run.validate()?;
    let bits = run.experiment.histogram_bits;
    ["vq_mi", "sign"]
        .into_iter()
        .map(|method| {
            let cfg = method_config(&run.train, method, bits)?;
            let t = train(&cfg)?;
            Ok(HistogramRun {
                method,
                config: cfg,
                metrics: t.metrics().to_vec(),
                usage: t.usage().to_vec(),
            })
        })
        .collect()
}

pub fn histogram_csv(run: &RunConfig, h: &HistogramRun) -> String {
    let mut out = artifact_header(run);
    out.push_str("epoch,ue,sub_quantizer,codeword_index,count\n");
    for u in &h.usage {
        for (k, hs) in u.histograms.iter().enumerate() {
            for (n, hist) in hs.iter().enumerate() {
                for (i, c) in hist.counts().iter().enumerate() {
                    let _ = writeln!(out, "{},{},{},{},{}", u.epoch, k + 1, n + 1, i, c);
                }
            }
        }
    }
    out
}

pub fn entropy_summary_csv(run: &RunConfig, runs: &[HistogramRun]) -> String {
    let mut out = artifact_header(run);
    out.push_str("method,epoch,mean_usage_entropy_bits\n");
    for h in runs {
        for m in &h.metrics {
            let mean = m.usage_entropy.iter().sum::<f64>() / m.usage_entropy.len() as f64;
            let _ = writeln!(out, "{},{},{}", h.method, m.epoch, mean);
        }
    }
    out
}

//! Training loop, held-out evaluation and the metric logs.

use crate::channel::{
    achievable_rates, mrt_precoder, pilot_noise, sample_channels, zf_precoder, ChannelBatch, NoiseModel, Precoder,
};
use crate::config::{QuantizerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::mi::sample_pairs;
use crate::model::{LossTerms, Model};
use crate::optim::{clip_global_norm, Adam, GroupId};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;
use crate::vq::{QuantizedFeedback, UsageHistogram};
use std::fmt::Write as _;
use std::time::Instant;

/// Epoch averages of the objective components.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub loss: f64,
    pub sum_rate: f64,
    /// Per user, nats.
    pub mi: Vec<f64>,
    /// Summed over users.
    pub commitment: f64,
    /// Per user, bits, summed over the user's sub-quantizers.
    pub usage_entropy: Vec<f64>,
    pub seconds: f64,
}

/// Codeword counts accumulated over one epoch, `histograms[k][n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochUsage {
    pub epoch: usize,
    pub histograms: Vec<Vec<UsageHistogram>>,
}

impl EpochUsage {
    fn new(epoch: usize, users: usize, words: usize, size: usize) -> Self {
        Self {
            epoch,
            histograms: vec![vec![UsageHistogram::new(size); words]; users],
        }
    }

    fn record(&mut self, k: usize, qf: &QuantizedFeedback) {
        for s in 0..qf.samples() {
            for (n, h) in self.histograms[k].iter_mut().enumerate() {
                h.record(qf.index(s, n));
            }
        }
    }

    /// Per-user sum of sub-quantizer usage entropies, in bits.
    pub fn entropies(&self) -> Result<Vec<f64>> {
        self.histograms
            .iter()
            .map(|hs| hs.iter().map(|h| h.distribution().map(|(_, e)| e)).sum())
            .collect()
    }
}

/// Codewords per sub-quantizer (or sign word) under `cfg`.
pub fn alphabet_size(cfg: &TrainConfig) -> usize {
    let bits = match cfg.model.quantizer {
        QuantizerKind::Vq => cfg.model.bits_per_codebook as usize,
        QuantizerKind::Sign => cfg.model.latent_dim / cfg.model.codebooks,
    };
    1 << bits
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    adam: Adam,
    other: GroupId,
    codebook: GroupId,
    mask: Vec<bool>,
    step: usize,
    metrics: Vec<EpochMetrics>,
    usage: Vec<EpochUsage>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let model = Model::init(cfg)?;
        Self::from_model(cfg, model)
    }

    /// Continues from existing parameters with fresh optimizer state.
    pub fn from_model(cfg: &TrainConfig, model: Model) -> Result<Self> {
        model.check_compatible(cfg)?;
        let mask = model.codebook_mask();
        let sizes = |want: bool| -> Vec<usize> {
            model
                .params()
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m == want)
                .map(|(t, _)| t.len())
                .collect()
        };
        let mut adam = Adam::new(cfg.optim.adam);
        let other = adam.add_group(cfg.optim.lr_other, &sizes(false));
        let codebook = adam.add_group(cfg.optim.lr_codebook, &sizes(true));
        Ok(Self {
            cfg: cfg.clone(),
            model,
            adam,
            other,
            codebook,
            mask,
            step: 0,
            metrics: Vec::new(),
            usage: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// The current parameters; after a failed step these are the last good ones.
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    pub fn usage(&self) -> &[EpochUsage] {
        &self.usage
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    fn diverged(&self, component: String) -> Error {
        Error::Diverged {
            epoch: self.metrics.len() + 1,
            step: self.step,
            component,
        }
    }

    /// One optimizer step on a fresh batch. Returns the objective components.
    fn step(&mut self, usage: &mut EpochUsage) -> Result<LossTerms> {
        let cfg = &self.cfg;
        let idx = self.step as u64;
        let (s, k_users) = (cfg.schedule.batch_size, cfg.channel.users);
        self.model.pilots.heal(&mut stream(cfg.seed, Purpose::PilotHeal, idx));
        let batch = sample_channels(&cfg.channel, s, &mut stream(cfg.seed, Purpose::TrainChannels, idx));
        let noise = pilot_noise(
            s,
            k_users,
            cfg.model.pilot_len,
            &cfg.noise(),
            &mut stream(cfg.seed, Purpose::TrainNoise, idx),
        );
        let mut prng = stream(cfg.seed, Purpose::PairSampling, idx);
        let pairs: Vec<_> = (0..k_users)
            .map(|_| sample_pairs(s, cfg.loss.kappa * s, &mut prng))
            .collect();
        let fwd = match self.model.forward(cfg, &batch, &noise, &pairs) {
            Ok(f) => f,
            Err(Error::NonFinite(what)) => return Err(self.diverged(what)),
            Err(e) => return Err(e),
        };
        let grads = fwd.graph.backward(fwd.loss)?;
        let mut gs: Vec<Tensor> = fwd.params.iter().map(|&v| grads.wrt(&fwd.graph, v)).collect();
        if let Some(i) = gs.iter().position(|g| !g.is_finite()) {
            let name = self.model.param_names()[i].clone();
            return Err(self.diverged(format!("gradient of {name}")));
        }
        if let Some(c) = self.cfg.optim.clip_norm {
            clip_global_norm(&mut gs, c);
        }
        for (k, qf) in fwd.feedback.iter().enumerate() {
            usage.record(k, qf);
        }

        let mask = &self.mask;
        let mut cb_params = Vec::new();
        let mut cb_grads = Vec::new();
        let mut other_params = Vec::new();
        let mut other_grads = Vec::new();
        for ((p, g), &is_cb) in self.model.params_mut().into_iter().zip(&gs).zip(mask) {
            if is_cb {
                cb_params.push(p);
                cb_grads.push(g);
            } else {
                other_params.push(p);
                other_grads.push(g);
            }
        }
        self.adam.step(self.other, &mut other_params, &other_grads);
        if !cb_params.is_empty() {
            self.adam.step(self.codebook, &mut cb_params, &cb_grads);
        }
        self.step += 1;
        Ok(fwd.terms)
    }

    /// Runs one epoch and returns its metrics.
    pub fn run_epoch(&mut self) -> Result<&EpochMetrics> {
        let start = Instant::now();
        let epoch = self.metrics.len() + 1;
        let k_users = self.cfg.channel.users;
        let mut usage = EpochUsage::new(epoch, k_users, self.cfg.model.codebooks, alphabet_size(&self.cfg));
        let batches = self.cfg.schedule.batches_per_epoch;
        let (mut loss, mut rate, mut cl) = (0.0, 0.0, 0.0);
        let mut mi = vec![0.0; k_users];
        for _ in 0..batches {
            let terms = self.step(&mut usage)?;
            loss += terms.total()?;
            rate += terms.sum_rate();
            cl += terms.commitment_total();
            for (acc, v) in mi.iter_mut().zip(&terms.mi) {
                *acc += v;
            }
        }
        let n = batches as f64;
        let m = EpochMetrics {
            epoch,
            step: self.step,
            loss: loss / n,
            sum_rate: rate / n,
            mi: mi.iter().map(|v| v / n).collect(),
            commitment: cl / n,
            usage_entropy: usage.entropies()?,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} sum rate {:.4} usage entropy {:?}",
            m.loss,
            m.sum_rate,
            m.usage_entropy
        );
        self.usage.push(usage);
        self.metrics.push(m);
        Ok(self.metrics.last().expect("just pushed"))
    }

    /// Runs every configured epoch.
    pub fn run(&mut self) -> Result<()> {
        while self.metrics.len() < self.cfg.schedule.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }
}

/// Trains a model from scratch under `cfg`.
pub fn train(cfg: &TrainConfig) -> Result<Trainer> {
    let mut t = Trainer::new(cfg)?;
    t.run()?;
    Ok(t)
}

fn csv_header(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash} seed={seed}\n")
}

/// Metrics log as CSV. The last column is wall-clock time.
pub fn metrics_csv(cfg: &TrainConfig, metrics: &[EpochMetrics]) -> String {
    let k_users = cfg.channel.users;
    let mut out = csv_header(&cfg.hash(), cfg.seed);
    out.push_str("epoch,step,loss,sum_rate");
    for k in 1..=k_users {
        let _ = write!(out, ",mi_ue_{k}");
    }
    out.push_str(",cl");
    for k in 1..=k_users {
        let _ = write!(out, ",usage_entropy_ue_{k}");
    }
    out.push_str(",seconds\n");
    for m in metrics {
        let _ = write!(out, "{},{},{},{}", m.epoch, m.step, m.loss, m.sum_rate);
        for v in &m.mi {
            let _ = write!(out, ",{v}");
        }
        let _ = write!(out, ",{}", m.commitment);
        for v in &m.usage_entropy {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{:.3}", m.seconds);
    }
    out
}

/// Per-epoch codeword counts as CSV: one row per codeword per sub-quantizer.
pub fn usage_csv(cfg: &TrainConfig, usage: &[EpochUsage]) -> String {
    let mut out = csv_header(&cfg.hash(), cfg.seed);
    out.push_str("epoch,ue,sub_quantizer,codeword_index,count\n");
    for u in usage {
        for (k, hs) in u.histograms.iter().enumerate() {
            for (n, h) in hs.iter().enumerate() {
                for (i, c) in h.counts().iter().enumerate() {
                    let _ = writeln!(out, "{},{},{},{},{}", u.epoch, k + 1, n + 1, i, c);
                }
            }
        }
    }
    out
}

/// A held-out channel set with its pilot noise.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub batch: ChannelBatch,
    pub noise: Vec<Tensor>,
    pub noise_model: NoiseModel,
}

/// Draws `n` test channels from the evaluation streams of `seed`, which never
/// coincide with the training streams.
pub fn test_set(cfg: &TrainConfig, n: usize, seed: u64) -> TestSet {
    let batch = sample_channels(&cfg.channel, n, &mut stream(seed, Purpose::EvalChannels, 0));
    let noise_model = cfg.noise();
    let noise = pilot_noise(
        n,
        cfg.channel.users,
        cfg.model.pilot_len,
        &noise_model,
        &mut stream(seed, Purpose::EvalNoise, 0),
    );
    TestSet {
        batch,
        noise,
        noise_model,
    }
}

impl TestSet {
    pub fn len(&self) -> usize {
        self.batch.samples
    }

    pub fn is_empty(&self) -> bool {
        self.batch.samples == 0
    }

    fn chunk(&self, start: usize, len: usize) -> (ChannelBatch, Vec<Tensor>) {
        let noise = self
            .noise
            .iter()
            .map(|w| {
                let mut t = Tensor::zeros(len, w.cols());
                for r in 0..len {
                    t.row_mut(r).copy_from_slice(w.row(start + r));
                }
                t
            })
            .collect();
        (self.batch.slice(start, len), noise)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean_sum_rate: f64,
    /// Half-width of the normal 95 % interval of the mean.
    pub ci95: f64,
    pub per_ue_rates: Vec<f64>,
    pub sample_sum_rates: Vec<f64>,
    /// `usage[k][n]`; empty for baselines.
    pub usage: Vec<Vec<UsageHistogram>>,
    /// Samples whose precoder hit a degenerate-input rule.
    pub flagged: usize,
}

const EVAL_CHUNK: usize = 2048;

fn summarize(per_sample: &Tensor, usage: Vec<Vec<UsageHistogram>>, flagged: usize) -> Evaluation {
    let (n, k_users) = per_sample.shape();
    let sums: Vec<f64> = (0..n).map(|s| per_sample.row(s).iter().sum()).collect();
    let mean = sums.iter().sum::<f64>() / n as f64;
    let var = sums.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    let per_ue = (0..k_users)
        .map(|k| (0..n).map(|s| per_sample.get(s, k)).sum::<f64>() / n as f64)
        .collect();
    Evaluation {
        mean_sum_rate: mean,
        ci95: 1.96 * (var / n as f64).sqrt(),
        per_ue_rates: per_ue,
        sample_sum_rates: sums,
        usage,
        flagged,
    }
}

fn stack_rows(parts: &[Tensor]) -> Tensor {
    let cols = parts[0].cols();
    let rows = parts.iter().map(Tensor::rows).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Evaluates `model` on `set`. The model is not modified.
pub fn evaluate_on(model: &Model, cfg: &TrainConfig, set: &TestSet) -> Result<Evaluation> {
    model.check_compatible(cfg)?;
    if set.noise.first().map(Tensor::cols) != Some(2 * cfg.model.pilot_len) {
        return Err(Error::Shape("test set was drawn for a different pilot length".into()));
    }
    let words = cfg.model.codebooks;
    let mut usage = vec![vec![UsageHistogram::new(alphabet_size(cfg)); words]; cfg.channel.users];
    let mut rates = Vec::new();
    let mut flagged = 0;
    let mut start = 0;
    while start < set.len() {
        let len = EVAL_CHUNK.min(set.len() - start);
        let (batch, noise) = set.chunk(start, len);
        let inf = model.infer(&batch, &noise, words)?;
        for (k, qf) in inf.feedback.iter().enumerate() {
            for s in 0..qf.samples() {
                for (n, h) in usage[k].iter_mut().enumerate() {
                    h.record(qf.index(s, n));
                }
            }
        }
        flagged += inf.precoder.flagged.len();
        rates.push(achievable_rates(&batch, &inf.precoder, &set.noise_model)?);
        start += len;
    }
    Ok(summarize(&stack_rows(&rates), usage, flagged))
}

/// Evaluates on `n_test` fresh channels from the evaluation streams of `seed`.
pub fn evaluate(model: &Model, cfg: &TrainConfig, n_test: usize, seed: u64) -> Result<Evaluation> {
    if n_test < 2 {
        return Err(Error::Samples("evaluation needs at least 2 channels".into()));
    }
    evaluate_on(model, cfg, &test_set(cfg, n_test, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Mrt,
    Zf,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Mrt => "mrt",
            Baseline::Zf => "zf",
        }
    }

    pub fn precoder(self, batch: &ChannelBatch, power: f64) -> Precoder {
        match self {
            Baseline::Mrt => mrt_precoder(batch, power),
            Baseline::Zf => zf_precoder(batch, power),
        }
    }
}

/// Full-CSI baseline on `set`; independent of any trained model.
pub fn evaluate_baseline(kind: Baseline, set: &TestSet) -> Result<Evaluation> {
    let mut rates = Vec::new();
    let mut flagged = 0;
    let mut start = 0;
    while start < set.len() {
        let len = EVAL_CHUNK.min(set.len() - start);
        let batch = set.batch.slice(start, len);
        let p = kind.precoder(&batch, set.noise_model.power);
        flagged += p.flagged.len();
        rates.push(achievable_rates(&batch, &p, &set.noise_model)?);
        start += len;
    }
    Ok(summarize(&stack_rows(&rates), Vec::new(), flagged))
}

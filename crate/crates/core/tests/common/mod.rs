//! Shared fixtures and a plain-loop reference of the training objective.
#![allow(dead_code, clippy::needless_range_loop)]

use num_complex::Complex64;
use vqcsi::channel::{pilot_noise, sample_channels, ChannelBatch};
use vqcsi::config::TrainConfig;
use vqcsi::mi::sample_pairs;
use vqcsi::model::{Forward, Model};
use vqcsi::rng::{stream, Purpose};
use vqcsi::Tensor;

/// M=4, K=2, L=4, D=8, two 2-bit codebooks per user, batch of 8.
pub fn toy_config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.channel.antennas = 4;
    c.model.pilot_len = 4;
    c.model.latent_dim = 8;
    c.model.codebooks = 2;
    c.model.bits_per_codebook = 2;
    c.model.encoder_hidden = vec![16];
    c.model.decoder_hidden = vec![16];
    c.schedule.batch_size = 8;
    c.validate().unwrap();
    c
}

pub struct Frozen {
    pub batch: ChannelBatch,
    pub noise: Vec<Tensor>,
    pub pairs: Vec<Vec<(usize, usize)>>,
}

pub fn toy_inputs(cfg: &TrainConfig, seed: u64) -> Frozen {
    let s = cfg.schedule.batch_size;
    let batch = sample_channels(&cfg.channel, s, &mut stream(seed, Purpose::Misc, 10));
    let noise = pilot_noise(
        s,
        cfg.channel.users,
        cfg.model.pilot_len,
        &cfg.noise(),
        &mut stream(seed, Purpose::Misc, 11),
    );
    let mut prng = stream(seed, Purpose::Misc, 12);
    let pairs = (0..cfg.channel.users)
        .map(|_| sample_pairs(s, cfg.loss.kappa * s, &mut prng))
        .collect();
    Frozen { batch, noise, pairs }
}

/// What the surrogate objective holds fixed: the chosen indices and the
/// base-point latents and quantized latents of every user.
pub struct Anchor {
    pub indices: Vec<Vec<usize>>,
    pub z0: Vec<Vec<Vec<f64>>>,
    pub q0: Vec<Vec<Vec<f64>>>,
}

fn mlp(params: &[&Tensor], x: &[f64]) -> Vec<f64> {
    let layers = params.len() / 2;
    let mut h = x.to_vec();
    for i in 0..layers {
        let (w, b) = (params[2 * i], params[2 * i + 1]);
        let mut out = vec![0.0; w.rows()];
        for (o, slot) in out.iter_mut().enumerate() {
            let mut acc = b.get(0, o);
            for (j, hv) in h.iter().enumerate() {
                acc += w.get(o, j) * hv;
            }
            *slot = if i + 1 < layers { acc.tanh() } else { acc };
        }
        h = out;
    }
    h
}

struct Split<'a> {
    pilots: &'a Tensor,
    encoders: Vec<Vec<&'a Tensor>>,
    codebooks: Vec<Vec<&'a Tensor>>,
    decoder: Vec<&'a Tensor>,
}

fn split<'a>(cfg: &TrainConfig, params: &[&'a Tensor]) -> Split<'a> {
    let k_users = cfg.channel.users;
    let enc_len = 2 * (cfg.model.encoder_hidden.len() + 1);
    let n = cfg.model.codebooks;
    let mut i = 1;
    let encoders = (0..k_users)
        .map(|_| {
            let v = params[i..i + enc_len].to_vec();
            i += enc_len;
            v
        })
        .collect();
    let codebooks = (0..k_users)
        .map(|_| {
            let v = params[i..i + n].to_vec();
            i += n;
            v
        })
        .collect();
    Split {
        pilots: params[0],
        encoders,
        codebooks,
        decoder: params[i..].to_vec(),
    }
}

fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + (xs.iter().map(|x| (x - m).exp()).sum::<f64>() / xs.len() as f64).ln()
}

/// The straight-through surrogate of the objective, evaluated with plain loops
/// and complex arithmetic. Its exact derivative is the gradient the training
/// graph is defined to produce.
pub fn surrogate_loss(cfg: &TrainConfig, params: &[&Tensor], inputs: &Frozen, anchor: &Anchor) -> f64 {
    let p = split(cfg, params);
    let (m, k_users, l) = (cfg.channel.antennas, cfg.channel.users, cfg.model.pilot_len);
    let s_len = inputs.batch.samples;
    let d = cfg.model.latent_dim;
    let n = cfg.model.codebooks;
    let dsub = d / n;
    let power = cfg.noise().power;
    let noise_var = cfg.noise().noise_var;
    let sigma = cfg.loss.sigma_mi;

    // Pilot columns rescaled to power P.
    let mut x = vec![vec![Complex64::new(0.0, 0.0); l]; m];
    for c in 0..l {
        let norm: f64 = (0..m)
            .map(|r| p.pilots.get(r, 2 * c).powi(2) + p.pilots.get(r, 2 * c + 1).powi(2))
            .sum();
        let scale = (power / norm).sqrt();
        for (r, row) in x.iter_mut().enumerate() {
            row[c] = Complex64::new(p.pilots.get(r, 2 * c), p.pilots.get(r, 2 * c + 1)) * scale;
        }
    }

    let mut total = 0.0;
    let mut feedback = vec![Vec::with_capacity(k_users * d); s_len];
    let mut mi = Vec::new();
    let mut cl = Vec::new();
    for k in 0..k_users {
        let mut q_mi = Vec::with_capacity(s_len);
        let (mut enc_term, mut cb_term) = (0.0, 0.0);
        for s in 0..s_len {
            let h = inputs.batch.channel(s, k);
            let mut y = Vec::with_capacity(2 * l);
            for c in 0..l {
                let mut acc = Complex64::new(inputs.noise[k].get(s, 2 * c), inputs.noise[k].get(s, 2 * c + 1));
                for r in 0..m {
                    acc += h[r].conj() * x[r][c];
                }
                y.push(acc.re);
                y.push(acc.im);
            }
            let z = mlp(&p.encoders[k], &y);
            let (z0, q0) = (&anchor.z0[k][s], &anchor.q0[k][s]);
            let mut sel = Vec::with_capacity(d);
            for j in 0..n {
                let idx = anchor.indices[k][s * n + j];
                sel.extend_from_slice(p.codebooks[k][j].row(idx));
            }
            debug_assert_eq!(sel.len(), dsub * n);
            for i in 0..d {
                feedback[s].push(z[i] + (q0[i] - z0[i]));
            }
            q_mi.push((0..d).map(|i| sel[i] + (z[i] - z0[i])).collect::<Vec<f64>>());
            enc_term += (0..d).map(|i| (q0[i] - z[i]).powi(2)).sum::<f64>();
            cb_term += (0..d).map(|i| (sel[i] - z0[i]).powi(2)).sum::<f64>();
        }
        let exps: Vec<f64> = inputs.pairs[k]
            .iter()
            .map(|&(a, b)| {
                let d2: f64 = q_mi[a].iter().zip(&q_mi[b]).map(|(u, v)| (u - v).powi(2)).sum();
                -d2 / (2.0 * sigma * sigma)
            })
            .collect();
        mi.push(-log_mean_exp(&exps));
        cl.push(cfg.loss.beta * enc_term / s_len as f64 + cb_term / s_len as f64);
    }

    let mut rates = vec![0.0; k_users];
    for s in 0..s_len {
        let raw = mlp(&p.decoder, &feedback[s]);
        let norm: f64 = raw.iter().map(|v| v * v).sum();
        let scale = (power / norm).sqrt();
        let v: Vec<Vec<Complex64>> = (0..k_users)
            .map(|j| {
                (0..m)
                    .map(|r| Complex64::new(raw[2 * (j * m + r)], raw[2 * (j * m + r) + 1]) * scale)
                    .collect()
            })
            .collect();
        for (k, rate) in rates.iter_mut().enumerate() {
            let h = inputs.batch.channel(s, k);
            let gain = |j: usize| -> f64 { (0..m).map(|r| h[r].conj() * v[j][r]).sum::<Complex64>().norm_sqr() };
            let signal = gain(k);
            let interference: f64 = (0..k_users).filter(|&j| j != k).map(gain).sum();
            *rate += (1.0 + signal / (interference + noise_var)).log2() / s_len as f64;
        }
    }
    for k in 0..k_users {
        total += -rates[k] - cfg.loss.gamma * mi[k] + cl[k];
    }
    total
}

/// Base-point data of a recorded forward pass.
pub fn anchor_of(cfg: &TrainConfig, model: &Model, inputs: &Frozen) -> (Forward, Anchor) {
    let f = model.forward(cfg, &inputs.batch, &inputs.noise, &inputs.pairs).unwrap();
    let z0 = (0..cfg.channel.users)
        .map(|k| {
            let z = vqcsi::encoder::encode(&model.encoders[k], &pilots_received(model, inputs, k)).unwrap();
            (0..z.rows()).map(|s| z.row(s).to_vec()).collect()
        })
        .collect();
    let q0 = f
        .feedback
        .iter()
        .map(|qf| (0..qf.q.rows()).map(|s| qf.q.row(s).to_vec()).collect())
        .collect();
    let indices = f.feedback.iter().map(|qf| qf.indices.clone()).collect();
    (f, Anchor { indices, z0, q0 })
}

fn pilots_received(model: &Model, inputs: &Frozen, k: usize) -> Tensor {
    let x = model.pilots.effective_pilots().to_complex();
    let (m, l2) = (model.antennas(), 2 * model.pilots.pilot_len());
    let l = l2 / 2;
    let s_len = inputs.batch.samples;
    let mut y = Tensor::zeros(s_len, l2);
    for s in 0..s_len {
        let h = inputs.batch.channel(s, k);
        for c in 0..l {
            let mut acc = Complex64::new(inputs.noise[k].get(s, 2 * c), inputs.noise[k].get(s, 2 * c + 1));
            for r in 0..m {
                acc += h[r].conj() * x[r * l + c];
            }
            y.set(s, 2 * c, acc.re);
            y.set(s, 2 * c + 1, acc.im);
        }
    }
    y
}

/// Worst relative disagreement between analytic and central-difference
/// gradients over every parameter entry, with an absolute floor of `floor`.
pub struct GradReport {
    pub entries: usize,
    pub worst_rel: f64,
    pub worst_name: String,
    pub failures: usize,
}

pub fn check_all_gradients(
    cfg: &TrainConfig,
    model: &Model,
    inputs: &Frozen,
    step: f64,
    rel: f64,
    floor: f64,
) -> GradReport {
    let (f, anchor) = anchor_of(cfg, model, inputs);
    let grads = f.graph.backward(f.loss).unwrap();
    let analytic: Vec<Tensor> = f.params.iter().map(|&v| grads.wrt(&f.graph, v)).collect();
    let names = model.param_names();
    let base: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let mut report = GradReport {
        entries: 0,
        worst_rel: 0.0,
        worst_name: String::new(),
        failures: 0,
    };
    let mut work = base.clone();
    for (pi, t) in base.iter().enumerate() {
        for e in 0..t.len() {
            let orig = t.data()[e];
            work[pi].data_mut()[e] = orig + step;
            let up = surrogate_loss(cfg, &work.iter().collect::<Vec<_>>(), inputs, &anchor);
            work[pi].data_mut()[e] = orig - step;
            let down = surrogate_loss(cfg, &work.iter().collect::<Vec<_>>(), inputs, &anchor);
            work[pi].data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * step);
            let g = analytic[pi].data()[e];
            let err = (g - fd).abs();
            let scale = g.abs().max(fd.abs());
            let rel_err = if scale > 0.0 { err / scale } else { 0.0 };
            report.entries += 1;
            if err > floor && rel_err > rel {
                report.failures += 1;
            }
            if err > floor && rel_err > report.worst_rel {
                report.worst_rel = rel_err;
                report.worst_name = format!("{}[{e}]", names[pi]);
            }
        }
    }
    report
}

/// Drops the trailing wall-clock column from a metrics CSV.
pub fn without_seconds(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            if l.starts_with('#') {
                l.to_string()
            } else {
                l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Small, fast training configuration.
pub fn tiny_training(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.seed = seed;
    c.channel.antennas = 4;
    c.model.encoder_hidden = vec![16];
    c.model.decoder_hidden = vec![16];
    c.schedule.batch_size = 16;
    c.schedule.batches_per_epoch = 3;
    c.schedule.epochs = 2;
    c.validate().unwrap();
    c
}

pub fn param_bits(model: &Model) -> Vec<Vec<u64>> {
    model
        .params()
        .iter()
        .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

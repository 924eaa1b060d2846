//! The end-to-end feedback model and its training objective.
//!
//! Parameters are addressed by stable names in a fixed order: the pilot
//! block, each user's encoder, each user's codebooks, then the decoder.

use crate::channel::{ChannelBatch, Precoder};
use crate::config::{QuantizerKind, TrainConfig};
use crate::decoder::{decode, decode_on, init_decoder};
use crate::encoder::{encode, encode_on, init_encoder};
use crate::error::{Error, Result};
use crate::graph::{conj_matmul_value, Graph, Var};
use crate::mlp::MlpParams;
use crate::pilots::{init_pilots, PilotMatrix};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;
use crate::vq::{
    commitment_loss, init_codebooks, quantize, select_on, sign_quantize, straight_through, Codebook, QuantizedFeedback,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub pilots: PilotMatrix,
    /// One encoder per user.
    pub encoders: Vec<MlpParams>,
    /// `codebooks[k][n]`; empty per user under the sign quantizer.
    pub codebooks: Vec<Vec<Codebook>>,
    pub decoder: MlpParams,
    pub quantizer: QuantizerKind,
}

/// Per-user components of the objective, each a batch mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub rates: Vec<f64>,
    pub mi: Vec<f64>,
    pub commitment: Vec<f64>,
    /// Weight applied to `mi` in the total.
    pub gamma: f64,
}

impl LossTerms {
    pub fn sum_rate(&self) -> f64 {
        self.rates.iter().sum()
    }

    pub fn commitment_total(&self) -> f64 {
        self.commitment.iter().sum()
    }

    /// `Σ_k (−R_k − γ·I_k + CL_k)`, accumulated in that order.
    pub fn total(&self) -> Result<f64> {
        total_loss(&self.rates, &self.mi, &self.commitment, self.gamma)
    }
}

/// `Σ_k (−R_k − γ·I_k + CL_k)`. Fails naming the first non-finite component.
pub fn total_loss(rates: &[f64], mi: &[f64], commitment: &[f64], gamma: f64) -> Result<f64> {
    if rates.len() != mi.len() || rates.len() != commitment.len() {
        return Err(Error::Shape("loss components disagree on the user count".into()));
    }
    let mut acc = 0.0;
    for k in 0..rates.len() {
        for (name, v) in [("rate", rates[k]), ("mi", mi[k]), ("cl", commitment[k])] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name}_ue_{}", k + 1)));
            }
        }
        acc = if k == 0 { -rates[k] } else { acc + -rates[k] };
        acc += mi[k] * -gamma;
        acc += commitment[k];
    }
    Ok(acc)
}

/// One recorded forward pass.
pub struct Forward {
    pub graph: Graph,
    /// Parameter leaves, aligned with [`Model::param_names`].
    pub params: Vec<Var>,
    pub loss: Var,
    pub terms: LossTerms,
    pub feedback: Vec<QuantizedFeedback>,
    pub precoder: Var,
}

/// Feedback and precoders for a batch, without the objective.
#[derive(Debug, Clone)]
pub struct Inference {
    pub feedback: Vec<QuantizedFeedback>,
    pub precoder: Precoder,
}

impl Model {
    /// Fresh parameters. Every block draws from its own stream, so for instance
    /// the decoder initialization does not depend on the encoder widths.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (m, k_users) = (cfg.channel.antennas, cfg.channel.users);
        let mc = &cfg.model;
        let seed = cfg.seed;
        let pilots = init_pilots(m, mc.pilot_len, cfg.noise().power, &mut stream(seed, Purpose::Init, 0));
        let encoders = (0..k_users)
            .map(|k| {
                init_encoder(
                    &cfg.encoder_widths(),
                    mc.pilot_len,
                    mc.latent_dim,
                    &mut stream(seed, Purpose::Init, 100 + k as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let codebooks = (0..k_users)
            .map(|k| match mc.quantizer {
                QuantizerKind::Vq => init_codebooks(
                    mc.codebooks,
                    mc.bits_per_codebook,
                    mc.latent_dim / mc.codebooks,
                    &mut stream(seed, Purpose::Init, 200 + k as u64),
                ),
                QuantizerKind::Sign => Vec::new(),
            })
            .collect();
        let decoder = init_decoder(
            &cfg.decoder_widths(),
            k_users * mc.latent_dim,
            m,
            k_users,
            &mut stream(seed, Purpose::Init, 300),
        )?;
        Ok(Self {
            pilots,
            encoders,
            codebooks,
            decoder,
            quantizer: mc.quantizer,
        })
    }

    pub fn users(&self) -> usize {
        self.encoders.len()
    }

    pub fn antennas(&self) -> usize {
        self.pilots.antennas()
    }

    /// Parameter names in registry order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["pilots".to_string()];
        let mlp_names = |prefix: &str, mlp: &MlpParams| -> Vec<String> {
            (0..mlp.layers.len())
                .flat_map(|i| [format!("{prefix}.layer{i}.weight"), format!("{prefix}.layer{i}.bias")])
                .collect()
        };
        for (k, enc) in self.encoders.iter().enumerate() {
            names.extend(mlp_names(&format!("encoder{}", k + 1), enc));
        }
        for (k, books) in self.codebooks.iter().enumerate() {
            names.extend((0..books.len()).map(|n| format!("codebook{}.{}", k + 1, n + 1)));
        }
        names.extend(mlp_names("decoder", &self.decoder));
        names
    }

    /// Whether each registry entry belongs to the codebook learning-rate group.
    pub fn codebook_mask(&self) -> Vec<bool> {
        self.param_names().iter().map(|n| n.starts_with("codebook")).collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![self.pilots.raw()];
        for enc in &self.encoders {
            out.extend(enc.tensors());
        }
        for books in &self.codebooks {
            out.extend(books.iter().map(|c| &c.codewords));
        }
        out.extend(self.decoder.tensors());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![self.pilots.raw_mut()];
        for enc in &mut self.encoders {
            out.extend(enc.tensors_mut());
        }
        for books in &mut self.codebooks {
            out.extend(books.iter_mut().map(|c| &mut c.codewords));
        }
        out.extend(self.decoder.tensors_mut());
        out
    }

    /// Checks that this model has the shapes `cfg` describes.
    pub fn check_compatible(&self, cfg: &TrainConfig) -> Result<()> {
        let expected = Model::init(cfg)?;
        if expected.quantizer != self.quantizer {
            return Err(Error::Checkpoint(
                "quantizer kind differs from the configuration".into(),
            ));
        }
        if expected.param_names() != self.param_names() {
            return Err(Error::Checkpoint(
                "parameter layout differs from the configuration".into(),
            ));
        }
        for ((name, a), b) in expected.param_names().iter().zip(expected.params()).zip(self.params()) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {:?}, configuration expects {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_inputs(&self, batch: &ChannelBatch, noise: &[Tensor]) -> Result<()> {
        let l = self.pilots.pilot_len();
        if batch.antennas != self.antennas() || batch.users != self.users() || noise.len() != self.users() {
            return Err(Error::Shape("channel batch does not match the model".into()));
        }
        if noise.iter().any(|w| w.shape() != (batch.samples, 2 * l)) {
            return Err(Error::Shape(format!(
                "pilot noise must be [{}, {}]",
                batch.samples,
                2 * l
            )));
        }
        Ok(())
    }

    fn quantize_user(&self, k: usize, z: &Tensor, words: usize) -> Result<QuantizedFeedback> {
        match self.quantizer {
            QuantizerKind::Vq => quantize(&self.codebooks[k], z),
            QuantizerKind::Sign => sign_quantize(z, words),
        }
    }

    /// Records the objective on a fresh graph.
    ///
    /// `noise[k]` is user `k`'s `[S, 2L]` pilot noise and `pairs[k]` the sample
    /// pairs used by its information estimate.
    pub fn forward(
        &self,
        cfg: &TrainConfig,
        batch: &ChannelBatch,
        noise: &[Tensor],
        pairs: &[Vec<(usize, usize)>],
    ) -> Result<Forward> {
        self.check_inputs(batch, noise)?;
        if pairs.len() != self.users() {
            return Err(Error::Shape("one pair list per user is required".into()));
        }
        let k_users = self.users();
        let power = self.pilots.power();
        let mut g = Graph::new();

        let raw = g.param(self.pilots.raw().clone());
        let mut params = vec![raw];
        let encoders: Vec<_> = self.encoders.iter().map(|e| e.bind(&mut g)).collect();
        for e in &encoders {
            params.extend(e.vars());
        }
        let tables: Vec<Vec<Var>> = self
            .codebooks
            .iter()
            .map(|books| books.iter().map(|c| g.param(c.codewords.clone())).collect())
            .collect();
        for t in &tables {
            params.extend(t);
        }
        let decoder = self.decoder.bind(&mut g);
        params.extend(decoder.vars());

        let pilots = self.pilots.effective_on(&mut g, raw);
        let mut q_dec = Vec::with_capacity(k_users);
        let mut mi = Vec::with_capacity(k_users);
        let mut cl = Vec::with_capacity(k_users);
        let mut feedback = Vec::with_capacity(k_users);
        for k in 0..k_users {
            let h = g.constant(batch.user_tensor(k));
            let clean = g.conj_matmul(h, pilots);
            let w = g.constant(noise[k].clone());
            let y = g.add(clean, w);
            let z = encode_on(&mut g, &encoders[k], y)?;
            let qf = self.quantize_user(k, g.value(z), cfg.model.codebooks)?;
            q_dec.push(straight_through(&mut g, z, &qf));
            match self.quantizer {
                QuantizerKind::Vq => {
                    let selected = select_on(&mut g, &tables[k], &qf);
                    let q_mi = g.straight_through_select(z, selected);
                    mi.push(g.kernel_mi(q_mi, &pairs[k], cfg.loss.sigma_mi));
                    cl.push(commitment_loss(&mut g, z, selected, cfg.loss.beta));
                }
                QuantizerKind::Sign => {
                    let q = g.constant(qf.q.clone());
                    mi.push(g.kernel_mi(q, &pairs[k], cfg.loss.sigma_mi));
                    cl.push(g.constant(Tensor::scalar(0.0)));
                }
            }
            feedback.push(qf);
        }
        let fb = if k_users == 1 { q_dec[0] } else { g.concat_cols(&q_dec) };
        let v = decode_on(&mut g, &decoder, fb, power);
        let h_all = g.constant(batch.to_tensor());
        let rates = g.rates(v, h_all, k_users, cfg.noise().noise_var);

        let gamma = match self.quantizer {
            QuantizerKind::Vq => cfg.loss.gamma,
            QuantizerKind::Sign => 0.0,
        };
        let mut rate_means = Vec::with_capacity(k_users);
        let mut acc: Option<Var> = None;
        for k in 0..k_users {
            let col = g.slice_cols(rates, k, 1);
            let r = g.mean(col);
            rate_means.push(r);
            let neg_r = g.scale(r, -1.0);
            let mut t = match acc {
                None => neg_r,
                Some(a) => g.add(a, neg_r),
            };
            let weighted = g.scale(mi[k], -gamma);
            t = g.add(t, weighted);
            t = g.add(t, cl[k]);
            acc = Some(t);
        }
        let loss = acc.expect("at least one user");
        let terms = LossTerms {
            rates: rate_means.iter().map(|&r| g.scalar(r)).collect(),
            mi: mi.iter().map(|&v| g.scalar(v)).collect(),
            commitment: cl.iter().map(|&v| g.scalar(v)).collect(),
            gamma,
        };
        terms.total()?;
        Ok(Forward {
            graph: g,
            params,
            loss,
            terms,
            feedback,
            precoder: v,
        })
    }

    /// Received pilots, feedback and precoders without recording gradients.
    pub fn infer(&self, batch: &ChannelBatch, noise: &[Tensor], words: usize) -> Result<Inference> {
        self.check_inputs(batch, noise)?;
        let pilots = self.pilots.effective_pilots();
        let mut feedback = Vec::with_capacity(self.users());
        for (k, w) in noise.iter().enumerate() {
            let mut y = conj_matmul_value(&batch.user_tensor(k), &pilots);
            y.add_assign(w);
            let z = encode(&self.encoders[k], &y)?;
            feedback.push(self.quantize_user(k, &z, words)?);
        }
        let parts: Vec<&Tensor> = feedback.iter().map(|f| &f.q).collect();
        let fb = Tensor::concat_cols(&parts);
        let precoder = decode(&self.decoder, &fb, self.antennas(), self.users(), self.pilots.power())?;
        Ok(Inference { feedback, precoder })
    }
}

//! Run configuration, loaded from TOML. Unknown keys are rejected.

use crate::channel::{ChannelParams, NoiseModel};
use crate::error::{Error, Result};
use crate::mi::MiConfig;
use crate::optim::AdamHyper;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    /// Learned product codebooks.
    Vq,
    /// Elementwise sign of the latent; one bit per latent dimension.
    Sign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Pilot length `L`.
    pub pilot_len: usize,
    /// Latent dimension `D`.
    pub latent_dim: usize,
    /// Sub-quantizers per user `N`.
    pub codebooks: usize,
    /// `log2 |C|` per sub-quantizer.
    pub bits_per_codebook: u32,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub quantizer: QuantizerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Commitment weight β.
    pub beta: f64,
    /// Information weight γ.
    pub gamma: f64,
    pub sigma_mi: f64,
    pub kappa: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_codebook: f64,
    pub lr_other: f64,
    #[serde(default)]
    pub adam: AdamHyper,
    /// Global gradient-norm ceiling; no clipping when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub snr_db: f64,
    pub channel: ChannelParams,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub schedule: Schedule,
}

impl TrainConfig {
    /// The reference configuration: 64 antennas, 2 users, 2 paths, 8 pilots,
    /// 10 dB, 256-dimensional latents and 200 epochs of 20 batches of 10 000.
    pub fn full() -> Self {
        Self {
            seed: 0,
            snr_db: 10.0,
            channel: ChannelParams::default(),
            model: ModelConfig {
                pilot_len: 8,
                latent_dim: 256,
                codebooks: 2,
                bits_per_codebook: 5,
                encoder_hidden: vec![1024, 512],
                decoder_hidden: vec![1024, 512],
                quantizer: QuantizerKind::Vq,
            },
            loss: LossConfig {
                beta: 0.1,
                gamma: 1.0,
                sigma_mi: 0.05,
                kappa: 16,
            },
            optim: OptimConfig {
                lr_codebook: 1e-2,
                lr_other: 1e-4,
                adam: AdamHyper::default(),
                clip_norm: None,
            },
            schedule: Schedule {
                batch_size: 10_000,
                batches_per_epoch: 20,
                epochs: 200,
            },
        }
    }

    /// A small setup that trains in seconds on one core.
    pub fn desk() -> Self {
        let mut cfg = Self::full();
        cfg.channel.antennas = 8;
        cfg.model = ModelConfig {
            pilot_len: 4,
            latent_dim: 16,
            codebooks: 2,
            bits_per_codebook: 3,
            encoder_hidden: vec![256, 256],
            decoder_hidden: vec![256, 256],
            quantizer: QuantizerKind::Vq,
        };
        cfg.schedule = Schedule {
            batch_size: 256,
            batches_per_epoch: 20,
            epochs: 5,
        };
        cfg
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel::from_snr_db(self.snr_db)
    }

    pub fn mi(&self) -> MiConfig {
        MiConfig {
            sigma_mi: self.loss.sigma_mi,
            kappa: self.loss.kappa,
        }
    }

    /// Feedback bits per user.
    pub fn feedback_bits(&self) -> usize {
        match self.model.quantizer {
            QuantizerKind::Vq => self.model.codebooks * self.model.bits_per_codebook as usize,
            QuantizerKind::Sign => self.model.latent_dim,
        }
    }

    /// Copy with `bits` feedback bits per user. Vector quantization keeps `N`
    /// and sets `bits / N` bits per codebook; the sign quantizer sets `D = bits`.
    pub fn with_feedback_bits(&self, bits: usize) -> Result<Self> {
        let mut cfg = self.clone();
        match cfg.model.quantizer {
            QuantizerKind::Vq => {
                let n = cfg.model.codebooks;
                if n == 0 || !bits.is_multiple_of(n) || bits == 0 {
                    return Err(Error::Config(format!("{bits} bits cannot be split over {n} codebooks")));
                }
                cfg.model.bits_per_codebook = (bits / n) as u32;
            }
            QuantizerKind::Sign => cfg.model.latent_dim = bits,
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![2 * self.model.pilot_len];
        w.extend(&self.model.encoder_hidden);
        w.push(self.model.latent_dim);
        w
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.channel.users * self.model.latent_dim];
        w.extend(&self.model.decoder_hidden);
        w.push(2 * self.channel.antennas * self.channel.users);
        w
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        if !self.snr_db.is_finite() {
            return Err(Error::Config("snr_db must be finite".into()));
        }
        let m = &self.model;
        if m.pilot_len == 0 || m.latent_dim == 0 || m.codebooks == 0 {
            return Err(Error::Config(
                "pilot_len, latent_dim and codebooks must be positive".into(),
            ));
        }
        if m.encoder_hidden.contains(&0) || m.decoder_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !m.latent_dim.is_multiple_of(m.codebooks) {
            return Err(Error::Config(format!(
                "latent_dim {} is not divisible into {} codebooks",
                m.latent_dim, m.codebooks
            )));
        }
        if m.quantizer == QuantizerKind::Vq && !(1..=20).contains(&m.bits_per_codebook) {
            return Err(Error::Config("bits_per_codebook must be in 1..=20".into()));
        }
        if m.quantizer == QuantizerKind::Sign && m.latent_dim / m.codebooks > 20 {
            return Err(Error::Config("sign words wider than 20 bits".into()));
        }
        let l = &self.loss;
        if !(l.beta >= 0.0) || !(l.gamma >= 0.0) || !l.beta.is_finite() || !l.gamma.is_finite() {
            return Err(Error::Config("beta and gamma must be finite and non-negative".into()));
        }
        self.mi().validate()?;
        let o = &self.optim;
        if !(o.lr_codebook > 0.0) || !(o.lr_other > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if let Some(c) = o.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        let s = &self.schedule;
        if s.batch_size < 2 || s.batches_per_epoch == 0 || s.epochs == 0 {
            return Err(Error::Config(
                "batch_size must be at least 2; batches_per_epoch and epochs positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        config_hash(&self.to_toml())
    }
}

pub(crate) fn config_hash(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Train,
    Sweep,
    Interpret,
    Histograms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baselines {
    pub mrt: bool,
    pub zf: bool,
    pub sign: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Default experiment when none is named on the command line.
    pub experiment: Experiment,
    /// Feedback bits per user for the rate sweep.
    pub sweep_bits: Vec<usize>,
    pub baselines: Baselines,
    /// Held-out channels per evaluation.
    pub test_samples: usize,
    pub interpret_samples: usize,
    pub interpret_bits: usize,
    pub permutations: usize,
    pub histogram_bits: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Train,
            sweep_bits: vec![4, 6, 8, 10, 12, 16, 20],
            baselines: Baselines {
                mrt: true,
                zf: true,
                sign: true,
            },
            test_samples: 10_000,
            interpret_samples: 10_000,
            interpret_bits: 6,
            permutations: 999,
            histogram_bits: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn full() -> Self {
        Self {
            train: TrainConfig::full(),
            experiment: ExperimentConfig::default(),
        }
    }

    pub fn desk() -> Self {
        Self {
            train: TrainConfig::desk(),
            experiment: ExperimentConfig {
                sweep_bits: vec![4, 8, 12],
                test_samples: 4096,
                ..ExperimentConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let e = &self.experiment;
        if e.sweep_bits.is_empty() {
            return Err(Error::Config("sweep_bits is empty".into()));
        }
        let n = self.train.model.codebooks;
        for &b in &e.sweep_bits {
            if b == 0 || b % n != 0 || b / n > 20 {
                return Err(Error::Config(format!(
                    "sweep point {b} bits is not {n} codebooks of 1..=20 bits"
                )));
            }
        }
        if e.histogram_bits == 0 || !e.histogram_bits.is_multiple_of(n) {
            return Err(Error::Config(format!(
                "histogram_bits {} is not a multiple of {n} codebooks",
                e.histogram_bits
            )));
        }
        if e.test_samples < 2 || e.interpret_samples < 2 || e.interpret_bits == 0 || e.interpret_bits > 20 {
            return Err(Error::Config(
                "evaluation sizes too small or interpret_bits out of range".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        config_hash(&self.to_toml())
    }
}

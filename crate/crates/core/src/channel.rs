//! Sparse multipath downlink channels for a uniform linear array, pilot
//! reception, achievable rates and the full-CSI baseline precoders.

use crate::error::{Error, Result};
use crate::graph::{conj_matmul_value, rates_value};
use crate::rng::SimRng;
use crate::tensor::Tensor;
use crate::tensor_io::write_tensor;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    /// Transmit antennas at the base station.
    pub antennas: usize,
    /// Single-antenna users served simultaneously.
    pub users: usize,
    /// Propagation paths per user.
    pub paths: usize,
    #[serde(default = "default_spacing")]
    pub d_over_lambda: f64,
    pub aod_low: f64,
    pub aod_high: f64,
    pub path_gain_variance: f64,
}

fn default_spacing() -> f64 {
    0.5
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 || self.users == 0 || self.paths == 0 {
            return Err(Error::Config("antenna, user and path counts must be positive".into()));
        }
        if self.users > self.antennas {
            return Err(Error::Config(format!(
                "{} users exceed {} antennas",
                self.users, self.antennas
            )));
        }
        if !(self.aod_low < self.aod_high) {
            return Err(Error::Config("aod_low must be below aod_high".into()));
        }
        if !(self.path_gain_variance > 0.0) || !(self.d_over_lambda > 0.0) {
            return Err(Error::Config(
                "path gain variance and antenna spacing must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            antennas: 64,
            users: 2,
            paths: 2,
            d_over_lambda: 0.5,
            aod_low: -PI / 6.0,
            aod_high: PI / 6.0,
            path_gain_variance: 1.0,
        }
    }
}

/// Receiver noise variance and total transmit power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub noise_var: f64,
    pub power: f64,
}

impl NoiseModel {
    /// Unit noise variance with `P = 10^(snr_db / 10)`.
    pub fn from_snr_db(snr_db: f64) -> Self {
        Self {
            noise_var: 1.0,
            power: 10f64.powf(snr_db / 10.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_var > 0.0 && self.power > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("noise variance and power must be positive".into()))
        }
    }
}

/// Channel realizations `h[s, k, :]` and the path parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBatch {
    pub samples: usize,
    pub users: usize,
    pub antennas: usize,
    pub paths: usize,
    pub d_over_lambda: f64,
    /// `[S, K, M]`, row-major.
    pub h: Vec<Complex64>,
    /// `[S, K, Lp]` angles of departure in radians.
    pub aods: Vec<f64>,
    /// `[S, K, Lp]` complex path gains.
    pub gains: Vec<Complex64>,
}

impl ChannelBatch {
    pub fn channel(&self, s: usize, k: usize) -> &[Complex64] {
        let off = (s * self.users + k) * self.antennas;
        &self.h[off..off + self.antennas]
    }

    pub fn aods_of(&self, s: usize, k: usize) -> &[f64] {
        let off = (s * self.users + k) * self.paths;
        &self.aods[off..off + self.paths]
    }

    pub fn gains_of(&self, s: usize, k: usize) -> &[Complex64] {
        let off = (s * self.users + k) * self.paths;
        &self.gains[off..off + self.paths]
    }

    /// All users' channels as `[S, 2·K·M]`, user-major, real/imag interleaved.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_complex(self.samples, self.users * self.antennas, &self.h)
    }

    /// One user's channels as `[S, 2·M]`.
    pub fn user_tensor(&self, k: usize) -> Tensor {
        let mut vals = Vec::with_capacity(self.samples * self.antennas);
        for s in 0..self.samples {
            vals.extend_from_slice(self.channel(s, k));
        }
        Tensor::from_complex(self.samples, self.antennas, &vals)
    }

    /// Samples `start .. start + len` as a batch of their own.
    pub fn slice(&self, start: usize, len: usize) -> ChannelBatch {
        assert!(start + len <= self.samples, "slice out of range");
        let (hk, pk) = (self.users * self.antennas, self.users * self.paths);
        ChannelBatch {
            samples: len,
            h: self.h[start * hk..(start + len) * hk].to_vec(),
            aods: self.aods[start * pk..(start + len) * pk].to_vec(),
            gains: self.gains[start * pk..(start + len) * pk].to_vec(),
            ..*self
        }
    }

    /// Rebuilds every channel vector from the stored path parameters.
    pub fn reconstruct(&self) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.h.len());
        for s in 0..self.samples {
            for k in 0..self.users {
                out.extend(multipath_channel(
                    self.aods_of(s, k),
                    self.gains_of(s, k),
                    self.antennas,
                    self.d_over_lambda,
                ));
            }
        }
        out
    }

    /// Writes `h` as a `[S, K, M, 2]` tensor file.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let data: Vec<f64> = self.h.iter().flat_map(|c| [c.re, c.im]).collect();
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_tensor(&mut file, &[self.samples, self.users, self.antennas, 2], &data)
    }
}

/// ULA steering vector with entries `exp(j·2π·(d/λ)·m·sin θ)`.
pub fn array_response(theta: f64, antennas: usize, d_over_lambda: f64) -> Vec<Complex64> {
    let phase = TAU * d_over_lambda * theta.sin();
    (0..antennas)
        .map(|m| {
            if m == 0 {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::from_polar(1.0, phase * m as f64)
            }
        })
        .collect()
}

/// `h = (1/√Lp) Σ_l α_l a(θ_l)`.
pub fn multipath_channel(aods: &[f64], gains: &[Complex64], antennas: usize, d_over_lambda: f64) -> Vec<Complex64> {
    let norm = 1.0 / (aods.len() as f64).sqrt();
    let mut h = vec![Complex64::new(0.0, 0.0); antennas];
    for (&theta, &alpha) in aods.iter().zip(gains) {
        for (hm, a) in h.iter_mut().zip(array_response(theta, antennas, d_over_lambda)) {
            *hm += alpha * a;
        }
    }
    h.iter_mut().for_each(|v| *v *= norm);
    h
}

/// Draws `samples` independent realizations of every user's channel.
pub fn sample_channels(params: &ChannelParams, samples: usize, rng: &mut SimRng) -> ChannelBatch {
    let aod_dist = Uniform::new_inclusive(params.aod_low, params.aod_high).expect("validated AoD range");
    let gain_dist = Normal::new(0.0, (params.path_gain_variance / 2.0).sqrt()).expect("validated gain variance");
    let n = samples * params.users;
    let mut aods = Vec::with_capacity(n * params.paths);
    let mut gains = Vec::with_capacity(n * params.paths);
    let mut h = Vec::with_capacity(n * params.antennas);
    for _ in 0..n {
        let start = aods.len();
        for _ in 0..params.paths {
            aods.push(aod_dist.sample(rng));
            let re = gain_dist.sample(rng);
            let im = gain_dist.sample(rng);
            gains.push(Complex64::new(re, im));
        }
        h.extend(multipath_channel(
            &aods[start..],
            &gains[start..],
            params.antennas,
            params.d_over_lambda,
        ));
    }
    ChannelBatch {
        samples,
        users: params.users,
        antennas: params.antennas,
        paths: params.paths,
        d_over_lambda: params.d_over_lambda,
        h,
        aods,
        gains,
    }
}

/// Circularly-symmetric complex Gaussian noise, one `[S, 2·L]` block per user.
pub fn pilot_noise(
    samples: usize,
    users: usize,
    pilot_len: usize,
    noise: &NoiseModel,
    rng: &mut SimRng,
) -> Vec<Tensor> {
    let dist = Normal::new(0.0, (noise.noise_var / 2.0).sqrt()).expect("positive noise variance");
    (0..users)
        .map(|_| {
            let data = (0..samples * 2 * pilot_len).map(|_| dist.sample(rng)).collect();
            Tensor::from_vec(samples, 2 * pilot_len, data)
        })
        .collect()
}

/// Received pilots `y_k = h_kᴴ X + w_k` for every user, each `[S, 2·L]`.
///
/// `pilots` is the effective `[M, 2·L]` pilot block.
pub fn receive_pilots(
    batch: &ChannelBatch,
    pilots: &Tensor,
    noise: &NoiseModel,
    rng: &mut SimRng,
) -> Result<Vec<Tensor>> {
    if pilots.rows() != batch.antennas || pilots.cols() < 2 || !pilots.cols().is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "pilot block {:?} incompatible with {} antennas",
            pilots.shape(),
            batch.antennas
        )));
    }
    let noise_blocks = pilot_noise(batch.samples, batch.users, pilots.cols() / 2, noise, rng);
    Ok(noise_blocks
        .into_iter()
        .enumerate()
        .map(|(k, mut w)| {
            let clean = conj_matmul_value(&batch.user_tensor(k), pilots);
            w.add_assign(&clean);
            w
        })
        .collect())
}

/// Linear precoders for a batch: `[S, 2·M·K]`, column `k` of sample `s`
/// occupying the interleaved slice `2Mk .. 2M(k+1)` of row `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Precoder {
    pub v: Tensor,
    pub antennas: usize,
    pub users: usize,
    pub power: f64,
    /// Samples that hit a degenerate-input rule.
    pub flagged: Vec<usize>,
}

impl Precoder {
    pub fn new(v: Tensor, antennas: usize, users: usize, power: f64) -> Self {
        assert_eq!(v.cols(), 2 * antennas * users);
        Self {
            v,
            antennas,
            users,
            power,
            flagged: Vec::new(),
        }
    }

    pub fn samples(&self) -> usize {
        self.v.rows()
    }

    pub fn column(&self, s: usize, k: usize) -> Vec<Complex64> {
        let m = self.antennas;
        self.v.row(s)[2 * m * k..2 * m * (k + 1)]
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect()
    }

    /// `Tr(V_s V_sᴴ)`.
    pub fn trace_power(&self, s: usize) -> f64 {
        self.v.row(s).iter().map(|x| x * x).sum()
    }
}

/// Per-user rates `log2(1 + SINR_k)`, `[S, K]`.
pub fn achievable_rates(batch: &ChannelBatch, precoder: &Precoder, noise: &NoiseModel) -> Result<Tensor> {
    if precoder.samples() != batch.samples || precoder.users != batch.users || precoder.antennas != batch.antennas {
        return Err(Error::Shape("precoder does not match channel batch".into()));
    }
    Ok(rates_value(
        &precoder.v,
        &batch.to_tensor(),
        batch.users,
        noise.noise_var,
    ))
}

fn write_column(row: &mut [f64], antennas: usize, k: usize, col: &[Complex64], scale: f64) {
    for (m, c) in col.iter().enumerate() {
        row[2 * antennas * k + 2 * m] = c.re * scale;
        row[2 * antennas * k + 2 * m + 1] = c.im * scale;
    }
}

fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Maximum-ratio transmission with equal per-user power.
pub fn mrt_precoder(batch: &ChannelBatch, power: f64) -> Precoder {
    let (m, k_users) = (batch.antennas, batch.users);
    let mut v = Tensor::zeros(batch.samples, 2 * m * k_users);
    let mut flagged = Vec::new();
    for s in 0..batch.samples {
        let norms: Vec<f64> = (0..k_users).map(|k| norm(batch.channel(s, k))).collect();
        let active = norms.iter().filter(|&&n| n > 0.0).count();
        if active < k_users {
            flagged.push(s);
        }
        if active == 0 {
            continue;
        }
        let per_user = (power / active as f64).sqrt();
        let row = v.row_mut(s);
        for (k, &n) in norms.iter().enumerate() {
            if n > 0.0 {
                write_column(row, m, k, batch.channel(s, k), per_user / n);
            }
        }
    }
    Precoder {
        v,
        antennas: m,
        users: k_users,
        power,
        flagged,
    }
}

/// Condition number of `H` above which the zero-forcing inverse is regularized.
pub const ZF_CONDITION_LIMIT: f64 = 1e8;

/// Zero-forcing directions `Hᴴ(HHᴴ)⁻¹`, each column scaled to `√(P/K)`.
pub fn zf_precoder(batch: &ChannelBatch, power: f64) -> Precoder {
    let (m, k_users) = (batch.antennas, batch.users);
    let per_user = (power / k_users as f64).sqrt();
    let mut v = Tensor::zeros(batch.samples, 2 * m * k_users);
    let mut flagged = Vec::new();
    for s in 0..batch.samples {
        // Row k of H is h_kᴴ.
        let h = DMatrix::from_fn(k_users, m, |k, j| batch.channel(s, k)[j].conj());
        let svals = h.clone().svd(false, false).singular_values;
        let smax = svals.max();
        let smin = svals.min();
        let mut gram = &h * h.adjoint();
        let rank_deficient = k_users > m || !(smin > 0.0) || smax / smin > ZF_CONDITION_LIMIT;
        if rank_deficient {
            let eps = 1e-6 * gram.trace().re / k_users as f64;
            for i in 0..k_users {
                gram[(i, i)] += Complex64::new(eps.max(f64::MIN_POSITIVE), 0.0);
            }
            flagged.push(s);
        }
        let Some(inv) = gram.try_inverse() else {
            flagged.push(s);
            continue;
        };
        let dirs = h.adjoint() * inv;
        let cols: Vec<Vec<Complex64>> = (0..k_users).map(|k| dirs.column(k).iter().copied().collect()).collect();
        let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
        let active = norms.iter().filter(|&&n| n > 0.0).count();
        let share = if active < k_users {
            flagged.push(s);
            (power / active.max(1) as f64).sqrt()
        } else {
            per_user
        };
        let row = v.row_mut(s);
        for (k, (col, &n)) in cols.iter().zip(&norms).enumerate() {
            if n > 0.0 {
                write_column(row, m, k, col, share / n);
            }
        }
    }
    flagged.dedup();
    Precoder {
        v,
        antennas: m,
        users: k_users,
        power,
        flagged,
    }
}

//! Learned-codebook quantization of user latents.
//!
//! A latent of dimension `D` is split into `N` contiguous slices of `D/N`
//! reals; slice `n` is replaced by its nearest codeword in codebook `n`, and
//! the `N` indices form the feedback word of `N · log2|C|` bits. Gradients
//! pass the quantizer straight through to the encoder, while codewords learn
//! from the commitment term and from the information regularizer.
//!
//! A sign quantizer (`q = sign(z)`, one bit per latent dimension) is provided
//! as the scalar-quantization baseline.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::SimRng;
use crate::tensor::Tensor;
use rand_distr::{Distribution, Normal};

/// Codeword usage counts since the last reset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageHistogram {
    counts: Vec<u64>,
}

impl UsageHistogram {
    pub fn new(size: usize) -> Self {
        Self { counts: vec![0; size] }
    }

    pub fn record(&mut self, index: usize) {
        self.counts[index] += 1;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
    }

    /// Normalized usage and its entropy in bits.
    pub fn distribution(&self) -> Result<(Vec<f64>, f64)> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Samples("no quantizations recorded".into()));
        }
        let probs: Vec<f64> = self.counts.iter().map(|&c| c as f64 / total as f64).collect();
        let entropy = -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.log2()).sum::<f64>();
        Ok((probs, entropy.max(0.0)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `[|C|, D/N]`
    pub codewords: Tensor,
    pub usage: UsageHistogram,
}

impl Codebook {
    pub fn new(codewords: Tensor) -> Self {
        let usage = UsageHistogram::new(codewords.rows());
        Self { codewords, usage }
    }

    pub fn size(&self) -> usize {
        self.codewords.rows()
    }

    pub fn dim(&self) -> usize {
        self.codewords.cols()
    }
}

/// `N` codebooks of `2^bits` codewords each, entries `N(0, 1/D_sub)`.
pub fn init_codebooks(count: usize, bits: u32, sub_dim: usize, rng: &mut SimRng) -> Vec<Codebook> {
    assert!(bits >= 1 && sub_dim >= 1);
    let size = 1usize << bits;
    let dist = Normal::new(0.0, 1.0 / (sub_dim as f64).sqrt()).expect("positive scale");
    (0..count)
        .map(|_| {
            let data = (0..size * sub_dim).map(|_| dist.sample(rng)).collect();
            Codebook::new(Tensor::from_vec(size, sub_dim, data))
        })
        .collect()
}

/// Feedback bits per user for `count` codebooks of `2^bits` entries.
pub fn feedback_bits(count: usize, bits: u32) -> usize {
    count * bits as usize
}

/// Quantizer output for one user across a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedFeedback {
    /// `[S, N]`, row-major.
    pub indices: Vec<usize>,
    /// `[S, D]`, the concatenated selected codewords.
    pub q: Tensor,
    pub sub_quantizers: usize,
}

impl QuantizedFeedback {
    pub fn samples(&self) -> usize {
        self.q.rows()
    }

    pub fn index(&self, s: usize, n: usize) -> usize {
        self.indices[s * self.sub_quantizers + n]
    }

    /// Indices chosen by sub-quantizer `n` for every sample.
    pub fn column(&self, n: usize) -> Vec<usize> {
        (0..self.samples()).map(|s| self.index(s, n)).collect()
    }
}

/// Index of the codeword nearest to `x`; ties go to the lowest index.
pub fn nearest(codewords: &Tensor, x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..codewords.rows() {
        let d: f64 = codewords.row(i).iter().zip(x).map(|(c, z)| (c - z) * (c - z)).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn check_layout(codebooks: &[Codebook], dim: usize) -> Result<usize> {
    if codebooks.is_empty() || codebooks.iter().any(|c| c.size() == 0) {
        return Err(Error::Config("empty codebook".into()));
    }
    let sub = codebooks[0].dim();
    if codebooks.iter().any(|c| c.dim() != sub) || sub * codebooks.len() != dim {
        return Err(Error::Shape(format!(
            "latent dimension {dim} is not {} slices of {sub}",
            codebooks.len()
        )));
    }
    Ok(sub)
}

/// Nearest-codeword quantization of every slice of `z: [S, D]`. Pure; usage
/// is recorded separately with [`record_usage`].
pub fn quantize(codebooks: &[Codebook], z: &Tensor) -> Result<QuantizedFeedback> {
    let sub = check_layout(codebooks, z.cols())?;
    let n = codebooks.len();
    let mut indices = Vec::with_capacity(z.rows() * n);
    let mut q = Tensor::zeros(z.rows(), z.cols());
    for s in 0..z.rows() {
        for (j, cb) in codebooks.iter().enumerate() {
            let i = nearest(&cb.codewords, &z.row(s)[j * sub..(j + 1) * sub]);
            indices.push(i);
            q.row_mut(s)[j * sub..(j + 1) * sub].copy_from_slice(cb.codewords.row(i));
        }
    }
    Ok(QuantizedFeedback {
        indices,
        q,
        sub_quantizers: n,
    })
}

/// Adds the selections in `qf` to each codebook's usage counters.
pub fn record_usage(codebooks: &mut [Codebook], qf: &QuantizedFeedback) {
    for s in 0..qf.samples() {
        for (n, cb) in codebooks.iter_mut().enumerate() {
            cb.usage.record(qf.index(s, n));
        }
    }
}

/// [`quantize`] followed by [`record_usage`].
pub fn quantize_and_count(codebooks: &mut [Codebook], z: &Tensor) -> Result<QuantizedFeedback> {
    let qf = quantize(codebooks, z)?;
    record_usage(codebooks, &qf);
    Ok(qf)
}

/// Concatenated codewords for an index table `[S, N]`.
pub fn reconstruct(codebooks: &[Codebook], indices: &[usize]) -> Tensor {
    let n = codebooks.len();
    let parts: Vec<Tensor> = codebooks
        .iter()
        .enumerate()
        .map(|(j, cb)| {
            let idx: Vec<usize> = indices.iter().skip(j).step_by(n).copied().collect();
            let mut t = Tensor::zeros(idx.len(), cb.dim());
            for (r, &i) in idx.iter().enumerate() {
                t.row_mut(r).copy_from_slice(cb.codewords.row(i));
            }
            t
        })
        .collect();
    Tensor::concat_cols(&parts.iter().collect::<Vec<_>>())
}

/// Records the selected codewords as a differentiable function of the
/// codebook tensors bound at `tables`.
pub fn select_on(g: &mut Graph, tables: &[Var], qf: &QuantizedFeedback) -> Var {
    let parts: Vec<Var> = tables
        .iter()
        .enumerate()
        .map(|(j, &t)| g.gather(t, &qf.column(j)))
        .collect();
    if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_cols(&parts)
    }
}

/// `z + sg(q − z)`: value `q`, gradient copied to `z`, none to the codewords.
pub fn straight_through(g: &mut Graph, z: Var, qf: &QuantizedFeedback) -> Var {
    g.straight_through(z, qf.q.clone())
}

/// `β‖sg(q) − z‖² + ‖q − sg(z)‖²`, averaged over the batch. `selected` is the
/// output of [`select_on`].
pub fn commitment_loss(g: &mut Graph, z: Var, selected: Var, beta: f64) -> Var {
    let q_stop = g.stop_grad(selected);
    let z_stop = g.stop_grad(z);
    let enc_diff = g.sub(z, q_stop);
    let cb_diff = g.sub(selected, z_stop);
    let enc_term = g.row_sq_norm_mean(enc_diff);
    let enc_term = g.scale(enc_term, beta);
    let cb_term = g.row_sq_norm_mean(cb_diff);
    g.add(enc_term, cb_term)
}

/// Elementwise sign (`+1` for `z ≥ 0`), with the `D` bits grouped into
/// `words` indices of `D / words` bits each (least significant bit first).
pub fn sign_quantize(z: &Tensor, words: usize) -> Result<QuantizedFeedback> {
    if words == 0 || !z.cols().is_multiple_of(words) {
        return Err(Error::Shape(format!(
            "{} sign bits cannot form {words} equal words",
            z.cols()
        )));
    }
    let width = z.cols() / words;
    let q = z.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
    let mut indices = Vec::with_capacity(z.rows() * words);
    for s in 0..z.rows() {
        for w in 0..words {
            let idx = z.row(s)[w * width..(w + 1) * width]
                .iter()
                .enumerate()
                .fold(0usize, |acc, (b, &v)| acc | (usize::from(v >= 0.0) << b));
            indices.push(idx);
        }
    }
    Ok(QuantizedFeedback {
        indices,
        q,
        sub_quantizers: words,
    })
}

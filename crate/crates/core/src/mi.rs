//! Training-free lower bounds on the information a deterministic quantizer
//! output carries about its input.
//!
//! For `Z = T(X)` with `T` deterministic, `I(X; Z) = H(Z)`, and Jensen's
//! inequality gives `H(Z) ≥ −log E[δ(z − z')]` over independent pairs. For a
//! discrete `Z` the right-hand side is the collision (order-2 Rényi)
//! entropy `−log Σ p²`. Replacing the indicator by a Gaussian kernel of width
//! `σ` makes the bound differentiable in the quantized latents.
//!
//! All values are in nats.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::SimRng;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::hash::Hash;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiConfig {
    /// Kernel width σ in `exp(−‖q − q'‖² / 2σ²)`.
    pub sigma_mi: f64,
    /// Pairs sampled per batch, as a multiple of the batch size.
    pub kappa: usize,
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_mi > 0.0 && self.kappa >= 1 {
            Ok(())
        } else {
            Err(Error::Config("sigma_mi must be positive and kappa at least 1".into()))
        }
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Distribution("entries must be finite and non-negative".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Distribution(format!("mass sums to {total}")));
    }
    Ok(())
}

/// `−log Σ p_i²`, the exact collision bound for a discrete variable.
pub fn collision_entropy_exact(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    let collision: f64 = p.iter().map(|v| v * v).sum();
    Ok(-collision.ln())
}

/// `−Σ p_i log p_i`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
}

/// Monte-Carlo indicator bound over all ordered pairs `b ≠ b'`.
///
/// Returns `f64::INFINITY` when no pair collides.
pub fn mi_bound_indicator<T: Eq + Hash>(labels: &[T]) -> Result<f64> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::Samples(format!("need at least 2 labels, got {n}")));
    }
    let mut counts: HashMap<&T, u64> = HashMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let collisions: u64 = counts.values().map(|&c| c * (c - 1)).sum();
    let pairs = n as u64 * (n as u64 - 1);
    Ok(pair_ratio_bound(collisions, pairs))
}

/// Indicator bound over an explicit list of ordered pairs.
pub fn mi_bound_indicator_pairs<T: Eq>(labels: &[T], pairs: &[(usize, usize)]) -> Result<f64> {
    if labels.len() < 2 || pairs.is_empty() {
        return Err(Error::Samples("need at least 2 labels and one pair".into()));
    }
    let collisions = pairs.iter().filter(|&&(a, b)| labels[a] == labels[b]).count() as u64;
    Ok(pair_ratio_bound(collisions, pairs.len() as u64))
}

fn pair_ratio_bound(collisions: u64, pairs: u64) -> f64 {
    if collisions == 0 {
        f64::INFINITY
    } else {
        -(collisions as f64 / pairs as f64).ln()
    }
}

/// Every ordered pair `(b, b')` with `b ≠ b'`.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect()
}

/// `count` ordered pairs drawn uniformly among those with `b ≠ b'`; all
/// `n(n−1)` pairs when `count` reaches that number.
pub fn sample_pairs(n: usize, count: usize, rng: &mut SimRng) -> Vec<(usize, usize)> {
    assert!(n >= 2, "pair sampling needs at least two samples");
    if count >= n * (n - 1) {
        return all_pairs(n);
    }
    (0..count)
        .map(|_| {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        })
        .collect()
}

/// Records the kernel bound over `κ·S` sampled pairs of the rows of `q`.
pub fn mi_bound_kernel(g: &mut Graph, q: Var, cfg: &MiConfig, rng: &mut SimRng) -> Var {
    let n = g.value(q).rows();
    let pairs = sample_pairs(n, cfg.kappa * n, rng);
    g.kernel_mi(q, &pairs, cfg.sigma_mi)
}

/// Plain evaluation of the kernel bound for explicit pairs.
pub fn kernel_bound_value(q: &Tensor, pairs: &[(usize, usize)], sigma_mi: f64) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(q.clone());
    let out = g.kernel_mi(v, pairs, sigma_mi);
    g.scalar(out)
}

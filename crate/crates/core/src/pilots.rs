//! Trainable downlink pilots.
//!
//! The optimizer sees an unconstrained raw block; the pilots actually
//! transmitted are its columns rescaled to squared norm `P`, so the power
//! constraint holds with equality after every update.

use crate::graph::{Graph, Var};
use crate::rng::SimRng;
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    /// `[M, 2·L]`, real/imag interleaved per entry.
    raw: Tensor,
    power: f64,
}

/// Raw entries i.i.d. standard normal.
pub fn init_pilots(antennas: usize, pilot_len: usize, power: f64, rng: &mut SimRng) -> PilotMatrix {
    assert!(antennas >= 1 && pilot_len >= 1, "pilot block needs positive dimensions");
    let data = (0..antennas * 2 * pilot_len)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    PilotMatrix {
        raw: Tensor::from_vec(antennas, 2 * pilot_len, data),
        power,
    }
}

impl PilotMatrix {
    pub fn from_raw(raw: Tensor, power: f64) -> Self {
        assert!(raw.cols().is_multiple_of(2), "raw pilots must be interleaved complex");
        Self { raw, power }
    }

    pub fn antennas(&self) -> usize {
        self.raw.rows()
    }

    pub fn pilot_len(&self) -> usize {
        self.raw.cols() / 2
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut Tensor {
        &mut self.raw
    }

    /// Records the normalization on `g`, with `raw` already bound there.
    pub fn effective_on(&self, g: &mut Graph, raw: Var) -> Var {
        g.normalize_complex_columns(raw, self.power)
    }

    /// The transmitted `[M, 2·L]` pilot block.
    pub fn effective_pilots(&self) -> Tensor {
        let mut g = Graph::new();
        let raw = g.constant(self.raw.clone());
        let eff = self.effective_on(&mut g, raw);
        g.value(eff).clone()
    }

    /// Redraws any all-zero raw column. Returns the columns that were replaced.
    pub fn heal(&mut self, rng: &mut SimRng) -> Vec<usize> {
        let mut healed = Vec::new();
        for c in 0..self.pilot_len() {
            let zero = (0..self.antennas()).all(|r| self.raw.get(r, 2 * c) == 0.0 && self.raw.get(r, 2 * c + 1) == 0.0);
            if zero {
                for r in 0..self.antennas() {
                    self.raw.set(r, 2 * c, StandardNormal.sample(rng));
                    self.raw.set(r, 2 * c + 1, StandardNormal.sample(rng));
                }
                log::warn!("pilot column {c} collapsed to zero; re-initialized");
                healed.push(c);
            }
        }
        healed
    }
}

/// Squared norm of each complex column of an interleaved block.
pub fn column_powers(block: &Tensor) -> Vec<f64> {
    (0..block.cols() / 2)
        .map(|c| {
            (0..block.rows())
                .map(|r| block.get(r, 2 * c).powi(2) + block.get(r, 2 * c + 1).powi(2))
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn single_axis_column_normalizes() {
        let mut raw = Tensor::zeros(3, 2);
        raw.set(0, 0, 5.0);
        let pm = PilotMatrix::from_raw(raw, 10.0);
        let eff = pm.effective_pilots();
        assert!((eff.get(0, 0) - 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(eff.get(1, 0), 0.0);
        assert_eq!(eff.get(0, 1), 0.0);
    }

    #[test]
    fn fresh_init_is_deterministic_and_powered() {
        let a = init_pilots(64, 8, 10.0, &mut stream(7, Purpose::Init, 0));
        let b = init_pilots(64, 8, 10.0, &mut stream(7, Purpose::Init, 0));
        assert_eq!(a, b);
        for p in column_powers(&a.effective_pilots()) {
            assert!((p - 10.0).abs() <= 1e-9 * 10.0);
        }
        let eff = a.effective_pilots();
        for c1 in 0..8 {
            for c2 in c1 + 1..8 {
                assert!((0..64).any(|r| eff.get(r, 2 * c1) != eff.get(r, 2 * c2)));
            }
        }
    }

    #[test]
    fn positive_column_scaling_is_invisible() {
        let pm = init_pilots(4, 3, 2.0, &mut stream(1, Purpose::Init, 0));
        let mut scaled = pm.clone();
        for r in 0..4 {
            for j in [2, 3] {
                let v = scaled.raw().get(r, j);
                scaled.raw_mut().set(r, j, v * 4.0);
            }
        }
        assert_eq!(pm.effective_pilots(), scaled.effective_pilots());
    }

    #[test]
    fn zero_column_is_healed() {
        let mut pm = init_pilots(4, 2, 1.0, &mut stream(1, Purpose::Init, 0));
        for r in 0..4 {
            pm.raw_mut().set(r, 2, 0.0);
            pm.raw_mut().set(r, 3, 0.0);
        }
        let healed = pm.heal(&mut stream(1, Purpose::PilotHeal, 0));
        assert_eq!(healed, vec![1]);
        for p in column_powers(&pm.effective_pilots()) {
            assert!((p - 1.0).abs() < 1e-12);
        }
    }
}

//! Adam with independently tuned parameter groups.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Parameters sharing one learning rate and one step counter.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub lr: f64,
    step: u64,
    slots: Vec<Moments>,
}

impl ParamGroup {
    pub fn steps(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupId(usize);

#[derive(Debug, Clone)]
pub struct Adam {
    hyper: AdamHyper,
    groups: Vec<ParamGroup>,
}

impl Adam {
    pub fn new(hyper: AdamHyper) -> Self {
        Self {
            hyper,
            groups: Vec::new(),
        }
    }

    /// Registers a group whose members have the given element counts.
    pub fn add_group(&mut self, lr: f64, sizes: &[usize]) -> GroupId {
        let slots = sizes
            .iter()
            .map(|&n| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            })
            .collect();
        self.groups.push(ParamGroup { lr, step: 0, slots });
        GroupId(self.groups.len() - 1)
    }

    pub fn group(&self, id: GroupId) -> &ParamGroup {
        &self.groups[id.0]
    }

    /// One bias-corrected Adam update of every member of `id`.
    pub fn step(&mut self, id: GroupId, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let group = &mut self.groups[id.0];
        assert_eq!(params.len(), group.slots.len(), "group membership changed");
        assert_eq!(params.len(), grads.len());
        group.step += 1;
        let t = group.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let lr = group.lr;
        for ((param, grad), slot) in params.iter_mut().zip(grads).zip(&mut group.slots) {
            assert_eq!(param.len(), slot.first.len(), "parameter size changed");
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(&mut slot.first)
                .zip(&mut slot.second)
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut adam = Adam::new(AdamHyper::default());
        let id = adam.add_group(0.1, &[3]);
        let mut p = Tensor::from_vec(1, 3, vec![1.0, -2.0, 3.0]);
        let g = Tensor::zeros(1, 3);
        for _ in 0..5 {
            adam.step(id, &mut [&mut p], &[&g]);
        }
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        let hyper = AdamHyper::default();
        let mut adam = Adam::new(hyper);
        let id = adam.add_group(0.01, &[3]);
        let mut p = Tensor::zeros(1, 3);
        let g = Tensor::from_vec(1, 3, vec![4.0, -0.5, 1e-3]);
        adam.step(id, &mut [&mut p], &[&g]);
        for (pv, gv) in p.data().iter().zip(g.data()) {
            let expect = -0.01 * gv / (gv.abs() + hyper.eps);
            assert!((pv - expect).abs() < 1e-15, "{pv} vs {expect}");
        }
    }

    #[test]
    fn groups_use_their_own_rate() {
        let mut adam = Adam::new(AdamHyper::default());
        let fast = adam.add_group(1e-2, &[1]);
        let slow = adam.add_group(1e-4, &[1]);
        let (mut a, mut b) = (Tensor::scalar(0.0), Tensor::scalar(0.0));
        let g = Tensor::scalar(1.0);
        adam.step(fast, &mut [&mut a], &[&g]);
        adam.step(slow, &mut [&mut b], &[&g]);
        assert!((a.data()[0] / b.data()[0] - 100.0).abs() < 1e-6);
        assert_eq!(adam.group(fast).steps(), 1);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(x) = Σ a_i (x_i − c_i)², minimum value 0 at c.
        let a = [1.0, 3.0, 0.5, 2.0];
        let c = [0.7, -1.2, 2.5, 0.0];
        let f = |x: &[f64]| (0..4).map(|i| a[i] * (x[i] - c[i]).powi(2)).sum::<f64>();
        let mut adam = Adam::new(AdamHyper::default());
        let id = adam.add_group(0.05, &[4]);
        let mut x = Tensor::zeros(1, 4);
        for _ in 0..200 {
            let g = Tensor::from_vec(1, 4, (0..4).map(|i| 2.0 * a[i] * (x.data()[i] - c[i])).collect());
            adam.step(id, &mut [&mut x], &[&g]);
        }
        assert!(f(x.data()) < 1e-6, "{:?}", x.data());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::from_vec(1, 2, vec![30.0, 40.0])];
        let n = clip_global_norm(&mut g, 10.0);
        assert_eq!(n, 50.0);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-12);
    }
}

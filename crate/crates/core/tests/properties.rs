//! Randomized invariants of the quantizer, the information bounds, the
//! precoders and the gradient routing.

mod common;

use proptest::prelude::*;
use vqcsi::channel::{mrt_precoder, sample_channels, zf_precoder, ChannelParams};
use vqcsi::decoder::{decode, init_decoder};
use vqcsi::graph::Graph;
use vqcsi::mi::{all_pairs, collision_entropy_exact, kernel_bound_value, shannon_entropy};
use vqcsi::model::Model;
use vqcsi::pilots::{column_powers, init_pilots};
use vqcsi::rng::{stream, Purpose};
use vqcsi::vq::{nearest, quantize, reconstruct, sign_quantize, Codebook};
use vqcsi::Tensor;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Tensor> {
    (rows, cols)
        .prop_flat_map(|(r, c)| prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Tensor::from_vec(r, c, d)))
}

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..64).prop_filter_map("some mass", |w| {
        let t: f64 = w.iter().sum();
        (t > 0.0).then(|| w.iter().map(|v| v / t).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn nearest_is_optimal_with_low_ties(
        book in matrix(1..16, 1..5),
        seed in prop::collection::vec(-3.0f64..3.0, 5),
        snap in any::<bool>(),
    ) {
        let x: Vec<f64> = if snap { book.row(book.rows() / 2).to_vec() } else { seed[..book.cols()].to_vec() };
        let i = nearest(&book, &x);
        let best = sq_dist(book.row(i), &x);
        for j in 0..book.rows() {
            let d = sq_dist(book.row(j), &x);
            prop_assert!(best <= d);
            if j < i {
                prop_assert!(d > best);
            }
        }
    }

    #[test]
    fn quantization_reconstructs_exactly_and_is_idempotent(
        books in prop::collection::vec(matrix(2..9, 2..3), 1..4),
        rows in 1usize..12,
        salt in 0u64..1000,
    ) {
        use rand_distr::{Distribution, StandardNormal};
        let dim = 2 * books.len();
        let mut rng = stream(salt, Purpose::Misc, 0);
        let data = (0..rows * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = Tensor::from_vec(rows, dim, data);
        let codebooks: Vec<Codebook> = books.into_iter().map(Codebook::new).collect();
        let qf = quantize(&codebooks, &z).unwrap();
        prop_assert_eq!(&reconstruct(&codebooks, &qf.indices), &qf.q);
        let again = quantize(&codebooks, &qf.q).unwrap();
        prop_assert_eq!(&again.q, &qf.q);
    }

    #[test]
    fn collision_bound_never_exceeds_shannon(p in distribution()) {
        let h2 = collision_entropy_exact(&p).unwrap();
        let h1 = shannon_entropy(&p).unwrap();
        prop_assert!(h2 <= h1 + 1e-12);
        prop_assert!(h2 >= -1e-12 && h1 <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn kernel_bound_decreases_with_width(q in matrix(2..10, 1..4), s1 in 0.05f64..2.0, f in 1.0f64..4.0) {
        let pairs = all_pairs(q.rows());
        let narrow = kernel_bound_value(&q, &pairs, s1);
        let wide = kernel_bound_value(&q, &pairs, s1 * f);
        prop_assert!(wide <= narrow + 1e-12);
        prop_assert!(wide >= -1e-12);
    }

    #[test]
    fn kernel_bound_is_symmetric(q in matrix(2..10, 1..4), rot in 0usize..10) {
        let n = q.rows();
        let pairs = all_pairs(n);
        let swapped: Vec<_> = pairs.iter().map(|&(a, b)| (b, a)).collect();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let mut permuted = Tensor::zeros(n, q.cols());
        for (i, &p) in perm.iter().enumerate() {
            permuted.row_mut(i).copy_from_slice(q.row(p));
        }
        let base = kernel_bound_value(&q, &pairs, 0.7);
        prop_assert!((base - kernel_bound_value(&q, &swapped, 0.7)).abs() <= 1e-12);
        prop_assert!((base - kernel_bound_value(&permuted, &pairs, 0.7)).abs() <= 1e-12);
    }

    #[test]
    fn straight_through_passes_value_and_gradient(z in matrix(1..6, 1..6), salt in 0.0f64..10.0) {
        let q = z.map(|v| (v + salt).round());
        let up = z.map(|v| (v * 3.1 + salt).sin());
        let mut g = Graph::new();
        let zv = g.param(z.clone());
        let st = g.straight_through(zv, q.clone());
        prop_assert_eq!(g.value(st), &q);
        let w = g.constant(up.clone());
        let prod = g.mul(st, w);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss).unwrap();
        prop_assert_eq!(&grads.wrt(&g, zv), &up);
    }

    #[test]
    fn sign_words_reconstruct_the_signs(z in matrix(1..6, 1..13), words in 1usize..4) {
        prop_assume!(z.cols() % words == 0);
        let qf = sign_quantize(&z, words).unwrap();
        let width = z.cols() / words;
        for s in 0..z.rows() {
            for w in 0..words {
                let idx = qf.index(s, w);
                prop_assert!(idx < 1 << width);
                for b in 0..width {
                    let bit = (idx >> b) & 1 == 1;
                    prop_assert_eq!(bit, z.get(s, w * width + b) >= 0.0);
                    prop_assert_eq!(qf.q.get(s, w * width + b), if bit { 1.0 } else { -1.0 });
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn precoders_meet_the_power_budget(
        seed in any::<u64>(),
        m in 1usize..9,
        k in 1usize..4,
        paths in 1usize..4,
        power in 0.1f64..100.0,
    ) {
        let params = ChannelParams { antennas: m, users: k, paths, ..ChannelParams::default() };
        let batch = sample_channels(&params, 16, &mut stream(seed, Purpose::Misc, 0));
        for p in [mrt_precoder(&batch, power), zf_precoder(&batch, power)] {
            for s in 0..16 {
                prop_assert!((p.trace_power(s) - power).abs() <= 1e-9 * power);
            }
        }
        let feedback_dim = 3;
        let dec = init_decoder(&[feedback_dim, 8, 2 * m * k], feedback_dim, m, k, &mut stream(seed, Purpose::Misc, 1)).unwrap();
        let fb = Tensor::from_vec(16, feedback_dim, (0..48).map(|i| ((i as f64) * 0.37 + seed as f64 * 1e-9).cos()).collect());
        let v = decode(&dec, &fb, m, k, power).unwrap();
        for s in 0..16 {
            prop_assert!((v.trace_power(s) - power).abs() <= 1e-9 * power);
        }
        let pilots = init_pilots(m, 3, power, &mut stream(seed, Purpose::Misc, 2));
        for c in column_powers(&pilots.effective_pilots()) {
            prop_assert!((c - power).abs() <= 1e-9 * power);
        }
    }

    #[test]
    fn codebook_gradient_ignores_other_users(seed in 0u64..1000) {
        let cfg = common::toy_config();
        let model = Model::init(&cfg).unwrap();
        let a = common::toy_inputs(&cfg, seed);
        let mut b = common::toy_inputs(&cfg, seed + 1);
        // Keep the first user's data, replace everything belonging to the second.
        let m = cfg.channel.antennas;
        let k_users = cfg.channel.users;
        for s in 0..a.batch.samples {
            let at = (s * k_users) * m;
            b.batch.h[at..at + m].copy_from_slice(&a.batch.h[at..at + m]);
        }
        b.noise[0] = a.noise[0].clone();
        b.pairs[0] = a.pairs[0].clone();
        let grad_of = |inputs: &common::Frozen| {
            let f = model.forward(&cfg, &inputs.batch, &inputs.noise, &inputs.pairs).unwrap();
            let grads = f.graph.backward(f.loss).unwrap();
            let names = model.param_names();
            names.iter().zip(&f.params)
                .filter(|(n, _)| n.starts_with("codebook1."))
                .map(|(_, &v)| grads.wrt(&f.graph, v))
                .collect::<Vec<_>>()
        };
        prop_assert_eq!(grad_of(&a), grad_of(&b));
    }
}

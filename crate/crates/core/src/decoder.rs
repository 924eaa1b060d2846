//! Base-station decoder: all users' quantized feedback to a power-normalized
//! precoding matrix.
//!
//! The network emits `2·M·K` reals per sample, read as `K` interleaved complex
//! columns of length `M` (user-major). Each sample is then rescaled so that
//! `Tr(VVᴴ) = P`.

use crate::channel::Precoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mlp::{BoundMlp, MlpParams};
use crate::rng::SimRng;
use crate::tensor::Tensor;

pub fn init_decoder(
    widths: &[usize],
    feedback_dim: usize,
    antennas: usize,
    users: usize,
    rng: &mut SimRng,
) -> Result<MlpParams> {
    if widths.first() != Some(&feedback_dim) || widths.last() != Some(&(2 * antennas * users)) {
        return Err(Error::Config(format!(
            "decoder widths {widths:?} must start at K·D = {feedback_dim} and end at 2MK = {}",
            2 * antennas * users
        )));
    }
    MlpParams::init(widths, rng)
}

/// Records the decoder and the power normalization; returns the `[S, 2MK]` precoder node.
pub fn decode_on(g: &mut Graph, decoder: &BoundMlp, feedback: Var, power: f64) -> Var {
    let raw = decoder.apply(g, feedback);
    g.power_normalize_rows(raw, power)
}

/// Plain decode. Samples whose raw output is all zero get a zero precoder and are flagged.
pub fn decode(params: &MlpParams, feedback: &Tensor, antennas: usize, users: usize, power: f64) -> Result<Precoder> {
    if feedback.cols() != params.input_dim() || params.output_dim() != 2 * antennas * users {
        return Err(Error::Shape(
            "decoder dimensions do not match the feedback/precoder".into(),
        ));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let fb = g.constant(feedback.clone());
    let v = decode_on(&mut g, &bound, fb, power);
    let mut precoder = Precoder::new(g.value(v).clone(), antennas, users, power);
    precoder.flagged = g.zero_rows(v).to_vec();
    Ok(precoder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{Activation, Layer};
    use crate::rng::{stream, Purpose};

    fn identity_decoder(n: usize) -> MlpParams {
        let mut w = Tensor::zeros(n, n);
        for i in 0..n {
            w.set(i, i, 1.0);
        }
        MlpParams {
            layers: vec![Layer {
                weight: w,
                bias: Tensor::zeros(1, n),
                activation: Activation::Identity,
            }],
        }
    }

    #[test]
    fn power_scaling_examples() {
        let dec = identity_decoder(4);
        // Tr = 2 = P already.
        let fb = Tensor::from_vec(1, 4, vec![1.0, 0.0, 0.0, 1.0]);
        let p = decode(&dec, &fb, 1, 2, 2.0).unwrap();
        assert_eq!(p.v, fb);
        // Tr = 4P → halved.
        let fb = Tensor::from_vec(1, 4, vec![2.0, 0.0, 0.0, 2.0]);
        let p = decode(&dec, &fb, 1, 2, 2.0).unwrap();
        assert_eq!(p.v.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_output_is_flagged() {
        let dec = identity_decoder(4);
        let fb = Tensor::from_vec(2, 4, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        let p = decode(&dec, &fb, 1, 2, 1.0).unwrap();
        assert_eq!(p.flagged, vec![0]);
        assert!(p.v.row(0).iter().all(|&x| x == 0.0));
        assert!((p.trace_power(1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn swapped_wiring_swaps_columns() {
        // K = 2 users, D = 3 feedback reals each, M = 2 antennas.
        let (d, m) = (3, 2);
        let dec = init_decoder(&[2 * d, 16, 2 * m * 2], 2 * d, m, 2, &mut stream(4, Purpose::Init, 0)).unwrap();
        let fb = Tensor::from_vec(2, 2 * d, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let base = decode(&dec, &fb, m, 2, 5.0).unwrap();

        let swapped_fb = Tensor::concat_cols(&[&fb.slice_cols(d, d), &fb.slice_cols(0, d)]);
        let mut rewired = dec.clone();
        let w0 = &dec.layers[0].weight;
        rewired.layers[0].weight = Tensor::concat_cols(&[&w0.slice_cols(d, d), &w0.slice_cols(0, d)]);
        let last = rewired.layers.len() - 1;
        let (wl, bl) = (&dec.layers[last].weight, &dec.layers[last].bias);
        let half = 2 * m;
        let mut w_new = wl.clone();
        let mut b_new = bl.clone();
        for r in 0..2 * half {
            let src = (r + half) % (2 * half);
            w_new.row_mut(r).copy_from_slice(wl.row(src));
            b_new.set(0, r, bl.get(0, src));
        }
        rewired.layers[last].weight = w_new;
        rewired.layers[last].bias = b_new;

        let out = decode(&rewired, &swapped_fb, m, 2, 5.0).unwrap();
        // Equal up to summation order inside the first layer.
        for s in 0..2 {
            for (a, b) in [(0, 1), (1, 0)] {
                for (x, y) in out.column(s, a).iter().zip(base.column(s, b)) {
                    assert!((x - y).norm() < 1e-12);
                }
            }
        }
    }
}

//! User-side encoder: received pilots to a real latent vector.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mlp::{BoundMlp, MlpParams};
use crate::rng::SimRng;
use crate::tensor::Tensor;

/// Builds an encoder for widths `[2L, hidden.., D]`.
pub fn init_encoder(widths: &[usize], pilot_len: usize, latent_dim: usize, rng: &mut SimRng) -> Result<MlpParams> {
    if widths.first() != Some(&(2 * pilot_len)) || widths.last() != Some(&latent_dim) {
        return Err(Error::Config(format!(
            "encoder widths {widths:?} must start at 2L = {} and end at D = {latent_dim}",
            2 * pilot_len
        )));
    }
    MlpParams::init(widths, rng)
}

/// Records `z = f_enc(y)` for interleaved pilots `y: [S, 2L]`.
pub fn encode_on(g: &mut Graph, encoder: &BoundMlp, y: Var) -> Result<Var> {
    if !g.value(y).is_finite() {
        return Err(Error::NonFinite("encoder input".into()));
    }
    Ok(encoder.apply(g, y))
}

/// Plain forward pass `z = f_enc(y)`.
pub fn encode(params: &MlpParams, y: &Tensor) -> Result<Tensor> {
    if y.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "encoder expects {} inputs, got {}",
            params.input_dim(),
            y.cols()
        )));
    }
    if !y.is_finite() {
        return Err(Error::NonFinite("encoder input".into()));
    }
    Ok(params.forward(y))
}

//! MLP channel encoder/decoder pair and bandwidth bookkeeping.

use flsc_tensor::nn;
use flsc_tensor::{Graph, ModelWeights, Var};
use rand::Rng;

use crate::error::{invalid, CoreError, Result};

/// Smallest multiple of `2·n_t` that is at least `ratio·h·w·c`.
pub fn bandwidth_to_length(ratio: f64, h: usize, w: usize, c: usize, n_t: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(invalid("bandwidth_to_length", format!("ratio {ratio} outside (0, 1]")));
    }
    if n_t == 0 || h * w * c == 0 {
        return Err(invalid("bandwidth_to_length", "dimensions must be positive"));
    }
    let unit = 2 * n_t;
    // guard against representation error pushing an exact product up a unit
    let raw = ratio * (h * w * c) as f64;
    let needed = (raw - 1e-9 * raw.max(1.0)).ceil().max(1.0) as usize;
    Ok(needed.div_ceil(unit) * unit)
}

pub const ENCODER_PREFIX: &str = "chan_enc";
pub const DECODER_PREFIX: &str = "chan_dec";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelCodec {
    pub semantic_len: usize,
    pub codeword_len: usize,
}

impl ChannelCodec {
    pub fn init<R: Rng + ?Sized>(&self, w: &mut ModelWeights, rng: &mut R) {
        let (h, l) = (self.semantic_len, self.codeword_len);
        nn::init_linear(w, &format!("{ENCODER_PREFIX}.fc1"), h, h, rng);
        nn::init_linear(w, &format!("{ENCODER_PREFIX}.fc2"), h, l, rng);
        nn::init_linear(w, &format!("{DECODER_PREFIX}.fc1"), l, h, rng);
        nn::init_linear(w, &format!("{DECODER_PREFIX}.fc2"), h, h, rng);
    }

    fn check(op: &'static str, g: &Graph, x: Var, len: usize) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != len {
            return Err(CoreError::Shape {
                op,
                expected: format!("[B, {len}]"),
                actual: format!("{s:?}"),
            });
        }
        Ok(())
    }

    /// `[B, semantic_len] -> [B, codeword_len]`, unconstrained reals.
    pub fn encode(&self, g: &mut Graph, w: &ModelWeights, x: Var) -> Result<Var> {
        Self::check("channel_encode", g, x, self.semantic_len)?;
        let h = nn::linear(g, w, &format!("{ENCODER_PREFIX}.fc1"), x)?;
        let h = g.relu(h);
        Ok(nn::linear(g, w, &format!("{ENCODER_PREFIX}.fc2"), h)?)
    }

    /// `[B, codeword_len] -> [B, semantic_len]` in `[0, 1]`.
    pub fn decode(&self, g: &mut Graph, w: &ModelWeights, y: Var) -> Result<Var> {
        Self::check("channel_decode", g, y, self.codeword_len)?;
        let h = nn::linear(g, w, &format!("{DECODER_PREFIX}.fc1"), y)?;
        let h = g.relu(h);
        let h = nn::linear(g, w, &format!("{DECODER_PREFIX}.fc2"), h)?;
        Ok(g.sigmoid(h))
    }
}

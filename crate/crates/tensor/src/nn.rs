//! Parameter initialisation and forward helpers for the standard layers.
//!
//! Each layer stores its tensors under `"{prefix}.weight"`, `"{prefix}.bias"`
//! and so on inside a [`ModelWeights`]; forward helpers bind them into a
//! [`Graph`] by name.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::graph::{Graph, NormStats, Var};
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-6;

/// Whether normalization layers use batch statistics (and update their
/// running estimates) or the tracked running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<f64> {
    let d = Uniform::new_inclusive(-bound, bound);
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Linear layer mapping the last axis `in_dim -> out_dim`; weight is stored
/// as `[in_dim, out_dim]`.
pub fn init_linear<R: Rng + ?Sized>(w: &mut ModelWeights, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut R) {
    let bound = 1.0 / (in_dim as f64).sqrt();
    w.insert(
        format!("{prefix}.weight"),
        Tensor::new(vec![in_dim, out_dim], uniform(rng, in_dim * out_dim, bound)).unwrap(),
    );
    w.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_dim]));
}

pub fn linear(g: &mut Graph, w: &ModelWeights, prefix: &str, x: Var) -> Result<Var> {
    let weight = g.param(w, &format!("{prefix}.weight"))?;
    let bias = g.param(w, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, weight)?;
    g.add(y, bias)
}

/// Conv kernel `[out, in, k, k]` plus bias.
pub fn init_conv<R: Rng + ?Sized>(w: &mut ModelWeights, prefix: &str, in_ch: usize, out_ch: usize, k: usize, rng: &mut R) {
    let fan_in = in_ch * k * k;
    let bound = (6.0 / fan_in as f64).sqrt() / 2.0_f64.sqrt();
    w.insert(
        format!("{prefix}.weight"),
        Tensor::new(vec![out_ch, in_ch, k, k], uniform(rng, out_ch * fan_in, bound)).unwrap(),
    );
    w.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_ch]));
}

pub fn conv2d(g: &mut Graph, w: &ModelWeights, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let weight = g.param(w, &format!("{prefix}.weight"))?;
    let bias = g.param(w, &format!("{prefix}.bias"))?;
    g.conv2d(x, weight, Some(bias), stride, pad)
}

/// Transposed conv kernel `[in, out, k, k]` plus bias.
pub fn init_conv_transpose<R: Rng + ?Sized>(
    w: &mut ModelWeights,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    rng: &mut R,
) {
    let fan_in = in_ch * k * k / 4;
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    w.insert(
        format!("{prefix}.weight"),
        Tensor::new(vec![in_ch, out_ch, k, k], uniform(rng, in_ch * out_ch * k * k, bound)).unwrap(),
    );
    w.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_ch]));
}

pub fn conv_transpose2d(g: &mut Graph, w: &ModelWeights, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let weight = g.param(w, &format!("{prefix}.weight"))?;
    let bias = g.param(w, &format!("{prefix}.bias"))?;
    g.conv_transpose2d(x, weight, Some(bias), stride, pad)
}

pub fn init_layer_norm(w: &mut ModelWeights, prefix: &str, c: usize) {
    w.insert(format!("{prefix}.weight"), Tensor::full(&[c], 1.0));
    w.insert(format!("{prefix}.bias"), Tensor::zeros(&[c]));
}

pub fn layer_norm(g: &mut Graph, w: &ModelWeights, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(w, &format!("{prefix}.weight"))?;
    let beta = g.param(w, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

pub fn init_batch_norm(w: &mut ModelWeights, prefix: &str, c: usize) {
    w.insert(format!("{prefix}.weight"), Tensor::full(&[c], 1.0));
    w.insert(format!("{prefix}.bias"), Tensor::zeros(&[c]));
    w.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
    w.insert(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0));
}

/// Batch norm over an NCHW map. In [`Mode::Train`] the running statistics
/// updates are queued on the graph.
pub fn batch_norm2d(g: &mut Graph, w: &ModelWeights, prefix: &str, x: Var, mode: Mode) -> Result<Var> {
    let gamma = g.param(w, &format!("{prefix}.weight"))?;
    let beta = g.param(w, &format!("{prefix}.bias"))?;
    let mean_name = format!("{prefix}.running_mean");
    let var_name = format!("{prefix}.running_var");
    let rm = w.require(&mean_name)?.data();
    let rv = w.require(&var_name)?.data();
    match mode {
        Mode::Eval => {
            let (y, _) = g.batch_norm2d(x, gamma, beta, NormStats::Running { mean: rm, var: rv }, BN_EPS)?;
            Ok(y)
        }
        Mode::Train => {
            let (y, moments) = g.batch_norm2d(x, gamma, beta, NormStats::Batch, BN_EPS)?;
            let m = moments.expect("batch mode reports moments");
            let blend = |old: &[f64], new: &[f64]| -> Vec<f64> {
                old.iter()
                    .zip(new)
                    .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                    .collect()
            };
            let new_mean = blend(rm, &m.mean);
            let new_var = blend(rv, &m.var);
            g.queue_buffer_update(mean_name, new_mean);
            g.queue_buffer_update(var_name, new_var);
            Ok(y)
        }
    }
}

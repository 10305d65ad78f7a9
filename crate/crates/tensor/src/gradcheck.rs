//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

/// Magnitude below which gradients are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        self.max_abs_error = self.max_abs_error.max(abs);
        self.max_rel_error = self.max_rel_error.max(abs / scale);
        self.checked += 1;
    }
}

/// Compares autodiff gradients of the scalar built by `f` with central
/// differences of step `h`, for every element of every input (or an evenly
/// spaced subset of at most `max_per_input` elements).
pub fn check_gradients<F>(inputs: &[Tensor], f: F, h: f64, max_per_input: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, v);
        let n = analytic.len();
        let step = n.div_ceil(max_per_input.max(1)).max(1);
        for j in (0..n).step_by(step) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(analytic[j], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Same comparison over every trainable parameter of `weights`, with the
/// loss built from parameters bound through [`Graph::param`].
pub fn check_model_gradients<F>(weights: &ModelWeights, f: F, h: f64, max_per_param: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ModelWeights) -> Result<Var>,
{
    let eval = |w: &ModelWeights| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, w)?;
        Ok(g.item(out))
    };

    let mut work = weights.clone();
    let mut g = Graph::new();
    let loss = f(&mut g, &work)?;
    g.backward(loss)?.write_to(&g, &mut work)?;

    let names: Vec<String> = work
        .iter()
        .filter(|(_, t)| t.requires_grad)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut report = GradCheckReport::default();
    for name in names {
        let t = work.require(&name)?;
        let n = t.numel();
        let analytic = t.grad.clone().unwrap_or_else(|| vec![0.0; n]);
        let step = n.div_ceil(max_per_param.max(1)).max(1);
        for j in (0..n).step_by(step) {
            let orig = work.require(&name)?.data()[j];
            work.get_mut(&name).expect("present").data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(&name).expect("present").data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(&name).expect("present").data_mut()[j] = orig;
            report.record(analytic[j], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

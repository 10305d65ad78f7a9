use flsc_tensor::{Graph, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::hvt::softmax_row;

/// Weights of the distillation-augmented classification loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdLossConfig {
    /// Share of the distillation term, in `[0, 1]`.
    pub lambda: f64,
    /// Softening temperature for both student and teacher.
    pub tau: f64,
    /// Label-smoothing weight of the cross-entropy target.
    pub smoothing: f64,
}

impl Default for KdLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            tau: 0.5,
            smoothing: 0.2,
        }
    }
}

impl KdLossConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.lambda) {
            errs.push(format!("kd lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            errs.push(format!("kd temperature {} must be positive", self.tau));
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            errs.push(format!("label smoothing {} outside [0, 1]", self.smoothing));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.problems();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation(errs))
        }
    }
}

/// `(1 − µ)·onehot + µ/K` rows for a batch of labels.
pub fn smoothed_targets(labels: &[usize], classes: usize, smoothing: f64) -> Vec<f64> {
    let mut t = vec![smoothing / classes as f64; labels.len() * classes];
    for (b, &l) in labels.iter().enumerate() {
        t[b * classes + l] += 1.0 - smoothing;
    }
    t
}

/// Batch mean of
/// `(1−λ)·CE(smoothed label, softmax(cls)) + λ·τ²·KL(softmax(dist/τ) ‖ softmax(teacher/τ))`.
///
/// `teacher_logits` is a plain `[B·K]` slice and receives no gradient.
pub fn kd_loss(
    g: &mut Graph,
    cls_logits: Var,
    dist_logits: Var,
    labels: &[usize],
    teacher_logits: &[f64],
    cfg: &KdLossConfig,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(invalid("kd_loss", format!("lambda {} outside [0, 1]", cfg.lambda)));
    }
    cfg.validate()?;
    let shape = g.shape(cls_logits).to_vec();
    if shape.len() != 2 || g.shape(dist_logits) != shape.as_slice() {
        return Err(CoreError::Shape {
            op: "kd_loss",
            expected: format!("matching [B, K] logits, cls is {shape:?}"),
            actual: format!("{:?}", g.shape(dist_logits)),
        });
    }
    let (batch, classes) = (shape[0], shape[1]);
    if labels.len() != batch || teacher_logits.len() != batch * classes {
        return Err(invalid(
            "kd_loss",
            format!(
                "{} labels and {} teacher logits for a {batch}x{classes} batch",
                labels.len(),
                teacher_logits.len()
            ),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(invalid("kd_loss", format!("label {l} out of range for {classes} classes")));
    }

    let targets = g.constant(shape.clone(), smoothed_targets(labels, classes, cfg.smoothing))?;
    let log_p = g.log_softmax(cls_logits);
    let ce = g.mul(targets, log_p)?;
    let ce = g.sum(ce);
    let ce = g.scale(ce, -1.0 / batch as f64);

    let soft = g.scale(dist_logits, 1.0 / cfg.tau);
    let log_s = g.log_softmax(soft);
    let p_s = g.exp(log_s);
    let log_t: Vec<f64> = teacher_logits
        .chunks(classes)
        .flat_map(|row| {
            let scaled: Vec<f64> = row.iter().map(|v| v / cfg.tau).collect();
            softmax_row(&scaled).into_iter().map(f64::ln)
        })
        .collect();
    let log_t = g.constant(shape, log_t)?;
    let diff = g.sub(log_s, log_t)?;
    let kl = g.mul(p_s, diff)?;
    let kl = g.sum(kl);
    let kl = g.scale(kl, 1.0 / batch as f64);

    let a = g.scale(ce, 1.0 - cfg.lambda);
    let b = g.scale(kl, cfg.lambda * cfg.tau * cfg.tau);
    Ok(g.add(a, b)?)
}

/// Per-image sum of squared errors over all pixels and channels, averaged
/// over the batch.
pub fn reconstruction_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(CoreError::Shape {
            op: "reconstruction_loss",
            expected: format!("{:?}", g.shape(target)),
            actual: format!("{:?}", g.shape(pred)),
        });
    }
    let batch = g.shape(pred)[0];
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / batch as f64))
}

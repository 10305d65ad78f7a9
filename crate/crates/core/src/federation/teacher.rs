//! Small convolutional classifier that supplies the soft targets for
//! distillation. Trained once, centrally and without a channel.

use flsc_tensor::nn;
use flsc_tensor::{AdamW, AdamWConfig, Graph, ModelWeights, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{invalid, CoreError, Result};
use crate::hvt::argmax;
use crate::metrics::accuracy;
use crate::seeds::{stream, Purpose};

pub const PREFIX: &str = "teacher";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub widths: [usize; 2],
    pub max_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Training-set accuracy the teacher must reach before it may be used.
    pub required_accuracy: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16],
            max_epochs: 30,
            batch: 16,
            lr: 3e-3,
            required_accuracy: 0.9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Teacher {
    pub in_channels: usize,
    pub classes: usize,
    pub widths: [usize; 2],
    pub weights: ModelWeights,
    pub train_accuracy: f64,
}

fn init(w: &mut ModelWeights, in_ch: usize, widths: [usize; 2], classes: usize, seed: u64) {
    let mut rng = stream(seed, Purpose::Teacher, 0, 0, 0);
    nn::init_conv(w, &format!("{PREFIX}.conv0"), in_ch, widths[0], 5, &mut rng);
    nn::init_conv(w, &format!("{PREFIX}.conv1"), widths[0], widths[1], 3, &mut rng);
    nn::init_linear(w, &format!("{PREFIX}.fc"), widths[1], classes, &mut rng);
}

fn forward(g: &mut Graph, w: &ModelWeights, x: Var) -> Result<Var> {
    let h = nn::conv2d(g, w, &format!("{PREFIX}.conv0"), x, 2, 2)?;
    let h = g.relu(h);
    let h = nn::conv2d(g, w, &format!("{PREFIX}.conv1"), h, 2, 1)?;
    let h = g.relu(h);
    let s = g.shape(h).to_vec();
    let plane = s[2] * s[3];
    let flat = g.reshape(h, vec![s[0] * s[1], plane])?;
    let avg = g.constant(vec![plane, 1], vec![1.0 / plane as f64; plane])?;
    let pooled = g.matmul(flat, avg)?;
    let pooled = g.reshape(pooled, vec![s[0], s[1]])?;
    Ok(nn::linear(g, w, &format!("{PREFIX}.fc"), pooled)?)
}

fn stack(images: &[&Image]) -> (Vec<usize>, Vec<f64>) {
    let f = images[0];
    let shape = vec![images.len(), f.channels, f.height, f.width];
    (shape, images.iter().flat_map(|i| i.pixels.iter().copied()).collect())
}

impl Teacher {
    pub fn from_weights(weights: ModelWeights, in_channels: usize, classes: usize) -> Result<Self> {
        let conv0 = weights.require(&format!("{PREFIX}.conv0.weight"))?.shape().to_vec();
        let conv1 = weights.require(&format!("{PREFIX}.conv1.weight"))?.shape().to_vec();
        let fc = weights.require(&format!("{PREFIX}.fc.weight"))?.shape().to_vec();
        if conv0[1] != in_channels || fc[1] != classes {
            return Err(invalid(
                "teacher",
                format!("checkpoint is for {} input channels and {} classes", conv0[1], fc[1]),
            ));
        }
        Ok(Self {
            in_channels,
            classes,
            widths: [conv0[0], conv1[0]],
            weights,
            train_accuracy: f64::NAN,
        })
    }

    /// `[B·K]` logits, computed in chunks.
    pub fn logits(&self, images: &[&Image]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len() * self.classes);
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            let (shape, data) = stack(chunk);
            let x = g.constant(shape, data)?;
            let y = forward(&mut g, &self.weights, x)?;
            out.extend_from_slice(g.value(y));
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        Ok(self.logits(images)?.chunks(self.classes).map(argmax).collect())
    }
}

/// Trains with plain cross-entropy until the training accuracy reaches the
/// configured threshold, and refuses to return an undertrained teacher.
pub fn train_teacher(images: &[&Image], labels: &[usize], classes: usize, cfg: &TeacherConfig, seed: u64) -> Result<Teacher> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(invalid("train_teacher", "need one label per image and at least one image"));
    }
    let in_ch = images[0].channels;
    let mut w = ModelWeights::new();
    init(&mut w, in_ch, cfg.widths, classes, seed);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut teacher = Teacher {
        in_channels: in_ch,
        classes,
        widths: cfg.widths,
        weights: w,
        train_accuracy: 0.0,
    };
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut stream(seed, Purpose::Teacher, epoch as u64 + 1, 0, 0));
        for idx in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
            let mut g = Graph::new();
            let (shape, data) = stack(&batch);
            let x = g.constant(shape, data)?;
            let logits = forward(&mut g, &teacher.weights, x)?;
            let onehot = super::loss::smoothed_targets(&idx.iter().map(|&i| labels[i]).collect::<Vec<_>>(), classes, 0.0);
            let t = g.constant(vec![idx.len(), classes], onehot)?;
            let lp = g.log_softmax(logits);
            let ce = g.mul(t, lp)?;
            let ce = g.sum(ce);
            let loss = g.scale(ce, -1.0 / idx.len() as f64);
            g.backward(loss)?.write_to(&g, &mut teacher.weights)?;
            opt.step(&mut teacher.weights, cfg.lr)?;
        }
        teacher.train_accuracy = accuracy(&teacher.predict(images)?, labels)?;
        log::debug!("teacher epoch {epoch}: train accuracy {:.3}", teacher.train_accuracy);
        if teacher.train_accuracy >= cfg.required_accuracy {
            return Ok(teacher);
        }
    }
    Err(CoreError::TeacherUndertrained {
        accuracy: teacher.train_accuracy,
        required: cfg.required_accuracy,
    })
}

//! Pyramid vision-transformer encoder with spatial-reduction self-masked
//! attention, the transpose-convolution image decoder and the two-token
//! classification head.

use std::sync::Arc;

use flsc_tensor::nn::{self, Mode};
use flsc_tensor::{Graph, ModelWeights, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    Reconstruct,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Reconstruct => "reconstruct",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub depth: usize,
    /// Spatial-reduction ratio for keys and values; 1 disables reduction.
    pub reduction: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HvtConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stages: Vec<StageConfig>,
    pub mlp_ratio: usize,
    pub task: Task,
    pub classes: usize,
    pub mask_self: bool,
}

fn stage(channels: usize, depth: usize, reduction: usize, kernel: usize, stride: usize, pad: usize) -> StageConfig {
    StageConfig {
        channels,
        depth,
        reduction,
        kernel,
        stride,
        pad,
    }
}

impl HvtConfig {
    pub fn preset(preset: Preset, task: Task, in_channels: usize, height: usize, width: usize, classes: usize) -> Self {
        let (channels, depth) = match preset {
            Preset::Desk => ([16, 32, 48, 64], 1),
            Preset::Paper => ([64, 128, 320, 512], 2),
        };
        let geometry = [(4, 7, 4, 3), (2, 3, 2, 1), (1, 3, 2, 1), (1, 3, 1, 1)];
        let stages = channels
            .iter()
            .zip(geometry)
            .map(|(&c, (r, k, s, p))| stage(c, depth, r, k, s, p))
            .collect();
        Self {
            in_channels,
            height,
            width,
            stages,
            mlp_ratio: if preset == Preset::Desk { 2 } else { 4 },
            task,
            classes,
            mask_self: true,
        }
    }

    /// Stages actually run for the configured task.
    pub fn active_stages(&self) -> usize {
        match self.task {
            Task::Classify => 2.min(self.stages.len()),
            Task::Reconstruct => self.stages.len(),
        }
    }

    /// `(height, width)` of the token grid after each active stage.
    pub fn grids(&self) -> Vec<(usize, usize)> {
        let mut hw = (self.height, self.width);
        self.stages[..self.active_stages()]
            .iter()
            .map(|s| {
                hw = (
                    (hw.0 + 2 * s.pad - s.kernel) / s.stride + 1,
                    (hw.1 + 2 * s.pad - s.kernel) / s.stride + 1,
                );
                hw
            })
            .collect()
    }

    /// Length of the semantic vector for the task.
    pub fn semantic_len(&self) -> usize {
        let last = &self.stages[self.active_stages() - 1];
        match self.task {
            Task::Classify => 2 * last.channels,
            Task::Reconstruct => {
                let (h, w) = *self.grids().last().unwrap();
                last.channels * h * w
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.stages.is_empty() || self.stages.len() > 4 {
            errs.push(format!("stage count must be 1..=4, got {}", self.stages.len()));
        }
        if self.task == Task::Classify && self.stages.len() < 2 {
            errs.push("classification needs at least two stages".to_string());
        }
        if self.task == Task::Classify && self.classes < 2 {
            errs.push("classification needs at least two classes".to_string());
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 {
            errs.push("input channels and mlp ratio must be positive".to_string());
        }
        if !errs.is_empty() {
            return Err(CoreError::Validation(errs));
        }
        let mut hw = (self.height, self.width);
        for (i, s) in self.stages[..self.active_stages()].iter().enumerate() {
            if s.channels == 0 || s.depth == 0 || s.reduction == 0 || s.stride == 0 || s.kernel == 0 {
                errs.push(format!("stage {i}: channels, depth, reduction, kernel and stride must be positive"));
                continue;
            }
            if hw.0 + 2 * s.pad < s.kernel || hw.1 + 2 * s.pad < s.kernel {
                errs.push(format!("stage {i}: kernel {} exceeds padded input {hw:?}", s.kernel));
                break;
            }
            hw = (
                (hw.0 + 2 * s.pad - s.kernel) / s.stride + 1,
                (hw.1 + 2 * s.pad - s.kernel) / s.stride + 1,
            );
            if hw.0 % s.reduction != 0 || hw.1 % s.reduction != 0 {
                errs.push(format!("stage {i}: grid {hw:?} is not divisible by reduction {}", s.reduction));
            }
            if self.mask_self && s.reduction == 1 && hw.0 * hw.1 < 2 && !(self.task == Task::Classify && i == 1) {
                errs.push(format!("stage {i}: self-masked attention needs at least two tokens"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation(errs))
        }
    }
}

fn small_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let d = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

/// `[B, C, h, w] -> [B, h·w, C]`.
pub fn map_to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, vec![s[0], s[1], s[2] * s[3]])?;
    Ok(g.permute(r, &[0, 2, 1])?)
}

/// `[B, h·w, C] -> [B, C, h, w]`.
pub fn tokens_to_map(g: &mut Graph, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(t).to_vec();
    let p = g.permute(t, &[0, 2, 1])?;
    Ok(g.reshape(p, vec![s[0], s[2], h, w])?)
}

/// Index map merging each `r × r` block of a `h × w` token grid into one
/// token with `r²·c` features ordered `(dy, dx, channel)`.
pub fn reduction_map(batch: usize, h: usize, w: usize, c: usize, r: usize) -> Vec<usize> {
    let (rh, rw) = (h / r, w / r);
    let mut map = Vec::with_capacity(batch * h * w * c);
    for b in 0..batch {
        for i in 0..rh {
            for j in 0..rw {
                for dy in 0..r {
                    for dx in 0..r {
                        let tok = (i * r + dy) * w + (j * r + dx);
                        for ch in 0..c {
                            map.push((b * h * w + tok) * c + ch);
                        }
                    }
                }
            }
        }
    }
    map
}

/// Spatial reduction of a `[B, h·w, C]` token grid: merge `r × r` blocks,
/// project `r²C -> C` with `{prefix}.sr.weight`, then layer-normalize with
/// `{prefix}.sr_norm` when `normalize` is set.
pub fn spatial_reduce(
    g: &mut Graph,
    w: &ModelWeights,
    prefix: &str,
    tokens: Var,
    grid: (usize, usize),
    r: usize,
    normalize: bool,
) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let (b, c) = (s[0], s[2]);
    let (h, wd) = grid;
    if r == 0 || h % r != 0 || wd % r != 0 || s[1] != h * wd {
        return Err(invalid(
            "spatial_reduce",
            format!("grid {h}x{wd} with {} tokens cannot be reduced by {r}", s[1]),
        ));
    }
    let merged = g.gather(
        tokens,
        Arc::new(reduction_map(b, h, wd, c, r)),
        vec![b, (h / r) * (wd / r), r * r * c],
    )?;
    let ws = g.param(w, &format!("{prefix}.sr.weight"))?;
    let reduced = g.matmul(merged, ws)?;
    if normalize {
        Ok(nn::layer_norm(g, w, &format!("{prefix}.sr_norm"), reduced)?)
    } else {
        Ok(reduced)
    }
}

/// Spatial-reduction attention layout for one call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionLayout {
    /// Token grid of the leading spatial tokens.
    pub grid: (usize, usize),
    /// Extra (class/distillation) tokens appended after the grid.
    pub extra: usize,
    pub reduction: usize,
    pub mask_self: bool,
}

/// `softmax(mask(Q·S(K)ᵀ) / τ) · S(V)` with single-head projections
/// `{prefix}.q`, `.k`, `.v` and temperature `exp({prefix}.rho)`. The
/// diagonal mask applies only when no reduction happens.
pub fn srlsa_attention(g: &mut Graph, w: &ModelWeights, prefix: &str, x: Var, layout: AttentionLayout) -> Result<Var> {
    let (attn, v) = srlsa_weights(g, w, prefix, x, layout)?;
    Ok(g.bmm(attn, v)?)
}

/// Attention matrix `[B, P, P']` and values `[B, P', C]` of
/// [`srlsa_attention`].
pub fn srlsa_weights(g: &mut Graph, w: &ModelWeights, prefix: &str, x: Var, layout: AttentionLayout) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    let p = s[1];
    let (h, wd) = layout.grid;
    if h * wd + layout.extra != p {
        return Err(CoreError::Shape {
            op: "srlsa_attention",
            expected: format!("{} tokens", h * wd + layout.extra),
            actual: p.to_string(),
        });
    }
    let masked = layout.mask_self && layout.reduction == 1;
    if masked && p < 2 {
        return Err(invalid("srlsa_attention", "self-masking a single token leaves nothing to attend to"));
    }
    let q = nn::linear(g, w, &format!("{prefix}.q"), x)?;
    let kv_src = if layout.reduction > 1 {
        let spatial = g.slice(x, 1, 0, h * wd)?;
        let reduced = spatial_reduce(g, w, prefix, spatial, (h, wd), layout.reduction, true)?;
        if layout.extra > 0 {
            let extra = g.slice(x, 1, h * wd, layout.extra)?;
            g.concat(&[reduced, extra], 1)?
        } else {
            reduced
        }
    } else {
        x
    };
    let k = nn::linear(g, w, &format!("{prefix}.k"), kv_src)?;
    let v = nn::linear(g, w, &format!("{prefix}.v"), kv_src)?;
    let kt = g.transpose_last(k)?;
    let scores = g.bmm(q, kt)?;
    let rho = g.param(w, &format!("{prefix}.rho"))?;
    let tau = g.exp(rho);
    let mask: Option<Vec<bool>> = masked.then(|| (0..p * p).map(|i| i / p == i % p).collect());
    let attn = g.softmax_with_temperature(scores, tau, mask.as_deref())?;
    Ok((attn, v))
}

fn init_attention<R: Rng + ?Sized>(w: &mut ModelWeights, prefix: &str, c: usize, r: usize, rng: &mut R) {
    for name in ["q", "k", "v", "proj"] {
        nn::init_linear(w, &format!("{prefix}.{name}"), c, c, rng);
    }
    if r > 1 {
        let fan = r * r * c;
        w.insert(
            format!("{prefix}.sr.weight"),
            small_uniform(rng, &[fan, c], 1.0 / (fan as f64).sqrt()),
        );
        nn::init_layer_norm(w, &format!("{prefix}.sr_norm"), c);
    }
    // temperature starts at sqrt(key dim)
    w.insert(format!("{prefix}.rho"), Tensor::scalar((c as f64).sqrt().ln()));
}

/// Hierarchical transformer encoder.
#[derive(Clone, Debug)]
pub struct HvtEncoder {
    pub config: HvtConfig,
}

pub const ENCODER_PREFIX: &str = "hvt";

impl HvtEncoder {
    pub fn new(config: HvtConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn semantic_len(&self) -> usize {
        self.config.semantic_len()
    }

    /// Final `(channels, height, width)` token map in reconstruction mode.
    pub fn final_map(&self) -> (usize, usize, usize) {
        let (h, w) = *self.config.grids().last().unwrap();
        (self.config.stages[self.config.active_stages() - 1].channels, h, w)
    }

    pub fn init<R: Rng + ?Sized>(&self, w: &mut ModelWeights, rng: &mut R) {
        let cfg = &self.config;
        let grids = cfg.grids();
        let mut in_ch = cfg.in_channels;
        for (i, st) in cfg.stages[..cfg.active_stages()].iter().enumerate() {
            let p = format!("{ENCODER_PREFIX}.stage{i}");
            nn::init_conv(w, &format!("{p}.embed"), in_ch, st.channels, st.kernel, rng);
            let (h, wd) = grids[i];
            w.insert(format!("{p}.pos"), small_uniform(rng, &[h * wd, st.channels], 0.02));
            nn::init_layer_norm(w, &format!("{p}.embed_norm"), st.channels);
            for d in 0..st.depth {
                let bp = format!("{p}.block{d}");
                nn::init_layer_norm(w, &format!("{bp}.norm1"), st.channels);
                init_attention(w, &format!("{bp}.attn"), st.channels, st.reduction, rng);
                nn::init_layer_norm(w, &format!("{bp}.norm2"), st.channels);
                nn::init_linear(w, &format!("{bp}.mlp.fc1"), st.channels, st.channels * cfg.mlp_ratio, rng);
                nn::init_linear(w, &format!("{bp}.mlp.fc2"), st.channels * cfg.mlp_ratio, st.channels, rng);
            }
            nn::init_layer_norm(w, &format!("{p}.norm"), st.channels);
            in_ch = st.channels;
        }
        if cfg.task == Task::Classify {
            let c = cfg.stages[1].channels;
            w.insert(format!("{ENCODER_PREFIX}.cls_token"), small_uniform(rng, &[1, 1, c], 0.02));
            w.insert(format!("{ENCODER_PREFIX}.dist_token"), small_uniform(rng, &[1, 1, c], 0.02));
        }
    }

    fn broadcast_token(g: &mut Graph, w: &ModelWeights, name: &str, batch: usize, c: usize) -> Result<Var> {
        let t = g.param(w, name)?;
        let map: Vec<usize> = (0..batch * c).map(|i| i % c).collect();
        Ok(g.gather(t, Arc::new(map), vec![batch, 1, c])?)
    }

    /// `[B, C_in, H, W]` images to `[B, semantic_len]` semantics.
    pub fn forward(&self, g: &mut Graph, w: &ModelWeights, images: Var) -> Result<Var> {
        let cfg = &self.config;
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1..] != [cfg.in_channels, cfg.height, cfg.width] {
            return Err(CoreError::Shape {
                op: "hvt_encode",
                expected: format!("[B, {}, {}, {}]", cfg.in_channels, cfg.height, cfg.width),
                actual: format!("{s:?}"),
            });
        }
        let batch = s[0];
        let grids = cfg.grids();
        let active = cfg.active_stages();
        let mut x = images;
        let mut tokens = images;
        for (i, st) in cfg.stages[..active].iter().enumerate() {
            let p = format!("{ENCODER_PREFIX}.stage{i}");
            let (h, wd) = grids[i];
            let fmap = nn::conv2d(g, w, &format!("{p}.embed"), x, st.stride, st.pad)?;
            let t = map_to_tokens(g, fmap)?;
            let pos = g.param(w, &format!("{p}.pos"))?;
            let t = g.add(t, pos)?;
            let mut t = nn::layer_norm(g, w, &format!("{p}.embed_norm"), t)?;
            let extra = if cfg.task == Task::Classify && i == 1 {
                let cls = Self::broadcast_token(g, w, &format!("{ENCODER_PREFIX}.cls_token"), batch, st.channels)?;
                let dist = Self::broadcast_token(g, w, &format!("{ENCODER_PREFIX}.dist_token"), batch, st.channels)?;
                t = g.concat(&[t, cls, dist], 1)?;
                2
            } else {
                0
            };
            let layout = AttentionLayout {
                grid: (h, wd),
                extra,
                reduction: st.reduction,
                mask_self: cfg.mask_self,
            };
            for d in 0..st.depth {
                let bp = format!("{p}.block{d}");
                let n1 = nn::layer_norm(g, w, &format!("{bp}.norm1"), t)?;
                let a = srlsa_attention(g, w, &format!("{bp}.attn"), n1, layout)?;
                let a = nn::linear(g, w, &format!("{bp}.attn.proj"), a)?;
                t = g.add(t, a)?;
                let n2 = nn::layer_norm(g, w, &format!("{bp}.norm2"), t)?;
                let m = nn::linear(g, w, &format!("{bp}.mlp.fc1"), n2)?;
                let m = g.gelu(m);
                let m = nn::linear(g, w, &format!("{bp}.mlp.fc2"), m)?;
                t = g.add(t, m)?;
            }
            t = nn::layer_norm(g, w, &format!("{p}.norm"), t)?;
            tokens = t;
            if extra == 0 {
                x = tokens_to_map(g, t, h, wd)?;
            }
        }
        match cfg.task {
            Task::Classify => {
                let (h, wd) = grids[active - 1];
                let c = cfg.stages[active - 1].channels;
                let special = g.slice(tokens, 1, h * wd, 2)?;
                Ok(g.reshape(special, vec![batch, 2 * c])?)
            }
            Task::Reconstruct => {
                let len = cfg.semantic_len();
                Ok(g.reshape(x, vec![batch, len])?)
            }
        }
    }
}

/// Transpose-convolution decoder configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtcnnConfig {
    pub seed_channels: usize,
    pub seed_height: usize,
    pub seed_width: usize,
    /// Output channels of each (transpose conv, GELU, batch norm) block.
    pub widths: Vec<usize>,
    pub out_channels: usize,
    pub shuffle: usize,
}

impl DtcnnConfig {
    pub fn for_encoder(encoder: &HvtEncoder, preset: Preset, out_channels: usize) -> Self {
        let (c, h, w) = encoder.final_map();
        let last = out_channels * 4;
        let widths = match preset {
            Preset::Desk => vec![48, 24, last],
            Preset::Paper => vec![256, 64, last],
        };
        Self {
            seed_channels: c,
            seed_height: h,
            seed_width: w,
            widths,
            out_channels,
            shuffle: 2,
        }
    }

    pub fn input_len(&self) -> usize {
        self.seed_channels * self.seed_height * self.seed_width
    }

    pub fn output_dims(&self) -> (usize, usize, usize) {
        let up = (1 << self.widths.len()) * self.shuffle;
        (self.out_channels, self.seed_height * up, self.seed_width * up)
    }

    pub fn validate(&self) -> Result<()> {
        let last = *self.widths.last().ok_or_else(|| invalid("dtcnn", "needs at least one block"))?;
        if last != self.out_channels * self.shuffle * self.shuffle {
            return Err(invalid(
                "dtcnn",
                format!(
                    "last block width {last} must equal out_channels·shuffle² = {}",
                    self.out_channels * self.shuffle * self.shuffle
                ),
            ));
        }
        Ok(())
    }
}

pub const DTCNN_PREFIX: &str = "dtcnn";

#[derive(Clone, Debug)]
pub struct Dtcnn {
    pub config: DtcnnConfig,
}

impl Dtcnn {
    pub fn new(config: DtcnnConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init<R: Rng + ?Sized>(&self, w: &mut ModelWeights, rng: &mut R) {
        let mut in_ch = self.config.seed_channels;
        for (i, &out) in self.config.widths.iter().enumerate() {
            nn::init_conv_transpose(w, &format!("{DTCNN_PREFIX}.up{i}"), in_ch, out, 4, rng);
            nn::init_batch_norm(w, &format!("{DTCNN_PREFIX}.bn{i}"), out);
            in_ch = out;
        }
    }

    /// `[B, input_len]` semantics to `[B, C, H, W]` images in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph, w: &ModelWeights, semantics: Var, mode: Mode) -> Result<Var> {
        let cfg = &self.config;
        let s = g.shape(semantics).to_vec();
        if s.len() != 2 || s[1] != cfg.input_len() {
            return Err(CoreError::Shape {
                op: "dtcnn_decode",
                expected: format!("[B, {}]", cfg.input_len()),
                actual: format!("{s:?}"),
            });
        }
        let mut x = g.reshape(semantics, vec![s[0], cfg.seed_channels, cfg.seed_height, cfg.seed_width])?;
        for i in 0..cfg.widths.len() {
            x = nn::conv_transpose2d(g, w, &format!("{DTCNN_PREFIX}.up{i}"), x, 2, 1)?;
            x = g.gelu(x);
            x = nn::batch_norm2d(g, w, &format!("{DTCNN_PREFIX}.bn{i}"), x, mode)?;
        }
        let x = g.pixel_shuffle(x, cfg.shuffle)?;
        Ok(g.sigmoid(x))
    }
}

pub const HEAD_PREFIX: &str = "head";

/// Per-token MLP heads over the class and distillation representations.
#[derive(Clone, Debug)]
pub struct ClassHead {
    pub token_dim: usize,
    pub classes: usize,
}

impl ClassHead {
    pub fn init<R: Rng + ?Sized>(&self, w: &mut ModelWeights, rng: &mut R) {
        for t in ["cls", "dist"] {
            nn::init_linear(w, &format!("{HEAD_PREFIX}.{t}.fc1"), self.token_dim, self.token_dim, rng);
            nn::init_linear(w, &format!("{HEAD_PREFIX}.{t}.fc2"), self.token_dim, self.classes, rng);
        }
    }

    /// `[B, 2·token_dim]` to `(cls_logits, dist_logits)`, each `[B, classes]`.
    pub fn forward(&self, g: &mut Graph, w: &ModelWeights, semantics: Var) -> Result<(Var, Var)> {
        let s = g.shape(semantics).to_vec();
        if s.len() != 2 || s[1] != 2 * self.token_dim {
            return Err(CoreError::Shape {
                op: "classify_head",
                expected: format!("[B, {}] classification semantics", 2 * self.token_dim),
                actual: format!("{s:?}"),
            });
        }
        let mut out = Vec::with_capacity(2);
        for (k, t) in ["cls", "dist"].into_iter().enumerate() {
            let x = g.slice(semantics, 1, k * self.token_dim, self.token_dim)?;
            let hdn = nn::linear(g, w, &format!("{HEAD_PREFIX}.{t}.fc1"), x)?;
            let hdn = g.gelu(hdn);
            out.push(nn::linear(g, w, &format!("{HEAD_PREFIX}.{t}.fc2"), hdn)?);
        }
        Ok((out[0], out[1]))
    }
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-row mean of the two heads' softmax vectors.
pub fn mean_head_scores(cls_logits: &[f64], dist_logits: &[f64], classes: usize) -> Vec<Vec<f64>> {
    cls_logits
        .chunks(classes)
        .zip(dist_logits.chunks(classes))
        .map(|(a, b)| {
            softmax_row(a)
                .into_iter()
                .zip(softmax_row(b))
                .map(|(x, y)| 0.5 * (x + y))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn desk_classification_semantics_are_64() {
        let cfg = HvtConfig::preset(Preset::Desk, Task::Classify, 1, 32, 32, 4);
        assert_eq!(cfg.grids(), vec![(8, 8), (4, 4)]);
        assert_eq!(cfg.semantic_len(), 64);
        let enc = HvtEncoder::new(cfg).unwrap();
        let mut w = ModelWeights::new();
        enc.init(&mut w, &mut rng());
        let mut g = Graph::new();
        let x = g.constant(vec![3, 1, 32, 32], vec![0.3; 3 * 1024]).unwrap();
        let s = enc.forward(&mut g, &w, x).unwrap();
        assert_eq!(g.shape(s), &[3, 64]);
    }

    #[test]
    fn desk_reconstruction_feeds_dtcnn() {
        let cfg = HvtConfig::preset(Preset::Desk, Task::Reconstruct, 3, 32, 32, 0);
        assert_eq!(cfg.grids(), vec![(8, 8), (4, 4), (2, 2), (2, 2)]);
        let enc = HvtEncoder::new(cfg).unwrap();
        assert_eq!(enc.semantic_len(), 256);
        let dcfg = DtcnnConfig::for_encoder(&enc, Preset::Desk, 3);
        assert_eq!(dcfg.output_dims(), (3, 32, 32));
        let dec = Dtcnn::new(dcfg).unwrap();
        let mut w = ModelWeights::new();
        enc.init(&mut w, &mut rng());
        dec.init(&mut w, &mut rng());
        let mut g = Graph::new();
        let x = g.constant(vec![2, 3, 32, 32], (0..6144).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let s = enc.forward(&mut g, &w, x).unwrap();
        let img = dec.forward(&mut g, &w, s, Mode::Train).unwrap();
        assert_eq!(g.shape(img), &[2, 3, 32, 32]);
        assert!(g.value(img).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dtcnn_zero_everything_is_half() {
        let dcfg = DtcnnConfig {
            seed_channels: 4,
            seed_height: 2,
            seed_width: 2,
            widths: vec![6, 5, 12],
            out_channels: 3,
            shuffle: 2,
        };
        let dec = Dtcnn::new(dcfg).unwrap();
        let mut w = ModelWeights::new();
        dec.init(&mut w, &mut rng());
        for (name, t) in w.iter_mut() {
            if name.contains(".up") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let x = g.constant(vec![2, 16], vec![0.0; 32]).unwrap();
        let img = dec.forward(&mut g, &w, x, Mode::Train).unwrap();
        assert_eq!(g.shape(img), &[2, 3, 32, 32]);
        assert!(g.value(img).iter().all(|&v| v == 0.5));
        let bad = g.constant(vec![2, 15], vec![0.0; 30]).unwrap();
        assert!(dec.forward(&mut g, &w, bad, Mode::Train).is_err());
    }

    #[test]
    fn head_shapes_and_zero_weights() {
        let head = ClassHead { token_dim: 8, classes: 3 };
        let mut w = ModelWeights::new();
        head.init(&mut w, &mut rng());
        for (_, t) in w.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(vec![5, 16], vec![0.7; 80]).unwrap();
        let (a, b) = head.forward(&mut g, &w, x).unwrap();
        assert_eq!(g.shape(a), &[5, 3]);
        let scores = mean_head_scores(g.value(a), g.value(b), 3);
        assert!(scores.iter().flatten().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        let recon = g.constant(vec![5, 15], vec![0.0; 75]).unwrap();
        assert!(head.forward(&mut g, &w, recon).is_err());
    }

    #[test]
    fn disagreeing_heads_tie_to_lowest_index() {
        let s = mean_head_scores(&[10.0, 0.0], &[0.0, 10.0], 2);
        assert!((s[0][0] - 0.5).abs() < 1e-15 && (s[0][1] - 0.5).abs() < 1e-15);
        assert_eq!(argmax(&s[0]), 0);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = HvtConfig::preset(Preset::Desk, Task::Reconstruct, 3, 32, 32, 0);
        cfg.stages[1].reduction = 3;
        assert!(matches!(cfg.validate(), Err(CoreError::Validation(_))));
        let mut cfg = HvtConfig::preset(Preset::Desk, Task::Classify, 1, 32, 32, 4);
        cfg.stages.truncate(1);
        assert!(cfg.validate().is_err());
        let cfg = HvtConfig::preset(Preset::Desk, Task::Classify, 1, 32, 32, 4);
        let enc = HvtEncoder::new(cfg).unwrap();
        let mut w = ModelWeights::new();
        enc.init(&mut w, &mut rng());
        let mut g = Graph::new();
        let x = g.constant(vec![1, 3, 32, 32], vec![0.0; 3072]).unwrap();
        assert!(enc.forward(&mut g, &w, x).is_err());
    }
}

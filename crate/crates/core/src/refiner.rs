//! U-shaped CSI refiner: turns a coarse least-squares channel estimate into
//! a denoised one, plus its supervised pretraining loop.

use flsc_tensor::nn::{self, Mode};
use flsc_tensor::{AdamW, AdamWConfig, Graph, LrSchedule, ModelWeights, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::mimo::{self, ChannelRealization, ComplexMatrix, Pilot};
use crate::seeds::{stream, Purpose};

pub const PREFIX: &str = "refiner";

/// What the refiner is regressed onto during pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinerTarget {
    /// The true channel draw.
    TrueChannel,
    /// The LS estimate itself (the loss as literally printed).
    LsEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub n_r: usize,
    pub n_t: usize,
    /// Side of the square feature map the estimate is upsampled to.
    pub upsample: usize,
    /// Channel widths of the two encoder levels.
    pub widths: [usize; 2],
    pub leaky_slope: f64,
    pub skips: bool,
    pub target: RefinerTarget,
    pub steps: usize,
    pub batch: usize,
    pub samples: usize,
    pub holdout: f64,
    pub lr_start: f64,
    pub lr_end: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            n_r: 2,
            n_t: 2,
            upsample: 16,
            widths: [8, 16],
            leaky_slope: 0.01,
            skips: true,
            target: RefinerTarget::TrueChannel,
            steps: 2000,
            batch: 64,
            samples: 50_000,
            holdout: 0.1,
            lr_start: 5e-4,
            lr_end: 1e-4,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_r != self.n_t || self.n_r == 0 {
            errs.push(format!("refiner needs a square channel, got {}x{}", self.n_r, self.n_t));
        } else if self.upsample % self.n_r != 0 || (self.upsample / self.n_r) < 4 || self.upsample % 4 != 0 {
            errs.push(format!(
                "upsample extent {} must be a multiple of 4 and of the antenna count, at least 4x it",
                self.upsample
            ));
        }
        if self.widths.contains(&0) || self.batch == 0 || self.samples == 0 {
            errs.push("widths, batch and sample count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.holdout) {
            errs.push(format!("holdout fraction {} outside [0, 1)", self.holdout));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            errs.push("learning rates must be positive and non-increasing".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation(errs))
        }
    }

    fn factor(&self) -> usize {
        self.upsample / self.n_r
    }
}

#[derive(Clone, Debug)]
pub struct CsiRefiner {
    pub config: RefinerConfig,
}

impl CsiRefiner {
    pub fn new(config: RefinerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init<R: Rng + ?Sized>(&self, w: &mut ModelWeights, rng: &mut R) {
        let [a, b] = self.config.widths;
        let p = PREFIX;
        nn::init_conv(w, &format!("{p}.enc0"), 2, a, 4, rng);
        nn::init_batch_norm(w, &format!("{p}.enc0_bn"), a);
        nn::init_conv(w, &format!("{p}.enc1"), a, b, 4, rng);
        nn::init_batch_norm(w, &format!("{p}.enc1_bn"), b);
        nn::init_conv_transpose(w, &format!("{p}.dec0"), b, a, 4, rng);
        nn::init_batch_norm(w, &format!("{p}.dec0_bn"), a);
        let d1_in = if self.config.skips { 2 * a } else { a };
        nn::init_conv_transpose(w, &format!("{p}.dec1"), d1_in, a, 4, rng);
        nn::init_batch_norm(w, &format!("{p}.dec1_bn"), a);
        let out_in = if self.config.skips { a + 2 } else { a };
        nn::init_conv(w, &format!("{p}.out"), out_in, 2, 3, rng);
    }

    /// `[B, 2, n_r, n_t]` (real, imaginary planes) to the same shape.
    pub fn forward(&self, g: &mut Graph, w: &ModelWeights, planes: Var, mode: Mode) -> Result<Var> {
        let cfg = &self.config;
        let s = g.shape(planes).to_vec();
        if s.len() != 4 || s[1..] != [2, cfg.n_r, cfg.n_t] {
            return Err(CoreError::Shape {
                op: "refine_csi",
                expected: format!("[B, 2, {}, {}]", cfg.n_r, cfg.n_t),
                actual: format!("{s:?}"),
            });
        }
        let p = PREFIX;
        let slope = cfg.leaky_slope;
        let block = |g: &mut Graph, x: Var, name: &str, transpose: bool| -> Result<Var> {
            let y = if transpose {
                nn::conv_transpose2d(g, w, &format!("{p}.{name}"), x, 2, 1)?
            } else {
                nn::conv2d(g, w, &format!("{p}.{name}"), x, 2, 1)?
            };
            let y = g.leaky_relu(y, slope);
            Ok(nn::batch_norm2d(g, w, &format!("{p}.{name}_bn"), y, mode)?)
        };
        let up = g.upsample_nearest(planes, cfg.factor())?;
        let e0 = block(g, up, "enc0", false)?;
        let e1 = block(g, e0, "enc1", false)?;
        let d0 = block(g, e1, "dec0", true)?;
        let d0 = if cfg.skips { g.concat(&[d0, e0], 1)? } else { d0 };
        let d1 = block(g, d0, "dec1", true)?;
        let d1 = if cfg.skips { g.concat(&[d1, up], 1)? } else { d1 };
        let out = nn::conv2d(g, w, &format!("{p}.out"), d1, 1, 1)?;
        Ok(g.avg_pool(out, cfg.factor())?)
    }

    /// Refines a batch of estimates outside of any training graph.
    pub fn refine_all(&self, w: &ModelWeights, estimates: &[ComplexMatrix]) -> Result<Vec<ComplexMatrix>> {
        let (r, t) = (self.config.n_r, self.config.n_t);
        let mut g = Graph::new();
        let x = g.constant(vec![estimates.len(), 2, r, t], stack_planes(estimates))?;
        let y = self.forward(&mut g, w, x, Mode::Eval)?;
        unstack_planes(g.value(y), r, t)
    }

    pub fn refine(&self, w: &ModelWeights, estimate: &ComplexMatrix) -> Result<ComplexMatrix> {
        Ok(self.refine_all(w, std::slice::from_ref(estimate))?.remove(0))
    }
}

pub fn stack_planes(ms: &[ComplexMatrix]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.to_planes()).collect()
}

pub fn unstack_planes(data: &[f64], r: usize, t: usize) -> Result<Vec<ComplexMatrix>> {
    data.chunks(2 * r * t).map(|c| ComplexMatrix::from_planes(r, t, c)).collect()
}

/// Mean over the batch of `(1/N)·‖est − target‖²` with `N` the entry count
/// of one channel matrix.
pub fn refiner_loss(g: &mut Graph, est: Var, target: Var) -> Result<Var> {
    let s = g.shape(est).to_vec();
    let entries = (s[2] * s[3]) as f64;
    let d = g.sub(est, target)?;
    let sq = g.square(d);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / (s[0] as f64 * entries)))
}

/// Channel draws split into training and held-out parts.
#[derive(Clone, Debug)]
pub struct CsiSampleSet {
    pub train: Vec<ComplexMatrix>,
    pub held_out: Vec<ComplexMatrix>,
}

impl CsiSampleSet {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, cfg: &RefinerConfig) -> Result<Self> {
        let all: Vec<ComplexMatrix> = (0..cfg.samples)
            .map(|_| mimo::draw_channel(rng, cfg.n_r, cfg.n_t, 0.0, 0).h)
            .collect();
        let held = ((cfg.samples as f64) * cfg.holdout).round() as usize;
        let split = cfg.samples - held;
        let mut train = all;
        let held_out = train.split_off(split);
        if train.is_empty() {
            return Err(invalid("CsiSampleSet::draw", "no training draws"));
        }
        Ok(Self { train, held_out })
    }
}

/// LS estimates of `channels` at `snr_db` with fresh pilot noise.
pub fn ls_estimates<R: Rng + ?Sized>(channels: &[ComplexMatrix], snr_db: f64, rng: &mut R) -> Result<Vec<ComplexMatrix>> {
    let n_t = channels.first().map_or(0, |h| h.cols());
    let pilot = Pilot::scaled_identity(n_t, 1.0)?;
    let noise_std = mimo::snr_to_noise_std(snr_db);
    channels
        .iter()
        .map(|h| {
            let ch = ChannelRealization {
                h: h.clone(),
                noise_std,
                block: 0,
            };
            mimo::pilot_ls_estimate(&ch, &pilot, rng)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainOutcome {
    pub losses: Vec<f64>,
}

/// Supervised pretraining at a fixed SNR. `snr_db = +inf` trains on
/// noiseless pilots.
pub fn pretrain(refiner: &CsiRefiner, set: &CsiSampleSet, snr_db: f64, seed: u64) -> Result<(ModelWeights, PretrainOutcome)> {
    let cfg = &refiner.config;
    if set.train.is_empty() {
        return Err(invalid("pretrain_refiner", "empty sample set"));
    }
    let mut w = ModelWeights::new();
    refiner.init(&mut w, &mut stream(seed, Purpose::Init, 0, 0, 0));
    let mut opt = AdamW::new(AdamWConfig::default());
    let schedule = LrSchedule {
        start: cfg.lr_start,
        end: cfg.lr_end,
        rounds: cfg.steps,
    };
    let mut order: Vec<usize> = (0..set.train.len()).collect();
    let mut shuffle = stream(seed, Purpose::Shuffle, 0, 0, 0);
    order.shuffle(&mut shuffle);
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut shuffle);
                cursor = 0;
            }
            batch.push(set.train[order[cursor]].clone());
            cursor += 1;
        }
        let mut noise = stream(seed, Purpose::Pilot, 0, 0, step as u64);
        let coarse = ls_estimates(&batch, snr_db, &mut noise)?;
        let target = match cfg.target {
            RefinerTarget::TrueChannel => &batch,
            RefinerTarget::LsEstimate => &coarse,
        };
        let mut g = Graph::new();
        let x = g.constant(vec![cfg.batch, 2, cfg.n_r, cfg.n_t], stack_planes(&coarse))?;
        let t = g.constant(vec![cfg.batch, 2, cfg.n_r, cfg.n_t], stack_planes(target))?;
        let y = refiner.forward(&mut g, &w, x, Mode::Train)?;
        let loss = refiner_loss(&mut g, y, t)?;
        losses.push(g.item(loss));
        g.backward(loss)?.write_to(&g, &mut w)?;
        w.apply_buffer_updates(g.take_buffer_updates())?;
        opt.step(&mut w, schedule.lr_at(step))?;
    }
    Ok((w, PretrainOutcome { losses }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmseReport {
    pub snr_db: f64,
    pub nmse_ls: f64,
    pub nmse_refined: f64,
    /// `nmse_refined / nmse_ls`.
    pub ratio: f64,
    pub samples: usize,
}

/// Aggregate NMSE of LS and refined estimates over `channels`.
pub fn evaluate(refiner: &CsiRefiner, w: &ModelWeights, channels: &[ComplexMatrix], snr_db: f64, seed: u64) -> Result<NmseReport> {
    if channels.is_empty() {
        return Err(invalid("evaluate_refiner", "no held-out channels"));
    }
    let mut rng = stream(seed, Purpose::Eval, 0, 0, 0);
    let coarse = ls_estimates(channels, snr_db, &mut rng)?;
    let mut refined = Vec::with_capacity(channels.len());
    for chunk in coarse.chunks(1024) {
        refined.extend(refiner.refine_all(w, chunk)?);
    }
    let (mut e_ls, mut e_ref, mut power) = (0.0, 0.0, 0.0);
    for ((h, ls), hu) in channels.iter().zip(&coarse).zip(&refined) {
        e_ls += ls.sub(h)?.norm_sqr();
        e_ref += hu.sub(h)?.norm_sqr();
        power += h.norm_sqr();
    }
    let (nmse_ls, nmse_refined) = (e_ls / power, e_ref / power);
    Ok(NmseReport {
        snr_db,
        nmse_ls,
        nmse_refined,
        ratio: nmse_refined / nmse_ls,
        samples: channels.len(),
    })
}

//! Device-local training, the server loop and per-round evaluation.

use flsc_tensor::nn::Mode;
use flsc_tensor::{AdamW, AdamWConfig, Graph, LrSchedule, ModelWeights};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{self, Image, ImageSample, Scene, Shard, ViewLayout};
use crate::error::{invalid, CoreError, Result};
use crate::hvt::{mean_head_scores, Task};
use crate::metrics;
use crate::seeds::{stream, Purpose};

use super::aggregate::{aggregate_results_reconstruction, fedavg_aggregate, mean_scores};
use super::link::{csi_loss, ChannelBlock, LinkModel, Phase, TaskOutput};
use super::loss::{kd_loss, reconstruction_loss, KdLossConfig};
use super::teacher::Teacher;

/// Training and test views for every device.
#[derive(Clone, Debug)]
pub struct FederatedData {
    pub layout: ViewLayout,
    pub train: Vec<Shard>,
    pub test: Vec<Shard>,
}

fn synth_scenes(cfg: &ExperimentConfig, purpose: Purpose, count: usize, width: usize) -> Vec<Scene> {
    (0..count)
        .map(|i| {
            let mut rng = stream(cfg.seed, purpose, 0, 0, i as u64);
            data::synth_scene(&mut rng, cfg.view_height, width, cfg.scene_style())
        })
        .collect()
}

/// Builds the partitioned data set described by `cfg`: synthetic scenes, or
/// IDX images split into training and test parts.
pub fn build_data(cfg: &ExperimentConfig) -> Result<FederatedData> {
    let layout = cfg.layout()?;
    let (train, test) = match (&cfg.idx_images, &cfg.idx_labels) {
        (Some(images), Some(labels)) => {
            let set = data::load_idx(images, labels)?;
            let mut scenes: Vec<Scene> = set
                .images
                .into_iter()
                .zip(set.labels)
                .map(|(image, label)| Scene {
                    image,
                    label: Some(label),
                })
                .collect();
            if let Some(bad) = scenes.iter().find_map(|s| s.label.filter(|&l| l >= cfg.classes)) {
                return Err(invalid("build_data", format!("IDX label {bad} but only {} classes configured", cfg.classes)));
            }
            scenes.shuffle(&mut stream(cfg.seed, Purpose::Data, 0, 0, 0));
            let n_test = cfg.test_scenes.min(scenes.len().saturating_sub(1));
            let test = scenes.split_off(scenes.len() - n_test);
            scenes.truncate(cfg.train_scenes);
            (scenes, test)
        }
        _ => {
            let width = layout.required_width();
            (
                synth_scenes(cfg, Purpose::Data, cfg.train_scenes, width),
                synth_scenes(cfg, Purpose::TestData, cfg.test_scenes, width),
            )
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(invalid("build_data", "need at least one training and one test scene"));
    }
    Ok(FederatedData {
        train: data::partition(&train, &layout)?,
        test: data::partition(&test, &layout)?,
        layout,
    })
}

/// Mutable state a device keeps across rounds.
#[derive(Clone, Debug)]
pub struct DeviceState {
    pub id: usize,
    pub shard: Shard,
    pub optimizer: AdamW,
    /// Frozen teacher logits for every sample of the shard.
    pub teacher_logits: Option<Vec<f64>>,
}

impl DeviceState {
    pub fn new(shard: Shard, teacher: Option<&Teacher>) -> Result<Self> {
        if shard.samples.is_empty() {
            return Err(invalid("device", format!("device {} has an empty shard", shard.device)));
        }
        let teacher_logits = match teacher {
            Some(t) => Some(t.logits(&shard.samples.iter().map(|s| &s.image).collect::<Vec<_>>())?),
            None => None,
        };
        Ok(Self {
            id: shard.device,
            shard,
            optimizer: AdamW::new(AdamWConfig::default()),
            teacher_logits,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.shard.samples.len()
    }
}

/// Round-level knobs of a local update.
#[derive(Clone, Copy, Debug)]
pub struct LocalContext {
    pub seed: u64,
    pub round: u64,
    pub snr_db: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kd: KdLossConfig,
}

#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub weights: ModelWeights,
    /// Mean task loss over the local steps; NaN when no step ran.
    pub mean_loss: f64,
    pub steps: usize,
}

fn stack_images(samples: &[&ImageSample]) -> (Vec<usize>, Vec<f64>) {
    let f = &samples[0].image;
    let shape = vec![samples.len(), f.channels, f.height, f.width];
    (shape, samples.iter().flat_map(|s| s.image.pixels.iter().copied()).collect())
}

/// `E` local epochs from `global` on one device. The loss is the task loss
/// plus the refiner's squared error against the true channel of each block.
pub fn local_update(model: &LinkModel, global: &ModelWeights, device: &mut DeviceState, ctx: &LocalContext) -> Result<LocalOutcome> {
    let mut w = global.clone();
    let n = device.sample_count();
    let batches = n.div_ceil(ctx.batch_size);
    let classes = model.spec.classes;
    let (mut total, mut steps) = (0.0, 0usize);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..ctx.epochs {
        order.shuffle(&mut stream(ctx.seed, Purpose::Shuffle, ctx.round, device.id as u64, epoch as u64));
        for (b, idx) in order.chunks(ctx.batch_size).enumerate() {
            let key = (epoch * batches + b) as u64;
            let samples: Vec<&ImageSample> = idx.iter().map(|&i| &device.shard.samples[i]).collect();
            let block = ChannelBlock::draw(ctx.seed, Phase::Train, ctx.round, device.id as u64, key, &model.spec, ctx.snr_db)?;
            let mut noise = Phase::Train.noise_stream(ctx.seed, ctx.round, device.id as u64, key);
            let mut g = Graph::new();
            let (shape, pixels) = stack_images(&samples);
            let x = g.constant(shape.clone(), pixels.clone())?;
            let out = model.forward(&mut g, &w, x, &block, &mut noise, Mode::Train)?;
            let task_loss = match out.task {
                TaskOutput::Logits { cls, dist } => {
                    let labels: Vec<usize> = samples
                        .iter()
                        .map(|s| s.label.ok_or_else(|| invalid("local_update", "classification sample without a label")))
                        .collect::<Result<_>>()?;
                    let all = device
                        .teacher_logits
                        .as_ref()
                        .ok_or_else(|| CoreError::MissingPrerequisite("teacher logits for classification".into()))?;
                    let teacher: Vec<f64> = idx.iter().flat_map(|&i| all[i * classes..(i + 1) * classes].iter().copied()).collect();
                    kd_loss(&mut g, cls, dist, &labels, &teacher, &ctx.kd)?
                }
                TaskOutput::Images(y) => {
                    let target = g.constant(shape, pixels)?;
                    reconstruction_loss(&mut g, y, target)?
                }
            };
            let aux = csi_loss(&mut g, out.refined_csi, &block)?;
            let loss = g.add(task_loss, aux)?;
            total += g.item(task_loss);
            steps += 1;
            g.backward(loss)?.write_to(&g, &mut w)?;
            w.apply_buffer_updates(g.take_buffer_updates())?;
            device.optimizer.step(&mut w, ctx.lr)?;
        }
    }
    Ok(LocalOutcome {
        weights: w,
        mean_loss: if steps == 0 { f64::NAN } else { total / steps as f64 },
        steps,
    })
}

/// Result-aggregation metrics on a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub n_samples: usize,
}

impl Evaluation {
    /// The per-round headline metric.
    pub fn headline(&self) -> (&'static str, f64) {
        match (self.accuracy, self.psnr) {
            (Some(a), _) => ("accuracy", a),
            (None, Some(p)) => ("psnr", p),
            _ => ("none", f64::NAN),
        }
    }
}

const EVAL_BATCH: usize = 32;

/// Every device sends its test views through the link with `weights`; the
/// receiver aggregates scores (classification) or stitches views
/// (reconstruction) and scores the result.
pub fn evaluate(model: &LinkModel, weights: &ModelWeights, test: &[Shard], snr_db: f64, seed: u64, round: u64) -> Result<Evaluation> {
    let count = test.first().map_or(0, |s| s.samples.len());
    if count == 0 || test.iter().any(|s| s.samples.len() != count) {
        return Err(invalid("evaluate", "every device needs the same non-empty test views"));
    }
    // per device, per sample: scores or images
    let outputs: Vec<Vec<Vec<f64>>> = test
        .par_iter()
        .map(|shard| -> Result<Vec<Vec<f64>>> {
            let mut rows = Vec::with_capacity(count);
            for (b, chunk) in shard.samples.chunks(EVAL_BATCH).enumerate() {
                let refs: Vec<&ImageSample> = chunk.iter().collect();
                let block = ChannelBlock::draw(seed, Phase::Eval, round, shard.device as u64, b as u64, &model.spec, snr_db)?;
                let mut noise = Phase::Eval.noise_stream(seed, round, shard.device as u64, b as u64);
                let mut g = Graph::new();
                let (shape, pixels) = stack_images(&refs);
                let x = g.constant(shape, pixels)?;
                let out = model.forward(&mut g, weights, x, &block, &mut noise, Mode::Eval)?;
                match out.task {
                    TaskOutput::Logits { cls, dist } => {
                        rows.extend(mean_head_scores(g.value(cls), g.value(dist), model.spec.classes));
                    }
                    TaskOutput::Images(y) => {
                        let per = g.value(y).len() / chunk.len();
                        rows.extend(g.value(y).chunks(per).map(<[f64]>::to_vec));
                    }
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    match model.spec.task {
        Task::Classify => {
            let mut predictions = Vec::with_capacity(count);
            let mut labels = Vec::with_capacity(count);
            for i in 0..count {
                let scores: Vec<Vec<f64>> = outputs.iter().map(|d| d[i].clone()).collect();
                predictions.push(crate::hvt::argmax(&mean_scores(&scores)?));
                labels.push(test[0].samples[i].label.ok_or_else(|| invalid("evaluate", "test view without a label"))?);
            }
            Ok(Evaluation {
                accuracy: Some(metrics::accuracy(&predictions, &labels)?),
                psnr: None,
                ssim: None,
                n_samples: count,
            })
        }
        Task::Reconstruct => {
            let (psnr, ssim) = panorama_scores(test, |dev, i| {
                let v = &test[dev].samples[i].image;
                Image::new(v.channels, v.height, v.width, outputs[dev][i].clone())
            })?;
            Ok(Evaluation {
                accuracy: None,
                psnr: Some(psnr),
                ssim: Some(ssim),
                n_samples: count,
            })
        }
    }
}

/// Mean PSNR and SSIM of stitched reconstructions against the stitch of the
/// true views, over all test scenes.
fn panorama_scores<F>(test: &[Shard], mut reconstructed: F) -> Result<(f64, f64)>
where
    F: FnMut(usize, usize) -> Result<Image>,
{
    let count = test[0].samples.len();
    let offsets: Vec<(usize, usize)> = test.iter().map(|s| s.samples[0].offset).collect();
    let (mut psnr, mut ssim) = (0.0, 0.0);
    for i in 0..count {
        let truth: Vec<Image> = test.iter().map(|s| s.samples[i].image.clone()).collect();
        let recon: Vec<Image> = (0..test.len()).map(|d| reconstructed(d, i)).collect::<Result<_>>()?;
        let reference = aggregate_results_reconstruction(&truth, &offsets)?.image;
        let pano = aggregate_results_reconstruction(&recon, &offsets)?.image;
        psnr += metrics::psnr(&pano, &reference, 1.0)?;
        ssim += metrics::ssim(&pano, &reference)?;
    }
    Ok((psnr / count as f64, ssim / count as f64))
}

/// PSNR/SSIM when every device outputs the per-pixel mean of its training
/// views, regardless of the input.
pub fn mean_image_baseline(data: &FederatedData) -> Result<(f64, f64)> {
    let means: Vec<Image> = data
        .train
        .iter()
        .map(|shard| {
            let f = &shard.samples[0].image;
            let mut acc = vec![0.0; f.len()];
            for s in &shard.samples {
                acc.iter_mut().zip(&s.image.pixels).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= shard.samples.len() as f64);
            Image::new(f.channels, f.height, f.width, acc)
        })
        .collect::<Result<_>>()?;
    panorama_scores(&data.test, |dev, _| Ok(means[dev].clone()))
}

/// One row of `rounds.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub device_count: usize,
    pub snr_db: f64,
    #[serde(rename = "R")]
    pub bandwidth_ratio: f64,
    pub delta: f64,
    pub train_loss: f64,
    pub metric_name: String,
    pub metric_value: f64,
    pub seed: u64,
}

/// Server state between rounds.
pub struct Federation {
    pub config: ExperimentConfig,
    pub model: LinkModel,
    pub devices: Vec<DeviceState>,
    pub test: Vec<Shard>,
    pub global: ModelWeights,
    schedule: LrSchedule,
}

impl Federation {
    /// Fresh global model (with the given pretrained refiner, if any) and one
    /// device per training shard.
    pub fn new(config: ExperimentConfig, data: FederatedData, refiner: Option<&ModelWeights>, teacher: Option<&Teacher>) -> Result<Self> {
        config.validate()?;
        let model = LinkModel::new(config.link_spec(), config.refiner_config())?;
        if config.task == Task::Classify && teacher.is_none() {
            return Err(CoreError::MissingPrerequisite("classification needs a trained teacher".into()));
        }
        let global = model.init(&mut stream(config.seed, Purpose::Init, 0, 0, 0), refiner)?;
        let devices = data
            .train
            .into_iter()
            .map(|s| DeviceState::new(s, teacher))
            .collect::<Result<Vec<_>>>()?;
        let schedule = LrSchedule {
            start: config.lr_start,
            end: config.lr_end,
            rounds: config.rounds(),
        };
        Ok(Self {
            model,
            devices,
            test: data.test,
            global,
            schedule,
            config,
        })
    }

    /// All devices train from the current global weights in parallel, the
    /// server averages them and scores the new global model. `round` is
    /// zero-based.
    pub fn run_round(&mut self, round: usize) -> Result<RoundRecord> {
        let cfg = &self.config;
        let ctx = LocalContext {
            seed: cfg.seed,
            round: round as u64,
            snr_db: cfg.snr_db,
            epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
            lr: self.schedule.lr_at(round),
            kd: cfg.kd(),
        };
        let (model, global) = (&self.model, &self.global);
        let outcomes: Vec<LocalOutcome> = self
            .devices
            .par_iter_mut()
            .map(|d| local_update(model, global, d, &ctx))
            .collect::<Result<_>>()?;
        let participants: Vec<(&ModelWeights, usize)> = outcomes
            .iter()
            .zip(&self.devices)
            .map(|(o, d)| (&o.weights, d.sample_count()))
            .collect();
        self.global = fedavg_aggregate(&participants)?;
        let total: usize = self.devices.iter().map(DeviceState::sample_count).sum();
        let train_loss = outcomes
            .iter()
            .zip(&self.devices)
            .map(|(o, d)| o.mean_loss * d.sample_count() as f64 / total as f64)
            .sum();
        let eval = evaluate(&self.model, &self.global, &self.test, cfg.snr_db, cfg.seed, round as u64)?;
        let (metric_name, metric_value) = eval.headline();
        log::info!("round {}: train loss {train_loss:.4}, {metric_name} {metric_value:.4}", round + 1);
        Ok(RoundRecord {
            round: round + 1,
            device_count: self.devices.len(),
            snr_db: cfg.snr_db,
            bandwidth_ratio: cfg.bandwidth_ratio,
            delta: cfg.delta,
            train_loss,
            metric_name: metric_name.to_string(),
            metric_value,
            seed: cfg.seed,
        })
    }
}

/// The full server loop; `on_round` sees each record and the new global
/// weights as soon as the round finishes.
pub fn run_federated_training<F>(
    config: &ExperimentConfig,
    data: FederatedData,
    refiner: Option<&ModelWeights>,
    teacher: Option<&Teacher>,
    mut on_round: F,
) -> Result<(ModelWeights, Vec<RoundRecord>)>
where
    F: FnMut(&RoundRecord, &ModelWeights) -> Result<()>,
{
    let mut fed = Federation::new(config.clone(), data, refiner, teacher)?;
    let mut records = Vec::with_capacity(config.rounds());
    for t in 0..config.rounds() {
        let rec = fed.run_round(t)?;
        on_round(&rec, &fed.global)?;
        records.push(rec);
    }
    Ok((fed.global, records))
}

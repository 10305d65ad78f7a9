//! Experiment orchestration behind the `flsc` subcommands. Every function
//! validates its configuration before doing any work and writes only
//! reproducible CSV/JSON/checkpoint files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use flsc_tensor::ModelWeights;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{invalid, io_err, CoreError, Result};
use crate::federation::{
    build_data, evaluate, run_federated_training, train_teacher, Evaluation, FederatedData, LinkModel, RoundRecord,
    Teacher,
};
use crate::hvt::Task;
use crate::refiner::{self, CsiRefiner, CsiSampleSet, NmseReport};
use crate::seeds::{derive_seed, stream, Purpose};

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const FINAL_CHECKPOINT: &str = "final.flsc";
pub const TEACHER_CHECKPOINT: &str = "teacher.flsc";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const SWEEP_FILE: &str = "sweep.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(CoreError::Exists(path.to_path_buf()));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(format!("writing {}", path.display())))
}

/// Input files named by the config must exist before anything runs.
pub fn check_prerequisites(cfg: &ExperimentConfig) -> Result<()> {
    for p in [&cfg.idx_images, &cfg.idx_labels].into_iter().flatten() {
        if !p.exists() {
            return Err(CoreError::MissingPrerequisite(format!("data file {}", p.display())));
        }
    }
    if let Some(p) = &cfg.refiner_checkpoint {
        if !p.exists() {
            return Err(CoreError::MissingPrerequisite(format!("refiner checkpoint {}", p.display())));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub report: NmseReport,
    pub final_loss: f64,
}

/// Pretrains the CSI refiner at `cfg.snr_db` and writes its checkpoint and
/// an LS-versus-refined NMSE report next to it.
pub fn cmd_pretrain_csi(cfg: &ExperimentConfig, force: bool) -> Result<PretrainSummary> {
    cfg.validate()?;
    check_prerequisites(cfg)?;
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(ExperimentConfig::refiner_file_name(cfg.snr_db));
    refuse_existing(&path, force)?;
    let rc = cfg.refiner_config();
    let refiner = CsiRefiner::new(rc.clone())?;
    let set = CsiSampleSet::draw(&mut stream(cfg.seed, Purpose::Refiner, 0, 0, 0), &rc)?;
    let (weights, outcome) = refiner::pretrain(&refiner, &set, cfg.snr_db, cfg.seed)?;
    let report = refiner::evaluate(&refiner, &weights, &set.held_out, cfg.snr_db, cfg.seed)?;
    weights.save(&path)?;
    let summary = PretrainSummary {
        checkpoint: path.clone(),
        report,
        final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
    };
    write_json(&path.with_extension("json"), &summary)?;
    log::info!(
        "refiner at {} dB: NMSE LS {:.4}, refined {:.4}",
        cfg.snr_db,
        report.nmse_ls,
        report.nmse_refined
    );
    Ok(summary)
}

/// SNR encoded in a refiner checkpoint name, if it follows the convention.
fn snr_from_file_name(path: &Path) -> Option<f64> {
    path.file_name()?
        .to_str()?
        .strip_prefix("csi_refiner_snr")?
        .strip_suffix(".flsc")?
        .parse()
        .ok()
}

/// Pretrained refiner for the run, or `None` (with a warning) when there is
/// none. A checkpoint for a different SNR is used with a warning.
pub fn load_refiner(cfg: &ExperimentConfig) -> Result<Option<(PathBuf, ModelWeights)>> {
    let path = cfg.refiner_path();
    if !path.exists() {
        log::warn!(
            "no pretrained refiner at {}; starting from random weights",
            path.display()
        );
        return Ok(None);
    }
    if let Some(snr) = snr_from_file_name(&path) {
        if snr != cfg.snr_db {
            log::warn!("refiner {} was pretrained at {snr} dB but the run uses {} dB", path.display(), cfg.snr_db);
        }
    }
    Ok(Some((path.clone(), ModelWeights::load(&path)?)))
}

/// Teacher trained on every device's training views.
pub fn teacher_for(cfg: &ExperimentConfig, data: &FederatedData) -> Result<Teacher> {
    let images: Vec<_> = data.train.iter().flat_map(|s| s.samples.iter().map(|x| &x.image)).collect();
    let labels: Vec<usize> = data
        .train
        .iter()
        .flat_map(|s| s.samples.iter().map(|x| x.label))
        .collect::<Option<_>>()
        .ok_or_else(|| invalid("train_teacher", "training views without labels"))?;
    train_teacher(&images, &labels, cfg.classes, &cfg.teacher_config(), cfg.seed)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub versions: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub refiner: Option<PathBuf>,
    pub started_at: u64,
    pub finished_at: u64,
    pub checkpoints: Vec<PathBuf>,
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set so that
/// manifests can be made byte-reproducible.
fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

fn module_seeds(master: u64) -> BTreeMap<String, u64> {
    [
        ("init", Purpose::Init),
        ("data", Purpose::Data),
        ("test_data", Purpose::TestData),
        ("shuffle", Purpose::Shuffle),
        ("channel", Purpose::Channel),
        ("pilot", Purpose::Pilot),
        ("noise", Purpose::Noise),
        ("eval", Purpose::Eval),
        ("teacher", Purpose::Teacher),
        ("refiner", Purpose::Refiner),
    ]
    .into_iter()
    .map(|(k, p)| (k.to_string(), derive_seed(master, p, 0, 0, 0)))
    .collect()
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<RoundRecord>,
    pub weights: ModelWeights,
    pub rounds_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
}

/// Federated training; writes `rounds.csv` (one row per round, flushed as
/// it goes), the final global checkpoint and the run manifest.
pub fn cmd_train(cfg: &ExperimentConfig, force: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    check_prerequisites(cfg)?;
    ensure_dir(&cfg.out_dir)?;
    let rounds_csv = cfg.out_dir.join(ROUNDS_FILE);
    refuse_existing(&rounds_csv, force)?;
    let started_at = timestamp();
    let refiner = load_refiner(cfg)?;
    let data = build_data(cfg)?;
    let mut checkpoints = Vec::new();
    let teacher = match cfg.task {
        Task::Classify => {
            let t = teacher_for(cfg, &data)?;
            let p = cfg.out_dir.join(TEACHER_CHECKPOINT);
            t.weights.save(&p)?;
            checkpoints.push(p);
            log::info!("teacher training accuracy {:.3}", t.train_accuracy);
            Some(t)
        }
        Task::Reconstruct => None,
    };
    let mut writer = csv::Writer::from_path(&rounds_csv)?;
    let (weights, records) = run_federated_training(
        cfg,
        data,
        refiner.as_ref().map(|(_, w)| w),
        teacher.as_ref(),
        |rec, global| {
            writer.serialize(rec)?;
            writer.flush().map_err(io_err("flushing rounds.csv"))?;
            if cfg.save_round_checkpoints {
                global.save(cfg.out_dir.join(format!("global_round{}.flsc", rec.round)))?;
            }
            Ok(())
        },
    )?;
    drop(writer);
    let checkpoint = cfg.out_dir.join(FINAL_CHECKPOINT);
    weights.save(&checkpoint)?;
    checkpoints.push(checkpoint.clone());
    let manifest_path = cfg.out_dir.join(MANIFEST_FILE);
    let manifest = RunManifest {
        config: cfg.clone(),
        versions: BTreeMap::from([
            ("flsc-core".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("checkpoint-format".to_string(), flsc_tensor::weights::CHECKPOINT_VERSION.to_string()),
        ]),
        seeds: module_seeds(cfg.seed),
        refiner: refiner.map(|(p, _)| p),
        started_at,
        finished_at: timestamp(),
        checkpoints,
    };
    write_json(&manifest_path, &manifest)?;
    Ok(TrainSummary {
        records,
        weights,
        rounds_csv,
        checkpoint,
        manifest: manifest_path,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub snr_db: f64,
    #[serde(rename = "R")]
    pub bandwidth_ratio: f64,
    pub delta: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssim: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

/// Round key of evaluation streams outside training, distinct from any
/// training round.
const EVAL_ROUND: u64 = u64::MAX;

/// Loads `checkpoint`, checks it belongs to the configured task and model,
/// and evaluates it on the seeded test partition.
pub fn evaluate_checkpoint(checkpoint: &Path, cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    check_prerequisites(cfg)?;
    if !checkpoint.exists() {
        return Err(CoreError::MissingPrerequisite(format!("checkpoint {}", checkpoint.display())));
    }
    let weights = ModelWeights::load(checkpoint)?;
    let model = LinkModel::new(cfg.link_spec(), cfg.refiner_config())?;
    let template = model.init(&mut stream(cfg.seed, Purpose::Init, 0, 0, 0), None)?;
    if let Err(e) = template.check_aggregable(&weights) {
        return Err(invalid(
            "eval",
            format!(
                "checkpoint {} does not match a {} model with this configuration ({e})",
                checkpoint.display(),
                cfg.task.name()
            ),
        ));
    }
    let data = build_data(cfg)?;
    let Evaluation {
        accuracy,
        psnr,
        ssim,
        n_samples,
    } = evaluate(&model, &weights, &data.test, cfg.snr_db, cfg.seed, EVAL_ROUND)?;
    Ok(EvalReport {
        task: cfg.task,
        snr_db: cfg.snr_db,
        bandwidth_ratio: cfg.bandwidth_ratio,
        delta: cfg.delta,
        accuracy,
        psnr,
        ssim,
        n_samples,
        seed: cfg.seed,
    })
}

/// [`evaluate_checkpoint`] plus `metrics.json` in the output directory.
pub fn cmd_eval(checkpoint: &Path, cfg: &ExperimentConfig) -> Result<EvalReport> {
    let report = evaluate_checkpoint(checkpoint, cfg)?;
    ensure_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join(METRICS_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Snr,
    Bandwidth,
    Overlap,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Snr => "snr",
            SweepAxis::Bandwidth => "bandwidth",
            SweepAxis::Overlap => "overlap",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, v: f64) {
        match self {
            SweepAxis::Snr => cfg.snr_db = v,
            SweepAxis::Bandwidth => cfg.bandwidth_ratio = v,
            SweepAxis::Overlap => cfg.delta = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub task: String,
    pub snr_db: f64,
    #[serde(rename = "R")]
    pub bandwidth_ratio: f64,
    pub delta: f64,
    pub final_train_loss: f64,
    pub accuracy: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

/// Parses and de-duplicates sweep values, keeping their spelling.
pub fn sweep_values(values: &[String]) -> Result<Vec<(String, f64)>> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for raw in values {
        let v: f64 = raw
            .trim()
            .parse()
            .map_err(|_| invalid("sweep", format!("value `{raw}` is not a number")))?;
        if out.iter().any(|(_, seen)| *seen == v) {
            log::warn!("dropping duplicate sweep value {raw}");
            continue;
        }
        out.push((raw.trim().to_string(), v));
    }
    if out.len() < 2 {
        return Err(CoreError::Validation(vec![format!(
            "a sweep needs at least 2 distinct values, got {}",
            out.len()
        )]));
    }
    Ok(out)
}

/// Trains and evaluates one run per axis value (same seed), each in its own
/// subdirectory, and writes one `sweep.csv` row per value.
pub fn cmd_sweep(axis: SweepAxis, values: &[String], cfg: &ExperimentConfig, force: bool) -> Result<Vec<SweepRow>> {
    let values = sweep_values(values)?;
    let mut runs = Vec::with_capacity(values.len());
    let mut errs = Vec::new();
    for (raw, v) in &values {
        let mut run = cfg.clone();
        axis.apply(&mut run, *v);
        run.out_dir = cfg.out_dir.join(format!("{}_{raw}", axis.name()));
        errs.extend(run.problems().into_iter().map(|e| format!("{} = {raw}: {e}", axis.name())));
        runs.push((raw.clone(), run));
    }
    if !errs.is_empty() {
        return Err(CoreError::Validation(errs));
    }
    check_prerequisites(cfg)?;
    ensure_dir(&cfg.out_dir)?;
    let sweep_csv = cfg.out_dir.join(SWEEP_FILE);
    refuse_existing(&sweep_csv, force)?;
    let mut rows = Vec::with_capacity(runs.len());
    for (raw, mut run) in runs {
        // refiners live next to the sweep, not inside each run directory
        if run.refiner_checkpoint.is_none() {
            run.refiner_checkpoint = Some(cfg.out_dir.join(ExperimentConfig::refiner_file_name(run.snr_db)))
                .filter(|p| p.exists());
        }
        let trained = cmd_train(&run, force)?;
        let report = evaluate_checkpoint(&trained.checkpoint, &run)?;
        rows.push(SweepRow {
            axis: axis.name().to_string(),
            value: raw,
            task: run.task.name().to_string(),
            snr_db: run.snr_db,
            bandwidth_ratio: run.bandwidth_ratio,
            delta: run.delta,
            final_train_loss: trained.records.last().map_or(f64::NAN, |r| r.train_loss),
            accuracy: report.accuracy,
            psnr: report.psnr,
            ssim: report.ssim,
            n_samples: report.n_samples,
            seed: run.seed,
        });
    }
    let mut w = csv::Writer::from_path(&sweep_csv)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err("flushing sweep.csv"))?;
    Ok(rows)
}

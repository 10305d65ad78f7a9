//! Flat, JSON-serialized experiment configuration shared by the training
//! loop and the command-line harness.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SceneStyle, ViewLayout};
use crate::error::{io_err, CoreError, Result};
use crate::federation::{KdLossConfig, LinkModel, LinkSpec, TeacherConfig};
use crate::hvt::{Preset, Task};
use crate::refiner::RefinerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub devices: usize,
    /// Overlap ratio between adjacent device views.
    pub delta: f64,
    pub bandwidth_ratio: f64,
    pub snr_db: f64,
    pub preset: Preset,
    /// Global rounds; `None` picks the task default (40 / 30).
    pub rounds: Option<usize>,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub lambda: f64,
    pub tau_k: f64,
    pub smoothing: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub classes: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub view_height: usize,
    pub view_width: usize,
    pub n_t: usize,
    pub n_r: usize,
    /// IDX image/label files replacing the synthetic scenes (classification).
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub refiner_steps: usize,
    pub refiner_lr_start: f64,
    pub refiner_lr_end: f64,
    /// Explicit refiner checkpoint; otherwise looked up in `out_dir`.
    pub refiner_checkpoint: Option<PathBuf>,
    pub teacher_epochs: usize,
    pub save_round_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let refiner = RefinerConfig::default();
        let kd = KdLossConfig::default();
        Self {
            task: Task::Classify,
            devices: 2,
            delta: 0.6,
            bandwidth_ratio: 0.04,
            snr_db: 18.0,
            preset: Preset::Desk,
            rounds: None,
            local_epochs: 10,
            batch_size: 16,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            lambda: kd.lambda,
            tau_k: kd.tau,
            smoothing: kd.smoothing,
            lr_start: 5e-4,
            lr_end: 1e-4,
            classes: 4,
            train_scenes: 256,
            test_scenes: 64,
            view_height: 32,
            view_width: 32,
            n_t: 2,
            n_r: 2,
            idx_images: None,
            idx_labels: None,
            refiner_steps: refiner.steps,
            refiner_lr_start: refiner.lr_start,
            refiner_lr_end: refiner.lr_end,
            refiner_checkpoint: None,
            teacher_epochs: TeacherConfig::default().max_epochs,
            save_round_checkpoints: false,
        }
    }
}

impl ExperimentConfig {
    pub fn rounds(&self) -> usize {
        self.rounds.unwrap_or(match self.task {
            Task::Classify => 40,
            Task::Reconstruct => 30,
        })
    }

    pub fn kd(&self) -> KdLossConfig {
        KdLossConfig {
            lambda: self.lambda,
            tau: self.tau_k,
            smoothing: self.smoothing,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self.task {
            Task::Classify => 1,
            Task::Reconstruct => 3,
        }
    }

    pub fn scene_style(&self) -> SceneStyle {
        match self.task {
            Task::Classify => SceneStyle::Stripes { classes: self.classes },
            Task::Reconstruct => SceneStyle::Shapes,
        }
    }

    pub fn uses_idx(&self) -> bool {
        self.idx_images.is_some() || self.idx_labels.is_some()
    }

    pub fn link_spec(&self) -> LinkSpec {
        LinkSpec {
            task: self.task,
            preset: self.preset,
            in_channels: self.in_channels(),
            height: self.view_height,
            width: self.view_width,
            classes: self.classes,
            bandwidth_ratio: self.bandwidth_ratio,
            n_t: self.n_t,
            n_r: self.n_r,
        }
    }

    pub fn refiner_config(&self) -> RefinerConfig {
        RefinerConfig {
            n_r: self.n_r,
            n_t: self.n_t,
            steps: self.refiner_steps,
            lr_start: self.refiner_lr_start,
            lr_end: self.refiner_lr_end,
            ..RefinerConfig::default()
        }
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            max_epochs: self.teacher_epochs,
            ..TeacherConfig::default()
        }
    }

    pub fn layout(&self) -> Result<ViewLayout> {
        ViewLayout::new(self.devices, self.delta, self.view_width)
    }

    /// Checkpoint name of the refiner pretrained at `snr_db`.
    pub fn refiner_file_name(snr_db: f64) -> String {
        format!("csi_refiner_snr{snr_db}.flsc")
    }

    pub fn refiner_path(&self) -> PathBuf {
        self.refiner_checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join(Self::refiner_file_name(self.snr_db)))
    }

    /// Every problem with the configuration, in one pass.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.devices == 0 {
            errs.push("devices must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.delta) {
            errs.push(format!("delta {} outside [0, 1]", self.delta));
        }
        if !(self.bandwidth_ratio > 0.0 && self.bandwidth_ratio <= 1.0) {
            errs.push(format!("bandwidth ratio {} outside (0, 1]", self.bandwidth_ratio));
        }
        if !self.snr_db.is_finite() {
            errs.push(format!("snr_db {} is not finite", self.snr_db));
        }
        if self.rounds == Some(0) {
            errs.push("rounds must be at least 1".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".into());
        }
        if self.train_scenes == 0 || self.test_scenes == 0 {
            errs.push("train_scenes and test_scenes must be at least 1".into());
        }
        if self.task == Task::Classify && self.classes < 2 {
            errs.push(format!("classification needs at least 2 classes, got {}", self.classes));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            errs.push("learning rates must be positive".into());
        }
        errs.extend(self.kd().problems());
        if self.n_t == 0 || self.n_r < self.n_t {
            errs.push(format!("antennas {}x{}: need n_r >= n_t >= 1", self.n_r, self.n_t));
        }
        if self.idx_images.is_some() != self.idx_labels.is_some() {
            errs.push("idx_images and idx_labels must be given together".into());
        }
        if self.uses_idx() && self.task != Task::Classify {
            errs.push("IDX data is only supported for classification".into());
        }
        if self.uses_idx() && self.view_height != 32 {
            errs.push("IDX images are padded to 32 rows; view_height must be 32".into());
        }
        if let Err(e) = self.refiner_config().validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            // shape checks need otherwise valid numbers
            if let Err(e) = LinkModel::new(self.link_spec(), self.refiner_config()) {
                errs.push(e.to_string());
            }
            if self.uses_idx() {
                if let Ok(layout) = self.layout() {
                    if layout.required_width() > 32 {
                        errs.push(format!(
                            "{} views of width {} at delta {} need {} columns but IDX images have 32",
                            self.devices,
                            self.view_width,
                            self.delta,
                            layout.required_width()
                        ));
                    }
                }
            }
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

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(format!("reading config {}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = ExperimentConfig::default();
        assert!(c.problems().is_empty(), "{:?}", c.problems());
        assert_eq!(ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        assert_eq!(c.rounds(), 40);
    }

    #[test]
    fn consolidates_all_problems() {
        let c = ExperimentConfig {
            devices: 0,
            delta: 1.5,
            bandwidth_ratio: 0.0,
            lambda: 2.0,
            ..ExperimentConfig::default()
        };
        let errs = c.problems();
        assert_eq!(errs.len(), 4, "{errs:?}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"snr": 3}"#).is_err());
        let c = ExperimentConfig::from_json(r#"{"snr_db": 3, "task": "reconstruct"}"#).unwrap();
        assert_eq!(c.snr_db, 3.0);
        assert_eq!(c.rounds(), 30);
    }

    #[test]
    fn refiner_file_names() {
        assert_eq!(ExperimentConfig::refiner_file_name(5.0), "csi_refiner_snr5.flsc");
        assert_eq!(ExperimentConfig::refiner_file_name(-2.5), "csi_refiner_snr-2.5.flsc");
    }
}

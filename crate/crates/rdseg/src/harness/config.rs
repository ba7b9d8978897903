//! The experiment configuration: a nested, strictly-validated TOML document.
//! Unknown keys anywhere in the file are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SceneConfig;
use crate::distill::{CombineMode, DistillConfig};
use crate::model::ModelSpec;

use super::HarnessError;

/// SGD hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { base_lr: 0.02, momentum: 0.9, weight_decay: 5e-4 }
    }
}

/// Distillation schedule and thresholds, as written in config files. The
/// iteration budget lives at the experiment level; see
/// [`ExperimentConfig::distill_config`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    /// Fraction `p` of total iterations in the early (TFE) stage.
    pub stage_fraction: f64,
    /// Confidence threshold `t` of the late (TSE) stage.
    pub confidence_threshold: f64,
    /// KD temperature.
    pub temperature: f64,
    /// Combination of the thresholded difficulty maps.
    pub mode: CombineMode,
    /// Divide the weighted task loss by the weight sum instead of the pixel
    /// count.
    pub normalize_by_weight_sum: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            stage_fraction: 0.10,
            confidence_threshold: 0.70,
            temperature: 1.0,
            mode: CombineMode::Xor,
            normalize_by_weight_sum: false,
        }
    }
}

/// Which student-training recipe `distill` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Task loss only, no teacher.
    BaselineCe,
    /// Task loss plus pixel-wise KD.
    KdOnly,
    /// The staged, difficulty-weighted task loss plus pixel-wise KD.
    Rdd,
    /// `Rdd` plus attention-transfer terms over paired stages.
    RddPlusAt,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::BaselineCe => "baseline_ce",
            Method::KdOnly => "kd_only",
            Method::Rdd => "rdd",
            Method::RddPlusAt => "rdd_plus_at",
        }
    }

    pub fn uses_teacher(self) -> bool {
        !matches!(self, Method::BaselineCe)
    }

    pub fn staged(self) -> bool {
        matches!(self, Method::Rdd | Method::RddPlusAt)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline_ce" => Ok(Method::BaselineCe),
            "kd_only" => Ok(Method::KdOnly),
            "rdd" => Ok(Method::Rdd),
            "rdd_plus_at" => Ok(Method::RddPlusAt),
            other => Err(format!(
                "unknown method '{other}' (expected baseline_ce, kd_only, rdd, rdd_plus_at)"
            )),
        }
    }
}

/// Everything one experiment needs. All fields have defaults, so a config
/// file only states deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub teacher_spec: ModelSpec,
    pub student_spec: ModelSpec,
    pub distill: ScheduleSection,
    pub optimizer: OptimizerConfig,
    pub total_iters: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub train_size: usize,
    pub val_size: usize,
    /// Weight of the auxiliary-head cross entropy during teacher
    /// pretraining.
    pub aux_loss_weight: f64,
    /// Numerator of the per-layer attention-transfer weight; each layer uses
    /// `at_beta_scale / (map elements * batch size)`.
    pub at_beta_scale: f64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            teacher_spec: ModelSpec::teacher_default(5),
            student_spec: ModelSpec::student_default(5),
            distill: ScheduleSection::default(),
            optimizer: OptimizerConfig::default(),
            total_iters: 2000,
            batch_size: 8,
            eval_every: 200,
            train_size: 512,
            val_size: 128,
            aux_loss_weight: 0.4,
            at_beta_scale: 1000.0,
            seeds: vec![11, 12, 13, 14, 15],
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let config: ExperimentConfig = toml::from_str(text)
            .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_path(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::ConfigRead {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.scene.validate()?;
        self.teacher_spec.validate()?;
        self.student_spec.validate()?;
        let schedule = DistillConfig {
            stage_fraction: self.distill.stage_fraction,
            confidence_threshold: self.distill.confidence_threshold,
            temperature: self.distill.temperature,
            mode: self.distill.mode,
            total_iters: self.total_iters.max(1),
            normalize_by_weight_sum: self.distill.normalize_by_weight_sum,
        };
        schedule.validate()?;
        if self.seeds.is_empty() {
            return Err(HarnessError::InvalidConfig("seeds must be non-empty".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.train_size == 0 || self.val_size == 0 {
            return Err(HarnessError::InvalidConfig("train_size and val_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(HarnessError::InvalidConfig("eval_every must be >= 1".into()));
        }
        for (name, spec) in [("teacher_spec", &self.teacher_spec), ("student_spec", &self.student_spec)]
        {
            if spec.num_classes != self.scene.num_classes {
                return Err(HarnessError::InvalidConfig(format!(
                    "{name} has {} classes but the scene has {}",
                    spec.num_classes, self.scene.num_classes
                )));
            }
            let factor = spec.downsample_factor();
            if self.scene.image_size % factor != 0 {
                return Err(HarnessError::InvalidConfig(format!(
                    "image_size {} not divisible by {name}'s downsampling factor {factor}",
                    self.scene.image_size
                )));
            }
        }
        if !(self.aux_loss_weight >= 0.0) {
            return Err(HarnessError::InvalidConfig("aux_loss_weight must be >= 0".into()));
        }
        Ok(())
    }

    /// The runtime schedule with the experiment's iteration budget filled in.
    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            stage_fraction: self.distill.stage_fraction,
            confidence_threshold: self.distill.confidence_threshold,
            temperature: self.distill.temperature,
            mode: self.distill.mode,
            total_iters: self.total_iters,
            normalize_by_weight_sum: self.distill.normalize_by_weight_sum,
        }
    }

    /// Default teacher checkpoint location under the output directory.
    pub fn default_teacher_checkpoint(&self) -> PathBuf {
        self.output_dir.join("teacher").join("teacher.ckpt")
    }
}

macro_rules! fmt_as_str {
    () => {
        fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            f.write_str(self.as_str())
        }
    };
}
use fmt_as_str;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_with_nesting() {
        let text = r#"
            total_iters = 60
            batch_size = 4
            seeds = [1, 2]

            [scene]
            image_size = 32
            num_classes = 3
            shapes_min = 1
            shapes_max = 3
            noise_rate = 0.02
            boundary_blur = 1
            seed = 5

            [teacher_spec]
            stages = [{ channels = 8, convs = 1 }, { channels = 8, convs = 1 }]
            num_classes = 3
            has_aux_head = true

            [student_spec]
            stages = [{ channels = 4, convs = 1 }, { channels = 4, convs = 1 }]
            num_classes = 3
            has_aux_head = false

            [distill]
            stage_fraction = 0.2
            confidence_threshold = 0.65
            mode = "STRICT"

            [optimizer]
            base_lr = 0.01
        "#;
        let config = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(config.total_iters, 60);
        assert_eq!(config.scene.num_classes, 3);
        assert_eq!(config.distill.mode, CombineMode::Strict);
        assert_eq!(config.optimizer.base_lr, 0.01);
        // Unstated fields keep their defaults.
        assert_eq!(config.optimizer.momentum, 0.9);
        assert_eq!(config.eval_every, 200);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = ExperimentConfig::from_toml_str("totally_unknown = 3").unwrap_err();
        assert!(err.to_string().contains("totally_unknown"), "{err}");
        let err =
            ExperimentConfig::from_toml_str("[optimizer]\nbase_lr = 0.1\ntypo_key = 2").unwrap_err();
        assert!(err.to_string().contains("typo_key"), "{err}");
    }

    #[test]
    fn cross_field_validation() {
        let mut config = ExperimentConfig::default();
        config.scene.num_classes = 4;
        assert!(config.validate().is_err(), "class mismatch must fail");

        let mut config = ExperimentConfig::default();
        config.scene.image_size = 60; // teacher factor is 8
        assert!(config.validate().is_err());

        let mut config = ExperimentConfig::default();
        config.seeds.clear();
        assert!(config.validate().is_err());
    }

    #[test]
    fn method_parsing() {
        assert_eq!("rdd".parse::<Method>().unwrap(), Method::Rdd);
        assert_eq!("rdd_plus_at".parse::<Method>().unwrap(), Method::RddPlusAt);
        assert!("rddx".parse::<Method>().is_err());
    }
}

//! Detector settings, read from TOML and overridable from the command line.

use std::path::{Path, PathBuf};

use facekp::geometry::FaceTemplate;
use facekp::model::weights::load_weights;
use facekp::model::{BackboneRegistry, ModelConfig, DEFAULT_BACKBONE, INPUT_ALIGN};
use facekp::pipeline::{DecodeConfig, Detector, DEFAULT_MAX_PROPOSALS, DEFAULT_NMS_IOU};
use facekp::scale::DEFAULT_THRESHOLD;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const THREADS_ENV: &str = "FACEKP_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Weight file; without one the network gets seeded random weights.
    pub model: Option<PathBuf>,
    pub backbone: String,
    pub input_long_side: usize,
    pub threshold: f64,
    pub nms_iou: f64,
    pub max_proposals: usize,
    pub num_keypoints: usize,
    /// Ten floats `[x0, y0, ..., x4, y4]` in the unit square.
    pub template: Option<Vec<f64>>,
    pub threads: Option<usize>,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            model: None,
            backbone: DEFAULT_BACKBONE.to_string(),
            input_long_side: 256,
            threshold: DEFAULT_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            max_proposals: DEFAULT_MAX_PROPOSALS,
            num_keypoints: 5,
            template: None,
            threads: None,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn from_toml_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate().map_err(|e| match e {
            CliError::Flag { flag, message } => CliError::Config {
                path: path.to_path_buf(),
                message: format!("{flag}: {message}"),
            },
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let flag = |flag: &'static str, message: String| Err(CliError::Flag { flag, message });
        if self.input_long_side == 0 || !self.input_long_side.is_multiple_of(INPUT_ALIGN) {
            return flag(
                "input_long_side",
                format!("must be a positive multiple of {INPUT_ALIGN}, got {}", self.input_long_side),
            );
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return flag("threshold", format!("must be in (0, 1], got {}", self.threshold));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return flag("nms_iou", format!("must be in [0, 1], got {}", self.nms_iou));
        }
        if self.max_proposals == 0 {
            return flag("max_proposals", "must be >= 1".into());
        }
        if self.threads == Some(0) {
            return flag("threads", "must be >= 1".into());
        }
        if BackboneRegistry::with_builtins().get(&self.backbone).is_err() {
            return flag(
                "backbone",
                format!(
                    "unknown backbone {:?}; available: {}",
                    self.backbone,
                    BackboneRegistry::with_builtins().names().join(", ")
                ),
            );
        }
        if let Err(e) = self.model_config().validate() {
            return flag("num_keypoints", e.to_string());
        }
        if let Err(e) = self.face_template() {
            return flag("template", e.to_string());
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_keypoints: self.num_keypoints,
            input_long_side: self.input_long_side,
            ..ModelConfig::default()
        }
    }

    pub fn face_template(&self) -> facekp::Result<FaceTemplate> {
        match &self.template {
            Some(v) => FaceTemplate::from_flat(v),
            None => Ok(FaceTemplate::default()),
        }
    }

    pub fn decode_config(&self) -> CliResult<DecodeConfig> {
        let cfg = DecodeConfig {
            threshold: self.threshold,
            nms_iou: self.nms_iou,
            max_proposals: self.max_proposals,
            template: self.face_template()?,
            ..DecodeConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds the graph and loads weights (or randomizes them from `seed`).
    pub fn build_detector(&self) -> CliResult<Detector> {
        self.validate()?;
        let graph = BackboneRegistry::with_builtins().build(&self.backbone, &self.model_config())?;
        let graph = match &self.model {
            Some(path) => {
                let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
                load_weights(&graph, &bytes).map_err(|source| CliError::Weights {
                    path: path.clone(),
                    source,
                })?
            }
            None => graph.randomized(self.seed),
        };
        Ok(Detector::new(graph, self.decode_config()?)?)
    }

    /// Explicit setting, then the environment, then 1.
    pub fn thread_count(&self) -> CliResult<usize> {
        if let Some(n) = self.threads {
            return Ok(n);
        }
        match std::env::var(THREADS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(CliError::Flag {
                    flag: THREADS_ENV,
                    message: format!("expected a positive integer, got {v:?}"),
                }),
            },
            Err(_) => Ok(1),
        }
    }
}

/// Commented TOML with every default spelled out.
pub fn config_template() -> String {
    let d = DetectorConfig::default();
    let t = FaceTemplate::default();
    let flat: Vec<String> = t
        .points
        .iter()
        .flat_map(|&(x, y)| [format!("{x:.2}"), format!("{y:.2}")])
        .collect();
    format!(
        "# model = \"weights.kpnw\"\n\
         backbone = \"{}\"\n\
         input_long_side = {}\n\
         threshold = {}\n\
         nms_iou = {}\n\
         max_proposals = {}\n\
         num_keypoints = {}\n\
         # eyes, nose, mouth corners as x, y pairs in the unit square\n\
         template = [{}]\n\
         # threads = 4\n\
         seed = {}\n",
        d.backbone,
        d.input_long_side,
        d.threshold,
        d.nms_iou,
        d.max_proposals,
        d.num_keypoints,
        flat.join(", "),
        d.seed
    )
}

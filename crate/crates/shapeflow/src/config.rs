//! Run configuration shared by the command-line pipeline.
//!
//! One TOML file drives every sub-command; each stage reads its own section
//! and ignores the rest, so a single file can describe a whole
//! generate → train → fit → evaluate run. Omitted sections fall back to the
//! desk-scale defaults, unknown keys anywhere are rejected, and the file is
//! validated up front so a bad value fails the run before any artifact is
//! written.
//!
//! Two global switches rewrite the sections consistently: a run seed that
//! stamps every stage (stages stay decorrelated through their internal seed
//! derivation tags), and the full-scale preset behind the `--paper-scale`
//! flag which swaps each section's scale-sensitive values for the published
//! ones.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusConfig;
use crate::fitting::FittingConfig;
use crate::metrics::EvalParams;
use crate::spaces::{EncoderConfig, PoseConfig, ShapeConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("[{section}] {message}")]
    Invalid {
        section: &'static str,
        message: String,
    },
}

/// Filesystem locations of previously produced artifacts.
///
/// Every sub-command writes new artifacts under its `--out` directory; the
/// entries here name the inputs that later stages load. Each entry can be
/// overridden by the environment variable named in its doc line — the
/// environment overrides paths only, never numeric settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Corpus directory produced by `generate` (`SHAPEFLOW_CORPUS`).
    pub corpus: Option<PathBuf>,
    /// Shape-space checkpoint from `train-shape` (`SHAPEFLOW_SHAPE_SPACE`).
    pub shape_space: Option<PathBuf>,
    /// Pose-space checkpoint from `train-pose` (`SHAPEFLOW_POSE_SPACE`).
    pub pose_space: Option<PathBuf>,
    /// Shape encoder checkpoint from `train-encoders`
    /// (`SHAPEFLOW_SHAPE_ENCODER`).
    pub shape_encoder: Option<PathBuf>,
    /// Pose encoder checkpoint from `train-encoders`
    /// (`SHAPEFLOW_POSE_ENCODER`).
    pub pose_encoder: Option<PathBuf>,
    /// Fit output directory from `fit`, consumed by `reconstruct`,
    /// `transfer`, `interpolate` and `evaluate` (`SHAPEFLOW_FIT`).
    pub fit: Option<PathBuf>,
}

impl Paths {
    /// Replaces entries for which `lookup` returns a value; `lookup`
    /// receives the environment variable name.
    pub fn apply_overrides<F>(&mut self, lookup: F)
    where
        F: Fn(&str) -> Option<PathBuf>,
    {
        let slots: [(&str, &mut Option<PathBuf>); 6] = [
            ("SHAPEFLOW_CORPUS", &mut self.corpus),
            ("SHAPEFLOW_SHAPE_SPACE", &mut self.shape_space),
            ("SHAPEFLOW_POSE_SPACE", &mut self.pose_space),
            ("SHAPEFLOW_SHAPE_ENCODER", &mut self.shape_encoder),
            ("SHAPEFLOW_POSE_ENCODER", &mut self.pose_encoder),
            ("SHAPEFLOW_FIT", &mut self.fit),
        ];
        for (var, slot) in slots {
            if let Some(path) = lookup(var) {
                *slot = Some(path);
            }
        }
    }

    /// Applies overrides from the process environment.
    pub fn apply_env(&mut self) {
        self.apply_overrides(|var| std::env::var_os(var).map(PathBuf::from));
    }
}

/// Everything a pipeline run needs, one section per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run seed. When set it stamps every stage seed below (the stages
    /// decorrelate internally); leave unset to control stage seeds
    /// individually.
    pub seed: Option<u64>,
    pub corpus: CorpusConfig,
    pub shape: ShapeConfig,
    pub pose: PoseConfig,
    pub encoders: EncoderConfig,
    pub fitting: FittingConfig,
    pub evaluation: EvalParams,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            corpus: CorpusConfig::default(),
            shape: ShapeConfig::default(),
            pose: PoseConfig::default(),
            encoders: EncoderConfig::default(),
            fitting: FittingConfig::default(),
            evaluation: EvalParams::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Loads, seeds, env-overrides and validates a config file.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(source),
        })?;
        if let Some(seed) = config.seed {
            config.apply_seed(seed);
        }
        config.paths.apply_env();
        config.validate()?;
        Ok(config)
    }

    /// Parses a config from TOML text without seeding or validation.
    pub fn from_toml(text: &str) -> Result<RunConfig, toml::de::Error> {
        toml::from_str(text)
    }

    /// Serializes the resolved config, e.g. for a run manifest snapshot.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stamps `seed` on the run and every stage.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.shape.seed = seed;
        self.pose.seed = seed;
        self.encoders.seed = seed;
        self.fitting.seed = seed;
        self.evaluation.seed = seed;
    }

    /// The seed `generate` feeds the corpus builder.
    pub fn run_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Replaces every scale-sensitive section with its published full-scale
    /// preset, keeping seeds, paths and the synthetic-corpus settings (the
    /// corpus and evaluation harnesses have no published counterpart).
    pub fn apply_paper_scale(&mut self) {
        self.shape = ShapeConfig::paper_scale(self.shape.seed);
        self.pose = PoseConfig::paper_scale(self.pose.seed);
        self.encoders = EncoderConfig::paper_scale(self.encoders.seed);
        self.fitting = FittingConfig::paper_scale(self.fitting.seed);
    }

    /// Validates every section, attributing failures to their section name.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section: &'static str, message: String| ConfigError::Invalid {
            section,
            message,
        };
        self.corpus
            .validate()
            .map_err(|e| invalid("corpus", e.to_string()))?;
        self.shape
            .validate()
            .map_err(|e| invalid("shape", e.to_string()))?;
        self.pose
            .validate()
            .map_err(|e| invalid("pose", e.to_string()))?;
        self.encoders
            .validate()
            .map_err(|e| invalid("encoders", e.to_string()))?;
        self.fitting
            .validate()
            .map_err(|e| invalid("fitting", e.to_string()))?;
        let eval = &self.evaluation;
        if eval.iou_samples == 0 || eval.chamfer_samples == 0 || eval.epe_samples == 0 {
            return Err(invalid(
                "evaluation",
                "sampling budgets must be positive".into(),
            ));
        }
        if eval.keyframe_stride == 0 {
            return Err(invalid(
                "evaluation",
                "keyframe_stride must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let config = RunConfig::default();
        let text = config.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn partial_sections_fall_back_to_defaults() {
        let config = RunConfig::from_toml(
            "seed = 9\n[shape]\ncode_dim = 8\n[fitting]\niterations = 12\n",
        )
        .unwrap();
        assert_eq!(config.seed, Some(9));
        assert_eq!(config.shape.code_dim, 8);
        assert_eq!(config.shape.hidden_dim, ShapeConfig::default().hidden_dim);
        assert_eq!(config.fitting.iterations, 12);
        assert_eq!(config.pose, PoseConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        assert!(RunConfig::from_toml("mystery = 1\n").is_err());
        assert!(RunConfig::from_toml("[shape]\nmystery = 1\n").is_err());
        assert!(RunConfig::from_toml("[paths]\nmystery = \"x\"\n").is_err());
    }

    #[test]
    fn seed_stamps_every_stage() {
        let mut config = RunConfig::default();
        config.apply_seed(7);
        assert_eq!(config.run_seed(), 7);
        assert_eq!(config.shape.seed, 7);
        assert_eq!(config.pose.seed, 7);
        assert_eq!(config.encoders.seed, 7);
        assert_eq!(config.fitting.seed, 7);
        assert_eq!(config.evaluation.seed, 7);
    }

    #[test]
    fn paper_scale_swaps_published_values_and_keeps_seeds() {
        let mut config = RunConfig::default();
        config.apply_seed(3);
        config.apply_paper_scale();
        assert_eq!(config.shape.code_dim, 256);
        assert_eq!(config.shape.hidden_dim, 512);
        assert_eq!(config.shape.epochs, 4000);
        assert_eq!(config.pose.hidden_dim, 1024);
        assert_eq!(config.encoders.input_res, 256);
        assert_eq!(config.fitting.iterations, 1000);
        assert_eq!(config.fitting.sigma_pose, 1e-4);
        assert_eq!(config.shape.seed, 3);
        assert_eq!(config.fitting.seed, 3);
        config.validate().unwrap();
    }

    #[test]
    fn env_overrides_touch_paths_only() {
        let mut config = RunConfig::default();
        config.paths.corpus = Some(PathBuf::from("from_file"));
        config.paths.apply_overrides(|var| match var {
            "SHAPEFLOW_CORPUS" => Some(PathBuf::from("from_env")),
            "SHAPEFLOW_FIT" => Some(PathBuf::from("fit_env")),
            _ => None,
        });
        assert_eq!(config.paths.corpus.as_deref(), Some(Path::new("from_env")));
        assert_eq!(config.paths.fit.as_deref(), Some(Path::new("fit_env")));
        assert_eq!(config.paths.shape_space, None);
    }

    #[test]
    fn validation_names_the_failing_section() {
        let mut config = RunConfig::default();
        config.pose.sigma = -1.0;
        let err = config.validate().unwrap_err();
        assert!(matches!(
            err,
            ConfigError::Invalid { section: "pose", .. }
        ));
        let mut config = RunConfig::default();
        config.evaluation.keyframe_stride = 0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn load_applies_seed_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 11\n").unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.shape.seed, 11);

        std::fs::write(&path, "[corpus]\nidentities = 0\n").unwrap();
        assert!(matches!(
            RunConfig::load(&path),
            Err(ConfigError::Invalid { section: "corpus", .. })
        ));
        assert!(matches!(
            RunConfig::load(Path::new("/nonexistent/run.toml")),
            Err(ConfigError::Read { .. })
        ));
    }
}

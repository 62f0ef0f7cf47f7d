//! Command-line surface: argument definitions, error-to-exit-code mapping,
//! and the resolved run context shared by every sub-command.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use shapeflow::config::{ConfigError, RunConfig};
use shapeflow::corpus::CorpusError;
use shapeflow::fitting::FittingError;
use shapeflow::geometry::GeometryError;
use shapeflow::math::MathError;
use shapeflow::metrics::MetricsError;
use shapeflow::spaces::SpacesError;
use thiserror::Error;

/// Failures grouped by exit code: configuration errors exit 2, missing
/// inputs exit 3, numerical failures exit 4, anything else 1. Argument
/// parse errors (unknown flags and the like) exit 2 through clap itself.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingInput(e.to_string())
        } else {
            CliError::Other(e.to_string())
        }
    }
}

impl From<MathError> for CliError {
    fn from(e: MathError) -> Self {
        match e {
            MathError::DimensionMismatch { .. } => CliError::Config(e.to_string()),
            MathError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            MathError::Io(io) => io.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::InvalidConfig(_) | CorpusError::InvalidSpec(_) | CorpusError::InvalidPose(_) => {
                CliError::Config(e.to_string())
            }
            CorpusError::Io(io) => io.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<SpacesError> for CliError {
    fn from(e: SpacesError) -> Self {
        match e {
            SpacesError::InvalidConfig(_) | SpacesError::Dimension { .. } => {
                CliError::Config(e.to_string())
            }
            SpacesError::Diverged(_) => CliError::Numerical(e.to_string()),
            SpacesError::Math(m) => m.into(),
            SpacesError::Io(io) => io.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<FittingError> for CliError {
    fn from(e: FittingError) -> Self {
        match e {
            FittingError::InvalidConfig(_) | FittingError::Dimension { .. } => {
                CliError::Config(e.to_string())
            }
            FittingError::EmptySequence => {
                CliError::MissingInput("depth sequence has no frames".into())
            }
            FittingError::EmptyIsosurface => CliError::Numerical(e.to_string()),
            FittingError::Math(m) => m.into(),
            FittingError::Spaces(s) => s.into(),
            FittingError::Corpus(c) => c.into(),
            FittingError::Io(io) => io.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::LengthMismatch { .. }
            | MetricsError::CorrespondenceMismatch { .. }
            | MetricsError::EmptySequence => CliError::Config(e.to_string()),
            MetricsError::EmptyUnion | MetricsError::EmptyMesh(_) => {
                CliError::Numerical(e.to_string())
            }
            MetricsError::Io(io) => io.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "shapeflow",
    version,
    about = "Latent shape/pose models over signed distance fields: corpus \
             generation, training, depth-sequence fitting and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML run configuration; omitted sections use desk-scale defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Directory receiving this run's artifacts and manifest.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Run seed stamped on every pipeline stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Single-threaded, bit-reproducible mode; overrides --threads.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Swap scale-sensitive settings for the published full-scale preset.
    #[arg(long, global = true)]
    pub paper_scale: bool,

    /// Validate the configuration and exit without reading or writing
    /// anything else.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

/// Code initialization for `fit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitMode {
    /// Regress initial codes from the first frame's occupancy grid.
    Encoder,
    /// Start from the train-set average codes.
    Average,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic articulated-capsule corpus.
    Generate,
    /// Train the latent shape space on the corpus canonical meshes.
    TrainShape,
    /// Train the latent pose space on corpus flow correspondences.
    TrainPose,
    /// Train the shape/pose code-initialization encoders.
    TrainEncoders,
    /// Fit a shape code and per-frame pose codes to a depth sequence.
    Fit {
        /// Directory of depth frames (*.bin, sorted); default:
        /// `<paths.corpus>/heldout`.
        #[arg(long, value_name = "DIR")]
        depth: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = InitMode::Encoder)]
        init: InitMode,
    },
    /// Re-extract meshes from fitted codes.
    Reconstruct {
        /// Codes container; default: `<paths.fit>/codes.ckpt`.
        #[arg(long, value_name = "FILE")]
        codes: Option<PathBuf>,
    },
    /// Decode the blend path between two trained shape identities.
    Interpolate {
        /// Source identity index.
        #[arg(long)]
        from: usize,
        /// Target identity index.
        #[arg(long)]
        to: usize,
        /// Decoded steps, endpoints included.
        #[arg(long, default_value_t = 11)]
        steps: usize,
    },
    /// Re-pose one fit's shape with another fit's pose codes.
    Transfer {
        /// Codes container supplying the shape code.
        #[arg(long, value_name = "FILE")]
        shape_codes: PathBuf,
        /// Codes container supplying the per-frame pose codes.
        #[arg(long, value_name = "FILE")]
        pose_codes: PathBuf,
    },
    /// Score predicted frame meshes against held-out ground truth.
    Evaluate {
        /// Directory of predicted meshes (frame*.obj, sorted).
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        /// Directory of ground-truth meshes (gt*.obj, sorted); default:
        /// `<paths.corpus>/heldout`.
        #[arg(long, value_name = "DIR")]
        gt: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::TrainShape => "train-shape",
            Command::TrainPose => "train-pose",
            Command::TrainEncoders => "train-encoders",
            Command::Fit { .. } => "fit",
            Command::Reconstruct { .. } => "reconstruct",
            Command::Interpolate { .. } => "interpolate",
            Command::Transfer { .. } => "transfer",
            Command::Evaluate { .. } => "evaluate",
        }
    }
}

/// Resolved configuration plus the global switches, shared by every
/// sub-command handler.
pub struct RunContext {
    pub config: RunConfig,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
    pub paper_scale: bool,
    pub dry_run: bool,
    pub threads: usize,
}

impl RunContext {
    /// Loads and validates the configuration, applies the global switches
    /// and caps the worker pool. Everything here is exit-code-2 material
    /// except the thread-pool setup.
    pub fn prepare(cli: &Cli) -> Result<RunContext, CliError> {
        let mut config = match &cli.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let mut config = RunConfig::default();
                config.paths.apply_env();
                config
            }
        };
        if let Some(seed) = cli.seed {
            config.apply_seed(seed);
        }
        if cli.paper_scale {
            config.apply_paper_scale();
        }
        config.validate()?;

        let threads = if cli.deterministic {
            1
        } else {
            cli.threads.unwrap_or(0)
        };
        if threads > 0 {
            // A second build_global (e.g. in-process tests) keeps the first
            // pool; that only costs parallel width, never correctness.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global();
        }

        Ok(RunContext {
            config,
            out: cli.out.clone(),
            deterministic: cli.deterministic,
            paper_scale: cli.paper_scale,
            dry_run: cli.dry_run,
            threads,
        })
    }

    /// One stderr line announcing the run; every header carries the
    /// temporal weight so ablations are visible in logs.
    pub fn log_header(&self, command: &str) {
        eprintln!(
            "[{command}] seed={} threads={} deterministic={} paper_scale={} \
             lambda_t={} lambda_icp={}",
            self.config.run_seed(),
            if self.threads == 0 { rayon::current_num_threads() } else { self.threads },
            self.deterministic,
            self.paper_scale,
            self.config.fitting.lambda_temporal,
            self.config.fitting.lambda_icp,
        );
    }

    /// The output directory, created on first use.
    pub fn out_dir(&self) -> Result<&Path, CliError> {
        let out = self
            .out
            .as_deref()
            .ok_or_else(|| CliError::Config("--out is required for this command".into()))?;
        std::fs::create_dir_all(out).map_err(|e| CliError::Other(e.to_string()))?;
        Ok(out)
    }

    /// A configured path entry, by name; unset entries are configuration
    /// errors (exit 2), unlike configured-but-absent files (exit 3).
    pub fn config_path(
        &self,
        entry: Option<&Path>,
        name: &str,
        env_var: &str,
    ) -> Result<PathBuf, CliError> {
        entry.map(Path::to_path_buf).ok_or_else(|| {
            CliError::Config(format!(
                "paths.{name} is not set; add it to the [paths] config section \
                 or set {env_var}"
            ))
        })
    }
}

/// Checks that a run input exists before anything is written.
pub fn require_exists(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(format!(
            "{what} not found at {}",
            path.display()
        )))
    }
}

//! Command-line front end: `synth`, `train`, `predict`, `eval`, `inspect`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data fault
//! (unreadable or malformed input, mismatched checkpoint), 3 numeric fault.

mod commands;
mod config;
mod output;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{
    cmd_eval, cmd_inspect, cmd_predict, cmd_synth, cmd_train, load_data, TrainSummary,
};
pub use config::{
    DataPaths, ModelLayer, PathsLayer, RunConfig, RunConfigFile, TogglesLayer, TrainingLayer,
    DEFAULT_AVERAGE_K, DEFAULT_OUT_DIR, FOLDS, TOGGLE_NAMES,
};
pub use output::write_predictions;

use crate::error::Error;

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "ROADCAST_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Run(Error::Config(_)) => 1,
            CliError::Run(Error::Numeric { .. }) => 3,
            CliError::Run(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "roadcast",
    version,
    about = "Traffic forecasting from sparse road counters"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic city: graph, frames and dataset manifest.
    Synth(SynthArgs),
    /// Train one model or a 5-fold ensemble.
    Train(TrainArgs),
    /// Write per-edge class probabilities or per-super-segment speeds.
    Predict(PredictArgs),
    /// Score checkpoints on labeled frames.
    Eval(EvalArgs),
    /// Print graph, dataset or checkpoint statistics.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct OutDirArg {
    /// Output directory [env: ROADCAST_OUT_DIR, default: roadcast-out].
    #[arg(long, env = OUT_DIR_ENV, hide_env = true)]
    pub out_dir: Option<PathBuf>,
}

impl OutDirArg {
    pub fn resolve(&self) -> PathBuf {
        self.out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Dataset manifest naming the graph and frames files.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Graph file; overrides the manifest's.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Frames file; overrides the manifest's.
    #[arg(long)]
    pub frames: Option<PathBuf>,
}

impl DataArgs {
    pub fn paths(&self) -> DataPaths {
        DataPaths {
            manifest: self.manifest.clone(),
            graph: self.graph.clone(),
            frames: self.frames.clone(),
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    pub nodes: usize,
    #[arg(long, default_value_t = 120)]
    pub edges: usize,
    #[arg(long, default_value_t = 10)]
    pub supersegments: usize,
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    /// Fraction of nodes without counters.
    #[arg(long, default_value_t = 0.5)]
    pub missing: f64,
    /// Draw a fresh missing set per frame.
    #[arg(long)]
    pub resample_mask: bool,
    /// Mask single cells instead of whole nodes.
    #[arg(long)]
    pub per_cell_missing: bool,
    /// Fraction of edges left unlabeled per frame.
    #[arg(long, default_value_t = 0.0)]
    pub unlabeled: f64,
    #[arg(long, env = "ROADCAST_SEED", hide_env = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "synthetic")]
    pub city: String,
    #[command(flatten)]
    pub out: OutDirArg,
}

/// Flags layered over the `--config` file; unset flags leave file values
/// (or defaults) in place.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long, short = 'c', env = "ROADCAST_CONFIG", hide_env = true)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = ["congestion", "speed"])]
    pub task: Option<String>,
    #[arg(long, env = "ROADCAST_SEED", hide_env = true)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Frames scored by the fold ensemble after 5-fold training.
    #[arg(long)]
    pub test_frames: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutDirArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Embedding and GAT width.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub tvae_hidden: Option<usize>,
    #[arg(long)]
    pub tvae_latent: Option<usize>,
    /// Head hidden widths.
    #[arg(long, num_args = 2, value_names = ["H1", "H2"])]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_parser = ["transposed", "per_node"])]
    pub layout: Option<String>,
    #[arg(long)]
    pub average_k: Option<usize>,
    /// Toggles to switch on, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub enable: Vec<String>,
    /// Toggles to switch off, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub disable: Vec<String>,
}

impl TrainArgs {
    /// The flag layer alone.
    pub fn layer(&self) -> Result<RunConfigFile, CliError> {
        let mut l = RunConfigFile {
            task: self.task.clone(),
            seed: self.seed,
            ..RunConfigFile::default()
        };
        l.paths = PathsLayer {
            manifest: self.data.manifest.clone(),
            graph: self.data.graph.clone(),
            frames: self.data.frames.clone(),
            test_frames: self.test_frames.clone(),
            output_dir: self.out.out_dir.clone(),
        };
        l.model = ModelLayer {
            dim: self.dim,
            heads: self.heads,
            tvae_hidden: self.tvae_hidden,
            tvae_latent: self.tvae_latent,
            hidden: self.hidden.as_ref().map(|h| [h[0], h[1]]),
            beta: self.beta,
            layout: self.layout.clone(),
        };
        l.training = TrainingLayer {
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            val_fraction: self.val_fraction,
            class_weights: None,
        };
        l.toggles.average_k = self.average_k;
        if let Some(both) = self.enable.iter().find(|t| self.disable.contains(t)) {
            return Err(CliError::Usage(format!(
                "toggle `{both}` both enabled and disabled"
            )));
        }
        for t in &self.enable {
            l.toggles.set(t, true)?;
        }
        for t in &self.disable {
            l.toggles.set(t, false)?;
        }
        Ok(l)
    }

    /// Defaults, then the config file, then environment and flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let file = match &self.config {
            Some(p) => RunConfigFile::load(p)?,
            None => RunConfigFile::default(),
        };
        RunConfig::resolve(&file.merged(&self.layer()?))
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WeightingArg {
    /// Weights proportional to 1/score.
    #[default]
    Inverse,
    /// Weights proportional to exp(-score/temperature).
    Softmax,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelsArgs {
    /// Checkpoint file; repeat for several. Without --ensemble they are
    /// averaged with equal weights.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Weight members by their validation scores (lower is better).
    #[arg(long, requires = "scores")]
    pub ensemble: bool,
    /// One validation score per checkpoint, comma separated.
    #[arg(long, value_delimiter = ',', requires = "ensemble")]
    pub scores: Vec<f64>,
    #[arg(long, value_enum, default_value_t = WeightingArg::Inverse)]
    pub weighting: WeightingArg,
    /// Softmax temperature.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[command(flatten)]
    pub out: OutDirArg,
}

#[derive(Args, Debug, Clone, Default)]
pub struct PredictArgs {
    #[command(flatten)]
    pub models: ModelsArgs,
    /// Predictions file [default: <out-dir>/predictions.txt].
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalArgs {
    #[command(flatten)]
    pub models: ModelsArgs,
}

#[derive(Args, Debug, Clone, Default)]
pub struct InspectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutDirArg,
}

/// Runs a parsed command and returns what it prints.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => Ok(cmd_train(&a.resolve()?)?.report()),
        Command::Predict(a) => cmd_predict(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_entry<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Run(Error::Config("x".into())).exit_code(), 1);
        assert_eq!(CliError::Run(Error::Invalid("x".into())).exit_code(), 2);
        let numeric = Error::Numeric {
            location: "loss".into(),
            detail: "nan".into(),
        };
        assert_eq!(CliError::Run(numeric).exit_code(), 3);
    }

    #[test]
    fn toggle_flags() {
        let cli = Cli::try_parse_from([
            "roadcast",
            "train",
            "--enable",
            "five_folds,average",
            "--disable",
            "noise",
            "--epochs",
            "12",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else {
            panic!()
        };
        let c = RunConfig::resolve(&a.layer().unwrap()).unwrap();
        assert!(
            c.five_folds && c.train.average_k == Some(DEFAULT_AVERAGE_K) && !c.model.toggles.noise
        );
        let cli = Cli::try_parse_from([
            "roadcast",
            "train",
            "--enable",
            "noise",
            "--disable",
            "noise",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else {
            panic!()
        };
        assert!(a.layer().is_err());
    }

    #[test]
    fn scores_require_ensemble() {
        assert!(
            Cli::try_parse_from(["roadcast", "predict", "--checkpoint", "a", "--scores", "1"])
                .is_err()
        );
        assert!(
            Cli::try_parse_from(["roadcast", "predict", "--checkpoint", "a", "--ensemble"])
                .is_err()
        );
        assert!(Cli::try_parse_from([
            "roadcast",
            "eval",
            "--checkpoint",
            "a",
            "--ensemble",
            "--scores",
            "1"
        ])
        .is_ok());
    }
}

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ptqkit::PtqError;

#[derive(Parser, Debug)]
#[command(name = "ptqkit", version, about = "Post-training quantization simulation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone, Serialize)]
pub struct Common {
    /// Activation bit-width.
    #[arg(long, default_value_t = 8)]
    pub bits_a: u32,
    /// Weight bit-width.
    #[arg(long, default_value_t = 8)]
    pub bits_w: u32,
    /// Lower activation percentile.
    #[arg(long, default_value_t = ptqkit::quantcore::DEFAULT_PCT_LO)]
    pub pct_lo: f64,
    /// Upper activation percentile.
    #[arg(long, default_value_t = ptqkit::quantcore::DEFAULT_PCT_HI)]
    pub pct_hi: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Primary output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Where a layer's activations (and weights) come from.
#[derive(Args, Debug, Clone, Serialize)]
pub struct LayerInput {
    /// Activation tensor, `[rows x n]` or `[S x T x n]`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Weight tensor `[n x m]`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Generate activations and weights from a synthetic preset instead.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingMode {
    None,
    Smoothquant,
    Gps,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMode {
    Tensor,
    PerPosition,
    SinkSplit,
    Dynamic,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibMethod {
    Minmax,
    Percentile,
    Mse,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxisArg {
    Tensor,
    Token,
    OutChannel,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReduceArg {
    Mean,
    MeanStd,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic activations (and optionally the matching weight).
    Gen {
        #[arg(long)]
        preset: String,
        /// Also write the preset's weight tensor here.
        #[arg(long)]
        weights_out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Calibrate quantization parameters for a tensor.
    Calib {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = AxisArg::Tensor)]
        axis: AxisArg,
        #[arg(long, value_enum, default_value_t = CalibMethod::Percentile)]
        method: CalibMethod,
        #[command(flatten)]
        common: Common,
    },
    /// Solve per-channel scaling factors.
    Gps {
        #[command(flatten)]
        layer: LayerInput,
        #[arg(long, value_enum, default_value_t = ScalingMode::Gps)]
        scaling: ScalingMode,
        /// Migration strength for SmoothQuant.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate a fake-quantized linear layer and report output MSE.
    QuantSim {
        #[command(flatten)]
        layer: LayerInput,
        #[arg(long, value_enum, default_value_t = ScalingMode::None)]
        scaling: ScalingMode,
        /// Precomputed scaling vector; overrides the solver.
        #[arg(long)]
        scales: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = TokenMode::Tensor)]
        token_mode: TokenMode,
        #[command(flatten)]
        common: Common,
    },
    /// Build a static token-wise quantization plan.
    Stwq {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = TokenMode::PerPosition)]
        token_mode: TokenMode,
        #[arg(long, value_enum, default_value_t = CalibMethod::Percentile)]
        method: CalibMethod,
        #[arg(long, default_value = "layer0")]
        layer: String,
        #[arg(long, default_value_t = ptqkit::stwq::DEFAULT_SINK_THRESHOLD)]
        sink_threshold: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Select calibration samples by distributional entropy.
    DgcSelect {
        /// `[N x d]` features or `[S x T x n]` activations.
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = ptqkit::dgc::DEFAULT_FRACTION)]
        fraction: f64,
        #[arg(long, value_enum, default_value_t = ReduceArg::Mean)]
        reduce: ReduceArg,
        #[arg(long, default_value_t = ptqkit::dgc::DEFAULT_RIDGE_SCALE)]
        ridge_scale: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Loss decomposition, range remark and approximation-bias report.
    Analyze {
        #[command(flatten)]
        layer: LayerInput,
        #[arg(long, value_enum, default_value_t = ScalingMode::Gps)]
        scaling: ScalingMode,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value = "layer0")]
        layer_name: String,
        /// JSON report path; defaults to the CSV path with a `.json` extension.
        #[arg(long)]
        json_out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Random perturbations around the solved scaling factors.
    Perturb {
        #[command(flatten)]
        layer: LayerInput,
        #[arg(long, value_enum, default_value_t = ScalingMode::Gps)]
        scaling: ScalingMode,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0.3)]
        amplitude: f64,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Gen { common, .. }
            | Command::Calib { common, .. }
            | Command::Gps { common, .. }
            | Command::QuantSim { common, .. }
            | Command::Stwq { common, .. }
            | Command::DgcSelect { common, .. }
            | Command::Analyze { common, .. }
            | Command::Perturb { common, .. } => common,
        }
    }
}

fn fail(category: &str, message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error[{category}]: {message}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PTQKIT_LOG", "error")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{}", e.render());
            return fail("config", "invalid command line");
        }
    };

    if let Some(n) = cli.command.common().threads {
        if n == 0 {
            return fail("config", "--threads must be >= 1");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail("config", e);
        }
    }

    match commands::run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.category().as_str(), &e),
    }
}

pub(crate) type CmdResult = std::result::Result<serde_json::Value, PtqError>;

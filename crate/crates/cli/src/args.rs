use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crlb_core::Activation;

/// Generalization lower bounds for linear regression and two-layer networks.
///
/// Model parameters come from built-in defaults, then `--config`, then
/// flags. Config files hold `key = value` lines with keys d, n1, m,
/// sigma_x2, sigma_eps2, alpha, alpha2, activation and seed.
#[derive(Debug, Parser)]
#[command(name = "crlb", version)]
pub struct Cli {
    /// Config file with model parameters
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Base seed [default: 42, or `seed` from the config file]
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads [default: all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Emit JSON instead of text/CSV
    #[arg(long, global = true)]
    pub json: bool,

    /// Write results to FILE instead of standard output
    #[arg(long, global = true, value_name = "FILE")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Gaussian constants eta0, theta11, eta1 of an activation
    Constants(ModelArgs),
    /// Evaluate a lower bound
    #[command(subcommand)]
    Bound(BoundCmd),
    /// Bounds (and optionally SGD) over a parameter grid, as CSV
    Sweep(SweepArgs),
    /// Teacher-student SGD experiment
    Sgd(SgdArgs),
    /// Monte Carlo Fisher spectrum and numerical rank of a two-layer network
    FisherRank(FisherArgs),
    /// Numerical checks of the random-matrix approximations
    #[command(subcommand)]
    Verify(VerifyCmd),
    /// Marchenko-Pastur law
    #[command(subcommand)]
    Mp(MpCmd),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Input dimension [default: 50]
    #[arg(long)]
    pub d: Option<usize>,
    /// Hidden width [default: 50]
    #[arg(long)]
    pub n1: Option<usize>,
    /// Training samples [default: 50]
    #[arg(long)]
    pub m: Option<usize>,
    /// Input variance [default: 1]
    #[arg(long)]
    pub sigma_x2: Option<f64>,
    /// Label noise variance [default: 0.1]
    #[arg(long)]
    pub sigma_eps2: Option<f64>,
    /// Prior precision of the first layer [default: 1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Prior precision of the second layer [default: 1]
    #[arg(long)]
    pub alpha2: Option<f64>,
    /// Set sigma_eps2 from a signal-to-noise ratio in dB (overrides --sigma-eps2)
    #[arg(long, allow_hyphen_values = true)]
    pub snr_db: Option<f64>,
    /// Activation [default: tanh]
    #[arg(long, value_parser = parse_activation)]
    pub activation: Option<Activation>,
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    s.parse().map_err(|e: crlb_core::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum BoundCmd {
    /// sigma_eps2 * rank / m for an unbiased estimator
    Unbiased {
        #[command(flatten)]
        model: ModelArgs,
        /// Which Fisher rank to use
        #[arg(long, value_enum, default_value_t = RankArg::NonlinearTwoLayer)]
        rank_model: RankArg,
    },
    /// Bound for any estimator in linear regression
    Linear {
        #[command(flatten)]
        model: ModelArgs,
        /// Also report the ridge error at this penalty
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// max(B1, B2) for the two-layer network
    TwoLayer {
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RankArg {
    LinearRegression,
    LinearTwoLayer,
    NonlinearTwoLayer,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SweepArg {
    Snr,
    Gamma0,
    Beta1,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Swept parameter
    #[arg(value_enum)]
    pub kind: SweepArg,
    #[arg(long)]
    pub from: f64,
    #[arg(long)]
    pub to: f64,
    #[arg(long, default_value_t = 9)]
    pub points: usize,
    /// Also run SGD at every grid point
    #[arg(long)]
    pub sgd: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Learning rate is lr_c/m [default: 0.5 for sigmoid, 0.03 otherwise]
    #[arg(long)]
    pub lr_c: Option<f64>,
    /// Teachers per experiment
    #[arg(long, default_value_t = 10)]
    pub n_theta: usize,
    /// Training sets per teacher
    #[arg(long, default_value_t = 10)]
    pub n_datasets: usize,
    /// Test points per teacher
    #[arg(long, default_value_t = 2000)]
    pub n_test: usize,
}

#[derive(Debug, Args)]
pub struct SgdArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct FisherArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Monte Carlo samples [default: 20 * parameter count]
    #[arg(long)]
    pub n_mc: Option<usize>,
    /// Relative eigenvalue threshold for the rank
    #[arg(long, default_value_t = 1e-6)]
    pub threshold: f64,
    /// Print the full spectrum as CSV (index,eigenvalue)
    #[arg(long)]
    pub spectrum: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Projection,
    LeastSquares,
}

#[derive(Debug, Clone, Args)]
pub struct EstimatorArgs {
    /// Use Monte Carlo with this many samples instead of quadrature
    #[arg(long, value_name = "SAMPLES")]
    pub mc: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum VerifyCmd {
    /// Population kernel against its approximation, over growing d
    Sigma {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_value = "100,200,400")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Projection)]
        mode: ModeArg,
        #[command(flatten)]
        estimator: EstimatorArgs,
    },
    /// Q and I replacement errors over growing d
    Replacements {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_value = "20,40")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[command(flatten)]
        estimator: EstimatorArgs,
    },
    /// Residual of the first-order bivariate Gaussian expansion
    Expansion {
        #[arg(long, value_parser = parse_activation, default_value = "tanh")]
        f1: Activation,
        #[arg(long, value_parser = parse_activation, default_value = "tanh")]
        f2: Activation,
        #[arg(long, default_value_t = 1.0)]
        v1: f64,
        #[arg(long, default_value_t = 1.0)]
        v2: f64,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
        eps: Vec<f64>,
        #[command(flatten)]
        estimator: EstimatorArgs,
    },
    /// Residual of the A_R decomposition at one size
    Ar {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        estimator: EstimatorArgs,
    },
    /// Solve the Stieltjes fixed point on the imaginary axis
    Stieltjes {
        #[command(flatten)]
        model: ModelArgs,
        /// Points iu on the imaginary axis [default: the bound's u]
        #[arg(long, value_delimiter = ',')]
        u: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum IntegrandArg {
    /// 1
    One,
    /// s
    S,
    /// s^2
    S2,
    /// 1/(s + shift)
    Resolvent,
    /// ln(s + shift)
    Log,
}

#[derive(Debug, Subcommand)]
pub enum MpCmd {
    /// Density on a grid over the support, as CSV
    Density {
        #[arg(long)]
        gamma: f64,
        #[arg(long, default_value_t = 101)]
        points: usize,
    },
    /// Integral of a test function against the law
    Integrate {
        #[arg(long)]
        gamma: f64,
        #[arg(long, value_enum, default_value_t = IntegrandArg::One)]
        integrand: IntegrandArg,
        #[arg(long, default_value_t = 1.0)]
        shift: f64,
    },
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "recourse-kit", version, about = "Checks, restoration and optimality certificates for multistage problems on scenario trees")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Problem instance (JSON).
    #[arg(long, global = true)]
    pub instance: Option<PathBuf>,

    /// Candidate policy (JSON); overrides the policy stored in the instance.
    #[arg(long, global = true)]
    pub policy: Option<PathBuf>,

    /// Multiplier certificate (JSON); overrides the one stored in the instance.
    #[arg(long, global = true)]
    pub certificate: Option<PathBuf>,

    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Acceptance tolerance of the command's main check.
    #[arg(long, global = true)]
    pub tol: Option<f64>,

    /// Write the report (or the generated instance for `gen`) here.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: u32,

    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random instance around a known feasible policy.
    Gen(GenArgs),
    /// Finite-difference check of the operator derivative.
    CheckJacobian {
        /// Number of random directions.
        #[arg(long, default_value_t = 20)]
        directions: usize,
        /// Difference steps; the verdict uses the smallest.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1e-3, 1e-4, 1e-5])]
        steps: Vec<f64>,
    },
    /// Pairing identity between the derivative and its adjoint.
    CheckAdjoint {
        /// Random (x, h, ψ) triples per layout.
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
    /// Restore the candidate policy to feasibility and check the error bound.
    Restore,
    /// Audit the declared node recourse constant on sampled node problems.
    #[command(name = "estimate-C", alias = "estimate-c")]
    EstimateC {
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Half-width of the sampled history and target boxes.
        #[arg(long, default_value_t = 3.0)]
        radius: f64,
    },
    /// Check a multiplier certificate at the candidate policy.
    VerifyKkt,
    /// Solve the instance and attach a recovered builtin certificate.
    Solve(SolveArgs),
    /// Run both optimality systems at one point and cross-check the reduction.
    Compare {
        /// Solve by brute force first instead of using the stored policy.
        #[arg(long)]
        solve: bool,
    },
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Generator spec (JSON); the flags below are ignored when given.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub stages: usize,
    /// `stages - 1` comma-separated branching factors.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2, 2])]
    pub branching: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    #[arg(long, value_enum, default_value_t = OperatorArg::Affine)]
    pub operator: OperatorArg,
    #[arg(long, value_enum, default_value_t = SetsArg::Box)]
    pub sets: SetsArg,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Quadratic)]
    pub objective: ObjectiveArg,
    /// CVaR level for `--objective cvar`.
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    /// Drop the interior-slack construction that guarantees recourse.
    #[arg(long)]
    pub no_recourse: bool,
    #[arg(long)]
    pub random_probabilities: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OperatorArg {
    Affine,
    Smooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SetsArg {
    Box,
    Polyhedron,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Quadratic,
    Softplus,
    Cvar,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long, value_enum, default_value_t = Method::BruteForce)]
    pub method: Method,
    /// Penalty weight for `--method penalty`.
    #[arg(long, default_value_t = 10.0)]
    pub k: f64,
    /// Subgradient steps for `--method penalty`.
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Write the instance with the solution and its certificate here.
    #[arg(long)]
    pub save: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    BruteForce,
    Penalty,
}

impl Cli {
    /// `gen` writes the instance itself to `--out` (or stdout).
    pub fn command_writes_out(&self) -> bool {
        matches!(self.command, Command::Gen(_))
    }
}

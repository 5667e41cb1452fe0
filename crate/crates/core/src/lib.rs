//! Nonlinear multistage stochastic optimization on finite scenario trees.
//!
//! The crate evaluates causal operators, restores feasibility through
//! stage-wise recourse, computes Clarke subgradients of the distance
//! penalty, and checks or recovers multipliers for the optimality systems
//! with built-in and with explicit nonanticipativity.

pub mod adapted;
pub mod causal;
pub mod error;
pub mod generate;
pub mod io;
pub mod objective;
pub mod optimality;
pub mod penalty;
pub mod problem;
pub mod qp;
pub mod recourse;
pub mod sets;
pub mod tree;

pub use adapted::{AdaptedVector, Mode, PNorm};
pub use causal::{CausalOperator, Nonlinearity, OperatorSpec, StageMap};
pub use error::{Error, Result};
pub use generate::{generate, GeneratedInstance, GeneratorSpec};
pub use io::{LoadedInstance, ProblemInstanceFile};
pub use objective::{Extension, Objective, ObjectiveKind, StageCost};
pub use optimality::{CertificateMode, KktReport, KktTolerances, MultiplierCertificate};
pub use problem::Problem;
pub use recourse::{RecourseInstance, RecourseReport};
pub use sets::{ConvexSet, DecomposableFamily, Sign};
pub use tree::{NodeSpec, ScenarioTree, TreeSpec};

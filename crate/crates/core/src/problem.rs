//! The full problem datum: constraints, objective and declared constants.

use crate::adapted::{AdaptedVector, PNorm};
use crate::causal::CausalOperator;
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::recourse::RecourseInstance;
use crate::sets::DecomposableFamily;
use crate::tree::ScenarioTree;

/// `min φ(x)` subject to `F_t(x_{1:t}) ∈ Y_t`, `x_t ∈ X_t`.
#[derive(Debug, Clone)]
pub struct Problem {
    pub constraints: RecourseInstance,
    pub objective: Objective,
    /// Declared Lipschitz constant of `φ`.
    pub l_phi: f64,
}

impl Problem {
    pub fn new(constraints: RecourseInstance, objective: Objective, l_phi: f64) -> Result<Self> {
        if !(l_phi > 0.0) || !l_phi.is_finite() {
            return Err(Error::InvalidArgument(format!("L_phi must be positive, got {l_phi}")));
        }
        Ok(Self {
            constraints,
            objective,
            l_phi,
        })
    }

    pub fn tree(&self) -> &ScenarioTree {
        &self.constraints.tree
    }

    pub fn operator(&self) -> &CausalOperator {
        &self.constraints.operator
    }

    pub fn x_family(&self) -> &DecomposableFamily {
        &self.constraints.x_family
    }

    pub fn y_family(&self) -> &DecomposableFamily {
        &self.constraints.y_family
    }

    pub fn p(&self) -> PNorm {
        self.constraints.p
    }

    /// Decision dimension per node.
    pub fn n(&self) -> usize {
        self.constraints.operator.n()
    }

    /// `Σ_t n · #nodes_t`.
    pub fn total_dimension(&self) -> usize {
        self.n() * self.tree().num_nodes()
    }

    pub fn value(&self, x: &AdaptedVector) -> Result<f64> {
        self.objective.value(self.tree(), x)
    }
}

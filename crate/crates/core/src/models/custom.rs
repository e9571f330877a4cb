//! Small named systems, addressable from configuration as `custom = "<name>"`.
//!
//! These exist for validation and demonstrations: a linear two-species
//! transfer chain, a system with frozen dynamics, and a model whose
//! production matrix deliberately violates the zero-diagonal assumption.

use crate::linalg::SquareMatrix;
use crate::model::{ControlBox, CpdsModel, StateVector};

/// Linear transfer `y₁ → y₂` with rate `(1 − a)·y₁`, `a ∈ [0, 1]`, and zero
/// costs. At `a = 0` the policies are all ones.
#[derive(Debug, Clone)]
pub struct TwoSpeciesChain {
    controls: ControlBox,
}

impl Default for TwoSpeciesChain {
    fn default() -> Self {
        TwoSpeciesChain {
            controls: ControlBox::interval(0.0, 1.0).expect("valid interval"),
        }
    }
}

impl CpdsModel for TwoSpeciesChain {
    fn name(&self) -> &str {
        "two-species-chain"
    }

    fn dimension(&self) -> usize {
        2
    }

    fn control_box(&self) -> &ControlBox {
        &self.controls
    }

    fn time_horizon(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn initial_state(&self) -> StateVector {
        StateVector::new(vec![1.0, 0.0]).expect("valid state")
    }

    fn production(&self, x: &[f64], out: &mut SquareMatrix) {
        out.reset(2);
        out[(1, 0)] = x[0];
    }

    fn destruction(&self, x: &[f64], out: &mut SquareMatrix) {
        out.reset(2);
        out[(0, 1)] = x[0];
    }

    fn policy_production(&self, a: &[f64], out: &mut SquareMatrix) {
        *out = SquareMatrix::filled(2, 1.0);
        out[(1, 0)] = 1.0 - a[0];
    }

    fn policy_destruction(&self, a: &[f64], out: &mut SquareMatrix) {
        *out = SquareMatrix::filled(2, 1.0);
        out[(0, 1)] = 1.0 - a[0];
    }

    fn running_cost(&self, _x: &[f64], _a: &[f64], _t: f64) -> f64 {
        0.0
    }

    fn final_cost(&self, _x: &[f64]) -> f64 {
        0.0
    }
}

/// `P = D = 0`; constant running cost and a linear final cost `eᵀx`.
#[derive(Debug, Clone)]
pub struct FrozenDynamics {
    pub dim: usize,
    pub running: f64,
    controls: ControlBox,
}

impl FrozenDynamics {
    pub fn new(dim: usize, running: f64) -> Self {
        FrozenDynamics {
            dim,
            running,
            controls: ControlBox::interval(0.0, 1.0).expect("valid interval"),
        }
    }
}

impl Default for FrozenDynamics {
    fn default() -> Self {
        Self::new(2, 1.0)
    }
}

impl CpdsModel for FrozenDynamics {
    fn name(&self) -> &str {
        "frozen"
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn control_box(&self) -> &ControlBox {
        &self.controls
    }

    fn time_horizon(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn initial_state(&self) -> StateVector {
        StateVector::new(vec![1.0 / self.dim as f64; self.dim]).expect("valid state")
    }

    fn production(&self, _x: &[f64], out: &mut SquareMatrix) {
        out.reset(self.dim);
    }

    fn destruction(&self, _x: &[f64], out: &mut SquareMatrix) {
        out.reset(self.dim);
    }

    fn policy_production(&self, _a: &[f64], out: &mut SquareMatrix) {
        *out = SquareMatrix::filled(self.dim, 1.0);
    }

    fn policy_destruction(&self, _a: &[f64], out: &mut SquareMatrix) {
        *out = SquareMatrix::filled(self.dim, 1.0);
    }

    fn running_cost(&self, _x: &[f64], _a: &[f64], _t: f64) -> f64 {
        self.running
    }

    fn final_cost(&self, x: &[f64]) -> f64 {
        x.iter().sum()
    }
}

/// The two-species chain with `P_11 = 1` added: fails the zero-diagonal check.
#[derive(Debug, Clone, Default)]
pub struct DiagonalDefect {
    inner: TwoSpeciesChain,
}

impl CpdsModel for DiagonalDefect {
    fn name(&self) -> &str {
        "diagonal-defect"
    }

    fn dimension(&self) -> usize {
        2
    }

    fn control_box(&self) -> &ControlBox {
        self.inner.control_box()
    }

    fn time_horizon(&self) -> (f64, f64) {
        self.inner.time_horizon()
    }

    fn initial_state(&self) -> StateVector {
        self.inner.initial_state()
    }

    fn production(&self, x: &[f64], out: &mut SquareMatrix) {
        self.inner.production(x, out);
        out[(0, 0)] = 1.0;
    }

    fn destruction(&self, x: &[f64], out: &mut SquareMatrix) {
        self.inner.destruction(x, out);
        out[(0, 0)] = 1.0;
    }

    fn policy_production(&self, a: &[f64], out: &mut SquareMatrix) {
        self.inner.policy_production(a, out)
    }

    fn policy_destruction(&self, a: &[f64], out: &mut SquareMatrix) {
        self.inner.policy_destruction(a, out)
    }

    fn running_cost(&self, x: &[f64], a: &[f64], t: f64) -> f64 {
        self.inner.running_cost(x, a, t)
    }

    fn final_cost(&self, x: &[f64]) -> f64 {
        self.inner.final_cost(x)
    }
}

pub const NAMES: [&str; 3] = ["two-species-chain", "frozen", "diagonal-defect"];

pub fn by_name(name: &str) -> Option<Box<dyn CpdsModel>> {
    match name {
        "two-species-chain" => Some(Box::new(TwoSpeciesChain::default())),
        "frozen" => Some(Box::new(FrozenDynamics::default())),
        "diagonal-defect" => Some(Box::new(DiagonalDefect::default())),
        _ => None,
    }
}

pub fn all() -> Vec<Box<dyn CpdsModel>> {
    NAMES.iter().filter_map(|n| by_name(n)).collect()
}

//! One-step integrators for tracing characteristic feet.
//!
//! The Modified Patankar-Euler (MPE) step solves
//!
//! ```text
//! (I − Δt M(x, a)) y = x,
//! M(x, a) = (P(x) ⊙ 𝒫(a) − Diag((D(x) ⊙ 𝒟(a)) e)) Diag(1/x)
//! ```
//!
//! which is linearly implicit, unconditionally positive and, for policies
//! satisfying the trace condition, conservative for any `Δt > 0`. Explicit
//! Euler, `y = x + Δt F(x, a)`, is the classical baseline and may leave the
//! positive orthant.
//!
//! `Diag(1/x)` is undefined where `x_j = 0`. Under `P = Dᵀ` and the
//! zero-column assumption every numerator of column j vanishes there too, so
//! the column is set to zero whenever `x_j ≤` [`ZERO_STATE`].
//!
//! Higher-order Patankar schemes would slot in as further [`Integrator`]
//! variants sharing [`NodeRates`] and [`ControlPolicies`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_in_place, SingularMatrix, SquareMatrix, MAX_DIM};
use crate::model::{rhs_into, ControlPoint, CpdsModel, StateVector};

/// Components at or below this are treated as exactly zero.
pub const ZERO_STATE: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    /// Modified Patankar-Euler: the MPSL scheme.
    #[default]
    Mpe,
    /// Explicit Euler: the classical semi-Lagrangian scheme.
    Euler,
}

impl Integrator {
    pub fn as_str(self) -> &'static str {
        match self {
            Integrator::Mpe => "mpe",
            Integrator::Euler => "euler",
        }
    }

    /// Name of the value-function scheme this integrator induces.
    pub fn scheme_name(self) -> &'static str {
        match self {
            Integrator::Mpe => "MPSL",
            Integrator::Euler => "SL",
        }
    }
}

impl fmt::Display for Integrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Integrator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mpe" => Ok(Integrator::Mpe),
            "euler" => Ok(Integrator::Euler),
            other => Err(Error::Config(format!(
                "unknown integrator {other:?} (expected mpe or euler)"
            ))),
        }
    }
}

/// `M(x, a)` of the MPE step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatankarMatrix(SquareMatrix);

impl PatankarMatrix {
    pub fn matrix(&self) -> &SquareMatrix {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.0.column_sums()[..self.dim()].to_vec()
    }
}

impl std::ops::Index<(usize, usize)> for PatankarMatrix {
    type Output = f64;
    fn index(&self, ij: (usize, usize)) -> &f64 {
        &self.0[ij]
    }
}

/// Production and destruction matrices evaluated at one state, with the
/// reciprocal state used by the Patankar weights.
#[derive(Debug, Clone, Copy)]
pub struct NodeRates {
    pub prod: SquareMatrix,
    pub destr: SquareMatrix,
    x: [f64; MAX_DIM],
    inv_x: [f64; MAX_DIM],
}

impl NodeRates {
    pub fn new(n: usize) -> Self {
        NodeRates {
            prod: SquareMatrix::zeros(n),
            destr: SquareMatrix::zeros(n),
            x: [0.0; MAX_DIM],
            inv_x: [0.0; MAX_DIM],
        }
    }

    /// Evaluates the rates at `x` (unchecked).
    #[inline]
    pub fn evaluate(&mut self, model: &dyn CpdsModel, x: &[f64]) {
        let n = x.len();
        model.production(x, &mut self.prod);
        model.destruction(x, &mut self.destr);
        for j in 0..n {
            self.x[j] = x[j];
            self.inv_x[j] = if x[j] > ZERO_STATE { 1.0 / x[j] } else { 0.0 };
        }
    }

    #[inline]
    pub fn state(&self) -> &[f64] {
        &self.x[..self.prod.dim()]
    }
}

/// `𝒫(a)` and `𝒟(a)` for one control; they depend on the control only, so
/// solvers evaluate them once per discrete control.
#[derive(Debug, Clone, Copy)]
pub struct ControlPolicies {
    pub prod: SquareMatrix,
    pub destr: SquareMatrix,
}

impl ControlPolicies {
    pub fn evaluate(model: &dyn CpdsModel, a: &[f64]) -> Self {
        let n = model.dimension();
        let mut prod = SquareMatrix::zeros(n);
        let mut destr = SquareMatrix::zeros(n);
        model.policy_production(a, &mut prod);
        model.policy_destruction(a, &mut destr);
        ControlPolicies { prod, destr }
    }
}

#[inline]
pub(crate) fn patankar_into(rates: &NodeRates, pol: &ControlPolicies, out: &mut SquareMatrix) {
    let n = rates.prod.dim();
    out.reset(n);
    for j in 0..n {
        let w = rates.inv_x[j];
        if w == 0.0 {
            continue;
        }
        let mut loss = 0.0;
        for k in 0..n {
            loss += rates.destr[(j, k)] * pol.destr[(j, k)];
        }
        for i in 0..n {
            if i != j {
                out[(i, j)] = rates.prod[(i, j)] * pol.prod[(i, j)] * w;
            }
        }
        out[(j, j)] = -loss * w;
    }
}

/// MPE foot into `out`; `a` is scratch space for the linear system.
#[inline]
pub(crate) fn mpe_foot(
    rates: &NodeRates,
    pol: &ControlPolicies,
    dt: f64,
    out: &mut [f64; MAX_DIM],
    a: &mut SquareMatrix,
) -> Result<(), SingularMatrix> {
    let n = rates.prod.dim();
    patankar_into(rates, pol, a);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = -dt * a[(i, j)];
        }
        a[(i, i)] += 1.0;
    }
    out[..n].copy_from_slice(rates.state());
    solve_in_place(a, out)
}

/// Explicit Euler foot into `out`.
#[inline]
pub(crate) fn euler_foot(rates: &NodeRates, pol: &ControlPolicies, dt: f64, out: &mut [f64; MAX_DIM]) {
    let n = rates.prod.dim();
    let mut f = [0.0; MAX_DIM];
    rhs_into(&rates.prod, &rates.destr, &pol.prod, &pol.destr, &mut f);
    for i in 0..n {
        out[i] = rates.x[i] + dt * f[i];
    }
}

/// One foot with the selected integrator.
#[inline]
pub(crate) fn foot(
    integrator: Integrator,
    rates: &NodeRates,
    pol: &ControlPolicies,
    dt: f64,
    out: &mut [f64; MAX_DIM],
    scratch: &mut SquareMatrix,
) -> Result<(), SingularMatrix> {
    match integrator {
        Integrator::Mpe => mpe_foot(rates, pol, dt, out, scratch),
        Integrator::Euler => {
            euler_foot(rates, pol, dt, out);
            Ok(())
        }
    }
}

fn validate_step_inputs(model: &dyn CpdsModel, x: &StateVector, a: &ControlPoint) -> Result<()> {
    if x.dim() != model.dimension() || a.dim() != model.control_dimension() {
        return Err(Error::Contract(format!(
            "dimension mismatch: state {} / control {} for model {} ({} / {})",
            x.dim(),
            a.dim(),
            model.name(),
            model.dimension(),
            model.control_dimension()
        )));
    }
    if !x.is_nonnegative() {
        return Err(Error::Contract(format!(
            "Patankar step needs a nonnegative state, got {:?}",
            x.as_slice()
        )));
    }
    Ok(())
}

pub fn build_patankar_matrix(
    model: &dyn CpdsModel,
    x: &StateVector,
    a: &ControlPoint,
) -> Result<PatankarMatrix> {
    validate_step_inputs(model, x, a)?;
    let mut rates = NodeRates::new(model.dimension());
    rates.evaluate(model, x.as_slice());
    let pol = ControlPolicies::evaluate(model, a.as_slice());
    let mut m = SquareMatrix::zeros(model.dimension());
    patankar_into(&rates, &pol, &mut m);
    Ok(PatankarMatrix(m))
}

pub(crate) fn singular_error(err: SingularMatrix, x: &[f64], a: &[f64], dt: f64) -> Error {
    Error::Numeric(format!(
        "singular MPE system at x = {x:?}, a = {a:?}, dt = {dt}: pivot {:e} in column {}",
        err.pivot, err.column
    ))
}

/// Modified Patankar-Euler step `y = (I − Δt M(x, a))⁻¹ x`.
pub fn mpe_step(model: &dyn CpdsModel, x: &StateVector, a: &ControlPoint, dt: f64) -> Result<StateVector> {
    validate_step_inputs(model, x, a)?;
    if !(dt > 0.0) {
        return Err(Error::Contract(format!("time step must be positive, got {dt}")));
    }
    let n = model.dimension();
    let mut rates = NodeRates::new(n);
    rates.evaluate(model, x.as_slice());
    let pol = ControlPolicies::evaluate(model, a.as_slice());
    let mut y = [0.0; MAX_DIM];
    mpe_foot(&rates, &pol, dt, &mut y, &mut SquareMatrix::zeros(x.dim()))
        .map_err(|e| singular_error(e, x.as_slice(), a.as_slice(), dt))?;
    debug_assert!(y[..n].iter().all(|v| *v >= 0.0), "MPE lost positivity: {:?}", &y[..n]);
    Ok(StateVector::from_raw(y[..n].to_vec()))
}

/// Explicit Euler step `y = x + Δt F(x, a)`. No clamping: the result may be
/// negative and callers decide what to do with it.
pub fn euler_step(model: &dyn CpdsModel, x: &StateVector, a: &ControlPoint, dt: f64) -> Result<StateVector> {
    if x.dim() != model.dimension() || a.dim() != model.control_dimension() {
        return Err(Error::Contract("dimension mismatch in euler_step".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Contract(format!("time step must be positive, got {dt}")));
    }
    let n = model.dimension();
    let mut rates = NodeRates::new(n);
    rates.evaluate(model, x.as_slice());
    let pol = ControlPolicies::evaluate(model, a.as_slice());
    let mut y = [0.0; MAX_DIM];
    euler_foot(&rates, &pol, dt, &mut y);
    Ok(StateVector::from_raw(y[..n].to_vec()))
}

/// Step with the selected integrator.
pub fn step(
    integrator: Integrator,
    model: &dyn CpdsModel,
    x: &StateVector,
    a: &ControlPoint,
    dt: f64,
) -> Result<StateVector> {
    match integrator {
        Integrator::Mpe => mpe_step(model, x, a, dt),
        Integrator::Euler => euler_step(model, x, a, dt),
    }
}

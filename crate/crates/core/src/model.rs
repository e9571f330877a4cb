//! The controlled production-destruction system contract.
//!
//! A [`CpdsModel`] exposes its production and destruction matrices, the
//! control policy matrices that modulate them entry by entry, a box of
//! admissible controls and the running/final costs. The induced vector field
//! is
//!
//! ```text
//! F(x, a) = (P(x) ⊙ 𝒫(a) − D(x) ⊙ 𝒟(a)) e
//! ```
//!
//! The structural assumptions (nonnegativity, `P = Dᵀ`, zero diagonals and
//! zero columns at vanishing species) are not enforced by the type system.
//! [`check_assumptions`] and [`check_conservativity_condition`] validate them
//! on seeded samples of the invariant box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{SquareMatrix, MAX_DIM};

/// Absolute tolerance for identities that hold exactly in real arithmetic.
pub const EXACT_TOL: f64 = 1e-12;

/// A point of the state space `ℝᴺ₀₊`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    /// Checked constructor: components must be finite and nonnegative.
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.len() < 2 || components.len() > MAX_DIM {
            return Err(Error::Contract(format!(
                "state dimension {} outside 2..={MAX_DIM}",
                components.len()
            )));
        }
        if let Some((k, v)) = components
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::Contract(format!(
                "state component {k} = {v} is not a finite nonnegative number"
            )));
        }
        Ok(StateVector(components))
    }

    /// Unchecked constructor for integrator output, which may leave `ℝᴺ₀₊`
    /// (explicit Euler).
    pub fn from_raw(components: Vec<f64>) -> Self {
        StateVector(components)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `eᵀx`
    pub fn total_mass(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn max_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_nonnegative(&self) -> bool {
        self.0.iter().all(|v| *v >= 0.0)
    }
}

impl std::ops::Index<usize> for StateVector {
    type Output = f64;
    fn index(&self, k: usize) -> &f64 {
        &self.0[k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlPoint(Vec<f64>);

impl ControlPoint {
    pub fn new(components: Vec<f64>) -> Self {
        ControlPoint(components)
    }

    pub fn scalar(value: f64) -> Self {
        ControlPoint(vec![value])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Axis-aligned box of admissible controls, `lower ≤ a ≤ upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ControlBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() || lower.len() > MAX_DIM {
            return Err(Error::Contract(format!(
                "control box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (m, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Contract(format!(
                    "control axis {m}: need finite lower <= upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(ControlBox { lower, upper })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.len() == self.dim()
            && a
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn check(&self, a: &ControlPoint) -> Result<()> {
        if self.contains(a.as_slice()) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "control {:?} outside box [{:?}, {:?}]",
                a.as_slice(),
                self.lower,
                self.upper
            )))
        }
    }
}

/// The box `{x : 0 ≤ x ≤ S e}` with `S = eᵀy⁰`, positively invariant for
/// conservative CPDS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvariantBox {
    pub dim: usize,
    pub total_mass: f64,
}

impl InvariantBox {
    pub fn from_initial_state(y0: &StateVector) -> Self {
        InvariantBox {
            dim: y0.dim(),
            total_mass: y0.total_mass(),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().all(|v| *v >= 0.0 && *v <= self.total_mass)
    }

    /// Max-norm distance from an interior point to `∂Ω₀`.
    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        x.iter()
            .map(|v| v.min(self.total_mass - v))
            .fold(f64::INFINITY, f64::min)
    }
}

/// A controlled production-destruction system with its cost functional.
///
/// Implementations must be immutable and safe to evaluate from many threads.
/// Matrix evaluations write into caller-provided storage; `out` arrives
/// sized `dimension() × dimension()` but with unspecified contents.
pub trait CpdsModel: Send + Sync {
    fn name(&self) -> &str;

    /// State dimension N.
    fn dimension(&self) -> usize;

    fn control_box(&self) -> &ControlBox;

    fn control_dimension(&self) -> usize {
        self.control_box().dim()
    }

    /// `(t0, tf)` with `0 ≤ t0 < tf`.
    fn time_horizon(&self) -> (f64, f64);

    /// Default initial datum `y⁰`.
    fn initial_state(&self) -> StateVector;

    fn production(&self, x: &[f64], out: &mut SquareMatrix);
    fn destruction(&self, x: &[f64], out: &mut SquareMatrix);
    fn policy_production(&self, a: &[f64], out: &mut SquareMatrix);
    fn policy_destruction(&self, a: &[f64], out: &mut SquareMatrix);

    /// `ℓ(x, a, t)`
    fn running_cost(&self, x: &[f64], a: &[f64], t: f64) -> f64;

    /// `φ(x)`
    fn final_cost(&self, x: &[f64]) -> f64;

    fn state_labels(&self) -> Vec<String> {
        (1..=self.dimension()).map(|k| format!("y{k}")).collect()
    }

    fn control_labels(&self) -> Vec<String> {
        (1..=self.control_dimension()).map(|k| format!("a{k}")).collect()
    }

    /// The state component summarized against the base case, and its label.
    fn objective_component(&self) -> (usize, String) {
        let n = self.dimension() - 1;
        (n, self.state_labels()[n].clone())
    }

    /// The control of the uncontrolled reference run.
    fn base_control(&self) -> ControlPoint {
        ControlPoint::new(self.control_box().lower().to_vec())
    }

    /// Extra per-state outputs `(name, value)` written next to trajectories.
    fn derived_outputs(&self, _x: &[f64]) -> Vec<(&'static str, f64)> {
        Vec::new()
    }
}

fn check_dims(model: &dyn CpdsModel, x: &[f64], a: &[f64]) -> Result<()> {
    if x.len() != model.dimension() {
        return Err(Error::Contract(format!(
            "state has dimension {}, model {} expects {}",
            x.len(),
            model.name(),
            model.dimension()
        )));
    }
    if a.len() != model.control_dimension() {
        return Err(Error::Contract(format!(
            "control has dimension {}, model {} expects {}",
            a.len(),
            model.name(),
            model.control_dimension()
        )));
    }
    Ok(())
}

/// Evaluates `F(x, a)` into `out` without validation.
#[inline]
pub(crate) fn rhs_into(
    prod: &SquareMatrix,
    destr: &SquareMatrix,
    pol_p: &SquareMatrix,
    pol_d: &SquareMatrix,
    out: &mut [f64; MAX_DIM],
) {
    let n = prod.dim();
    for (i, o) in out.iter_mut().enumerate().take(n) {
        let mut acc = 0.0;
        for j in 0..n {
            acc += prod[(i, j)] * pol_p[(i, j)] - destr[(i, j)] * pol_d[(i, j)];
        }
        *o = acc;
    }
}

/// The vector field `F(x, a) = (P(x) ⊙ 𝒫(a) − D(x) ⊙ 𝒟(a)) e`.
pub fn rhs(model: &dyn CpdsModel, x: &StateVector, a: &ControlPoint) -> Result<StateVector> {
    check_dims(model, x.as_slice(), a.as_slice())?;
    let n = model.dimension();
    let mut m = [SquareMatrix::zeros(n); 4];
    model.production(x.as_slice(), &mut m[0]);
    model.destruction(x.as_slice(), &mut m[1]);
    model.policy_production(a.as_slice(), &mut m[2]);
    model.policy_destruction(a.as_slice(), &mut m[3]);
    let mut out = [0.0; MAX_DIM];
    rhs_into(&m[0], &m[1], &m[2], &m[3], &mut out);
    Ok(StateVector::from_raw(out[..n].to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Assumption {
    /// A1: `P, D ≥ 0` on `ℝᴺ₀₊`.
    Nonnegative,
    /// A2: `P = Dᵀ`.
    Transposed,
    /// A3: `P_ii = D_ii = 0`.
    ZeroDiagonal,
    /// A4: column j of P vanishes when `x_j = 0`.
    ZeroColumn,
    /// ℓ and φ finite on the sampled box.
    BoundedCosts,
}

impl Assumption {
    pub const ALL: [Assumption; 5] = [
        Assumption::Nonnegative,
        Assumption::Transposed,
        Assumption::ZeroDiagonal,
        Assumption::ZeroColumn,
        Assumption::BoundedCosts,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Assumption::Nonnegative => "A1 nonnegative rates",
            Assumption::Transposed => "A2 P = D^T",
            Assumption::ZeroDiagonal => "A3 zero diagonal",
            Assumption::ZeroColumn => "A4 zero column at x_j = 0",
            Assumption::BoundedCosts => "bounded costs",
        }
    }
}

/// The first sample at which a check failed.
#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub sample: usize,
    pub state: Vec<f64>,
    pub control: Vec<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionOutcome {
    pub assumption: Assumption,
    pub witness: Option<Witness>,
}

impl AssumptionOutcome {
    pub fn passed(&self) -> bool {
        self.witness.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub samples: usize,
    pub outcomes: Vec<AssumptionOutcome>,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(AssumptionOutcome::passed)
    }

    pub fn outcome(&self, which: Assumption) -> &AssumptionOutcome {
        self.outcomes
            .iter()
            .find(|o| o.assumption == which)
            .expect("every assumption is reported")
    }

    pub fn failed(&self) -> impl Iterator<Item = &AssumptionOutcome> {
        self.outcomes.iter().filter(|o| !o.passed())
    }
}

/// Draws `(x, a)` uniformly from `Ω₀ × A`, with `Ω₀` built from the model's
/// default initial datum.
pub(crate) struct SampleStream {
    rng: ChaCha8Rng,
    dim: usize,
    mass: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl SampleStream {
    pub(crate) fn new(model: &dyn CpdsModel, seed: u64) -> Self {
        let mass = model.initial_state().total_mass();
        SampleStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dim: model.dimension(),
            mass: if mass > 0.0 { mass } else { 1.0 },
            lower: model.control_box().lower().to_vec(),
            upper: model.control_box().upper().to_vec(),
        }
    }

    pub(crate) fn next_state(&mut self) -> Vec<f64> {
        (0..self.dim)
            .map(|_| self.rng.gen_range(0.0..=self.mass))
            .collect()
    }

    pub(crate) fn next_control(&mut self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| if lo < hi { self.rng.gen_range(*lo..=*hi) } else { *lo })
            .collect()
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Validates A1-A4 and cost boundedness on `samples` seeded draws from
/// `Ω₀ × A`. Violations are reported with the first witness, never thrown.
pub fn check_assumptions(model: &dyn CpdsModel, samples: usize, seed: u64) -> AssumptionReport {
    let n = model.dimension();
    let mut stream = SampleStream::new(model, seed);
    let mut witnesses: [Option<Witness>; 5] = Default::default();
    let mut prod = SquareMatrix::zeros(n);
    let mut destr = SquareMatrix::zeros(n);

    let record = |slot: &mut Option<Witness>, s: usize, x: &[f64], a: &[f64], detail: String| {
        if slot.is_none() {
            *slot = Some(Witness {
                sample: s,
                state: x.to_vec(),
                control: a.to_vec(),
                detail,
            });
        }
    };

    for s in 0..samples.max(1) {
        let x = stream.next_state();
        let a = stream.next_control();
        model.production(&x, &mut prod);
        model.destruction(&x, &mut destr);
        let scale = 1.0 + prod.max_abs().max(destr.max_abs());
        for i in 0..n {
            for j in 0..n {
                let (p, d) = (prod[(i, j)], destr[(i, j)]);
                if !(p >= 0.0 && d >= 0.0) {
                    record(
                        &mut witnesses[0],
                        s,
                        &x,
                        &a,
                        format!("P[{i}][{j}] = {p:e}, D[{i}][{j}] = {d:e}"),
                    );
                }
                let dt = destr[(j, i)];
                if (p - dt).abs() > EXACT_TOL * scale {
                    record(
                        &mut witnesses[1],
                        s,
                        &x,
                        &a,
                        format!("P[{i}][{j}] = {p:e} but D[{j}][{i}] = {dt:e}"),
                    );
                }
            }
            if prod[(i, i)] != 0.0 || destr[(i, i)] != 0.0 {
                record(
                    &mut witnesses[2],
                    s,
                    &x,
                    &a,
                    format!(
                        "P[{i}][{i}] = {:e}, D[{i}][{i}] = {:e}",
                        prod[(i, i)],
                        destr[(i, i)]
                    ),
                );
            }
        }
        for j in 0..n {
            let mut xz = x.clone();
            xz[j] = 0.0;
            model.production(&xz, &mut prod);
            if let Some(i) = (0..n).find(|&i| prod[(i, j)] != 0.0) {
                record(
                    &mut witnesses[3],
                    s,
                    &xz,
                    &a,
                    format!("x[{j}] = 0 but P[{i}][{j}] = {:e}", prod[(i, j)]),
                );
            }
        }
        let (t0, tf) = model.time_horizon();
        let t = t0 + (tf - t0) * stream.rng().gen::<f64>();
        let l = model.running_cost(&x, &a, t);
        let phi = model.final_cost(&x);
        if !l.is_finite() || !phi.is_finite() {
            record(
                &mut witnesses[4],
                s,
                &x,
                &a,
                format!("running cost {l}, final cost {phi}"),
            );
        }
    }

    AssumptionReport {
        samples: samples.max(1),
        outcomes: Assumption::ALL
            .iter()
            .zip(witnesses)
            .map(|(&assumption, witness)| AssumptionOutcome { assumption, witness })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConservativityReport {
    pub samples: usize,
    pub max_abs_trace: f64,
    pub witness: Option<Witness>,
}

impl ConservativityReport {
    pub fn passed(&self) -> bool {
        self.witness.is_none()
    }
}

/// `tr(P(x) (𝒫ᵀ(a) − 𝒟(a)))`, which vanishes identically for conservative
/// control policies.
pub fn conservativity_trace(model: &dyn CpdsModel, x: &[f64], a: &[f64]) -> f64 {
    let n = model.dimension();
    let mut prod = SquareMatrix::zeros(n);
    let mut pol_p = SquareMatrix::zeros(n);
    let mut pol_d = SquareMatrix::zeros(n);
    model.production(x, &mut prod);
    model.policy_production(a, &mut pol_p);
    model.policy_destruction(a, &mut pol_d);
    // tr(P Q) = Σ_ik P_ik Q_ki with Q = 𝒫ᵀ − 𝒟
    let mut tr = 0.0;
    for i in 0..n {
        for k in 0..n {
            tr += prod[(i, k)] * (pol_p[(i, k)] - pol_d[(k, i)]);
        }
    }
    tr
}

/// Checks the conservativity trace condition at seeded samples, to
/// [`EXACT_TOL`] absolute.
pub fn check_conservativity_condition(
    model: &dyn CpdsModel,
    samples: usize,
    seed: u64,
) -> ConservativityReport {
    let mut stream = SampleStream::new(model, seed);
    let mut max_abs_trace: f64 = 0.0;
    let mut witness = None;
    for s in 0..samples.max(1) {
        let x = stream.next_state();
        let a = stream.next_control();
        let tr = conservativity_trace(model, &x, &a);
        max_abs_trace = max_abs_trace.max(tr.abs());
        if !(tr.abs() <= EXACT_TOL) && witness.is_none() {
            witness = Some(Witness {
                sample: s,
                state: x,
                control: a,
                detail: format!("trace = {tr:e}"),
            });
        }
    }
    ConservativityReport {
        samples: samples.max(1),
        max_abs_trace,
        witness,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::custom::{DiagonalDefect, TwoSpeciesChain};

    #[test]
    fn rhs_vanishes_at_origin() {
        let m = TwoSpeciesChain::default();
        let f = rhs(
            &m,
            &StateVector::new(vec![0.0, 0.0]).unwrap(),
            &ControlPoint::scalar(0.5),
        )
        .unwrap();
        assert_eq!(f.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn rhs_rejects_dimension_mismatch() {
        let m = TwoSpeciesChain::default();
        let err = rhs(
            &m,
            &StateVector::new(vec![0.1, 0.2, 0.3]).unwrap(),
            &ControlPoint::scalar(0.5),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn state_vector_rejects_negative() {
        assert!(StateVector::new(vec![0.1, -1e-20]).is_err());
        assert!(StateVector::new(vec![0.1, f64::NAN]).is_err());
        assert!(StateVector::new(vec![0.1, 0.0]).is_ok());
    }

    #[test]
    fn control_box_validation() {
        assert!(ControlBox::interval(1.0, 0.0).is_err());
        let b = ControlBox::interval(0.0, 1.0).unwrap();
        assert!(b.contains(&[0.0]) && b.contains(&[1.0]) && !b.contains(&[1.5]));
    }

    #[test]
    fn broken_diagonal_fails_a3_with_witness() {
        let report = check_assumptions(&DiagonalDefect::default(), 16, 3);
        let a3 = report.outcome(Assumption::ZeroDiagonal);
        let w = a3.witness.as_ref().expect("A3 must fail");
        assert_eq!(w.sample, 0);
        assert!(w.detail.contains("P[0][0] = 1"));
        assert!(report.outcome(Assumption::Nonnegative).passed());
    }

    #[test]
    fn invariant_box_distance() {
        let b = InvariantBox {
            dim: 2,
            total_mass: 1.0,
        };
        assert_eq!(b.boundary_distance(&[0.5, 0.5]), 0.5);
        assert_eq!(b.boundary_distance(&[0.9, 0.3]), 0.09999999999999998);
        assert!(b.contains(&[1.0, 0.0]) && !b.contains(&[1.1, 0.0]));
    }
}

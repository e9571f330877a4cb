//! Forward synthesis from a solved value function.
//!
//! Given the slices `V^0 … V^n̄`, the optimal control at `(y^n, t^n)` is
//! recovered by re-running the minimization of the backward step at the
//! current state, and the state is advanced with the same MPE foot:
//!
//! ```text
//! a^n     = argmin_a { I[V^m](y(y^n, a, Δt)) + Δt ℓ(y^n, a, t^n) }
//! y^{n+1} = y(y^n, a^n, Δt)
//! ```
//!
//! where `m = n + 1` (the time level the foot occupies) or `m = n`, see
//! [`ReconSlice`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::UniformGrid;
use crate::hjb::{resolve_workers, ControlGrid, SliceSource, TimeSchedule};
use crate::integrators::{foot, mpe_foot, singular_error, ControlPolicies, Integrator, NodeRates};
use crate::linalg::{SquareMatrix, MAX_DIM};
use crate::model::{ControlPoint, CpdsModel, InvariantBox, StateVector};

/// Which slice the reconstruction interpolates the foot in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconSlice {
    /// `V^{n+1}`, matching the pairing of the backward recursion.
    #[default]
    Next,
    /// `V^n`.
    Same,
}

impl FromStr for ReconSlice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "next" => Ok(ReconSlice::Next),
            "same" => Ok(ReconSlice::Same),
            other => Err(Error::Config(format!(
                "unknown recon-slice {other:?} (expected next or same)"
            ))),
        }
    }
}

impl fmt::Display for ReconSlice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReconSlice::Next => "next",
            ReconSlice::Same => "same",
        })
    }
}

/// A discrete state/control trajectory with its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    /// `n̄ + 1` states.
    pub states: Vec<StateVector>,
    /// `n̄` controls; `controls[n]` acts on `[t^n, t^{n+1})`.
    pub controls: Vec<ControlPoint>,
    /// `Δt ℓ(y^n, a^n, t^n)` per step.
    pub running_costs: Vec<f64>,
    pub terminal_cost: f64,
    pub total_cost: f64,
    /// Interpolation queries that had to be clamped into the grid box.
    pub clamp_events: usize,
}

impl TrajectoryRecord {
    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn final_state(&self) -> &StateVector {
        self.states.last().expect("a record holds at least one state")
    }

    pub fn initial_state(&self) -> &StateVector {
        &self.states[0]
    }

    /// Running sums of the per-step costs, starting at 0.
    pub fn cumulative_costs(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.running_costs.len() + 1);
        out.push(0.0);
        for c in &self.running_costs {
            acc += c;
            out.push(acc);
        }
        out
    }

    /// Largest `|eᵀy^n − eᵀy^0|` along the trajectory.
    pub fn mass_drift(&self) -> f64 {
        let m0 = self.states[0].total_mass();
        self.states
            .iter()
            .map(|s| (s.total_mass() - m0).abs())
            .fold(0.0, f64::max)
    }
}

/// Accumulates a record step by step with the rectangle rule.
struct RecordBuilder {
    record: TrajectoryRecord,
    acc: f64,
}

impl RecordBuilder {
    fn new(y0: StateVector, t0: f64, steps: usize) -> Self {
        let mut times = Vec::with_capacity(steps + 1);
        times.push(t0);
        let mut states = Vec::with_capacity(steps + 1);
        states.push(y0);
        RecordBuilder {
            record: TrajectoryRecord {
                times,
                states,
                controls: Vec::with_capacity(steps),
                running_costs: Vec::with_capacity(steps),
                terminal_cost: 0.0,
                total_cost: 0.0,
                clamp_events: 0,
            },
            acc: 0.0,
        }
    }

    fn push(&mut self, a: ControlPoint, step_cost: f64, t_next: f64, y_next: StateVector) {
        self.acc += step_cost;
        self.record.controls.push(a);
        self.record.running_costs.push(step_cost);
        self.record.times.push(t_next);
        self.record.states.push(y_next);
    }

    fn finish(mut self, model: &dyn CpdsModel) -> Result<TrajectoryRecord> {
        let phi = model.final_cost(self.record.final_state().as_slice());
        if !phi.is_finite() {
            return Err(Error::Numeric(format!(
                "final cost is {phi} at {:?}",
                self.record.final_state().as_slice()
            )));
        }
        self.record.terminal_cost = phi;
        self.record.total_cost = self.acc + phi;
        Ok(self.record)
    }
}

fn check_initial(model: &dyn CpdsModel, grid: Option<&UniformGrid>, y0: &StateVector) -> Result<()> {
    if y0.dim() != model.dimension() {
        return Err(Error::Domain(format!(
            "initial state has {} components, model {} has {}",
            y0.dim(),
            model.name(),
            model.dimension()
        )));
    }
    if !y0.is_nonnegative() {
        return Err(Error::Domain(format!("initial state {:?} is not nonnegative", y0.as_slice())));
    }
    if let Some(g) = grid {
        for k in 0..g.dim() {
            let v = y0[k];
            if v < g.lower()[k] || v > g.upper()[k] {
                return Err(Error::Domain(format!(
                    "initial state {:?} lies outside the grid box on axis {k} [{}, {}]",
                    y0.as_slice(),
                    g.lower()[k],
                    g.upper()[k]
                )));
            }
        }
    }
    Ok(())
}

/// Optimal trajectory from `y0` at `t0` by minimization over `controls`.
pub fn reconstruct(
    model: &dyn CpdsModel,
    source: &dyn SliceSource,
    y0: &StateVector,
    controls: &ControlGrid,
    slice: ReconSlice,
) -> Result<TrajectoryRecord> {
    let grid = source.grid();
    check_initial(model, Some(grid), y0)?;
    if controls.is_empty() || controls.point(0).dim() != model.control_dimension() {
        return Err(Error::Contract("reconstruction control grid does not match the model".into()));
    }
    let schedule = *source.schedule();
    let dt = schedule.dt();
    let n = model.dimension();
    let policies: Vec<ControlPolicies> = controls
        .points()
        .iter()
        .map(|a| ControlPolicies::evaluate(model, a.as_slice()))
        .collect();
    let mut builder = RecordBuilder::new(y0.clone(), schedule.t0(), schedule.steps());
    let mut rates = NodeRates::new(n);
    let mut y = [0.0; MAX_DIM];
    let mut scratch = SquareMatrix::zeros(MAX_DIM);
    let mut best_y = [0.0; MAX_DIM];
    let mut x = y0.as_slice().to_vec();
    for step in 0..schedule.steps() {
        let level = match slice {
            ReconSlice::Next => step + 1,
            ReconSlice::Same => step,
        };
        let values = source.load(level)?;
        let t = schedule.time(step);
        rates.evaluate(model, &x);
        let mut best = f64::INFINITY;
        let mut best_k = 0;
        let mut best_cost = 0.0;
        let mut best_clamped = false;
        for (k, pol) in policies.iter().enumerate() {
            let a = controls.point(k).as_slice();
            mpe_foot(&rates, pol, dt, &mut y, &mut scratch).map_err(|e| singular_error(e, &x, a, dt))?;
            let (v, clamped) = grid.interpolate(values.as_ref(), &y[..n])?;
            let step_cost = dt * model.running_cost(&x, a, t);
            let cand = v + step_cost;
            if cand < best {
                best = cand;
                best_k = k;
                best_cost = step_cost;
                best_clamped = clamped;
                best_y[..n].copy_from_slice(&y[..n]);
            }
        }
        if !best.is_finite() {
            return Err(Error::Numeric(format!("no finite candidate at step {step} from {x:?}")));
        }
        if best_clamped {
            builder.record.clamp_events += 1;
        }
        x.copy_from_slice(&best_y[..n]);
        builder.push(
            controls.point(best_k).clone(),
            best_cost,
            schedule.time(step + 1),
            StateVector::from_raw(x.clone()),
        );
    }
    builder.finish(model)
}

/// Trajectory driven by the recorded feedback of the nearest grid node;
/// `controls` must be the grid the solve used.
pub fn reconstruct_from_feedback(
    model: &dyn CpdsModel,
    source: &dyn SliceSource,
    y0: &StateVector,
    controls: &ControlGrid,
) -> Result<TrajectoryRecord> {
    let grid = source.grid();
    check_initial(model, Some(grid), y0)?;
    let schedule = *source.schedule();
    let dt = schedule.dt();
    let n = model.dimension();
    let mut builder = RecordBuilder::new(y0.clone(), schedule.t0(), schedule.steps());
    let mut rates = NodeRates::new(n);
    let mut y = [0.0; MAX_DIM];
    let mut scratch = SquareMatrix::zeros(MAX_DIM);
    let mut x = y0.as_slice().to_vec();
    for step in 0..schedule.steps() {
        let fb = source.feedback(step)?.ok_or_else(|| {
            Error::Data(format!("no feedback recorded for slice {step}; solve with feedback enabled"))
        })?;
        let k = fb[grid.nearest_node(&x)] as usize;
        if k >= controls.len() {
            return Err(Error::Data(format!(
                "feedback index {k} exceeds the {} solver controls",
                controls.len()
            )));
        }
        let a = controls.point(k);
        let t = schedule.time(step);
        rates.evaluate(model, &x);
        let pol = ControlPolicies::evaluate(model, a.as_slice());
        mpe_foot(&rates, &pol, dt, &mut y, &mut scratch).map_err(|e| singular_error(e, &x, a.as_slice(), dt))?;
        let step_cost = dt * model.running_cost(&x, a.as_slice(), t);
        x.copy_from_slice(&y[..n]);
        builder.push(a.clone(), step_cost, schedule.time(step + 1), StateVector::from_raw(x.clone()));
    }
    builder.finish(model)
}

/// MPE time-stepping under a prescribed control law.
pub fn simulate_fixed_control(
    model: &dyn CpdsModel,
    y0: &StateVector,
    control_fn: &dyn Fn(f64) -> ControlPoint,
    schedule: &TimeSchedule,
) -> Result<TrajectoryRecord> {
    simulate_with(Integrator::Mpe, model, y0, control_fn, schedule)
}

/// Time-stepping with the chosen integrator. Euler states are not clamped.
pub fn simulate_with(
    integrator: Integrator,
    model: &dyn CpdsModel,
    y0: &StateVector,
    control_fn: &dyn Fn(f64) -> ControlPoint,
    schedule: &TimeSchedule,
) -> Result<TrajectoryRecord> {
    check_initial(model, None, y0)?;
    let dt = schedule.dt();
    let n = model.dimension();
    let mut builder = RecordBuilder::new(y0.clone(), schedule.t0(), schedule.steps());
    let mut rates = NodeRates::new(n);
    let mut y = [0.0; MAX_DIM];
    let mut scratch = SquareMatrix::zeros(MAX_DIM);
    let mut x = y0.as_slice().to_vec();
    for step in 0..schedule.steps() {
        let t = schedule.time(step);
        let a = control_fn(t);
        model
            .control_box()
            .check(&a)
            .map_err(|e| e.context(&format!("control at t = {t}")))?;
        rates.evaluate(model, &x);
        let pol = ControlPolicies::evaluate(model, a.as_slice());
        foot(integrator, &rates, &pol, dt, &mut y, &mut scratch).map_err(|e| singular_error(e, &x, a.as_slice(), dt))?;
        let step_cost = dt * model.running_cost(&x, a.as_slice(), t);
        x.copy_from_slice(&y[..n]);
        builder.push(a, step_cost, schedule.time(step + 1), StateVector::from_raw(x.clone()));
    }
    builder.finish(model)
}

/// The uncontrolled reference run under the model's base control.
pub fn base_case(model: &dyn CpdsModel, y0: &StateVector, schedule: &TimeSchedule) -> Result<TrajectoryRecord> {
    let a = model.base_control();
    simulate_fixed_control(model, y0, &|_| a.clone(), schedule)
}

/// Recomputes `J = Σ Δt ℓ(y^n, a^n, t^n) + φ(y^n̄)` from the stored states
/// and controls, summing in the same order as the producers.
pub fn evaluate_cost(model: &dyn CpdsModel, record: &TrajectoryRecord) -> Result<f64> {
    let steps = record.controls.len();
    if record.states.len() != steps + 1 || record.times.len() != steps + 1 {
        return Err(Error::Data(format!(
            "record has {} states and {} times for {steps} controls",
            record.states.len(),
            record.times.len()
        )));
    }
    // the uniform step (tf − t0)/n̄, as the producers use it
    let dt = if steps > 0 {
        (record.times[steps] - record.times[0]) / steps as f64
    } else {
        0.0
    };
    let mut acc = 0.0;
    for n in 0..steps {
        acc += dt * model.running_cost(record.states[n].as_slice(), record.controls[n].as_slice(), record.times[n]);
    }
    Ok(acc + model.final_cost(record.final_state().as_slice()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EscapeReport {
    pub dt: f64,
    pub integrator: Integrator,
    pub band_nodes: usize,
    pub pairs: usize,
    pub escapes: usize,
    pub percentage: f64,
}

/// Fraction of one-step feet from the boundary band that leave the
/// invariant box `[0, S]^N`.
///
/// The band holds the grid nodes of the box with `eᵀx ≤ S` whose max-norm
/// distance to the box boundary is at most `band_width`. Every (node,
/// control) pair is advanced once. MPE feet are checked with no tolerance,
/// Euler feet with `1e-14` slack for rounding.
#[allow(clippy::too_many_arguments)]
pub fn escape_diagnostic(
    model: &dyn CpdsModel,
    grid: &UniformGrid,
    controls: &ControlGrid,
    domain: &InvariantBox,
    dt: f64,
    band_width: f64,
    integrator: Integrator,
    workers: usize,
) -> Result<EscapeReport> {
    if grid.dim() != model.dimension() {
        return Err(Error::Contract("grid and model dimensions differ".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Contract(format!("time step must be positive, got {dt}")));
    }
    let n = model.dimension();
    let s = domain.total_mass;
    let tol = match integrator {
        Integrator::Mpe => 0.0,
        Integrator::Euler => 1e-14,
    };
    let policies: Vec<ControlPolicies> = controls
        .points()
        .iter()
        .map(|a| ControlPolicies::evaluate(model, a.as_slice()))
        .collect();
    let slack = 1e-12 * s.max(1.0);
    let census = |range: std::ops::Range<usize>| -> Result<(usize, usize)> {
        let mut x = [0.0; MAX_DIM];
        let mut y = [0.0; MAX_DIM];
        let mut scratch = SquareMatrix::zeros(MAX_DIM);
        let mut rates = NodeRates::new(n);
        let (mut band, mut escapes) = (0usize, 0usize);
        for node in range {
            grid.node_into(node, &mut x);
            let xs = &x[..n];
            let mass: f64 = xs.iter().sum();
            if mass > s + slack || !domain.contains(xs) || domain.boundary_distance(xs) > band_width {
                continue;
            }
            band += 1;
            rates.evaluate(model, xs);
            for (k, pol) in policies.iter().enumerate() {
                foot(integrator, &rates, pol, dt, &mut y, &mut scratch)
                    .map_err(|e| singular_error(e, xs, controls.point(k).as_slice(), dt))?;
                if y[..n].iter().any(|v| !(*v >= -tol && *v <= s + tol)) {
                    escapes += 1;
                }
            }
        }
        Ok((band, escapes))
    };
    let (band_nodes, escapes) = run_partitioned(grid.len(), workers, &census)?;
    let pairs = band_nodes * controls.len();
    let percentage = if pairs == 0 {
        0.0
    } else {
        100.0 * escapes as f64 / pairs as f64
    };
    Ok(EscapeReport {
        dt,
        integrator,
        band_nodes,
        pairs,
        escapes,
        percentage,
    })
}

/// Splits `0..len` into contiguous chunks, runs `f` on each and sums the
/// counts in chunk order.
fn run_partitioned(
    len: usize,
    workers: usize,
    f: &(dyn Fn(std::ops::Range<usize>) -> Result<(usize, usize)> + Sync),
) -> Result<(usize, usize)> {
    let workers = resolve_workers(workers)?;
    let sum = |parts: Vec<Result<(usize, usize)>>| {
        parts
            .into_iter()
            .try_fold((0, 0), |(a, b), r| r.map(|(c, d)| (a + c, b + d)))
    };
    #[cfg(feature = "parallel")]
    if workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
        let chunk = len.div_ceil(workers * 8).max(256);
        let starts: Vec<usize> = (0..len).step_by(chunk).collect();
        let parts = pool.install(|| {
            starts
                .par_iter()
                .map(|&s| f(s..(s + chunk).min(len)))
                .collect::<Vec<_>>()
        });
        return sum(parts);
    }
    let _ = workers;
    sum(vec![f(0..len)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjb::{solve_backward, Precision, SolverOptions};
    use crate::models::custom::{FrozenDynamics, TwoSpeciesChain};
    use crate::models::{enzyme_model, sird_model, EnzymeParams, SirdParams};

    #[test]
    fn recon_slice_parse() {
        assert_eq!("same".parse::<ReconSlice>().unwrap(), ReconSlice::Same);
        assert_eq!(ReconSlice::default().to_string(), "next");
        assert!("previous".parse::<ReconSlice>().is_err());
    }

    #[test]
    fn zero_problem_picks_first_control() {
        let model = TwoSpeciesChain::default();
        let grid = UniformGrid::unit(vec![11, 11]).unwrap();
        let controls = ControlGrid::uniform(model.control_box(), 6).unwrap();
        let schedule = TimeSchedule::new(0.0, 1.0, 10).unwrap();
        let (series, _) =
            solve_backward(&model, &grid, &controls, &schedule, &SolverOptions::default(), Precision::F64).unwrap();
        for slice in [ReconSlice::Next, ReconSlice::Same] {
            let rec = reconstruct(&model, &series, &model.initial_state(), &controls, slice).unwrap();
            assert!(rec.controls.iter().all(|a| a.as_slice() == [0.0]));
            assert_eq!(rec.total_cost, 0.0);
        }
    }

    #[test]
    fn frozen_trajectory_is_constant() {
        let model = FrozenDynamics::new(2, 0.5);
        let grid = UniformGrid::unit(vec![5, 5]).unwrap();
        let controls = ControlGrid::uniform(model.control_box(), 3).unwrap();
        let schedule = TimeSchedule::new(0.0, 1.0, 4).unwrap();
        let (series, _) =
            solve_backward(&model, &grid, &controls, &schedule, &SolverOptions::default(), Precision::F64).unwrap();
        let y0 = StateVector::new(vec![0.3, 0.45]).unwrap();
        let rec = reconstruct(&model, &series, &y0, &controls, ReconSlice::Next).unwrap();
        assert!(rec.states.iter().all(|s| *s == y0));
        assert_eq!(evaluate_cost(&model, &rec).unwrap(), rec.total_cost);
        assert!((rec.total_cost - (0.5 + 0.75)).abs() < 1e-14);
    }

    #[test]
    fn reconstruction_rejects_outside_state() {
        let model = TwoSpeciesChain::default();
        let grid = UniformGrid::new(vec![0.0, 0.0], vec![0.5, 0.5], vec![3, 3]).unwrap();
        let controls = ControlGrid::uniform(model.control_box(), 2).unwrap();
        let schedule = TimeSchedule::new(0.0, 1.0, 2).unwrap();
        let (series, _) =
            solve_backward(&model, &grid, &controls, &schedule, &SolverOptions::default(), Precision::F64).unwrap();
        let err = reconstruct(&model, &series, &model.initial_state(), &controls, ReconSlice::Next).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn zero_step_cost_is_terminal_cost() {
        let model = enzyme_model(EnzymeParams::default()).unwrap();
        let rec = TrajectoryRecord {
            times: vec![0.0],
            states: vec![model.initial_state()],
            controls: vec![],
            running_costs: vec![],
            terminal_cost: 0.0,
            total_cost: 0.0,
            clamp_events: 0,
        };
        assert_eq!(evaluate_cost(&model, &rec).unwrap(), model.final_cost(&[0.7, 0.0, 0.0]));
        let mut broken = rec.clone();
        broken.controls.push(ControlPoint::scalar(300.0));
        assert!(matches!(evaluate_cost(&model, &broken), Err(Error::Data(_))));
    }

    #[test]
    fn enzyme_base_case_costs_only_at_the_end() {
        let model = enzyme_model(EnzymeParams::default()).unwrap();
        let schedule = TimeSchedule::new(0.0, 30.0, 100).unwrap();
        let rec = base_case(&model, &model.initial_state(), &schedule).unwrap();
        assert!(rec.running_costs.iter().all(|c| *c == 0.0));
        let p = rec.final_state()[2];
        assert_eq!(rec.total_cost, 20.0 * (1.0 - p) * (1.0 - p));
        assert_eq!(evaluate_cost(&model, &rec).unwrap(), rec.total_cost);
        assert!(rec.mass_drift() <= 1e-12);
        assert!(rec.states.iter().all(|s| s.is_nonnegative()));
    }

    #[test]
    fn fixed_control_outside_box_rejected() {
        let model = sird_model(SirdParams::default()).unwrap();
        let schedule = TimeSchedule::new(0.0, 90.0, 10).unwrap();
        let err = simulate_fixed_control(&model, &model.initial_state(), &|_| ControlPoint::scalar(1.5), &schedule);
        assert!(err.is_err());
    }

    #[test]
    fn mpe_never_escapes_euler_does() {
        let model = sird_model(SirdParams::default()).unwrap();
        let grid = UniformGrid::unit(vec![11, 11, 11, 11]).unwrap();
        let controls = ControlGrid::uniform(model.control_box(), 11).unwrap();
        let domain = InvariantBox::from_initial_state(&model.initial_state());
        let band = 10.0 * grid.max_spacing();
        let mut prev = 0.0;
        for dt in [0.1, 1.0, 10.0] {
            let m = escape_diagnostic(&model, &grid, &controls, &domain, dt, band, Integrator::Mpe, 1).unwrap();
            assert_eq!(m.escapes, 0);
            assert!(m.band_nodes > 0);
            let e = escape_diagnostic(&model, &grid, &controls, &domain, dt, band, Integrator::Euler, 1).unwrap();
            assert!(e.percentage >= prev);
            prev = e.percentage;
        }
        assert!(prev > 0.0);
    }

    #[test]
    fn escape_census_independent_of_workers() {
        let model = enzyme_model(EnzymeParams::default()).unwrap();
        let grid = UniformGrid::unit(vec![21, 21, 21]).unwrap();
        let controls = ControlGrid::uniform(model.control_box(), 5).unwrap();
        let domain = InvariantBox::from_initial_state(&model.initial_state());
        let run = |w| escape_diagnostic(&model, &grid, &controls, &domain, 5.0, 0.5, Integrator::Euler, w).unwrap();
        assert_eq!(run(1), run(3));
    }
}

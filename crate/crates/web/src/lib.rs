//! Browser bindings for the solver. Every export returns a flat
//! `Float64Array`; the layouts are documented per function. The plain
//! functions are usable natively, the `#[wasm_bindgen]` wrappers only map
//! errors to JS exceptions.

use cpds::grid::UniformGrid;
use cpds::hjb::{solve_backward, ControlGrid, Precision, SolverOptions, TimeSchedule};
use cpds::model::{ControlPoint, CpdsModel, InvariantBox};
use cpds::models::{custom, enzyme_model, sird_model, EnzymeParams, SirdParams};
use cpds::synthesis::{base_case, escape_diagnostic, reconstruct, simulate_with, ReconSlice, TrajectoryRecord};
use cpds::{Error, Integrator, Result};
use wasm_bindgen::prelude::*;

pub fn model_by_name(name: &str) -> Result<Box<dyn CpdsModel>> {
    match name {
        "enzyme" => Ok(Box::new(enzyme_model(EnzymeParams::default())?)),
        "sird" => Ok(Box::new(sird_model(SirdParams::default())?)),
        other => custom::by_name(other).ok_or_else(|| Error::Config(format!("unknown model {other:?}"))),
    }
}

/// Control at fraction `frac` of the way from the lower to the upper corner
/// of the control box.
fn control_at(model: &dyn CpdsModel, frac: f64) -> ControlPoint {
    let b = model.control_box();
    let f = frac.clamp(0.0, 1.0);
    ControlPoint::new(b.lower().iter().zip(b.upper()).map(|(l, u)| l + f * (u - l)).collect())
}

fn push_states(out: &mut Vec<f64>, rec: &TrajectoryRecord) {
    for (t, y) in rec.times.iter().zip(&rec.states) {
        out.push(*t);
        out.extend_from_slice(y.as_slice());
    }
}

/// MPE and explicit Euler runs over the model horizon under a constant
/// control. Layout: `[N, rows, (t, y_1..y_N) × rows for MPE, same for Euler]`.
pub fn compare_integrators(model: &str, dt: f64, control_frac: f64) -> Result<Vec<f64>> {
    let m = model_by_name(model)?;
    let (t0, tf) = m.time_horizon();
    let steps = ((tf - t0) / dt).round().max(1.0) as usize;
    let sched = TimeSchedule::new(t0, tf, steps)?;
    let a = control_at(m.as_ref(), control_frac);
    let y0 = m.initial_state();
    let mut out = vec![m.dimension() as f64, (steps + 1) as f64];
    for integrator in [Integrator::Mpe, Integrator::Euler] {
        let rec = simulate_with(integrator, m.as_ref(), &y0, &|_| a.clone(), &sched)?;
        push_states(&mut out, &rec);
    }
    Ok(out)
}

/// Escape percentages of the SIRD model on an `nodes⁴` grid with 21
/// controls. Layout: `[mpe%, euler%]` per step size.
pub fn escape_sweep(nodes: usize, dts: &[f64]) -> Result<Vec<f64>> {
    let m = sird_model(SirdParams::default())?;
    let grid = UniformGrid::unit(vec![nodes; 4])?;
    let controls = ControlGrid::uniform(m.control_box(), 21)?;
    let domain = InvariantBox::from_initial_state(&m.initial_state());
    let band = 10.0 * grid.max_spacing();
    let mut out = Vec::with_capacity(2 * dts.len());
    for &dt in dts {
        for integrator in [Integrator::Mpe, Integrator::Euler] {
            let r = escape_diagnostic(&m, &grid, &controls, &domain, dt, band, integrator, 1)?;
            out.push(r.percentage);
        }
    }
    Ok(out)
}

/// Backward solve on a unit grid with `nodes` per axis, followed by
/// trajectory reconstruction. Layout: `[N, M, rows, J_base, J_scheme,
/// (t, y_1..y_N, a_1..a_M) × rows]`; the final row repeats the last control.
pub fn solve_and_reconstruct(model: &str, nodes: usize, steps: usize, controls: usize, integrator: &str) -> Result<Vec<f64>> {
    let m = model_by_name(model)?;
    let integrator: Integrator = integrator.parse()?;
    let (t0, tf) = m.time_horizon();
    let grid = UniformGrid::unit(vec![nodes; m.dimension()])?;
    let sched = TimeSchedule::new(t0, tf, steps)?;
    let cg = ControlGrid::uniform(m.control_box(), controls)?;
    let opts = SolverOptions {
        integrator,
        workers: 1,
        ..SolverOptions::default()
    };
    let (series, _) = solve_backward(m.as_ref(), &grid, &cg, &sched, &opts, Precision::F64)?;
    let y0 = m.initial_state();
    let rec = reconstruct(m.as_ref(), &series, &y0, &cg, ReconSlice::Next)?;
    let base = base_case(m.as_ref(), &y0, &sched)?;
    let rows = rec.states.len();
    let mut out = vec![
        m.dimension() as f64,
        m.control_dimension() as f64,
        rows as f64,
        base.total_cost,
        rec.total_cost,
    ];
    for (i, (t, y)) in rec.times.iter().zip(&rec.states).enumerate() {
        out.push(*t);
        out.extend_from_slice(y.as_slice());
        out.extend_from_slice(rec.controls[i.min(rec.controls.len() - 1)].as_slice());
    }
    Ok(out)
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = compareIntegrators)]
pub fn compare_integrators_js(model: &str, dt: f64, control_frac: f64) -> std::result::Result<Vec<f64>, JsError> {
    compare_integrators(model, dt, control_frac).map_err(js)
}

#[wasm_bindgen(js_name = escapeSweep)]
pub fn escape_sweep_js(nodes: usize, dts: Vec<f64>) -> std::result::Result<Vec<f64>, JsError> {
    escape_sweep(nodes, &dts).map_err(js)
}

#[wasm_bindgen(js_name = solveAndReconstruct)]
pub fn solve_and_reconstruct_js(
    model: &str,
    nodes: usize,
    steps: usize,
    controls: usize,
    integrator: &str,
) -> std::result::Result<Vec<f64>, JsError> {
    solve_and_reconstruct(model, nodes, steps, controls, integrator).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euler_goes_negative_where_mpe_does_not() {
        let out = compare_integrators("enzyme", 3.0, 0.0).unwrap();
        let (n, rows) = (out[0] as usize, out[1] as usize);
        let (mpe, euler) = out[2..].split_at(rows * (n + 1));
        let min = |s: &[f64]| {
            s.chunks(n + 1)
                .flat_map(|r| r[1..].iter().copied())
                .fold(f64::INFINITY, f64::min)
        };
        assert!(min(mpe) >= 0.0);
        assert!(min(euler) < 0.0);
    }

    #[test]
    fn escape_sweep_layout() {
        let out = escape_sweep(5, &[0.45, 7.2]).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[2], 0.0);
        assert!(out[3] >= out[1]);
    }

    #[test]
    fn small_enzyme_solve_beats_base() {
        let out = solve_and_reconstruct("enzyme", 11, 20, 21, "mpe").unwrap();
        let (n, m, rows) = (out[0] as usize, out[1] as usize, out[2] as usize);
        assert_eq!(out.len(), 5 + rows * (1 + n + m));
        assert!(out[4] < out[3], "J {} vs base {}", out[4], out[3]);
    }

    #[test]
    fn unknown_model() {
        assert!(matches!(model_by_name("nope"), Err(Error::Config(_))));
    }
}

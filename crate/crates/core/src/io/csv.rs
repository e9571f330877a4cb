//! CSV and plain-text tables. Reals are written with 17 significant digits
//! (`{:.16e}`), which round-trips every f64 and is platform-stable.

use std::fmt::Write;

use crate::model::CpdsModel;
use crate::synthesis::{EscapeReport, TrajectoryRecord};

pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// `t,y1..yN,a1..aM,running_cost,cumulative_cost`; one row per step, then a
/// terminal row carrying `φ` as its running cost and `J` as the cumulative.
pub fn trajectory_csv(record: &TrajectoryRecord) -> String {
    let n = record.states[0].dim();
    let m = record.controls.first().map_or(0, |a| a.dim());
    let mut out = String::from("t");
    for k in 1..=n {
        let _ = write!(out, ",y{k}");
    }
    for k in 1..=m {
        let _ = write!(out, ",a{k}");
    }
    out.push_str(",running_cost,cumulative_cost\n");
    let cumulative = record.cumulative_costs();
    for step in 0..record.steps() {
        out.push_str(&fmt_real(record.times[step]));
        for v in record.states[step].as_slice() {
            let _ = write!(out, ",{}", fmt_real(*v));
        }
        for v in record.controls[step].as_slice() {
            let _ = write!(out, ",{}", fmt_real(*v));
        }
        let _ = writeln!(
            out,
            ",{},{}",
            fmt_real(record.running_costs[step]),
            fmt_real(cumulative[step + 1])
        );
    }
    let last = record.steps();
    out.push_str(&fmt_real(record.times[last]));
    for v in record.final_state().as_slice() {
        let _ = write!(out, ",{}", fmt_real(*v));
    }
    for _ in 0..m {
        out.push(',');
    }
    let _ = writeln!(out, ",{},{}", fmt_real(record.terminal_cost), fmt_real(record.total_cost));
    out
}

/// Model-specific derived quantities along a trajectory, or `None` when the
/// model defines none.
pub fn derived_csv(model: &dyn CpdsModel, record: &TrajectoryRecord) -> Option<String> {
    let probe = model.derived_outputs(record.states[0].as_slice());
    if probe.is_empty() {
        return None;
    }
    let mut out = String::from("t");
    for (name, _) in &probe {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for (t, s) in record.times.iter().zip(&record.states) {
        out.push_str(&fmt_real(*t));
        for (_, v) in model.derived_outputs(s.as_slice()) {
            let _ = write!(out, ",{}", fmt_real(v));
        }
        out.push('\n');
    }
    Some(out)
}

pub fn escape_csv(reports: &[EscapeReport]) -> String {
    let mut out = String::from("dt,integrator,band_nodes,pairs,escapes,percentage\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_real(r.dt),
            r.integrator,
            r.band_nodes,
            r.pairs,
            r.escapes,
            fmt_real(r.percentage)
        );
    }
    out
}

/// `100 (value − base) / base`.
pub fn percent_change(value: f64, base: f64) -> f64 {
    100.0 * (value - base) / base
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scheme: String,
    pub objective: f64,
    pub cost: f64,
}

/// Results table: the objective component at `t_f` and the cost for the
/// base case and each scheme, with percentage variations relative to the
/// base case.
pub fn summary_table(objective_label: &str, base: &SummaryRow, rows: &[SummaryRow]) -> String {
    let head = format!("{objective_label}(tf)");
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>14} {:>10} {:>14} {:>10}",
        "scheme", head, format!("{objective_label}%"), "J", "J%"
    );
    let _ = writeln!(
        out,
        "{:<10} {:>14.6} {:>10} {:>14.6} {:>10}",
        base.scheme, base.objective, "-", base.cost, "-"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>14.6} {:>+9.2}% {:>14.6} {:>+9.2}%",
            r.scheme,
            r.objective,
            percent_change(r.objective, base.objective),
            r.cost,
            percent_change(r.cost, base.cost)
        );
    }
    out
}

//! Command orchestration: each command reads a [`RunConfig`], runs the
//! numerical stages and writes its artifacts into the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hjb::{solve_backward, solve_backward_into, MemorySink, SliceSource, SolveReport, Tee, ValueFunctionSeries};
use crate::integrators::Integrator;
use crate::io::config::RunConfig;
use crate::io::csv::{derived_csv, escape_csv, summary_table, trajectory_csv, SummaryRow};
use crate::io::manifest::{render_manifest, ManifestInfo, MANIFEST_FILE};
use crate::io::snapshot::{SnapshotDir, SnapshotSink};
use crate::io::write_atomic;
use crate::model::{check_assumptions, check_conservativity_condition, CpdsModel, InvariantBox, StateVector};
use crate::synthesis::{base_case, escape_diagnostic, reconstruct, EscapeReport, TrajectoryRecord};
use crate::hjb::TimeSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    CheckModel,
    Solve,
    Synthesize,
    Baseline,
    EscapeReport,
    Full,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::CheckModel => "check-model",
            Command::Solve => "solve",
            Command::Synthesize => "synthesize",
            Command::Baseline => "baseline",
            Command::EscapeReport => "escape-report",
            Command::Full => "full",
        }
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "check-model" => Command::CheckModel,
            "solve" => Command::Solve,
            "synthesize" => Command::Synthesize,
            "baseline" => Command::Baseline,
            "escape-report" => Command::EscapeReport,
            "full" => Command::Full,
            other => return Err(Error::Config(format!("unknown command {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutcome {
    /// Human-readable report for the terminal.
    pub report: String,
    pub files: Vec<PathBuf>,
}

/// Everything derived from the configuration once.
struct Run<'a> {
    cfg: &'a RunConfig,
    model: Box<dyn CpdsModel>,
    y0: StateVector,
    schedule: TimeSchedule,
    out: PathBuf,
    info: ManifestInfo,
    outcome: PipelineOutcome,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a RunConfig, command: Command) -> Result<Self> {
        let model = cfg.model()?;
        let y0 = StateVector::new(cfg.initial.clone())?;
        let schedule = cfg.schedule(model.as_ref())?;
        Ok(Run {
            cfg,
            model,
            y0,
            schedule,
            out: cfg.output_dir.clone(),
            info: ManifestInfo {
                command: command.as_str().into(),
                ..ManifestInfo::default()
            },
            outcome: PipelineOutcome::default(),
        })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.out.join(name);
        write_atomic(&path, contents)?;
        self.info.record_file(name, contents);
        self.outcome.files.push(path);
        Ok(())
    }

    fn say(&mut self, line: impl AsRef<str>) {
        self.outcome.report.push_str(line.as_ref());
        self.outcome.report.push('\n');
    }

    fn finish(mut self) -> Result<PipelineOutcome> {
        let text = render_manifest(self.cfg, &self.info)?;
        let path = self.out.join(MANIFEST_FILE);
        write_atomic(&path, text.as_bytes())?;
        self.outcome.files.push(path);
        Ok(self.outcome)
    }

    fn snapshot_dir(&self, integrator: Integrator) -> PathBuf {
        self.out.join("snapshots").join(scheme_file_tag(integrator))
    }

    fn solve(&mut self, integrator: Integrator) -> Result<(ValueFunctionSeries, SolveReport)> {
        let grid = self.cfg.grid()?;
        let controls = self.cfg.solver_control_grid(self.model.as_ref())?;
        let mut opts = self.cfg.solver_options();
        opts.integrator = integrator;
        let (series, report) = if self.cfg.snapshots {
            let mut mem = MemorySink::new(grid.clone(), self.schedule, self.cfg.precision);
            let mut snaps = SnapshotSink::new(self.snapshot_dir(integrator), grid.clone(), &self.schedule)?;
            let report = {
                let mut tee = Tee {
                    first: &mut mem,
                    second: &mut snaps,
                };
                solve_backward_into(self.model.as_ref(), &grid, &controls, &self.schedule, &opts, &mut tee)
            }
            .map_err(|e| e.context("hjb"))?;
            (mem.into_series()?, report)
        } else {
            solve_backward(self.model.as_ref(), &grid, &controls, &self.schedule, &opts, self.cfg.precision)
                .map_err(|e| e.context("hjb"))?
        };
        let scheme = integrator.scheme_name();
        self.say(format!(
            "{scheme}: solved {} nodes x {} controls x {} steps in {:.1?} ({} workers), \
             clamped feet {} (exterior {})",
            grid.len(),
            controls.len(),
            self.schedule.steps(),
            report.elapsed,
            report.workers,
            report.total_clamps(),
            report.total_exterior_clamps()
        ));
        let trace = series.trace_at(self.y0.as_slice())?;
        let nondecreasing = trace.windows(2).all(|w| w[0] <= w[1]);
        self.say(format!(
            "{scheme}: V(y0, t0) = {:.6}; V(y0, t) non-decreasing in t: {}",
            trace[0],
            if nondecreasing { "yes" } else { "no" }
        ));
        self.info.solves.push((scheme.to_string(), report.clone()));
        Ok((series, report))
    }

    fn synthesize(&mut self, source: &dyn SliceSource, integrator: Integrator) -> Result<TrajectoryRecord> {
        let controls = self.cfg.recon_control_grid(self.model.as_ref())?;
        let rec = reconstruct(self.model.as_ref(), source, &self.y0, &controls, self.cfg.recon_slice)
            .map_err(|e| e.context("synthesis"))?;
        let tag = scheme_file_tag(integrator);
        self.write_record(tag, &rec)?;
        Ok(rec)
    }

    fn write_record(&mut self, tag: &str, rec: &TrajectoryRecord) -> Result<()> {
        self.write(&format!("trajectory_{tag}.csv"), trajectory_csv(rec).as_bytes())?;
        if let Some(d) = derived_csv(self.model.as_ref(), rec) {
            self.write(&format!("derived_{tag}.csv"), d.as_bytes())?;
        }
        Ok(())
    }

    fn baseline(&mut self) -> Result<TrajectoryRecord> {
        let base = base_case(self.model.as_ref(), &self.y0, &self.schedule).map_err(|e| e.context("baseline"))?;
        let fine_schedule = TimeSchedule::new(self.schedule.t0(), self.schedule.tf(), self.schedule.steps() * 100)?;
        let fine = base_case(self.model.as_ref(), &self.y0, &fine_schedule).map_err(|e| e.context("baseline"))?;
        let (k, label) = self.model.objective_component();
        let (coarse, refined) = (base.final_state()[k], fine.final_state()[k]);
        self.say(format!(
            "base case: {label}(tf) = {coarse:.6}, J = {:.6}; with dt/100: {label}(tf) = {refined:.6}, \
             J = {:.6} (shift {:.2e})",
            base.total_cost,
            fine.total_cost,
            (coarse - refined).abs()
        ));
        self.write_record("base", &base)?;
        Ok(base)
    }

    fn escape(&mut self) -> Result<Vec<EscapeReport>> {
        let grid = self.cfg.grid()?;
        let controls = self.cfg.solver_control_grid(self.model.as_ref())?;
        let domain = InvariantBox::from_initial_state(&self.y0);
        let band = self.cfg.escape_band * grid.max_spacing();
        let mut reports = Vec::new();
        for &dt in &self.cfg.escape_dts {
            for integrator in [Integrator::Mpe, Integrator::Euler] {
                let r = escape_diagnostic(
                    self.model.as_ref(),
                    &grid,
                    &controls,
                    &domain,
                    dt,
                    band,
                    integrator,
                    self.cfg.workers,
                )
                .map_err(|e| e.context("escape diagnostic"))?;
                reports.push(r);
            }
        }
        let mut lines = String::from("escape census (percentage of band feet outside the invariant box):\n");
        for pair in reports.chunks(2) {
            let _ = writeln!(
                lines,
                "  dt = {:<8} MPE {:>8.4}%   Euler {:>8.4}%   ({} band nodes)",
                pair[0].dt, pair[0].percentage, pair[1].percentage, pair[0].band_nodes
            );
        }
        self.say(lines.trim_end());
        self.write("escape.csv", escape_csv(&reports).as_bytes())?;
        Ok(reports)
    }

    fn summary(&mut self, base: &TrajectoryRecord, rows: &[(Integrator, &TrajectoryRecord)]) -> Result<()> {
        let (k, label) = self.model.objective_component();
        let row = |scheme: &str, r: &TrajectoryRecord| SummaryRow {
            scheme: scheme.to_string(),
            objective: r.final_state()[k],
            cost: r.total_cost,
        };
        let table = summary_table(
            &label,
            &row("base", base),
            &rows
                .iter()
                .map(|(i, r)| row(i.scheme_name(), r))
                .collect::<Vec<_>>(),
        );
        self.say(table.trim_end());
        self.write("summary.txt", table.as_bytes())
    }
}

fn scheme_file_tag(integrator: Integrator) -> &'static str {
    match integrator {
        Integrator::Mpe => "mpsl",
        Integrator::Euler => "sl",
    }
}

fn check_model(cfg: &RunConfig) -> Result<PipelineOutcome> {
    let model = cfg.model()?;
    let mut report = String::new();
    let a = check_assumptions(model.as_ref(), cfg.check_samples, cfg.seed);
    let _ = writeln!(report, "model {}: {} samples (seed {})", model.name(), a.samples, cfg.seed);
    for o in &a.outcomes {
        match &o.witness {
            None => {
                let _ = writeln!(report, "  {:<40} ok", o.assumption.label());
            }
            Some(w) => {
                let _ = writeln!(
                    report,
                    "  {:<40} FAILED at sample {}: x = {:?}, a = {:?}: {}",
                    o.assumption.label(),
                    w.sample,
                    w.state,
                    w.control,
                    w.detail
                );
            }
        }
    }
    let c = check_conservativity_condition(model.as_ref(), cfg.check_samples, cfg.seed);
    let _ = writeln!(
        report,
        "  {:<40} {} (max |trace| = {:.3e})",
        "conservative policies",
        if c.passed() { "ok" } else { "FAILED" },
        c.max_abs_trace
    );
    let failed: Vec<&str> = a.failed().map(|o| o.assumption.label()).collect();
    if !failed.is_empty() {
        return Err(Error::Data(format!(
            "model {} violates: {}\n{report}",
            model.name(),
            failed.join(", ")
        )));
    }
    if !c.passed() {
        return Err(Error::Data(format!(
            "model {} has non-conservative policies\n{report}",
            model.name()
        )));
    }
    Ok(PipelineOutcome {
        report,
        files: Vec::new(),
    })
}

/// Runs `command` with `cfg`, writing artifacts to `cfg.output_dir`.
pub fn run_pipeline(cfg: &RunConfig, command: Command) -> Result<PipelineOutcome> {
    if command == Command::CheckModel {
        return check_model(cfg);
    }
    let mut run = Run::new(cfg, command)?;
    match command {
        Command::CheckModel => unreachable!("handled above"),
        Command::Solve => {
            if !cfg.snapshots {
                run.say("note: output.snapshots = false, so this solve leaves no slices for `synthesize`");
            }
            let (_, report) = run.solve(cfg.integrator)?;
            let dir = run.snapshot_dir(cfg.integrator);
            if cfg.snapshots {
                run.say(format!(
                    "wrote {} snapshots to {}",
                    report.checksums.len(),
                    dir.display()
                ));
            }
        }
        Command::Synthesize => {
            let grid = cfg.grid()?;
            let dir = run.snapshot_dir(cfg.integrator);
            let source = SnapshotDir::open(&dir, &grid, &run.schedule).map_err(|e| e.context("synthesize"))?;
            let rec = run.synthesize(&source, cfg.integrator)?;
            report_record(&mut run, cfg.integrator.scheme_name(), &rec);
        }
        Command::Baseline => {
            run.baseline()?;
        }
        Command::EscapeReport => {
            run.escape()?;
        }
        Command::Full => {
            let base = run.baseline()?;
            let (mpsl_series, _) = run.solve(Integrator::Mpe)?;
            let mpsl = run.synthesize(&mpsl_series, Integrator::Mpe)?;
            drop(mpsl_series);
            let (sl_series, _) = run.solve(Integrator::Euler)?;
            let sl = run.synthesize(&sl_series, Integrator::Euler)?;
            drop(sl_series);
            run.escape()?;
            run.summary(&base, &[(Integrator::Mpe, &mpsl), (Integrator::Euler, &sl)])?;
        }
    }
    run.finish()
}

fn report_record(run: &mut Run<'_>, scheme: &str, rec: &TrajectoryRecord) {
    let (k, label) = run.model.objective_component();
    run.say(format!(
        "{scheme} reconstruction: {label}(tf) = {:.6}, J = {:.6}",
        rec.final_state()[k],
        rec.total_cost
    ));
}

/// Reads a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    crate::io::config::parse_config(&text).map_err(|e| e.context(&path.display().to_string()))
}

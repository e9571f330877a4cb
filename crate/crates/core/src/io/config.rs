//! Run configuration in TOML.
//!
//! ```toml
//! model = "enzyme"            # enzyme | sird | custom
//! custom = "two-species-chain" # with model = "custom"
//! seed = 7
//!
//! [enzyme]                    # or [sird]; any parameter may be overridden
//! w2 = 20.0
//!
//! [initial]
//! state = [0.7, 0.0, 0.0]
//!
//! [time]
//! steps = 100                 # n̄; or dt = 0.3 (both: must agree)
//!
//! [grid]
//! counts = [61, 61, 61]       # or a single integer for every axis
//! lower = [0.0, 0.0, 0.0]
//! upper = [1.0, 1.0, 1.0]
//!
//! [controls]
//! solver = 101
//! reconstruction = 1000
//!
//! [solver]
//! integrator = "mpe"          # mpe | euler
//! recon_slice = "next"        # next | same
//! workers = 0                 # 0: CPDS_WORKERS or all cores
//! memory_budget_mib = 4096
//! precision = "f64"           # f64 | f32
//! feedback = false
//!
//! [escape]
//! dts = [0.3, 0.6, 1.2]
//! band = 10.0                 # in units of the largest grid spacing
//!
//! [output]
//! dir = "out"
//! snapshots = false
//!
//! [check]
//! samples = 10000
//! ```
//!
//! Unknown keys are rejected. A `[manifest]` table is accepted and ignored,
//! so a run manifest doubles as a configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::UniformGrid;
use crate::hjb::{ControlGrid, Precision, SolverOptions, TimeSchedule};
use crate::integrators::Integrator;
use crate::model::{CpdsModel, StateVector};
use crate::models::{custom, enzyme, sird, EnzymeParams, SirdParams};
use crate::synthesis::ReconSlice;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Counts {
    All(usize),
    PerAxis(Vec<usize>),
}

impl Counts {
    fn expand(&self, dim: usize, what: &str) -> Result<Vec<usize>> {
        match self {
            Counts::All(n) => Ok(vec![*n; dim]),
            Counts::PerAxis(v) if v.len() == dim => Ok(v.clone()),
            Counts::PerAxis(v) => Err(Error::Config(format!(
                "{what} has {} entries, expected {dim}",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialSection {
    state: Option<Vec<f64>>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TimeSection {
    steps: Option<usize>,
    dt: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSection {
    counts: Option<Counts>,
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlsSection {
    solver: Option<Counts>,
    reconstruction: Option<Counts>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverSection {
    integrator: Option<Integrator>,
    recon_slice: Option<ReconSlice>,
    workers: Option<usize>,
    memory_budget_mib: Option<u64>,
    precision: Option<Precision>,
    feedback: Option<bool>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EscapeSection {
    dts: Option<Vec<f64>>,
    band: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    dir: Option<PathBuf>,
    snapshots: Option<bool>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckSection {
    samples: Option<usize>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: Option<String>,
    custom: Option<String>,
    seed: Option<u64>,
    enzyme: Option<EnzymeParams>,
    sird: Option<SirdParams>,
    initial: Option<InitialSection>,
    time: Option<TimeSection>,
    grid: Option<GridSection>,
    controls: Option<ControlsSection>,
    solver: Option<SolverSection>,
    escape: Option<EscapeSection>,
    output: Option<OutputSection>,
    check: Option<CheckSection>,
    /// Run metadata written by manifests; accepted and ignored.
    #[serde(skip_serializing)]
    #[allow(dead_code)]
    manifest: Option<toml::Table>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Enzyme(EnzymeParams),
    Sird(SirdParams),
    Custom(String),
}

impl ModelSpec {
    pub fn kind(&self) -> &str {
        match self {
            ModelSpec::Enzyme(_) => "enzyme",
            ModelSpec::Sird(_) => "sird",
            ModelSpec::Custom(_) => "custom",
        }
    }
}

/// A fully resolved and validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub initial: Vec<f64>,
    pub steps: usize,
    pub grid_counts: Vec<usize>,
    pub grid_lower: Vec<f64>,
    pub grid_upper: Vec<f64>,
    pub solver_controls: Vec<usize>,
    pub recon_controls: Vec<usize>,
    pub integrator: Integrator,
    pub recon_slice: ReconSlice,
    pub workers: usize,
    pub memory_budget_mib: u64,
    pub precision: Precision,
    pub feedback: bool,
    pub escape_dts: Vec<f64>,
    pub escape_band: f64,
    pub output_dir: PathBuf,
    pub snapshots: bool,
    pub check_samples: usize,
    pub seed: u64,
}

struct Defaults {
    steps: usize,
    grid: usize,
    solver_controls: usize,
    recon_controls: usize,
    escape_dts: &'static [f64],
}

fn defaults_for(model: &ModelSpec) -> Defaults {
    match model {
        ModelSpec::Enzyme(_) => Defaults {
            steps: 100,
            grid: 61,
            solver_controls: 101,
            recon_controls: 1000,
            escape_dts: &[0.3, 0.6, 1.2, 2.4, 4.8],
        },
        ModelSpec::Sird(_) => Defaults {
            steps: 200,
            grid: 21,
            solver_controls: 21,
            recon_controls: 1001,
            escape_dts: &[0.45, 0.9, 1.8, 3.6, 7.2],
        },
        ModelSpec::Custom(_) => Defaults {
            steps: 20,
            grid: 21,
            solver_controls: 11,
            recon_controls: 101,
            escape_dts: &[0.05, 0.1, 0.2, 0.5, 1.0],
        },
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    resolve(raw)
}

fn resolve(raw: RawConfig) -> Result<RunConfig> {
    let kind = raw.model.as_deref().ok_or_else(|| {
        Error::Config("missing top-level key `model` (enzyme, sird or custom)".into())
    })?;
    let model = match kind {
        "enzyme" => {
            if raw.sird.is_some() || raw.custom.is_some() {
                return Err(Error::Config("model = \"enzyme\" takes only an [enzyme] section".into()));
            }
            ModelSpec::Enzyme(raw.enzyme.unwrap_or_default())
        }
        "sird" => {
            if raw.enzyme.is_some() || raw.custom.is_some() {
                return Err(Error::Config("model = \"sird\" takes only a [sird] section".into()));
            }
            ModelSpec::Sird(raw.sird.unwrap_or_default())
        }
        "custom" => {
            if raw.enzyme.is_some() || raw.sird.is_some() {
                return Err(Error::Config("model = \"custom\" takes no parameter sections".into()));
            }
            let name = raw.custom.ok_or_else(|| {
                Error::Config(format!(
                    "model = \"custom\" needs `custom = <name>`, one of {:?}",
                    custom::NAMES
                ))
            })?;
            ModelSpec::Custom(name)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown model {other:?} (expected enzyme, sird or custom)"
            )))
        }
    };
    let d = defaults_for(&model);

    // build once with the default initial state to learn dimension and horizon
    let probe = build_model(&model, None)?;
    let dim = probe.dimension();
    let (t0, tf) = probe.time_horizon();

    let initial = raw
        .initial
        .and_then(|s| s.state)
        .unwrap_or_else(|| probe.initial_state().into_vec());

    let time = raw.time.unwrap_or_default();
    let steps = match (time.steps, time.dt) {
        (Some(n), None) => n,
        (None, Some(dt)) => TimeSchedule::from_dt(t0, tf, dt)?.steps(),
        (None, None) => d.steps,
        (Some(n), Some(dt)) => {
            if n == 0 || (dt * n as f64 - (tf - t0)).abs() > 1e-12 * (1.0 + (tf - t0).abs()) {
                return Err(Error::Config(format!(
                    "time.dt = {dt} and time.steps = {n} disagree: dt·steps must equal tf − t0 = {}",
                    tf - t0
                )));
            }
            n
        }
    };
    TimeSchedule::new(t0, tf, steps)?;

    let grid = raw.grid.unwrap_or_default();
    let grid_counts = grid
        .counts
        .unwrap_or(Counts::All(d.grid))
        .expand(dim, "grid.counts")?;
    let grid_lower = grid.lower.unwrap_or_else(|| vec![0.0; dim]);
    let grid_upper = grid.upper.unwrap_or_else(|| vec![1.0; dim]);
    UniformGrid::new(grid_lower.clone(), grid_upper.clone(), grid_counts.clone())
        .map_err(|e| e.context("[grid]"))?;

    let cdim = probe.control_dimension();
    let controls = raw.controls.unwrap_or_default();
    let solver_controls = controls
        .solver
        .unwrap_or(Counts::All(d.solver_controls))
        .expand(cdim, "controls.solver")?;
    let recon_controls = controls
        .reconstruction
        .unwrap_or(Counts::All(d.recon_controls))
        .expand(cdim, "controls.reconstruction")?;

    let solver = raw.solver.unwrap_or_default();
    let escape = raw.escape.unwrap_or_default();
    let output = raw.output.unwrap_or_default();

    let cfg = RunConfig {
        model,
        initial,
        steps,
        grid_counts,
        grid_lower,
        grid_upper,
        solver_controls,
        recon_controls,
        integrator: solver.integrator.unwrap_or_default(),
        recon_slice: solver.recon_slice.unwrap_or_default(),
        workers: solver.workers.unwrap_or(0),
        memory_budget_mib: solver.memory_budget_mib.unwrap_or(4096),
        precision: solver.precision.unwrap_or_default(),
        feedback: solver.feedback.unwrap_or(false),
        escape_dts: escape.dts.unwrap_or_else(|| d.escape_dts.to_vec()),
        escape_band: escape.band.unwrap_or(10.0),
        output_dir: output.dir.unwrap_or_else(|| PathBuf::from("out")),
        snapshots: output.snapshots.unwrap_or(false),
        check_samples: raw.check.and_then(|c| c.samples).unwrap_or(10_000),
        seed: raw.seed.unwrap_or(0),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Instantiates the configured model, optionally with a custom initial state.
fn build_model(spec: &ModelSpec, initial: Option<&[f64]>) -> Result<Box<dyn CpdsModel>> {
    Ok(match spec {
        ModelSpec::Enzyme(p) => Box::new(match initial {
            Some(y0) => enzyme::enzyme_model_with_initial(p.clone(), y0.to_vec())?,
            None => enzyme::enzyme_model(p.clone())?,
        }),
        ModelSpec::Sird(p) => Box::new(match initial {
            Some(y0) => sird::sird_model_with_initial(p.clone(), y0.to_vec())?,
            None => sird::sird_model(p.clone())?,
        }),
        ModelSpec::Custom(name) => {
            let m = custom::by_name(name).ok_or_else(|| {
                Error::Config(format!("unknown custom model {name:?}, one of {:?}", custom::NAMES))
            })?;
            if let Some(y0) = initial {
                if y0.len() != m.dimension() {
                    return Err(Error::Config(format!(
                        "initial state has {} components, {name} has {}",
                        y0.len(),
                        m.dimension()
                    )));
                }
            }
            m
        }
    })
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let model = build_model(&self.model, Some(&self.initial))?;
        StateVector::new(self.initial.clone()).map_err(|e| e.context("[initial] state"))?;
        let grid = self.grid()?;
        if self.initial.iter().enumerate().any(|(k, v)| *v < grid.lower()[k] || *v > grid.upper()[k]) {
            return Err(Error::Config(format!(
                "initial state {:?} lies outside the grid box",
                self.initial
            )));
        }
        let bx = model.control_box();
        ControlGrid::new(bx, self.solver_controls.clone()).map_err(|e| e.context("controls.solver"))?;
        ControlGrid::new(bx, self.recon_controls.clone()).map_err(|e| e.context("controls.reconstruction"))?;
        if self.escape_dts.iter().any(|dt| !(*dt > 0.0 && dt.is_finite())) {
            return Err(Error::Config("escape.dts must all be positive".into()));
        }
        if !(self.escape_band >= 0.0 && self.escape_band.is_finite()) {
            return Err(Error::Config("escape.band must be >= 0".into()));
        }
        if self.memory_budget_mib == 0 {
            return Err(Error::Config("solver.memory_budget_mib must be positive".into()));
        }
        if self.check_samples == 0 {
            return Err(Error::Config("check.samples must be positive".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Box<dyn CpdsModel>> {
        build_model(&self.model, Some(&self.initial))
    }

    pub fn grid(&self) -> Result<UniformGrid> {
        UniformGrid::new(self.grid_lower.clone(), self.grid_upper.clone(), self.grid_counts.clone())
    }

    pub fn schedule(&self, model: &dyn CpdsModel) -> Result<TimeSchedule> {
        let (t0, tf) = model.time_horizon();
        TimeSchedule::new(t0, tf, self.steps)
    }

    pub fn solver_control_grid(&self, model: &dyn CpdsModel) -> Result<ControlGrid> {
        ControlGrid::new(model.control_box(), self.solver_controls.clone())
    }

    pub fn recon_control_grid(&self, model: &dyn CpdsModel) -> Result<ControlGrid> {
        ControlGrid::new(model.control_box(), self.recon_controls.clone())
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            integrator: self.integrator,
            workers: self.workers,
            record_feedback: self.feedback,
            memory_budget: self.memory_budget_mib << 20,
            ..SolverOptions::default()
        }
    }

    /// The configuration as a complete TOML document that parses back to
    /// an equal `RunConfig`.
    pub fn to_toml(&self) -> Result<String> {
        let (enzyme, sird, custom) = match &self.model {
            ModelSpec::Enzyme(p) => (Some(p.clone()), None, None),
            ModelSpec::Sird(p) => (None, Some(p.clone()), None),
            ModelSpec::Custom(n) => (None, None, Some(n.clone())),
        };
        let raw = RawConfig {
            model: Some(self.model.kind().to_string()),
            custom,
            seed: Some(self.seed),
            enzyme,
            sird,
            initial: Some(InitialSection {
                state: Some(self.initial.clone()),
            }),
            time: Some(TimeSection {
                steps: Some(self.steps),
                dt: None,
            }),
            grid: Some(GridSection {
                counts: Some(Counts::PerAxis(self.grid_counts.clone())),
                lower: Some(self.grid_lower.clone()),
                upper: Some(self.grid_upper.clone()),
            }),
            controls: Some(ControlsSection {
                solver: Some(Counts::PerAxis(self.solver_controls.clone())),
                reconstruction: Some(Counts::PerAxis(self.recon_controls.clone())),
            }),
            solver: Some(SolverSection {
                integrator: Some(self.integrator),
                recon_slice: Some(self.recon_slice),
                workers: Some(self.workers),
                memory_budget_mib: Some(self.memory_budget_mib),
                precision: Some(self.precision),
                feedback: Some(self.feedback),
            }),
            escape: Some(EscapeSection {
                dts: Some(self.escape_dts.clone()),
                band: Some(self.escape_band),
            }),
            output: Some(OutputSection {
                dir: Some(self.output_dir.clone()),
                snapshots: Some(self.snapshots),
            }),
            check: Some(CheckSection {
                samples: Some(self.check_samples),
            }),
            manifest: None,
        };
        toml::to_string(&raw).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enzyme_defaults() {
        let c = parse_config("model = \"enzyme\"\n[enzyme]\n").unwrap();
        assert_eq!(c.model, ModelSpec::Enzyme(EnzymeParams::default()));
        assert_eq!(c.initial, vec![0.7, 0.0, 0.0]);
        assert_eq!(c.steps, 100);
        let m = c.model().unwrap();
        assert_eq!(c.schedule(m.as_ref()).unwrap().dt(), 0.3);
        assert_eq!(c.grid_counts, vec![61, 61, 61]);
        assert_eq!(c.solver_controls, vec![101]);
        assert_eq!(c.integrator, Integrator::Mpe);
    }

    #[test]
    fn sird_defaults() {
        let c = parse_config("model = \"sird\"\n[sird]\n").unwrap();
        assert_eq!(c.steps, 200);
        let m = c.model().unwrap();
        assert_eq!(c.schedule(m.as_ref()).unwrap().dt(), 0.45);
        let rc = c.recon_control_grid(m.as_ref()).unwrap();
        let da = rc.point(1).as_slice()[0] - rc.point(0).as_slice()[0];
        assert!((da - 1e-3).abs() < 1e-15);
        assert_eq!(c.grid_counts, vec![21; 4]);
        assert_eq!(c.solver_controls, vec![21]);
    }

    #[test]
    fn inconsistent_schedule_rejected() {
        let err = parse_config("model = \"enzyme\"\n[time]\nsteps = 100\ndt = 0.25\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(parse_config("model = \"enzyme\"\n[time]\ndt = 0.7\n").is_err());
        let ok = parse_config("model = \"enzyme\"\n[time]\nsteps = 50\ndt = 0.6\n").unwrap();
        assert_eq!(ok.steps, 50);
    }

    #[test]
    fn unknown_keys_and_types_rejected_with_location() {
        let err = parse_config("model = \"enzyme\"\n[enzyme]\nk3 = 1.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("k3") && msg.contains("line 3"), "{msg}");
        let err = parse_config("model = \"enzyme\"\n[grid]\ncounts = \"many\"\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(parse_config("model = \"plasma\"\n").is_err());
        assert!(parse_config("[enzyme]\n").is_err());
        assert!(parse_config("model = \"enzyme\"\n[sird]\n").is_err());
    }

    #[test]
    fn constraint_violations_rejected() {
        assert!(parse_config("model = \"enzyme\"\n[grid]\ncounts = 1\n").is_err());
        assert!(parse_config("model = \"enzyme\"\n[grid]\ncounts = [5, 5]\n").is_err());
        assert!(parse_config("model = \"enzyme\"\n[controls]\nsolver = 1\n").is_err());
        assert!(parse_config("model = \"enzyme\"\n[initial]\nstate = [2.0, 0.0, 0.0]\n").is_err());
        assert!(parse_config("model = \"enzyme\"\n[enzyme]\nt_amb = 500.0\n").is_err());
    }

    #[test]
    fn custom_models_by_name() {
        let c = parse_config("model = \"custom\"\ncustom = \"two-species-chain\"\n").unwrap();
        assert_eq!(c.model().unwrap().name(), "two-species-chain");
        assert!(parse_config("model = \"custom\"\ncustom = \"nope\"\n").is_err());
        assert!(parse_config("model = \"custom\"\n").is_err());
    }

    #[test]
    fn toml_round_trip_and_manifest_table_ignored() {
        let c = parse_config(
            "model = \"sird\"\nseed = 9\n[sird]\nkappa = 0.3\n[grid]\ncounts = [5, 6, 7, 8]\n\
             [solver]\nintegrator = \"euler\"\nrecon_slice = \"same\"\nprecision = \"f32\"\n",
        )
        .unwrap();
        let text = c.to_toml().unwrap();
        let with_manifest = format!("{text}\n[manifest]\nchecksum = \"abc\"\n");
        assert_eq!(parse_config(&with_manifest).unwrap(), c);
    }
}

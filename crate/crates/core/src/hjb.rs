//! Backward semi-Lagrangian value iteration.
//!
//! ```text
//! V_i^n̄     = φ(x_i)
//! V_i^{n−1} = min_a { I[V^n](foot(x_i, a, Δt)) + Δt ℓ(x_i, a, t^n) }
//! ```
//!
//! The minimum is taken by exhaustive sweep over a uniform control grid with
//! ties going to the lowest control index. With the MPE foot this is the
//! MPSL scheme; with the explicit Euler foot it is the classical SL scheme.
//!
//! Each node reads only the previous slice, so a step is embarrassingly
//! parallel. Nodes are split into contiguous chunks; counts are summed and
//! extrema folded, both order-independent, so results are bitwise identical
//! for any worker count.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{NodalValues, ScalarField, UniformGrid};
use crate::integrators::{foot, singular_error, ControlPolicies, NodeRates};
pub use crate::integrators::Integrator;
use crate::linalg::{SquareMatrix, MAX_DIM};
use crate::model::{ControlBox, ControlPoint, CpdsModel};

/// Environment variable consulted when the worker count is left at 0.
pub const WORKERS_ENV: &str = "CPDS_WORKERS";

/// Default in-memory budget for retained slices.
pub const DEFAULT_MEMORY_BUDGET: u64 = 4 << 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSchedule {
    t0: f64,
    tf: f64,
    steps: usize,
    dt: f64,
}

impl TimeSchedule {
    pub fn new(t0: f64, tf: f64, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && tf.is_finite() && t0 < tf) {
            return Err(Error::Config(format!("time horizon [{t0}, {tf}] is empty")));
        }
        if steps == 0 {
            return Err(Error::Config("need at least one time step".into()));
        }
        Ok(TimeSchedule {
            t0,
            tf,
            steps,
            dt: (tf - t0) / steps as f64,
        })
    }

    /// Schedule with step `dt`, which must divide the horizon to 1e-12.
    pub fn from_dt(t0: f64, tf: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let ratio = (tf - t0) / dt;
        let steps = ratio.round();
        if steps < 1.0 || (steps * dt - (tf - t0)).abs() > 1e-12 * (1.0 + (tf - t0).abs()) {
            return Err(Error::Config(format!(
                "dt = {dt} does not divide the horizon [{t0}, {tf}] into whole steps"
            )));
        }
        Self::new(t0, tf, steps as usize)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    /// Number of steps n̄.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `t^n = t0 + n Δt`, with `t^n̄ = tf` exactly.
    pub fn time(&self, n: usize) -> f64 {
        if n >= self.steps {
            self.tf
        } else {
            self.t0 + n as f64 * self.dt
        }
    }
}

/// Uniform tensor grid over the control box, endpoints included. Points are
/// flattened row-major like state grids.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    counts: Vec<usize>,
    points: Vec<ControlPoint>,
}

impl ControlGrid {
    pub fn new(bx: &ControlBox, counts: Vec<usize>) -> Result<Self> {
        if counts.len() != bx.dim() {
            return Err(Error::Config(format!(
                "control grid has {} axes, control box has {}",
                counts.len(),
                bx.dim()
            )));
        }
        for (k, &c) in counts.iter().enumerate() {
            let degenerate = bx.lower()[k] == bx.upper()[k];
            if c == 0 || (c == 1 && !degenerate) {
                return Err(Error::Config(format!(
                    "control axis {k} needs at least 2 points to cover its interval, got {c}"
                )));
            }
        }
        let total: usize = counts.iter().product();
        let mut points = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut a = vec![0.0; counts.len()];
            for k in (0..counts.len()).rev() {
                let i = rem % counts[k];
                rem /= counts[k];
                let (lo, hi) = (bx.lower()[k], bx.upper()[k]);
                a[k] = if counts[k] == 1 {
                    lo
                } else if i + 1 == counts[k] {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (counts[k] - 1) as f64
                };
            }
            points.push(ControlPoint::new(a));
        }
        Ok(ControlGrid { counts, points })
    }

    /// Same count on every axis.
    pub fn uniform(bx: &ControlBox, count: usize) -> Result<Self> {
        Self::new(bx, vec![count; bx.dim()])
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, k: usize) -> &ControlPoint {
        &self.points[k]
    }

    pub fn points(&self) -> &[ControlPoint] {
        &self.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Halves slice memory. Values are rounded to about 7 significant
    /// digits on storage, which is also the accuracy of anything
    /// reconstructed from them.
    F32,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(Error::Config(format!("unknown precision {other:?} (f64 or f32)"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SliceData {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

impl SliceData {
    fn store(values: &[f64], precision: Precision) -> Self {
        match precision {
            Precision::F64 => SliceData::F64(values.to_vec()),
            Precision::F32 => SliceData::F32(values.iter().map(|v| *v as f32).collect()),
        }
    }

    pub fn to_f64(&self) -> Cow<'_, [f64]> {
        match self {
            SliceData::F64(v) => Cow::Borrowed(v),
            SliceData::F32(v) => Cow::Owned(v.iter().map(|x| *x as f64).collect()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SliceData::F64(v) => v.len(),
            SliceData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl NodalValues for SliceData {
    #[inline]
    fn node_count(&self) -> usize {
        self.len()
    }
    #[inline]
    fn value(&self, flat: usize) -> f64 {
        match self {
            SliceData::F64(v) => v[flat],
            SliceData::F32(v) => v[flat] as f64,
        }
    }
}

/// Read access to the slices of a solved value function.
pub trait SliceSource {
    fn grid(&self) -> &UniformGrid;
    fn schedule(&self) -> &TimeSchedule;
    /// Values of slice `n` as 64-bit reals.
    fn load(&self, n: usize) -> Result<Cow<'_, [f64]>>;
    /// Recorded argmin control indices of slice `n`, if any.
    fn feedback(&self, n: usize) -> Result<Option<Cow<'_, [u32]>>>;
}

/// All slices `V^0 … V^n̄` of a solve, held in memory.
#[derive(Debug, Clone)]
pub struct ValueFunctionSeries {
    grid: UniformGrid,
    schedule: TimeSchedule,
    slices: Vec<SliceData>,
    feedback: Option<Vec<Vec<u32>>>,
}

impl ValueFunctionSeries {
    pub fn grid(&self) -> &UniformGrid {
        &self.grid
    }

    pub fn schedule(&self) -> &TimeSchedule {
        &self.schedule
    }

    /// Number of stored slices (n̄ + 1).
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slice(&self, n: usize) -> &SliceData {
        &self.slices[n]
    }

    pub fn field(&self, n: usize) -> Result<ScalarField> {
        ScalarField::new(self.grid.clone(), self.slices[n].to_f64().into_owned())
    }

    pub fn feedback_slice(&self, n: usize) -> Option<&[u32]> {
        self.feedback.as_ref().and_then(|f| f.get(n)).map(|v| v.as_slice())
    }

    pub fn has_feedback(&self) -> bool {
        self.feedback.is_some()
    }

    /// `V^n` interpolated at `p`.
    pub fn interpolate(&self, n: usize, p: &[f64]) -> Result<(f64, bool)> {
        self.grid.interpolate(&self.slices[n], p)
    }

    /// `V(p, t^n)` for every n.
    pub fn trace_at(&self, p: &[f64]) -> Result<Vec<f64>> {
        (0..self.slices.len())
            .map(|n| self.interpolate(n, p).map(|(v, _)| v))
            .collect()
    }

    /// Largest nodal difference between slice 0 of two series on the same grid.
    pub fn max_abs_difference(&self, other: &Self, n: usize, m: usize) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::Contract("series live on different grids".into()));
        }
        let (a, b) = (self.slices[n].to_f64(), other.slices[m].to_f64());
        Ok(a.iter().zip(b.iter()).fold(0.0, |acc, (x, y)| acc.max((x - y).abs())))
    }
}

impl SliceSource for ValueFunctionSeries {
    fn grid(&self) -> &UniformGrid {
        &self.grid
    }

    fn schedule(&self) -> &TimeSchedule {
        &self.schedule
    }

    fn load(&self, n: usize) -> Result<Cow<'_, [f64]>> {
        self.slices
            .get(n)
            .map(|s| s.to_f64())
            .ok_or_else(|| Error::Contract(format!("slice {n} outside series of {}", self.slices.len())))
    }

    fn feedback(&self, n: usize) -> Result<Option<Cow<'_, [u32]>>> {
        Ok(self.feedback_slice(n).map(Cow::Borrowed))
    }
}

/// Receives slices as the solver produces them, from n̄ down to 0.
pub trait SliceSink {
    fn accept(&mut self, n: usize, values: &[f64], feedback: Option<&[u32]>) -> Result<()>;

    /// Bytes of memory this sink retains per slice of `nodes` values.
    fn resident_bytes_per_slice(&self, nodes: usize, feedback: bool) -> u64;
}

/// Keeps every slice in memory at the chosen precision.
#[derive(Debug)]
pub struct MemorySink {
    grid: UniformGrid,
    schedule: TimeSchedule,
    precision: Precision,
    slices: Vec<Option<SliceData>>,
    feedback: Vec<Option<Vec<u32>>>,
}

impl MemorySink {
    pub fn new(grid: UniformGrid, schedule: TimeSchedule, precision: Precision) -> Self {
        let len = schedule.steps() + 1;
        MemorySink {
            grid,
            schedule,
            precision,
            slices: vec![None; len],
            feedback: vec![None; len],
        }
    }

    pub fn into_series(self) -> Result<ValueFunctionSeries> {
        let slices = self
            .slices
            .into_iter()
            .enumerate()
            .map(|(n, s)| s.ok_or_else(|| Error::Invariant(format!("slice {n} was never produced"))))
            .collect::<Result<Vec<_>>>()?;
        let any_feedback = self.feedback.iter().any(|f| f.is_some());
        let feedback = any_feedback.then(|| {
            self.feedback
                .into_iter()
                .map(|f| f.unwrap_or_default())
                .collect::<Vec<_>>()
        });
        Ok(ValueFunctionSeries {
            grid: self.grid,
            schedule: self.schedule,
            slices,
            feedback,
        })
    }
}

impl SliceSink for MemorySink {
    fn accept(&mut self, n: usize, values: &[f64], feedback: Option<&[u32]>) -> Result<()> {
        let slot = self
            .slices
            .get_mut(n)
            .ok_or_else(|| Error::Contract(format!("slice index {n} beyond schedule")))?;
        *slot = Some(SliceData::store(values, self.precision));
        if let Some(f) = feedback {
            self.feedback[n] = Some(f.to_vec());
        }
        Ok(())
    }

    fn resident_bytes_per_slice(&self, nodes: usize, feedback: bool) -> u64 {
        let per_node = self.precision.bytes() + if feedback { 4 } else { 0 };
        (nodes * per_node) as u64
    }
}

/// Forwards every slice to two sinks.
pub struct Tee<'a> {
    pub first: &'a mut dyn SliceSink,
    pub second: &'a mut dyn SliceSink,
}

impl SliceSink for Tee<'_> {
    fn accept(&mut self, n: usize, values: &[f64], feedback: Option<&[u32]>) -> Result<()> {
        self.first.accept(n, values, feedback)?;
        self.second.accept(n, values, feedback)
    }

    fn resident_bytes_per_slice(&self, nodes: usize, feedback: bool) -> u64 {
        self.first.resident_bytes_per_slice(nodes, feedback) + self.second.resident_bytes_per_slice(nodes, feedback)
    }
}

/// SHA-256 of the little-endian bytes of a slice, as lowercase hex.
pub fn slice_checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `V^n̄_i = φ(x_i)`.
pub fn terminal_slice(model: &dyn CpdsModel, grid: &UniformGrid) -> Result<ScalarField> {
    check_dims(model, grid)?;
    let n = grid.dim();
    let mut buf = [0.0; MAX_DIM];
    let mut values = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        grid.node_into(i, &mut buf);
        let v = model.final_cost(&buf[..n]);
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "final cost is {v} at node {i} {:?}",
                &buf[..n]
            )));
        }
        values.push(v);
    }
    ScalarField::new(grid.clone(), values)
}

fn check_dims(model: &dyn CpdsModel, grid: &UniformGrid) -> Result<()> {
    if grid.dim() != model.dimension() {
        return Err(Error::Contract(format!(
            "grid has {} axes, model {} has {} species",
            grid.dim(),
            model.name(),
            model.dimension()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    /// Clamped feet from nodes whose MPE feet may legitimately leave the
    /// box, or any clamped Euler foot.
    pub clamp_count: u64,
    /// Clamped MPE feet from nodes outside the mass simplex the box holds.
    pub exterior_clamps: u64,
    pub ell_min: f64,
    pub ell_max: f64,
}

impl StepStats {
    fn empty() -> Self {
        StepStats {
            clamp_count: 0,
            exterior_clamps: 0,
            ell_min: f64::INFINITY,
            ell_max: f64::NEG_INFINITY,
        }
    }

    #[cfg(feature = "parallel")]
    fn merge(self, o: StepStats) -> StepStats {
        StepStats {
            clamp_count: self.clamp_count + o.clamp_count,
            exterior_clamps: self.exterior_clamps + o.exterior_clamps,
            ell_min: self.ell_min.min(o.ell_min),
            ell_max: self.ell_max.max(o.ell_max),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub values: Vec<f64>,
    pub feedback: Option<Vec<u32>>,
    pub stats: StepStats,
}

/// Everything a step needs besides the slice itself.
struct StepPlan<'a> {
    model: &'a dyn CpdsModel,
    grid: &'a UniformGrid,
    controls: &'a ControlGrid,
    policies: Vec<ControlPolicies>,
    integrator: Integrator,
    dt: f64,
    simplex_ok: bool,
    simplex_mass: f64,
}

impl<'a> StepPlan<'a> {
    fn new(
        model: &'a dyn CpdsModel,
        grid: &'a UniformGrid,
        controls: &'a ControlGrid,
        integrator: Integrator,
        dt: f64,
    ) -> Result<Self> {
        check_dims(model, grid)?;
        if controls.is_empty() {
            return Err(Error::Config("control grid is empty".into()));
        }
        if controls.point(0).dim() != model.control_dimension() {
            return Err(Error::Contract("control grid dimension does not match the model".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Contract(format!("time step must be positive, got {dt}")));
        }
        let policies = controls
            .points()
            .iter()
            .map(|a| ControlPolicies::evaluate(model, a.as_slice()))
            .collect();
        let simplex_mass = grid.upper().iter().copied().fold(f64::INFINITY, f64::min);
        Ok(StepPlan {
            model,
            grid,
            controls,
            policies,
            integrator,
            dt,
            simplex_ok: grid.lower().iter().all(|l| *l <= 0.0),
            simplex_mass,
        })
    }

    fn guarded(&self, xs: &[f64]) -> bool {
        let mass: f64 = xs.iter().sum();
        self.integrator == Integrator::Mpe && self.simplex_ok && xs.iter().all(|v| *v >= 0.0) && mass <= self.simplex_mass
    }

    /// Foot of node `node` under control `k`, located on the grid: lower
    /// cell corner and clamp flag, local coordinates in `local`.
    #[allow(clippy::too_many_arguments)]
    #[inline]
    fn locate_foot(
        &self,
        node: usize,
        xs: &[f64],
        guarded: bool,
        rates: &NodeRates,
        k: usize,
        scratch: &mut SquareMatrix,
        local: &mut [f64; MAX_DIM],
    ) -> Result<(usize, bool)> {
        let n = xs.len();
        let a = self.controls.point(k).as_slice();
        let mut y = [0.0; MAX_DIM];
        foot(self.integrator, rates, &self.policies[k], self.dt, &mut y, scratch)
            .map_err(|e| singular_error(e, xs, a, self.dt))?;
        let ys = &y[..n];
        if ys.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite foot {ys:?} from node {node} {xs:?} with control {a:?}"
            )));
        }
        let (base, clamped) = self.grid.locate_cell(ys, local);
        if clamped && guarded {
            return Err(Error::Invariant(format!(
                "MPE foot {ys:?} of node {node} {xs:?} under control {a:?} left the grid box"
            )));
        }
        Ok((base, clamped))
    }

    /// Updates nodes `start..start + out.len()`, reading foot locations from
    /// `cache` when given.
    fn run_chunk(
        &self,
        v_next: &[f64],
        t_next: f64,
        start: usize,
        out: &mut [f64],
        mut fb: Option<&mut [u32]>,
        cache: Option<&FootCache>,
    ) -> Result<StepStats> {
        let n = self.grid.dim();
        let m = self.policies.len();
        let mut stats = StepStats::empty();
        let mut x = [0.0; MAX_DIM];
        let mut local = [0.0; MAX_DIM];
        let mut rates = NodeRates::new(n);
        let mut scratch = SquareMatrix::zeros(n);
        for (off, slot) in out.iter_mut().enumerate() {
            let node = start + off;
            self.grid.node_into(node, &mut x);
            let xs = &x[..n];
            let guarded = cache.is_none() && self.guarded(xs);
            if cache.is_none() {
                rates.evaluate(self.model, xs);
            }
            let mut best = f64::INFINITY;
            let mut best_k = 0usize;
            for k in 0..m {
                let (v, clamped) = match cache {
                    Some(c) => {
                        let pair = node * m + k;
                        let base = c.base[pair] as usize;
                        (self.grid.blend_cell(v_next, base, &c.local[pair * n..(pair + 1) * n]), c.clamped[pair] != 0)
                    }
                    None => {
                        let (base, clamped) = self.locate_foot(node, xs, guarded, &rates, k, &mut scratch, &mut local)?;
                        (self.grid.blend_cell(v_next, base, &local[..n]), clamped)
                    }
                };
                if clamped {
                    match self.integrator {
                        Integrator::Mpe => stats.exterior_clamps += 1,
                        Integrator::Euler => stats.clamp_count += 1,
                    }
                }
                let ell = self.model.running_cost(xs, self.controls.point(k).as_slice(), t_next);
                stats.ell_min = stats.ell_min.min(ell);
                stats.ell_max = stats.ell_max.max(ell);
                let cand = v + self.dt * ell;
                if cand < best {
                    best = cand;
                    best_k = k;
                }
            }
            if !best.is_finite() {
                return Err(Error::Numeric(format!(
                    "value at node {node} {xs:?} is {best} (running cost non-finite?)"
                )));
            }
            *slot = best;
            if let Some(f) = fb.as_deref_mut() {
                f[off] = best_k as u32;
            }
        }
        Ok(stats)
    }

    /// Fills the cache entries of nodes `start..`; `base` holds one entry
    /// per (node, control) pair of the chunk.
    fn cache_chunk(&self, start: usize, base: &mut [u32], local: &mut [f64], clamped: &mut [u8]) -> Result<()> {
        let n = self.grid.dim();
        let m = self.policies.len();
        let mut x = [0.0; MAX_DIM];
        let mut loc = [0.0; MAX_DIM];
        let mut rates = NodeRates::new(n);
        let mut scratch = SquareMatrix::zeros(n);
        for off in 0..base.len() / m {
            let node = start + off;
            self.grid.node_into(node, &mut x);
            let xs = &x[..n];
            let guarded = self.guarded(xs);
            rates.evaluate(self.model, xs);
            for k in 0..m {
                let pair = off * m + k;
                let (b, c) = self.locate_foot(node, xs, guarded, &rates, k, &mut scratch, &mut loc)?;
                base[pair] = b as u32;
                local[pair * n..(pair + 1) * n].copy_from_slice(&loc[..n]);
                clamped[pair] = c as u8;
            }
        }
        Ok(())
    }

    fn step(
        &self,
        v_next: &[f64],
        t_next: f64,
        feedback: bool,
        pool: &Workers,
        cache: Option<&FootCache>,
    ) -> Result<StepOutput> {
        let len = self.grid.len();
        if v_next.len() != len {
            return Err(Error::Contract(format!(
                "slice has {} values for {len} nodes",
                v_next.len()
            )));
        }
        if let Some(i) = v_next.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("previous slice is non-finite at node {i}")));
        }
        let mut values = vec![0.0; len];
        let mut fb = feedback.then(|| vec![0u32; len]);
        let stats = pool.run(self, v_next, t_next, &mut values, fb.as_deref_mut(), cache)?;
        Ok(StepOutput {
            values,
            feedback: fb,
            stats,
        })
    }
}

/// Worker pool for the node sweep.
enum Workers {
    Serial,
    #[cfg(feature = "parallel")]
    Pool(rayon::ThreadPool, usize),
}

impl Workers {
    fn new(requested: usize) -> Result<Self> {
        let count = resolve_workers(requested)?;
        #[cfg(feature = "parallel")]
        {
            if count > 1 {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(count)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start {count} workers: {e}")))?;
                return Ok(Workers::Pool(pool, count));
            }
        }
        let _ = count;
        Ok(Workers::Serial)
    }

    #[cfg(feature = "parallel")]
    fn chunk_len(count: usize, len: usize) -> usize {
        len.div_ceil(count * 8).max(256)
    }

    fn run(
        &self,
        plan: &StepPlan<'_>,
        v_next: &[f64],
        t_next: f64,
        values: &mut [f64],
        fb: Option<&mut [u32]>,
        cache: Option<&FootCache>,
    ) -> Result<StepStats> {
        match self {
            Workers::Serial => plan.run_chunk(v_next, t_next, 0, values, fb, cache),
            #[cfg(feature = "parallel")]
            Workers::Pool(pool, count) => {
                use rayon::prelude::*;
                let chunk = Self::chunk_len(*count, values.len());
                let results: Vec<Result<StepStats>> = pool.install(|| match fb {
                    Some(fb) => values
                        .par_chunks_mut(chunk)
                        .zip(fb.par_chunks_mut(chunk))
                        .enumerate()
                        .map(|(c, (out, f))| plan.run_chunk(v_next, t_next, c * chunk, out, Some(f), cache))
                        .collect(),
                    None => values
                        .par_chunks_mut(chunk)
                        .enumerate()
                        .map(|(c, out)| plan.run_chunk(v_next, t_next, c * chunk, out, None, cache))
                        .collect(),
                });
                // first failing chunk in node order, independent of scheduling
                results
                    .into_iter()
                    .try_fold(StepStats::empty(), |acc, r| r.map(|s| acc.merge(s)))
            }
        }
    }

    fn build_cache(&self, plan: &StepPlan<'_>) -> Result<FootCache> {
        let (len, m, n) = (plan.grid.len(), plan.policies.len(), plan.grid.dim());
        let mut cache = FootCache {
            base: vec![0; len * m],
            local: vec![0.0; len * m * n],
            clamped: vec![0; len * m],
        };
        match self {
            Workers::Serial => plan.cache_chunk(0, &mut cache.base, &mut cache.local, &mut cache.clamped)?,
            #[cfg(feature = "parallel")]
            Workers::Pool(pool, count) => {
                use rayon::prelude::*;
                let chunk = Self::chunk_len(*count, len);
                let results: Vec<Result<()>> = pool.install(|| {
                    cache
                        .base
                        .par_chunks_mut(chunk * m)
                        .zip(cache.local.par_chunks_mut(chunk * m * n))
                        .zip(cache.clamped.par_chunks_mut(chunk * m))
                        .enumerate()
                        .map(|(c, ((b, l), f))| plan.cache_chunk(c * chunk, b, l, f))
                        .collect()
                });
                results.into_iter().collect::<Result<()>>()?;
            }
        }
        Ok(cache)
    }
}

/// Foot locations for every (node, control) pair, flattened node-major.
/// Feet depend on the node, the control and Δt only, so a full sweep
/// computes them once.
struct FootCache {
    base: Vec<u32>,
    local: Vec<f64>,
    clamped: Vec<u8>,
}

impl FootCache {
    fn bytes(nodes: usize, controls: usize, dim: usize) -> u64 {
        (nodes as u64)
            .saturating_mul(controls as u64)
            .saturating_mul(5 + 8 * dim as u64)
    }
}

/// Wall-clock timer; reads zero on targets without a clock.
fn stopwatch() -> impl Fn() -> std::time::Duration {
    #[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
    {
        let start = std::time::Instant::now();
        move || start.elapsed()
    }
    #[cfg(all(target_arch = "wasm32", target_os = "unknown"))]
    {
        || std::time::Duration::ZERO
    }
}

/// Resolves a requested worker count: 0 means `CPDS_WORKERS`, falling back
/// to the available parallelism.
pub fn resolve_workers(requested: usize) -> Result<usize> {
    if requested > 0 {
        return Ok(requested);
    }
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{WORKERS_ENV}={v:?} is not a worker count")))?;
        if n > 0 {
            return Ok(n);
        }
    }
    Ok(std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One backward step from `V^n` (`v_next`, at `t_next = t^n`) to `V^{n−1}`.
#[allow(clippy::too_many_arguments)]
pub fn backward_step(
    model: &dyn CpdsModel,
    grid: &UniformGrid,
    controls: &ControlGrid,
    v_next: &[f64],
    t_next: f64,
    dt: f64,
    integrator: Integrator,
    record_feedback: bool,
) -> Result<StepOutput> {
    let plan = StepPlan::new(model, grid, controls, integrator, dt)?;
    plan.step(v_next, t_next, record_feedback, &Workers::Serial, None)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub integrator: Integrator,
    /// 0 selects `CPDS_WORKERS` or the available parallelism.
    pub workers: usize,
    pub record_feedback: bool,
    pub memory_budget: u64,
    /// Verify the monotone-scheme bound after every step.
    pub check_bounds: bool,
    /// Compute feet once per sweep and reuse them across steps, when the
    /// cache fits the memory budget next to the stored slices.
    pub foot_cache: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            integrator: Integrator::Mpe,
            workers: 0,
            record_feedback: false,
            memory_budget: DEFAULT_MEMORY_BUDGET,
            check_bounds: true,
            foot_cache: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub integrator: Integrator,
    pub workers: usize,
    /// Per-slice SHA-256, indexed by time index.
    pub checksums: Vec<String>,
    /// Per-step statistics, indexed by the produced slice.
    pub steps: Vec<StepStats>,
    /// Whether the sweep reused cached feet.
    pub cached_feet: bool,
    pub elapsed: std::time::Duration,
}

impl SolveReport {
    pub fn total_clamps(&self) -> u64 {
        self.steps.iter().map(|s| s.clamp_count).sum()
    }

    pub fn total_exterior_clamps(&self) -> u64 {
        self.steps.iter().map(|s| s.exterior_clamps).sum()
    }

    /// One checksum over all slice checksums.
    pub fn series_checksum(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.checksums {
            h.update(c.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Checks `min V^n + Δt min ℓ ≤ V^{n−1} ≤ max V^n + Δt max ℓ`.
pub fn check_monotone_bound(v_next: &[f64], v: &[f64], dt: f64, stats: &StepStats) -> Result<()> {
    let (lo, hi) = v_next
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    let lower = lo + dt * stats.ell_min;
    let upper = hi + dt * stats.ell_max;
    let tol = 1e-12 * (1.0 + lower.abs().max(upper.abs()));
    if let Some(i) = v.iter().position(|x| *x < lower - tol || *x > upper + tol) {
        return Err(Error::Invariant(format!(
            "value {} at node {i} escapes the monotone bound [{lower}, {upper}]",
            v[i]
        )));
    }
    Ok(())
}

/// Bytes the sweep needs without the foot cache.
fn memory_check(sink: &dyn SliceSink, grid: &UniformGrid, schedule: &TimeSchedule, opts: &SolverOptions) -> Result<u64> {
    let per = sink.resident_bytes_per_slice(grid.len(), opts.record_feedback);
    let working = 3 * grid.len() as u64 * 8;
    let need = per
        .saturating_mul(schedule.steps() as u64 + 1)
        .saturating_add(working);
    if need > opts.memory_budget {
        return Err(Error::Config(format!(
            "solve needs about {} MiB for {} slices of {} nodes, budget is {} MiB; \
             write snapshots, use f32 storage or a coarser grid",
            need >> 20,
            schedule.steps() + 1,
            grid.len(),
            opts.memory_budget >> 20
        )));
    }
    Ok(need)
}

/// Runs the full backward sweep, streaming slices `n̄, n̄−1, …, 0` to `sink`.
pub fn solve_backward_into(
    model: &dyn CpdsModel,
    grid: &UniformGrid,
    controls: &ControlGrid,
    schedule: &TimeSchedule,
    opts: &SolverOptions,
    sink: &mut dyn SliceSink,
) -> Result<SolveReport> {
    let need = memory_check(sink, grid, schedule, opts)?;
    let elapsed = stopwatch();
    let plan = StepPlan::new(model, grid, controls, opts.integrator, schedule.dt())?;
    let workers = resolve_workers(opts.workers)?;
    let pool = Workers::new(workers)?;
    let nbar = schedule.steps();
    let use_cache = opts.foot_cache
        && nbar > 1
        && grid.len() <= u32::MAX as usize
        && need.saturating_add(FootCache::bytes(grid.len(), controls.len(), grid.dim())) <= opts.memory_budget;
    let mut checksums = vec![String::new(); nbar + 1];
    let mut steps = vec![StepStats::default(); nbar + 1];
    let mut current = terminal_slice(model, grid)?.into_values();
    checksums[nbar] = slice_checksum(&current);
    sink.accept(nbar, &current, None)?;
    let cache = if use_cache { Some(pool.build_cache(&plan)?) } else { None };
    for n in (1..=nbar).rev() {
        let out = plan.step(&current, schedule.time(n), opts.record_feedback, &pool, cache.as_ref())?;
        if opts.check_bounds {
            check_monotone_bound(&current, &out.values, schedule.dt(), &out.stats)?;
        }
        checksums[n - 1] = slice_checksum(&out.values);
        steps[n - 1] = out.stats;
        sink.accept(n - 1, &out.values, out.feedback.as_deref())?;
        current = out.values;
    }
    Ok(SolveReport {
        integrator: opts.integrator,
        workers,
        checksums,
        steps,
        cached_feet: cache.is_some(),
        elapsed: elapsed(),
    })
}

/// Solves and keeps every slice in memory at `precision`.
pub fn solve_backward(
    model: &dyn CpdsModel,
    grid: &UniformGrid,
    controls: &ControlGrid,
    schedule: &TimeSchedule,
    opts: &SolverOptions,
    precision: Precision,
) -> Result<(ValueFunctionSeries, SolveReport)> {
    let mut sink = MemorySink::new(grid.clone(), *schedule, precision);
    let report = solve_backward_into(model, grid, controls, schedule, opts, &mut sink)?;
    Ok((sink.into_series()?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::custom::{FrozenDynamics, TwoSpeciesChain};
    use crate::models::{enzyme_model, sird_model, EnzymeParams, SirdParams};

    #[test]
    fn schedule_times() {
        let s = TimeSchedule::new(0.0, 30.0, 100).unwrap();
        assert_eq!(s.dt(), 0.3);
        assert_eq!(s.time(0), 0.0);
        assert_eq!(s.time(100), 30.0);
        assert_eq!(s.time(10), 10.0 * 0.3);
        assert!(TimeSchedule::new(0.0, 1.0, 0).is_err());
        assert_eq!(TimeSchedule::from_dt(0.0, 90.0, 0.45).unwrap().steps(), 200);
        assert!(TimeSchedule::from_dt(0.0, 1.0, 0.3).is_err());
    }

    #[test]
    fn control_grid_covers_endpoints() {
        let bx = ControlBox::interval(263.15, 373.15).unwrap();
        let g = ControlGrid::uniform(&bx, 101).unwrap();
        assert_eq!(g.len(), 101);
        assert_eq!(g.point(0).as_slice(), &[263.15]);
        assert_eq!(g.point(100).as_slice(), &[373.15]);
        assert!((g.point(50).as_slice()[0] - 318.15).abs() < 1e-12);
        assert!(ControlGrid::uniform(&bx, 1).is_err());
        let bx2 = ControlBox::new(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap();
        let g2 = ControlGrid::new(&bx2, vec![2, 3]).unwrap();
        assert_eq!(g2.point(1).as_slice(), &[0.0, 1.0]);
        assert_eq!(g2.point(5).as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn terminal_slices() {
        let model = enzyme_model(EnzymeParams::default()).unwrap();
        let grid = UniformGrid::unit(vec![3, 3, 3]).unwrap();
        let t = terminal_slice(&model, &grid).unwrap();
        assert_eq!(t.value_at(grid.flat_index(&[1, 2, 2]).unwrap()), 0.0);
        assert_eq!(t.value_at(grid.flat_index(&[2, 0, 0]).unwrap()), 20.0);
        let sird = sird_model(SirdParams {
            terminal_exponent: 1.0,
            ..SirdParams::default()
        })
        .unwrap();
        let g4 = UniformGrid::unit(vec![3, 3, 3, 3]).unwrap();
        let t4 = terminal_slice(&sird, &g4).unwrap();
        assert_eq!(t4.value_at(g4.flat_index(&[0, 1, 0, 1]).unwrap()), 1e4 * 0.5);
    }

    struct NanCost(TwoSpeciesChain);
    impl CpdsModel for NanCost {
        fn name(&self) -> &str {
            "nan-cost"
        }
        fn dimension(&self) -> usize {
            2
        }
        fn control_box(&self) -> &ControlBox {
            self.0.control_box()
        }
        fn time_horizon(&self) -> (f64, f64) {
            (0.0, 1.0)
        }
        fn initial_state(&self) -> crate::model::StateVector {
            self.0.initial_state()
        }
        fn production(&self, x: &[f64], out: &mut crate::linalg::SquareMatrix) {
            self.0.production(x, out)
        }
        fn destruction(&self, x: &[f64], out: &mut crate::linalg::SquareMatrix) {
            self.0.destruction(x, out)
        }
        fn policy_production(&self, a: &[f64], out: &mut crate::linalg::SquareMatrix) {
            self.0.policy_production(a, out)
        }
        fn policy_destruction(&self, a: &[f64], out: &mut crate::linalg::SquareMatrix) {
            self.0.policy_destruction(a, out)
        }
        fn running_cost(&self, _x: &[f64], _a: &[f64], _t: f64) -> f64 {
            0.0
        }
        fn final_cost(&self, x: &[f64]) -> f64 {
            if x[0] > 0.9 {
                f64::NAN
            } else {
                0.0
            }
        }
    }

    #[test]
    fn non_finite_terminal_cost_names_node() {
        let grid = UniformGrid::unit(vec![3, 3]).unwrap();
        let err = terminal_slice(&NanCost(TwoSpeciesChain::default()), &grid).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("node 6")), "{err}");
    }

    #[test]
    fn zero_costs_give_zero_value() {
        let model = TwoSpeciesChain::default();
        let grid = UniformGrid::unit(vec![11, 11]).unwrap();
        let controls = ControlGrid::uniform(model.control_box(), 5).unwrap();
        let schedule = TimeSchedule::new(0.0, 1.0, 10).unwrap();
        for integrator in [Integrator::Mpe, Integrator::Euler] {
            let opts = SolverOptions {
                integrator,
                workers: 1,
                ..SolverOptions::default()
            };
            let (series, _) = solve_backward(&model, &grid, &controls, &schedule, &opts, Precision::F64).unwrap();
            for n in 0..=10 {
                assert!(series.slice(n).to_f64().iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn frozen_dynamics_telescopes() {
        let model = FrozenDynamics::new(3, 0.75);
        let grid = UniformGrid::unit(vec![5, 4, 3]).unwrap();
        let controls = ControlGrid::uniform(model.control_box(), 3).unwrap();
        let schedule = TimeSchedule::new(0.0, 2.0, 8).unwrap();
        let (series, report) =
            solve_backward(&model, &grid, &controls, &schedule, &SolverOptions::default(), Precision::F64).unwrap();
        assert_eq!(report.total_clamps(), 0);
        let phi = terminal_slice(&model, &grid).unwrap();
        for n in 0..=8 {
            let s = series.slice(n).to_f64();
            for i in 0..grid.len() {
                let expect = phi.value_at(i) + (8 - n) as f64 * schedule.dt() * 0.75;
                assert!((s[i] - expect).abs() <= 1e-13 * (1.0 + expect), "n={n} i={i}");
            }
        }
    }

    #[test]
    fn single_step_schedule_and_terminal_only() {
        let model = TwoSpeciesChain::default();
        let grid = UniformGrid::unit(vec![3, 3]).unwrap();
        let controls = ControlGrid::uniform(model.control_box(), 2).unwrap();
        let schedule = TimeSchedule::new(0.0, 1.0, 1).unwrap();
        let (series, report) =
            solve_backward(&model, &grid, &controls, &schedule, &SolverOptions::default(), Precision::F64).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(report.checksums.len(), 2);
    }

    #[test]
    fn ties_pick_the_lowest_control() {
        // zero costs: every control ties
        let model = TwoSpeciesChain::default();
        let grid = UniformGrid::unit(vec![5, 5]).unwrap();
        let controls = ControlGrid::uniform(model.control_box(), 4).unwrap();
        let v = vec![0.0; grid.len()];
        let out = backward_step(&model, &grid, &controls, &v, 1.0, 0.1, Integrator::Mpe, true).unwrap();
        assert!(out.feedback.unwrap().iter().all(|k| *k == 0));
    }

    #[test]
    fn monotone_bound_detects_violation() {
        let stats = StepStats {
            ell_min: 0.0,
            ell_max: 1.0,
            ..StepStats::default()
        };
        assert!(check_monotone_bound(&[0.0, 1.0], &[0.5, 1.05], 0.1, &stats).is_ok());
        assert!(check_monotone_bound(&[0.0, 1.0], &[0.5, 1.2], 0.1, &stats).is_err());
        assert!(check_monotone_bound(&[0.0, 1.0], &[-0.01, 1.0], 0.1, &stats).is_err());
    }

    #[test]
    fn memory_budget_is_enforced_before_compute() {
        let model = FrozenDynamics::default();
        let grid = UniformGrid::unit(vec![101, 101]).unwrap();
        let controls = ControlGrid::uniform(model.control_box(), 2).unwrap();
        let schedule = TimeSchedule::new(0.0, 1.0, 100).unwrap();
        let opts = SolverOptions {
            memory_budget: 1 << 20,
            ..SolverOptions::default()
        };
        let err = solve_backward(&model, &grid, &controls, &schedule, &opts, Precision::F64).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn f32_storage_rounds_values() {
        let model = FrozenDynamics::new(2, 1.0 / 3.0);
        let grid = UniformGrid::unit(vec![3, 3]).unwrap();
        let controls = ControlGrid::uniform(model.control_box(), 2).unwrap();
        let schedule = TimeSchedule::new(0.0, 1.0, 3).unwrap();
        let opts = SolverOptions::default();
        let (a, _) = solve_backward(&model, &grid, &controls, &schedule, &opts, Precision::F64).unwrap();
        let (b, _) = solve_backward(&model, &grid, &controls, &schedule, &opts, Precision::F32).unwrap();
        let d = a.max_abs_difference(&b, 0, 0).unwrap();
        assert!(d > 0.0 && d < 1e-6);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn worker_count_does_not_change_bits() {
        let model = sird_model(SirdParams::default()).unwrap();
        let grid = UniformGrid::unit(vec![6, 6, 6, 6]).unwrap();
        let controls = ControlGrid::uniform(model.control_box(), 5).unwrap();
        let schedule = TimeSchedule::new(0.0, 90.0, 10).unwrap();
        let run = |workers| {
            let opts = SolverOptions {
                workers,
                ..SolverOptions::default()
            };
            solve_backward(&model, &grid, &controls, &schedule, &opts, Precision::F64).unwrap().1
        };
        let one = run(1);
        for w in [2, 3, 5] {
            assert_eq!(run(w).checksums, one.checksums, "workers = {w}");
        }
    }

    #[test]
    fn cached_feet_reproduce_the_direct_sweep() {
        let sird = sird_model(SirdParams::default()).unwrap();
        let enzyme = enzyme_model(EnzymeParams::default()).unwrap();
        let cases: [(&dyn CpdsModel, Vec<usize>, usize); 2] = [(&sird, vec![6; 4], 90), (&enzyme, vec![7; 3], 30)];
        for (model, counts, tf) in cases {
            let grid = UniformGrid::unit(counts).unwrap();
            let controls = ControlGrid::uniform(model.control_box(), 5).unwrap();
            let schedule = TimeSchedule::new(0.0, tf as f64, 6).unwrap();
            for integrator in [Integrator::Mpe, Integrator::Euler] {
                let run = |foot_cache| {
                    let opts = SolverOptions {
                        integrator,
                        foot_cache,
                        record_feedback: true,
                        ..SolverOptions::default()
                    };
                    solve_backward(model, &grid, &controls, &schedule, &opts, Precision::F64).unwrap()
                };
                let (sa, a) = run(true);
                let (sb, b) = run(false);
                assert!(a.cached_feet && !b.cached_feet);
                assert_eq!(a.checksums, b.checksums, "{} {integrator}", model.name());
                assert_eq!(a.steps, b.steps);
                assert_eq!(sa.feedback_slice(0), sb.feedback_slice(0));
            }
        }
    }

    #[test]
    fn cache_is_skipped_when_it_does_not_fit() {
        let model = sird_model(SirdParams::default()).unwrap();
        let grid = UniformGrid::unit(vec![6; 4]).unwrap();
        let controls = ControlGrid::uniform(model.control_box(), 5).unwrap();
        let schedule = TimeSchedule::new(0.0, 90.0, 4).unwrap();
        let slices = grid.len() as u64 * 8 * 8;
        let opts = SolverOptions {
            memory_budget: slices + FootCache::bytes(grid.len(), controls.len(), 4) / 2,
            ..SolverOptions::default()
        };
        let (_, r) = solve_backward(&model, &grid, &controls, &schedule, &opts, Precision::F64).unwrap();
        assert!(!r.cached_feet);
    }
}

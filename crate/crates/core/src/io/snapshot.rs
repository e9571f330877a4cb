//! Binary value-function snapshots.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "MPSLV1"            6 bytes
//! N                   u32
//! counts              N × u64
//! lower, upper        N × f64 each
//! time index n        u64
//! dt                  f64
//! values              Π counts × f64, row-major, axis 0 slowest
//! ```
//!
//! One file per slice, named `V_{n:05}.mpslv`.

use std::borrow::Cow;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::UniformGrid;
use crate::hjb::{slice_checksum, SliceSink, SliceSource, TimeSchedule};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 6] = b"MPSLV1";

pub fn snapshot_file_name(n: usize) -> String {
    format!("V_{n:05}.mpslv")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub grid: UniformGrid,
    pub time_index: u64,
    pub dt: f64,
    pub values: Vec<f64>,
}

pub fn encode_snapshot(grid: &UniformGrid, time_index: u64, dt: f64, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != grid.len() {
        return Err(Error::Contract(format!(
            "snapshot has {} values for {} nodes",
            values.len(),
            grid.len()
        )));
    }
    let n = grid.dim();
    let mut buf = Vec::with_capacity(6 + 4 + n * 24 + 16 + values.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for c in grid.counts() {
        buf.extend_from_slice(&(*c as u64).to_le_bytes());
    }
    for v in grid.lower().iter().chain(grid.upper()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&time_index.to_le_bytes());
    buf.extend_from_slice(&dt.to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Data(format!("snapshot truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<Snapshot> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(6)? != MAGIC {
        return Err(Error::Data("not a value snapshot (bad magic)".into()));
    }
    let n = r.u32()? as usize;
    if n == 0 || n > crate::linalg::MAX_DIM {
        return Err(Error::Data(format!("snapshot dimension {n} out of range")));
    }
    let counts = (0..n)
        .map(|_| r.u64().map(|c| c as usize))
        .collect::<Result<Vec<_>>>()?;
    let lower = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let upper = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let grid = UniformGrid::new(lower, upper, counts).map_err(|e| Error::Data(format!("snapshot header: {e}")))?;
    let time_index = r.u64()?;
    let dt = r.f64()?;
    let need = grid.len().checked_mul(8).ok_or_else(|| Error::Data("snapshot too large".into()))?;
    let raw = r.take(need)?;
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "snapshot has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Snapshot {
        grid,
        time_index,
        dt,
        values,
    })
}

pub fn write_snapshot(path: &Path, grid: &UniformGrid, time_index: u64, dt: f64, values: &[f64]) -> Result<()> {
    let bytes = encode_snapshot(grid, time_index, dt, values)?;
    write_atomic(path, &bytes)
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_snapshot(&bytes).map_err(|e| e.context(&path.display().to_string()))
}

/// Writes every slice to `dir` as it is produced.
pub struct SnapshotSink {
    dir: PathBuf,
    grid: UniformGrid,
    dt: f64,
    written: Vec<PathBuf>,
}

impl SnapshotSink {
    pub fn new(dir: impl Into<PathBuf>, grid: UniformGrid, schedule: &TimeSchedule) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(SnapshotSink {
            dir,
            grid,
            dt: schedule.dt(),
            written: Vec::new(),
        })
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

impl SliceSink for SnapshotSink {
    fn accept(&mut self, n: usize, values: &[f64], _feedback: Option<&[u32]>) -> Result<()> {
        let path = self.dir.join(snapshot_file_name(n));
        write_snapshot(&path, &self.grid, n as u64, self.dt, values)?;
        self.written.push(path);
        Ok(())
    }

    fn resident_bytes_per_slice(&self, _nodes: usize, _feedback: bool) -> u64 {
        0
    }
}

/// A solved series on disk, read slice by slice.
#[derive(Debug)]
pub struct SnapshotDir {
    dir: PathBuf,
    grid: UniformGrid,
    schedule: TimeSchedule,
}

impl SnapshotDir {
    /// Opens `dir`, checking every slice `0..=n̄` is present and consistent
    /// with `grid` and `schedule`.
    pub fn open(dir: impl Into<PathBuf>, grid: &UniformGrid, schedule: &TimeSchedule) -> Result<Self> {
        let dir = dir.into();
        for n in 0..=schedule.steps() {
            let path = dir.join(snapshot_file_name(n));
            if !path.exists() {
                return Err(Error::Data(format!(
                    "snapshot {} is missing; run `cpds solve` with output.snapshots = true first",
                    path.display()
                )));
            }
        }
        // headers are validated fully as slices load; check the terminal one now
        let last = read_snapshot(&dir.join(snapshot_file_name(schedule.steps())))?;
        check_header(&last, grid, schedule, schedule.steps())?;
        Ok(SnapshotDir {
            dir,
            grid: grid.clone(),
            schedule: *schedule,
        })
    }

    /// SHA-256 of each slice in time order.
    pub fn checksums(&self) -> Result<Vec<String>> {
        (0..=self.schedule.steps())
            .map(|n| self.load(n).map(|v| slice_checksum(&v)))
            .collect()
    }
}

fn check_header(s: &Snapshot, grid: &UniformGrid, schedule: &TimeSchedule, n: usize) -> Result<()> {
    if s.grid != *grid {
        return Err(Error::Data(format!(
            "snapshot {n} was written for grid {:?}, configuration uses {:?}",
            s.grid.counts(),
            grid.counts()
        )));
    }
    if s.time_index != n as u64 || s.dt.to_bits() != schedule.dt().to_bits() {
        return Err(Error::Data(format!(
            "snapshot {n} header says time index {} with dt {}, expected {n} with dt {}",
            s.time_index,
            s.dt,
            schedule.dt()
        )));
    }
    Ok(())
}

impl SliceSource for SnapshotDir {
    fn grid(&self) -> &UniformGrid {
        &self.grid
    }

    fn schedule(&self) -> &TimeSchedule {
        &self.schedule
    }

    fn load(&self, n: usize) -> Result<Cow<'_, [f64]>> {
        let s = read_snapshot(&self.dir.join(snapshot_file_name(n)))?;
        check_header(&s, &self.grid, &self.schedule, n)?;
        Ok(Cow::Owned(s.values))
    }

    fn feedback(&self, _n: usize) -> Result<Option<Cow<'_, [u32]>>> {
        Ok(None)
    }
}

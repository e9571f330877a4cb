//! Uniform tensor grids and monotone multilinear interpolation.
//!
//! Nodes are flattened row-major with axis 0 slowest, so the stride of the
//! last axis is 1. Cells are half-open `[x_k, x_{k+1})` except the last one
//! per axis, which is closed.

use crate::error::{Error, Result};
use crate::linalg::MAX_DIM;
use crate::model::StateVector;

/// Cell-local coordinates this close to an integer (in units of
/// `ε · max(1, s)`) are snapped onto the node. Feet that should land on a
/// node (frozen dynamics, `x = 0` faces) then reproduce nodal values exactly.
const SNAP_ULPS: f64 = 64.0;

/// Relative slack before an out-of-box query counts as a clamp event.
const CLAMP_SLACK: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct UniformGrid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    counts: Vec<usize>,
    spacing: Vec<f64>,
    inv_spacing: Vec<f64>,
    strides: Vec<usize>,
    len: usize,
}

impl UniformGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        let n = counts.len();
        if n == 0 || n > MAX_DIM {
            return Err(Error::Config(format!(
                "grid dimension must be in 1..={MAX_DIM}, got {n}"
            )));
        }
        if lower.len() != n || upper.len() != n {
            return Err(Error::Config(format!(
                "grid bounds have {} / {} entries for {n} axes",
                lower.len(),
                upper.len()
            )));
        }
        let mut spacing = Vec::with_capacity(n);
        for k in 0..n {
            if counts[k] < 2 {
                return Err(Error::Config(format!(
                    "axis {k} needs at least 2 nodes, got {}",
                    counts[k]
                )));
            }
            let (lo, hi) = (lower[k], upper[k]);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!(
                    "axis {k} bounds must be finite with lower < upper, got [{lo}, {hi}]"
                )));
            }
            spacing.push((hi - lo) / (counts[k] - 1) as f64);
        }
        let mut len: usize = 1;
        for &c in &counts {
            len = len
                .checked_mul(c)
                .ok_or_else(|| Error::Config(format!("grid {counts:?} overflows the address space")))?;
        }
        if len.checked_mul(std::mem::size_of::<f64>()).map_or(true, |b| b > isize::MAX as usize) {
            return Err(Error::Config(format!(
                "grid {counts:?} ({len} nodes) does not fit addressable memory"
            )));
        }
        let mut strides = vec![1usize; n];
        for k in (0..n.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * counts[k + 1];
        }
        let inv_spacing = spacing.iter().map(|h| 1.0 / h).collect();
        Ok(UniformGrid {
            lower,
            upper,
            counts,
            spacing,
            inv_spacing,
            strides,
            len,
        })
    }

    /// Grid on `[0, 1]^N`.
    pub fn unit(counts: Vec<usize>) -> Result<Self> {
        let n = counts.len();
        Self::new(vec![0.0; n], vec![1.0; n], counts)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Total node count.
    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Largest spacing over all axes.
    pub fn max_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(0.0, f64::max)
    }

    pub fn multi_index(&self, flat: usize) -> Result<Vec<usize>> {
        self.check_index(flat)?;
        let mut rem = flat;
        Ok(self
            .strides
            .iter()
            .map(|s| {
                let q = rem / s;
                rem %= s;
                q
            })
            .collect())
    }

    pub fn flat_index(&self, multi: &[usize]) -> Result<usize> {
        if multi.len() != self.dim() || multi.iter().zip(&self.counts).any(|(i, c)| i >= c) {
            return Err(Error::Contract(format!(
                "multi-index {multi:?} outside grid {:?}",
                self.counts
            )));
        }
        Ok(multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum())
    }

    fn check_index(&self, flat: usize) -> Result<()> {
        if flat >= self.len {
            return Err(Error::Contract(format!(
                "node index {flat} out of range for {} nodes",
                self.len
            )));
        }
        Ok(())
    }

    pub fn node_coords(&self, flat: usize) -> Result<StateVector> {
        self.check_index(flat)?;
        let mut buf = [0.0; MAX_DIM];
        self.node_into(flat, &mut buf);
        Ok(StateVector::from_raw(buf[..self.dim()].to_vec()))
    }

    /// Coordinates of node `flat` (unchecked). The last node of each axis is
    /// the upper bound exactly rather than `lower + (n−1)h`.
    #[inline]
    pub(crate) fn node_into(&self, flat: usize, out: &mut [f64; MAX_DIM]) {
        let mut rem = flat;
        for k in 0..self.dim() {
            let i = rem / self.strides[k];
            rem %= self.strides[k];
            out[k] = if i + 1 == self.counts[k] {
                self.upper[k]
            } else {
                self.lower[k] + i as f64 * self.spacing[k]
            };
        }
    }

    /// Index of the node nearest to `p` (after clamping into the box).
    pub fn nearest_node(&self, p: &[f64]) -> usize {
        let mut flat = 0;
        for k in 0..self.dim() {
            let s = ((p[k] - self.lower[k]) * self.inv_spacing[k]).round();
            let i = if s.is_nan() { 0.0 } else { s.clamp(0.0, (self.counts[k] - 1) as f64) };
            flat += i as usize * self.strides[k];
        }
        flat
    }

    /// True when the simplex `{x ≥ 0, eᵀx ≤ mass}` lies inside the box, so
    /// that every mass-preserving nonnegative foot of such a node stays in it.
    pub fn holds_simplex(&self, mass: f64) -> bool {
        self.lower.iter().all(|l| *l <= 0.0) && self.upper.iter().all(|u| mass <= *u)
    }

    /// Locates `p` per axis: cell index and local coordinate in `[0, 1]`.
    /// Returns whether any coordinate was clamped into the box.
    #[inline]
    fn locate(&self, p: &[f64], cells: &mut [usize; MAX_DIM], local: &mut [f64; MAX_DIM]) -> bool {
        let mut clamped = false;
        for k in 0..self.dim() {
            let (lo, hi) = (self.lower[k], self.upper[k]);
            let mut v = p[k];
            if v < lo || v > hi {
                let slack = CLAMP_SLACK * (hi - lo);
                if v < lo - slack || v > hi + slack {
                    clamped = true;
                }
                v = v.clamp(lo, hi);
            }
            // s >= 0 here, so truncating casts act as floor and round
            let mut s = (v - lo) * self.inv_spacing[k];
            let r = (s + 0.5) as i64 as f64;
            if (s - r).abs() <= SNAP_ULPS * f64::EPSILON * s.max(1.0) {
                s = r;
            }
            let c = (s as i64 as usize).min(self.counts[k] - 2);
            cells[k] = c;
            local[k] = (s - c as f64).clamp(0.0, 1.0);
        }
        clamped
    }

    /// Corner flat indices and tensor-product weights of the cell holding `p`,
    /// corner bit k selecting the upper node along axis k.
    pub fn interpolation_weights(&self, p: &[f64]) -> Result<(Vec<usize>, Vec<f64>, bool)> {
        self.check_point(p)?;
        let mut cells = [0usize; MAX_DIM];
        let mut local = [0.0; MAX_DIM];
        let clamped = self.locate(p, &mut cells, &mut local);
        let n = self.dim();
        let base: usize = (0..n).map(|k| cells[k] * self.strides[k]).sum();
        let mut idx = Vec::with_capacity(1 << n);
        let mut w = Vec::with_capacity(1 << n);
        for b in 0..(1usize << n) {
            let mut flat = base;
            let mut weight = 1.0;
            for k in 0..n {
                if b >> k & 1 == 1 {
                    flat += self.strides[k];
                    weight *= local[k];
                } else {
                    weight *= 1.0 - local[k];
                }
            }
            idx.push(flat);
            w.push(weight);
        }
        Ok((idx, w, clamped))
    }

    fn check_point(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim() {
            return Err(Error::Contract(format!(
                "query point has {} coordinates, grid has {}",
                p.len(),
                self.dim()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite query point {p:?}")));
        }
        Ok(())
    }

    /// Multilinear interpolation of nodal `values` at `p` (finite, of the
    /// right dimension; unchecked). Returns the value and the clamp flag.
    ///
    /// The result is built from successive 1-D interpolations, each clamped
    /// into the range of its two inputs, so it always lies within the range
    /// of the cell's corner values, bit for bit.
    #[inline]
    pub(crate) fn interpolate_unchecked<V: NodalValues + ?Sized>(&self, values: &V, p: &[f64]) -> (f64, bool) {
        let mut local = [0.0; MAX_DIM];
        let (base, clamped) = self.locate_cell(p, &mut local);
        (self.blend_cell(values, base, &local[..self.dim()]), clamped)
    }

    /// Flat index of the lower corner of the cell holding `p` and whether
    /// `p` was clamped; local coordinates go to `local`.
    #[inline]
    pub(crate) fn locate_cell(&self, p: &[f64], local: &mut [f64; MAX_DIM]) -> (usize, bool) {
        let mut cells = [0usize; MAX_DIM];
        let clamped = self.locate(p, &mut cells, local);
        let base = (0..self.dim()).map(|k| cells[k] * self.strides[k]).sum();
        (base, clamped)
    }

    /// Multilinear blend of the cell with lower corner `base`.
    #[inline]
    pub(crate) fn blend_cell<V: NodalValues + ?Sized>(&self, values: &V, base: usize, local: &[f64]) -> f64 {
        let strides = &self.strides[..local.len()];
        match local.len() {
            1 => blend::<2, V>(values, base, strides, local),
            2 => blend::<4, V>(values, base, strides, local),
            3 => blend::<8, V>(values, base, strides, local),
            4 => blend::<16, V>(values, base, strides, local),
            5 => blend::<32, V>(values, base, strides, local),
            6 => blend::<64, V>(values, base, strides, local),
            7 => blend::<128, V>(values, base, strides, local),
            _ => blend::<256, V>(values, base, strides, local),
        }
    }

    /// Checked multilinear interpolation.
    pub fn interpolate<V: NodalValues + ?Sized>(&self, values: &V, p: &[f64]) -> Result<(f64, bool)> {
        self.check_point(p)?;
        if values.node_count() != self.len {
            return Err(Error::Contract(format!(
                "field has {} values for {} nodes",
                values.node_count(),
                self.len
            )));
        }
        Ok(self.interpolate_unchecked(values, p))
    }
}

/// Successive 1-D lerps over the `M = 2^n` corners of one cell.
#[inline(always)]
fn blend<const M: usize, V: NodalValues + ?Sized>(values: &V, base: usize, strides: &[usize], local: &[f64]) -> f64 {
    let mut corners = [0.0f64; M];
    for (b, slot) in corners.iter_mut().enumerate() {
        let mut flat = base;
        for (k, s) in strides.iter().enumerate() {
            if b >> k & 1 == 1 {
                flat += s;
            }
        }
        *slot = values.value(flat);
    }
    let mut width = M;
    for &t in local {
        width >>= 1;
        for j in 0..width {
            corners[j] = lerp(corners[2 * j], corners[2 * j + 1], t);
        }
    }
    corners[0]
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        return a;
    }
    if t == 1.0 {
        return b;
    }
    let v = (1.0 - t) * a + t * b;
    v.clamp(a.min(b), a.max(b))
}

/// Read access to nodal values stored at any precision.
pub trait NodalValues: Sync {
    fn node_count(&self) -> usize;
    fn value(&self, flat: usize) -> f64;
}

impl NodalValues for [f64] {
    #[inline]
    fn node_count(&self) -> usize {
        self.len()
    }
    #[inline]
    fn value(&self, flat: usize) -> f64 {
        self[flat]
    }
}

impl NodalValues for [f32] {
    #[inline]
    fn node_count(&self) -> usize {
        self.len()
    }
    #[inline]
    fn value(&self, flat: usize) -> f64 {
        self[flat] as f64
    }
}

impl NodalValues for Vec<f64> {
    #[inline]
    fn node_count(&self) -> usize {
        self.len()
    }
    #[inline]
    fn value(&self, flat: usize) -> f64 {
        self[flat]
    }
}

impl NodalValues for Vec<f32> {
    #[inline]
    fn node_count(&self) -> usize {
        self.len()
    }
    #[inline]
    fn value(&self, flat: usize) -> f64 {
        self[flat] as f64
    }
}

/// Nodal values of a scalar function on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: UniformGrid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: UniformGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Contract(format!(
                "field has {} values for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value {} at node {i}", values[i])));
        }
        Ok(ScalarField { grid, values })
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: UniformGrid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut buf = [0.0; MAX_DIM];
        let n = grid.dim();
        let values = (0..grid.len())
            .map(|i| {
                grid.node_into(i, &mut buf);
                f(&buf[..n])
            })
            .collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &UniformGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn value_at(&self, flat: usize) -> f64 {
        self.values[flat]
    }

    /// Value at `p` and whether `p` had to be clamped into the box.
    pub fn interpolate(&self, p: &[f64]) -> Result<(f64, bool)> {
        self.grid.interpolate(self.values.as_slice(), p)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn node_coords_row_major() {
        let g = UniformGrid::unit(vec![3, 3]).unwrap();
        assert_eq!(g.node_coords(4).unwrap().as_slice(), &[0.5, 0.5]);
        assert_eq!(g.node_coords(0).unwrap().as_slice(), &[0.0, 0.0]);
        assert_eq!(g.node_coords(8).unwrap().as_slice(), &[1.0, 1.0]);
        assert_eq!(g.node_coords(1).unwrap().as_slice(), &[0.0, 0.5]);
        assert!(g.node_coords(9).is_err());
        assert_eq!(g.multi_index(5).unwrap(), vec![1, 2]);
        assert_eq!(g.flat_index(&[1, 2]).unwrap(), 5);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(UniformGrid::unit(vec![1, 3]).is_err());
        assert!(UniformGrid::new(vec![0.0], vec![0.0], vec![3]).is_err());
        assert!(UniformGrid::unit(vec![]).is_err());
        assert!(UniformGrid::unit(vec![usize::MAX, 2]).is_err());
    }

    #[test]
    fn bilinear_cell_centre() {
        let g = UniformGrid::unit(vec![2, 2]).unwrap();
        let v = vec![0.0, 1.0, 1.0, 2.0];
        let (val, clamped) = g.interpolate(&v, &[0.5, 0.5]).unwrap();
        assert_eq!(val, 1.0);
        assert!(!clamped);
    }

    #[test]
    fn nodes_and_constants_are_exact() {
        let g = UniformGrid::unit(vec![7, 5, 4]).unwrap();
        let f = ScalarField::from_fn(g.clone(), |x| (x[0] * 3.1).sin() + x[1] * x[2]).unwrap();
        for i in 0..g.len() {
            let x = g.node_coords(i).unwrap();
            assert_eq!(f.interpolate(x.as_slice()).unwrap().0, f.value_at(i));
        }
        let c = ScalarField::from_fn(g, |_| 2.5).unwrap();
        assert_eq!(c.interpolate(&[0.123, 0.77, 0.01]).unwrap().0, 2.5);
    }

    #[test]
    fn clamps_and_flags() {
        let g = UniformGrid::unit(vec![3, 3]).unwrap();
        let f = ScalarField::from_fn(g, |x| x[0] + 2.0 * x[1]).unwrap();
        let (v, clamped) = f.interpolate(&[-0.5, 0.5]).unwrap();
        assert!(clamped);
        assert_eq!(v, 1.0);
        let (_, clamped) = f.interpolate(&[1.0, 1.0]).unwrap();
        assert!(!clamped);
        assert!(f.interpolate(&[f64::NAN, 0.0]).is_err());
        assert!(f.interpolate(&[0.0]).is_err());
    }

    #[test]
    fn nearest_node_rounds() {
        let g = UniformGrid::unit(vec![11, 11]).unwrap();
        assert_eq!(g.nearest_node(&[0.04, 0.96]), 10);
        assert_eq!(g.nearest_node(&[2.0, -1.0]), 110);
    }

    #[test]
    fn holds_simplex() {
        let g = UniformGrid::unit(vec![3, 3, 3]).unwrap();
        assert!(g.holds_simplex(1.0));
        assert!(!g.holds_simplex(1.2));
    }

    fn grid_and_point() -> impl Strategy<Value = (UniformGrid, Vec<f64>)> {
        (1usize..=4)
            .prop_flat_map(|n| (proptest::collection::vec(2usize..6, n), proptest::collection::vec(-0.2f64..1.2, n)))
            .prop_map(|(counts, p)| (UniformGrid::unit(counts).unwrap(), p))
    }

    proptest! {
        #[test]
        fn affine_functions_are_exact((g, p) in grid_and_point(), c0 in -5.0f64..5.0, c in proptest::collection::vec(-5.0f64..5.0, 4)) {
            let f = |x: &[f64]| c0 + x.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
            let field = ScalarField::from_fn(g, f).unwrap();
            let q: Vec<f64> = p.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            let (v, _) = field.interpolate(&p).unwrap();
            let exact = f(&q);
            prop_assert!((v - exact).abs() <= 1e-12 * (1.0 + exact.abs()), "{v} vs {exact}");
        }

        #[test]
        fn weights_are_a_partition_of_unity((g, p) in grid_and_point()) {
            let (_, w, _) = g.interpolation_weights(&p).unwrap();
            let s: f64 = w.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-14);
            prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn value_within_cell_corner_range((g, p) in grid_and_point(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let (idx, _, _) = g.interpolation_weights(&p).unwrap();
            let lo = idx.iter().map(|i| values[*i]).fold(f64::INFINITY, f64::min);
            let hi = idx.iter().map(|i| values[*i]).fold(f64::NEG_INFINITY, f64::max);
            let (v, _) = g.interpolate(&values, &p).unwrap();
            prop_assert!(lo <= v && v <= hi, "{lo} <= {v} <= {hi}");
        }
    }
}

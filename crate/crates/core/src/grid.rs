//! Grid-cell subsets of a hypercube.
//!
//! A [`GridSet`] splits the base hypercube into `m_t` equal time slabs and
//! `m_s` equal cells per axis in square-root coordinates; a mask marks the
//! cells that belong to the set. Cells are closed-open boxes in `(t, s)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{HyperCube, SqrtPoint, GEOM_RTOL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSetRepr", into = "GridSetRepr")]
pub struct GridSet {
    base: HyperCube,
    m_t: usize,
    m_s: usize,
    mask: Vec<bool>,
    time_bounds: Vec<f64>,
    sqrt_bounds: Vec<Vec<f64>>,
}

/// Wire format. `runs` alternates unmarked/marked run lengths, starting
/// with an unmarked run (possibly zero).
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSetRepr {
    base: HyperCube,
    resolution: [usize; 2],
    runs: Vec<usize>,
}

impl TryFrom<GridSetRepr> for GridSet {
    type Error = crate::error::Error;

    fn try_from(r: GridSetRepr) -> Result<Self> {
        let mut g = GridSet::empty(r.base, r.resolution[0], r.resolution[1])?;
        let total: usize = r.runs.iter().sum();
        if total != g.mask.len() {
            return Err(invalid!(
                "run lengths cover {total} cells but the grid has {}",
                g.mask.len()
            ));
        }
        let mut pos = 0;
        for (i, len) in r.runs.iter().enumerate() {
            if i % 2 == 1 {
                g.mask[pos..pos + len].iter_mut().for_each(|m| *m = true);
            }
            pos += len;
        }
        Ok(g)
    }
}

impl From<GridSet> for GridSetRepr {
    fn from(g: GridSet) -> Self {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &m in &g.mask {
            if m == current {
                len += 1;
            } else {
                runs.push(len);
                current = m;
                len = 1;
            }
        }
        runs.push(len);
        GridSetRepr {
            base: g.base,
            resolution: [g.m_t, g.m_s],
            runs,
        }
    }
}

impl GridSet {
    pub fn empty(base: HyperCube, m_t: usize, m_s: usize) -> Result<Self> {
        if m_t == 0 || m_s == 0 {
            return Err(invalid!("grid resolution must be positive, got ({m_t}, {m_s})"));
        }
        let n = base.dim();
        let cells = (m_s as u128).pow(n as u32) * m_t as u128;
        if cells > 50_000_000 {
            return Err(invalid!("grid with {cells} cells is too large"));
        }
        let t0 = base.t0();
        let ext = base.time_extent();
        let mut time_bounds: Vec<f64> = (0..=m_t).map(|k| t0 + ext * k as f64 / m_t as f64).collect();
        time_bounds[m_t] = base.t_end();
        let sqrt_bounds = (0..n)
            .map(|i| {
                let (lo, hi) = base.cube().sqrt_bounds(i);
                let mut b: Vec<f64> = (0..=m_s).map(|j| lo + (hi - lo) * j as f64 / m_s as f64).collect();
                b[0] = lo;
                b[m_s] = hi;
                b
            })
            .collect();
        Ok(Self {
            base,
            m_t,
            m_s,
            mask: vec![false; cells as usize],
            time_bounds,
            sqrt_bounds,
        })
    }

    pub fn full(base: HyperCube, m_t: usize, m_s: usize) -> Result<Self> {
        let mut g = Self::empty(base, m_t, m_s)?;
        g.mask.iter_mut().for_each(|m| *m = true);
        Ok(g)
    }

    pub fn from_mask(base: HyperCube, m_t: usize, m_s: usize, mask: Vec<bool>) -> Result<Self> {
        let mut g = Self::empty(base, m_t, m_s)?;
        if mask.len() != g.mask.len() {
            return Err(invalid!("mask has {} cells, grid needs {}", mask.len(), g.mask.len()));
        }
        g.mask = mask;
        Ok(g)
    }

    /// Marks cell `(k, j)` when `f(k, j)` holds.
    pub fn from_cells(
        base: HyperCube,
        m_t: usize,
        m_s: usize,
        mut f: impl FnMut(usize, &[usize]) -> bool,
    ) -> Result<Self> {
        let mut g = Self::empty(base, m_t, m_s)?;
        for idx in 0..g.mask.len() {
            let (k, j) = g.cell_coords(idx);
            g.mask[idx] = f(k, &j);
        }
        Ok(g)
    }

    /// Marks every cell whose midpoint `(t, s)` satisfies the predicate.
    pub fn from_centers(
        base: HyperCube,
        m_t: usize,
        m_s: usize,
        mut f: impl FnMut(f64, &[f64]) -> bool,
    ) -> Result<Self> {
        let mut g = Self::empty(base, m_t, m_s)?;
        let mut s = vec![0.0; g.dim()];
        for idx in 0..g.mask.len() {
            let (k, j) = g.cell_coords(idx);
            let t = 0.5 * (g.time_bounds[k] + g.time_bounds[k + 1]);
            for (i, &ji) in j.iter().enumerate() {
                s[i] = 0.5 * (g.sqrt_bounds[i][ji] + g.sqrt_bounds[i][ji + 1]);
            }
            g.mask[idx] = f(t, &s);
        }
        Ok(g)
    }

    /// All cells whose time slab lies inside `[t_lo, t_hi)`.
    pub fn time_slab(base: HyperCube, m_t: usize, m_s: usize, t_lo: f64, t_hi: f64) -> Result<Self> {
        let g = Self::empty(base, m_t, m_s)?;
        let tb = g.time_bounds.clone();
        let tol = GEOM_RTOL * tb[m_t].abs().max(1.0);
        Self::from_cells(g.base, m_t, m_s, |k, _| {
            tb[k] >= t_lo - tol && tb[k + 1] <= t_hi + tol
        })
    }

    /// Marks whole spatial columns, farthest from the origin in the
    /// square-root metric first, until the measure reaches `frac·|base|`.
    pub fn far_fraction(base: HyperCube, m_t: usize, m_s: usize, frac: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&frac) {
            return Err(invalid!("fraction must lie in [0, 1], got {frac}"));
        }
        let mut g = Self::empty(base, m_t, m_s)?;
        let n = g.dim();
        let cols = g.m_s.pow(n as u32);
        let mut order: Vec<(f64, usize)> = (0..cols)
            .map(|c| {
                let j = g.unflatten_space(c);
                let d = j
                    .iter()
                    .enumerate()
                    .map(|(i, &ji)| 0.5 * (g.sqrt_bounds[i][ji] + g.sqrt_bounds[i][ji + 1]))
                    .fold(0.0, f64::max);
                (d, c)
            })
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let target = frac * g.base.measure();
        let mut acc = 0.0;
        for (_, c) in order {
            if acc >= target {
                break;
            }
            for k in 0..g.m_t {
                let idx = k * cols + c;
                g.mask[idx] = true;
                acc += g.cell_measure(idx);
            }
        }
        Ok(g)
    }

    pub fn base(&self) -> &HyperCube {
        &self.base
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.m_t, self.m_s)
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn n_cells(&self) -> usize {
        self.mask.len()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn set(&mut self, idx: usize, marked: bool) {
        self.mask[idx] = marked;
    }

    pub fn marked_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|m| *m)
    }

    pub fn time_bounds(&self) -> &[f64] {
        &self.time_bounds
    }

    pub fn sqrt_bounds(&self, axis: usize) -> &[f64] {
        &self.sqrt_bounds[axis]
    }

    fn unflatten_space(&self, mut c: usize) -> Vec<usize> {
        let n = self.dim();
        let mut j = vec![0; n];
        for i in (0..n).rev() {
            j[i] = c % self.m_s;
            c /= self.m_s;
        }
        j
    }

    /// `(time index, spatial indices)` of a flat cell index.
    pub fn cell_coords(&self, idx: usize) -> (usize, Vec<usize>) {
        let cols = self.m_s.pow(self.dim() as u32);
        (idx / cols, self.unflatten_space(idx % cols))
    }

    pub fn cell_index(&self, k: usize, j: &[usize]) -> usize {
        j.iter().fold(k, |acc, &ji| acc * self.m_s + ji)
    }

    /// Exact `(t, x)` measure of one cell.
    pub fn cell_measure(&self, idx: usize) -> f64 {
        let (k, j) = self.cell_coords(idx);
        let dt = self.time_bounds[k + 1] - self.time_bounds[k];
        j.iter().enumerate().fold(dt, |acc, (i, &ji)| {
            let (a, b) = (self.sqrt_bounds[i][ji], self.sqrt_bounds[i][ji + 1]);
            acc * (b * b - a * a)
        })
    }

    pub fn measure(&self) -> f64 {
        (0..self.mask.len())
            .filter(|&i| self.mask[i])
            .map(|i| self.cell_measure(i))
            .sum()
    }

    #[inline]
    fn locate(bounds: &[f64], v: f64) -> Option<usize> {
        let m = bounds.len() - 1;
        if !(v >= bounds[0] && v < bounds[m]) {
            return None;
        }
        Some(bounds.partition_point(|b| *b <= v) - 1)
    }

    /// Cell holding `(t, s)`, if it lies in the base.
    pub fn locate_sqrt(&self, t: f64, s: &[f64]) -> Option<usize> {
        let mut idx = Self::locate(&self.time_bounds, t)?;
        for (i, &si) in s.iter().enumerate() {
            idx = idx * self.m_s + Self::locate(&self.sqrt_bounds[i], si)?;
        }
        Some(idx)
    }

    pub fn contains(&self, t: f64, p: &SqrtPoint) -> Result<bool> {
        if p.dim() != self.dim() {
            return Err(invalid!("dimension mismatch: {} vs {}", p.dim(), self.dim()));
        }
        Ok(self.contains_sqrt(t, p.coords()))
    }

    #[inline]
    pub fn contains_sqrt(&self, t: f64, s: &[f64]) -> bool {
        self.locate_sqrt(t, s).is_some_and(|i| self.mask[i])
    }

    /// Membership for an x-space state; allocation-free for `n ≤ 8`.
    #[inline]
    pub fn contains_x(&self, t: f64, x: &[f64]) -> bool {
        let Some(mut idx) = Self::locate(&self.time_bounds, t) else {
            return false;
        };
        for (i, &xi) in x.iter().enumerate() {
            match Self::locate(&self.sqrt_bounds[i], xi.sqrt()) {
                Some(j) => idx = idx * self.m_s + j,
                None => return false,
            }
        }
        self.mask[idx]
    }

    /// Whether every marked cell lies inside `q`.
    pub fn fits_inside(&self, q: &HyperCube) -> bool {
        if self.dim() != q.dim() {
            return false;
        }
        if self.base.is_subset_of(q) {
            return true;
        }
        (0..self.mask.len()).filter(|&i| self.mask[i]).all(|idx| {
            let (k, j) = self.cell_coords(idx);
            let t_ok = q.t0() <= self.time_bounds[k] + GEOM_RTOL
                && self.time_bounds[k + 1] <= q.t_end() * (1.0 + GEOM_RTOL) + GEOM_RTOL;
            t_ok && j.iter().enumerate().all(|(i, &ji)| {
                let (lo, hi) = q.cube().sqrt_bounds(i);
                let (a, b) = (self.sqrt_bounds[i][ji], self.sqrt_bounds[i][ji + 1]);
                lo <= a + GEOM_RTOL * hi.max(1.0) && b <= hi + GEOM_RTOL * hi.max(1.0)
            })
        })
    }

    /// Cell-wise inclusion on an identical grid.
    pub fn is_subset_of(&self, other: &GridSet) -> bool {
        self.base == other.base
            && self.m_t == other.m_t
            && self.m_s == other.m_s
            && self.mask.iter().zip(&other.mask).all(|(a, b)| !*a || *b)
    }
}

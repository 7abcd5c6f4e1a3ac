//! Recursive regular subdivision, the stopped-cube family, and the
//! dilation sets built from it.
//!
//! Decomposition runs on an integer lattice fixed by the root hypercube:
//! time is measured in units of `θρ₀²/T` and each square-root axis in units
//! of its root width over `U`, where `T` and `U` are powers of three large
//! enough to resolve both the grid cells of Γ and every subdivision level.
//! Occupancy is then a finite sum of exact cell overlaps, so a node lying
//! inside a single cell has occupancy exactly 0 or 1.

use serde::Serialize;

use crate::error::{invalid, precondition, Result};
use crate::geometry::HyperCube;
use crate::grid::GridSet;

/// Deepest supported subdivision level (`9^12` time units fit in a `u64`).
pub const MAX_LEVEL_LIMIT: u32 = 12;

/// Children of a regular hypercube: 9 time slabs, a two-way split along
/// boundary axes (`s = 0`) and a three-way split along interior axes. All
/// children have size `ρ/3`. Order is time-major, then lexicographic in space.
pub fn subdivide(q: &HyperCube) -> Result<Vec<HyperCube>> {
    if !q.is_regular() {
        return Err(invalid!("subdivision needs a regular hypercube"));
    }
    let rho = q.rho();
    let child = rho / 3.0;
    let per_axis: Vec<Vec<f64>> = q
        .cube()
        .center()
        .coords()
        .iter()
        .map(|&s| {
            if s == 0.0 {
                vec![0.0, 2.0 * rho / 3.0]
            } else {
                vec![s - 2.0 * rho / 3.0, s, s + 2.0 * rho / 3.0]
            }
        })
        .collect();
    let slab = q.time_extent() / 9.0;
    let mut out = Vec::new();
    for k in 0..9 {
        let t = q.t0() + k as f64 * slab;
        for centers in cartesian(&per_axis) {
            out.push(HyperCube::from_parts(t, q.theta(), centers, child)?);
        }
    }
    Ok(out)
}

fn cartesian<T: Copy>(axes: &[Vec<T>]) -> Vec<Vec<T>> {
    axes.iter().fold(vec![Vec::new()], |acc, choices| {
        acc.iter()
            .flat_map(|prefix| {
                choices.iter().map(move |&c| {
                    let mut v = prefix.clone();
                    v.push(c);
                    v
                })
            })
            .collect()
    })
}

fn is_power_of_three(mut m: u64) -> bool {
    while m > 1 && m.is_multiple_of(3) {
        m /= 3;
    }
    m == 1
}

#[derive(Clone, Debug, PartialEq)]
struct Node {
    t: (u64, u64),
    s: Vec<(u64, u64)>,
    level: u32,
}

impl Node {
    fn is_boundary(&self, axis: usize, lattice: &Lattice) -> bool {
        lattice.boundary[axis] && self.s[axis].0 == 0
    }
}

struct Lattice<'a> {
    root: &'a HyperCube,
    gamma: &'a GridSet,
    t_units: u64,
    s_units: u64,
    boundary: Vec<bool>,
    lo: Vec<f64>,
    unit: Vec<f64>,
}

impl<'a> Lattice<'a> {
    fn new(root: &'a HyperCube, gamma: &'a GridSet, levels: u32) -> Result<Self> {
        let (m_t, m_s) = gamma.resolution();
        let t_units = (m_t as u64).max(9u64.pow(levels));
        let s_units = (m_s as u64).max(3u64.pow(levels));
        let n = root.dim();
        let mut lo = Vec::with_capacity(n);
        let mut unit = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b) = root.cube().sqrt_bounds(i);
            lo.push(a);
            unit.push((b - a) / s_units as f64);
        }
        Ok(Self {
            root,
            gamma,
            t_units,
            s_units,
            boundary: root.cube().center().coords().iter().map(|&s| s == 0.0).collect(),
            lo,
            unit,
        })
    }

    fn root_node(&self) -> Node {
        Node {
            t: (0, self.t_units),
            s: vec![(0, self.s_units); self.root.dim()],
            level: 0,
        }
    }

    #[inline]
    fn s_at(&self, axis: usize, idx: u64) -> f64 {
        self.lo[axis] + idx as f64 * self.unit[axis]
    }

    #[inline]
    fn x_len(&self, axis: usize, p: u64, q: u64) -> f64 {
        let (a, b) = (self.s_at(axis, p), self.s_at(axis, q));
        b * b - a * a
    }

    #[inline]
    fn t_len(&self, a: u64, b: u64) -> f64 {
        (b - a) as f64 * self.root.time_extent() / self.t_units as f64
    }

    fn measure(&self, node: &Node) -> f64 {
        node.s
            .iter()
            .enumerate()
            .fold(self.t_len(node.t.0, node.t.1), |acc, (i, &(p, q))| acc * self.x_len(i, p, q))
    }

    fn gamma_overlap(&self, node: &Node) -> f64 {
        let (m_t, m_s) = self.gamma.resolution();
        let ct = self.t_units / m_t as u64;
        let cs = self.s_units / m_s as u64;
        let overlaps = |lo: u64, hi: u64, cell: u64, len: &dyn Fn(u64, u64) -> f64| {
            (lo / cell..hi.div_ceil(cell))
                .map(|k| {
                    let a = lo.max(k * cell);
                    let b = hi.min((k + 1) * cell);
                    (k as usize, len(a, b))
                })
                .collect::<Vec<_>>()
        };
        let time = overlaps(node.t.0, node.t.1, ct, &|a, b| self.t_len(a, b));
        let space: Vec<Vec<(usize, f64)>> = node
            .s
            .iter()
            .enumerate()
            .map(|(i, &(p, q))| overlaps(p, q, cs, &|a, b| self.x_len(i, a, b)))
            .collect();
        let mask = self.gamma.mask();
        let mut total = 0.0;
        let n = space.len();
        let mut pos = vec![0usize; n];
        for &(k, dt) in &time {
            pos.iter_mut().for_each(|p| *p = 0);
            'cells: loop {
                let mut idx = k;
                let mut w = dt;
                for i in 0..n {
                    let (j, dx) = space[i][pos[i]];
                    idx = idx * m_s + j;
                    w *= dx;
                }
                if mask[idx] {
                    total += w;
                }
                for i in (0..n).rev() {
                    pos[i] += 1;
                    if pos[i] < space[i].len() {
                        continue 'cells;
                    }
                    pos[i] = 0;
                }
                break;
            }
        }
        total
    }

    fn occupancy(&self, node: &Node) -> f64 {
        self.gamma_overlap(node) / self.measure(node)
    }

    fn children(&self, node: &Node) -> Vec<Node> {
        let dt = (node.t.1 - node.t.0) / 9;
        let per_axis: Vec<Vec<(u64, u64)>> = node
            .s
            .iter()
            .enumerate()
            .map(|(i, &(p, q))| {
                if node.is_boundary(i, self) {
                    let third = q / 3;
                    vec![(0, third), (third, q)]
                } else {
                    let w = (q - p) / 3;
                    vec![(p, p + w), (p + w, p + 2 * w), (p + 2 * w, q)]
                }
            })
            .collect();
        let spatial = cartesian(&per_axis);
        let mut out = Vec::with_capacity(9 * spatial.len());
        for k in 0..9 {
            let t = (node.t.0 + k * dt, node.t.0 + (k + 1) * dt);
            for s in &spatial {
                out.push(Node {
                    t,
                    s: s.clone(),
                    level: node.level + 1,
                });
            }
        }
        out
    }

    fn hypercube(&self, node: &Node) -> HyperCube {
        let rho = self.root.rho() / 3f64.powi(node.level as i32);
        let centers = node
            .s
            .iter()
            .enumerate()
            .map(|(i, &(p, q))| {
                if node.is_boundary(i, self) {
                    0.0
                } else {
                    0.5 * (self.s_at(i, p) + self.s_at(i, q))
                }
            })
            .collect();
        let t0 = self.root.t0() + self.t_len(0, node.t.0);
        HyperCube::from_parts(t0, self.root.theta(), centers, rho)
            .expect("lattice nodes are valid hypercubes")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StoppedCube {
    pub cube: HyperCube,
    pub level: u32,
    pub occupancy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CzMeasures {
    pub q: f64,
    pub gamma: f64,
    pub root_occupancy: f64,
    /// Part of Γ outside the union of the dense cubes.
    pub residual_dense: f64,
}

/// Output of [`cz_decompose`].
#[derive(Clone, Debug, Serialize)]
pub struct CzDecomposition {
    /// Nodes below the threshold with at least one dense child.
    #[serde(rename = "stopped_cubes")]
    pub stopped: Vec<StoppedCube>,
    /// The dense children themselves (occupancy ≥ μ, parent below μ).
    pub dense_cubes: Vec<StoppedCube>,
    /// Measure of Γ outside the union of the stopped cubes.
    pub residual: f64,
    pub measures: CzMeasures,
    pub mu: f64,
    pub max_level: u32,
}

impl CzDecomposition {
    pub fn stopped_cubes(&self) -> Vec<HyperCube> {
        self.stopped.iter().map(|s| s.cube.clone()).collect()
    }
}

/// Depth from which no lattice node is wider than a grid cell. Interior
/// children of a boundary cube are two lattice units wide, hence the
/// factor 2.
pub fn cell_depth(gamma: &GridSet) -> u32 {
    let (m_t, m_s) = gamma.resolution();
    let mut l = 0;
    while 3u64.pow(l) < 2 * m_s as u64 || 9u64.pow(l) < m_t as u64 {
        l += 1;
    }
    l
}

fn check_gamma(q: &HyperCube, gamma: &GridSet) -> Result<()> {
    if !q.is_regular() {
        return Err(invalid!("decomposition needs a regular hypercube"));
    }
    if !gamma.fits_inside(q) {
        return Err(invalid!("gamma is not contained in the base hypercube"));
    }
    if !gamma.base().approx_eq(q) {
        return Err(invalid!("gamma must be gridded on the decomposed hypercube itself"));
    }
    let (m_t, m_s) = gamma.resolution();
    if !is_power_of_three(m_t as u64) || !is_power_of_three(m_s as u64) {
        return Err(invalid!("grid resolution must be powers of three, got ({m_t}, {m_s})"));
    }
    Ok(())
}

/// Stopped-cube family of Γ in Q at threshold μ. `max_level` defaults to
/// [`cell_depth`]. Below a boundary face the lattice never aligns exactly
/// with a uniform grid, so the residual shrinks with depth but only
/// vanishes in the limit.
pub fn cz_decompose(
    q: &HyperCube,
    gamma: &GridSet,
    mu: f64,
    max_level: Option<u32>,
) -> Result<CzDecomposition> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(invalid!("mu must lie in (0, 1), got {mu}"));
    }
    check_gamma(q, gamma)?;
    let max_level = max_level.unwrap_or_else(|| cell_depth(gamma));
    if max_level > MAX_LEVEL_LIMIT {
        return Err(invalid!("max_level {max_level} exceeds the limit {MAX_LEVEL_LIMIT}"));
    }
    let lat = Lattice::new(q, gamma, max_level.max(cell_depth(gamma)))?;
    let root = lat.root_node();
    let q_measure = lat.measure(&root);
    let gamma_measure = lat.gamma_overlap(&root);
    let root_occ = gamma_measure / q_measure;

    let mut out = CzDecomposition {
        stopped: Vec::new(),
        dense_cubes: Vec::new(),
        residual: 0.0,
        measures: CzMeasures {
            q: q_measure,
            gamma: gamma_measure,
            root_occupancy: root_occ,
            residual_dense: 0.0,
        },
        mu,
        max_level,
    };
    if root_occ >= mu {
        let whole = StoppedCube {
            cube: q.clone(),
            level: 0,
            occupancy: root_occ,
        };
        out.stopped.push(whole.clone());
        out.dense_cubes.push(whole);
        return Ok(out);
    }
    if gamma_measure == 0.0 {
        return Ok(out);
    }

    let mut covered_s = 0.0;
    let mut covered_dense = 0.0;
    let mut stack = vec![(root, root_occ, false)];
    while let Some((node, occ, covered)) = stack.pop() {
        if node.level >= max_level {
            continue;
        }
        let kids: Vec<(Node, f64)> = lat
            .children(&node)
            .into_iter()
            .map(|c| {
                let o = lat.occupancy(&c);
                (c, o)
            })
            .collect();
        let stops = kids.iter().any(|(_, o)| *o >= mu);
        if stops {
            if !covered {
                covered_s += occ * lat.measure(&node);
            }
            out.stopped.push(StoppedCube {
                cube: lat.hypercube(&node),
                level: node.level,
                occupancy: occ,
            });
        }
        // push in reverse so children are visited in index order
        for (c, o) in kids.into_iter().rev() {
            if o >= mu {
                covered_dense += o * lat.measure(&c);
                out.dense_cubes.push(StoppedCube {
                    cube: lat.hypercube(&c),
                    level: c.level,
                    occupancy: o,
                });
            } else if o > 0.0 {
                stack.push((c, o, covered || stops));
            }
        }
    }
    out.residual = (gamma_measure - covered_s).max(0.0);
    out.measures.residual_dense = (gamma_measure - covered_dense).max(0.0);
    Ok(out)
}

/// Axis-aligned box in `(t, s)` coordinates, closed-open.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DilationBox {
    pub t: (f64, f64),
    pub s: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DilationSets {
    pub d1: Vec<DilationBox>,
    pub d2: Vec<DilationBox>,
    pub eta: f64,
    pub d1_measure: f64,
    pub d2_measure: f64,
    /// Measure of `D₂ ∩ Q`.
    pub d2_in_q_measure: f64,
}

/// `D₁` and `D₂` for a family of stopped cubes inside `q`.
pub fn build_dilations(family: &[HyperCube], q: &HyperCube, eta: f64) -> Result<DilationSets> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(invalid!("eta must be positive, got {eta}"));
    }
    let n = q.dim();
    let mut d1 = Vec::with_capacity(family.len());
    let mut d2 = Vec::with_capacity(family.len());
    for c in family {
        if c.dim() != n || !c.is_subset_of(q) {
            return Err(invalid!("stopped cube is not inside the base hypercube"));
        }
        if !c.is_regular() {
            return Err(invalid!("stopped cube is not regular"));
        }
        let rho = c.rho();
        let tr = c.time_extent();
        let s: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let ci = c.cube().center().coords()[i];
                let (qlo, qhi) = q.cube().sqrt_bounds(i);
                ((ci - 3.0 * rho).max(0.0).max(qlo), (ci + 3.0 * rho).min(qhi))
            })
            .collect();
        d1.push(DilationBox {
            t: ((c.t0() - 3.0 * tr).max(q.t0()), (c.t0() + 4.0 * tr).min(q.t_end())),
            s: s.clone(),
        });
        d2.push(DilationBox {
            t: (c.t0() - tr - 4.0 * tr / eta, c.t0() - tr),
            s,
        });
    }
    let d1_measure = union_measure(&d1, n, None)?;
    let d2_measure = union_measure(&d2, n, None)?;
    let d2_in_q_measure = union_measure(&d2, n, Some((q.t0(), q.t_end())))?;
    Ok(DilationSets {
        d1,
        d2,
        eta,
        d1_measure,
        d2_measure,
        d2_in_q_measure,
    })
}

/// Exact `(t, x)` measure of a union of boxes by coordinate compression in
/// space and interval merging in time.
fn union_measure(boxes: &[DilationBox], n: usize, clip: Option<(f64, f64)>) -> Result<f64> {
    if boxes.is_empty() {
        return Ok(0.0);
    }
    let breaks: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut b: Vec<f64> = boxes.iter().flat_map(|bx| [bx.s[i].0, bx.s[i].1]).collect();
            b.sort_by(f64::total_cmp);
            b.dedup();
            b
        })
        .collect();
    let dims: Vec<usize> = breaks.iter().map(|b| b.len().saturating_sub(1)).collect();
    let cells: usize = dims.iter().product();
    if cells > 20_000_000 {
        return Err(invalid!("dilation union needs {cells} cells; family too large"));
    }
    let mut times: Vec<Vec<(f64, f64)>> = vec![Vec::new(); cells];
    for bx in boxes {
        let (mut a, mut b) = bx.t;
        if let Some((lo, hi)) = clip {
            a = a.max(lo);
            b = b.min(hi);
        }
        if b <= a {
            continue;
        }
        let ranges: Vec<(usize, usize)> = (0..n)
            .map(|i| {
                let lo = breaks[i].partition_point(|v| *v < bx.s[i].0);
                let hi = breaks[i].partition_point(|v| *v < bx.s[i].1);
                (lo, hi)
            })
            .collect();
        if ranges.iter().any(|(lo, hi)| hi <= lo) {
            continue;
        }
        let mut pos: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        'cells: loop {
            let idx = pos.iter().zip(&dims).fold(0, |acc, (p, d)| acc * d + p);
            times[idx].push((a, b));
            for i in (0..n).rev() {
                pos[i] += 1;
                if pos[i] < ranges[i].1 {
                    continue 'cells;
                }
                pos[i] = ranges[i].0;
            }
            break;
        }
    }
    let mut total = 0.0;
    for (idx, iv) in times.iter_mut().enumerate() {
        if iv.is_empty() {
            continue;
        }
        iv.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut len = 0.0;
        let (mut cur_a, mut cur_b) = iv[0];
        for &(a, b) in iv.iter().skip(1) {
            if a > cur_b {
                len += cur_b - cur_a;
                cur_a = a;
                cur_b = b;
            } else {
                cur_b = cur_b.max(b);
            }
        }
        len += cur_b - cur_a;
        let mut rem = idx;
        let mut vol = len;
        for i in (0..n).rev() {
            let j = rem % dims[i];
            rem /= dims[i];
            let (s0, s1) = (breaks[i][j], breaks[i][j + 1]);
            vol *= s1 * s1 - s0 * s0;
        }
        total += vol;
    }
    Ok(total)
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyA {
    pub holds: bool,
    pub gamma_measure: f64,
    pub d1_measure: f64,
    pub mu: f64,
}

/// `|Γ| ≤ μ|Q|` implies `|Γ| ≤ μ|D₁|`.
pub fn verify_a(gamma: &GridSet, q: &HyperCube, mu: f64) -> Result<VerifyA> {
    let dec = cz_decompose(q, gamma, mu, None)?;
    if dec.measures.gamma > mu * dec.measures.q {
        return Err(precondition!(
            "|Γ| = {} exceeds μ|Q| = {}",
            dec.measures.gamma,
            mu * dec.measures.q
        ));
    }
    let d = build_dilations(&dec.stopped_cubes(), q, default_eta(mu))?;
    Ok(VerifyA {
        holds: dec.measures.gamma <= mu * d.d1_measure,
        gamma_measure: dec.measures.gamma,
        d1_measure: d.d1_measure,
        mu,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyB {
    pub holds: bool,
    pub ratio: f64,
    pub d1_measure: f64,
    pub d2_measure: f64,
    pub tolerance: f64,
}

/// `|D₁| ≤ (1+η)|D₂|`, with slack `2/resolution`.
pub fn verify_b(family: &[HyperCube], q: &HyperCube, eta: f64, resolution: usize) -> Result<VerifyB> {
    if resolution == 0 {
        return Err(invalid!("resolution must be positive"));
    }
    let d = build_dilations(family, q, eta)?;
    let tolerance = 2.0 / resolution as f64;
    let ratio = if d.d2_measure > 0.0 {
        d.d1_measure / d.d2_measure
    } else if d.d1_measure == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(VerifyB {
        holds: d.d1_measure <= (1.0 + eta) * d.d2_measure * (1.0 + tolerance),
        ratio,
        d1_measure: d.d1_measure,
        d2_measure: d.d2_measure,
        tolerance,
    })
}

/// `η = μ^{-1/4} − 1`.
pub fn default_eta(mu: f64) -> f64 {
    mu.powf(-0.25) - 1.0
}

/// Lower bound `(1−√μ)√μ'/4` on the size of a dense subcube.
pub fn dense_size_bound(mu_prime: f64, mu: f64) -> f64 {
    (1.0 - mu.sqrt()) * mu_prime.sqrt() / 4.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `|D₂ ∩ Q| ≥ μ^{-1/4} μ' |Q|`.
    SpreadOut,
    /// A dense regular subcube of controlled size exists.
    DenseCube,
    Neither,
}

#[derive(Clone, Debug, Serialize)]
pub struct DichotomyReport {
    pub branch: Branch,
    pub eta: f64,
    pub d2_in_q_measure: f64,
    pub spread_threshold: f64,
    pub dense_cube: Option<StoppedCube>,
    pub size_bound: f64,
}

pub fn dichotomy(gamma: &GridSet, q: &HyperCube, mu_prime: f64, mu: f64) -> Result<DichotomyReport> {
    if !(0.0 < mu_prime && mu_prime < mu && mu < 1.0) {
        return Err(precondition!("need 0 < μ' < μ < 1, got μ' = {mu_prime}, μ = {mu}"));
    }
    let dec = cz_decompose(q, gamma, mu, None)?;
    if dec.measures.gamma < mu_prime * dec.measures.q {
        return Err(precondition!(
            "|Γ| = {} is below μ'|Q| = {}",
            dec.measures.gamma,
            mu_prime * dec.measures.q
        ));
    }
    let eta = default_eta(mu);
    let size_bound = dense_size_bound(mu_prime, mu);
    let spread_threshold = mu.powf(-0.25) * mu_prime * dec.measures.q;
    let mut report = DichotomyReport {
        branch: Branch::Neither,
        eta,
        d2_in_q_measure: 0.0,
        spread_threshold,
        dense_cube: None,
        size_bound,
    };
    if dec.measures.root_occupancy >= mu {
        report.branch = Branch::DenseCube;
        report.dense_cube = dec.dense_cubes.first().cloned();
        return Ok(report);
    }
    let d = build_dilations(&dec.stopped_cubes(), q, eta)?;
    report.d2_in_q_measure = d.d2_in_q_measure;
    if d.d2_in_q_measure >= spread_threshold {
        report.branch = Branch::SpreadOut;
        return Ok(report);
    }
    let largest = dec
        .dense_cubes
        .iter()
        .filter(|c| c.occupancy >= mu && c.cube.is_regular())
        .min_by_key(|c| c.level);
    if let Some(c) = largest {
        if c.cube.rho() >= size_bound {
            report.branch = Branch::DenseCube;
            report.dense_cube = Some(c.clone());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q1(s: f64) -> HyperCube {
        HyperCube::from_parts(0.0, 1.0, vec![s], 1.0).unwrap()
    }

    /// Oracle: enumerate children by hand from the splitting rule.
    fn expected_sections(s: f64) -> Vec<(f64, f64)> {
        if s == 0.0 {
            vec![(0.0, 1.0 / 9.0), (1.0 / 9.0, 1.0)]
        } else {
            vec![
                ((s - 1.0).powi(2), (s - 1.0 / 3.0).powi(2)),
                ((s - 1.0 / 3.0).powi(2), (s + 1.0 / 3.0).powi(2)),
                ((s + 1.0 / 3.0).powi(2), (s + 1.0).powi(2)),
            ]
        }
    }

    #[test]
    fn subdivide_one_dimensional_cases() {
        for s in [0.0, 1.0] {
            let q = q1(s);
            let kids = subdivide(&q).unwrap();
            let sections = expected_sections(s);
            assert_eq!(kids.len(), 9 * sections.len());
            for (idx, k) in kids.iter().enumerate() {
                let slab = idx / sections.len();
                let (lo, hi) = sections[idx % sections.len()];
                assert!(k.is_regular());
                assert!((k.t0() - slab as f64 / 9.0).abs() < 1e-15);
                assert!((k.time_extent() - 1.0 / 9.0).abs() < 1e-15);
                let iv = k.cube().interval(0);
                assert!((iv.lo - lo).abs() < 1e-14 && (iv.hi - hi).abs() < 1e-14);
            }
            let total: f64 = kids.iter().map(|k| k.measure()).sum();
            assert!((total - q.measure()).abs() <= 1e-12 * q.measure());
        }
    }

    #[test]
    fn subdivide_rejects_irregular() {
        assert!(subdivide(&HyperCube::from_parts(0.0, 1.0, vec![0.5], 1.0).unwrap()).is_err());
    }

    #[test]
    fn subdivide_children_are_disjoint() {
        let q = HyperCube::from_parts(0.0, 0.5, vec![0.0, 2.0], 1.0).unwrap();
        let kids = subdivide(&q).unwrap();
        assert_eq!(kids.len(), 9 * 2 * 3);
        // every child's midpoint lies in exactly one child
        for k in &kids {
            let t = k.t0() + 0.5 * k.time_extent();
            let x: Vec<f64> = (0..2)
                .map(|i| {
                    let iv = k.cube().interval(i);
                    0.5 * (iv.lo + iv.hi)
                })
                .collect();
            assert_eq!(kids.iter().filter(|c| c.contains_x(t, &x)).count(), 1);
        }
    }

    #[test]
    fn lattice_children_match_float_subdivision() {
        let q = HyperCube::from_parts(0.0, 1.0, vec![0.0, 2.0], 1.0).unwrap();
        let g = GridSet::empty(q.clone(), 9, 9).unwrap();
        let lat = Lattice::new(&q, &g, 2).unwrap();
        let root = lat.root_node();
        let float_kids = subdivide(&q).unwrap();
        let lat_kids = lat.children(&root);
        assert_eq!(float_kids.len(), lat_kids.len());
        for (f, l) in float_kids.iter().zip(&lat_kids) {
            assert!(f.approx_eq(&lat.hypercube(l)));
            assert!((f.measure() - lat.measure(l)).abs() <= 1e-12 * f.measure());
            for (ff, ll) in subdivide(f).unwrap().iter().zip(lat.children(l)) {
                assert!(ff.approx_eq(&lat.hypercube(&ll)));
            }
        }
    }

    #[test]
    fn decompose_full_and_empty() {
        let q = HyperCube::from_parts(0.0, 1.0, vec![0.0, 1.0], 1.0).unwrap();
        let full = GridSet::full(q.clone(), 9, 9).unwrap();
        let d = cz_decompose(&q, &full, 0.5, None).unwrap();
        assert_eq!(d.stopped.len(), 1);
        assert!(d.stopped[0].cube.approx_eq(&q));
        assert_eq!(d.residual, 0.0);
        let empty = GridSet::empty(q.clone(), 9, 9).unwrap();
        let d = cz_decompose(&q, &empty, 0.5, None).unwrap();
        assert!(d.stopped.is_empty());
        assert_eq!(d.residual, 0.0);
    }

    #[test]
    fn thin_far_strip_is_covered_at_default_depth() {
        // one-cell-wide columns at the far edge of a boundary cube
        let q = HyperCube::from_parts(0.0, 1.0, vec![0.0, 0.0], 1.0).unwrap();
        let g = GridSet::far_fraction(q.clone(), 9, 9, 0.3).unwrap();
        let l = cell_depth(&g);
        assert_eq!(l, 3);
        let shallow = cz_decompose(&q, &g, 0.6, Some(l)).unwrap();
        let deep = cz_decompose(&q, &g, 0.6, Some(l + 1)).unwrap();
        assert!(deep.measures.residual_dense < 0.5 * shallow.measures.residual_dense);
        assert!(verify_a(&g, &q, 0.6).unwrap().holds);
    }

    #[test]
    fn decompose_single_level_two_cell() {
        // Γ is exactly one level-2 node: time slab 0 of 81, first spatial cell of 9
        let q = q1(0.0);
        let g = GridSet::from_cells(q.clone(), 81, 9, |k, j| k == 0 && j[0] == 0).unwrap();
        let d = cz_decompose(&q, &g, 0.5, None).unwrap();
        assert_eq!(d.residual, 0.0);
        // oracle: brute force occupancies of the chain root → level 1 → level 2
        let l1 = &subdivide(&q).unwrap()[0];
        let l2 = &subdivide(l1).unwrap()[0];
        let gm = g.measure();
        assert!(gm / q.measure() < 0.5 && gm / l1.measure() < 0.5);
        assert!((gm / l2.measure() - 1.0).abs() < 1e-12);
        assert_eq!(d.stopped.len(), 1);
        assert!(d.stopped[0].cube.approx_eq(l1));
        assert_eq!(d.dense_cubes.len(), 1);
        assert!(d.dense_cubes[0].cube.approx_eq(l2));
        assert!(d.dense_cubes[0].occupancy >= 0.5);
        assert!(d.stopped[0].occupancy < 0.5);
    }

    #[test]
    fn decompose_rejects_bad_input() {
        let q = q1(0.0);
        let g = GridSet::empty(q.clone(), 9, 9).unwrap();
        assert!(cz_decompose(&q, &g, 0.0, None).is_err());
        assert!(cz_decompose(&q, &g, 1.0, None).is_err());
        let other = GridSet::empty(q1(1.0), 9, 9).unwrap();
        assert!(cz_decompose(&q, &other, 0.5, None).is_err());
        let odd = GridSet::empty(q.clone(), 8, 9).unwrap();
        assert!(cz_decompose(&q, &odd, 0.5, None).is_err());
    }

    #[test]
    fn dilations_of_whole_cube() {
        let q = HyperCube::from_parts(0.0, 1.0, vec![0.0, 2.0], 1.0).unwrap();
        let d = build_dilations(std::slice::from_ref(&q), &q, 1.0).unwrap();
        assert!((d.d1_measure - q.measure()).abs() <= 1e-12 * q.measure());
        let e = build_dilations(&[], &q, 1.0).unwrap();
        assert_eq!((e.d1_measure, e.d2_measure), (0.0, 0.0));
        assert!(build_dilations(&[], &q, 0.0).is_err());
    }

    #[test]
    fn d2_slab_length() {
        let q = HyperCube::from_parts(0.0, 1.0, vec![0.0], 1.0).unwrap();
        let small = HyperCube::from_parts(0.5, 1.0, vec![2.0 / 3.0], 1.0 / 3.0).unwrap();
        let eta = 0.25;
        let d = build_dilations(std::slice::from_ref(&small), &q, eta).unwrap();
        let tr = small.time_extent();
        assert!((d.d2[0].t.1 - d.d2[0].t.0 - 4.0 * tr / eta).abs() < 1e-14);
        // spatial factor K(x,3ρ) clipped to the base is all of [0,1)
        assert_eq!(d.d2[0].s, vec![(0.0, 1.0)]);
        assert!((d.d2_measure - 4.0 * tr / eta).abs() < 1e-14);
    }

    #[test]
    fn union_measure_merges_overlaps() {
        let b = |t: (f64, f64), s: (f64, f64)| DilationBox { t, s: vec![s] };
        // [0,2)×[0,1) ∪ [1,3)×[0.5,1): x-measures 1 and 0.75
        let m = union_measure(&[b((0.0, 2.0), (0.0, 1.0)), b((1.0, 3.0), (0.5, 1.0))], 1, None).unwrap();
        assert!((m - (2.0 * 1.0 + 1.0 * 0.75)).abs() < 1e-15);
        let clipped =
            union_measure(&[b((0.0, 2.0), (0.0, 1.0)), b((1.0, 3.0), (0.5, 1.0))], 1, Some((0.0, 1.5))).unwrap();
        assert!((clipped - 1.5).abs() < 1e-15);
    }

    #[test]
    fn verify_a_cases() {
        let q = q1(0.0);
        let empty = GridSet::empty(q.clone(), 9, 9).unwrap();
        assert!(verify_a(&empty, &q, 0.5).unwrap().holds);
        let full = GridSet::full(q.clone(), 9, 9).unwrap();
        assert!(matches!(verify_a(&full, &q, 0.5), Err(crate::Error::Precondition(_))));
    }

    #[test]
    fn verify_b_vacuous() {
        let q = q1(0.0);
        let r = verify_b(&[], &q, 1.0, 27).unwrap();
        assert!(r.holds);
    }

    #[test]
    fn size_bound_value() {
        let b = dense_size_bound(0.3, 0.6);
        assert!((b - 0.030_91).abs() < 1e-4);
    }

    #[test]
    fn dichotomy_dense_root() {
        let q = q1(0.0);
        let full = GridSet::full(q.clone(), 9, 9).unwrap();
        let r = dichotomy(&full, &q, 0.3, 0.6).unwrap();
        assert_eq!(r.branch, Branch::DenseCube);
        assert!(r.dense_cube.unwrap().cube.approx_eq(&q));
        let empty = GridSet::empty(q.clone(), 9, 9).unwrap();
        assert!(dichotomy(&empty, &q, 0.3, 0.6).is_err());
        assert!(dichotomy(&full, &q, 0.6, 0.3).is_err());
    }
}

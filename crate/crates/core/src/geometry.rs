//! Square-root coordinates and the anisotropic cube family.
//!
//! Points of the orthant are stored as `s = √x` per axis. The cube
//! `K(x, ρ)` is a product of intervals that have uniform width `2ρ` in
//! square-root coordinates (clamped at zero), and a hypercube adds the time
//! slab `[t0, t0 + θρ²)`. All intervals are closed-open.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Relative tolerance for geometric equality and inclusion assertions.
pub const GEOM_RTOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SqrtPoint {
    s: Vec<f64>,
}

impl SqrtPoint {
    pub fn new(s: Vec<f64>) -> Result<Self> {
        if s.is_empty() {
            return Err(invalid!("point must have at least one coordinate"));
        }
        if let Some(bad) = s.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(invalid!("square-root coordinate {bad} is not a finite nonnegative number"));
        }
        Ok(Self { s })
    }

    pub fn from_x(x: &[f64]) -> Result<Self> {
        if let Some(bad) = x.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(invalid!("coordinate {bad} is outside the orthant"));
        }
        Self::new(x.iter().map(|v| v.sqrt()).collect())
    }

    pub fn origin(dim: usize) -> Self {
        Self { s: vec![0.0; dim] }
    }

    pub fn to_x(&self) -> Vec<f64> {
        self.s.iter().map(|v| v * v).collect()
    }

    pub fn coords(&self) -> &[f64] {
        &self.s
    }

    pub fn dim(&self) -> usize {
        self.s.len()
    }
}

impl TryFrom<Vec<f64>> for SqrtPoint {
    type Error = crate::error::Error;

    fn try_from(s: Vec<f64>) -> Result<Self> {
        Self::new(s)
    }
}

impl From<SqrtPoint> for Vec<f64> {
    fn from(p: SqrtPoint) -> Self {
        p.s
    }
}

/// Closed-open interval `[lo, hi)` in x-space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x < self.hi
    }
}

/// The interval `L(x, ρ)` for `s = √x`: `[((s−ρ)⁺)², (s+ρ)²)`.
///
/// The knife edge `s = ρ` falls on the boundary branch `[0, (s+ρ)²)`.
pub fn interval(s: f64, rho: f64) -> Result<Interval> {
    check_sqrt_rho(s, rho)?;
    let (lo, hi) = sqrt_bounds(s, rho);
    Ok(Interval {
        lo: lo * lo,
        hi: hi * hi,
    })
}

/// Endpoints of `L(x, ρ)` in square-root coordinates.
#[inline]
pub fn sqrt_bounds(s: f64, rho: f64) -> (f64, f64) {
    let lo = if s <= rho { 0.0 } else { s - rho };
    (lo, s + rho)
}

fn check_sqrt_rho(s: f64, rho: f64) -> Result<()> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(invalid!("size must be positive and finite, got {rho}"));
    }
    if !(s >= 0.0) || !s.is_finite() {
        return Err(invalid!("square-root coordinate must be nonnegative, got {s}"));
    }
    Ok(())
}

/// `max_i |√x^i − √y^i|`.
pub fn sqrt_distance(x: &SqrtPoint, y: &SqrtPoint) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(invalid!("dimension mismatch: {} vs {}", x.dim(), y.dim()));
    }
    Ok(x.s
        .iter()
        .zip(&y.s)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

fn approx_le(a: f64, b: f64) -> bool {
    a <= b + GEOM_RTOL * a.abs().max(b.abs()).max(1.0)
}

/// The anisotropic cube `K(x, ρ) = ∏ L(x^i, ρ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnisoCube {
    center: SqrtPoint,
    rho: f64,
}

impl AnisoCube {
    pub fn new(center: SqrtPoint, rho: f64) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(invalid!("cube size must be positive and finite, got {rho}"));
        }
        Ok(Self { center, rho })
    }

    pub fn center(&self) -> &SqrtPoint {
        &self.center
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn dim(&self) -> usize {
        self.center.dim()
    }

    pub fn interval(&self, axis: usize) -> Interval {
        let (lo, hi) = self.sqrt_bounds(axis);
        Interval {
            lo: lo * lo,
            hi: hi * hi,
        }
    }

    #[inline]
    pub fn sqrt_bounds(&self, axis: usize) -> (f64, f64) {
        sqrt_bounds(self.center.s[axis], self.rho)
    }

    pub fn contains(&self, p: &SqrtPoint) -> Result<bool> {
        if p.dim() != self.dim() {
            return Err(invalid!(
                "dimension mismatch: point has {} coordinates, cube has {}",
                p.dim(),
                self.dim()
            ));
        }
        Ok(self.contains_sqrt(p.coords()))
    }

    /// Membership for raw square-root coordinates (no dimension check).
    #[inline]
    pub fn contains_sqrt(&self, s: &[f64]) -> bool {
        s.iter().enumerate().all(|(i, &v)| {
            let (lo, hi) = self.sqrt_bounds(i);
            lo <= v && v < hi
        })
    }

    /// Membership for an x-space state.
    #[inline]
    pub fn contains_x(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(i, &v)| {
            let s = v.sqrt();
            let (lo, hi) = self.sqrt_bounds(i);
            lo <= s && s < hi
        })
    }

    /// Lebesgue measure in x-space.
    pub fn measure(&self) -> f64 {
        (0..self.dim()).map(|i| self.interval(i).len()).product()
    }

    /// Width along `axis` of the cube truncated to `√x ≥ δ`.
    pub fn truncated_width(&self, axis: usize, delta: f64) -> Result<f64> {
        if axis >= self.dim() {
            return Err(invalid!("axis {axis} out of range for dimension {}", self.dim()));
        }
        if !(delta > 0.0 && delta < self.rho) {
            return Err(invalid!("truncation level must lie in (0, {}), got {delta}", self.rho));
        }
        let iv = self.interval(axis);
        Ok(iv.hi - iv.lo.max(delta * delta))
    }

    /// Every center coordinate is zero or at least the size.
    pub fn is_regular(&self) -> bool {
        self.center.s.iter().all(|&s| s == 0.0 || s >= self.rho)
    }

    /// Inclusion test, tolerant to rounding at the endpoints.
    pub fn is_subset_of(&self, other: &AnisoCube) -> bool {
        self.dim() == other.dim()
            && (0..self.dim()).all(|i| {
                let (a_lo, a_hi) = self.sqrt_bounds(i);
                let (b_lo, b_hi) = other.sqrt_bounds(i);
                approx_le(b_lo, a_lo) && approx_le(a_hi, b_hi)
            })
    }

    pub fn approx_eq(&self, other: &AnisoCube) -> bool {
        self.is_subset_of(other) && other.is_subset_of(self)
    }
}

/// The hypercube `Q_θ(t0, x, ρ) = [t0, t0 + θρ²) × K(x, ρ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HyperCubeRepr", into = "HyperCubeRepr")]
pub struct HyperCube {
    t0: f64,
    theta: f64,
    cube: AnisoCube,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HyperCubeRepr {
    t0: f64,
    theta: f64,
    centers_sqrt: Vec<f64>,
    rho: f64,
}

impl TryFrom<HyperCubeRepr> for HyperCube {
    type Error = crate::error::Error;

    fn try_from(r: HyperCubeRepr) -> Result<Self> {
        HyperCube::new(r.t0, r.theta, AnisoCube::new(SqrtPoint::new(r.centers_sqrt)?, r.rho)?)
    }
}

impl From<HyperCube> for HyperCubeRepr {
    fn from(q: HyperCube) -> Self {
        HyperCubeRepr {
            t0: q.t0,
            theta: q.theta,
            rho: q.cube.rho,
            centers_sqrt: q.cube.center.s,
        }
    }
}

impl HyperCube {
    pub fn new(t0: f64, theta: f64, cube: AnisoCube) -> Result<Self> {
        if !(t0 >= 0.0) || !t0.is_finite() {
            return Err(invalid!("time origin must be finite and nonnegative, got {t0}"));
        }
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(invalid!("theta must lie in (0, 1], got {theta}"));
        }
        Ok(Self { t0, theta, cube })
    }

    /// Convenience constructor from square-root centers.
    pub fn from_parts(t0: f64, theta: f64, centers_sqrt: Vec<f64>, rho: f64) -> Result<Self> {
        Self::new(t0, theta, AnisoCube::new(SqrtPoint::new(centers_sqrt)?, rho)?)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn cube(&self) -> &AnisoCube {
        &self.cube
    }

    pub fn rho(&self) -> f64 {
        self.cube.rho
    }

    pub fn dim(&self) -> usize {
        self.cube.dim()
    }

    pub fn time_extent(&self) -> f64 {
        self.theta * self.cube.rho * self.cube.rho
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + self.time_extent()
    }

    pub fn contains(&self, t: f64, p: &SqrtPoint) -> Result<bool> {
        Ok(self.contains_time(t) && self.cube.contains(p)?)
    }

    #[inline]
    pub fn contains_time(&self, t: f64) -> bool {
        self.t0 <= t && t < self.t_end()
    }

    #[inline]
    pub fn contains_x(&self, t: f64, x: &[f64]) -> bool {
        self.contains_time(t) && self.cube.contains_x(x)
    }

    pub fn measure(&self) -> f64 {
        self.time_extent() * self.cube.measure()
    }

    pub fn is_regular(&self) -> bool {
        self.cube.is_regular()
    }

    pub fn is_subset_of(&self, other: &HyperCube) -> bool {
        approx_le(other.t0, self.t0)
            && approx_le(self.t_end(), other.t_end())
            && self.cube.is_subset_of(&other.cube)
    }

    pub fn approx_eq(&self, other: &HyperCube) -> bool {
        self.is_subset_of(other) && other.is_subset_of(self)
    }

    /// Image under `(t0 + t, x) ↦ (t_offset + r t, r x)`, which is
    /// `Q_θ(t_offset, r x, √r ρ)`.
    pub fn rescale(&self, r: f64, t_offset: f64) -> Result<HyperCube> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(invalid!("rescaling factor must be positive, got {r}"));
        }
        let sr = r.sqrt();
        let centers = self.cube.center.s.iter().map(|s| sr * s).collect();
        HyperCube::from_parts(t_offset, self.theta, centers, sr * self.cube.rho)
    }

    /// Regular hypercube of size 2/3 obtained by shifting centers off the
    /// boundary layer. Requires size exactly 1.
    pub fn shift_shrink(&self) -> Result<HyperCube> {
        if self.cube.rho != 1.0 {
            return Err(invalid!("shift_shrink needs a hypercube of size 1, got {}", self.cube.rho));
        }
        let centers = self
            .cube
            .center
            .s
            .iter()
            .map(|&s| {
                if s < 1.0 / 3.0 {
                    0.0
                } else if s < 1.0 {
                    s + 1.0 / 3.0
                } else {
                    s
                }
            })
            .collect();
        HyperCube::from_parts(self.t0, self.theta, centers, 2.0 / 3.0)
    }
}

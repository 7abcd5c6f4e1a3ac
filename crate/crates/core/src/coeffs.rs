//! Coefficient fields, the generator, and condition checkers.
//!
//! The generator acting on `u(t, x)` is
//!
//! ```text
//! 𝓛u = ∂ₜu + ½ Σᵢⱼ aⁱʲ(x) √(xⁱxʲ) ∂ᵢⱼu + Σᵢ bⁱ(x) ∂ᵢu
//! ```
//!
//! and the matching SDE is `dXⁱ = bⁱ(X) dt + √Xⁱ Σₖ σⁱᵏ(X) dWᵏ` with
//! `σσᵀ = a`. Field implementations must be pure: the simulator calls them
//! from many worker threads at once.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::AnisoCube;

/// One axis of `dX = (β − κX) dt + √(σ²X) dW`. With `κ > 0` the mean
/// level is `m = β/κ`; `κ = 0` is the constant-drift limit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CirParams {
    pub kappa: f64,
    pub beta: f64,
    pub sigma2: f64,
}

impl CirParams {
    /// Mean-reverting form `κ(m − x)`.
    pub fn mean_reverting(kappa: f64, m: f64, sigma2: f64) -> Self {
        Self {
            kappa,
            beta: kappa * m,
            sigma2,
        }
    }
}

pub trait CoefficientField: Send + Sync {
    fn dim(&self) -> usize;

    /// The ellipticity/drift bound λ ≥ 1.
    fn lambda(&self) -> f64;

    /// `a(x)`, symmetric positive definite.
    fn diffusion(&self, x: &[f64]) -> DMatrix<f64>;

    fn drift(&self, x: &[f64], out: &mut [f64]);

    /// Writes σ(x) into `out`; the default factors `a(x)`.
    fn sigma_into(&self, x: &[f64], out: &mut DMatrix<f64>) {
        let l = sqrt_factor(&self.diffusion(x)).expect("diffusion matrix must be positive definite");
        out.copy_from(&l);
    }

    fn sigma(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        self.sigma_into(x, &mut out);
        out
    }

    /// True when `a` and `b` do not depend on `x`.
    fn is_constant(&self) -> bool {
        false
    }

    /// Per-axis parameters when the field is a decoupled CIR model.
    fn as_cir(&self) -> Option<Vec<CirParams>> {
        None
    }
}

/// Lower-triangular `σ` with `σσᵀ = a`.
pub fn sqrt_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Factorization(format!("matrix is {}×{}", a.nrows(), a.ncols())));
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    if (a - a.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Factorization("matrix is not symmetric".into()));
    }
    Cholesky::new(a.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::Factorization("matrix is not positive definite".into()))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 1.0) || !lambda.is_finite() {
        return Err(invalid!("lambda must be finite and at least 1, got {lambda}"));
    }
    Ok(())
}

/// `a` and `b` independent of `x`.
#[derive(Clone, Debug)]
pub struct ConstantField {
    a: DMatrix<f64>,
    b: DVector<f64>,
    sigma: DMatrix<f64>,
    lambda: f64,
}

impl ConstantField {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        if a.nrows() != b.len() || b.is_empty() {
            return Err(invalid!("a is {}×{} but b has {} entries", a.nrows(), a.ncols(), b.len()));
        }
        let sigma = sqrt_factor(&a)?;
        Ok(Self { a, b, sigma, lambda })
    }

    /// One-dimensional field with `a = a11`, `b = b1`.
    pub fn scalar(a: f64, b: f64, lambda: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, a), DVector::from_element(1, b), lambda)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }
}

impl CoefficientField for ConstantField {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn diffusion(&self, _x: &[f64]) -> DMatrix<f64> {
        self.a.clone()
    }

    fn drift(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.b.as_slice());
    }

    fn sigma_into(&self, _x: &[f64], out: &mut DMatrix<f64>) {
        out.copy_from(&self.sigma);
    }

    fn is_constant(&self) -> bool {
        true
    }

    /// Diagonal `a` with nonnegative drift is a product of constant-drift
    /// square-root processes.
    fn as_cir(&self) -> Option<Vec<CirParams>> {
        let n = self.dim();
        let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || self.a[(i, j)] == 0.0));
        (diagonal && self.b.iter().all(|b| *b >= 0.0)).then(|| {
            (0..n)
                .map(|i| CirParams {
                    kappa: 0.0,
                    beta: self.b[i],
                    sigma2: self.a[(i, i)],
                })
                .collect()
        })
    }
}

/// Decoupled CIR: `bⁱ = βᵢ − κᵢxⁱ`, `a = diag(σᵢ²)`.
#[derive(Clone, Debug)]
pub struct CirField {
    params: Vec<CirParams>,
    sigma: Vec<f64>,
    lambda: f64,
}

impl CirField {
    pub fn new(params: Vec<CirParams>, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        if params.is_empty() {
            return Err(invalid!("CIR field needs at least one axis"));
        }
        for p in &params {
            if !(p.kappa >= 0.0 && p.beta >= 0.0 && p.sigma2 > 0.0) || !(p.kappa + p.beta + p.sigma2).is_finite() {
                return Err(invalid!("invalid CIR parameters {p:?}"));
            }
        }
        let sigma = params.iter().map(|p| p.sigma2.sqrt()).collect();
        Ok(Self { params, sigma, lambda })
    }

    /// One axis with drift `κ(m − x)`.
    pub fn scalar(kappa: f64, m: f64, sigma2: f64, lambda: f64) -> Result<Self> {
        Self::new(vec![CirParams::mean_reverting(kappa, m, sigma2)], lambda)
    }

    pub fn params(&self) -> &[CirParams] {
        &self.params
    }
}

impl CoefficientField for CirField {
    fn dim(&self) -> usize {
        self.params.len()
    }

    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn diffusion(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(self.dim(), self.params.iter().map(|p| p.sigma2)))
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for ((o, p), xi) in out.iter_mut().zip(&self.params).zip(x) {
            *o = p.beta - p.kappa * xi;
        }
    }

    fn sigma_into(&self, _x: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
        for (i, s) in self.sigma.iter().enumerate() {
            out[(i, i)] = *s;
        }
    }

    fn as_cir(&self) -> Option<Vec<CirParams>> {
        Some(self.params.clone())
    }
}

/// CIR drift with a state-dependent off-diagonal perturbation of a
/// diagonal diffusion: `aⁱʲ = ε cos(xⁱ + xʲ)/(n−1)` for `i ≠ j`.
/// Positive definite whenever every diagonal entry exceeds `ε`.
#[derive(Clone, Debug)]
pub struct AlmostDiagonalField {
    diag: Vec<f64>,
    eps: f64,
    kappa: Vec<f64>,
    m: Vec<f64>,
    lambda: f64,
}

impl AlmostDiagonalField {
    pub fn new(diag: Vec<f64>, eps: f64, kappa: Vec<f64>, m: Vec<f64>, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        let n = diag.len();
        if n == 0 || kappa.len() != n || m.len() != n {
            return Err(invalid!("diag, kappa and m must have the same nonzero length"));
        }
        if !(eps >= 0.0) || diag.iter().any(|d| !(*d > eps)) {
            return Err(invalid!("every diagonal entry must exceed eps = {eps}"));
        }
        if kappa.iter().chain(&m).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid!("kappa and m must be finite and nonnegative"));
        }
        Ok(Self { diag, eps, kappa, m, lambda })
    }
}

impl CoefficientField for AlmostDiagonalField {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn diffusion(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let off = if n > 1 { self.eps / (n - 1) as f64 } else { 0.0 };
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                self.diag[i]
            } else {
                off * (x[i] + x[j]).cos()
            }
        })
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.dim() {
            out[i] = self.kappa[i] * (self.m[i] - x[i]);
        }
    }
}

type MatrixFn = Box<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
type VectorFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Field given by user closures.
pub struct FnField {
    dim: usize,
    lambda: f64,
    a: MatrixFn,
    b: VectorFn,
}

impl FnField {
    pub fn new(
        dim: usize,
        lambda: f64,
        a: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        b: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        if dim == 0 {
            return Err(invalid!("dimension must be positive"));
        }
        Ok(Self {
            dim,
            lambda,
            a: Box::new(a),
            b: Box::new(b),
        })
    }
}

impl CoefficientField for FnField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn diffusion(&self, x: &[f64]) -> DMatrix<f64> {
        (self.a)(x)
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.b)(x, out)
    }
}

/// JSON description of a preset field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Constant {
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        lambda: f64,
    },
    Cir {
        kappa: Vec<f64>,
        m: Vec<f64>,
        sigma2: Vec<f64>,
        lambda: f64,
    },
    AlmostDiagonal {
        diag: Vec<f64>,
        eps: f64,
        kappa: Vec<f64>,
        m: Vec<f64>,
        lambda: f64,
    },
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Constant { b, .. } => b.len(),
            ModelSpec::Cir { kappa, .. } => kappa.len(),
            ModelSpec::AlmostDiagonal { diag, .. } => diag.len(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn CoefficientField>> {
        Ok(match self {
            ModelSpec::Constant { a, b, lambda } => {
                let n = b.len();
                if a.len() != n || a.iter().any(|row| row.len() != n) {
                    return Err(invalid!("constant model: a must be {n}×{n}"));
                }
                let a = DMatrix::from_fn(n, n, |i, j| a[i][j]);
                Box::new(ConstantField::new(a, DVector::from_vec(b.clone()), *lambda)?)
            }
            ModelSpec::Cir {
                kappa,
                m,
                sigma2,
                lambda,
            } => {
                if m.len() != kappa.len() || sigma2.len() != kappa.len() {
                    return Err(invalid!("cir model: kappa, m and sigma2 lengths differ"));
                }
                if m.iter().any(|v| *v < 0.0) {
                    return Err(invalid!("cir model: m must be nonnegative"));
                }
                let params = (0..kappa.len())
                    .map(|i| CirParams::mean_reverting(kappa[i], m[i], sigma2[i]))
                    .collect();
                Box::new(CirField::new(params, *lambda)?)
            }
            ModelSpec::AlmostDiagonal {
                diag,
                eps,
                kappa,
                m,
                lambda,
            } => Box::new(AlmostDiagonalField::new(
                diag.clone(),
                *eps,
                kappa.clone(),
                m.clone(),
                *lambda,
            )?),
        })
    }
}

type ScalarFn = Box<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
type GradFn = Box<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
type HessFn = Box<dyn Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync>;

/// A `C^{1,2}` test function with analytic derivatives.
pub struct SmoothProbe {
    pub u: ScalarFn,
    pub du_dt: ScalarFn,
    pub grad: GradFn,
    pub hessian: HessFn,
}

impl SmoothProbe {
    pub fn new(
        u: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        du_dt: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        hessian: impl Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            u: Box::new(u),
            du_dt: Box::new(du_dt),
            grad: Box::new(grad),
            hessian: Box::new(hessian),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(
            move |_, _| c,
            |_, _| 0.0,
            |_, _, g| g.fill(0.0),
            |_, x| DMatrix::zeros(x.len(), x.len()),
        )
    }

    /// `u = Σ cᵢ xⁱ`.
    pub fn linear(c: Vec<f64>) -> Self {
        let c2 = c.clone();
        Self::new(
            move |_, x| c.iter().zip(x).map(|(a, b)| a * b).sum(),
            |_, _| 0.0,
            move |_, _, g| g.copy_from_slice(&c2),
            |_, x| DMatrix::zeros(x.len(), x.len()),
        )
    }

    /// `u = Σ (xⁱ)²`.
    pub fn sum_of_squares() -> Self {
        Self::new(
            |_, x| x.iter().map(|v| v * v).sum(),
            |_, _| 0.0,
            |_, x, g| g.iter_mut().zip(x).for_each(|(gi, xi)| *gi = 2.0 * xi),
            |_, x| DMatrix::from_diagonal_element(x.len(), x.len(), 2.0),
        )
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        (self.u)(t, x)
    }

    /// Largest relative mismatch between the supplied derivatives and
    /// central differences with step `h` at `(t, x)`.
    pub fn derivative_mismatch(&self, t: f64, x: &[f64], h: f64) -> f64 {
        let n = x.len();
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        let mut worst = rel(
            (self.du_dt)(t, x),
            ((self.u)(t + h, x) - (self.u)(t - h, x)) / (2.0 * h),
        );
        let mut g = vec![0.0; n];
        (self.grad)(t, x, &mut g);
        let hess = (self.hessian)(t, x);
        let mut xp = x.to_vec();
        for i in 0..n {
            let fd = |xp: &mut Vec<f64>, d: f64| {
                xp[i] = x[i] + d;
                let v = (self.u)(t, xp);
                xp[i] = x[i];
                v
            };
            let up = fd(&mut xp, h);
            let um = fd(&mut xp, -h);
            worst = worst.max(rel(g[i], (up - um) / (2.0 * h)));
            let u0 = (self.u)(t, x);
            worst = worst.max(rel(hess[(i, i)], (up - 2.0 * u0 + um) / (h * h)));
            for j in 0..i {
                let mut v = |di: f64, dj: f64| {
                    xp[i] = x[i] + di;
                    xp[j] = x[j] + dj;
                    let r = (self.u)(t, &xp);
                    xp[i] = x[i];
                    xp[j] = x[j];
                    r
                };
                let mixed = (v(h, h) - v(h, -h) - v(-h, h) + v(-h, -h)) / (4.0 * h * h);
                worst = worst.max(rel(hess[(i, j)], mixed));
            }
        }
        worst
    }
}

/// `𝓛u(t, x)` from the probe's analytic derivatives.
pub fn generator_apply(field: &dyn CoefficientField, probe: &SmoothProbe, t: f64, x: &[f64]) -> f64 {
    let n = field.dim();
    let a = field.diffusion(x);
    let mut b = vec![0.0; n];
    field.drift(x, &mut b);
    let mut g = vec![0.0; n];
    (probe.grad)(t, x, &mut g);
    let h = (probe.hessian)(t, x);
    let mut second = 0.0;
    for i in 0..n {
        for j in 0..n {
            second += a[(i, j)] * (x[i] * x[j]).sqrt() * h[(i, j)];
        }
    }
    let first: f64 = b.iter().zip(&g).map(|(bi, gi)| bi * gi).sum();
    (probe.du_dt)(t, x) + 0.5 * second + first
}

fn eig_range(a: &DMatrix<f64>) -> (f64, f64) {
    let e = SymmetricEigen::new(a.clone()).eigenvalues;
    (e.min(), e.max())
}

/// Worst margins of the quantitative ellipticity/pull-back condition on a
/// cube. A margin is negative exactly where its clause fails.
#[derive(Clone, Debug, Serialize)]
pub struct CPrimeReport {
    pub pass: bool,
    /// `min(λ_min(a) − 1/λ, λ − λ_max(a))`.
    pub ellipticity_margin: f64,
    /// `min(λ − |b|)`.
    pub drift_margin: f64,
    /// `min(bⁱ − 1/λ)` over the boundary bands, `None` if no band.
    pub boundary_margin: Option<f64>,
    /// `(axis, √xⁱ, worst bⁱ − 1/λ)` along each boundary band.
    pub boundary_profile: Vec<(usize, f64, f64)>,
    pub failures: Vec<String>,
    pub points: usize,
}

fn axis_grid(lo: f64, hi: f64, density: usize) -> Vec<f64> {
    if density <= 1 {
        return vec![lo];
    }
    (0..density)
        .map(|j| lo + (hi - lo) * j as f64 / (density - 1) as f64)
        .collect()
}

fn for_each_point(axes: &[Vec<f64>], mut f: impl FnMut(&[f64], &[usize])) {
    let n = axes.len();
    let mut pos = vec![0usize; n];
    let mut s = vec![0.0; n];
    'outer: loop {
        for i in 0..n {
            s[i] = axes[i][pos[i]];
        }
        f(&s, &pos);
        for i in (0..n).rev() {
            pos[i] += 1;
            if pos[i] < axes[i].len() {
                continue 'outer;
            }
            pos[i] = 0;
        }
        break;
    }
}

/// Checks on a `density`-per-axis grid over the closure of `k`:
/// `λ⁻¹I ≤ a ≤ λI`, `|b| ≤ λ`, and `bⁱ ≥ λ⁻¹` where `√xⁱ` lies in the band
/// `[0, ρ] ∩ [(√x₀ⁱ − ρ)⁺, √x₀ⁱ + ρ]`.
pub fn check_condition_cprime(field: &dyn CoefficientField, k: &AnisoCube, density: usize) -> Result<CPrimeReport> {
    let n = field.dim();
    if k.dim() != n {
        return Err(invalid!("field has dimension {n}, cube has {}", k.dim()));
    }
    if density == 0 {
        return Err(invalid!("grid density must be positive"));
    }
    let lambda = field.lambda();
    let rho = k.rho();
    let axes: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let (lo, hi) = k.sqrt_bounds(i);
            axis_grid(lo, hi, density)
        })
        .collect();
    let bands: Vec<Option<(f64, f64)>> = (0..n)
        .map(|i| {
            let c = k.center().coords()[i];
            let lo = (c - rho).max(0.0);
            let hi = rho.min(c + rho);
            (lo <= hi).then_some((lo, hi))
        })
        .collect();
    let mut ell = f64::INFINITY;
    let mut drift = f64::INFINITY;
    let mut boundary: Option<f64> = None;
    let mut profile: Vec<Vec<f64>> = axes.iter().map(|a| vec![f64::INFINITY; a.len()]).collect();
    let mut points = 0;
    let mut b = vec![0.0; n];
    let mut x = vec![0.0; n];
    for_each_point(&axes, |s, pos| {
        points += 1;
        for i in 0..n {
            x[i] = s[i] * s[i];
        }
        let (emin, emax) = eig_range(&field.diffusion(&x));
        ell = ell.min(emin - 1.0 / lambda).min(lambda - emax);
        field.drift(&x, &mut b);
        drift = drift.min(lambda - b.iter().map(|v| v * v).sum::<f64>().sqrt());
        for i in 0..n {
            if let Some((lo, hi)) = bands[i] {
                if s[i] >= lo && s[i] <= hi {
                    let m = b[i] - 1.0 / lambda;
                    boundary = Some(boundary.map_or(m, |v: f64| v.min(m)));
                    profile[i][pos[i]] = profile[i][pos[i]].min(m);
                }
            }
        }
    });
    let boundary_profile = profile
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            let axis = &axes[i];
            p.iter()
                .enumerate()
                .filter(|(_, m)| m.is_finite())
                .map(move |(j, m)| (i, axis[j], *m))
        })
        .collect();
    let mut failures = Vec::new();
    if ell < 0.0 {
        failures.push(format!("ellipticity λ⁻¹I ≤ a ≤ λI violated (margin {ell:.3e})"));
    }
    if drift < 0.0 {
        failures.push(format!("drift bound |b| ≤ λ violated (margin {drift:.3e})"));
    }
    if let Some(m) = boundary {
        if m < 0.0 {
            failures.push(format!("boundary pull-back bⁱ ≥ λ⁻¹ violated (margin {m:.3e})"));
        }
    }
    Ok(CPrimeReport {
        pass: failures.is_empty(),
        ellipticity_margin: ell,
        drift_margin: drift,
        boundary_margin: boundary,
        boundary_profile,
        failures,
        points,
    })
}

/// Worst margins of the invariant-measure bounds
/// `λI ≥ a ≥ λ⁻¹I` and `λ ≥ bⁱ ≥ −λxⁱ`.
#[derive(Clone, Debug, Serialize)]
pub struct InvReport {
    pub pass: bool,
    pub upper_ellipticity_margin: f64,
    pub lower_ellipticity_margin: f64,
    pub drift_upper_margin: f64,
    pub drift_lower_margin: f64,
    pub failures: Vec<String>,
}

/// Product grid `{0, …, x_max}^n` in square-root spacing.
pub fn inv_sample_grid(dim: usize, x_max: f64, density: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = axis_grid(0.0, x_max.sqrt(), density).iter().map(|s| s * s).collect();
    let axes = vec![axis; dim];
    let mut out = Vec::new();
    for_each_point(&axes, |x, _| out.push(x.to_vec()));
    out
}

pub fn check_inv_conditions(field: &dyn CoefficientField, points: &[Vec<f64>]) -> Result<InvReport> {
    let n = field.dim();
    if points.is_empty() {
        return Err(invalid!("no sample points"));
    }
    let lambda = field.lambda();
    let mut r = InvReport {
        pass: true,
        upper_ellipticity_margin: f64::INFINITY,
        lower_ellipticity_margin: f64::INFINITY,
        drift_upper_margin: f64::INFINITY,
        drift_lower_margin: f64::INFINITY,
        failures: Vec::new(),
    };
    let mut b = vec![0.0; n];
    for x in points {
        if x.len() != n || x.iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid!("sample point {x:?} is not in the orthant of dimension {n}"));
        }
        let (emin, emax) = eig_range(&field.diffusion(x));
        r.upper_ellipticity_margin = r.upper_ellipticity_margin.min(lambda - emax);
        r.lower_ellipticity_margin = r.lower_ellipticity_margin.min(emin - 1.0 / lambda);
        field.drift(x, &mut b);
        for i in 0..n {
            r.drift_upper_margin = r.drift_upper_margin.min(lambda - b[i]);
            r.drift_lower_margin = r.drift_lower_margin.min(b[i] + lambda * x[i]);
        }
    }
    let clauses = [
        (r.upper_ellipticity_margin, "upper ellipticity a ≤ λI"),
        (r.lower_ellipticity_margin, "lower ellipticity a ≥ λ⁻¹I"),
        (r.drift_upper_margin, "drift upper bound bⁱ ≤ λ"),
        (r.drift_lower_margin, "drift lower bound bⁱ ≥ −λxⁱ"),
    ];
    for (m, name) in clauses {
        if m < 0.0 {
            r.failures.push(format!("{name} violated (margin {m:.3e})"));
        }
    }
    r.pass = r.failures.is_empty();
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SqrtPoint;
    use proptest::prelude::*;

    fn k(centers: &[f64], rho: f64) -> AnisoCube {
        AnisoCube::new(SqrtPoint::new(centers.to_vec()).unwrap(), rho).unwrap()
    }

    #[test]
    fn generator_examples() {
        let f = ConstantField::scalar(1.0, 0.5, 2.0).unwrap();
        let lin = SmoothProbe::linear(vec![1.0]);
        for x in [0.0, 0.3, 2.0] {
            assert_eq!(generator_apply(&f, &lin, 0.0, &[x]), 0.5);
        }
        assert_eq!(generator_apply(&f, &SmoothProbe::sum_of_squares(), 0.0, &[1.0]), 2.0);
        assert_eq!(generator_apply(&f, &SmoothProbe::constant(3.0), 0.0, &[1.0]), 0.0);
    }

    #[test]
    fn generator_includes_time_derivative() {
        let f = ConstantField::scalar(1.0, 0.0, 2.0).unwrap();
        let p = SmoothProbe::new(|t, _| 3.0 * t, |_, _| 3.0, |_, _, g| g.fill(0.0), |_, _| DMatrix::zeros(1, 1));
        assert_eq!(generator_apply(&f, &p, 0.7, &[0.4]), 3.0);
    }

    #[test]
    fn sqrt_factor_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert_eq!(sqrt_factor(&id).unwrap(), id);
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        assert_eq!(sqrt_factor(&a).unwrap(), DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]));
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(sqrt_factor(&bad), Err(Error::Factorization(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(sqrt_factor(&asym).is_err());
    }

    #[test]
    fn cprime_constant_field_passes() {
        let f = ConstantField::new(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 1.0]), 2.0).unwrap();
        for cube in [k(&[0.0, 0.0], 1.0), k(&[0.0, 2.0], 1.0), k(&[3.0, 3.0], 0.5)] {
            let r = check_condition_cprime(&f, &cube, 8).unwrap();
            assert!(r.pass, "{:?}", r.failures);
        }
    }

    #[test]
    fn cprime_zero_drift_fails_on_band() {
        let f = ConstantField::scalar(1.0, 0.0, 2.0).unwrap();
        let r = check_condition_cprime(&f, &k(&[0.0], 1.0), 16).unwrap();
        assert!(!r.pass);
        assert!(r.boundary_profile.iter().all(|(_, _, m)| *m == -0.5));
        // no band when the cube is far from the face
        let far = check_condition_cprime(&f, &k(&[5.0], 1.0), 16).unwrap();
        assert!(far.boundary_margin.is_none());
        assert!(far.pass);
    }

    #[test]
    fn cprime_cir_margin_profile() {
        // b = 0.5 − x; the band is all of [0,1] so the clause needs x ≤ 0
        let f = CirField::scalar(1.0, 0.5, 1.0, 2.0).unwrap();
        let r = check_condition_cprime(&f, &k(&[0.0], 1.0), 11).unwrap();
        assert!(!r.pass);
        for &(_, s, m) in &r.boundary_profile {
            let expect = 0.5 - s * s - 0.5;
            assert!((m - expect).abs() < 1e-12);
        }
        assert!((r.boundary_margin.unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn inv_condition_examples() {
        let grid = inv_sample_grid(1, 50.0, 64);
        let cir = CirField::scalar(1.0, 1.0, 1.0, 2.0).unwrap();
        assert!(check_inv_conditions(&cir, &grid).unwrap().pass);
        let lam = 2.0;
        let strong = FnField::new(1, lam, |_| DMatrix::identity(1, 1), move |x, b| b[0] = -2.0 * lam * x[0]).unwrap();
        let r = check_inv_conditions(&strong, &grid).unwrap();
        assert!(!r.pass && r.drift_lower_margin < 0.0);
        let big = ConstantField::scalar(lam + 1.0, 0.0, lam).unwrap();
        let r = check_inv_conditions(&big, &grid).unwrap();
        assert!(!r.pass && r.upper_ellipticity_margin < 0.0);
    }

    #[test]
    fn model_spec_round_trip() {
        let text = r#"{"kind":"cir","kappa":[1.0],"m":[0.5],"sigma2":[1.0],"lambda":2.0}"#;
        let spec: ModelSpec = serde_json::from_str(text).unwrap();
        let f = spec.build().unwrap();
        assert_eq!(f.as_cir().unwrap()[0].beta, 0.5);
        let back: ModelSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        let bad = r#"{"kind":"constant","a":[[1.0,0.0]],"b":[1.0],"lambda":2.0}"#;
        assert!(serde_json::from_str::<ModelSpec>(bad).unwrap().build().is_err());
        assert!(serde_json::from_str::<ModelSpec>(r#"{"kind":"heston"}"#).is_err());
    }

    #[test]
    fn presets_pass_their_own_checks() {
        let c = ConstantField::new(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 1.0]), 2.0).unwrap();
        assert!(check_condition_cprime(&c, &k(&[0.0, 0.0], 1.0), 32).unwrap().pass);
        let cir = CirField::scalar(1.0, 1.0, 1.0, 2.0).unwrap();
        assert!(check_inv_conditions(&cir, &inv_sample_grid(1, 100.0, 32)).unwrap().pass);
        let ad = AlmostDiagonalField::new(vec![1.0, 1.0], 0.3, vec![1.0, 1.0], vec![1.0, 1.0], 2.0).unwrap();
        assert!(check_inv_conditions(&ad, &inv_sample_grid(2, 20.0, 16)).unwrap().pass);
    }

    fn cubic_probe() -> SmoothProbe {
        // u = t x0² x1 + x0 x1² on two axes
        SmoothProbe::new(
            |t, x| t * x[0] * x[0] * x[1] + x[0] * x[1] * x[1],
            |_, x| x[0] * x[0] * x[1],
            |t, x, g| {
                g[0] = 2.0 * t * x[0] * x[1] + x[1] * x[1];
                g[1] = t * x[0] * x[0] + 2.0 * x[0] * x[1];
            },
            |t, x| {
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        2.0 * t * x[1],
                        2.0 * t * x[0] + 2.0 * x[1],
                        2.0 * t * x[0] + 2.0 * x[1],
                        2.0 * x[0],
                    ],
                )
            },
        )
    }

    #[test]
    fn probe_derivatives_match_differences() {
        let p = cubic_probe();
        for x in [[0.3, 0.7], [1.2, 0.1], [2.0, 2.0]] {
            assert!(p.derivative_mismatch(0.4, &x, 1e-4) < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn sigma_reconstructs_a(x0 in 0.0..5.0f64, x1 in 0.0..5.0f64, eps in 0.0..0.9f64) {
            let f = AlmostDiagonalField::new(vec![1.0, 1.5], eps, vec![1.0, 1.0], vec![1.0, 1.0], 2.0).unwrap();
            let x = [x0, x1];
            let a = f.diffusion(&x);
            let s = f.sigma(&x);
            prop_assert!((&s * s.transpose() - &a).amax() <= 1e-10 * a.amax());
            prop_assert_eq!(a.clone(), a.transpose());
        }

        #[test]
        fn random_spd_factorizes(v in prop::collection::vec(-1.0..1.0f64, 9)) {
            let m = DMatrix::from_row_slice(3, 3, &v);
            let a = &m * m.transpose() + DMatrix::identity(3, 3) * 0.1;
            let l = sqrt_factor(&a).unwrap();
            prop_assert!((&l * l.transpose() - &a).amax() < 1e-10 * a.amax());
        }

        #[test]
        fn generator_is_linear(x0 in 0.01..3.0f64, x1 in 0.01..3.0f64, t in 0.0..1.0f64,
                               al in -2.0..2.0f64, be in -2.0..2.0f64) {
            let f = AlmostDiagonalField::new(vec![1.0, 1.5], 0.4, vec![1.0, 0.5], vec![1.0, 2.0], 2.0).unwrap();
            let (p, q) = (cubic_probe(), SmoothProbe::sum_of_squares());
            let x = [x0, x1];
            let combo = SmoothProbe::new(
                move |t, x| al * cubic_probe().value(t, x) + be * (x[0] * x[0] + x[1] * x[1]),
                move |t, x| al * (cubic_probe().du_dt)(t, x),
                move |t, x, g| {
                    (cubic_probe().grad)(t, x, g);
                    g[0] = al * g[0] + be * 2.0 * x[0];
                    g[1] = al * g[1] + be * 2.0 * x[1];
                },
                move |t, x| (cubic_probe().hessian)(t, x) * al + DMatrix::identity(2, 2) * (2.0 * be),
            );
            let lhs = generator_apply(&f, &combo, t, &x);
            let rhs = al * generator_apply(&f, &p, t, &x) + be * generator_apply(&f, &q, t, &x);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
        }

        #[test]
        fn generator_matches_finite_differences(x0 in 0.2..3.0f64, x1 in 0.2..3.0f64, t in 0.1..1.0f64) {
            let f = AlmostDiagonalField::new(vec![1.0, 1.5], 0.4, vec![1.0, 0.5], vec![1.0, 2.0], 2.0).unwrap();
            let p = cubic_probe();
            let x = [x0, x1];
            let h = 1e-4;
            let u = |t: f64, x: &[f64]| p.value(t, x);
            let a = f.diffusion(&x);
            let mut b = [0.0; 2];
            f.drift(&x, &mut b);
            let shift = |i: usize, d: f64, j: usize, e: f64| {
                let mut y = x;
                y[i] += d;
                y[j] += e;
                u(t, &y)
            };
            let mut fd = (u(t + h, &x) - u(t - h, &x)) / (2.0 * h);
            for i in 0..2 {
                fd += b[i] * (shift(i, h, i, 0.0) - shift(i, -h, i, 0.0)) / (2.0 * h);
                for j in 0..2 {
                    let dij = if i == j {
                        (shift(i, h, i, 0.0) - 2.0 * u(t, &x) + shift(i, -h, i, 0.0)) / (h * h)
                    } else {
                        (shift(i, h, j, h) - shift(i, h, j, -h) - shift(i, -h, j, h) + shift(i, -h, j, -h))
                            / (4.0 * h * h)
                    };
                    fd += 0.5 * a[(i, j)] * (x[i] * x[j]).sqrt() * dij;
                }
            }
            let exact = generator_apply(&f, &p, t, &x);
            prop_assert!((fd - exact).abs() <= 1e-5 * exact.abs().max(1.0));
        }
    }
}

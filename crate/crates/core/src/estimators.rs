//! Monte Carlo estimators built on the simulator.
//!
//! Every estimator reduces per-path results in ascending path order, so a
//! report depends on the seed and the inputs only.

use serde::Serialize;

use crate::coeffs::{check_inv_conditions, generator_apply, inv_sample_grid, CoefficientField, SmoothProbe};
use crate::error::{invalid, precondition, Error, Result};
use crate::geometry::{AnisoCube, HyperCube, SqrtPoint};
use crate::grid::GridSet;
use crate::rng::derive_seed;
use crate::sde::{check_start, par_map, run_stopped_path, states_at_times, time_series, SimConfig, StopKind};
use crate::stats::{batch_means_se, linear_fit, mean_se, mean_var, quantiles, wasserstein1, wilson, Z95};

/// Real-valued callback `(t, x) ↦ value` for boundary data and sources.
pub type PointFn<'a> = &'a (dyn Fn(f64, &[f64]) -> f64 + Sync);

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateReport {
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub successes: u64,
    pub n_paths: u64,
    pub seed: u64,
}

impl EstimateReport {
    fn from_counts(successes: u64, n: u64, seed: u64) -> Self {
        let (estimate, ci_low, ci_high) = wilson(successes, n);
        Self {
            estimate,
            ci_low,
            ci_high,
            successes,
            n_paths: n,
            seed,
        }
    }
}

/// `cfg` with the horizon stretched to reach the end of `q` from `t`.
fn until_end_of(cfg: &SimConfig, q: &HyperCube, t: f64) -> SimConfig {
    let mut c = cfg.clone();
    c.horizon = (q.t_end() - t).max(cfg.h);
    c
}

fn check_gamma(q: &HyperCube, gamma: &GridSet) -> Result<()> {
    if gamma.dim() != q.dim() {
        return Err(invalid!("Γ has dimension {}, hypercube has {}", gamma.dim(), q.dim()));
    }
    if !gamma.fits_inside(q) {
        return Err(invalid!("Γ is not contained in the hypercube"));
    }
    Ok(())
}

/// `P[σ_Γ ≤ τ_Q]` from `start`, with a Wilson interval.
pub fn est_hit_prob(
    cfg: &SimConfig,
    field: &dyn CoefficientField,
    q: &HyperCube,
    gamma: &GridSet,
    start: (f64, &[f64]),
) -> Result<EstimateReport> {
    cfg.validate(field)?;
    check_start(field, q, start)?;
    check_gamma(q, gamma)?;
    let run = until_end_of(cfg, q, start.0);
    let hits = par_map(cfg.workers, cfg.path_count, |p| {
        run_stopped_path(&run, field, q, Some(gamma), start.0, start.1, p as u64, |_, _, _| {}).stop_kind
            == StopKind::Hit
    })?;
    let k = hits.iter().filter(|h| **h).count() as u64;
    Ok(EstimateReport::from_counts(k, cfg.path_count as u64, cfg.seed))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StartEstimate {
    pub start: Vec<f64>,
    #[serde(flatten)]
    pub report: EstimateReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniformHitReport {
    pub min_ci_low: f64,
    pub min_estimate: f64,
    /// Index of the start attaining `min_ci_low`.
    pub argmin: usize,
    pub per_start: Vec<StartEstimate>,
}

/// The starting cube `K(x₀, ρ/6)` of a hypercube.
pub fn start_cube(q: &HyperCube) -> Result<AnisoCube> {
    AnisoCube::new(q.cube().center().clone(), q.rho() / 6.0)
}

/// The point of `K(x₀, ρ/6)` on every boundary face that `x₀` touches,
/// with the remaining coordinates at the center.
pub fn boundary_corner(q: &HyperCube) -> Vec<f64> {
    q.cube().center().to_x()
}

/// Product grid over `K(x₀, ρ/6)`: along each axis the square-root
/// coordinate runs through `lo + f·(hi − lo)` for `f` in `fractions`.
pub fn start_grid(q: &HyperCube, fractions: &[f64]) -> Result<Vec<Vec<f64>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
        return Err(invalid!("grid fractions must be nonempty and lie in [0, 1)"));
    }
    let k = start_cube(q)?;
    let axes: Vec<Vec<f64>> = (0..k.dim())
        .map(|i| {
            let (lo, hi) = k.sqrt_bounds(i);
            fractions.iter().map(|f| lo + f * (hi - lo)).collect()
        })
        .collect();
    let mut out = vec![Vec::new()];
    for axis in &axes {
        out = out
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                axis.iter().map(move |s| {
                    let mut q = p.clone();
                    q.push(s * s);
                    q
                })
            })
            .collect();
    }
    Ok(out)
}

/// Checks the start grid for [`est_uniform_hit`]; one message per problem.
pub fn uniform_start_diagnostics(q: &HyperCube, starts: &[Vec<f64>]) -> Vec<String> {
    let mut out = Vec::new();
    let Ok(k) = start_cube(q) else {
        return vec!["hypercube has no valid starting cube".into()];
    };
    if starts.is_empty() {
        out.push("start grid is empty".into());
    }
    for (j, x) in starts.iter().enumerate() {
        if x.len() != q.dim() || !k.contains_x(x) {
            out.push(format!("start {j} at {x:?} lies outside K(x₀, ρ/6)"));
        }
    }
    let center = q.cube().center().coords();
    if center.contains(&0.0) {
        let corner = boundary_corner(q);
        let found = starts
            .iter()
            .any(|x| x.len() == corner.len() && x.iter().zip(&corner).all(|(a, b)| (a - b).abs() <= 1e-12 * b.max(1.0)));
        if !found {
            out.push(format!("start grid misses the boundary corner {corner:?}"));
        }
    }
    out
}

/// Runs [`est_hit_prob`] from every start at time `t₀` and reports the
/// smallest Wilson lower bound. Start `j` uses the stream
/// `derive_seed(seed, j)`.
pub fn est_uniform_hit(
    cfg: &SimConfig,
    field: &dyn CoefficientField,
    q: &HyperCube,
    gamma: &GridSet,
    starts: &[Vec<f64>],
) -> Result<UniformHitReport> {
    let problems = uniform_start_diagnostics(q, starts);
    if !problems.is_empty() {
        return Err(invalid!("{}", problems.join("; ")));
    }
    let mut per_start = Vec::with_capacity(starts.len());
    for (j, x) in starts.iter().enumerate() {
        let c = cfg.clone().with_seed(derive_seed(cfg.seed, j as u64));
        let report = est_hit_prob(&c, field, q, gamma, (q.t0(), x))?;
        per_start.push(StartEstimate {
            start: x.clone(),
            report,
        });
    }
    let argmin = (0..per_start.len())
        .min_by(|&a, &b| per_start[a].report.ci_low.total_cmp(&per_start[b].report.ci_low))
        .unwrap_or(0);
    Ok(UniformHitReport {
        min_ci_low: per_start[argmin].report.ci_low,
        min_estimate: per_start.iter().map(|s| s.report.estimate).fold(f64::INFINITY, f64::min),
        argmin,
        per_start,
    })
}

/// Parameters of the small-cube transition event
/// `{X_t ∈ K(x, 3cl/4), t ≤ τ}` for the unit hypercube `Q₁(0, x₀, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmallCubeSetup {
    pub x0: Vec<f64>,
    pub x: Vec<f64>,
    pub l: f64,
    pub c: f64,
    pub beta: f64,
    pub eps: f64,
    pub alpha: f64,
    pub r: f64,
    pub t: f64,
    pub y: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SmallCubeVariant {
    /// Target cube at least `cl` away from every face.
    Interior,
    /// Target cube allowed to touch the boundary.
    Boundary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmallCubeReport {
    pub variant: SmallCubeVariant,
    #[serde(flatten)]
    pub report: EstimateReport,
}

impl SmallCubeSetup {
    /// The unit hypercube and the target cube, after checking every
    /// geometric and parameter constraint.
    pub fn check(&self) -> Result<(HyperCube, AnisoCube, SmallCubeVariant)> {
        let n = self.x0.len();
        if self.x.len() != n || self.y.len() != n || n == 0 {
            return Err(invalid!("x₀, x and y must share a positive dimension"));
        }
        let fail = |m: String| Err(precondition!("{m}"));
        if !(self.beta > 1.0) {
            return fail(format!("β must exceed 1, got {}", self.beta));
        }
        if !(self.c > 0.0 && self.c <= 1.0) {
            return fail(format!("c must lie in (0, 1], got {}", self.c));
        }
        if !(self.eps > 0.0 && self.alpha > self.eps) {
            return fail(format!("need α > ε > 0, got α={}, ε={}", self.alpha, self.eps));
        }
        if !(0.5..1.0).contains(&self.r) {
            return fail(format!("r must lie in [1/2, 1), got {}", self.r));
        }
        if !(self.l > 0.0 && self.l < 1.0) {
            return fail(format!("l must lie in (0, 1), got {}", self.l));
        }
        let q = HyperCube::from_parts(0.0, 1.0, SqrtPoint::from_x(&self.x0)?.coords().to_vec(), 1.0)?;
        if !q.cube().is_regular() {
            return fail("K(x₀, 1) is not a regular cube".into());
        }
        let xs = SqrtPoint::from_x(&self.x)?;
        let k = AnisoCube::new(xs.clone(), self.l)?;
        if !k.is_subset_of(q.cube()) {
            return fail("K(x, l) is not contained in K(x₀, 1)".into());
        }
        let l2 = self.l * self.l;
        let tol = 1e-12 * l2;
        if self.t < self.eps * l2 - tol || self.t > self.alpha * l2 + tol {
            return fail(format!(
                "t = {} is outside [εl², αl²] = [{}, {}]",
                self.t,
                self.eps * l2,
                self.alpha * l2
            ));
        }
        let near = AnisoCube::new(xs.clone(), self.beta * self.l)?;
        let inner = AnisoCube::new(q.cube().center().clone(), self.r)?;
        if !near.contains_x(&self.y) || !inner.contains_x(&self.y) {
            return fail(format!("y = {:?} is outside K(x, βl) ∩ K(x₀, r)", self.y));
        }
        let target = AnisoCube::new(xs.clone(), 0.75 * self.c * self.l)?;
        let min_s = xs.coords().iter().cloned().fold(f64::INFINITY, f64::min);
        let variant = if self.c * self.l <= min_s {
            SmallCubeVariant::Interior
        } else {
            SmallCubeVariant::Boundary
        };
        Ok((q, target, variant))
    }
}

/// `P^y[X_t ∈ K(x, 3cl/4), t ≤ τ_{Q₁(0,x₀,1)}]`.
pub fn est_small_cube(cfg: &SimConfig, field: &dyn CoefficientField, setup: &SmallCubeSetup) -> Result<SmallCubeReport> {
    let (q, target, variant) = setup.check()?;
    if field.dim() != q.dim() {
        return Err(invalid!("field has dimension {}, cube has {}", field.dim(), q.dim()));
    }
    let mut run = cfg.clone();
    run.horizon = setup.t;
    run.validate(field)?;
    let t_tol = 1e-9 * setup.t.max(1.0);
    let ok = par_map(cfg.workers, cfg.path_count, |p| {
        let s = run_stopped_path(&run, field, &q, None, 0.0, &setup.y, p as u64, |_, _, _| {});
        s.stop_kind == StopKind::Horizon && (s.stop_time - setup.t).abs() <= t_tol && target.contains_x(&s.stop_state)
    })?;
    let k = ok.iter().filter(|b| **b).count() as u64;
    Ok(SmallCubeReport {
        variant,
        report: EstimateReport::from_counts(k, cfg.path_count as u64, cfg.seed),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FkReport {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: u64,
    pub seed: u64,
    /// Mean of `τ − t`.
    pub mean_exit_time: f64,
}

/// `u(t, x) = E[g(τ, X_τ)] + E ∫ₜ^τ f(r, X_r) dr` with `τ` the exit time
/// from `q`; the integral uses left-point sums on the step grid.
pub fn feynman_kac_eval(
    cfg: &SimConfig,
    field: &dyn CoefficientField,
    q: &HyperCube,
    g: PointFn,
    f: PointFn,
    start: (f64, &[f64]),
) -> Result<FkReport> {
    cfg.validate(field)?;
    let per_path = fk_values(cfg, field, q, g, f, start)?;
    let values: Vec<f64> = per_path.iter().map(|v| v.0).collect();
    let times: Vec<f64> = per_path.iter().map(|v| v.1).collect();
    let (estimate, std_error) = mean_se(&values);
    Ok(FkReport {
        estimate,
        std_error,
        n_paths: cfg.path_count as u64,
        seed: cfg.seed,
        mean_exit_time: mean_se(&times).0,
    })
}

fn fk_values(
    cfg: &SimConfig,
    field: &dyn CoefficientField,
    q: &HyperCube,
    g: PointFn,
    f: PointFn,
    start: (f64, &[f64]),
) -> Result<Vec<(f64, f64)>> {
    check_start(field, q, start)?;
    let run = until_end_of(cfg, q, start.0);
    par_map(cfg.workers, cfg.path_count, |p| {
        let mut integral = 0.0;
        let s = run_stopped_path(&run, field, q, None, start.0, start.1, p as u64, |t, x, h| {
            integral += f(t, x) * h;
        });
        (g(s.stop_time, &s.stop_state) + integral, s.stop_time - start.0)
    })
}

/// Evaluation points of a hypercube: `per_axis` evenly spaced values of
/// `t` and of each `√xⁱ` over the closure, endpoints included.
pub fn eval_grid(q: &HyperCube, per_axis: usize) -> Vec<(f64, Vec<f64>)> {
    let per_axis = per_axis.max(2);
    let span = |lo: f64, hi: f64| -> Vec<f64> {
        (0..per_axis)
            .map(|j| lo + (hi - lo) * j as f64 / (per_axis - 1) as f64)
            .collect()
    };
    let times = span(q.t0(), q.t_end());
    let mut spaces = vec![Vec::new()];
    for i in 0..q.dim() {
        let (lo, hi) = q.cube().sqrt_bounds(i);
        let axis = span(lo, hi);
        spaces = spaces
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                axis.iter().map(move |s| {
                    let mut q = p.clone();
                    q.push(s * s);
                    q
                })
            })
            .collect();
    }
    times
        .iter()
        .flat_map(|&t| spaces.iter().map(move |x| (t, x.clone())))
        .collect()
}

/// `u` at a point of the closure of `q`. On the parabolic boundary
/// (end time or a face with `√xⁱ` at the cube's upper edge) the value is
/// `g` itself; elsewhere it is the Feynman–Kac estimate.
fn u_on_closure(
    cfg: &SimConfig,
    field: &dyn CoefficientField,
    q: &HyperCube,
    g: PointFn,
    f: PointFn,
    t: f64,
    x: &[f64],
) -> Result<(f64, f64)> {
    if !q.contains_x(t, x) {
        return Ok((g(t, x), 0.0));
    }
    let r = feynman_kac_eval(cfg, field, q, g, f, (t, x))?;
    Ok((r.estimate, r.std_error))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OscReport {
    pub scales: Vec<f64>,
    pub osc: Vec<f64>,
    /// Largest standard error among the values behind each `osc`.
    pub osc_se: Vec<f64>,
    /// `[osc(ρ₀/6) − ρ₀²‖f‖] / osc(ρ₀)`.
    pub nu_hat: f64,
    pub alpha_hat: f64,
    pub c_hat: f64,
    pub r2: f64,
    pub strictly_decreasing: bool,
    pub inconclusive: bool,
    pub note: Option<String>,
}

/// Oscillation of `u` over the nested hypercubes `Q_θ(t₀, x₀, ρ)` for
/// each `ρ` in `scales`, where `u` solves the boundary problem on `outer`
/// and `(t₀, x₀)` is the base point of `outer`. The largest scale must be
/// `outer`'s own size.
pub fn est_osc_decay(
    cfg: &SimConfig,
    field: &dyn CoefficientField,
    outer: &HyperCube,
    scales: &[f64],
    g: PointFn,
    f: PointFn,
    per_axis: usize,
) -> Result<OscReport> {
    cfg.validate(field)?;
    if scales.len() < 2 {
        return Err(invalid!("need at least two scales, got {}", scales.len()));
    }
    let rho0 = outer.rho();
    if scales.iter().any(|r| !(*r > 0.0 && *r <= rho0 * (1.0 + 1e-12))) {
        return Err(invalid!("scales must lie in (0, {rho0}]"));
    }
    let centers = outer.cube().center().coords().to_vec();
    let cube_at = |rho: f64| HyperCube::from_parts(outer.t0(), outer.theta(), centers.clone(), rho);

    let mut f_sup: f64 = 0.0;
    let mut osc_of = |rho: f64| -> Result<(f64, f64)> {
        let qr = cube_at(rho)?;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut se: f64 = 0.0;
        for (j, (t, x)) in eval_grid(&qr, per_axis).into_iter().enumerate() {
            let c = cfg.clone().with_seed(derive_seed(cfg.seed, j as u64));
            let (u, e) = u_on_closure(&c, field, outer, g, f, t, &x)?;
            f_sup = f_sup.max(f(t, &x).abs());
            lo = lo.min(u);
            hi = hi.max(u);
            se = se.max(e);
        }
        Ok((hi - lo, se))
    };

    let mut osc = Vec::with_capacity(scales.len());
    let mut osc_se = Vec::with_capacity(scales.len());
    for &rho in scales {
        let (o, e) = osc_of(rho)?;
        osc.push(o);
        osc_se.push(e);
    }
    let (osc_small, _) = osc_of(rho0 / 6.0)?;
    let (osc_big, se_big) = match scales.iter().position(|r| (r - rho0).abs() <= 1e-12 * rho0) {
        Some(j) => (osc[j], osc_se[j]),
        None => osc_of(rho0)?,
    };
    let nu_hat = (osc_small - rho0 * rho0 * f_sup) / osc_big;

    let floor = 4.0 * Z95 * se_big.max(1e-12);
    let mut note = None;
    let inconclusive = osc_big <= floor || osc.iter().zip(&osc_se).any(|(o, e)| *o <= 2.0 * Z95 * e.max(1e-15));
    if inconclusive {
        note = Some("oscillation is within the Monte Carlo noise floor".into());
    }
    let strictly_decreasing = {
        let mut order: Vec<usize> = (0..scales.len()).collect();
        order.sort_by(|&a, &b| scales[b].total_cmp(&scales[a]));
        order.windows(2).all(|w| osc[w[1]] < osc[w[0]])
    };
    let (alpha_hat, c_hat, r2) = if osc.iter().all(|o| *o > 0.0) {
        let lx: Vec<f64> = scales.iter().map(|r| r.ln()).collect();
        let ly: Vec<f64> = osc.iter().map(|o| o.ln()).collect();
        let fit = linear_fit(&lx, &ly)?;
        (fit.slope, fit.intercept.exp(), fit.r2)
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    Ok(OscReport {
        scales: scales.to_vec(),
        osc,
        osc_se,
        nu_hat,
        alpha_hat,
        c_hat,
        r2,
        strictly_decreasing,
        inconclusive,
        note,
    })
}

/// A value of `u` at `(t, x)`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct HolderSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HolderFit {
    pub alpha_hat: f64,
    pub c_hat: f64,
    pub r2: f64,
    pub pairs_used: usize,
    /// `log|Δu| − fit` per used pair.
    pub residuals: Vec<f64>,
    /// Set when the log–log relation is poor or flat.
    pub degraded: bool,
}

/// Parabolic distance `√|t − s| + maxᵢ |√xⁱ − √yⁱ|`.
pub fn parabolic_distance(t: f64, x: &[f64], s: f64, y: &[f64]) -> f64 {
    (t - s).abs().sqrt() + x.iter().zip(y).map(|(a, b)| (a.sqrt() - b.sqrt()).abs()).fold(0.0, f64::max)
}

/// Every unordered pair of samples.
pub fn all_pairs(samples: &[HolderSample]) -> Vec<(HolderSample, HolderSample)> {
    let mut out = Vec::with_capacity(samples.len() * samples.len().saturating_sub(1) / 2);
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            out.push((a.clone(), b.clone()));
        }
    }
    out
}

/// Least squares of `log|u(p) − u(q)|` on `log d(p, q)` over the pairs with
/// `|Δu| > noise_floor`. The fit counts as degraded when `R² < 0.9` or the
/// exponent is at most 0.1, i.e. no power modulus is visible.
pub fn fit_holder(pairs: &[(HolderSample, HolderSample)], noise_floor: f64) -> Result<HolderFit> {
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    for (a, b) in pairs {
        let du = (a.u - b.u).abs();
        let d = parabolic_distance(a.t, &a.x, b.t, &b.x);
        if du > noise_floor && d > 0.0 && du.is_finite() {
            lx.push(d.ln());
            ly.push(du.ln());
        }
    }
    if lx.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "{} pairs differ by more than the noise floor {noise_floor}",
            lx.len()
        )));
    }
    let fit = linear_fit(&lx, &ly)?;
    let residuals: Vec<f64> = lx.iter().zip(&ly).map(|(x, y)| y - (fit.intercept + fit.slope * x)).collect();
    Ok(HolderFit {
        alpha_hat: fit.slope,
        c_hat: fit.intercept.exp(),
        r2: fit.r2,
        pairs_used: lx.len(),
        residuals,
        degraded: !(fit.r2 >= 0.9) || !(fit.slope > 0.1),
    })
}

/// Which source term the martingale functional subtracts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceChoice {
    /// `f = 𝓛u` from the probe's derivatives.
    Generator,
    /// `f = 0`; a negative control unless `u` is harmonic.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckpointRow {
    pub s: f64,
    pub mean: f64,
    pub deviation: f64,
    pub std_error: f64,
    /// `|deviation| / std_error`; zero when both vanish.
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MartingaleReport {
    pub source: SourceChoice,
    pub m0: f64,
    pub rows: Vec<CheckpointRow>,
    pub max_deviation: f64,
    pub max_z: f64,
    pub pass: bool,
}

/// Estimates `M_s = E[u(t + s∧τ, X_{s∧τ}) − ∫₀^{s∧τ} f]` at each checkpoint
/// `s` and compares with `M_0`. Passes iff every deviation is below 4
/// standard errors.
pub fn martingale_check(
    cfg: &SimConfig,
    field: &dyn CoefficientField,
    probe: &SmoothProbe,
    q: &HyperCube,
    start: (f64, &[f64]),
    checkpoints: &[f64],
    source: SourceChoice,
) -> Result<MartingaleReport> {
    cfg.validate(field)?;
    check_start(field, q, start)?;
    if checkpoints.is_empty() || checkpoints.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(invalid!("checkpoints must be a nonempty list of nonnegative times"));
    }
    let mut cps = checkpoints.to_vec();
    cps.sort_by(f64::total_cmp);
    let s_max = *cps.last().unwrap();
    let mut run = cfg.clone();
    run.horizon = s_max.max(cfg.h);
    let t0 = start.0;
    let eps = 1e-9 * cfg.h;
    let per_path: Vec<Vec<f64>> = par_map(cfg.workers, cfg.path_count, |p| {
        let mut vals = Vec::with_capacity(cps.len());
        let mut integral = 0.0;
        let s = run_stopped_path(&run, field, q, None, t0, start.1, p as u64, |t, x, h| {
            while vals.len() < cps.len() && t >= t0 + cps[vals.len()] - eps {
                vals.push(probe.value(t, x) - integral);
            }
            if source == SourceChoice::Generator {
                integral += generator_apply(field, probe, t, x) * h;
            }
        });
        let last = probe.value(s.stop_time, &s.stop_state) - integral;
        vals.resize(cps.len(), last);
        vals
    })?;
    let m0 = probe.value(t0, start.1);
    let mut rows = Vec::with_capacity(cps.len());
    for (j, &s) in cps.iter().enumerate() {
        let d: Vec<f64> = per_path.iter().map(|v| v[j] - m0).collect();
        let (dev, se) = mean_se(&d);
        let z = if se > 0.0 {
            dev.abs() / se
        } else if dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        rows.push(CheckpointRow {
            s,
            mean: m0 + dev,
            deviation: dev,
            std_error: se,
            z,
        });
    }
    let max_deviation = rows.iter().map(|r| r.deviation.abs()).fold(0.0, f64::max);
    let max_z = rows.iter().map(|r| r.z).fold(0.0, f64::max);
    Ok(MartingaleReport {
        source,
        m0,
        rows,
        max_deviation,
        max_z,
        pass: max_z < 4.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantSetup {
    pub burn_in: f64,
    pub horizon: f64,
    pub thinning: f64,
    pub starts: Vec<Vec<f64>>,
    /// Independent long paths per start.
    #[serde(default = "one")]
    pub paths_per_start: usize,
    /// Batches for the batch-means standard error of each path.
    #[serde(default = "twenty")]
    pub batches: usize,
}

fn one() -> usize {
    1
}

fn twenty() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AxisSummary {
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    /// At probabilities 0.05, 0.25, 0.5, 0.75, 0.95.
    pub quantiles: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StartSummary {
    pub start: Vec<f64>,
    pub observations: usize,
    pub axes: Vec<AxisSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvariantReport {
    pub burn_in: f64,
    pub horizon: f64,
    pub thinning: f64,
    pub per_start: Vec<StartSummary>,
    /// `(i, j, W₁)` for every pair of starts; in several dimensions the
    /// largest per-coordinate distance, which bounds the joint one below.
    pub distance_w1: Vec<(usize, usize, f64)>,
    /// Distance of each start's law to the reference sample, if given.
    pub reference_w1: Option<Vec<f64>>,
}

pub const INV_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

fn w1_max_axis(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let n = a.first().map_or(0, |x| x.len());
    let mut d: f64 = 0.0;
    for i in 0..n {
        let xa: Vec<f64> = a.iter().map(|x| x[i]).collect();
        let xb: Vec<f64> = b.iter().map(|x| x[i]).collect();
        d = d.max(wasserstein1(&xa, &xb)?);
    }
    Ok(d)
}

/// Time-averaged empirical laws after burn-in, one per start, and their
/// pairwise distances. The field must pass [`check_inv_conditions`] on a
/// sample grid reaching past the starts.
pub fn est_invariant(
    cfg: &SimConfig,
    field: &dyn CoefficientField,
    setup: &InvariantSetup,
    reference: Option<&[Vec<f64>]>,
) -> Result<InvariantReport> {
    if !(setup.horizon > 0.0) || !setup.horizon.is_finite() {
        return Err(precondition!("horizon must be positive, got {}", setup.horizon));
    }
    if !(setup.burn_in >= 0.0) || !(setup.thinning > 0.0) || setup.thinning > setup.horizon {
        return Err(invalid!("need burn-in ≥ 0 and 0 < thinning ≤ horizon"));
    }
    if setup.starts.is_empty() || setup.paths_per_start == 0 {
        return Err(invalid!("need at least one start and one path per start"));
    }
    let n = field.dim();
    if setup.starts.iter().any(|x| x.len() != n || x.iter().any(|v| !(*v >= 0.0))) {
        return Err(invalid!("every start must be a point of the orthant of dimension {n}"));
    }
    let inv = check_inv_conditions(field, &inv_sample_grid(n, inv_grid_reach(&setup.starts), 8))?;
    if !inv.pass {
        return Err(precondition!("{}", inv.failures.join("; ")));
    }
    let mut run = cfg.clone();
    run.horizon = setup.horizon.max(cfg.h);
    run.validate(field)?;

    let pps = setup.paths_per_start;
    let jobs = setup.starts.len() * pps;
    let series = par_map(cfg.workers, jobs, |job| {
        let x = &setup.starts[job / pps];
        time_series(&run, field, x, setup.burn_in, setup.horizon, setup.thinning, job as u64)
    })?;

    let mut pooled: Vec<Vec<Vec<f64>>> = Vec::with_capacity(setup.starts.len());
    let mut per_start = Vec::with_capacity(setup.starts.len());
    for (si, x) in setup.starts.iter().enumerate() {
        let paths = &series[si * pps..(si + 1) * pps];
        let all: Vec<Vec<f64>> = paths.iter().flatten().cloned().collect();
        let mut axes = Vec::with_capacity(n);
        for i in 0..n {
            let coord: Vec<f64> = all.iter().map(|v| v[i]).collect();
            let (mean, variance) = mean_var(&coord);
            let mut se2 = 0.0;
            for p in paths {
                let c: Vec<f64> = p.iter().map(|v| v[i]).collect();
                se2 += batch_means_se(&c, setup.batches)?.powi(2);
            }
            axes.push(AxisSummary {
                mean,
                mean_se: se2.sqrt() / pps as f64,
                variance,
                quantiles: quantiles(&coord, &INV_QUANTILES),
            });
        }
        per_start.push(StartSummary {
            start: x.clone(),
            observations: all.len(),
            axes,
        });
        pooled.push(all);
    }
    let mut distance_w1 = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            distance_w1.push((i, j, w1_max_axis(&pooled[i], &pooled[j])?));
        }
    }
    let reference_w1 = match reference {
        Some(r) => Some(pooled.iter().map(|p| w1_max_axis(p, r)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    Ok(InvariantReport {
        burn_in: setup.burn_in,
        horizon: setup.horizon,
        thinning: setup.thinning,
        per_start,
        distance_w1,
        reference_w1,
    })
}

/// Extent of the sample grid used for the invariant-measure precondition.
pub fn inv_grid_reach(starts: &[Vec<f64>]) -> f64 {
    let max_start = starts.iter().flatten().cloned().fold(0.0, f64::max);
    (2.0 * max_start).max(10.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailRow {
    pub t: f64,
    pub p_hat: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailReport {
    pub level: f64,
    pub eps: f64,
    pub rows: Vec<TailRow>,
    pub sup_p: f64,
    pub pass: bool,
}

/// `P̂[|X_t| > level]` over a time grid; passes iff the supremum is at
/// most `eps`. Each path is simulated once through all grid times.
pub fn tail_check(
    cfg: &SimConfig,
    field: &dyn CoefficientField,
    start: &[f64],
    level: f64,
    t_grid: &[f64],
    eps: f64,
) -> Result<TailReport> {
    cfg.validate(field)?;
    if start.len() != field.dim() || start.iter().any(|v| !(*v >= 0.0)) {
        return Err(invalid!("start {start:?} is not a point of the orthant of dimension {}", field.dim()));
    }
    if !(level > 0.0) {
        return Err(invalid!("level must be positive, got {level}"));
    }
    if t_grid.is_empty() || t_grid.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(invalid!("time grid must be a nonempty list of nonnegative times"));
    }
    let mut times = t_grid.to_vec();
    times.sort_by(f64::total_cmp);
    let exceed: Vec<Vec<bool>> = par_map(cfg.workers, cfg.path_count, |p| {
        states_at_times(cfg, field, start, &times, p as u64)
            .iter()
            .map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt() > level)
            .collect()
    })?;
    let n = cfg.path_count as u64;
    let rows: Vec<TailRow> = times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let k = exceed.iter().filter(|e| e[j]).count() as u64;
            let (p_hat, ci_low, ci_high) = wilson(k, n);
            TailRow {
                t,
                p_hat,
                std_error: (p_hat * (1.0 - p_hat) / n as f64).sqrt(),
                ci_low,
                ci_high,
            }
        })
        .collect();
    let sup_p = rows.iter().map(|r| r.p_hat).fold(0.0, f64::max);
    Ok(TailReport {
        level,
        eps,
        rows,
        sup_p,
        pass: sup_p <= eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{CirField, ConstantField};
    use crate::sde::Scheme;

    fn q1() -> HyperCube {
        HyperCube::from_parts(0.0, 1.0, vec![0.0], 1.0).unwrap()
    }

    fn euler(n: usize, seed: u64) -> SimConfig {
        SimConfig::new(1e-3, 1.0, Scheme::FullTruncationEuler, seed, n)
    }

    fn field() -> ConstantField {
        ConstantField::scalar(1.0, 0.55, 2.0).unwrap()
    }

    #[test]
    fn hit_prob_trivial_targets() {
        let q = q1();
        let full = GridSet::full(q.clone(), 3, 3).unwrap();
        let none = GridSet::empty(q.clone(), 3, 3).unwrap();
        let r = est_hit_prob(&euler(200, 1), &field(), &q, &full, (0.0, &[0.1])).unwrap();
        assert_eq!(r.estimate, 1.0);
        let r = est_hit_prob(&euler(200, 1), &field(), &q, &none, (0.0, &[0.1])).unwrap();
        assert_eq!((r.estimate, r.ci_low), (0.0, 0.0));
        assert!(r.ci_high > 0.0);
    }

    #[test]
    fn hit_prob_rejects_gamma_outside() {
        let q = q1();
        let big = HyperCube::from_parts(0.0, 1.0, vec![0.0], 2.0).unwrap();
        let g = GridSet::full(big, 3, 3).unwrap();
        assert!(est_hit_prob(&euler(10, 1), &field(), &q, &g, (0.0, &[0.1])).is_err());
    }

    #[test]
    fn hit_prob_is_monotone_in_gamma() {
        let q = HyperCube::from_parts(0.0, 1.0, vec![0.0, 0.0], 1.0).unwrap();
        let f = ConstantField::new(
            nalgebra::DMatrix::identity(2, 2),
            nalgebra::DVector::from_vec(vec![1.0, 1.0]),
            2.0,
        )
        .unwrap();
        let small = GridSet::far_fraction(q.clone(), 9, 9, 0.2).unwrap();
        let large = GridSet::far_fraction(q.clone(), 9, 9, 0.5).unwrap();
        assert!(small.is_subset_of(&large));
        let cfg = euler(2000, 3);
        let a = est_hit_prob(&cfg, &f, &q, &small, (0.0, &[0.0, 0.0])).unwrap();
        let b = est_hit_prob(&cfg, &f, &q, &large, (0.0, &[0.0, 0.0])).unwrap();
        assert!(a.successes <= b.successes);
    }

    #[test]
    fn start_grid_includes_corner() {
        let q = HyperCube::from_parts(0.0, 35.0 / 36.0, vec![0.0, 0.0], 1.0).unwrap();
        let starts = start_grid(&q, &[0.0, 0.5, 0.9]).unwrap();
        assert_eq!(starts.len(), 9);
        assert_eq!(starts[0], vec![0.0, 0.0]);
        assert!(uniform_start_diagnostics(&q, &starts).is_empty());
        let missing: Vec<Vec<f64>> = starts[1..].to_vec();
        assert_eq!(uniform_start_diagnostics(&q, &missing).len(), 1);
        let mut outside = starts.clone();
        outside.push(vec![0.5, 0.0]);
        let d = uniform_start_diagnostics(&q, &outside);
        assert!(d.len() == 1 && d[0].contains("start 9"));
    }

    #[test]
    fn uniform_hit_on_full_gamma() {
        let q = q1();
        let g = GridSet::full(q.clone(), 3, 3).unwrap();
        let starts = start_grid(&q, &[0.0, 0.5]).unwrap();
        let r = est_uniform_hit(&euler(50, 2), &field(), &q, &g, &starts).unwrap();
        assert!(r.per_start.iter().all(|s| s.report.estimate == 1.0));
        assert_eq!(r.min_estimate, 1.0);
    }

    fn setup() -> SmallCubeSetup {
        SmallCubeSetup {
            x0: vec![0.0],
            x: vec![0.25],
            l: 0.25,
            c: 0.9,
            beta: 2.0,
            eps: 0.1,
            alpha: 1.0,
            r: 0.75,
            t: 0.1 * 0.0625,
            y: vec![0.25],
        }
    }

    #[test]
    fn small_cube_preconditions() {
        let s = setup();
        let (_, target, variant) = s.check().unwrap();
        assert_eq!(variant, SmallCubeVariant::Interior);
        assert!((target.rho() - 0.75 * 0.9 * 0.25).abs() < 1e-15);
        let mut bad = s.clone();
        bad.l = 0.9;
        assert!(matches!(bad.check(), Err(Error::Precondition(_))));
        let mut bad = s.clone();
        bad.t = 0.5;
        assert!(matches!(bad.check(), Err(Error::Precondition(_))));
        let mut bad = s.clone();
        bad.y = vec![0.9];
        assert!(matches!(bad.check(), Err(Error::Precondition(_))));
        let mut edge = s;
        edge.x = vec![0.0];
        edge.y = vec![0.0];
        assert_eq!(edge.check().unwrap().2, SmallCubeVariant::Boundary);
    }

    #[test]
    fn small_cube_stay_put_is_likely() {
        let r = est_small_cube(&SimConfig::new(1e-4, 1.0, Scheme::FullTruncationEuler, 4, 2000), &field(), &setup())
            .unwrap();
        assert!(r.report.ci_low > 0.5, "{r:?}");
    }

    #[test]
    fn feynman_kac_constants() {
        let q = q1();
        let one = |_: f64, _: &[f64]| 1.0;
        let zero = |_: f64, _: &[f64]| 0.0;
        let r = feynman_kac_eval(&euler(300, 5), &field(), &q, &one, &zero, (0.0, &[0.3])).unwrap();
        assert_eq!((r.estimate, r.std_error), (1.0, 0.0));
        let r = feynman_kac_eval(&euler(300, 5), &field(), &q, &zero, &one, (0.2, &[0.3])).unwrap();
        assert!(r.estimate > 0.0 && r.estimate <= 0.8 + 1e-9);
        assert!((r.estimate - r.mean_exit_time).abs() < 1e-9);
    }

    #[test]
    fn feynman_kac_linear_solution() {
        // u(t, x) = x solves 𝓛u + f = 0 with f = −b
        let q = q1();
        let g = |_: f64, x: &[f64]| x[0];
        let f = |_: f64, _: &[f64]| -0.55;
        let r = feynman_kac_eval(&euler(20_000, 6), &field(), &q, &g, &f, (0.0, &[0.3])).unwrap();
        assert!((r.estimate - 0.3).abs() < 3.0 * r.std_error + 2e-3, "{r:?}");
    }

    #[test]
    fn osc_of_constant_data_is_inconclusive() {
        let c = |_: f64, _: &[f64]| 2.0;
        let zero = |_: f64, _: &[f64]| 0.0;
        let r = est_osc_decay(&euler(20, 1), &field(), &q1(), &[1.0, 0.5], &c, &zero, 3).unwrap();
        assert!(r.osc.iter().all(|o| *o == 0.0));
        assert!(r.inconclusive);
    }

    #[test]
    fn eval_grid_covers_corners() {
        let q = HyperCube::from_parts(0.0, 1.0, vec![0.0, 1.0], 0.5).unwrap();
        let pts = eval_grid(&q, 5);
        assert_eq!(pts.len(), 125);
        assert!(pts.contains(&(0.0, vec![0.0, 0.25])));
        assert!(pts.contains(&(0.25, vec![0.25, 2.25])));
    }

    fn sample(t: f64, s: f64, u: f64) -> HolderSample {
        HolderSample { t, x: vec![s * s], u }
    }

    #[test]
    fn holder_fit_of_distance_function() {
        // u = parabolic distance to (0.3, √x = 0.4), paired with that point
        let p = sample(0.3, 0.4, 0.0);
        let mut pairs = Vec::new();
        for k in 1..12 {
            let d = 0.5f64.powi(k);
            for (dt, ds) in [(d * d, 0.0), (0.0, d), (0.25 * d * d, 0.5 * d)] {
                let q = sample(0.3 + dt, 0.4 + ds, 0.0);
                let u = parabolic_distance(q.t, &q.x, p.t, &p.x);
                pairs.push((p.clone(), HolderSample { u, ..q }));
            }
        }
        let fit = fit_holder(&pairs, 1e-12).unwrap();
        assert!((fit.alpha_hat - 1.0).abs() < 1e-6 && (fit.c_hat - 1.0).abs() < 1e-6, "{fit:?}");
        assert!(!fit.degraded);
        // all pairs of a smooth one-axis profile
        let line: Vec<HolderSample> = (0..20).map(|j| sample(0.0, j as f64 * 0.05, 3.0 * j as f64 * 0.05)).collect();
        let fit = fit_holder(&all_pairs(&line), 1e-12).unwrap();
        assert!((fit.alpha_hat - 1.0).abs() < 1e-9 && (fit.c_hat - 3.0).abs() < 1e-9);
    }

    #[test]
    fn holder_fit_needs_variation() {
        let flat: Vec<HolderSample> = (0..10).map(|j| sample(j as f64, 0.0, 1.0)).collect();
        assert!(matches!(fit_holder(&all_pairs(&flat), 1e-9), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn holder_fit_flags_jump() {
        // u = s + 1{s ≥ 1/2}, pairs straddling the jump at shrinking distance
        let u = |s: f64| s + if s >= 0.5 { 1.0 } else { 0.0 };
        let pairs: Vec<_> = (1..15)
            .map(|k| {
                let d = 0.5f64.powi(k + 2);
                (sample(0.0, 0.5 - d, u(0.5 - d)), sample(0.0, 0.5 + d, u(0.5 + d)))
            })
            .collect();
        let fit = fit_holder(&pairs, 1e-12).unwrap();
        assert!(fit.alpha_hat.abs() < 0.05 && fit.degraded, "{fit:?}");
    }

    #[test]
    fn martingale_linear_probe() {
        let q = HyperCube::from_parts(0.0, 1.0, vec![0.0], 3.0).unwrap();
        let f = ConstantField::scalar(1.0, 0.5, 2.0).unwrap();
        let probe = SmoothProbe::linear(vec![1.0]);
        let r = martingale_check(&euler(5000, 8), &f, &probe, &q, (0.0, &[1.0]), &[0.25, 0.5], SourceChoice::Generator)
            .unwrap();
        assert!(r.pass && r.max_z < 3.0, "{r:?}");
        let r = martingale_check(&euler(5000, 8), &f, &probe, &q, (0.0, &[1.0]), &[0.25, 0.5], SourceChoice::Zero).unwrap();
        assert!(!r.pass);
        assert!(r.rows[1].deviation > r.rows[0].deviation);
    }

    #[test]
    fn martingale_zero_checkpoint_is_exact() {
        let q = q1();
        let probe = SmoothProbe::sum_of_squares();
        let r = martingale_check(&euler(50, 1), &field(), &probe, &q, (0.0, &[0.2]), &[0.0], SourceChoice::Zero).unwrap();
        assert_eq!((r.rows[0].deviation, r.rows[0].z), (0.0, 0.0));
    }

    #[test]
    fn invariant_rejects_bad_setups() {
        let f = CirField::scalar(1.0, 1.0, 1.0, 2.0).unwrap();
        let cfg = SimConfig::new(1.0, 1.0, Scheme::ExactCir, 1, 1);
        let mut s = InvariantSetup {
            burn_in: 1.0,
            horizon: 0.0,
            thinning: 1.0,
            starts: vec![vec![1.0]],
            paths_per_start: 1,
            batches: 4,
        };
        assert!(matches!(est_invariant(&cfg, &f, &s, None), Err(Error::Precondition(_))));
        s.horizon = 100.0;
        let too_noisy = ConstantField::scalar(3.0, 1.0, 2.0).unwrap();
        assert!(est_invariant(&cfg, &f, &s, None).is_ok());
        let e = est_invariant(&SimConfig::new(0.1, 1.0, Scheme::FullTruncationEuler, 1, 1), &too_noisy, &s, None);
        assert!(matches!(e, Err(Error::Precondition(_))), "{e:?}");
    }

    #[test]
    fn invariant_is_worker_independent() {
        let f = CirField::scalar(1.0, 1.0, 1.0, 2.0).unwrap();
        let s = InvariantSetup {
            burn_in: 5.0,
            horizon: 200.0,
            thinning: 0.5,
            starts: vec![vec![0.01], vec![10.0]],
            paths_per_start: 2,
            batches: 10,
        };
        let cfg = SimConfig::new(0.5, 1.0, Scheme::ExactCir, 12, 1);
        let a = est_invariant(&cfg, &f, &s, None).unwrap();
        let b = est_invariant(&cfg.clone().with_workers(4), &f, &s, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.distance_w1.len(), 1);
        assert!(a.distance_w1[0].2 >= 0.0);
    }

    #[test]
    fn tail_trivial_cases() {
        let f = CirField::scalar(1.0, 1.0, 1.0, 2.0).unwrap();
        let cfg = SimConfig::new(0.5, 1.0, Scheme::ExactCir, 3, 500);
        let r = tail_check(&cfg, &f, &[1.0], 6.0, &[0.0, 1.0], 1e-3).unwrap();
        assert_eq!(r.rows[0].p_hat, 0.0);
        let r = tail_check(&cfg, &f, &[1.0], 1e6, &[0.0, 5.0, 10.0], 0.0).unwrap();
        assert!(r.pass && r.sup_p == 0.0);
    }
}

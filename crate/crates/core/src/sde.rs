//! Path simulation on the orthant.
//!
//! Two kernels are available: full-truncation Euler for any field, and the
//! exact square-root transition (noncentral chi-square via a Poisson mixture
//! of Gammas) for decoupled CIR and constant-drift diagonal fields.
//!
//! Path `p` at step `k` draws its randomness from the Philox stream keyed by
//! `(seed, p, k)`, so results depend only on the seed and never on the
//! number of workers. Outputs are collected in path order.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::{CirParams, CoefficientField};
use crate::error::{invalid, Error, Result};
use crate::geometry::HyperCube;
use crate::grid::GridSet;
use crate::rng::{derive_seed, PhiloxStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    FullTruncationEuler,
    ExactCir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Time step.
    pub h: f64,
    /// Maximum simulated duration per path.
    pub horizon: f64,
    pub scheme: Scheme,
    pub seed: u64,
    pub path_count: usize,
    /// Worker threads; results do not depend on it.
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl SimConfig {
    pub fn new(h: f64, horizon: f64, scheme: Scheme, seed: u64, path_count: usize) -> Self {
        Self {
            h,
            horizon,
            scheme,
            seed,
            path_count,
            workers: 1,
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, field: &dyn CoefficientField) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(invalid!("step must be positive, got {}", self.h));
        }
        if !(self.horizon >= self.h) || !self.horizon.is_finite() {
            return Err(invalid!("horizon {} must be at least the step {}", self.horizon, self.h));
        }
        if self.path_count == 0 {
            return Err(invalid!("path count must be positive"));
        }
        if self.path_count > u32::MAX as usize {
            return Err(invalid!("path count exceeds the stream id range"));
        }
        if self.workers == 0 {
            return Err(invalid!("worker count must be positive"));
        }
        if self.scheme == Scheme::ExactCir && field.as_cir().is_none() {
            return Err(invalid!("the exact scheme needs a decoupled CIR or diagonal constant-drift field"));
        }
        Ok(())
    }
}

/// Maps `f` over `0..n` on `workers` threads, preserving index order.
pub fn par_map<T: Send>(workers: usize, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Result<Vec<T>> {
    if workers <= 1 {
        return Ok((0..n).map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}

/// One full-truncation Euler step:
/// `X' = max(0, X + b(X)h + diag(√X) σ(X) √h z)`.
pub fn step_ft_euler(x: &[f64], field: &dyn CoefficientField, h: f64, normals: &[f64]) -> Vec<f64> {
    let n = field.dim();
    let mut out = x.to_vec();
    let mut b = vec![0.0; n];
    let mut sigma = DMatrix::zeros(n, n);
    euler_in_place(&mut out, field, h, normals, &mut b, &mut sigma);
    out
}

#[inline]
fn euler_in_place(
    x: &mut [f64],
    field: &dyn CoefficientField,
    h: f64,
    z: &[f64],
    b: &mut [f64],
    sigma: &mut DMatrix<f64>,
) {
    let n = x.len();
    field.drift(x, b);
    field.sigma_into(x, sigma);
    let sh = h.sqrt();
    for i in 0..n {
        let mut noise = 0.0;
        for k in 0..n {
            noise += sigma[(i, k)] * z[k];
        }
        let next = x[i] + b[i] * h + x[i].sqrt() * noise * sh;
        x[i] = if next > 0.0 { next } else { 0.0 };
    }
}

/// Exact draw of `X_h` given `X_0 = x` for `dX = (β − κX)dt + √(σ²X) dW`.
fn cir_transition<R: Rng + ?Sized>(x: f64, p: &CirParams, h: f64, rng: &mut R) -> f64 {
    let (c, decay) = if p.kappa > 0.0 {
        let e = (-p.kappa * h).exp();
        (p.sigma2 * (-(-p.kappa * h).exp_m1()) / (4.0 * p.kappa), e)
    } else {
        (p.sigma2 * h / 4.0, 1.0)
    };
    let d = 4.0 * p.beta / p.sigma2;
    let nc = x * decay / c;
    let k = if nc > 0.0 {
        Poisson::new(0.5 * nc).expect("finite positive rate").sample(rng)
    } else {
        0.0
    };
    let shape = 0.5 * d + k;
    if shape <= 0.0 {
        return 0.0;
    }
    2.0 * c * Gamma::new(shape, 1.0).expect("positive shape").sample(rng)
}

/// Exact CIR transition over `h` from `x`, drift `κ(m − x)`.
pub fn exact_cir_step<R: Rng + ?Sized>(x: f64, kappa: f64, m: f64, sigma2: f64, h: f64, rng: &mut R) -> Result<f64> {
    if !(kappa > 0.0) || !(m >= 0.0) || !(sigma2 > 0.0) || !(h > 0.0) || !(x >= 0.0) {
        return Err(invalid!(
            "need κ > 0, m ≥ 0, σ² > 0, h > 0, x ≥ 0; got κ={kappa}, m={m}, σ²={sigma2}, h={h}, x={x}"
        ));
    }
    Ok(cir_transition(x, &CirParams::mean_reverting(kappa, m, sigma2), h, rng))
}

/// Closed-form conditional mean and variance of the CIR transition.
pub fn cir_moments(x: f64, p: &CirParams, t: f64) -> (f64, f64) {
    if p.kappa > 0.0 {
        let e = (-p.kappa * t).exp();
        let m = p.beta / p.kappa;
        let mean = m + (x - m) * e;
        let var = x * p.sigma2 * e * (1.0 - e) / p.kappa + m * p.sigma2 * (1.0 - e).powi(2) / (2.0 * p.kappa);
        (mean, var)
    } else {
        (x + p.beta * t, p.sigma2 * (x * t + 0.5 * p.beta * t * t))
    }
}

/// Per-path state advance shared by all simulation entry points.
struct Kernel<'a> {
    field: &'a dyn CoefficientField,
    cir: Option<Vec<CirParams>>,
    b: Vec<f64>,
    sigma: DMatrix<f64>,
    z: Vec<f64>,
}

impl<'a> Kernel<'a> {
    fn new(field: &'a dyn CoefficientField, scheme: Scheme) -> Self {
        let n = field.dim();
        Self {
            field,
            cir: match scheme {
                Scheme::ExactCir => field.as_cir(),
                Scheme::FullTruncationEuler => None,
            },
            b: vec![0.0; n],
            sigma: DMatrix::zeros(n, n),
            z: vec![0.0; n],
        }
    }

    #[inline]
    fn advance(&mut self, x: &mut [f64], h: f64, rng: &mut PhiloxStream) {
        match &self.cir {
            Some(params) => {
                for (xi, p) in x.iter_mut().zip(params) {
                    *xi = cir_transition(*xi, p, h, rng);
                }
            }
            None => {
                for zi in self.z.iter_mut() {
                    *zi = rng.sample(StandardNormal);
                }
                euler_in_place(x, self.field, h, &self.z, &mut self.b, &mut self.sigma);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopKind {
    Hit,
    Exit,
    Horizon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppedSample {
    pub stop_kind: StopKind,
    pub stop_time: f64,
    pub stop_state: Vec<f64>,
    pub path_id: u64,
}

/// Runs one path from `(t, x)` until it enters Γ, leaves Q, or time runs
/// out. Events are checked at grid times only, Γ before Q. `on_step` sees
/// `(t_k, X_k, h_k)` before every step taken.
#[allow(clippy::too_many_arguments)]
pub fn run_stopped_path(
    cfg: &SimConfig,
    field: &dyn CoefficientField,
    q: &HyperCube,
    gamma: Option<&GridSet>,
    t_start: f64,
    x_start: &[f64],
    path_id: u64,
    mut on_step: impl FnMut(f64, &[f64], f64),
) -> StoppedSample {
    let mut kernel = Kernel::new(field, cfg.scheme);
    let mut x = x_start.to_vec();
    let t_stop = q.t_end().min(t_start + cfg.horizon);
    let eps = 1e-12 * t_stop.abs().max(1.0);
    let mut t = t_start;
    let mut k: u64 = 0;
    loop {
        if gamma.is_some_and(|g| g.contains_x(t, &x)) {
            return StoppedSample {
                stop_kind: StopKind::Hit,
                stop_time: t,
                stop_state: x,
                path_id,
            };
        }
        if t >= t_stop {
            let kind = if q.contains_x(t, &x) || t >= q.t_end() && q.cube().contains_x(&x) {
                StopKind::Horizon
            } else {
                StopKind::Exit
            };
            return StoppedSample {
                stop_kind: kind,
                stop_time: t,
                stop_state: x,
                path_id,
            };
        }
        if !q.cube().contains_x(&x) {
            return StoppedSample {
                stop_kind: StopKind::Exit,
                stop_time: t,
                stop_state: x,
                path_id,
            };
        }
        let next = t_start + (k + 1) as f64 * cfg.h;
        let (dt, t_next) = if next >= t_stop - eps {
            (t_stop - t, t_stop)
        } else {
            (next - t, next)
        };
        on_step(t, &x, dt);
        let mut rng = PhiloxStream::new(cfg.seed, path_id as u32, k);
        kernel.advance(&mut x, dt, &mut rng);
        t = t_next;
        k += 1;
    }
}

/// [`run_stopped_path`] with a membership check on the start.
pub fn simulate_stopped(
    cfg: &SimConfig,
    field: &dyn CoefficientField,
    q: &HyperCube,
    gamma: Option<&GridSet>,
    start: (f64, &[f64]),
    path_id: u64,
) -> Result<StoppedSample> {
    cfg.validate(field)?;
    check_start(field, q, start)?;
    Ok(run_stopped_path(cfg, field, q, gamma, start.0, start.1, path_id, |_, _, _| {}))
}

pub(crate) fn check_start(field: &dyn CoefficientField, q: &HyperCube, start: (f64, &[f64])) -> Result<()> {
    if start.1.len() != field.dim() || q.dim() != field.dim() {
        return Err(invalid!(
            "dimension mismatch: field {}, hypercube {}, start {}",
            field.dim(),
            q.dim(),
            start.1.len()
        ));
    }
    if !q.contains_x(start.0, start.1) {
        return Err(invalid!("start ({}, {:?}) is outside the hypercube", start.0, start.1));
    }
    Ok(())
}

/// All `path_count` stopped samples, in path order.
pub fn simulate_stopped_batch(
    cfg: &SimConfig,
    field: &dyn CoefficientField,
    q: &HyperCube,
    gamma: Option<&GridSet>,
    start: (f64, &[f64]),
) -> Result<Vec<StoppedSample>> {
    cfg.validate(field)?;
    check_start(field, q, start)?;
    par_map(cfg.workers, cfg.path_count, |p| {
        run_stopped_path(cfg, field, q, gamma, start.0, start.1, p as u64, |_, _, _| {})
    })
}

/// Advances one unstopped path by `t` and returns the end state.
fn run_free_path(cfg: &SimConfig, field: &dyn CoefficientField, t: f64, x0: &[f64], path_id: u64) -> Vec<f64> {
    let mut kernel = Kernel::new(field, cfg.scheme);
    let mut x = x0.to_vec();
    let steps = step_count(t, cfg.h);
    for k in 0..steps {
        let dt = if k + 1 == steps { t - k as f64 * cfg.h } else { cfg.h };
        let mut rng = PhiloxStream::new(cfg.seed, path_id as u32, k);
        kernel.advance(&mut x, dt, &mut rng);
    }
    x
}

fn step_count(t: f64, h: f64) -> u64 {
    if t <= 0.0 {
        return 0;
    }
    ((t / h) - 1e-9).ceil().max(1.0) as u64
}

/// `path_count` independent end states at time `t`.
pub fn sample_marginal(cfg: &SimConfig, field: &dyn CoefficientField, t: f64, start: &[f64]) -> Result<Vec<Vec<f64>>> {
    cfg.validate(field)?;
    if start.len() != field.dim() || start.iter().any(|v| !(*v >= 0.0)) {
        return Err(invalid!("start {start:?} is not a point of the orthant of dimension {}", field.dim()));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(invalid!("time must be finite and nonnegative, got {t}"));
    }
    par_map(cfg.workers, cfg.path_count, |p| run_free_path(cfg, field, t, start, p as u64))
}

/// One state per path.
pub type Sample = Vec<Vec<f64>>;

/// Samples of `X_t` from `x` and of `ρ²X̃_{t/ρ²}` from `x/ρ²`, the latter
/// simulated with step `h/ρ²`. For constant coefficients both have the
/// law of `X_t`.
pub fn rescaled_pair(
    cfg: &SimConfig,
    field: &dyn CoefficientField,
    rho2: f64,
    t: f64,
    start: &[f64],
) -> Result<(Sample, Sample)> {
    if !field.is_constant() {
        return Err(invalid!("rescaling leaves only constant-coefficient fields unchanged"));
    }
    if !(rho2 > 0.0) || !rho2.is_finite() {
        return Err(invalid!("rho² must be positive, got {rho2}"));
    }
    let direct_cfg = cfg.clone().with_seed(derive_seed(cfg.seed, 1));
    let mut scaled_cfg = cfg.clone().with_seed(derive_seed(cfg.seed, 2));
    scaled_cfg.h = cfg.h / rho2;
    scaled_cfg.horizon = cfg.horizon / rho2;
    let direct = sample_marginal(&direct_cfg, field, t, start)?;
    let small: Vec<f64> = start.iter().map(|v| v / rho2).collect();
    let mut scaled = sample_marginal(&scaled_cfg, field, t / rho2, &small)?;
    for x in scaled.iter_mut() {
        x.iter_mut().for_each(|v| *v *= rho2);
    }
    Ok((direct, scaled))
}

/// States of many paths on the grid `t_k = k·h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectories {
    pub dim: usize,
    pub h: f64,
    pub steps: usize,
    /// `paths[p][k]` is the state of path `p` at step `k`.
    pub paths: Vec<Vec<Vec<f64>>>,
}

const TRAJ_MAGIC: &[u8; 8] = b"SQTRAJ01";

#[derive(Serialize, Deserialize)]
struct TrajSidecar {
    format: String,
    dim: usize,
    h: f64,
    steps: usize,
    paths: usize,
    layout: String,
}

impl Trajectories {
    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| k as f64 * self.h).collect()
    }

    /// Little-endian binary dump: magic, header `(n, h, steps, paths)`,
    /// then for each path and coordinate the `steps + 1` values in time order.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(TRAJ_MAGIC)?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&self.h.to_le_bytes())?;
        w.write_all(&(self.steps as u64).to_le_bytes())?;
        w.write_all(&(self.paths.len() as u64).to_le_bytes())?;
        for p in &self.paths {
            for i in 0..self.dim {
                for state in p {
                    w.write_all(&state[i].to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        let sidecar = TrajSidecar {
            format: "SQTRAJ01".into(),
            dim: self.dim,
            h: self.h,
            steps: self.steps,
            paths: self.paths.len(),
            layout: "path-major; per path, one column of steps+1 little-endian f64 per coordinate".into(),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let bad = || invalid!("{} is not a trajectory file", path.display());
        if bytes.len() < 40 || &bytes[..8] != TRAJ_MAGIC {
            return Err(bad());
        }
        let word = |i: usize| <[u8; 8]>::try_from(&bytes[8 + 8 * i..16 + 8 * i]).unwrap();
        let dim = u64::from_le_bytes(word(0)) as usize;
        let h = f64::from_le_bytes(word(1));
        let steps = u64::from_le_bytes(word(2)) as usize;
        let n_paths = u64::from_le_bytes(word(3)) as usize;
        let expect = 40 + 8 * n_paths * dim * (steps + 1);
        if bytes.len() != expect {
            return Err(bad());
        }
        let mut vals = bytes[40..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut paths = vec![vec![vec![0.0; dim]; steps + 1]; n_paths];
        for p in paths.iter_mut() {
            for i in 0..dim {
                for state in p.iter_mut() {
                    state[i] = vals.next().ok_or_else(bad)?;
                }
            }
        }
        Ok(Self { dim, h, steps, paths })
    }

    /// `path,step,t,x0,...` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend((0..self.dim).map(|i| format!("x{i}")));
        let mut rows = Vec::with_capacity(self.paths.len() * (self.steps + 1));
        for (p, states) in self.paths.iter().enumerate() {
            for (k, x) in states.iter().enumerate() {
                let mut row = vec![p.to_string(), k.to_string(), (k as f64 * self.h).to_string()];
                row.extend(x.iter().map(|v| v.to_string()));
                rows.push(row);
            }
        }
        let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        crate::report::write_csv(path, &header, &rows)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Unstopped trajectories over `steps` steps of size `cfg.h`.
pub fn simulate_trajectories(
    cfg: &SimConfig,
    field: &dyn CoefficientField,
    start: &[f64],
    steps: usize,
) -> Result<Trajectories> {
    cfg.validate(field)?;
    if start.len() != field.dim() || start.iter().any(|v| !(*v >= 0.0)) {
        return Err(invalid!("start {start:?} is not a point of the orthant of dimension {}", field.dim()));
    }
    let paths = par_map(cfg.workers, cfg.path_count, |p| {
        let mut kernel = Kernel::new(field, cfg.scheme);
        let mut x = start.to_vec();
        let mut out = Vec::with_capacity(steps + 1);
        out.push(x.clone());
        for k in 0..steps as u64 {
            let mut rng = PhiloxStream::new(cfg.seed, p as u32, k);
            kernel.advance(&mut x, cfg.h, &mut rng);
            out.push(x.clone());
        }
        out
    })?;
    Ok(Trajectories {
        dim: field.dim(),
        h: cfg.h,
        steps,
        paths,
    })
}

/// States of one unstopped path at the nondecreasing times `times`
/// (measured from 0). Each gap is covered in equal steps of at most `cfg.h`.
pub fn states_at_times(
    cfg: &SimConfig,
    field: &dyn CoefficientField,
    start: &[f64],
    times: &[f64],
    path_id: u64,
) -> Vec<Vec<f64>> {
    let mut kernel = Kernel::new(field, cfg.scheme);
    let mut x = start.to_vec();
    let mut k: u64 = 0;
    let mut now = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let span = t - now;
        let n = step_count(span, cfg.h);
        if n > 0 {
            let dt = span / n as f64;
            for _ in 0..n {
                let mut rng = PhiloxStream::new(cfg.seed, path_id as u32, k);
                kernel.advance(&mut x, dt, &mut rng);
                k += 1;
            }
            now = t;
        }
        out.push(x.clone());
    }
    out
}

/// Observations `X_{burn_in + j·thinning}` of one long path for
/// `0 ≤ j·thinning ≤ horizon`.
pub fn time_series(
    cfg: &SimConfig,
    field: &dyn CoefficientField,
    start: &[f64],
    burn_in: f64,
    horizon: f64,
    thinning: f64,
    path_id: u64,
) -> Vec<Vec<f64>> {
    let n_obs = (horizon / thinning + 1e-9).floor() as usize;
    let times: Vec<f64> = (0..=n_obs).map(|j| burn_in + j as f64 * thinning).collect();
    states_at_times(cfg, field, start, &times, path_id)
}

//! Experiment documents and their semantic checks.

use serde::{Deserialize, Serialize};

use sqrtlab_core::coeffs::{check_condition_cprime, check_inv_conditions, inv_sample_grid, CoefficientField, ModelSpec};
use sqrtlab_core::czdecomp::cz_decompose;
use sqrtlab_core::estimators::{inv_grid_reach, start_grid, uniform_start_diagnostics, InvariantSetup, SmallCubeSetup, SourceChoice};
use sqrtlab_core::geometry::HyperCube;
use sqrtlab_core::grid::GridSet;
use sqrtlab_core::sde::{Scheme, SimConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub geometry: Option<HyperCube>,
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub output: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Experiment {
    Simulate(SimulateExp),
    Hitprob(HitprobExp),
    Smallcube(SmallcubeExp),
    Czd(CzdExp),
    Holder(HolderExp),
    Martingale(MartingaleExp),
    Invariant(InvariantExp),
    RescaleCheck(RescaleExp),
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Simulate(_) => "simulate",
            Experiment::Hitprob(_) => "hitprob",
            Experiment::Smallcube(_) => "smallcube",
            Experiment::Czd(_) => "czd",
            Experiment::Holder(_) => "holder",
            Experiment::Martingale(_) => "martingale",
            Experiment::Invariant(_) => "invariant",
            Experiment::RescaleCheck(_) => "rescale-check",
        }
    }
}

fn euler() -> Scheme {
    Scheme::FullTruncationEuler
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    pub h: f64,
    #[serde(default = "one")]
    pub paths: usize,
    #[serde(default = "euler")]
    pub scheme: Scheme,
    /// Defaults to whatever the experiment needs.
    #[serde(default)]
    pub horizon: Option<f64>,
}

impl SimParams {
    pub fn config(&self, seed: u64, workers: usize, default_horizon: f64) -> SimConfig {
        let horizon = self.horizon.unwrap_or(default_horizon.max(self.h));
        SimConfig::new(self.h, horizon, self.scheme, seed, self.paths).with_workers(workers)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Start {
    pub t: f64,
    pub x: Vec<f64>,
}

/// Γ as a grid set on the experiment's hypercube.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GammaSpec {
    Full { resolution: [usize; 2] },
    Empty { resolution: [usize; 2] },
    /// Whole columns farthest from the origin until the fraction is reached.
    FarFraction { resolution: [usize; 2], fraction: f64 },
    TimeSlab { resolution: [usize; 2], t_lo: f64, t_hi: f64 },
    /// Alternating unmarked/marked run lengths over the cells.
    Runs { resolution: [usize; 2], runs: Vec<usize> },
}

impl GammaSpec {
    pub fn resolution(&self) -> [usize; 2] {
        match self {
            GammaSpec::Full { resolution }
            | GammaSpec::Empty { resolution }
            | GammaSpec::FarFraction { resolution, .. }
            | GammaSpec::TimeSlab { resolution, .. }
            | GammaSpec::Runs { resolution, .. } => *resolution,
        }
    }

    pub fn build(&self, q: &HyperCube) -> sqrtlab_core::Result<GridSet> {
        let [m_t, m_s] = self.resolution();
        match self {
            GammaSpec::Full { .. } => GridSet::full(q.clone(), m_t, m_s),
            GammaSpec::Empty { .. } => GridSet::empty(q.clone(), m_t, m_s),
            GammaSpec::FarFraction { fraction, .. } => GridSet::far_fraction(q.clone(), m_t, m_s, *fraction),
            GammaSpec::TimeSlab { t_lo, t_hi, .. } => GridSet::time_slab(q.clone(), m_t, m_s, *t_lo, *t_hi),
            GammaSpec::Runs { runs, .. } => {
                let v = serde_json::json!({"base": q, "resolution": [m_t, m_s], "runs": runs});
                Ok(serde_json::from_value(v)?)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateExp {
    pub sim: SimParams,
    pub start: Vec<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HitprobExp {
    pub sim: SimParams,
    pub gamma: GammaSpec,
    #[serde(default)]
    pub start: Option<Start>,
    #[serde(default)]
    pub uniform: bool,
    /// Explicit start grid for the uniform run.
    #[serde(default)]
    pub starts: Option<Vec<Vec<f64>>>,
    /// Otherwise a product grid at these fractions of each axis of K(x₀, ρ/6).
    #[serde(default = "default_fractions")]
    pub start_fractions: Vec<f64>,
    /// Pass iff the (smallest) Wilson lower bound exceeds this.
    #[serde(default)]
    pub threshold: Option<f64>,
}

fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.5, 0.9]
}

impl HitprobExp {
    pub fn start_list(&self, q: &HyperCube) -> sqrtlab_core::Result<Vec<Vec<f64>>> {
        match &self.starts {
            Some(s) => Ok(s.clone()),
            None => start_grid(q, &self.start_fractions),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmallcubeExp {
    pub sim: SimParams,
    pub setup: SmallCubeSetup,
    #[serde(default)]
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CzdExp {
    pub gamma: GammaSpec,
    pub mu: f64,
    #[serde(default)]
    pub mu_prime: Option<f64>,
    #[serde(default)]
    pub max_level: Option<u32>,
}

/// Boundary data or source term.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FnSpec {
    Constant { value: f64 },
    /// `xⁱ`
    Coordinate { axis: usize },
    /// `√xⁱ`
    SqrtCoordinate { axis: usize },
}

impl FnSpec {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            FnSpec::Constant { value } => *value,
            FnSpec::Coordinate { axis } => x[*axis],
            FnSpec::SqrtCoordinate { axis } => x[*axis].sqrt(),
        }
    }

    fn axis(&self) -> Option<usize> {
        match self {
            FnSpec::Constant { .. } => None,
            FnSpec::Coordinate { axis } | FnSpec::SqrtCoordinate { axis } => Some(*axis),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HolderRequire {
    #[serde(default = "yes")]
    pub strictly_decreasing: bool,
    #[serde(default)]
    pub alpha_range: Option<[f64; 2]>,
    #[serde(default)]
    pub min_r2: Option<f64>,
}

fn yes() -> bool {
    true
}

impl Default for HolderRequire {
    fn default() -> Self {
        Self {
            strictly_decreasing: true,
            alpha_range: None,
            min_r2: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HolderExp {
    pub sim: SimParams,
    pub scales: Vec<f64>,
    #[serde(default = "five")]
    pub per_axis: usize,
    pub boundary: FnSpec,
    #[serde(default)]
    pub source: f64,
    /// Pairs closer than this in value are ignored by the fit; defaults
    /// to three times the largest standard error of the sweep.
    #[serde(default)]
    pub noise_floor: Option<f64>,
    #[serde(default)]
    pub require: HolderRequire,
}

fn five() -> usize {
    5
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbeSpec {
    Constant { value: f64 },
    Linear { c: Vec<f64> },
    SumOfSquares,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MartingaleExp {
    pub sim: SimParams,
    pub start: Start,
    pub probe: ProbeSpec,
    pub checkpoints: Vec<f64>,
    #[serde(default = "generator")]
    pub source: SourceChoice,
}

fn generator() -> SourceChoice {
    SourceChoice::Generator
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailSpec {
    pub start: Vec<f64>,
    pub level: f64,
    pub t_grid: Vec<f64>,
    pub paths: usize,
    pub eps: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantExpect {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    #[serde(default = "three")]
    pub mean_se_tol: f64,
    #[serde(default = "tenth")]
    pub var_rel_tol: f64,
    #[serde(default)]
    pub max_w1: Option<f64>,
}

fn three() -> f64 {
    3.0
}

fn tenth() -> f64 {
    0.1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantExp {
    pub sim: SimParams,
    pub setup: InvariantSetup,
    #[serde(default)]
    pub tail: Option<TailSpec>,
    #[serde(default)]
    pub expect: Option<InvariantExpect>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RescaleExp {
    pub sim: SimParams,
    pub rho2: f64,
    pub t: f64,
    pub start: Vec<f64>,
}

/// Problems found without simulating. Errors make `run` refuse the
/// config; warnings are printed and ignored.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Diagnostics {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    fn err(&mut self, m: impl Into<String>) {
        self.errors.push(m.into());
    }

    fn try_<T>(&mut self, what: &str, r: sqrtlab_core::Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.err(format!("{what}: {e}"));
                None
            }
        }
    }
}


fn check_sim(d: &mut Diagnostics, sim: &SimParams, field: &dyn CoefficientField, default_horizon: f64) {
    let cfg = sim.config(0, 1, default_horizon);
    d.try_("simulation settings", cfg.validate(field));
}

fn check_start_in(d: &mut Diagnostics, q: &HyperCube, t: f64, x: &[f64]) {
    if x.len() != q.dim() {
        d.err(format!("start {x:?} has dimension {}, hypercube has {}", x.len(), q.dim()));
    } else if !q.contains_x(t, x) {
        d.err(format!("start ({t}, {x:?}) lies outside the hypercube"));
    }
}

fn check_gamma(d: &mut Diagnostics, spec: &GammaSpec, q: &HyperCube) -> Option<GridSet> {
    let g = d.try_("gamma", spec.build(q))?;
    if !g.fits_inside(q) {
        d.err("gamma is not contained in the hypercube");
    }
    Some(g)
}

fn warn_cprime(d: &mut Diagnostics, field: &dyn CoefficientField, q: &HyperCube) {
    if let Ok(r) = check_condition_cprime(field, q.cube(), 32) {
        for f in r.failures {
            d.warnings.push(format!("condition (C') on the hypercube: {f}"));
        }
    }
}

/// Schema-level checks are done by deserialization; this adds every
/// semantic check `run` relies on.
pub fn validate(cfg: &ExperimentConfig, workers: usize) -> Diagnostics {
    let mut d = Diagnostics::default();
    if workers == 0 {
        d.err("worker count must be positive");
    }
    let field = match &cfg.model {
        Some(m) => d.try_("model", m.build()),
        None => None,
    };
    let needs_model = !matches!(cfg.experiment, Experiment::Czd(_));
    if needs_model && cfg.model.is_none() {
        d.err(format!("`{}` needs a model", cfg.experiment.name()));
    }
    let needs_geometry = matches!(
        cfg.experiment,
        Experiment::Hitprob(_) | Experiment::Czd(_) | Experiment::Holder(_) | Experiment::Martingale(_)
    );
    if needs_geometry && cfg.geometry.is_none() {
        d.err(format!("`{}` needs a geometry", cfg.experiment.name()));
    }
    if let (Some(f), Some(q)) = (&field, &cfg.geometry) {
        if f.dim() != q.dim() {
            d.err(format!("model has dimension {}, geometry has {}", f.dim(), q.dim()));
            return d;
        }
    }
    let q = cfg.geometry.as_ref();
    match &cfg.experiment {
        Experiment::Simulate(e) => {
            if let Some(f) = &field {
                let horizon = e.steps as f64 * e.sim.h;
                check_sim(&mut d, &e.sim, f.as_ref(), horizon);
                if e.start.len() != f.dim() || e.start.iter().any(|v| !(*v >= 0.0)) {
                    d.err(format!("start {:?} is not a point of the orthant of dimension {}", e.start, f.dim()));
                }
                if e.steps == 0 {
                    d.err("steps must be positive");
                }
            }
        }
        Experiment::Hitprob(e) => {
            let (Some(f), Some(q)) = (&field, q) else { return d };
            check_sim(&mut d, &e.sim, f.as_ref(), q.time_extent());
            check_gamma(&mut d, &e.gamma, q);
            warn_cprime(&mut d, f.as_ref(), q);
            if e.uniform {
                if let Some(starts) = d.try_("start grid", e.start_list(q)) {
                    for m in uniform_start_diagnostics(q, &starts) {
                        d.err(m);
                    }
                }
            } else {
                match &e.start {
                    Some(s) => check_start_in(&mut d, q, s.t, &s.x),
                    None => d.err("hitprob needs a start unless run with --uniform"),
                }
            }
        }
        Experiment::Smallcube(e) => {
            let Some(f) = &field else { return d };
            if let Some((q, _, _)) = d.try_("small-cube setup", e.setup.check()) {
                if q.dim() != f.dim() {
                    d.err(format!("model has dimension {}, setup has {}", f.dim(), q.dim()));
                }
                let mut sim = e.sim.clone();
                sim.horizon = Some(e.setup.t);
                check_sim(&mut d, &sim, f.as_ref(), e.setup.t);
                warn_cprime(&mut d, f.as_ref(), &q);
            }
        }
        Experiment::Czd(e) => {
            let Some(q) = q else { return d };
            if let Some(g) = check_gamma(&mut d, &e.gamma, q) {
                d.try_("decomposition", cz_decompose(q, &g, e.mu, e.max_level));
            }
            if let Some(mp) = e.mu_prime {
                if !(mp > 0.0 && mp < e.mu) {
                    d.err(format!("mu_prime must lie in (0, mu), got {mp}"));
                }
            }
        }
        Experiment::Holder(e) => {
            let (Some(f), Some(q)) = (&field, q) else { return d };
            check_sim(&mut d, &e.sim, f.as_ref(), q.time_extent());
            if e.scales.len() < 2 || e.scales.iter().any(|r| !(*r > 0.0 && *r <= q.rho())) {
                d.err(format!("need at least two scales in (0, {}]", q.rho()));
            }
            if e.boundary.axis().is_some_and(|a| a >= q.dim()) {
                d.err("boundary data refers to a missing axis");
            }
        }
        Experiment::Martingale(e) => {
            let (Some(f), Some(q)) = (&field, q) else { return d };
            check_sim(&mut d, &e.sim, f.as_ref(), 1.0);
            check_start_in(&mut d, q, e.start.t, &e.start.x);
            if e.checkpoints.is_empty() || e.checkpoints.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
                d.err("checkpoints must be a nonempty list of nonnegative times");
            }
            if let ProbeSpec::Linear { c } = &e.probe {
                if c.len() != q.dim() {
                    d.err("linear probe has the wrong dimension");
                }
            }
        }
        Experiment::Invariant(e) => {
            let Some(f) = &field else { return d };
            let s = &e.setup;
            check_sim(&mut d, &e.sim, f.as_ref(), s.horizon.max(e.sim.h));
            if !(s.horizon > 0.0) {
                d.err(format!("horizon must be positive, got {}", s.horizon));
            }
            if !(s.burn_in >= 0.0) || !(s.thinning > 0.0) || s.thinning > s.horizon {
                d.err("need burn-in ≥ 0 and 0 < thinning ≤ horizon");
            }
            if s.starts.is_empty() || s.paths_per_start == 0 {
                d.err("need at least one start and one path per start");
            }
            if s.starts.iter().any(|x| x.len() != f.dim() || x.iter().any(|v| !(*v >= 0.0))) {
                d.err("every start must be a point of the orthant of the model's dimension");
            } else if s.horizon > 0.0 && s.thinning > 0.0 {
                let n_obs = (s.horizon / s.thinning + 1e-9).floor() as usize + 1;
                if n_obs < 2 * s.batches || s.batches < 2 {
                    d.err(format!("{n_obs} observations per path cannot form {} batches", s.batches));
                }
            }
            let grid = inv_sample_grid(f.dim(), inv_grid_reach(&s.starts), 8);
            if let Some(r) = d.try_("invariant-measure conditions", check_inv_conditions(f.as_ref(), &grid)) {
                for fail in r.failures {
                    d.err(format!("invariant-measure condition: {fail}"));
                }
            }
            if let Some(t) = &e.tail {
                if t.start.len() != f.dim() || t.start.iter().any(|v| !(*v >= 0.0)) {
                    d.err("tail start must be a point of the orthant");
                }
                if !(t.level > 0.0) || t.paths == 0 {
                    d.err("tail level and path count must be positive");
                }
                if t.t_grid.is_empty() || t.t_grid.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    d.err("tail time grid must be a nonempty list of nonnegative times");
                }
            }
            if let Some(x) = &e.expect {
                if x.mean.len() != f.dim() || x.variance.len() != f.dim() {
                    d.err("expected moments must have one entry per coordinate");
                }
            }
        }
        Experiment::RescaleCheck(e) => {
            let Some(f) = &field else { return d };
            check_sim(&mut d, &e.sim, f.as_ref(), e.t);
            if !f.is_constant() {
                d.err("rescale-check needs a constant-coefficient model");
            }
            if !(e.rho2 > 0.0) || !(e.t >= 0.0) {
                d.err("rho2 must be positive and t nonnegative");
            }
            if e.start.len() != f.dim() || e.start.iter().any(|v| !(*v >= 0.0)) {
                d.err("start must be a point of the orthant");
            }
        }
    }
    d
}

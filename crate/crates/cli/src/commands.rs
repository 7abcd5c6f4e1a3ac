//! Experiment dispatch and result emission.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use serde_json::{json, Value};

use sqrtlab_core::coeffs::{CoefficientField, SmoothProbe};
use sqrtlab_core::czdecomp::{cz_decompose, default_eta, dichotomy, verify_a, verify_b};
use sqrtlab_core::estimators::{
    all_pairs, est_hit_prob, est_invariant, est_osc_decay, est_small_cube, est_uniform_hit, eval_grid, feynman_kac_eval,
    fit_holder, martingale_check, tail_check, HolderSample,
};
use sqrtlab_core::geometry::HyperCube;
use sqrtlab_core::report::{point_cell, write_csv, Envelope};
use sqrtlab_core::rng::derive_seed;
use sqrtlab_core::sde::{rescaled_pair, sidecar_path, simulate_trajectories};
use sqrtlab_core::stats::{ks_critical_95, ks_two_sample};

use crate::config::*;

/// A CSV table; `plot` tables are the two-column x/y files.
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

pub struct Outcome {
    pub pass: bool,
    pub result: Value,
    pub tables: Vec<Table>,
}

fn outcome(pass: bool, result: impl Serialize, tables: Vec<Table>) -> anyhow::Result<Outcome> {
    Ok(Outcome {
        pass,
        result: serde_json::to_value(result)?,
        tables,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

pub fn parse_formats(list: &[String]) -> anyhow::Result<Vec<Format>> {
    let mut out = vec![Format::Json];
    for f in list {
        match f.trim() {
            "json" => {}
            "csv" => out.push(Format::Csv),
            other => bail!("unknown output format `{other}` (expected json or csv)"),
        }
    }
    Ok(out)
}

fn field_of(cfg: &ExperimentConfig) -> anyhow::Result<Box<dyn CoefficientField>> {
    let m = cfg.model.as_ref().context("experiment needs a model")?;
    Ok(m.build()?)
}

fn geometry_of(cfg: &ExperimentConfig) -> anyhow::Result<&HyperCube> {
    cfg.geometry.as_ref().context("experiment needs a geometry")
}

fn cell(v: f64) -> String {
    v.to_string()
}

/// Runs an already validated experiment. `out` receives side files such
/// as trajectory dumps.
pub fn execute(cfg: &ExperimentConfig, workers: usize, out: &Path, csv: bool) -> anyhow::Result<Outcome> {
    let seed = cfg.seed;
    match &cfg.experiment {
        Experiment::Simulate(e) => {
            let field = field_of(cfg)?;
            let sim = e.sim.config(seed, workers, e.steps as f64 * e.sim.h);
            let tr = simulate_trajectories(&sim, field.as_ref(), &e.start, e.steps)?;
            let bin = out.join("trajectories.bin");
            tr.write_binary(&bin)?;
            if csv {
                tr.write_csv(&out.join("trajectories.csv"))?;
            }
            let n = tr.paths.len() as f64;
            let final_mean: Vec<f64> = (0..tr.dim)
                .map(|i| tr.paths.iter().map(|p| p[tr.steps][i]).sum::<f64>() / n)
                .collect();
            let result = json!({
                "dim": tr.dim,
                "h": tr.h,
                "steps": tr.steps,
                "paths": tr.paths.len(),
                "binary": "trajectories.bin",
                "sidecar": sidecar_path(Path::new("trajectories.bin")),
                "final_mean": final_mean,
            });
            outcome(true, result, Vec::new())
        }
        Experiment::Hitprob(e) => {
            let field = field_of(cfg)?;
            let q = geometry_of(cfg)?;
            let gamma = e.gamma.build(q)?;
            let sim = e.sim.config(seed, workers, q.time_extent());
            if e.uniform {
                let starts = e.start_list(q)?;
                let r = est_uniform_hit(&sim, field.as_ref(), q, &gamma, &starts)?;
                let pass = r.min_ci_low > e.threshold.unwrap_or(0.0);
                let mut table = Table::new("hitprob", &["start", "estimate", "ci_low", "ci_high"]);
                let mut plot = Table::new("hitprob_plot", &["x", "y"]);
                for (j, s) in r.per_start.iter().enumerate() {
                    table.push(vec![
                        point_cell(&s.start),
                        cell(s.report.estimate),
                        cell(s.report.ci_low),
                        cell(s.report.ci_high),
                    ]);
                    plot.push(vec![j.to_string(), cell(s.report.estimate)]);
                }
                outcome(pass, &r, vec![table, plot])
            } else {
                let s = e.start.as_ref().context("hitprob needs a start")?;
                let r = est_hit_prob(&sim, field.as_ref(), q, &gamma, (s.t, &s.x))?;
                let pass = e.threshold.is_none_or(|th| r.ci_low > th);
                let mut table = Table::new("hitprob", &["start", "estimate", "ci_low", "ci_high"]);
                table.push(vec![point_cell(&s.x), cell(r.estimate), cell(r.ci_low), cell(r.ci_high)]);
                outcome(pass, &r, vec![table])
            }
        }
        Experiment::Smallcube(e) => {
            let field = field_of(cfg)?;
            let sim = e.sim.config(seed, workers, e.setup.t);
            let r = est_small_cube(&sim, field.as_ref(), &e.setup)?;
            let pass = r.report.ci_low > e.threshold.unwrap_or(0.0);
            outcome(pass, &r, Vec::new())
        }
        Experiment::Czd(e) => {
            let q = geometry_of(cfg)?;
            let gamma = e.gamma.build(q)?;
            let dec = cz_decompose(q, &gamma, e.mu, e.max_level)?;
            let eta = default_eta(e.mu);
            // (a) only speaks about sparse Γ
            let a = if dec.measures.gamma <= e.mu * dec.measures.q {
                Some(verify_a(&gamma, q, e.mu)?)
            } else {
                None
            };
            let b = verify_b(&dec.stopped_cubes(), q, eta, gamma.resolution().1)?;
            let c = match e.mu_prime {
                Some(mp) if dec.measures.gamma >= mp * dec.measures.q => Some(dichotomy(&gamma, q, mp, e.mu)?),
                _ => None,
            };
            let pass = a.as_ref().is_none_or(|a| a.holds)
                && b.holds
                && c.as_ref().is_none_or(|c| c.branch != sqrtlab_core::czdecomp::Branch::Neither);
            let mut table = Table::new("czd", &["level", "t0", "theta", "centers_sqrt", "rho", "occupancy"]);
            for s in &dec.stopped {
                table.push(vec![
                    s.level.to_string(),
                    cell(s.cube.t0()),
                    cell(s.cube.theta()),
                    point_cell(s.cube.cube().center().coords()),
                    cell(s.cube.rho()),
                    cell(s.occupancy),
                ]);
            }
            let result = json!({
                "eta": eta,
                "decomposition": dec,
                "verify_a": a,
                "verify_b": b,
                "dichotomy": c,
            });
            outcome(pass, result, vec![table])
        }
        Experiment::Holder(e) => {
            let field = field_of(cfg)?;
            let q = geometry_of(cfg)?;
            let sim = e.sim.config(seed, workers, q.time_extent());
            let boundary = e.boundary.clone();
            let g = move |_: f64, x: &[f64]| boundary.eval(x);
            let source = e.source;
            let f = move |_: f64, _: &[f64]| source;
            let osc = est_osc_decay(&sim, field.as_ref(), q, &e.scales, &g, &f, e.per_axis)?;

            let sweep_seed = derive_seed(seed, 1);
            let mut samples = Vec::new();
            let mut max_se: f64 = 0.0;
            for (j, (t, x)) in eval_grid(q, e.per_axis).into_iter().enumerate() {
                let u = if q.contains_x(t, &x) {
                    let c = sim.clone().with_seed(derive_seed(sweep_seed, j as u64));
                    let r = feynman_kac_eval(&c, field.as_ref(), q, &g, &f, (t, &x))?;
                    max_se = max_se.max(r.std_error);
                    r.estimate
                } else {
                    g(t, &x)
                };
                samples.push(HolderSample { t, x, u });
            }
            let floor = e.noise_floor.unwrap_or(3.0 * max_se);
            let fit = fit_holder(&all_pairs(&samples), floor);
            let (fit, fit_error) = match fit {
                Ok(f) => (Some(f), None),
                Err(err) => (None, Some(err.to_string())),
            };

            let req = &e.require;
            let pass = !osc.inconclusive
                && (!req.strictly_decreasing || osc.strictly_decreasing)
                && req.alpha_range.is_none_or(|[lo, hi]| osc.alpha_hat > lo && osc.alpha_hat < hi)
                && req.min_r2.is_none_or(|m| osc.r2 > m);

            let mut table = Table::new("holder", &["scale", "osc", "osc_se"]);
            let mut plot = Table::new("holder_plot", &["x", "y"]);
            for i in 0..osc.scales.len() {
                table.push(vec![cell(osc.scales[i]), cell(osc.osc[i]), cell(osc.osc_se[i])]);
                plot.push(vec![cell(osc.scales[i]), cell(osc.osc[i])]);
            }
            let result = json!({
                "oscillation": osc,
                "fit": fit,
                "fit_error": fit_error,
                "noise_floor": floor,
                "samples": samples,
            });
            outcome(pass, result, vec![table, plot])
        }
        Experiment::Martingale(e) => {
            let field = field_of(cfg)?;
            let q = geometry_of(cfg)?;
            let probe = match &e.probe {
                ProbeSpec::Constant { value } => SmoothProbe::constant(*value),
                ProbeSpec::Linear { c } => SmoothProbe::linear(c.clone()),
                ProbeSpec::SumOfSquares => SmoothProbe::sum_of_squares(),
            };
            let sim = e.sim.config(seed, workers, e.checkpoints.iter().cloned().fold(0.0, f64::max));
            let r = martingale_check(&sim, field.as_ref(), &probe, q, (e.start.t, &e.start.x), &e.checkpoints, e.source)?;
            let mut table = Table::new("martingale", &["s", "mean", "deviation", "std_error", "z"]);
            for row in &r.rows {
                table.push(vec![cell(row.s), cell(row.mean), cell(row.deviation), cell(row.std_error), cell(row.z)]);
            }
            outcome(r.pass, &r, vec![table])
        }
        Experiment::Invariant(e) => {
            let field = field_of(cfg)?;
            let sim = e.sim.config(seed, workers, e.setup.horizon);
            let inv = est_invariant(&sim, field.as_ref(), &e.setup, None)?;
            let mut pass = true;
            let mut checks = Vec::new();
            if let Some(x) = &e.expect {
                for (k, s) in inv.per_start.iter().enumerate() {
                    for (i, a) in s.axes.iter().enumerate() {
                        let mean_ok = (a.mean - x.mean[i]).abs() <= x.mean_se_tol * a.mean_se;
                        let var_ok = (a.variance - x.variance[i]).abs() <= x.var_rel_tol * x.variance[i].abs();
                        pass &= mean_ok && var_ok;
                        checks.push(json!({"start": k, "axis": i, "mean_ok": mean_ok, "variance_ok": var_ok}));
                    }
                }
                if let Some(m) = x.max_w1 {
                    let ok = inv.distance_w1.iter().all(|(_, _, w)| *w < m);
                    pass &= ok;
                    checks.push(json!({"max_w1": m, "ok": ok}));
                }
            }
            let tail = match &e.tail {
                Some(t) => {
                    let horizon = t.t_grid.iter().cloned().fold(e.sim.h, f64::max);
                    let mut tcfg = e.sim.clone();
                    tcfg.paths = t.paths;
                    let tcfg = tcfg.config(derive_seed(seed, 1), workers, horizon);
                    let r = tail_check(&tcfg, field.as_ref(), &t.start, t.level, &t.t_grid, t.eps)?;
                    pass &= r.pass;
                    Some(r)
                }
                None => None,
            };
            let mut table = Table::new("invariant", &["start", "axis", "mean", "mean_se", "variance"]);
            for s in &inv.per_start {
                for (i, a) in s.axes.iter().enumerate() {
                    table.push(vec![point_cell(&s.start), i.to_string(), cell(a.mean), cell(a.mean_se), cell(a.variance)]);
                }
            }
            let mut tables = vec![table];
            if let Some(r) = &tail {
                let mut t = Table::new("tail", &["t", "p_hat", "std_error", "ci_low", "ci_high"]);
                for row in &r.rows {
                    t.push(vec![cell(row.t), cell(row.p_hat), cell(row.std_error), cell(row.ci_low), cell(row.ci_high)]);
                }
                tables.push(t);
            }
            let result = json!({"invariant": inv, "checks": checks, "tail": tail});
            outcome(pass, result, tables)
        }
        Experiment::RescaleCheck(e) => {
            let field = field_of(cfg)?;
            let sim = e.sim.config(seed, workers, e.t);
            let (a, b) = rescaled_pair(&sim, field.as_ref(), e.rho2, e.t, &e.start)?;
            let critical = ks_critical_95(a.len(), b.len());
            let ks: Vec<f64> = (0..field.dim())
                .map(|i| {
                    let xa: Vec<f64> = a.iter().map(|x| x[i]).collect();
                    let xb: Vec<f64> = b.iter().map(|x| x[i]).collect();
                    ks_two_sample(&xa, &xb)
                })
                .collect();
            let pass = ks.iter().all(|k| *k < critical);
            let result = json!({"ks": ks, "critical": critical, "n": a.len(), "rho2": e.rho2, "t": e.t});
            outcome(pass, result, Vec::new())
        }
    }
}

/// Writes `<out>/<command>.json` and, for CSV output, every table.
/// Returns the JSON path.
pub fn emit(
    command: &str,
    effective: &Value,
    seed: u64,
    outcome: &Outcome,
    out: &Path,
    formats: &[Format],
) -> anyhow::Result<PathBuf> {
    let env = Envelope::new(command, effective, seed, outcome.pass, &outcome.result).stamped();
    let path = out.join(format!("{command}.json"));
    std::fs::write(&path, env.to_json()? + "\n").with_context(|| format!("writing {}", path.display()))?;
    if formats.contains(&Format::Csv) {
        for t in &outcome.tables {
            let p = out.join(format!("{}.csv", t.name));
            let header: Vec<&str> = t.header.iter().map(String::as_str).collect();
            write_csv(&p, &header, &t.rows).with_context(|| format!("writing {}", p.display()))?;
        }
    }
    Ok(path)
}

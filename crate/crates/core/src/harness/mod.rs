//! Scenario files, orchestration of the checks and report persistence.
//!
//! [`run_scenario`] simulates the ensemble once when a requested check needs
//! it, runs every requested check in a fixed order and writes CSV artifacts
//! plus `report.json` into the output directory. Checks that were not
//! requested or do not apply are reported as skipped with a reason.

mod scenario;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use scenario::{CheckKind, GridSpec, MartingaleSettings, MonteCarlo, Scenario, Tolerances, MIN_PATHS, SCHEMA};

use crate::coefficients::{classify_by_quadrature, classify_zero, recurrence_trend, regularity_of, IhVerdict, ZeroClassification, ZeroSet};
use crate::error::{Error, Result};
use crate::fokkerplanck::{
    euler_maruyama_marginals_with, first_horizon, fp_residual, mass_surrogate, path_spec, simulate_marginals_with, spacetime_martingale_residual,
    time_changed_path, uniqueness_crosscheck_at, MarginalEnsemble, SimulationOptions,
};
use crate::generators::{martingale_expression, mean_and_se, refine_grid, MartingaleStat, TestFunction};
use crate::io::{csv_writer, format_f64};
use crate::parallel::ordered_map;
use crate::paths::{sample_path_with, PathKind, ProcessSpec, RcllPath};
use crate::rng::{path_rng, Domain};
use crate::timechange::{apply_time_change, build_time_change_with, fixed_point_residual_with, StateMetric, FIXED_POINT_WINDOW};

pub const REPORT_SCHEMA: &str = "tclab.report/1";

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
    Skipped { reason: String },
}

impl Verdict {
    fn from_pass(pass: bool) -> Self {
        if pass {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn is_fail(&self) -> bool {
        matches!(self, Verdict::Fail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub verdict: Verdict,
    /// Files written by the check, relative to the output directory.
    pub artifacts: Vec<String>,
    pub details: Value,
}

impl CheckOutcome {
    fn skipped(reason: impl Into<String>) -> Self {
        Self { verdict: Verdict::Skipped { reason: reason.into() }, artifacts: Vec::new(), details: Value::Null }
    }
}

/// Consolidated result of a scenario run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub version: String,
    pub scenario: Value,
    /// `sha256` of `"blob <len>\0"` followed by the canonical JSON scenario.
    pub scenario_hash: String,
    pub seed: u64,
    /// Artifacts shared by several checks.
    pub artifacts: Vec<String>,
    pub checks: BTreeMap<String, CheckOutcome>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    /// 0 when no check failed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        i32::from(self.checks.values().any(|c| c.verdict.is_fail()))
    }

    /// Pretty JSON with sorted keys.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::to_value(self)?)?)
    }

    /// The report without its timings, for comparing runs.
    pub fn without_timings(&self) -> Self {
        Self { timings: BTreeMap::new(), ..self.clone() }
    }
}

/// Git-style content hash: `sha256("blob <len>\0" + bytes)` in hex.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Canonical JSON echo of a scenario and its content hash.
pub fn scenario_echo(scenario: &Scenario) -> Result<(Value, String)> {
    let value = serde_json::to_value(scenario)?;
    let canonical = serde_json::to_string(&value)?;
    let hash = content_hash(canonical.as_bytes());
    Ok((value, hash))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads: 0 for the default pool.
    pub workers: usize,
    /// Ensemble CSV to check instead of a simulated one (`fp` only).
    pub external_ensemble: Option<PathBuf>,
    /// Simulate and export the ensemble even when no check needs it.
    pub always_simulate: bool,
}

pub fn run_scenario(scenario: &Scenario, output_dir: &Path) -> Result<RunReport> {
    run_scenario_with(scenario, output_dir, &RunOptions::default())
}

/// Runs the requested checks of `scenario` and writes artifacts and
/// `report.json` into `output_dir`.
pub fn run_scenario_with(scenario: &Scenario, output_dir: &Path, options: &RunOptions) -> Result<RunReport> {
    scenario.validate()?;
    fs::create_dir_all(output_dir)?;
    let total = Instant::now();
    let mut run = Run { sc: scenario, out: output_dir, options, timings: BTreeMap::new(), sim: None, shared_artifacts: Vec::new() };
    let requested = scenario.requested();
    let external = match &options.external_ensemble {
        Some(path) => Some(MarginalEnsemble::read_csv(File::open(path)?)?),
        None => None,
    };
    let needs_sim = requested.iter().any(|c| c.needs_ensemble() && !(*c == CheckKind::Fp && external.is_some()));
    if needs_sim || options.always_simulate {
        run.simulate()?;
    }
    let mut checks = BTreeMap::new();
    for kind in CheckKind::ALL {
        let outcome = if requested.contains(&kind) {
            let start = Instant::now();
            let outcome = match kind {
                CheckKind::Classify => run.classify()?,
                CheckKind::Regularity => run.regularity()?,
                CheckKind::Fp => run.fp(external.as_ref())?,
                CheckKind::Martingale => run.martingale()?,
                CheckKind::Spacetime => run.spacetime()?,
                CheckKind::Pathwise => run.pathwise()?,
                CheckKind::Uniqueness => run.uniqueness()?,
            };
            run.timings.insert(kind.name().to_string(), start.elapsed().as_secs_f64());
            outcome
        } else {
            CheckOutcome::skipped("not requested")
        };
        checks.insert(kind.name().to_string(), outcome);
    }
    run.timings.insert("total".into(), total.elapsed().as_secs_f64());
    let (echo, hash) = scenario_echo(scenario)?;
    let report = RunReport {
        schema: REPORT_SCHEMA.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        scenario: echo,
        scenario_hash: hash,
        seed: scenario.monte_carlo.master_seed,
        artifacts: run.shared_artifacts,
        checks,
        timings: run.timings,
    };
    fs::write(output_dir.join("report.json"), report.to_json()? + "\n")?;
    Ok(report)
}

/// Simulated ensemble on the sub-grid and its restriction to the report grid.
struct Simulation {
    fine: MarginalEnsemble,
    coarse: MarginalEnsemble,
}

struct Run<'a> {
    sc: &'a Scenario,
    out: &'a Path,
    options: &'a RunOptions,
    timings: BTreeMap<String, f64>,
    sim: Option<Simulation>,
    shared_artifacts: Vec<String>,
}

fn opt(x: Option<f64>) -> String {
    x.map(format_f64).unwrap_or_default()
}

fn stats_pass(s: &MartingaleStat, sigmas: f64) -> bool {
    s.mean.abs() <= sigmas * s.standard_error
}

fn stats_json(stats: &[MartingaleStat], sigmas: f64) -> Value {
    let worst = stats
        .iter()
        .filter(|s| s.standard_error > 0.0)
        .map(|s| s.mean.abs() / s.standard_error)
        .fold(0.0, f64::max);
    json!({
        "times": stats.len(),
        "failures": stats.iter().filter(|s| !stats_pass(s, sigmas)).count(),
        "max_abs_mean": stats.iter().map(|s| s.mean.abs()).fold(0.0, f64::max),
        "max_mean_over_se": worst,
    })
}

impl Run<'_> {
    fn sim_options(&self) -> SimulationOptions {
        let tol = &self.sc.tolerances;
        SimulationOptions {
            workers: self.options.workers,
            initial_law: self.sc.monte_carlo.initial_law.clone(),
            timechange: tol.timechange_options(),
            max_retries: tol.max_retries,
        }
    }

    fn factor(&self) -> usize {
        self.sc.tolerances.subgrid_factor
    }

    fn coarse_indices(&self) -> Vec<usize> {
        (0..self.sc.grid.points).map(|j| j * self.factor()).collect()
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn metric(&self) -> StateMetric {
        match self.sc.process {
            ProcessSpec::Ctmc { .. } => StateMetric::Discrete,
            _ => StateMetric::Euclidean,
        }
    }

    fn simulate(&mut self) -> Result<()> {
        let start = Instant::now();
        let sc = self.sc;
        let mc = &sc.monte_carlo;
        let fine_grid = sc.fine_grid(self.factor());
        let opts = self.sim_options();
        let fine = simulate_marginals_with(&sc.process, &sc.coefficient, mc.n, &fine_grid, mc.mesh, mc.master_seed, &opts)?;
        let coarse = fine.select_times(&self.coarse_indices())?;
        coarse.write_csv(self.create("ensemble.csv")?)?;

        let law = mc.initial_law.as_deref();
        let spec0 = path_spec(&sc.process, law, mc.master_seed, 0)?;
        let horizon = first_horizon(&sc.process, law, &sc.coefficient, sc.grid_end(), mc.mesh);
        let (base, tc, _) = time_changed_path(&spec0, &sc.coefficient, &fine_grid, mc.mesh, mc.master_seed, 0, horizon, &opts)?;
        base.write_csv(self.create("base_path_0.csv")?)?;
        tc.write_csv(self.create("timechange_0.csv")?)?;
        self.shared_artifacts = vec!["ensemble.csv".into(), "base_path_0.csv".into(), "timechange_0.csv".into()];
        self.sim = Some(Simulation { fine, coarse });
        self.timings.insert("simulate".into(), start.elapsed().as_secs_f64());
        Ok(())
    }

    fn sim(&self) -> Result<&Simulation> {
        self.sim.as_ref().ok_or_else(|| Error::InvalidArgument("ensemble was not simulated".into()))
    }

    /// Zeros of `H` worth classifying: all declared points, or the three
    /// periodic zeros nearest `x0`.
    fn zeros(&self) -> std::result::Result<Vec<f64>, &'static str> {
        match self.sc.coefficient.zero_set() {
            ZeroSet::Empty => Err("H has no zeros"),
            ZeroSet::Everywhere => Err("H vanishes identically"),
            ZeroSet::Points(zs) => Ok(zs.iter().map(|z| z.point).collect()),
            ZeroSet::Periodic { phase, period, .. } => {
                let k = ((self.sc.process.x0() - phase) / period).round();
                Ok((-1..=1).map(|d| phase + (k + f64::from(d)) * period).collect())
            }
        }
    }

    fn classifications(&self) -> Result<Vec<(ZeroClassification, ZeroClassification)>> {
        let tol = &self.sc.tolerances;
        let quad = tol.quadrature();
        let model = &self.sc.coefficient;
        self.zeros()
            .unwrap_or_default()
            .into_iter()
            .map(|z| {
                let declared = classify_zero(model, z, tol.classify_epsilon, &quad)?;
                let numeric = classify_by_quadrature(|x| model.h(x), z, tol.classify_epsilon, &quad)?;
                Ok((declared, numeric))
            })
            .collect()
    }

    fn classify(&self) -> Result<CheckOutcome> {
        if let Err(reason) = self.zeros() {
            return Ok(CheckOutcome::skipped(reason));
        }
        let rows = self.classifications()?;
        let mut w = csv_writer(self.create("classify.csv")?);
        w.write_record(["point", "declared", "quadrature"])?;
        let name = |v: IhVerdict| serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        let mut disagree = false;
        let mut inconclusive = false;
        for (d, q) in &rows {
            w.write_record([format_f64(d.point), name(d.verdict), name(q.verdict)])?;
            let conclusive = d.verdict != IhVerdict::Inconclusive && q.verdict != IhVerdict::Inconclusive;
            disagree |= conclusive && d.verdict != q.verdict;
            inconclusive |= !conclusive;
        }
        w.flush()?;
        let verdict = if disagree {
            Verdict::Fail
        } else if inconclusive {
            Verdict::Inconclusive
        } else {
            Verdict::Pass
        };
        let regular = rows.iter().all(|(d, _)| d.verdict == IhVerdict::InIH);
        let details = json!({
            "zeros": rows.iter().map(|(d, q)| json!({"declared": d, "quadrature": q})).collect::<Vec<_>>(),
            "regular_expected": regular,
        });
        Ok(CheckOutcome { verdict, artifacts: vec!["classify.csv".into()], details })
    }

    /// Base path `i` at the Monte Carlo mesh and, for diffusions, the same
    /// path at the refined mesh it was decimated from.
    fn refined_base(&self, spec_i: &ProcessSpec, i: usize, horizon: f64) -> Result<(RcllPath, RcllPath)> {
        let mc = &self.sc.monte_carlo;
        let rf = self.sc.tolerances.refinement_factor;
        let mut rng = path_rng(mc.master_seed, Domain::BasePath, i as u64);
        if spec_i.kind() == PathKind::MeshSampled {
            let fine = sample_path_with(spec_i, horizon, mc.mesh / rf as f64, &mut rng)?;
            Ok((fine.decimate(rf)?, fine))
        } else {
            let path = sample_path_with(spec_i, horizon, mc.mesh.min(horizon), &mut rng)?;
            Ok((path.clone(), path))
        }
    }

    fn regularity(&self) -> Result<CheckOutcome> {
        let sc = self.sc;
        let tol = &sc.tolerances;
        let mc = &sc.monte_carlo;
        let model = &sc.coefficient;
        let horizon = sc.grid_end().max(mc.mesh);
        let law = mc.initial_law.as_deref();
        let rows = ordered_map(tol.regularity_paths, self.options.workers, |i| -> Result<_> {
            let spec_i = path_spec(&sc.process, law, mc.master_seed, i)?;
            let (coarse, fine) = self.refined_base(&spec_i, i, horizon)?;
            let trend = recurrence_trend(std::slice::from_ref(&coarse), 1.0, &[horizon / 4.0, horizon / 2.0, horizon])?;
            Ok((regularity_of(model, &coarse, tol.divergence_threshold), regularity_of(model, &fine, tol.divergence_threshold), trend))
        })?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let mut w = csv_writer(self.create("regularity.csv")?);
        w.write_record(["path_id", "rho0", "rho", "consistent", "rho0_refined", "rho_refined", "consistent_refined"])?;
        for (i, (c, f, _)) in rows.iter().enumerate() {
            w.write_record([
                i.to_string(),
                opt(c.rho0),
                opt(c.rho),
                u8::from(c.consistent).to_string(),
                opt(f.rho0),
                opt(f.rho),
                u8::from(f.consistent).to_string(),
            ])?;
        }
        w.flush()?;

        let n = rows.len();
        let consistent = rows.iter().filter(|(c, _, _)| c.consistent).count();
        let crossing = rows.iter().filter(|(c, _, _)| c.rho0.is_some()).count();
        let flagged = rows.iter().filter(|(c, f, _)| c.rho0.is_some() && !c.consistent && !f.consistent).count();
        let regular = self.classifications()?.iter().all(|(d, _)| d.verdict == IhVerdict::InIH);
        let trend: Vec<f64> = (0..3).map(|k| rows.iter().map(|r| r.2[k]).sum::<f64>() / n as f64).collect();
        let consistent_fraction = consistent as f64 / n as f64;
        let flagged_fraction = if crossing == 0 { f64::NAN } else { flagged as f64 / crossing as f64 };
        let verdict = if regular {
            Verdict::from_pass(consistent_fraction >= tol.regularity_min_consistent)
        } else if crossing == 0 {
            Verdict::Inconclusive
        } else {
            Verdict::from_pass(flagged_fraction >= tol.regularity_min_flagged)
        };
        let details = json!({
            "expectation": if regular { "regular" } else { "non_regular" },
            "paths": n,
            "consistent": consistent,
            "consistent_fraction": consistent_fraction,
            "crossing": crossing,
            "flagged_under_refinement": flagged,
            "flagged_fraction": flagged_fraction,
            "recurrence_trend": {
                "radius": 1.0,
                "horizons": [horizon / 4.0, horizon / 2.0, horizon],
                "mean_occupation": trend,
            },
        });
        Ok(CheckOutcome { verdict, artifacts: vec!["regularity.csv".into()], details })
    }

    fn fp(&self, external: Option<&MarginalEnsemble>) -> Result<CheckOutcome> {
        let sc = self.sc;
        let ens = match external {
            Some(e) => e,
            None => &self.sim()?.coarse,
        };
        let dictionary = sc.dictionary();
        let report = fp_residual(ens, &sc.process, &sc.coefficient, &dictionary)?;

        let mut w = csv_writer(self.create("fp_residual.csv")?);
        w.write_record(["function", "t", "lhs", "rhs", "residual", "mc_standard_error", "quadrature_bound", "pass"])?;
        for e in &report.entries {
            w.write_record([
                e.function.to_string(),
                format_f64(e.t),
                format_f64(e.lhs),
                format_f64(e.rhs),
                format_f64(e.residual),
                format_f64(e.mc_standard_error),
                format_f64(e.quadrature_bound),
                u8::from(e.pass).to_string(),
            ])?;
        }
        w.flush()?;
        let (echo, hash) = scenario_echo(sc)?;
        let full = json!({ "entries": report.entries, "scenario": echo, "scenario_hash": hash });
        fs::write(self.out.join("fp_residual.json"), serde_json::to_string_pretty(&full)? + "\n")?;

        let x0 = sc.process.x0();
        let reach = ens.paths().flatten().map(|x| (x - x0).abs()).fold(0.0, f64::max);
        let wide = TestFunction::bump(x0, 1.5 * reach + 1.0);
        let peak = wide.value(x0);
        let mass: Vec<f64> = mass_surrogate(ens, &wide).into_iter().map(|m| m / peak).collect();
        let details = json!({
            "entries": report.entries.len(),
            "failures": report.failures(),
            "max_abs_residual": report.entries.iter().map(|e| e.residual.abs()).fold(0.0, f64::max),
            "provenance": ens.provenance,
            "mass_surrogate": mass,
        });
        Ok(CheckOutcome {
            verdict: Verdict::from_pass(report.all_pass()),
            artifacts: vec!["fp_residual.csv".into(), "fp_residual.json".into()],
            details,
        })
    }

    fn martingale(&self) -> Result<CheckOutcome> {
        let sc = self.sc;
        let mc = &sc.monte_carlo;
        let sim = self.sim()?;
        let f = &sc.martingale.function;
        let sigmas = sc.tolerances.martingale_sigmas;
        let tgrid = sc.tgrid();
        let end = sc.grid_end();
        let law = mc.initial_law.as_deref();

        let (nodes, at_grid) = refine_grid(&tgrid, self.factor())?;
        let base_rows = ordered_map(mc.n, self.options.workers, |i| -> Result<Vec<f64>> {
            let spec_i = path_spec(&sc.process, law, mc.master_seed, i)?;
            let mut rng = path_rng(mc.master_seed, Domain::BasePath, i as u64);
            let base = sample_path_with(&spec_i, end.max(mc.mesh), mc.mesh.min(end), &mut rng)?;
            martingale_expression(&base, &sc.process, f, None, &nodes, &at_grid)
        })?;
        let homogeneous = column_stats(&tgrid, base_rows)?;

        let fine_grid = sim.fine.tgrid().to_vec();
        let fine_index: Vec<usize> = (0..fine_grid.len()).collect();
        let coarse = self.coarse_indices();
        let x_rows = ordered_map(sim.fine.n(), self.options.workers, |i| -> Result<Vec<f64>> {
            let x = RcllPath::new(fine_grid.clone(), sim.fine.path(i).to_vec(), end, PathKind::MeshSampled)?;
            let all = martingale_expression(&x, &sc.process, f, Some(&sc.coefficient), &fine_grid, &fine_index)?;
            Ok(coarse.iter().map(|&j| all[j]).collect())
        })?;
        let inhomogeneous = column_stats(&tgrid, x_rows)?;

        let mut w = csv_writer(self.create("martingale.csv")?);
        w.write_record(["kind", "t", "mean", "standard_error", "pass"])?;
        for (kind, stats) in [("homogeneous", &homogeneous), ("inhomogeneous", &inhomogeneous)] {
            for s in stats.iter() {
                w.write_record([kind.to_string(), format_f64(s.t), format_f64(s.mean), format_f64(s.standard_error), u8::from(stats_pass(s, sigmas)).to_string()])?;
            }
        }
        w.flush()?;
        let pass = homogeneous.iter().chain(&inhomogeneous).all(|s| stats_pass(s, sigmas));
        let details = json!({
            "homogeneous": stats_json(&homogeneous, sigmas),
            "inhomogeneous": stats_json(&inhomogeneous, sigmas),
        });
        Ok(CheckOutcome { verdict: Verdict::from_pass(pass), artifacts: vec!["martingale.csv".into()], details })
    }

    fn spacetime(&self) -> Result<CheckOutcome> {
        let sc = self.sc;
        let mc = &sc.monte_carlo;
        let sim = self.sim()?;
        let sigmas = sc.tolerances.martingale_sigmas;
        let ms = &sc.martingale;
        let coarse = self.coarse_indices();
        let fine_grid = sim.fine.tgrid().to_vec();
        let t0 = sc.coefficient.t0;

        let mut w = csv_writer(self.create("spacetime.csv")?);
        w.write_record(["s0", "t", "mean", "standard_error", "pass"])?;
        let mut pass = true;
        let mut per_start = Vec::new();
        for s0 in sc.spacetime_starts() {
            let shifted_ens;
            let ens = if s0 == 0.0 {
                &sim.fine
            } else {
                let shifted = sc.coefficient.shifted(s0);
                shifted_ens = simulate_marginals_with(&sc.process, &shifted, mc.n, &fine_grid, mc.mesh, mc.master_seed, &self.sim_options())?;
                &shifted_ens
            };
            let all = spacetime_martingale_residual(ens, s0, &sc.process, &sc.coefficient, &ms.function, &ms.cutoff)?;
            let stats: Vec<MartingaleStat> = coarse.iter().map(|&j| all[j]).collect();
            let exact = s0 > t0;
            let ok = |s: &MartingaleStat| if exact { s.mean == 0.0 } else { stats_pass(s, sigmas) };
            for s in &stats {
                w.write_record([format_f64(s0), format_f64(s.t), format_f64(s.mean), format_f64(s.standard_error), u8::from(ok(s)).to_string()])?;
            }
            pass &= stats.iter().all(ok);
            let mut summary = stats_json(&stats, sigmas);
            summary["s0"] = json!(s0);
            summary["expect_exact_zero"] = json!(exact);
            per_start.push(summary);
        }
        w.flush()?;
        Ok(CheckOutcome { verdict: Verdict::from_pass(pass), artifacts: vec!["spacetime.csv".into()], details: json!({ "starts": per_start }) })
    }

    fn pathwise(&self) -> Result<CheckOutcome> {
        let sc = self.sc;
        let mc = &sc.monte_carlo;
        let tol = &sc.tolerances;
        let model = &sc.coefficient;
        let grid = sc.fine_grid(self.factor());
        let opts = tol.timechange_options();
        let metric = self.metric();
        let law = mc.initial_law.as_deref();
        let first = first_horizon(&sc.process, law, model, sc.grid_end(), mc.mesh);

        let rows = ordered_map(mc.n, self.options.workers, |i| -> Result<(f64, f64)> {
            let spec_i = path_spec(&sc.process, law, mc.master_seed, i)?;
            let mut horizon = first;
            for _ in 0..=tol.max_retries {
                let (coarse, fine) = self.refined_base(&spec_i, i, horizon)?;
                let solved = build_time_change_with(&coarse, model, &grid, &opts).and_then(|c| Ok((c, build_time_change_with(&fine, model, &grid, &opts)?)));
                match solved {
                    Ok((tc_c, tc_f)) => {
                        let r_c = fixed_point_residual_with(&coarse, &apply_time_change(&coarse, &tc_c)?, model, &grid, metric, FIXED_POINT_WINDOW)?;
                        let r_f = fixed_point_residual_with(&fine, &apply_time_change(&fine, &tc_f)?, model, &grid, metric, FIXED_POINT_WINDOW)?;
                        return Ok((r_c, r_f));
                    }
                    Err(Error::HorizonExhausted { .. }) => horizon *= 2.0,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::InfeasibleScenario { path_index: i as u64, seed: mc.master_seed, retries: tol.max_retries })
        })?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let mut w = csv_writer(self.create("pathwise.csv")?);
        w.write_record(["path_id", "residual", "residual_refined"])?;
        for (i, (c, f)) in rows.iter().enumerate() {
            w.write_record([i.to_string(), format_f64(*c), format_f64(*f)])?;
        }
        w.flush()?;
        let violations = rows.iter().filter(|(c, f)| !(*c <= 2.0 * f + tol.pathwise_slack)).count();
        // with a state-dependent clock on a diffusion the grid quadrature of
        // sigma(s, X_s) dominates both residuals, so the refinement study is
        // reported without a threshold
        let decided = metric == StateMetric::Discrete || model.is_state_independent();
        let details = json!({
            "paths": rows.len(),
            "violations": violations,
            "max_residual": rows.iter().map(|r| r.0).fold(0.0, f64::max),
            "max_residual_refined": rows.iter().map(|r| r.1).fold(0.0, f64::max),
            "all_exactly_zero": rows.iter().all(|&(c, f)| c == 0.0 && f == 0.0),
            "metric": metric,
            "threshold_applied": decided,
        });
        let verdict = if decided { Verdict::from_pass(violations == 0) } else { Verdict::Inconclusive };
        Ok(CheckOutcome { verdict, artifacts: vec!["pathwise.csv".into()], details })
    }

    fn uniqueness(&self) -> Result<CheckOutcome> {
        let sc = self.sc;
        let mc = &sc.monte_carlo;
        let ProcessSpec::BrownianMotion { x0 } = sc.process else {
            return Ok(CheckOutcome::skipped("the Euler-Maruyama oracle needs a Brownian base"));
        };
        if mc.initial_law.is_some() {
            return Ok(CheckOutcome::skipped("the Euler-Maruyama oracle starts from a point mass"));
        }
        if !sc.coefficient.zero_set().is_empty() {
            return Ok(CheckOutcome::skipped("the Euler-Maruyama oracle needs H bounded away from zero"));
        }
        let sim = self.sim()?;
        let tgrid = sc.tgrid();
        let step = sc.tolerances.em_step.unwrap_or(mc.mesh);
        let em = euler_maruyama_marginals_with(&sc.coefficient, x0, mc.n, &tgrid, step, mc.master_seed, self.options.workers)?;
        em.write_csv(self.create("em_ensemble.csv")?)?;
        let entries = uniqueness_crosscheck_at(&sim.coarse, &em, sc.tolerances.ks_c_alpha)?;

        let mut w = csv_writer(self.create("uniqueness.csv")?);
        w.write_record(["t", "ks_statistic", "threshold", "pass"])?;
        for e in &entries {
            w.write_record([format_f64(e.t), format_f64(e.ks_statistic), format_f64(e.threshold), u8::from(e.pass).to_string()])?;
        }
        w.flush()?;
        let details = json!({
            "times": entries.len(),
            "failures": entries.iter().filter(|e| !e.pass).count(),
            "max_ks_statistic": entries.iter().map(|e| e.ks_statistic).fold(0.0, f64::max),
            "threshold": entries.first().map(|e| e.threshold),
            "em_step": step,
        });
        Ok(CheckOutcome {
            verdict: Verdict::from_pass(entries.iter().all(|e| e.pass)),
            artifacts: vec!["uniqueness.csv".into(), "em_ensemble.csv".into()],
            details,
        })
    }
}

/// Mean and standard error of each column of per-path rows.
fn column_stats(tgrid: &[f64], rows: Vec<Result<Vec<f64>>>) -> Result<Vec<MartingaleStat>> {
    let mut columns = vec![Vec::with_capacity(rows.len()); tgrid.len()];
    for row in rows {
        for (j, v) in row?.into_iter().enumerate() {
            columns[j].push(v);
        }
    }
    Ok(tgrid
        .iter()
        .zip(&columns)
        .map(|(&t, c)| {
            let (mean, standard_error) = mean_and_se(c);
            MartingaleStat { t, mean, standard_error }
        })
        .collect())
}

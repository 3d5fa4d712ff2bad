//! Monte Carlo marginals of the time-changed process and the weak
//! Fokker-Planck, space-time martingale and uniqueness diagnostics built on
//! them.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientModel;
use crate::error::{invalid, Error, Result};
use crate::generators::{apply_generator, mean_and_se, CutoffFunction, MartingaleStat, TestFunction};
use crate::io::{csv_writer, format_f64, parse_f64};
use crate::parallel::ordered_map;
use crate::paths::{pick_atom, sample_path_with, Atom, ProcessSpec, RcllPath};
use crate::rng::{path_rng, Domain};
use crate::stats::{ks_threshold, ks_two_sample, sorted};
use crate::timechange::{apply_time_change, build_time_change_with, validate_tgrid, SolverStats, TimeChange, TimeChangeOptions};

/// `c(alpha)` of the two-sample Kolmogorov-Smirnov test at `alpha = 0.01`.
pub const KS_C_ALPHA_001: f64 = 1.628;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Timechange,
    EulerMaruyama,
    External,
}

/// Samples of `X` on a common time grid, one row per path.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalEnsemble {
    tgrid: Vec<f64>,
    /// Row-major `n x tgrid.len()`.
    samples: Vec<f64>,
    n: usize,
    pub master_seed: u64,
    pub provenance: Provenance,
    /// Per path freeze index of the time change (time-change ensembles only).
    pub frozen_from: Vec<Option<usize>>,
    /// Clock solver counters summed over paths.
    pub solver_stats: SolverStats,
    /// Base-path horizon extensions summed over paths.
    pub horizon_extensions: u64,
}

impl MarginalEnsemble {
    pub fn new(tgrid: Vec<f64>, samples: Vec<f64>, master_seed: u64, provenance: Provenance) -> Result<Self> {
        if tgrid.is_empty() || tgrid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("time grid must be nonempty and strictly increasing"));
        }
        if samples.is_empty() || samples.len() % tgrid.len() != 0 {
            return Err(invalid(format!("{} samples do not fill rows of length {}", samples.len(), tgrid.len())));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(invalid("ensemble samples must be finite"));
        }
        let n = samples.len() / tgrid.len();
        Ok(Self { tgrid, samples, n, master_seed, provenance, frozen_from: Vec::new(), solver_stats: SolverStats::default(), horizon_extensions: 0 })
    }

    pub fn tgrid(&self) -> &[f64] {
        &self.tgrid
    }

    /// Number of paths.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn path(&self, i: usize) -> &[f64] {
        let w = self.tgrid.len();
        &self.samples[i * w..(i + 1) * w]
    }

    pub fn paths(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks_exact(self.tgrid.len())
    }

    /// Values of all paths at grid index `j`, in path order.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.paths().map(|p| p[j]).collect()
    }

    /// Writes `path_id,t,value`, one row per path and grid time.
    /// The ensemble restricted to the grid times at `indices`.
    pub fn select_times(&self, indices: &[usize]) -> Result<Self> {
        let m = self.tgrid.len();
        if indices.is_empty() || indices.iter().any(|&j| j >= m) || indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("time indices must be increasing and inside the grid"));
        }
        let tgrid = indices.iter().map(|&j| self.tgrid[j]).collect();
        let samples = self.paths().flat_map(|row| indices.iter().map(move |&j| row[j])).collect();
        let mut out = Self::new(tgrid, samples, self.master_seed, self.provenance)?;
        out.frozen_from = self
            .frozen_from
            .iter()
            .map(|f| f.map(|f| indices.partition_point(|&j| j < f)).filter(|&k| k < indices.len()))
            .collect();
        out.solver_stats = self.solver_stats;
        out.horizon_extensions = self.horizon_extensions;
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv_writer(w);
        out.write_record(["path_id", "t", "value"])?;
        let times: Vec<String> = self.tgrid.iter().map(|&t| format_f64(t)).collect();
        for (i, row) in self.paths().enumerate() {
            let id = i.to_string();
            for (t, &v) in times.iter().zip(row) {
                out.write_record([id.as_str(), t.as_str(), &format_f64(v)])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a `path_id,t,value` file. Paths must appear in order with
    /// identical time columns; the result is tagged external.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers()?.clone();
        if headers.iter().map(str::trim).collect::<Vec<_>>() != ["path_id", "t", "value"] {
            return Err(Error::Config("expected header `path_id,t,value`".into()));
        }
        let mut tgrid: Vec<f64> = Vec::new();
        let mut samples = Vec::new();
        let mut current: Option<u64> = None;
        let mut expected_id = 0u64;
        let mut col = 0usize;
        let mut first_path_done = false;
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let id: u64 = record[0]
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("line {line}, column `path_id`: {e}")))?;
            let t = parse_f64(&record[1], line, "t")?;
            let v = parse_f64(&record[2], line, "value")?;
            if current != Some(id) {
                if let Some(prev) = current {
                    if !first_path_done {
                        first_path_done = true;
                    } else if col != tgrid.len() {
                        return Err(Error::Config(format!("path {prev} has {col} rows, expected {}", tgrid.len())));
                    }
                }
                if id != expected_id {
                    return Err(Error::Config(format!("line {line}: expected path_id {expected_id}, found {id}")));
                }
                expected_id += 1;
                current = Some(id);
                col = 0;
            }
            if !first_path_done {
                tgrid.push(t);
            } else if col >= tgrid.len() || tgrid[col] != t {
                return Err(Error::Config(format!("line {line}: time {t} does not match the grid of path 0")));
            }
            samples.push(v);
            col += 1;
        }
        if first_path_done && col != tgrid.len() {
            return Err(Error::Config(format!("last path has {col} rows, expected {}", tgrid.len())));
        }
        Self::new(tgrid, samples, 0, Provenance::External)
    }
}

/// Knobs for [`simulate_marginals_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOptions {
    /// Worker threads: 0 for the default pool, 1 for the calling thread.
    pub workers: usize,
    /// Finite mixture for `X_0`; `None` starts every path at the spec's `x0`.
    pub initial_law: Option<Vec<Atom>>,
    pub timechange: TimeChangeOptions,
    pub max_retries: u32,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self { workers: 0, initial_law: None, timechange: TimeChangeOptions::default(), max_retries: 10 }
    }
}

pub fn simulate_marginals(spec: &ProcessSpec, model: &CoefficientModel, n: usize, tgrid: &[f64], mesh: f64, master_seed: u64) -> Result<MarginalEnsemble> {
    simulate_marginals_with(spec, model, n, tgrid, mesh, master_seed, &SimulationOptions::default())
}

/// Largest `sigma` over the probed states and times, used to size the first
/// base-path horizon.
fn sigma_sup_probe(starts: &[f64], spec: &ProcessSpec, model: &CoefficientModel, t_end: f64) -> f64 {
    let xs: Vec<f64> = match spec {
        ProcessSpec::Ctmc { states, .. } => states.clone(),
        _ => starts.iter().flat_map(|&x0| (0..=80).map(move |k| x0 - 4.0 + 0.1 * k as f64)).collect(),
    };
    let t_top = t_end.min(model.cutoff()).max(0.0);
    let mut sup: f64 = 0.0;
    for i in 0..=40 {
        let t = t_top * i as f64 / 40.0;
        for &x in &xs {
            let s = model.evaluate_sigma(t, x);
            if s.is_finite() {
                sup = sup.max(s);
            }
        }
    }
    sup
}

struct PathOutcome {
    row: Vec<f64>,
    frozen_from: Option<usize>,
    stats: SolverStats,
    extensions: u32,
}

/// First base-path horizon tried for every path.
pub(crate) fn first_horizon(spec: &ProcessSpec, initial_law: Option<&[Atom]>, model: &CoefficientModel, t_end: f64, mesh: f64) -> f64 {
    let starts: Vec<f64> = initial_law.map_or_else(|| vec![spec.x0()], |law| law.iter().map(|a| a.value).collect());
    (sigma_sup_probe(&starts, spec, model, t_end) * t_end * 1.1).max(mesh)
}

/// The process of path `i`, with its start drawn from `initial_law` if given.
pub(crate) fn path_spec(spec: &ProcessSpec, initial_law: Option<&[Atom]>, master_seed: u64, i: usize) -> Result<ProcessSpec> {
    match initial_law {
        Some(law) => {
            let u: f64 = path_rng(master_seed, Domain::InitialLaw, i as u64).random();
            spec.with_start(pick_atom(law, u))
        }
        None => Ok(spec.clone()),
    }
}

/// Base path `i` and its time change, doubling the horizon while the clock
/// runs out of path. Returns the number of extensions used.
#[allow(clippy::too_many_arguments)]
pub(crate) fn time_changed_path(
    spec_i: &ProcessSpec,
    model: &CoefficientModel,
    tgrid: &[f64],
    mesh: f64,
    master_seed: u64,
    i: usize,
    first_horizon: f64,
    options: &SimulationOptions,
) -> Result<(RcllPath, TimeChange, u32)> {
    let mut horizon = first_horizon;
    for attempt in 0..=options.max_retries {
        let mut rng = path_rng(master_seed, Domain::BasePath, i as u64);
        let base = sample_path_with(spec_i, horizon, mesh, &mut rng)?;
        match build_time_change_with(&base, model, tgrid, &options.timechange) {
            Ok(tc) => return Ok((base, tc, attempt)),
            Err(Error::HorizonExhausted { .. }) => horizon *= 2.0,
            Err(e) => return Err(e),
        }
    }
    Err(Error::InfeasibleScenario { path_index: i as u64, seed: master_seed, retries: options.max_retries })
}

/// Simulates `n` paths of `X = M_tau` and records them on `tgrid`.
///
/// Path `i` draws its base path from stream `i` of the master seed. When the
/// clock has not reached the last grid time before the base path ends, the
/// horizon is doubled and the same stream is drawn again, which extends the
/// path without changing its prefix.
pub fn simulate_marginals_with(
    spec: &ProcessSpec,
    model: &CoefficientModel,
    n: usize,
    tgrid: &[f64],
    mesh: f64,
    master_seed: u64,
    options: &SimulationOptions,
) -> Result<MarginalEnsemble> {
    if n == 0 {
        return Err(invalid("need at least one path"));
    }
    if !(mesh > 0.0) {
        return Err(invalid("mesh must be positive"));
    }
    spec.validate()?;
    validate_tgrid(tgrid, model.t0)?;
    if let Some(law) = &options.initial_law {
        let total: f64 = law.iter().map(|a| a.probability).sum();
        if law.is_empty() || (total - 1.0).abs() > 1e-12 || law.iter().any(|a| a.probability < 0.0) {
            return Err(invalid("initial law must be a probability vector"));
        }
        for a in law {
            spec.with_start(a.value)?;
        }
    }
    let first_horizon = first_horizon(spec, options.initial_law.as_deref(), model, tgrid[tgrid.len() - 1], mesh);
    let outcomes = ordered_map(n, options.workers, |i| -> Result<PathOutcome> {
        let spec_i = path_spec(spec, options.initial_law.as_deref(), master_seed, i)?;
        let (base, tc, extensions) = time_changed_path(&spec_i, model, tgrid, mesh, master_seed, i, first_horizon, options)?;
        let x = apply_time_change(&base, &tc)?;
        Ok(PathOutcome { row: x.values().to_vec(), frozen_from: tc.frozen_from, stats: tc.solver_stats, extensions })
    })?;

    let mut samples = Vec::with_capacity(n * tgrid.len());
    let mut frozen_from = Vec::with_capacity(n);
    let mut stats = SolverStats::default();
    let mut extensions = 0u64;
    for outcome in outcomes {
        let o = outcome?;
        samples.extend_from_slice(&o.row);
        frozen_from.push(o.frozen_from);
        stats.merge(&o.stats);
        extensions += u64::from(o.extensions);
    }
    let mut ens = MarginalEnsemble::new(tgrid.to_vec(), samples, master_seed, Provenance::Timechange)?;
    ens.frozen_from = frozen_from;
    ens.solver_stats = stats;
    ens.horizon_extensions = extensions;
    Ok(ens)
}

pub fn euler_maruyama_marginals(model: &CoefficientModel, x0: f64, n: usize, tgrid: &[f64], step: f64, master_seed: u64) -> Result<MarginalEnsemble> {
    euler_maruyama_marginals_with(model, x0, n, tgrid, step, master_seed, 0)
}

/// Explicit scheme `X += sqrt(max(sigma(t, X), 0)) dW` for a Brownian base,
/// each grid cell split into equal substeps no longer than `step`.
pub fn euler_maruyama_marginals_with(
    model: &CoefficientModel,
    x0: f64,
    n: usize,
    tgrid: &[f64],
    step: f64,
    master_seed: u64,
    workers: usize,
) -> Result<MarginalEnsemble> {
    if n == 0 {
        return Err(invalid("need at least one path"));
    }
    validate_tgrid(tgrid, model.t0)?;
    let min_gap = tgrid.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if !(step > 0.0) || step > min_gap * (1.0 + 1e-12) {
        return Err(invalid(format!("step {step} must lie in (0, {min_gap}]")));
    }
    let substeps: Vec<usize> = tgrid.windows(2).map(|w| ((w[1] - w[0]) / step - 1e-9).ceil().max(1.0) as usize).collect();
    let rows = ordered_map(n, workers, |i| {
        let mut rng = path_rng(master_seed, Domain::EulerMaruyama, i as u64);
        let mut row = Vec::with_capacity(tgrid.len());
        let mut x = x0;
        row.push(x);
        for (w, &m) in tgrid.windows(2).zip(&substeps) {
            let h = (w[1] - w[0]) / m as f64;
            let sqrt_h = h.sqrt();
            for k in 0..m {
                let t = w[0] + k as f64 * h;
                let z: f64 = StandardNormal.sample(&mut rng);
                x += model.evaluate_sigma(t, x).max(0.0).sqrt() * sqrt_h * z;
            }
            row.push(x);
        }
        row
    })?;
    MarginalEnsemble::new(tgrid.to_vec(), rows.concat(), master_seed, Provenance::EulerMaruyama)
}

/// One `(f, t)` entry of the weak Fokker-Planck residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualEntry {
    /// Position of `f` in the dictionary.
    pub function: usize,
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub mc_standard_error: f64,
    pub quadrature_bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub entries: Vec<ResidualEntry>,
}

impl ResidualReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn failures(&self) -> usize {
        self.entries.iter().filter(|e| !e.pass).count()
    }
}

fn uniform_spacing(tgrid: &[f64]) -> Result<()> {
    if tgrid.len() < 2 {
        return Err(invalid("need at least two grid times"));
    }
    let h = (tgrid[tgrid.len() - 1] - tgrid[0]) / (tgrid.len() - 1) as f64;
    if tgrid.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h.max(1.0)) {
        return Err(invalid("fp_residual needs a uniformly spaced time grid"));
    }
    Ok(())
}

/// `A f` at `x`, tabulated per state for chains.
fn generator_table<'a>(spec: &'a ProcessSpec, f: &TestFunction) -> Result<impl Fn(f64) -> Result<f64> + 'a> {
    let table: Option<Vec<(f64, f64)>> = match spec {
        ProcessSpec::Ctmc { states, .. } => Some(states.iter().map(|&s| apply_generator(spec, f, s).map(|a| (s, a))).collect::<Result<_>>()?),
        _ => None,
    };
    let f = f.clone();
    Ok(move |x: f64| match &table {
        Some(t) => t.iter().find(|(s, _)| *s == x).map(|&(_, a)| a).ok_or_else(|| invalid(format!("{x} is not a state of the chain"))),
        None => apply_generator(spec, &f, x),
    })
}

/// Weak residual `E f(X_t) - f(X_0) - int_0^t E[sigma(s, X_s) Af(X_s)] ds`
/// per dictionary member and grid time.
pub fn fp_residual(ens: &MarginalEnsemble, spec: &ProcessSpec, model: &CoefficientModel, dictionary: &[TestFunction]) -> Result<ResidualReport> {
    if dictionary.is_empty() {
        return Err(invalid("dictionary is empty"));
    }
    uniform_spacing(ens.tgrid())?;
    let tg = ens.tgrid();
    let m = tg.len();
    let n = ens.n();
    let mut entries = Vec::with_capacity(dictionary.len() * m);
    let mut lhs_cols = vec![vec![0.0; n]; m];
    let mut rhs_cols = vec![vec![0.0; n]; m];
    let mut integrand_cols = vec![vec![0.0; n]; m];
    for (fi, f) in dictionary.iter().enumerate() {
        f.validate()?;
        let af = generator_table(spec, f)?;
        for (i, row) in ens.paths().enumerate() {
            let f0 = f.value(row[0]);
            let mut acc = 0.0;
            let mut prev = 0.0;
            for j in 0..m {
                let sigma = model.evaluate_sigma(tg[j], row[j]);
                let g = if sigma == 0.0 { 0.0 } else { sigma * af(row[j])? };
                if j > 0 {
                    acc += 0.5 * (tg[j] - tg[j - 1]) * (prev + g);
                }
                prev = g;
                lhs_cols[j][i] = f.value(row[j]) - f0;
                rhs_cols[j][i] = acc;
                integrand_cols[j][i] = g;
            }
        }
        let integrand_mean: Vec<f64> = integrand_cols.iter().map(|c| mean_and_se(c).0).collect();
        let second_diff = integrand_mean.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).abs()).fold(0.0, f64::max);
        for j in 0..m {
            let (lhs, se_l) = mean_and_se(&lhs_cols[j]);
            let (rhs, se_r) = mean_and_se(&rhs_cols[j]);
            let se = if n < 2 { 0.0 } else { se_l + se_r };
            let t = tg[j] - tg[0];
            let quadrature_bound = if j == 0 { 0.0 } else { t.max(1.0) * second_diff / 12.0 };
            let residual = lhs - rhs;
            entries.push(ResidualEntry {
                function: fi,
                t: tg[j],
                lhs,
                rhs,
                residual,
                mc_standard_error: se,
                quadrature_bound,
                pass: residual.abs() <= 3.0 * se + quadrature_bound,
            });
        }
    }
    Ok(ResidualReport { entries })
}

/// `L(f g)(t, x) = g(t) sigma(t, x) Af(x) + f(x) g'(t)`.
pub fn spacetime_operator(f: &TestFunction, g: &CutoffFunction, t: f64, x: f64, spec: &ProcessSpec, model: &CoefficientModel) -> Result<f64> {
    let (gv, dg) = g.eval(t);
    let sigma = model.evaluate_sigma(t, x);
    let drift = if gv == 0.0 || sigma == 0.0 { 0.0 } else { gv * sigma * apply_generator(spec, f, x)? };
    let fx = if dg == 0.0 { 0.0 } else { f.value(x) * dg };
    Ok(drift + fx)
}

/// Mean and standard error of
/// `g(s0 + t) f(X_t) - g(s0) f(X_0) - int_0^t L(fg)(s0 + s, X_s) ds` at every
/// grid time of `ens`, which must come from the model shifted by `s0`. The
/// integral is a trapezoid over the ensemble grid; `model` is unshifted.
pub fn spacetime_martingale_residual(
    ens: &MarginalEnsemble,
    s0: f64,
    spec: &ProcessSpec,
    model: &CoefficientModel,
    f: &TestFunction,
    g: &CutoffFunction,
) -> Result<Vec<MartingaleStat>> {
    if !(s0 >= 0.0) {
        return Err(invalid("s0 must be nonnegative"));
    }
    f.validate()?;
    g.validate()?;
    let tg = ens.tgrid();
    // the time component is deterministic: T_t = s0 + t on every path
    let clock: Vec<f64> = tg.iter().map(|&t| s0 + t).collect();
    let mut columns = vec![Vec::with_capacity(ens.n()); tg.len()];
    for row in ens.paths() {
        let start = g.eval(clock[0]).0 * f.value(row[0]);
        let mut acc = 0.0;
        let mut prev = 0.0;
        for j in 0..tg.len() {
            let l = spacetime_operator(f, g, clock[j], row[j], spec, model)?;
            if j > 0 {
                acc += 0.5 * (tg[j] - tg[j - 1]) * (prev + l);
            }
            prev = l;
            columns[j].push(g.eval(clock[j]).0 * f.value(row[j]) - start - acc);
        }
    }
    Ok(tg
        .iter()
        .zip(&columns)
        .map(|(&t, c)| {
            let (mean, standard_error) = mean_and_se(c);
            MartingaleStat { t, mean, standard_error }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsEntry {
    pub t: f64,
    pub ks_statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub fn uniqueness_crosscheck(a: &MarginalEnsemble, b: &MarginalEnsemble) -> Result<Vec<KsEntry>> {
    uniqueness_crosscheck_at(a, b, KS_C_ALPHA_001)
}

/// Two-sample KS statistic per grid time against `c_alpha sqrt((n+m)/(nm))`.
pub fn uniqueness_crosscheck_at(a: &MarginalEnsemble, b: &MarginalEnsemble, c_alpha: f64) -> Result<Vec<KsEntry>> {
    if a.tgrid() != b.tgrid() {
        return Err(invalid("ensembles live on different time grids"));
    }
    let threshold = ks_threshold(c_alpha, a.n(), b.n());
    a.tgrid()
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let ks_statistic = ks_two_sample(&sorted(&a.column(j)), &sorted(&b.column(j)))?;
            Ok(KsEntry { t, ks_statistic, threshold, pass: ks_statistic < threshold })
        })
        .collect()
}

/// Mean of `f(X_t)` per grid time; with `f` a wide bump this tracks how much
/// mass stays inside its support.
pub fn mass_surrogate(ens: &MarginalEnsemble, f: &TestFunction) -> Vec<f64> {
    (0..ens.tgrid().len()).map(|j| mean_and_se(&ens.column(j).iter().map(|&x| f.value(x)).collect::<Vec<_>>()).0).collect()
}

//! The inverse-clock construction of the time change.
//!
//! Along a fixed base path `M` the clock `T(s) = int_0^s 1/sigma(T(r), M_r) dr`
//! is integrated with classical RK4 and step halving, with the jump times of
//! `M` as forced step boundaries. The time change is the generalized inverse
//! `tau(t) = inf{s < rho : T(s) >= t} ∧ rho`, where `rho` is the blow-up time
//! of `int 1/H(M_u) du` found by [`scan_rho`].

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::coefficients::{scan_rho, CoefficientModel, ZeroSet, H_FLOOR};
use crate::error::{invalid, out_of_range, Error, Result};
use crate::io::{csv_writer, format_f64};
use crate::paths::{PathKind, RcllPath};

pub const DEFAULT_TOL: f64 = 1e-9;

/// Step control for the clock solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    /// Accept a step when one full step and two half steps differ by less
    /// than `tol * (1 + |T|)`.
    pub tol: f64,
    /// Largest step; a power of two keeps dyadic grids exact.
    pub h_max: f64,
    /// Smallest relative step before giving up.
    pub min_step: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, h_max: 0.0625, min_step: 1e-14 }
    }
}

impl SolverSettings {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.h_max > 0.0 && self.min_step > 0.0) {
            return Err(invalid("solver tol, h_max and min_step must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolverStats {
    pub accepted_steps: u64,
    pub rejected_steps: u64,
    pub evaluations: u64,
    /// Smallest `sigma` seen by the integrand, when it reports one.
    pub min_sigma: Option<f64>,
}

impl SolverStats {
    pub fn merge(&mut self, other: &SolverStats) {
        self.accepted_steps += other.accepted_steps;
        self.rejected_steps += other.rejected_steps;
        self.evaluations += other.evaluations;
        self.min_sigma = match (self.min_sigma, other.min_sigma) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "terminal", rename_all = "snake_case")]
pub enum Terminal {
    /// The clock reached the target at time `at`.
    HitS { at: f64 },
    /// The clock stayed below the target up to the horizon.
    Horizon,
}

/// A solved clock: accepted nodes, values and one-sided slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseClock {
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
    /// `(left, right)` slope at each node.
    slopes: Vec<(f64, f64)>,
    pub terminal: Terminal,
    /// First passage time of each requested level that was reached.
    pub crossings: Vec<f64>,
    pub stats: SolverStats,
}

impl InverseClock {
    /// Value at `u`, exact at nodes and cubic Hermite in between.
    pub fn at(&self, u: f64) -> Result<f64> {
        let end = self.end();
        if !(0.0..=end).contains(&u) {
            return Err(out_of_range(format!("u = {u} outside the solved range [0, {end}]")));
        }
        let k = self.nodes.partition_point(|&n| n <= u).saturating_sub(1);
        if self.nodes[k] == u || k + 1 == self.nodes.len() {
            return Ok(self.values[k]);
        }
        let (u0, u1) = (self.nodes[k], self.nodes[k + 1]);
        let (c0, c1) = (self.values[k], self.values[k + 1]);
        let (m0, m1) = (self.slopes[k].1, self.slopes[k + 1].0);
        let h = u1 - u0;
        let x = (u - u0) / h;
        let (x2, x3) = (x * x, x * x * x);
        Ok((2.0 * x3 - 3.0 * x2 + 1.0) * c0 + (x3 - 2.0 * x2 + x) * h * m0 + (-2.0 * x3 + 3.0 * x2) * c1 + (x3 - x2) * h * m1)
    }

    /// Last time covered.
    pub fn end(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    /// Clock value at [`InverseClock::end`].
    pub fn final_value(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

/// Solves `T' = gamma(T, u)`, `T(0) = 0`, until `T` reaches `target` or `u`
/// reaches `horizon`, whichever comes first.
pub fn solve_caratheodory(integrand: impl FnMut(f64, f64) -> f64, target: f64, horizon: f64, tol: f64) -> Result<InverseClock> {
    solve_caratheodory_with(integrand, target, horizon, &[], &[target], &SolverSettings::with_tol(tol))
}

struct Stepper<F> {
    gamma: F,
    stats: SolverStats,
}

impl<F: FnMut(f64, f64) -> f64> Stepper<F> {
    fn eval(&mut self, r: f64, u: f64, seg_end: f64) -> Result<f64> {
        // the end stage sees the left limit of the integrand at a boundary
        let u_eval = if u >= seg_end { seg_end.next_down() } else { u };
        self.stats.evaluations += 1;
        let g = (self.gamma)(r, u_eval);
        if !(g >= 0.0 && g.is_finite()) {
            return Err(Error::NumericFailure { r, s: u_eval, message: format!("integrand returned {g}") });
        }
        Ok(g)
    }

    fn rk4(&mut self, u: f64, c: f64, h: f64, k1: f64, seg_end: f64) -> Result<f64> {
        let k2 = self.eval(c + 0.5 * h * k1, u + 0.5 * h, seg_end)?;
        let k3 = self.eval(c + 0.5 * h * k2, u + 0.5 * h, seg_end)?;
        let k4 = self.eval(c + h * k3, u + h, seg_end)?;
        Ok(c + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
    }

    /// One full step and two half steps from `(u, c)` with slope `k1`.
    fn step(&mut self, u: f64, c: f64, h: f64, k1: f64, seg_end: f64) -> Result<(f64, f64)> {
        let full = self.rk4(u, c, h, k1, seg_end)?;
        let mid = self.rk4(u, c, 0.5 * h, k1, seg_end)?;
        let k1_mid = self.eval(mid, u + 0.5 * h, seg_end)?;
        let half = self.rk4(u + 0.5 * h, mid, 0.5 * h, k1_mid, seg_end)?;
        Ok((full, half))
    }

    /// Length `d` in `(0, h]` at which the two-half-step value from `(u, c)`
    /// equals `level`, by the Illinois variant of regula falsi.
    #[allow(clippy::too_many_arguments)]
    fn crossing(&mut self, u: f64, c: f64, h: f64, c_end: f64, k1: f64, level: f64, seg_end: f64, tol: f64) -> Result<f64> {
        let (mut lo, mut g_lo) = (0.0, c - level);
        let (mut hi, mut g_hi) = (h, c_end - level);
        if g_hi == 0.0 {
            return Ok(h);
        }
        let mut side = 0;
        let mut m = hi;
        for _ in 0..200 {
            m = (lo * g_hi - hi * g_lo) / (g_hi - g_lo);
            if !(m > lo && m < hi) {
                m = 0.5 * (lo + hi);
            }
            let g = self.step(u, c, m, k1, seg_end)?.1 - level;
            if g.abs() <= 1e-3 * tol || hi - lo <= 4.0 * f64::EPSILON * (u + h) {
                break;
            }
            if g < 0.0 {
                lo = m;
                g_lo = g;
                if side == -1 {
                    g_hi *= 0.5;
                }
                side = -1;
            } else {
                hi = m;
                g_hi = g;
                if side == 1 {
                    g_lo *= 0.5;
                }
                side = 1;
            }
        }
        Ok(m)
    }
}

/// General form of [`solve_caratheodory`]: `breaks` are forced step
/// boundaries (discontinuities of the integrand in `u` and checkpoints at
/// which the clock is wanted exactly) and `levels` are sorted clock values
/// whose first passage times are located to solver accuracy. At a boundary
/// `b` the step ending there evaluates the integrand at the left limit.
pub fn solve_caratheodory_with(
    integrand: impl FnMut(f64, f64) -> f64,
    target: f64,
    horizon: f64,
    breaks: &[f64],
    levels: &[f64],
    settings: &SolverSettings,
) -> Result<InverseClock> {
    settings.validate()?;
    if !(target > 0.0) || !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(invalid(format!("need target > 0 and a finite horizon >= 0, got {target} and {horizon}")));
    }
    if levels.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid("levels must be sorted"));
    }
    let mut stepper = Stepper { gamma: integrand, stats: SolverStats::default() };
    let mut clock = InverseClock {
        nodes: vec![0.0],
        values: vec![0.0],
        slopes: vec![(f64::NAN, f64::NAN)],
        terminal: Terminal::Horizon,
        crossings: Vec::with_capacity(levels.len()),
        stats: SolverStats::default(),
    };
    let mut next_level = levels.iter().take_while(|&&l| l <= 0.0).count();
    clock.crossings.resize(next_level, 0.0);

    let mut boundaries: Vec<f64> = breaks.iter().copied().filter(|&b| b > 0.0 && b < horizon).collect();
    boundaries.sort_by(f64::total_cmp);
    boundaries.dedup();
    boundaries.push(horizon);

    let (mut u, mut c) = (0.0, 0.0);
    let mut h_pref = settings.h_max;
    for &seg_end in &boundaries {
        if seg_end <= u {
            continue;
        }
        while u < seg_end {
            let k1 = stepper.eval(c, u, seg_end)?;
            let last_slope = clock.slopes.len() - 1;
            clock.slopes[last_slope].1 = k1;
            let reaches_end = u + h_pref >= seg_end;
            let h = if reaches_end { seg_end - u } else { h_pref };
            let (full, half) = stepper.step(u, c, h, k1, seg_end)?;
            let diff = (full - half).abs();
            if !(diff <= settings.tol * (1.0 + half.abs())) {
                stepper.stats.rejected_steps += 1;
                h_pref = 0.5 * h;
                if h_pref < settings.min_step * (1.0 + u.abs()) {
                    return Err(Error::NumericFailure { r: c, s: u, message: format!("step size underflow (last difference {diff:e})") });
                }
                continue;
            }
            stepper.stats.accepted_steps += 1;
            let u_new = if reaches_end { seg_end } else { u + h };

            // a level within roundoff of the step end, on either side, is placed on the end
            let snap = |level: f64| (half - level).abs() <= 1e-3 * settings.tol * (1.0 + level.abs());
            while next_level < levels.len() && (levels[next_level] <= half || snap(levels[next_level])) {
                let level = levels[next_level];
                let at = if snap(level) { u_new } else { u + stepper.crossing(u, c, h, half, k1, level, seg_end, settings.tol)? };
                clock.crossings.push(at);
                next_level += 1;
            }
            if half >= target || snap(target) {
                let at = if snap(target) {
                    u_new
                } else {
                    u + stepper.crossing(u, c, h, half, k1, target, seg_end, settings.tol)?
                };
                let slope = stepper.eval(target, at, seg_end)?;
                clock.nodes.push(at);
                clock.values.push(target);
                clock.slopes.push((slope, slope));
                clock.terminal = Terminal::HitS { at };
                clock.stats = stepper.stats;
                return Ok(clock);
            }
            let slope_left = stepper.eval(half, u_new, seg_end)?;
            clock.nodes.push(u_new);
            clock.values.push(half);
            clock.slopes.push((slope_left, f64::NAN));
            u = u_new;
            c = half;
            if diff <= settings.tol / 32.0 {
                h_pref = (2.0 * h_pref).min(settings.h_max);
            }
        }
    }
    let last = clock.slopes.len() - 1;
    clock.slopes[last].1 = clock.slopes[last].0;
    clock.stats = stepper.stats;
    Ok(clock)
}

/// The solved time change on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeChange {
    pub tgrid: Vec<f64>,
    pub tau: Vec<f64>,
    /// Blow-up time, reported when the clock stops there before the last
    /// grid time.
    pub rho: Option<f64>,
    /// First grid index from which `tau = rho`.
    pub frozen_from: Option<usize>,
    pub solver_stats: SolverStats,
}

impl TimeChange {
    pub fn is_frozen_at(&self, j: usize) -> bool {
        self.frozen_from.is_some_and(|f| j >= f)
    }

    /// Writes `t,tau,frozen` with `frozen` as 0 or 1.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv_writer(w);
        out.write_record(["t", "tau", "frozen"])?;
        for (j, (&t, &tau)) in self.tgrid.iter().zip(&self.tau).enumerate() {
            out.write_record([format_f64(t), format_f64(tau), u8::from(self.is_frozen_at(j)).to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Options for [`build_time_change_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeChangeOptions {
    pub solver: SolverSettings,
    /// Threshold at which `int 1/H(M_u) du` counts as divergent.
    pub divergence_threshold: f64,
    /// When `sigma_tilde` fails its bounds at `t0`, the clock stops at
    /// `t0 (1 - t0_margin)` instead.
    pub t0_margin: f64,
}

impl Default for TimeChangeOptions {
    fn default() -> Self {
        Self { solver: SolverSettings::default(), divergence_threshold: 1e8, t0_margin: 1e-3 }
    }
}

impl TimeChangeOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { solver: SolverSettings::with_tol(tol), ..Self::default() }
    }
}

pub(crate) fn validate_tgrid(tgrid: &[f64], t0: f64) -> Result<()> {
    if tgrid.first() != Some(&0.0) {
        return Err(invalid("time grid must start at 0"));
    }
    if tgrid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("time grid must be strictly increasing"));
    }
    let last = tgrid[tgrid.len() - 1];
    if last > t0 * (1.0 + 1e-12) {
        return Err(invalid(format!("time grid ends at {last}, after t0 = {t0}")));
    }
    Ok(())
}

/// Largest clock level the time change is solved to: the cutoff of the
/// model, pulled back by the margin when `sigma_tilde` degenerates at `t0`.
fn clock_cap(model: &CoefficientModel, options: &TimeChangeOptions) -> f64 {
    let cutoff = model.cutoff();
    if model.bounds_hold_at_t0() {
        cutoff
    } else {
        cutoff - model.t0 * options.t0_margin
    }
}

/// Step-path lookup that remembers the last segment.
struct Cursor<'a> {
    path: &'a RcllPath,
    seg: usize,
}

impl Cursor<'_> {
    #[inline]
    fn value(&mut self, u: f64) -> f64 {
        let bps = self.path.breakpoints();
        if bps[self.seg] > u || self.path.segment_end(self.seg) <= u && self.seg + 1 < bps.len() {
            if self.seg + 1 < bps.len() && bps[self.seg + 1] <= u && self.path.segment_end(self.seg + 1) > u {
                self.seg += 1;
            } else {
                self.seg = self.path.segment_index(u);
            }
        }
        self.path.values()[self.seg]
    }
}

pub fn build_time_change(path: &RcllPath, model: &CoefficientModel, tgrid: &[f64], tol: f64) -> Result<TimeChange> {
    build_time_change_with(path, model, tgrid, &TimeChangeOptions::with_tol(tol))
}

/// Solves the clock along `path` and inverts it on `tgrid`.
///
/// Grid times past the model's cutoff keep the value at the cutoff. When
/// the clock is stopped by the blow-up time before a grid time is reached,
/// `tau` stays at `rho` from that grid index on.
pub fn build_time_change_with(path: &RcllPath, model: &CoefficientModel, tgrid: &[f64], options: &TimeChangeOptions) -> Result<TimeChange> {
    validate_tgrid(tgrid, model.t0)?;
    let cap = clock_cap(model, options);
    let levels: Vec<f64> = tgrid.iter().map(|&t| t.min(cap).max(0.0)).collect();
    let target = levels[levels.len() - 1];

    let scan = scan_rho(model, path, options.divergence_threshold);
    let s_end = scan.rho.map_or(path.horizon(), |r| r.min(path.horizon()));

    let mut tau = vec![0.0; tgrid.len()];
    if target <= 0.0 {
        return Ok(TimeChange { tgrid: tgrid.to_vec(), tau, rho: None, frozen_from: None, solver_stats: SolverStats::default() });
    }

    let mut cursor = Cursor { path, seg: 0 };
    let mut min_sigma = f64::INFINITY;
    let integrand = |r: f64, u: f64| {
        let x = cursor.value(u);
        let sigma = model.evaluate_sigma(r.clamp(0.0, cap), x);
        min_sigma = min_sigma.min(sigma);
        1.0 / sigma
    };
    let breaks = &path.breakpoints()[1..];
    let mut clock = solve_caratheodory_with(integrand, target, s_end, breaks, &levels, &options.solver)?;
    clock.stats.min_sigma = min_sigma.is_finite().then_some(min_sigma);

    let reached = clock.crossings.len();
    tau[..reached].copy_from_slice(&clock.crossings);
    let mut rho = None;
    let mut frozen_from = None;
    if reached < tgrid.len() {
        match scan.rho {
            Some(r) if r <= path.horizon() => {
                let from = levels.iter().position(|&l| l >= clock.final_value()).map_or(reached, |j| j.min(reached));
                rho = Some(r);
                frozen_from = Some(from);
                tau[from..].fill(r);
            }
            _ => {
                return Err(Error::HorizonExhausted { horizon: path.horizon(), reached: clock.final_value(), target: levels[reached] });
            }
        }
    }
    // tau is a first passage time of an increasing clock; keep it monotone
    // against roundoff in the located crossings
    for j in 1..tau.len() {
        if tau[j] < tau[j - 1] {
            tau[j] = tau[j - 1];
        }
    }
    Ok(TimeChange { tgrid: tgrid.to_vec(), tau, rho, frozen_from, solver_stats: clock.stats })
}

/// `X_t = M_{tau(t)}` on the grid of `tc`.
pub fn apply_time_change(path: &RcllPath, tc: &TimeChange) -> Result<RcllPath> {
    let values = tc.tau.iter().map(|&s| path.evaluate(s)).collect::<Result<Vec<_>>>()?;
    let horizon = tc.tgrid[tc.tgrid.len() - 1];
    RcllPath::new(tc.tgrid.clone(), values, horizon, PathKind::MeshSampled)
}

/// How states are compared in [`fixed_point_residual_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateMetric {
    /// `|x - y|` on the real line.
    Euclidean,
    /// 0 for equal states, 1 otherwise.
    Discrete,
}

/// Half-width of the window of base times matched against each `X_t`.
pub const FIXED_POINT_WINDOW: f64 = 1e-8;

pub fn fixed_point_residual(base: &RcllPath, x: &RcllPath, model: &CoefficientModel, tgrid: &[f64]) -> Result<f64> {
    fixed_point_residual_with(base, x, model, tgrid, StateMetric::Euclidean, FIXED_POINT_WINDOW)
}

/// Sup over the grid of the distance between `X_t` and `M_{u(t)}`, with
/// `u(t)` the cell-wise trapezoid of `sigma(s, X_s)` on `tgrid`. Inside a
/// cell `X` holds its left value. The base path is read on the window
/// `[u - window, u + window]` and the closest value there counts.
pub fn fixed_point_residual_with(
    base: &RcllPath,
    x: &RcllPath,
    model: &CoefficientModel,
    tgrid: &[f64],
    metric: StateMetric,
    window: f64,
) -> Result<f64> {
    if tgrid.is_empty() || tgrid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("time grid must be nonempty and strictly increasing"));
    }
    if tgrid[tgrid.len() - 1] > x.horizon() {
        return Err(out_of_range("time grid extends past the time-changed path"));
    }
    let distance = |a: f64, b: f64| match metric {
        StateMetric::Euclidean => (a - b).abs(),
        StateMetric::Discrete => f64::from(u8::from(a != b)),
    };
    let mut u = 0.0;
    let mut worst: f64 = 0.0;
    for (j, &t) in tgrid.iter().enumerate() {
        if j > 0 {
            let t_prev = tgrid[j - 1];
            let xv = x.value_at(t_prev);
            u += 0.5 * (t - t_prev) * (model.evaluate_sigma(t_prev, xv) + model.evaluate_sigma(t, xv));
        }
        if u > base.horizon() + window {
            return Err(out_of_range(format!("u({t}) = {u} beyond the base horizon {}", base.horizon())));
        }
        let xt = x.value_at(t);
        let lo = base.segment_index((u - window).max(0.0));
        let hi = base.segment_index((u + window).min(base.horizon()));
        let d = base.values()[lo..=hi].iter().map(|&m| distance(xt, m)).fold(f64::INFINITY, f64::min);
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Explicit Euler on `tau' = sigma(t, M_tau)` over `tgrid`. Only valid while
/// `sigma` stays positive along the visited part of the path.
pub fn forward_euler_time_change(path: &RcllPath, model: &CoefficientModel, tgrid: &[f64]) -> Result<TimeChange> {
    validate_tgrid(tgrid, model.t0)?;
    let zeros = model.zero_set();
    let mut tau = Vec::with_capacity(tgrid.len());
    tau.push(0.0);
    let mut min_sigma = f64::INFINITY;
    for j in 1..tgrid.len() {
        let t = tgrid[j - 1];
        let s = tau[j - 1];
        let sigma = model.evaluate_sigma(t, path.value_at(s));
        if t < model.cutoff() {
            min_sigma = min_sigma.min(sigma);
            if !(sigma > 0.0) {
                return Err(Error::DegenerateRegime(format!("sigma({t}, M({s})) = {sigma}")));
            }
        }
        let next = s + (tgrid[j] - t) * sigma;
        if next > path.horizon() {
            return Err(Error::HorizonExhausted { horizon: path.horizon(), reached: s, target: next });
        }
        tau.push(next);
    }
    let visited = tau[tau.len() - 1];
    refuse_zero_crossings(path, &zeros, model, visited)?;
    Ok(TimeChange {
        tgrid: tgrid.to_vec(),
        tau,
        rho: None,
        frozen_from: None,
        solver_stats: SolverStats { min_sigma: min_sigma.is_finite().then_some(min_sigma), ..SolverStats::default() },
    })
}

fn refuse_zero_crossings(path: &RcllPath, zeros: &ZeroSet, model: &CoefficientModel, upto: f64) -> Result<()> {
    let bps = path.breakpoints();
    let vals = path.values();
    let end = bps.partition_point(|&b| b <= upto);
    for k in 0..end {
        if zeros.contains(vals[k]) || model.h(vals[k]) < H_FLOOR {
            return Err(Error::DegenerateRegime(format!("the path sits at a zero of H ({}) at time {}", vals[k], bps[k])));
        }
        if k + 1 < end {
            if let Some(z) = zeros.first_between(vals[k], vals[k + 1]) {
                return Err(Error::DegenerateRegime(format!("the path crosses the zero {} of H near time {}", z.point, bps[k + 1])));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{HFunction, SigmaTilde};
    use crate::paths::{sample_path, ProcessSpec};
    use proptest::prelude::*;

    fn grid(step: f64, end: f64) -> Vec<f64> {
        let n = (end / step).round() as usize;
        (0..=n).map(|i| i as f64 * step).collect()
    }

    fn linear_t() -> CoefficientModel {
        CoefficientModel::new(HFunction::Constant { value: 1.0 }, SigmaTilde::LinearT { intercept: 1.0, slope: 1.0 }, 1.0).unwrap()
    }

    #[test]
    fn identity_clock() {
        let clock = solve_caratheodory(|_, _| 1.0, 10.0, 3.0, 1e-9).unwrap();
        assert_eq!(clock.terminal, Terminal::Horizon);
        assert_eq!(clock.end(), 3.0);
        for (&u, &c) in clock.nodes.iter().zip(&clock.values) {
            assert_eq!(u, c);
        }
        assert!((clock.at(1.3).unwrap() - 1.3).abs() < 1e-15);
    }

    #[test]
    fn separable_clock_matches_closed_form() {
        let checkpoints = [0.5, 1.0, 2.0];
        let clock = solve_caratheodory_with(|r, _| 1.0 / (1.0 + r), 100.0, 2.0, &checkpoints, &[], &SolverSettings::default()).unwrap();
        for t in checkpoints {
            let exact = (1.0 + 2.0 * t).sqrt() - 1.0;
            assert!((clock.at(t).unwrap() - exact).abs() <= 1e-8, "t = {t}");
        }
        // between nodes the Hermite interpolant stays close
        for i in 0..40 {
            let t = 0.05 * i as f64;
            assert!((clock.at(t).unwrap() - ((1.0 + 2.0 * t).sqrt() - 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn dichotomy_hits_target_exactly() {
        let clock = solve_caratheodory(|_, _| 2.0, 1.0, 3.0, 1e-9).unwrap();
        assert_eq!(clock.terminal, Terminal::HitS { at: 0.5 });
        assert_eq!(clock.final_value(), 1.0);
        assert_eq!(clock.crossings, vec![0.5]);
    }

    #[test]
    fn negative_integrand_is_a_numeric_failure() {
        let err = solve_caratheodory(|_, u| if u > 0.3 { -1.0 } else { 1.0 }, 1.0, 2.0, 1e-9).unwrap_err();
        match err {
            Error::NumericFailure { s, .. } => assert!(s > 0.3),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(solve_caratheodory(|_, _| f64::NAN, 1.0, 2.0, 1e-9), Err(Error::NumericFailure { .. })));
    }

    #[test]
    fn breakpoints_use_left_limits() {
        // gamma = 1 before u = 0.3 and 3 after
        let clock = solve_caratheodory_with(|_, u| if u < 0.3 { 1.0 } else { 3.0 }, 1.0, 5.0, &[0.3], &[0.3, 0.6, 1.0], &SolverSettings::default()).unwrap();
        let i = clock.nodes.iter().position(|&n| n == 0.3).unwrap();
        assert!((clock.values[i] - 0.3).abs() < 1e-15);
        assert!((clock.crossings[0] - 0.3).abs() < 1e-12);
        assert!((clock.crossings[1] - 0.4).abs() < 1e-12);
        assert_eq!(clock.terminal, Terminal::HitS { at: clock.crossings[2] });
        assert!((clock.crossings[2] - (0.3 + 0.7 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn identity_time_change() {
        let path = sample_path(&ProcessSpec::BrownianMotion { x0: 0.0 }, 1.5, 1e-3, 3).unwrap();
        let tg = grid(0.05, 1.0);
        let tc = build_time_change(&path, &CoefficientModel::identity(1.0), &tg, 1e-9).unwrap();
        for (&t, &tau) in tg.iter().zip(&tc.tau) {
            assert!((t - tau).abs() <= 1e-9, "{t} {tau}");
        }
        assert_eq!(tc.frozen_from, None);
    }

    #[test]
    fn deterministic_clock_matches_closed_form() {
        let path = sample_path(&ProcessSpec::BrownianMotion { x0: 0.0 }, 2.0, 1e-3, 5).unwrap();
        let tg = grid(0.05, 1.0);
        let tc = build_time_change(&path, &linear_t(), &tg, 1e-9).unwrap();
        for (&t, &tau) in tg.iter().zip(&tc.tau) {
            assert!((tau - (t + 0.5 * t * t)).abs() <= 1e-8, "{t}: {tau}");
        }
    }

    fn absorbing_chain() -> (ProcessSpec, CoefficientModel) {
        let spec = ProcessSpec::Ctmc {
            states: vec![1.0, 3.0, 2.0],
            rate_matrix: vec![vec![-2.0, 1.0, 1.0], vec![1.0, -2.0, 1.0], vec![0.0, 0.0, 0.0]],
            initial_state_index: 0,
        };
        let h = HFunction::PowerLaw { exponent: 1.0, center: 2.0, coefficient: 1.0 };
        let model = CoefficientModel::new(h, SigmaTilde::LinearT { intercept: 1.0, slope: 1.0 }, 1.0).unwrap();
        (spec, model)
    }

    #[test]
    fn absorbed_chain_freezes_at_the_jump() {
        let (spec, model) = absorbing_chain();
        let tg = grid(0.01, 1.0);
        let mut frozen = 0;
        for seed in 0..200 {
            let path = sample_path(&spec, 3.0, 0.01, seed).unwrap();
            let tc = build_time_change(&path, &model, &tg, 1e-9).unwrap();
            let x = apply_time_change(&path, &tc).unwrap();
            if let Some(f) = tc.frozen_from {
                frozen += 1;
                let rho = tc.rho.unwrap();
                let k = path.values().iter().position(|&v| v == 2.0).unwrap();
                assert_eq!(rho, path.breakpoints()[k]);
                assert!(x.values()[f..].iter().all(|&v| v == 2.0));
                assert!(tc.tau[f..].iter().all(|&t| t == rho));
                assert!(f == 0 || tc.tau[f - 1] < rho);
            }
            let r = fixed_point_residual_with(&path, &x, &model, &tg, StateMetric::Discrete, FIXED_POINT_WINDOW).unwrap();
            assert_eq!(r, 0.0, "seed {seed}");
        }
        assert!(frozen > 50);
    }

    #[test]
    fn zero_h_freezes_immediately() {
        let model = CoefficientModel::new(HFunction::Constant { value: 0.0 }, SigmaTilde::Constant { value: 1.0 }, 1.0).unwrap();
        let path = sample_path(&ProcessSpec::BrownianMotion { x0: 0.7 }, 1.0, 1e-2, 1).unwrap();
        let tc = build_time_change(&path, &model, &grid(0.1, 1.0), 1e-9).unwrap();
        assert_eq!(tc.frozen_from, Some(0));
        assert!(tc.tau.iter().all(|&t| t == 0.0));
        assert!(apply_time_change(&path, &tc).unwrap().values().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn short_base_path_exhausts_the_horizon() {
        let path = sample_path(&ProcessSpec::BrownianMotion { x0: 0.0 }, 0.5, 1e-2, 1).unwrap();
        let err = build_time_change(&path, &CoefficientModel::identity(1.0), &grid(0.1, 1.0), 1e-9).unwrap_err();
        assert!(matches!(err, Error::HorizonExhausted { .. }), "{err}");
    }

    #[test]
    fn shifted_model_holds_after_cutoff() {
        let tg = grid(0.1, 1.0);
        let path = sample_path(&ProcessSpec::BrownianMotion { x0: 0.0 }, 2.0, 1e-3, 9).unwrap();
        let tc = build_time_change(&path, &CoefficientModel::identity(1.0).shifted(0.3), &tg, 1e-9).unwrap();
        for (&t, &tau) in tg.iter().zip(&tc.tau) {
            assert!((tau - t.min(0.7)).abs() < 1e-9);
        }
        let late = build_time_change(&path, &CoefficientModel::identity(1.0).shifted(2.0), &tg, 1e-9).unwrap();
        assert!(late.tau.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn apply_examples() {
        let path = RcllPath::new(vec![0.0, 0.5], vec![1.0, 4.0], 2.0, PathKind::PiecewiseConstant).unwrap();
        let tg = grid(0.1, 1.0);
        let tc = TimeChange { tgrid: tg.clone(), tau: tg.iter().map(|t| 2.0 * t).collect(), rho: None, frozen_from: None, solver_stats: SolverStats::default() };
        let x = apply_time_change(&path, &tc).unwrap();
        assert_eq!(x.values()[2], 1.0);
        assert_eq!(x.values()[3], 4.0);
        let constant = RcllPath::constant(3.0, 2.0, PathKind::PiecewiseConstant).unwrap();
        assert!(apply_time_change(&constant, &tc).unwrap().values().iter().all(|&v| v == 3.0));
        let too_far = TimeChange { tau: tg.iter().map(|t| 3.0 * t).collect(), ..tc };
        assert!(matches!(apply_time_change(&path, &too_far), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn fixed_point_is_exact_for_identity_and_linear_clock() {
        let tg = grid(0.05, 1.0);
        for seed in 0..20 {
            let path = sample_path(&ProcessSpec::BrownianMotion { x0: 0.0 }, 2.0, 1e-3, seed).unwrap();
            for model in [CoefficientModel::identity(1.0), linear_t()] {
                let tc = build_time_change(&path, &model, &tg, 1e-9).unwrap();
                let x = apply_time_change(&path, &tc).unwrap();
                assert_eq!(fixed_point_residual(&path, &x, &model, &tg).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn fixed_point_residual_shrinks_under_refinement() {
        let spec = ProcessSpec::BrownianMotion { x0: 0.0 };
        let model = CoefficientModel::new(HFunction::Sine { offset: 2.0, amplitude: 1.0 }, SigmaTilde::LinearT { intercept: 1.0, slope: 0.5 }, 1.0).unwrap();
        let (mut coarse_total, mut fine_total) = (0.0, 0.0);
        for seed in 0..20 {
            let fine = sample_path(&spec, 6.0, 1e-3 / 4.0, seed).unwrap();
            let coarse = fine.decimate(4).unwrap();
            for (path, total, step) in [(&coarse, &mut coarse_total, 0.01), (&fine, &mut fine_total, 0.0025)] {
                let tg = grid(step, 1.0);
                let tc = build_time_change(path, &model, &tg, 1e-9).unwrap();
                let x = apply_time_change(path, &tc).unwrap();
                *total += fixed_point_residual(path, &x, &model, &tg).unwrap();
            }
        }
        assert!(fine_total < coarse_total, "{fine_total} vs {coarse_total}");
    }

    #[test]
    fn forward_euler_examples() {
        let path = sample_path(&ProcessSpec::BrownianMotion { x0: 0.0 }, 3.0, 1e-3, 2).unwrap();
        let tg = grid(0.01, 1.0);
        let c = CoefficientModel::new(HFunction::Constant { value: 1.0 }, SigmaTilde::Constant { value: 2.5 }, 1.0).unwrap();
        let tc = forward_euler_time_change(&path, &c, &tg).unwrap();
        for (&t, &tau) in tg.iter().zip(&tc.tau) {
            assert!((tau - 2.5 * t).abs() < 1e-13);
        }
        let euler = forward_euler_time_change(&path, &linear_t(), &tg).unwrap();
        let exact = build_time_change(&path, &linear_t(), &tg, 1e-9).unwrap();
        for (a, b) in euler.tau.iter().zip(&exact.tau) {
            assert!((a - b).abs() <= 10.0 * 0.01);
        }
        let zero = CoefficientModel::new(HFunction::PowerLaw { exponent: 2.0, center: 0.0, coefficient: 1.0 }, SigmaTilde::Constant { value: 1.0 }, 1.0).unwrap();
        let crossing = sample_path(&ProcessSpec::BrownianMotion { x0: 0.0 }, 3.0, 1e-3, 2).unwrap();
        assert!(matches!(forward_euler_time_change(&crossing, &zero, &tg), Err(Error::DegenerateRegime(_))));
    }

    #[test]
    fn constructions_agree_to_first_order() {
        let model = CoefficientModel::new(HFunction::Sine { offset: 2.0, amplitude: 1.0 }, SigmaTilde::LinearT { intercept: 1.0, slope: 0.5 }, 1.0).unwrap();
        let spec = ProcessSpec::Ctmc {
            states: vec![-1.0, 0.0, 1.0],
            rate_matrix: vec![vec![-1.0, 1.0, 0.0], vec![0.5, -1.0, 0.5], vec![0.0, 1.0, -1.0]],
            initial_state_index: 1,
        };
        let mut gaps = Vec::new();
        for step in [0.01, 0.005, 0.0025] {
            let mut worst: f64 = 0.0;
            for seed in 0..50 {
                let path = sample_path(&spec, 6.0, 0.1, seed).unwrap();
                let tg = grid(step, 1.0);
                let a = build_time_change(&path, &model, &tg, 1e-9).unwrap();
                let b = forward_euler_time_change(&path, &model, &tg).unwrap();
                let gap = a.tau.iter().zip(&b.tau).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                worst = worst.max(gap / step);
            }
            gaps.push(worst);
        }
        let c = gaps.iter().cloned().fold(0.0, f64::max);
        assert!(c < 50.0, "{gaps:?}");
    }

    #[test]
    fn change_of_variables_holds() {
        let model = CoefficientModel::new(HFunction::Sine { offset: 2.0, amplitude: 1.0 }, SigmaTilde::LinearT { intercept: 1.0, slope: 0.5 }, 1.0).unwrap();
        let spec = ProcessSpec::Ctmc {
            states: vec![-1.0, 0.0, 1.0],
            rate_matrix: vec![vec![-1.0, 1.0, 0.0], vec![0.5, -1.0, 0.5], vec![0.0, 1.0, -1.0]],
            initial_state_index: 1,
        };
        let g = |x: f64| (x * 1.3).cos();
        let step = 1e-4;
        let tg = grid(step, 1.0);
        for seed in 0..10 {
            let path = sample_path(&spec, 6.0, 0.1, seed).unwrap();
            let tc = build_time_change(&path, &model, &tg, 1e-9).unwrap();
            let x = apply_time_change(&path, &tc).unwrap();
            let tau_end = tc.tau[tc.tau.len() - 1];
            // exact integral of the step path
            let bps = path.breakpoints();
            let lhs: f64 = (0..path.len())
                .map(|k| {
                    let (a, b) = (bps[k], path.segment_end(k).min(tau_end));
                    if b > a { (b - a) * g(path.values()[k]) } else { 0.0 }
                })
                .sum();
            let rhs: f64 = tg.windows(2).map(|w| {
                let xv = x.value_at(w[0]);
                0.5 * (w[1] - w[0]) * g(xv) * (model.evaluate_sigma(w[0], xv) + model.evaluate_sigma(w[1], xv))
            }).sum();
            let jumps = bps.iter().filter(|&&b| b <= tau_end).count() as f64;
            assert!((lhs - rhs).abs() <= 3.0 * 2.0 * jumps * step + 1e-9, "seed {seed}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn csv_export() {
        let tc = TimeChange { tgrid: vec![0.0, 0.5], tau: vec![0.0, 0.25], rho: Some(0.25), frozen_from: Some(1), solver_stats: SolverStats::default() };
        let mut buf = Vec::new();
        tc.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,tau,frozen\r\n"));
        assert!(text.ends_with(",1\r\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn tau_is_monotone_lipschitz_and_after_first_zero(seed in 0u64..10_000, exponent in prop::sample::select(vec![0.5, 1.0, 2.0])) {
            let model = CoefficientModel::new(
                HFunction::PowerLaw { exponent, center: 0.3, coefficient: 1.0 },
                SigmaTilde::LinearT { intercept: 1.0, slope: 1.0 },
                1.0,
            ).unwrap();
            let path = sample_path(&ProcessSpec::BrownianMotion { x0: 0.0 }, 8.0, 1e-3, seed).unwrap();
            let tg = grid(0.05, 1.0);
            let tc = match build_time_change(&path, &model, &tg, 1e-9) {
                Ok(tc) => tc,
                Err(Error::HorizonExhausted { .. }) => return Ok(()),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            prop_assert_eq!(tc.tau[0], 0.0);
            prop_assert!(tc.tau.windows(2).all(|w| w[1] >= w[0]));
            for j in 1..tg.len() {
                let (a, b) = (tc.tau[j - 1], tc.tau[j]);
                let lo = path.segment_index(a);
                let hi = path.segment_index(b);
                let max_sigma = path.values()[lo..=hi].iter().map(|&x| model.evaluate_sigma(tg[j], x)).fold(0.0, f64::max);
                prop_assert!(b - a <= (max_sigma + 1e-9) * (tg[j] - tg[j - 1]) + 1e-9);
            }
            if let Some(f) = tc.frozen_from {
                let x = apply_time_change(&path, &tc).unwrap();
                prop_assert!(x.values()[f..].iter().all(|&v| v == x.values()[f]));
                let scan = scan_rho(&model, &path, 1e8);
                prop_assert!(scan.rho0.unwrap() <= tc.rho.unwrap());
            }
        }
    }
}

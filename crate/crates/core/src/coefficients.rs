//! Degenerate coefficients `sigma(t, x) = H(x) * sigma_tilde(t, x)` with a
//! hard cutoff after `t0`, plus the diagnostics that go with them: bound
//! estimates for `sigma_tilde`, classification of the zeros of `H` by
//! integrability of `1/H`, and a per-path regularity probe.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::paths::{PathKind, RcllPath};

/// Values of `H` below this count as zeros.
pub const H_FLOOR: f64 = f64::MIN_POSITIVE;

const ZERO_MATCH_TOL: f64 = 1e-12;

/// A zero of `H` with its local power-law exponent, `H(x) ~ c |x - z|^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredZero {
    pub point: f64,
    pub exponent: Option<f64>,
}

/// Where `H` vanishes.
#[derive(Debug, Clone, PartialEq)]
pub enum ZeroSet {
    Empty,
    Everywhere,
    Points(Vec<DeclaredZero>),
    /// `phase + k * period` for all integers `k`.
    Periodic { phase: f64, period: f64, exponent: f64 },
}

impl ZeroSet {
    /// The zero matching `x`, if any.
    pub fn locate(&self, x: f64) -> Option<DeclaredZero> {
        let close = |z: f64| (x - z).abs() <= ZERO_MATCH_TOL * x.abs().max(1.0);
        match self {
            ZeroSet::Empty => None,
            ZeroSet::Everywhere => Some(DeclaredZero { point: x, exponent: Some(0.0) }),
            ZeroSet::Points(zs) => zs.iter().copied().find(|z| close(z.point)),
            ZeroSet::Periodic { phase, period, exponent } => {
                let z = phase + ((x - phase) / period).round() * period;
                close(z).then_some(DeclaredZero { point: z, exponent: Some(*exponent) })
            }
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.locate(x).is_some()
    }

    /// First zero met when moving from `a` to `b` (both ends included).
    pub fn first_between(&self, a: f64, b: f64) -> Option<DeclaredZero> {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let nearest_to_a = |cands: &mut dyn Iterator<Item = DeclaredZero>| {
            cands.filter(|z| z.point >= lo && z.point <= hi).min_by(|p, q| (p.point - a).abs().total_cmp(&(q.point - a).abs()))
        };
        match self {
            ZeroSet::Empty => None,
            ZeroSet::Everywhere => Some(DeclaredZero { point: a, exponent: Some(0.0) }),
            ZeroSet::Points(zs) => nearest_to_a(&mut zs.iter().copied()),
            ZeroSet::Periodic { phase, period, exponent } => {
                let k = if a <= b { ((a - phase) / period).ceil() } else { ((a - phase) / period).floor() };
                let z = phase + k * period;
                (z >= lo && z <= hi).then_some(DeclaredZero { point: z, exponent: Some(*exponent) })
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, ZeroSet::Empty)
    }
}

/// The spatial factor `H`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HFunction {
    Constant { value: f64 },
    /// `coefficient * |x - center|^exponent`.
    PowerLaw {
        exponent: f64,
        #[serde(default)]
        center: f64,
        #[serde(default = "one")]
        coefficient: f64,
    },
    /// `offset + amplitude * sin(x)`.
    Sine { offset: f64, amplitude: f64 },
    #[serde(skip)]
    Custom { eval: Arc<dyn Fn(f64) -> f64 + Send + Sync>, zeros: Vec<DeclaredZero> },
}

fn one() -> f64 {
    1.0
}

impl fmt::Debug for HFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HFunction::Constant { value } => write!(f, "Constant({value})"),
            HFunction::PowerLaw { exponent, center, coefficient } => {
                write!(f, "PowerLaw({coefficient}*|x-{center}|^{exponent})")
            }
            HFunction::Sine { offset, amplitude } => write!(f, "Sine({offset}+{amplitude}*sin x)"),
            HFunction::Custom { zeros, .. } => write!(f, "Custom(zeros={zeros:?})"),
        }
    }
}

impl HFunction {
    pub fn custom(eval: impl Fn(f64) -> f64 + Send + Sync + 'static, zeros: Vec<DeclaredZero>) -> Self {
        HFunction::Custom { eval: Arc::new(eval), zeros }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            HFunction::Constant { value } => *value,
            HFunction::PowerLaw { exponent, center, coefficient } => coefficient * (x - center).abs().powf(*exponent),
            HFunction::Sine { offset, amplitude } => offset + amplitude * x.sin(),
            HFunction::Custom { eval, .. } => eval(x),
        }
    }

    pub fn zero_set(&self) -> ZeroSet {
        match self {
            HFunction::Constant { value } if *value == 0.0 => ZeroSet::Everywhere,
            HFunction::Constant { .. } => ZeroSet::Empty,
            HFunction::PowerLaw { coefficient, .. } if *coefficient == 0.0 => ZeroSet::Everywhere,
            HFunction::PowerLaw { exponent, .. } if *exponent == 0.0 => ZeroSet::Empty,
            HFunction::PowerLaw { exponent, center, .. } => {
                ZeroSet::Points(vec![DeclaredZero { point: *center, exponent: Some(*exponent) }])
            }
            HFunction::Sine { offset, amplitude } if *amplitude == 0.0 => {
                if *offset == 0.0 {
                    ZeroSet::Everywhere
                } else {
                    ZeroSet::Empty
                }
            }
            HFunction::Sine { offset, amplitude } if *offset == amplitude.abs() => {
                let phase = if *amplitude > 0.0 { -FRAC_PI_2 } else { FRAC_PI_2 };
                ZeroSet::Periodic { phase, period: 2.0 * PI, exponent: 2.0 }
            }
            HFunction::Sine { .. } => ZeroSet::Empty,
            HFunction::Custom { zeros, .. } if zeros.is_empty() => ZeroSet::Empty,
            HFunction::Custom { zeros, .. } => ZeroSet::Points(zeros.clone()),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            HFunction::Constant { value } if !(*value >= 0.0 && value.is_finite()) => {
                Err(invalid(format!("constant H must be finite and nonnegative, got {value}")))
            }
            HFunction::PowerLaw { exponent, coefficient, center }
                if !(*exponent >= 0.0 && *coefficient >= 0.0 && exponent.is_finite() && coefficient.is_finite() && center.is_finite()) =>
            {
                Err(invalid("power-law H needs a finite nonnegative exponent and coefficient"))
            }
            HFunction::Sine { offset, amplitude } if !(*offset >= amplitude.abs()) => {
                Err(invalid(format!("sine H = {offset} + {amplitude} sin x takes negative values")))
            }
            _ => Ok(()),
        }
    }
}

/// The space-time factor `sigma_tilde`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaTilde {
    Constant { value: f64 },
    /// `intercept + slope * t`.
    LinearT { intercept: f64, slope: f64 },
    /// `exp(x)`.
    ExpX,
    #[serde(skip)]
    Custom(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for SigmaTilde {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaTilde::Constant { value } => write!(f, "Constant({value})"),
            SigmaTilde::LinearT { intercept, slope } => write!(f, "LinearT({intercept}+{slope}t)"),
            SigmaTilde::ExpX => write!(f, "ExpX"),
            SigmaTilde::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl SigmaTilde {
    pub fn custom(eval: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        SigmaTilde::Custom(Arc::new(eval))
    }

    #[inline]
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        match self {
            SigmaTilde::Constant { value } => *value,
            SigmaTilde::LinearT { intercept, slope } => intercept + slope * t,
            SigmaTilde::ExpX => x.exp(),
            SigmaTilde::Custom(f) => f(t, x),
        }
    }
}

/// User-declared `(C1, C2, C3)` for a compact window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredBounds {
    pub window: (f64, f64),
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

/// `sigma(t, x) = H(x) sigma_tilde(t, x)` for `t <= t0` and `0` afterwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientModel {
    pub h: HFunction,
    pub sigma_tilde: SigmaTilde,
    pub t0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_bounds: Option<DeclaredBounds>,
    /// Evaluate at `time_shift + t`; set by [`CoefficientModel::shifted`].
    #[serde(skip)]
    time_shift: f64,
}

impl CoefficientModel {
    pub fn new(h: HFunction, sigma_tilde: SigmaTilde, t0: f64) -> Result<Self> {
        let model = Self { h, sigma_tilde, t0, declared_bounds: None, time_shift: 0.0 };
        model.validate()?;
        Ok(model)
    }

    /// `H = 1`, `sigma_tilde = 1`.
    pub fn identity(t0: f64) -> Self {
        Self::new(HFunction::Constant { value: 1.0 }, SigmaTilde::Constant { value: 1.0 }, t0).expect("identity model is valid")
    }

    pub fn with_declared_bounds(mut self, bounds: DeclaredBounds) -> Self {
        self.declared_bounds = Some(bounds);
        self
    }

    /// Checks `t0 > 0`, `H >= 0` on 1000 probes in `[-10, 10]` and
    /// `sigma_tilde > 0` on `[0, 0.99 t0] x [-5, 5]`.
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return Err(invalid(format!("t0 must be positive, got {}", self.t0)));
        }
        self.h.validate()?;
        for i in 0..1000 {
            let x = -10.0 + 20.0 * i as f64 / 999.0;
            let hx = self.h.eval(x);
            if !(hx >= 0.0) {
                return Err(invalid(format!("H({x}) = {hx} is negative or NaN")));
            }
        }
        let s_max = self.t0 - self.t0 / 100.0;
        for i in 0..20 {
            let t = s_max * i as f64 / 19.0;
            for j in 0..20 {
                let x = -5.0 + 10.0 * j as f64 / 19.0;
                let v = self.sigma_tilde.eval(t, x);
                if !(v > 0.0 && v.is_finite()) {
                    return Err(invalid(format!("sigma_tilde({t}, {x}) = {v} is not positive")));
                }
            }
        }
        Ok(())
    }

    /// The model seen from time `s0`: `sigma_{s0}(t, x) = sigma(s0 + t, x)`.
    pub fn shifted(&self, s0: f64) -> Self {
        let mut out = self.clone();
        out.time_shift += s0;
        out
    }

    pub fn time_shift(&self) -> f64 {
        self.time_shift
    }

    /// Last time (in this model's clock) at which `sigma` may be nonzero.
    pub fn cutoff(&self) -> f64 {
        self.t0 - self.time_shift
    }

    #[inline]
    pub fn h(&self, x: f64) -> f64 {
        self.h.eval(x)
    }

    #[inline]
    pub fn sigma_tilde(&self, t: f64, x: f64) -> f64 {
        self.sigma_tilde.eval(t + self.time_shift, x)
    }

    /// `sigma(t, x)`; zero after the cutoff.
    #[inline]
    pub fn evaluate_sigma(&self, t: f64, x: f64) -> f64 {
        let u = t + self.time_shift;
        if u > self.t0 {
            return 0.0;
        }
        self.h.eval(x) * self.sigma_tilde.eval(u, x)
    }

    pub fn zero_set(&self) -> ZeroSet {
        self.h.zero_set()
    }

    /// Whether `sigma` is known not to depend on `x`, so the clock is
    /// deterministic. Custom coefficients count as state dependent.
    pub fn is_state_independent(&self) -> bool {
        matches!(self.h, HFunction::Constant { .. }) && matches!(self.sigma_tilde, SigmaTilde::Constant { .. } | SigmaTilde::LinearT { .. })
    }

    /// Whether `sigma_tilde` stays positive and finite at `t0` itself, in
    /// which case the plain generalized inverse is used up to `t0`.
    pub fn bounds_hold_at_t0(&self) -> bool {
        (0..=20).all(|j| {
            let x = -5.0 + 0.5 * j as f64;
            let v = self.sigma_tilde.eval(self.t0, x);
            v > 0.0 && v.is_finite()
        })
    }
}

// ---------------------------------------------------------------------------
// Bound estimates

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub c1_est: f64,
    pub c2_est: f64,
    pub c3_est: f64,
    pub h_max_est: f64,
    pub lipschitz_ok: bool,
    pub bounds_ok: bool,
    pub declared_bounds_respected: Option<bool>,
}

/// Lattice estimates of the Lipschitz constant and bounds of
/// `sigma_tilde` on `[0, s] x window`.
pub fn check_assumptions(model: &CoefficientModel, window: (f64, f64), s: f64, lattice: (usize, usize)) -> Result<AssumptionReport> {
    let cutoff = model.cutoff();
    if !(s > 0.0 && s < cutoff) {
        return Err(invalid(format!("S = {s} must lie in (0, t0 = {cutoff})")));
    }
    let (a, b) = window;
    if !(a <= b) || !a.is_finite() || !b.is_finite() {
        return Err(invalid("window must be a finite interval"));
    }
    let (nt, nx) = lattice;
    if nt < 2 || nx < 1 {
        return Err(invalid("lattice needs at least 2 time points and 1 space point"));
    }
    let xs: Vec<f64> = (0..nx).map(|j| if nx == 1 { a } else { a + (b - a) * j as f64 / (nx - 1) as f64 }).collect();
    let ts: Vec<f64> = (0..nt).map(|i| s * i as f64 / (nt - 1) as f64).collect();
    let mut c1: f64 = 0.0;
    let mut c2 = f64::INFINITY;
    let mut c3 = f64::NEG_INFINITY;
    let mut finite = true;
    let mut h_max: f64 = 0.0;
    for &x in &xs {
        let hx = model.h(x);
        finite &= hx.is_finite();
        h_max = h_max.max(hx);
        let mut prev: Option<f64> = None;
        for &t in &ts {
            let v = model.sigma_tilde(t, x);
            finite &= v.is_finite();
            c2 = c2.min(v);
            c3 = c3.max(v);
            if let Some(p) = prev {
                c1 = c1.max((v - p).abs() / (s / (nt - 1) as f64));
            }
            prev = Some(v);
        }
    }
    let declared_bounds_respected = model.declared_bounds.map(|d| {
        let covers = d.window.0 <= a && b <= d.window.1;
        !covers || (c1 <= d.c1 + 1e-12 && c2 >= d.c2 - 1e-12 && c3 <= d.c3 + 1e-12)
    });
    Ok(AssumptionReport {
        c1_est: c1,
        c2_est: c2,
        c3_est: c3,
        h_max_est: h_max,
        lipschitz_ok: finite && c1.is_finite(),
        bounds_ok: finite && c2 > 0.0,
        declared_bounds_respected,
    })
}

// ---------------------------------------------------------------------------
// Zero classification

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IhVerdict {
    #[serde(rename = "in_IH")]
    InIH,
    #[serde(rename = "not_in_IH")]
    NotInIH,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "route", rename_all = "snake_case")]
pub enum ClassificationEvidence {
    /// Rule `in I(H) iff p >= 1` on a declared exponent.
    DeclaredExponent { exponent: f64 },
    /// Geometric-shell quadrature of `1/H` around the zero.
    Quadrature {
        partial_sum: f64,
        shells: usize,
        /// Ratio of successive shell contributions near the finest shell.
        ratio: f64,
        /// Partial sum plus the geometric tail implied by `ratio` (infinite
        /// when the tail diverges).
        extrapolated: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroClassification {
    pub point: f64,
    pub verdict: IhVerdict,
    pub evidence: ClassificationEvidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureSettings {
    /// Shells narrower than this are not integrated.
    pub min_shell_width: f64,
    pub divergence_threshold: f64,
    pub cauchy_tol: f64,
    /// Number of trailing shells whose contribution ratios must agree.
    pub ratio_window: usize,
    pub ratio_tol: f64,
    /// How many further halvings the geometric tail may be extrapolated.
    pub max_extrapolated_shells: usize,
}

impl Default for QuadratureSettings {
    fn default() -> Self {
        Self {
            min_shell_width: 1e-10,
            divergence_threshold: 1e8,
            cauchy_tol: 1e-6,
            ratio_window: 6,
            ratio_tol: 1e-3,
            max_extrapolated_shells: 64,
        }
    }
}

const GL8_NODES: [f64; 4] = [0.183_434_642_495_649_8, 0.525_532_409_916_329, 0.796_666_477_413_626_7, 0.960_289_856_497_536_3];
const GL8_WEIGHTS: [f64; 4] = [0.362_683_783_378_362, 0.313_706_645_877_887_3, 0.222_381_034_453_374_5, 0.101_228_536_290_376_3];

/// 8-point Gauss-Legendre on `[a, b]`.
pub(crate) fn gauss_legendre8(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (x, w) in GL8_NODES.iter().zip(GL8_WEIGHTS) {
        acc += w * (f(mid - half * x) + f(mid + half * x));
    }
    acc * half
}

/// Classifies a zero of `H`: uses the declared exponent when there is one,
/// otherwise the quadrature route.
pub fn classify_zero(model: &CoefficientModel, z: f64, epsilon: f64, quad: &QuadratureSettings) -> Result<ZeroClassification> {
    let zeros = model.zero_set();
    if zeros.is_empty() {
        return Err(invalid("H has no zeros to classify"));
    }
    let declared = zeros.locate(z);
    if declared.is_none() && model.h(z).abs() > 1e-12 {
        return Err(invalid(format!("H({z}) = {} is not a zero", model.h(z))));
    }
    match declared.and_then(|d| d.exponent) {
        Some(p) => Ok(classify_by_exponent(z, p)),
        None => classify_by_quadrature(|x| model.h(x), z, epsilon, quad),
    }
}

pub fn classify_by_exponent(z: f64, exponent: f64) -> ZeroClassification {
    ZeroClassification {
        point: z,
        verdict: if exponent >= 1.0 { IhVerdict::InIH } else { IhVerdict::NotInIH },
        evidence: ClassificationEvidence::DeclaredExponent { exponent },
    }
}

/// Integrates `1/H` over the shells `eps 2^-(k+1) <= |y - z| <= eps 2^-k`
/// down to `min_shell_width` and reads off convergence from the trend of the
/// shell contributions.
pub fn classify_by_quadrature(h: impl Fn(f64) -> f64, z: f64, epsilon: f64, quad: &QuadratureSettings) -> Result<ZeroClassification> {
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon must be positive"));
    }
    let reciprocal = |y: f64| {
        let hy = h(y);
        if hy <= 0.0 {
            f64::INFINITY
        } else {
            1.0 / hy
        }
    };
    let mut contributions = Vec::new();
    let mut partial = 0.0;
    let mut outer = epsilon;
    while outer / 2.0 >= quad.min_shell_width {
        let inner = outer / 2.0;
        let c = gauss_legendre8(reciprocal, z + inner, z + outer) + gauss_legendre8(reciprocal, z - outer, z - inner);
        partial += c;
        contributions.push(c);
        if !partial.is_finite() || partial > quad.divergence_threshold {
            let shells = contributions.len();
            return Ok(ZeroClassification {
                point: z,
                verdict: IhVerdict::InIH,
                evidence: ClassificationEvidence::Quadrature { partial_sum: partial, shells, ratio: f64::NAN, extrapolated: f64::INFINITY },
            });
        }
        outer = inner;
    }
    let shells = contributions.len();
    let window = quad.ratio_window.max(2);
    if shells < window + 2 {
        return Err(invalid("epsilon too small for the shell window; raise epsilon or lower min_shell_width"));
    }
    let ratios: Vec<f64> = contributions.windows(2).map(|w| w[1] / w[0]).collect();
    let tail = &ratios[ratios.len() - window..];
    let ratio = tail[tail.len() - 1];
    let stable = tail.iter().all(|r| (r - ratio).abs() <= quad.ratio_tol * ratio.abs().max(1.0));
    let extrapolate = |k: usize| {
        // partial sum through shell k plus the geometric tail
        let s: f64 = contributions[..=k].iter().sum();
        let r = ratios[k - 1];
        if r < 1.0 - quad.ratio_tol {
            s + contributions[k] * r / (1.0 - r)
        } else {
            f64::INFINITY
        }
    };
    let last = shells - 1;
    let extrapolated = extrapolate(last);
    let evidence = |extrapolated| ClassificationEvidence::Quadrature { partial_sum: partial, shells, ratio, extrapolated };
    let verdict = if !stable {
        IhVerdict::Inconclusive
    } else if extrapolated.is_finite() {
        let previous = extrapolate(last - 1);
        if (extrapolated - previous).abs() < quad.cauchy_tol * extrapolated.abs().max(1.0) {
            IhVerdict::NotInIH
        } else {
            IhVerdict::Inconclusive
        }
    } else {
        // keep halving the shells at the observed ratio
        let mut s = partial;
        let mut c = contributions[last];
        let mut crossed = false;
        for _ in 0..quad.max_extrapolated_shells {
            c *= ratio;
            s += c;
            if s > quad.divergence_threshold {
                crossed = true;
                break;
            }
        }
        if crossed {
            IhVerdict::InIH
        } else {
            IhVerdict::Inconclusive
        }
    };
    Ok(ZeroClassification { point: z, verdict, evidence: evidence(extrapolated) })
}

// ---------------------------------------------------------------------------
// Blow-up scan and regularity

/// Result of scanning one base path for zeros of `H` and for the blow-up of
/// `int_0^s 1/H(M_u) du`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoScan {
    /// First entry into the zero set.
    pub rho0: Option<f64>,
    /// First time the running integral of `1/H` diverges.
    pub rho: Option<f64>,
    /// State the path is at when the integral diverges.
    pub rho_state: Option<f64>,
    /// Largest cell width around the detected times; the resolution of `rho`.
    pub resolution: f64,
}

/// Integral of `1/H` along the straight line from `a` to `b`, per unit of
/// state, when the line crosses the zero `z` with exponent `p < 1`.
fn crossing_integral(h: &HFunction, a: f64, b: f64, z: f64, p: f64) -> f64 {
    // substitute y = |x - z|^(1 - p); the integrand is then bounded near z
    let q = 1.0 - p;
    let side = |end: f64| {
        let dist = (end - z).abs();
        if dist == 0.0 {
            return 0.0;
        }
        let dir = (end - z).signum();
        let ymax = dist.powf(q);
        gauss_legendre8(
            |y| {
                let x = z + dir * y.powf(1.0 / q);
                let hx = h.eval(x);
                if hx <= 0.0 {
                    return f64::INFINITY;
                }
                y.powf(p / q) / (q * hx)
            },
            0.0,
            ymax,
        )
    };
    side(a) + side(b)
}

fn local_exponent(h: &HFunction, zero: DeclaredZero) -> f64 {
    zero.exponent.unwrap_or_else(|| {
        let d = 1e-6;
        let (h1, h2) = (h.eval(zero.point + d), h.eval(zero.point + 2.0 * d));
        if h1 > 0.0 && h2 > 0.0 {
            (h2 / h1).log2()
        } else {
            f64::INFINITY
        }
    })
}

/// Scans `path` for the first zero entry `rho0` and the divergence time `rho`
/// of `int 1/H(M_u) du`.
///
/// A segment spent at a zero of `H` (or at `H < H_FLOOR`) diverges at its
/// start. Mesh paths are read as straight lines inside each cell when a zero
/// is crossed: exponents `p >= 1` diverge there, reported at the mesh point
/// closing the cell, and smaller exponents add the finite crossing integral. Elsewhere the step value is used.
pub fn scan_rho(model: &CoefficientModel, path: &RcllPath, divergence_threshold: f64) -> RhoScan {
    let zeros = model.zero_set();
    let mut scan = RhoScan { rho0: None, rho: None, rho_state: None, resolution: 0.0 };
    if matches!(zeros, ZeroSet::Everywhere) {
        scan.rho0 = Some(0.0);
        scan.rho = Some(0.0);
        scan.rho_state = Some(path.initial());
        return scan;
    }
    let bps = path.breakpoints();
    let vals = path.values();
    let mut integral = 0.0;
    for k in 0..path.len() {
        let start = bps[k];
        let end = path.segment_end(k);
        let width = end - start;
        let v = vals[k];
        let hv = model.h(v);
        let at_zero = zeros.contains(v) || hv < H_FLOOR;
        if at_zero {
            scan.rho0.get_or_insert(start);
            scan.resolution = scan.resolution.max(width);
            if width > 0.0 {
                scan.rho = Some(start);
                scan.rho_state = Some(v);
                return scan;
            }
            continue;
        }
        let next = (path.kind() == PathKind::MeshSampled).then(|| vals.get(k + 1).copied()).flatten();
        if let Some(next) = next {
            if let Some(zero) = zeros.first_between(v, next) {
                scan.rho0.get_or_insert(end);
                scan.resolution = scan.resolution.max(width);
                let p = local_exponent(&model.h, zero);
                if p >= 1.0 {
                    scan.rho = Some(end);
                    scan.rho_state = Some(zero.point);
                    return scan;
                }
                integral += width / (next - v).abs() * crossing_integral(&model.h, v, next, zero.point, p);
                if integral > divergence_threshold {
                    scan.rho = Some(end);
                    scan.rho_state = Some(next);
                    return scan;
                }
                continue;
            }
        }
        let before = integral;
        integral += width / hv;
        if integral > divergence_threshold {
            scan.rho = Some(start + (divergence_threshold - before) * hv);
            scan.rho_state = Some(v);
            scan.resolution = scan.resolution.max(width);
            return scan;
        }
    }
    scan
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularityVerdict {
    pub rho0: Option<f64>,
    pub rho: Option<f64>,
    pub consistent: bool,
}

/// Per-path check that the blow-up time of `int 1/H` coincides with the
/// first zero hit and that `H` vanishes there.
pub fn regularity_probe(model: &CoefficientModel, paths: &[RcllPath], divergence_threshold: f64) -> Vec<RegularityVerdict> {
    paths.iter().map(|p| regularity_of(model, p, divergence_threshold)).collect()
}

pub fn regularity_of(model: &CoefficientModel, path: &RcllPath, divergence_threshold: f64) -> RegularityVerdict {
    let scan = scan_rho(model, path, divergence_threshold);
    let consistent = match (scan.rho0, scan.rho) {
        (None, None) => true,
        (Some(r0), Some(r)) => {
            let slack = if path.kind() == PathKind::MeshSampled { scan.resolution } else { 0.0 };
            let h_at = scan.rho_state.map_or(f64::NAN, |x| model.h(x));
            (r - r0).abs() <= slack + 1e-12 && (h_at == 0.0 || model.zero_set().contains(scan.rho_state.unwrap_or(f64::NAN)))
        }
        _ => false,
    };
    RegularityVerdict { rho0: scan.rho0, rho: scan.rho, consistent }
}

/// Mean occupation time of the ball `B_radius(M_0)` at each horizon; a
/// recurrence trend, never a verdict.
pub fn recurrence_trend(paths: &[RcllPath], radius: f64, horizons: &[f64]) -> Result<Vec<f64>> {
    horizons
        .iter()
        .map(|&h| {
            let total: Result<f64> = paths.iter().map(|p| p.occupation_time(p.initial(), radius, h)).sum();
            Ok(total? / paths.len().max(1) as f64)
        })
        .collect()
}

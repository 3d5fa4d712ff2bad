//! Test functions with closed-form derivatives, the generators of the base
//! processes applied to them exactly, and empirical martingale residuals.

use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientModel;
use crate::error::{invalid, out_of_range, Result};
use crate::paths::{ProcessSpec, RcllPath};
use crate::stats::pairwise_sum;

/// A dictionary member: smooth, vanishing at infinity with its first two
/// derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    /// `exp(-1/(1-u^2))` for `|u| < 1`, `u = (x - center) / radius`.
    Bump { center: f64, radius: f64 },
    /// `v^degree exp(-v^2)`, `v = (x - center) / scale`.
    GaussPoly {
        degree: u32,
        scale: f64,
        #[serde(default)]
        center: f64,
    },
    /// Finite linear combination of dictionary members.
    Combination { terms: Vec<WeightedTerm> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedTerm {
    pub weight: f64,
    pub function: TestFunction,
}

/// `(f, f', f'')` at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet {
    const ZERO: Jet = Jet { value: 0.0, d1: 0.0, d2: 0.0 };
}

impl TestFunction {
    pub fn bump(center: f64, radius: f64) -> Self {
        TestFunction::Bump { center, radius }
    }

    pub fn gauss_poly(degree: u32, scale: f64) -> Self {
        TestFunction::GaussPoly { degree, scale, center: 0.0 }
    }

    pub fn combination(terms: impl IntoIterator<Item = (f64, TestFunction)>) -> Self {
        TestFunction::Combination { terms: terms.into_iter().map(|(weight, function)| WeightedTerm { weight, function }).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TestFunction::Bump { center, radius } => {
                if !(*radius > 0.0 && radius.is_finite() && center.is_finite()) {
                    return Err(invalid(format!("bump needs a finite center and positive radius, got {center}, {radius}")));
                }
            }
            TestFunction::GaussPoly { degree, scale, center } => {
                if *degree > 4 {
                    return Err(invalid(format!("gauss_poly degree must be <= 4, got {degree}")));
                }
                if !(*scale > 0.0 && scale.is_finite() && center.is_finite()) {
                    return Err(invalid("gauss_poly needs a positive scale"));
                }
            }
            TestFunction::Combination { terms } => {
                if terms.is_empty() {
                    return Err(invalid("combination needs at least one term"));
                }
                for t in terms {
                    if !t.weight.is_finite() {
                        return Err(invalid("combination weights must be finite"));
                    }
                    t.function.validate()?;
                }
            }
        }
        Ok(())
    }

    pub fn jet(&self, x: f64) -> Jet {
        match self {
            TestFunction::Bump { center, radius } => {
                let u = (x - center) / radius;
                let w = 1.0 - u * u;
                if w <= 0.0 {
                    return Jet::ZERO;
                }
                let value = (-1.0 / w).exp();
                // g(u) = -1/(1-u^2); f = exp(g), f' = f g', f'' = f (g'^2 + g'')
                let g1 = -2.0 * u / (w * w);
                let g2 = -(2.0 + 6.0 * u * u) / (w * w * w);
                Jet { value, d1: value * g1 / radius, d2: value * (g1 * g1 + g2) / (radius * radius) }
            }
            TestFunction::GaussPoly { degree, scale, center } => {
                let v = (x - center) / scale;
                let e = (-v * v).exp();
                let k = *degree as i32;
                let kf = k as f64;
                let pow = |n: i32| if n < 0 { 0.0 } else { v.powi(n) };
                let q0 = pow(k);
                let q1 = kf * pow(k - 1) - 2.0 * pow(k + 1);
                let q2 = kf * (kf - 1.0) * pow(k - 2) - 2.0 * (2.0 * kf + 1.0) * pow(k) + 4.0 * pow(k + 2);
                Jet { value: q0 * e, d1: q1 * e / scale, d2: q2 * e / (scale * scale) }
            }
            TestFunction::Combination { terms } => terms.iter().fold(Jet::ZERO, |acc, t| {
                let j = t.function.jet(x);
                Jet { value: acc.value + t.weight * j.value, d1: acc.d1 + t.weight * j.d1, d2: acc.d2 + t.weight * j.d2 }
            }),
        }
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match self {
            TestFunction::Bump { center, radius } => {
                let u = (x - center) / radius;
                let w = 1.0 - u * u;
                if w <= 0.0 {
                    0.0
                } else {
                    (-1.0 / w).exp()
                }
            }
            _ => self.jet(x).value,
        }
    }

    /// Closed support, if compact.
    pub fn support(&self) -> Option<(f64, f64)> {
        match self {
            TestFunction::Bump { center, radius } => Some((center - radius, center + radius)),
            TestFunction::GaussPoly { .. } => None,
            TestFunction::Combination { terms } => terms.iter().try_fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
                t.function.support().map(|(a, b)| (lo.min(a), hi.max(b)))
            }),
        }
    }
}

/// The default eight-function dictionary around `x0`: translated and
/// rescaled bumps.
pub fn default_dictionary(x0: f64) -> Vec<TestFunction> {
    vec![
        TestFunction::bump(x0 - 1.0, 1.5),
        TestFunction::bump(x0 - 0.5, 1.5),
        TestFunction::bump(x0, 1.5),
        TestFunction::bump(x0 + 0.5, 1.5),
        TestFunction::bump(x0 + 1.0, 1.5),
        TestFunction::bump(x0, 2.0),
        TestFunction::bump(x0 - 0.75, 2.5),
        TestFunction::bump(x0 + 0.75, 2.5),
    ]
}

/// A `C^1` time profile: zero outside `[t_on, t_off]`, one on the plateau,
/// cubic `2u^3 - 3u^2 + 1` ramps of width `t_off - t_plateau_end`. With
/// `t_on <= 0` the profile starts on its plateau at time 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoffFunction {
    pub t_on: f64,
    pub t_plateau_end: f64,
    pub t_off: f64,
}

impl CutoffFunction {
    pub fn new(t_on: f64, t_plateau_end: f64, t_off: f64) -> Result<Self> {
        let g = Self { t_on, t_plateau_end, t_off };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.t_off - self.t_plateau_end;
        if !(width > 0.0) || !(self.t_on <= self.t_plateau_end) {
            return Err(invalid("cutoff needs t_on <= t_plateau_end < t_off"));
        }
        if self.t_on > 0.0 && self.t_on + width > self.t_plateau_end {
            return Err(invalid("cutoff rise ramp overlaps the fall ramp; widen the plateau"));
        }
        Ok(())
    }

    fn ramp_width(&self) -> f64 {
        self.t_off - self.t_plateau_end
    }

    /// `(gamma(t), gamma'(t))`.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        let w = self.ramp_width();
        let fall = |u: f64| (2.0 * u * u * u - 3.0 * u * u + 1.0, (6.0 * u * u - 6.0 * u) / w);
        if t >= self.t_off || t < self.t_on.max(0.0) && self.t_on > 0.0 || t < 0.0 {
            return (0.0, 0.0);
        }
        if t > self.t_plateau_end {
            return fall((t - self.t_plateau_end) / w);
        }
        if self.t_on > 0.0 && t < self.t_on + w {
            // mirror of the fall ramp
            let (g, dg) = fall((self.t_on + w - t) / w);
            return (g, -dg);
        }
        (1.0, 0.0)
    }
}

/// `A f(x)` for the generator of `spec`.
pub fn apply_generator(spec: &ProcessSpec, f: &TestFunction, x: f64) -> Result<f64> {
    match spec {
        ProcessSpec::BrownianMotion { .. } => Ok(0.5 * f.jet(x).d2),
        ProcessSpec::CompoundPoisson { rate, jump_law, .. } => {
            let fx = f.value(x);
            Ok(rate * jump_law.iter().map(|a| a.probability * (f.value(x + a.value) - fx)).sum::<f64>())
        }
        ProcessSpec::Ctmc { states, rate_matrix, .. } => {
            let i = spec.state_index(x).ok_or_else(|| invalid(format!("{x} is not a state of the chain")))?;
            Ok(rate_matrix[i].iter().zip(states).map(|(q, &s)| q * f.value(s)).sum())
        }
    }
}

/// Mean and standard error of a martingale expression at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleStat {
    pub t: f64,
    pub mean: f64,
    /// `NaN` for a single path.
    pub standard_error: f64,
}

pub(crate) fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = pairwise_sum(samples) / n;
    if samples.len() < 2 {
        return (mean, f64::NAN);
    }
    let sq: Vec<f64> = samples.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, (pairwise_sum(&sq) / (n - 1.0) / n).sqrt())
}

/// Nodes from 0 through the last grid time, splitting every grid interval
/// into equal pieces no longer than `min spacing / factor`. Returns the nodes
/// and the node index of each grid time.
pub fn refine_grid(tgrid: &[f64], factor: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if tgrid.is_empty() {
        return Err(invalid("time grid is empty"));
    }
    if tgrid[0] < 0.0 || tgrid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("time grid must be nonnegative and strictly increasing"));
    }
    let factor = factor.max(1);
    let mut anchors = Vec::with_capacity(tgrid.len() + 1);
    if tgrid[0] > 0.0 {
        anchors.push(0.0);
    }
    anchors.extend_from_slice(tgrid);
    let min_gap = anchors.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let step = min_gap / factor as f64;
    let mut nodes = vec![anchors[0]];
    for w in anchors.windows(2) {
        let pieces = ((w[1] - w[0]) / step - 1e-9).ceil().max(1.0) as usize;
        for j in 1..pieces {
            nodes.push(w[0] + (w[1] - w[0]) * j as f64 / pieces as f64);
        }
        nodes.push(w[1]);
    }
    let mut index = Vec::with_capacity(tgrid.len());
    let mut k = 0;
    for &t in tgrid {
        while nodes[k] != t {
            k += 1;
        }
        index.push(k);
    }
    Ok((nodes, index))
}

/// `f(X_t) - f(X_0) - int_0^t c(s, X_s) Af(X_s) ds` for one path at the
/// node indices `at_grid`, by the trapezoid rule over `nodes`.
pub(crate) fn martingale_expression(
    path: &RcllPath,
    spec: &ProcessSpec,
    f: &TestFunction,
    model: Option<&CoefficientModel>,
    nodes: &[f64],
    at_grid: &[usize],
) -> Result<Vec<f64>> {
    let mut integrand = Vec::with_capacity(nodes.len());
    for &s in nodes {
        let x = path.value_at(s);
        let weight = model.map_or(1.0, |m| m.evaluate_sigma(s, x));
        integrand.push(if weight == 0.0 { 0.0 } else { weight * apply_generator(spec, f, x)? });
    }
    let f0 = f.value(path.initial());
    let mut out = Vec::with_capacity(at_grid.len());
    let mut integral = 0.0;
    let mut next = 0;
    for k in 0..nodes.len() {
        if k > 0 {
            integral += 0.5 * (nodes[k] - nodes[k - 1]) * (integrand[k] + integrand[k - 1]);
        }
        while next < at_grid.len() && at_grid[next] == k {
            out.push(f.value(path.value_at(nodes[k])) - f0 - integral);
            next += 1;
        }
    }
    Ok(out)
}

/// Empirical mean and standard error of
/// `f(X_t) - f(X_0) - int_0^t c(s, X_s) Af(X_s) ds` across `paths`, with
/// `c = sigma` when a model is given and `c = 1` otherwise. The time integral
/// is a composite trapezoid on a sub-grid `factor` times finer than `tgrid`.
pub fn martingale_residual(
    paths: &[RcllPath],
    spec: &ProcessSpec,
    f: &TestFunction,
    model: Option<&CoefficientModel>,
    tgrid: &[f64],
    factor: usize,
) -> Result<Vec<MartingaleStat>> {
    if paths.is_empty() {
        return Err(invalid("no paths"));
    }
    f.validate()?;
    let (nodes, at_grid) = refine_grid(tgrid, factor)?;
    let t_max = nodes[nodes.len() - 1];
    if let Some(p) = paths.iter().find(|p| p.horizon() < t_max) {
        return Err(out_of_range(format!("time grid reaches {t_max} beyond path horizon {}", p.horizon())));
    }
    let mut columns = vec![Vec::with_capacity(paths.len()); tgrid.len()];
    for path in paths {
        for (j, v) in martingale_expression(path, spec, f, model, &nodes, &at_grid)?.into_iter().enumerate() {
            columns[j].push(v);
        }
    }
    Ok(tgrid
        .iter()
        .zip(&columns)
        .map(|(&t, col)| {
            let (mean, standard_error) = mean_and_se(col);
            MartingaleStat { t, mean, standard_error }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{sample_path, Atom};
    use proptest::prelude::*;

    fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn members() -> Vec<TestFunction> {
        let mut v = default_dictionary(0.2);
        for d in 0..=4 {
            v.push(TestFunction::GaussPoly { degree: d, scale: 0.8, center: -0.3 });
        }
        v.push(TestFunction::combination([(2.0, TestFunction::bump(0.0, 1.0)), (-0.5, TestFunction::gauss_poly(3, 1.2))]));
        v
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for f in members() {
            for i in 0..100 {
                let x = -3.0 + 6.0 * i as f64 / 99.0;
                let j = f.jet(x);
                for h in [1e-3, 1e-4] {
                    let fd1 = central_difference(|y| f.value(y), x, h);
                    let fd2 = central_difference(|y| f.jet(y).d1, x, h);
                    // third and fourth derivatives of these members stay below ~2e3
                    let k = 2e3;
                    assert!((j.d1 - fd1).abs() <= k * h * h + 1e-9, "{f:?} f' at {x}: {} vs {fd1}", j.d1);
                    assert!((j.d2 - fd2).abs() <= k * h * h + 1e-9, "{f:?} f'' at {x}: {} vs {fd2}", j.d2);
                }
            }
        }
    }

    #[test]
    fn members_vanish_at_infinity() {
        for f in members() {
            for x in [-100.0, -10.0, 10.0, 100.0] {
                let j = f.jet(x);
                assert!(j.value.abs() < 1e-20 && j.d1.abs() < 1e-18 && j.d2.abs() < 1e-16, "{f:?} at {x}: {j:?}");
            }
        }
    }

    #[test]
    fn bump_support_is_compact() {
        let f = TestFunction::bump(1.0, 0.5);
        assert_eq!(f.support(), Some((0.5, 1.5)));
        assert_eq!(f.value(0.5), 0.0);
        assert_eq!(f.value(1.5), 0.0);
        assert!(f.value(0.51) > 0.0);
        assert_eq!(TestFunction::gauss_poly(0, 1.0).support(), None);
    }

    #[test]
    fn generator_examples() {
        let bm = ProcessSpec::BrownianMotion { x0: 0.0 };
        let g = TestFunction::gauss_poly(0, 1.0);
        // f'' = (4x^2 - 2) e^{-x^2}
        assert!((apply_generator(&bm, &g, 0.0).unwrap() + 1.0).abs() < 1e-15);

        let chain = ProcessSpec::Ctmc { states: vec![0.0, 1.0], rate_matrix: vec![vec![-1.0, 1.0], vec![1.0, -1.0]], initial_state_index: 0 };
        // f(0) = 0, f(1) = 1
        let f = TestFunction::combination([(1.0 / TestFunction::gauss_poly(1, 1.0).value(1.0), TestFunction::gauss_poly(1, 1.0))]);
        assert_eq!(f.value(0.0), 0.0);
        assert!((f.value(1.0) - 1.0).abs() < 1e-15);
        assert!((apply_generator(&chain, &f, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(apply_generator(&chain, &f, 0.5).is_err());

        let cp = ProcessSpec::CompoundPoisson { x0: 0.0, rate: 1.0, jump_law: vec![Atom { value: 1.0, probability: 1.0 }] };
        let bump = TestFunction::bump(2.0, 0.5);
        // f(1.8) = 0 outside the support, f(2.8) = 0 as well; f(1.2 + 1) = v
        let v = bump.value(2.2);
        assert!((apply_generator(&cp, &bump, 1.2).unwrap() - v).abs() < 1e-15);
    }

    #[test]
    fn compound_poisson_generator_vanishes_away_from_support() {
        let cp = ProcessSpec::CompoundPoisson {
            x0: 0.0,
            rate: 2.0,
            jump_law: vec![Atom { value: 0.5, probability: 0.5 }, Atom { value: 1.5, probability: 0.5 }],
        };
        let f = TestFunction::bump(3.0, 0.5);
        for x in [-4.0, 0.0, 0.9, 3.6, 10.0] {
            assert_eq!(apply_generator(&cp, &f, x).unwrap(), 0.0, "x = {x}");
        }
        assert!(apply_generator(&cp, &f, 2.2).unwrap() != 0.0);
    }

    #[test]
    fn generator_vanishes_at_infinity() {
        let specs = [
            ProcessSpec::BrownianMotion { x0: 0.0 },
            ProcessSpec::CompoundPoisson { x0: 0.0, rate: 1.0, jump_law: vec![Atom { value: -1.0, probability: 0.3 }, Atom { value: 2.0, probability: 0.7 }] },
        ];
        for spec in &specs {
            for f in members() {
                let near = apply_generator(spec, &f, 10.0).unwrap().abs().max(apply_generator(spec, &f, -10.0).unwrap().abs());
                let far = apply_generator(spec, &f, 100.0).unwrap().abs().max(apply_generator(spec, &f, -100.0).unwrap().abs());
                assert!(near < 1e-10 && far <= near + 1e-300, "{f:?}: {near} {far}");
            }
        }
    }

    #[test]
    fn cutoff_profile() {
        let g = CutoffFunction::new(0.0, 0.5, 1.5).unwrap();
        assert_eq!(g.eval(0.0), (1.0, 0.0));
        assert_eq!(g.eval(0.5), (1.0, 0.0));
        assert_eq!(g.eval(1.5), (0.0, 0.0));
        assert_eq!(g.eval(2.0), (0.0, 0.0));
        let (v, d) = g.eval(1.0);
        assert!((v - 0.5).abs() < 1e-15 && (d + 1.5).abs() < 1e-12);

        let lifted = CutoffFunction::new(1.0, 3.0, 4.0).unwrap();
        assert_eq!(lifted.eval(0.5), (0.0, 0.0));
        assert_eq!(lifted.eval(2.5), (1.0, 0.0));
        let (v, d) = lifted.eval(1.5);
        assert!((v - 0.5).abs() < 1e-15 && (d - 1.5).abs() < 1e-12);
        assert!(CutoffFunction::new(1.0, 1.5, 3.0).is_err());
    }

    #[test]
    fn cutoff_derivative_matches_finite_differences() {
        let g = CutoffFunction::new(0.5, 2.0, 3.0).unwrap();
        for i in 1..300 {
            let t = 0.01 * i as f64;
            let fd = (g.eval(t + 1e-6).0 - g.eval(t - 1e-6).0) / 2e-6;
            assert!((g.eval(t).1 - fd).abs() < 1e-5, "t = {t}");
        }
    }

    #[test]
    fn martingale_residual_on_constant_paths_is_zero() {
        let chain = ProcessSpec::Ctmc { states: vec![0.0, 1.0], rate_matrix: vec![vec![0.0; 2]; 2], initial_state_index: 1 };
        let paths: Vec<RcllPath> = (0..5).map(|s| sample_path(&chain, 2.0, 0.1, s).unwrap()).collect();
        for f in members() {
            for stat in martingale_residual(&paths, &chain, &f, None, &[0.5, 1.0, 2.0], 4).unwrap() {
                assert_eq!(stat.mean, 0.0);
            }
        }
    }

    #[test]
    fn martingale_residual_single_path_at_zero() {
        let bm = ProcessSpec::BrownianMotion { x0: 0.0 };
        let path = sample_path(&bm, 1.0, 0.01, 1).unwrap();
        let stats = martingale_residual(&[path], &bm, &TestFunction::gauss_poly(2, 1.0), None, &[0.0, 0.5], 4).unwrap();
        assert_eq!(stats[0].mean, 0.0);
        assert!(stats[0].standard_error.is_nan());
    }

    #[test]
    fn martingale_residual_errors() {
        let bm = ProcessSpec::BrownianMotion { x0: 0.0 };
        let f = TestFunction::gauss_poly(2, 1.0);
        assert!(martingale_residual(&[], &bm, &f, None, &[0.5], 4).is_err());
        let path = sample_path(&bm, 1.0, 0.01, 1).unwrap();
        assert!(matches!(martingale_residual(&[path], &bm, &f, None, &[0.5, 1.5], 4), Err(crate::error::Error::OutOfRange(_))));
    }

    #[test]
    fn brownian_martingale_residual_is_centered() {
        let bm = ProcessSpec::BrownianMotion { x0: 0.0 };
        let paths: Vec<RcllPath> = (0..20_000).map(|s| sample_path(&bm, 1.0, 1e-3, s).unwrap()).collect();
        let stats = martingale_residual(&paths, &bm, &TestFunction::gauss_poly(2, 1.0), None, &[0.25, 0.5, 1.0], 4).unwrap();
        for s in stats {
            assert!(s.mean.abs() <= 3.0 * s.standard_error, "{s:?}");
        }
    }

    #[test]
    fn refine_grid_hits_every_grid_time() {
        let (nodes, idx) = refine_grid(&[0.25, 0.5, 1.0], 4).unwrap();
        assert_eq!(nodes[0], 0.0);
        for (i, &t) in [0.25, 0.5, 1.0].iter().enumerate() {
            assert_eq!(nodes[idx[i]], t);
        }
        assert!(nodes.windows(2).all(|w| w[1] - w[0] <= 0.0625 + 1e-15));
        assert!(refine_grid(&[0.5, 0.25], 4).is_err());
    }

    proptest! {
        #[test]
        fn generator_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, x in -4.0f64..4.0, c1 in -1.0f64..1.0, c2 in -1.0f64..1.0) {
            let f = TestFunction::bump(c1, 1.3);
            let g = TestFunction::bump(c2, 0.7);
            let comb = TestFunction::combination([(a, f.clone()), (b, g.clone())]);
            let specs = [
                ProcessSpec::BrownianMotion { x0: 0.0 },
                ProcessSpec::CompoundPoisson { x0: 0.0, rate: 1.5, jump_law: vec![Atom { value: 0.4, probability: 0.6 }, Atom { value: -1.1, probability: 0.4 }] },
            ];
            for spec in &specs {
                let lhs = apply_generator(spec, &comb, x).unwrap();
                let rhs = a * apply_generator(spec, &f, x).unwrap() + b * apply_generator(spec, &g, x).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }
        }
    }
}

//! Base Markov processes and right-continuous step paths.
//!
//! Three process classes are supported: Brownian motion (sampled on a mesh),
//! compound Poisson processes with finite jump laws and finite-state
//! continuous-time Markov chains. Jump processes carry their exact jump
//! times; Brownian paths are frozen between mesh points.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, out_of_range, Error, Result};
use crate::io::{csv_writer, format_f64, parse_f64};
use crate::rng;

const PROBABILITY_SUM_TOL: f64 = 1e-12;
const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    /// Exact step path of a jump process.
    PiecewiseConstant,
    /// Diffusion sampled on a mesh and held constant in between.
    MeshSampled,
}

/// A right-continuous path with left limits on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RcllPath {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
    horizon: f64,
    kind: PathKind,
}

impl RcllPath {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>, horizon: f64, kind: PathKind) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(invalid(format!(
                "need as many values as breakpoints (got {} and {})",
                breakpoints.len(),
                values.len()
            )));
        }
        if breakpoints[0] != 0.0 {
            return Err(invalid("first breakpoint must be 0"));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("breakpoints must be strictly increasing"));
        }
        if !(horizon.is_finite() && horizon >= breakpoints[breakpoints.len() - 1]) {
            return Err(invalid(format!("horizon {horizon} precedes the last breakpoint")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("path values must be finite"));
        }
        Ok(Self { breakpoints, values, horizon, kind })
    }

    pub fn constant(value: f64, horizon: f64, kind: PathKind) -> Result<Self> {
        Self::new(vec![0.0], vec![value], horizon, kind)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.breakpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn initial(&self) -> f64 {
        self.values[0]
    }

    /// Index of the greatest breakpoint `<= t` (0 for `t < 0`).
    pub fn segment_index(&self, t: f64) -> usize {
        self.breakpoints.partition_point(|&b| b <= t).saturating_sub(1)
    }

    /// End of segment `k`: the next breakpoint, or the horizon for the last one.
    pub fn segment_end(&self, k: usize) -> f64 {
        self.breakpoints.get(k + 1).copied().unwrap_or(self.horizon)
    }

    /// Step evaluation without the range check; `t` beyond the horizon
    /// returns the last value.
    pub fn value_at(&self, t: f64) -> f64 {
        self.values[self.segment_index(t)]
    }

    /// Right-continuous step evaluation on `[0, horizon]`.
    pub fn evaluate(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(out_of_range(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        Ok(self.value_at(t))
    }

    /// Lebesgue time in `[0, upto]` spent strictly within `radius` of `center`.
    pub fn occupation_time(&self, center: f64, radius: f64, upto: f64) -> Result<f64> {
        if !(radius > 0.0) {
            return Err(invalid("radius must be positive"));
        }
        if !(0.0..=self.horizon).contains(&upto) {
            return Err(out_of_range(format!("upto = {upto} outside [0, {}]", self.horizon)));
        }
        let mut total = 0.0;
        for (k, (&start, &value)) in self.breakpoints.iter().zip(&self.values).enumerate() {
            if start >= upto {
                break;
            }
            let end = self.segment_end(k).min(upto);
            if (value - center).abs() < radius {
                total += end - start;
            }
        }
        Ok(total)
    }

    /// Keeps every `factor`-th breakpoint. For a mesh path sampled at
    /// `mesh / factor` this yields the same Brownian path on the coarser mesh.
    pub fn decimate(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(invalid("decimation factor must be positive"));
        }
        let (breakpoints, values) = self
            .breakpoints
            .iter()
            .zip(&self.values)
            .step_by(factor)
            .map(|(&b, &v)| (b, v))
            .unzip();
        Self::new(breakpoints, values, self.horizon, self.kind)
    }

    /// Writes `t,value`, one row per breakpoint.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv_writer(w);
        out.write_record(["t", "value"])?;
        for (&t, &v) in self.breakpoints.iter().zip(&self.values) {
            out.write_record([format_f64(t), format_f64(v)])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a `t,value` file. The horizon is taken as the last breakpoint
    /// unless given.
    pub fn read_csv<R: Read>(r: R, horizon: Option<f64>, kind: PathKind) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers()?.clone();
        if headers.iter().map(str::trim).collect::<Vec<_>>() != ["t", "value"] {
            return Err(Error::Config(format!("expected header `t,value`, found `{}`", headers.iter().collect::<Vec<_>>().join(","))));
        }
        let mut breakpoints = Vec::new();
        let mut values = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            breakpoints.push(parse_f64(&record[0], line, "t")?);
            values.push(parse_f64(&record[1], line, "value")?);
        }
        let horizon = horizon.unwrap_or_else(|| breakpoints.last().copied().unwrap_or(0.0));
        Self::new(breakpoints, values, horizon, kind)
    }
}

/// One atom of a finite jump law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub value: f64,
    pub probability: f64,
}

/// The base process `M`, started from a point mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessSpec {
    /// Standard Brownian motion, generator `f''/2`.
    BrownianMotion { x0: f64 },
    /// Jumps at exponential times with law `jump_law`.
    CompoundPoisson { x0: f64, rate: f64, jump_law: Vec<Atom> },
    /// Finite-state chain on the real embedding `states`.
    Ctmc { states: Vec<f64>, rate_matrix: Vec<Vec<f64>>, initial_state_index: usize },
}

impl ProcessSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ProcessSpec::BrownianMotion { x0 } => {
                if !x0.is_finite() {
                    return Err(invalid("x0 must be finite"));
                }
            }
            ProcessSpec::CompoundPoisson { x0, rate, jump_law } => {
                if !x0.is_finite() {
                    return Err(invalid("x0 must be finite"));
                }
                if !(*rate > 0.0 && rate.is_finite()) {
                    return Err(invalid(format!("jump rate must be positive, got {rate}")));
                }
                if jump_law.is_empty() {
                    return Err(invalid("jump law needs at least one atom"));
                }
                if jump_law.iter().any(|a| !(a.probability >= 0.0) || !a.value.is_finite()) {
                    return Err(invalid("jump atoms need finite values and nonnegative probabilities"));
                }
                let total: f64 = jump_law.iter().map(|a| a.probability).sum();
                if (total - 1.0).abs() > PROBABILITY_SUM_TOL {
                    return Err(invalid(format!("jump probabilities sum to {total}, not 1")));
                }
            }
            ProcessSpec::Ctmc { states, rate_matrix, initial_state_index } => {
                let n = states.len();
                if n == 0 {
                    return Err(invalid("chain needs at least one state"));
                }
                if states.iter().any(|s| !s.is_finite()) {
                    return Err(invalid("states must be finite"));
                }
                for i in 0..n {
                    for j in 0..i {
                        if states[i] == states[j] {
                            return Err(invalid(format!("states {j} and {i} share the value {}", states[i])));
                        }
                    }
                }
                if rate_matrix.len() != n || rate_matrix.iter().any(|row| row.len() != n) {
                    return Err(invalid(format!("rate matrix must be {n}x{n}")));
                }
                for (i, row) in rate_matrix.iter().enumerate() {
                    for (j, &q) in row.iter().enumerate() {
                        if !q.is_finite() || (i != j && q < 0.0) {
                            return Err(invalid(format!("rate matrix entry ({i},{j}) = {q} is not a valid rate")));
                        }
                    }
                    let sum: f64 = row.iter().sum();
                    if sum.abs() > ROW_SUM_TOL {
                        return Err(invalid(format!("rate matrix row {i} sums to {sum}, not 0")));
                    }
                }
                if *initial_state_index >= n {
                    return Err(invalid(format!("initial state index {initial_state_index} out of {n} states")));
                }
            }
        }
        Ok(())
    }

    /// Starting state `M_0`.
    pub fn x0(&self) -> f64 {
        match self {
            ProcessSpec::BrownianMotion { x0 } | ProcessSpec::CompoundPoisson { x0, .. } => *x0,
            ProcessSpec::Ctmc { states, initial_state_index, .. } => states[*initial_state_index],
        }
    }

    /// Same process started from `x` instead.
    pub fn with_start(&self, x: f64) -> Result<Self> {
        let mut out = self.clone();
        match &mut out {
            ProcessSpec::BrownianMotion { x0 } | ProcessSpec::CompoundPoisson { x0, .. } => *x0 = x,
            ProcessSpec::Ctmc { initial_state_index, .. } => {
                *initial_state_index = self
                    .state_index(x)
                    .ok_or_else(|| invalid(format!("{x} is not a state of the chain")))?;
            }
        }
        Ok(out)
    }

    /// Position of `x` in the chain's state list.
    pub fn state_index(&self, x: f64) -> Option<usize> {
        match self {
            ProcessSpec::Ctmc { states, .. } => states.iter().position(|&s| s == x),
            _ => None,
        }
    }

    pub fn kind(&self) -> PathKind {
        match self {
            ProcessSpec::BrownianMotion { .. } => PathKind::MeshSampled,
            _ => PathKind::PiecewiseConstant,
        }
    }
}

/// Samples one path of `spec` on `[0, horizon]` from the stream of `seed`.
pub fn sample_path(spec: &ProcessSpec, horizon: f64, mesh: f64, seed: u64) -> Result<RcllPath> {
    sample_path_with(spec, horizon, mesh, &mut rng::seeded(seed))
}

/// Samples one path drawing from `rng`. Draws are consumed in time order, so
/// a longer horizon extends the same path.
pub fn sample_path_with<R: Rng + ?Sized>(spec: &ProcessSpec, horizon: f64, mesh: f64, rng: &mut R) -> Result<RcllPath> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid(format!("horizon must be positive, got {horizon}")));
    }
    if !(mesh > 0.0) || mesh > horizon {
        return Err(invalid(format!("mesh must lie in (0, horizon], got {mesh}")));
    }
    spec.validate()?;
    match spec {
        ProcessSpec::BrownianMotion { x0 } => {
            let steps = (horizon / mesh + 1e-9).floor() as usize;
            let scale = mesh.sqrt();
            let mut breakpoints = Vec::with_capacity(steps + 1);
            let mut values = Vec::with_capacity(steps + 1);
            let mut x = *x0;
            breakpoints.push(0.0);
            values.push(x);
            for k in 1..=steps {
                let z: f64 = StandardNormal.sample(rng);
                x += scale * z;
                breakpoints.push(k as f64 * mesh);
                values.push(x);
            }
            // guard against k * mesh rounding past the horizon
            let last = breakpoints.len() - 1;
            if breakpoints[last] > horizon {
                breakpoints[last] = horizon;
            }
            RcllPath::new(breakpoints, values, horizon, PathKind::MeshSampled)
        }
        ProcessSpec::CompoundPoisson { x0, rate, jump_law } => {
            let waiting = Exp::new(*rate).map_err(|e| invalid(e.to_string()))?;
            let mut breakpoints = vec![0.0];
            let mut values = vec![*x0];
            let mut t = 0.0;
            let mut x = *x0;
            loop {
                t += waiting.sample(rng);
                if t > horizon {
                    break;
                }
                x += pick_atom(jump_law, rng.random::<f64>());
                breakpoints.push(t);
                values.push(x);
            }
            RcllPath::new(breakpoints, values, horizon, PathKind::PiecewiseConstant)
        }
        ProcessSpec::Ctmc { states, rate_matrix, initial_state_index } => {
            let mut i = *initial_state_index;
            let mut breakpoints = vec![0.0];
            let mut values = vec![states[i]];
            let mut t = 0.0;
            loop {
                let exit: f64 = rate_matrix[i].iter().enumerate().filter(|&(j, _)| j != i).map(|(_, q)| q).sum();
                if exit <= 0.0 {
                    break;
                }
                let u: f64 = rng.random::<f64>();
                t += -(1.0 - u).ln() / exit;
                if t > horizon {
                    break;
                }
                let mut pick = rng.random::<f64>() * exit;
                let mut next = i;
                for (j, &q) in rate_matrix[i].iter().enumerate() {
                    if j == i || q <= 0.0 {
                        continue;
                    }
                    next = j;
                    if pick < q {
                        break;
                    }
                    pick -= q;
                }
                i = next;
                breakpoints.push(t);
                values.push(states[i]);
            }
            RcllPath::new(breakpoints, values, horizon, PathKind::PiecewiseConstant)
        }
    }
}

pub(crate) fn pick_atom(law: &[Atom], u: f64) -> f64 {
    let mut acc = 0.0;
    for atom in law {
        acc += atom.probability;
        if u < acc {
            return atom.value;
        }
    }
    // u landed in the rounding slack above the cumulative sum
    law.iter().rev().find(|a| a.probability > 0.0).map_or(law[law.len() - 1].value, |a| a.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step_path() -> RcllPath {
        RcllPath::new(vec![0.0, 1.0], vec![2.0, 5.0], 3.0, PathKind::PiecewiseConstant).unwrap()
    }

    #[test]
    fn evaluate_is_right_continuous() {
        let p = step_path();
        assert_eq!(p.evaluate(1.0).unwrap(), 5.0);
        assert_eq!(p.evaluate(0.5).unwrap(), 2.0);
        assert_eq!(p.evaluate(2.7).unwrap(), 5.0);
        assert!(matches!(p.evaluate(3.1), Err(Error::OutOfRange(_))));
        assert!(matches!(p.evaluate(-0.1), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn constructor_rejects_bad_paths() {
        assert!(RcllPath::new(vec![0.0, 0.0], vec![1.0, 2.0], 1.0, PathKind::MeshSampled).is_err());
        assert!(RcllPath::new(vec![0.1], vec![1.0], 1.0, PathKind::MeshSampled).is_err());
        assert!(RcllPath::new(vec![0.0, 2.0], vec![1.0, 2.0], 1.0, PathKind::MeshSampled).is_err());
        assert!(RcllPath::new(vec![0.0], vec![1.0, 2.0], 1.0, PathKind::MeshSampled).is_err());
    }

    #[test]
    fn occupation_time_examples() {
        let constant = RcllPath::constant(0.0, 10.0, PathKind::PiecewiseConstant).unwrap();
        assert_eq!(constant.occupation_time(0.0, 1.0, 10.0).unwrap(), 10.0);
        let jump = RcllPath::new(vec![0.0, 3.0], vec![0.0, 5.0], 10.0, PathKind::PiecewiseConstant).unwrap();
        assert_eq!(jump.occupation_time(0.0, 1.0, 10.0).unwrap(), 3.0);
        assert!(matches!(jump.occupation_time(0.0, 1.0, 11.0), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn occupation_time_matches_riemann_sum_on_mesh() {
        let mesh = 0.01;
        let path = sample_path(&ProcessSpec::BrownianMotion { x0: 0.0 }, 5.0, mesh, 11).unwrap();
        let (center, radius, upto) = (0.2, 0.7, 4.0);
        // independent loop over mesh cells
        let cells = (upto / mesh).round() as usize;
        let mut riemann = 0.0;
        for k in 0..cells {
            let v = path.values()[k];
            if (v - center).abs() < radius {
                riemann += mesh;
            }
        }
        let got = path.occupation_time(center, radius, upto).unwrap();
        assert!((got - riemann).abs() < 1e-9, "{got} vs {riemann}");
    }

    #[test]
    fn zero_rate_chain_is_constant() {
        let spec = ProcessSpec::Ctmc { states: vec![0.0, 1.0], rate_matrix: vec![vec![0.0, 0.0], vec![0.0, 0.0]], initial_state_index: 1 };
        let p = sample_path(&spec, 7.0, 0.1, 3).unwrap();
        assert_eq!(p.breakpoints(), &[0.0]);
        assert_eq!(p.evaluate(7.0).unwrap(), 1.0);
    }

    #[test]
    fn poisson_jump_count_mean() {
        let spec = ProcessSpec::CompoundPoisson { x0: 0.0, rate: 1.0, jump_law: vec![Atom { value: 1.0, probability: 1.0 }] };
        let n = 10_000;
        let mut total = 0usize;
        for seed in 0..n {
            let p = sample_path(&spec, 10.0, 1.0, seed).unwrap();
            for w in p.values().windows(2) {
                assert_eq!(w[1] - w[0], 1.0);
            }
            total += p.len() - 1;
        }
        let mean = total as f64 / n as f64;
        assert!((mean - 10.0).abs() <= 3.0 * (10.0f64 / n as f64).sqrt(), "mean jumps {mean}");
    }

    #[test]
    fn brownian_moments_at_one() {
        let spec = ProcessSpec::BrownianMotion { x0: 0.0 };
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|seed| sample_path(&spec, 1.0, 0.01, seed).unwrap().evaluate(1.0).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!(mean.abs() <= 3.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() <= 0.05, "variance {var}");
    }

    #[test]
    fn invalid_arguments() {
        let bm = ProcessSpec::BrownianMotion { x0: 0.0 };
        assert!(matches!(sample_path(&bm, 0.0, 0.1, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(sample_path(&bm, 1.0, -0.1, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(sample_path(&bm, 1.0, 2.0, 0), Err(Error::InvalidArgument(_))));
        let bad_law = ProcessSpec::CompoundPoisson { x0: 0.0, rate: 1.0, jump_law: vec![Atom { value: 1.0, probability: 0.5 }] };
        assert!(matches!(sample_path(&bad_law, 1.0, 0.1, 0), Err(Error::InvalidArgument(_))));
        let bad_rate = ProcessSpec::CompoundPoisson { x0: 0.0, rate: 0.0, jump_law: vec![Atom { value: 1.0, probability: 1.0 }] };
        assert!(bad_rate.validate().is_err());
        let bad_q = ProcessSpec::Ctmc { states: vec![0.0, 1.0], rate_matrix: vec![vec![-1.0, 0.5], vec![0.0, 0.0]], initial_state_index: 0 };
        assert!(bad_q.validate().is_err());
        let dup = ProcessSpec::Ctmc { states: vec![1.0, 1.0], rate_matrix: vec![vec![0.0; 2]; 2], initial_state_index: 0 };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn longer_horizon_extends_the_same_path() {
        let bm = ProcessSpec::BrownianMotion { x0: 0.3 };
        let short = sample_path(&bm, 1.0, 0.01, 5).unwrap();
        let long = sample_path(&bm, 2.0, 0.01, 5).unwrap();
        assert_eq!(short.values(), &long.values()[..short.len()]);
    }

    #[test]
    fn csv_round_trip() {
        let p = sample_path(&ProcessSpec::BrownianMotion { x0: 0.0 }, 1.0, 0.1, 9).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"t,value\r\n"));
        let back = RcllPath::read_csv(buf.as_slice(), Some(1.0), PathKind::MeshSampled).unwrap();
        assert_eq!(back, p);
    }

    fn chain() -> ProcessSpec {
        ProcessSpec::Ctmc {
            states: vec![-1.0, 0.5, 2.0],
            rate_matrix: vec![vec![-2.0, 1.5, 0.5], vec![1.0, -1.0, 0.0], vec![0.3, 0.3, -0.6]],
            initial_state_index: 0,
        }
    }

    proptest! {
        #[test]
        fn sampling_is_reproducible(seed in any::<u64>()) {
            let a = sample_path(&chain(), 5.0, 0.1, seed).unwrap();
            let b = sample_path(&chain(), 5.0, 0.1, seed).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn chain_values_are_states(seed in any::<u64>()) {
            let p = sample_path(&chain(), 5.0, 0.1, seed).unwrap();
            for v in p.values() {
                prop_assert!([-1.0, 0.5, 2.0].contains(v));
            }
        }

        #[test]
        fn compound_poisson_increments_are_atoms(seed in any::<u64>()) {
            let law = vec![Atom { value: -0.5, probability: 0.25 }, Atom { value: 2.0, probability: 0.75 }];
            let spec = ProcessSpec::CompoundPoisson { x0: 1.0, rate: 3.0, jump_law: law };
            let p = sample_path(&spec, 4.0, 0.1, seed).unwrap();
            for w in p.values().windows(2) {
                let d = w[1] - w[0];
                prop_assert!((d + 0.5).abs() < 1e-12 || (d - 2.0).abs() < 1e-12);
            }
        }

        #[test]
        fn refining_with_repeats_keeps_evaluations(seed in any::<u64>(), probes in proptest::collection::vec(0.0f64..5.0, 20)) {
            let p = sample_path(&chain(), 5.0, 0.1, seed).unwrap();
            // insert midpoints that repeat the current value
            let mut b = Vec::new();
            let mut v = Vec::new();
            for k in 0..p.len() {
                b.push(p.breakpoints()[k]);
                v.push(p.values()[k]);
                let mid = 0.5 * (p.breakpoints()[k] + p.segment_end(k));
                if mid > p.breakpoints()[k] {
                    b.push(mid);
                    v.push(p.values()[k]);
                }
            }
            let refined = RcllPath::new(b, v, p.horizon(), p.kind()).unwrap();
            for t in probes {
                prop_assert_eq!(p.evaluate(t).unwrap(), refined.evaluate(t).unwrap());
            }
        }

        #[test]
        fn occupation_is_monotone(seed in any::<u64>(), r1 in 0.1f64..2.0, dr in 0.0f64..1.0, u1 in 0.0f64..4.0, du in 0.0f64..1.0) {
            let p = sample_path(&ProcessSpec::BrownianMotion { x0: 0.0 }, 5.0, 0.05, seed).unwrap();
            let base = p.occupation_time(0.0, r1, u1).unwrap();
            prop_assert!(p.occupation_time(0.0, r1 + dr, u1).unwrap() >= base);
            prop_assert!(p.occupation_time(0.0, r1, u1 + du).unwrap() >= base);
        }
    }
}

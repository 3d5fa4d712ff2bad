//! WebAssembly bindings for the browser demo. Every export takes a JSON
//! request and returns a JSON response string.

use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::*;

use tclab::coefficients::{classify_by_exponent, classify_by_quadrature, CoefficientModel, HFunction, QuadratureSettings, SigmaTilde, ZeroSet};
use tclab::fokkerplanck::{euler_maruyama_marginals_with, simulate_marginals_with, uniqueness_crosscheck, SimulationOptions};
use tclab::paths::{sample_path_with, ProcessSpec};
use tclab::rng::{path_rng, Domain};
use tclab::timechange::{apply_time_change, build_time_change};

const MAX_PATHS: usize = 5000;
const HISTOGRAM_BINS: usize = 40;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRequest {
    h: HFunction,
    sigma_tilde: SigmaTilde,
    #[serde(default = "one")]
    t0: f64,
    #[serde(default)]
    x0: f64,
    #[serde(default = "default_mesh")]
    mesh: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_points")]
    points: usize,
}

fn one() -> f64 {
    1.0
}

fn default_mesh() -> f64 {
    1e-3
}

fn default_points() -> usize {
    101
}

impl ModelRequest {
    fn model(&self) -> Result<CoefficientModel, String> {
        CoefficientModel::new(self.h.clone(), self.sigma_tilde.clone(), self.t0).map_err(|e| e.to_string())
    }

    fn tgrid(&self) -> Result<Vec<f64>, String> {
        if self.points < 2 || self.points > 2001 {
            return Err("points must lie in [2, 2001]".into());
        }
        let cells = self.points - 1;
        let mut g: Vec<f64> = (0..=cells).map(|k| k as f64 * self.t0 / cells as f64).collect();
        g[cells] = self.t0;
        Ok(g)
    }
}

fn parse<T: for<'de> Deserialize<'de>>(request: &str) -> Result<T, String> {
    serde_json::from_str(request).map_err(|e| format!("bad request: {e}"))
}

#[derive(Serialize)]
struct Series {
    t: Vec<f64>,
    value: Vec<f64>,
}

/// One Brownian base path `M`, its time change `tau` and `X = M_tau`.
pub fn time_change_path_json(request: &str) -> Result<String, String> {
    let req: ModelRequest = parse(request)?;
    let model = req.model()?;
    let tgrid = req.tgrid()?;
    let spec = ProcessSpec::BrownianMotion { x0: req.x0 };
    let mut horizon = 2.0 * req.t0;
    for _ in 0..12 {
        let path = sample_path_with(&spec, horizon, req.mesh, &mut path_rng(req.seed, Domain::BasePath, 0)).map_err(|e| e.to_string())?;
        match build_time_change(&path, &model, &tgrid, 1e-9) {
            Ok(tc) => {
                let x = apply_time_change(&path, &tc).map_err(|e| e.to_string())?;
                let shown = tc.tau.last().copied().unwrap_or(0.0).max(req.mesh);
                let stride = (path.len() / 2000).max(1);
                let base = path
                    .breakpoints()
                    .iter()
                    .zip(path.values())
                    .step_by(stride)
                    .take_while(|(t, _)| **t <= shown)
                    .fold(Series { t: vec![], value: vec![] }, |mut s, (&t, &v)| {
                        s.t.push(t);
                        s.value.push(v);
                        s
                    });
                let out = json!({
                    "base": base,
                    "tgrid": tc.tgrid,
                    "tau": tc.tau,
                    "x": x.values(),
                    "rho": tc.rho,
                    "frozen_from": tc.frozen_from,
                    "solver_stats": tc.solver_stats,
                });
                return Ok(out.to_string());
            }
            Err(tclab::Error::HorizonExhausted { .. }) => horizon *= 2.0,
            Err(e) => return Err(e.to_string()),
        }
    }
    Err("the clock did not reach t0 on this path".into())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifyRequest {
    h: HFunction,
    #[serde(default = "half")]
    epsilon: f64,
}

fn half() -> f64 {
    0.5
}

/// Classifies the zeros of `H` by the declared exponent and by quadrature.
pub fn classify_json(request: &str) -> Result<String, String> {
    let req: ClassifyRequest = parse(request)?;
    let model = CoefficientModel::new(req.h, SigmaTilde::Constant { value: 1.0 }, 1.0).map_err(|e| e.to_string())?;
    let zeros = match model.zero_set() {
        ZeroSet::Empty => return Ok(json!({ "zeros": [], "note": "H has no zeros" }).to_string()),
        ZeroSet::Everywhere => return Ok(json!({ "zeros": [], "note": "H vanishes identically" }).to_string()),
        ZeroSet::Points(zs) => zs.into_iter().map(|z| (z.point, z.exponent)).collect::<Vec<_>>(),
        ZeroSet::Periodic { phase, period, exponent } => (-1..=1).map(|k| (phase + f64::from(k) * period, Some(exponent))).collect(),
    };
    let quad = QuadratureSettings::default();
    let rows = zeros
        .into_iter()
        .map(|(z, p)| {
            let numeric = classify_by_quadrature(|x| model.h(x), z, req.epsilon, &quad).map_err(|e| e.to_string())?;
            Ok(json!({
                "point": z,
                "declared": p.map(|p| classify_by_exponent(z, p)),
                "quadrature": numeric,
            }))
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(json!({ "zeros": rows }).to_string())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompareRequest {
    #[serde(flatten)]
    model: ModelRequest,
    #[serde(default = "default_paths")]
    n: usize,
}

fn default_paths() -> usize {
    1000
}

fn histogram(samples: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut counts = vec![0.0; HISTOGRAM_BINS];
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    for &x in samples {
        let k = (((x - lo) / width).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        counts[k] += 1.0;
    }
    counts.iter().map(|c| c / (samples.len() as f64 * width)).collect()
}

/// Law of `X_t0` from the time change against Euler-Maruyama, with the
/// Kolmogorov-Smirnov statistic at every grid time.
pub fn compare_marginals_json(request: &str) -> Result<String, String> {
    let req: CompareRequest = parse(request)?;
    if !(100..=MAX_PATHS).contains(&req.n) {
        return Err(format!("n must lie in [100, {MAX_PATHS}]"));
    }
    let m = &req.model;
    let model = m.model()?;
    let cells = 10;
    let tgrid: Vec<f64> = (0..=cells).map(|k| k as f64 * m.t0 / cells as f64).collect();
    let spec = ProcessSpec::BrownianMotion { x0: m.x0 };
    let options = SimulationOptions { workers: 1, ..SimulationOptions::default() };
    let tc = simulate_marginals_with(&spec, &model, req.n, &tgrid, m.mesh, m.seed, &options).map_err(|e| e.to_string())?;
    let em = euler_maruyama_marginals_with(&model, m.x0, req.n, &tgrid, m.mesh, m.seed, 1).map_err(|e| e.to_string())?;
    let ks = uniqueness_crosscheck(&tc, &em).map_err(|e| e.to_string())?;
    let last = tgrid.len() - 1;
    let (a, b) = (tc.column(last), em.column(last));
    let lo = a.iter().chain(&b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(&b).copied().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9);
    Ok(json!({
        "t": m.t0,
        "range": [lo, hi],
        "timechange": histogram(&a, lo, hi),
        "euler_maruyama": histogram(&b, lo, hi),
        "ks": ks,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn time_change_path(request: &str) -> Result<String, JsError> {
    time_change_path_json(request).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn classify(request: &str) -> Result<String, JsError> {
    classify_json(request).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn compare_marginals(request: &str) -> Result<String, JsError> {
    compare_marginals_json(request).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(s: &str) -> serde_json::Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn identity_clock_path() {
        let out = value(&time_change_path_json(r#"{"h":{"kind":"constant","value":1.0},"sigma_tilde":{"kind":"constant","value":1.0},"points":11}"#).unwrap());
        let tau = out["tau"].as_array().unwrap();
        assert_eq!(tau.len(), 11);
        for (k, t) in tau.iter().enumerate() {
            assert!((t.as_f64().unwrap() - out["tgrid"][k].as_f64().unwrap()).abs() < 1e-12);
        }
        assert!(out["rho"].is_null());
    }

    #[test]
    fn classify_power_laws() {
        let out = value(&classify_json(r#"{"h":{"kind":"power_law","exponent":0.5}}"#).unwrap());
        assert_eq!(out["zeros"][0]["declared"]["verdict"], "not_in_IH");
        let out = value(&classify_json(r#"{"h":{"kind":"power_law","exponent":2.0}}"#).unwrap());
        assert_eq!(out["zeros"][0]["declared"]["verdict"], "in_IH");
        assert_eq!(out["zeros"][0]["quadrature"]["verdict"], "in_IH");
        assert!(classify_json(r#"{"h":{"kind":"cubic"}}"#).is_err());
    }

    #[test]
    fn marginal_comparison() {
        let req = r#"{"h":{"kind":"sine","offset":2.0,"amplitude":1.0},"sigma_tilde":{"kind":"linear_t","intercept":1.0,"slope":0.5},"n":400,"mesh":0.005,"seed":3}"#;
        let out = value(&compare_marginals_json(req).unwrap());
        assert_eq!(out["ks"].as_array().unwrap().len(), 11);
        let density: f64 = out["timechange"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        let width = (out["range"][1].as_f64().unwrap() - out["range"][0].as_f64().unwrap()) / HISTOGRAM_BINS as f64;
        assert!((density * width - 1.0).abs() < 1e-9);
        assert!(compare_marginals_json(r#"{"h":{"kind":"constant","value":1.0},"sigma_tilde":{"kind":"constant","value":1.0},"n":10}"#).is_err());
    }
}

//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every function works on the correlated Gaussian `sigma1 = 1, sigma2 = 10`
//! with the chain started at `(-10, -10)`.

use mcvi::experiments::{bivariate_target, gauss_chain, run, Experiment, ExperimentConfig};
use mcvi::exact::exact_sweep_chain_bound;
use mcvi::markov::{leapfrog, HmcParams};
use mcvi::params::Params;
use mcvi::targets::TargetDensity;
use wasm_bindgen::prelude::*;

fn js_err(e: mcvi::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `ln Z` of the target.
#[wasm_bindgen]
pub fn log_normalizer() -> f64 {
    bivariate_target().known_log_normalizer().unwrap_or(f64::NAN)
}

/// Exact bounds `L_0, ..., L_T` of an over-relaxed chain with a fixed `alpha`
/// and reverse models fitted by least squares.
#[wasm_bindgen]
pub fn overrelax_bounds(alpha: f64, steps: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let target = bivariate_target();
    let mut cfg = ExperimentConfig::new(Experiment::GaussOverrelax, seed);
    cfg.steps = steps;
    cfg.alpha_init = alpha;
    cfg.pilot = 2000;
    cfg.validate().map_err(js_err)?;
    let mut params = Params::new();
    let chain = gauss_chain(&target, &mut params, &cfg, true).map_err(js_err)?;
    let exact = exact_sweep_chain_bound(&chain, params.values()).map_err(js_err)?;
    Ok(exact.prefix())
}

/// Trains `alpha` and the reverse models; returns `[alpha, exact bound]`.
#[wasm_bindgen]
pub fn train_overrelax(steps: usize, iterations: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let mut cfg = ExperimentConfig::new(Experiment::GaussOverrelax, seed);
    cfg.steps = steps;
    cfg.train.iterations = iterations;
    cfg.train.eval_every = 0;
    cfg.refit_every = 250;
    cfg.pilot = 1000;
    cfg.eval_draws = 200;
    let out = run(&cfg).map_err(js_err)?;
    let get = |k: &str| out.get(k).unwrap_or(f64::NAN);
    Ok(vec![get("alpha"), get("exact_bound")])
}

/// Positions `x0, y0, x1, y1, ...` of a leapfrog trajectory with unit mass.
#[wasm_bindgen]
pub fn leapfrog_path(z: Vec<f64>, v: Vec<f64>, step_size: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    let target = bivariate_target();
    let one = HmcParams::new(step_size.ln(), vec![0.0; 2], 1).map_err(js_err)?;
    let (mut z, mut v) = (z, v);
    let mut path = z.clone();
    for _ in 0..steps {
        let (z1, v1) = leapfrog(&target, &z, &v, &one).map_err(js_err)?;
        path.extend(&z1);
        z = z1;
        v = v1;
    }
    Ok(path)
}

//! WebAssembly bindings behind `www/index.html`. Every entry point takes and
//! returns JSON text so the page needs no glue beyond `JSON.parse`.

use caesar_core::caesar::{evaluate_policies, mc_baseline, CaesarConfig};
use caesar_core::harness::{gen_random_mdp, gen_random_policies, gen_unrealizable_example};
use caesar_core::march::beta_dist;
use caesar_core::optdist::{solve_alpha, SamplingObjective, SolverConfig};
use caesar_core::oracle::{exact_value, exact_visitation};
use caesar_core::{PolicyTable, TabularMdp};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Browser runs stop here instead of freezing the tab.
const BROWSER_BUDGET: u64 = 20_000_000;

fn parse(mdp: &str, policies: &str) -> Result<(TabularMdp, Vec<PolicyTable>), String> {
    let m: TabularMdp = serde_json::from_str(mdp).map_err(|e| format!("model: {e}"))?;
    let p = PolicyTable::parse_many(policies).map_err(|e| format!("policies: {e}"))?;
    Ok((m, p))
}

pub fn generate_json(
    states: usize,
    actions: usize,
    horizon: usize,
    policies: usize,
    seed: u64,
) -> Result<String, String> {
    let m = gen_random_mdp(states, actions, horizon, 0.0, seed).map_err(|e| e.to_string())?;
    let p = gen_random_policies(horizon, states, actions, policies, true, seed.wrapping_add(1))
        .map_err(|e| e.to_string())?;
    Ok(json!({ "mdp": m, "policies": p }).to_string())
}

pub fn evaluate_json(
    mdp: &str,
    policies: &str,
    epsilon: f64,
    delta: f64,
    seed: u64,
    mode: &str,
) -> Result<String, String> {
    let (m, p) = parse(mdp, policies)?;
    let report = match mode {
        "caesar" => {
            let mut cfg = CaesarConfig::new(epsilon, delta);
            cfg.budget_cap = BROWSER_BUDGET;
            evaluate_policies(&m, &p, &cfg, seed)
        }
        "mc" => mc_baseline(&m, &p, epsilon, delta, seed),
        other => return Err(format!("unknown mode {other}")),
    }
    .map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

pub fn mixture_json(mdp: &str, policies: &str) -> Result<String, String> {
    let (m, p) = parse(mdp, policies)?;
    let tables = p.iter().map(|x| exact_visitation(&m, x)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    let values = p.iter().map(|x| exact_value(&m, x)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    let obj = SamplingObjective::new(tables).map_err(|e| e.to_string())?;
    let sol = solve_alpha(&obj, &SolverConfig::default()).map_err(|e| e.to_string())?;
    let uniform = vec![1.0 / p.len() as f64; p.len()];
    Ok(json!({
        "alpha": sol.alpha.as_slice(),
        "objective": sol.objective,
        "total": sol.total(),
        "uniform_total": obj.total(&uniform),
        "values": values,
    })
    .to_string())
}

pub fn beta_json(x: f64, y: f64, beta: f64, k: usize) -> Result<String, String> {
    let d = beta_dist(x, y, beta).map_err(|e| e.to_string())?;
    let (_, _, report) = gen_unrealizable_example(k).map_err(|e| e.to_string())?;
    Ok(json!({ "distance": d, "unrealizable": report }).to_string())
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Random instance as `{"mdp": ..., "policies": [...]}`.
#[wasm_bindgen]
pub fn generate(states: usize, actions: usize, horizon: usize, policies: usize, seed: u32) -> Result<String, JsError> {
    js(generate_json(states, actions, horizon, policies, seed as u64))
}

/// Evaluation report for `mode` = `caesar` or `mc`.
#[wasm_bindgen]
pub fn evaluate(mdp: &str, policies: &str, epsilon: f64, delta: f64, seed: u32, mode: &str) -> Result<String, JsError> {
    js(evaluate_json(mdp, policies, epsilon, delta, seed as u64, mode))
}

/// Optimal sampling mixture from exact visitation tables.
#[wasm_bindgen]
pub fn mixture(mdp: &str, policies: &str) -> Result<String, JsError> {
    js(mixture_json(mdp, policies))
}

#[wasm_bindgen]
pub fn beta(x: f64, y: f64, beta: f64, k: usize) -> Result<String, JsError> {
    js(beta_json(x, y, beta, k))
}

//! Near-optimal policy identification by successive elimination, with one
//! evaluation round per halving of the accuracy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::caesar::{run_caesar, CaesarConfig};
use crate::mdp::{PolicyTable, TabularMdp};
use crate::sampler::{Simulator, StreamAllocator};
use crate::{Error, Result};

/// Indices whose estimate is within `2γ` of the best.
pub fn eliminate(estimates: &[f64], gamma: f64) -> Vec<usize> {
    let best = estimates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..estimates.len()).filter(|&i| best - estimates[i] <= 2.0 * gamma).collect()
}

/// Multi-reward rule: `estimates[r][i]` is policy `i` under reward `r`; a
/// policy goes only if it loses by more than `2γ` under every reward.
pub fn eliminate_multi(estimates: &[Vec<f64>], gamma: f64) -> Vec<usize> {
    let n = estimates.first().map_or(0, Vec::len);
    let kept: Vec<Vec<usize>> = estimates.iter().map(|e| eliminate(e, gamma)).collect();
    (0..n).filter(|i| kept.iter().any(|k| k.contains(i))).collect()
}

/// `ceil(log2(4/ε))`.
pub fn round_count(epsilon: f64) -> usize {
    (4.0 / epsilon).log2().ceil().max(1.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAudit {
    pub round: usize,
    pub gamma: f64,
    pub delta: f64,
    /// Candidate indices entering the round.
    pub survivors: Vec<usize>,
    /// Estimates aligned with `survivors`; one row per reward in the
    /// multi-reward variant.
    pub estimates: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_values: Option<Vec<Vec<f64>>>,
    /// Candidate indices leaving the round.
    pub kept: Vec<usize>,
    pub budget: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identification {
    pub chosen: usize,
    pub rounds: Vec<RoundAudit>,
    pub total_trajectories: u64,
    /// False when the budget cap ended the loop early; `chosen` is then
    /// drawn from the last survivors without the accuracy guarantee.
    pub complete: bool,
    pub epsilon: f64,
    pub delta: f64,
    pub seed: u64,
}

/// Returns an `ε`-optimal candidate with probability `1 − δ`.
/// `base` supplies constants, solver settings and the budget cap; its
/// accuracy fields are overwritten per round. The cap covers all rounds.
pub fn identify(
    mdp: &TabularMdp,
    policies: &[PolicyTable],
    epsilon: f64,
    delta: f64,
    base: &CaesarConfig,
    seed: u64,
) -> Result<Identification> {
    identify_multi(mdp, policies, &[mdp.rewards().to_vec()], epsilon, delta, base, seed)
}

/// Successive elimination across several reward tables sharing the
/// transitions of `mdp`. Experimental.
pub fn identify_multi(
    mdp: &TabularMdp,
    policies: &[PolicyTable],
    rewards: &[Vec<f64>],
    epsilon: f64,
    delta: f64,
    base: &CaesarConfig,
    seed: u64,
) -> Result<Identification> {
    if policies.is_empty() {
        return Err(Error::InvalidArgument("no candidate policies".into()));
    }
    if rewards.is_empty() {
        return Err(Error::InvalidArgument("no reward tables".into()));
    }
    if !(epsilon > 0.0 && epsilon < 1.0 && delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument("epsilon and delta must lie in (0, 1)".into()));
    }
    let models = rewards.iter().map(|r| mdp.with_rewards(r.clone())).collect::<Result<Vec<_>>>()?;
    let sims: Vec<Simulator<'_>> = models.iter().map(Simulator::new).collect();
    let streams = StreamAllocator::new(seed);
    let n_rounds = round_count(epsilon);
    let delta_i = delta / n_rounds as f64;
    let mut survivors: Vec<usize> = (0..policies.len()).collect();
    let mut rounds = Vec::new();
    let mut spent = 0u64;
    let mut complete = true;

    'rounds: for i in 1..=n_rounds {
        if survivors.len() == 1 {
            break;
        }
        let gamma = 0.5f64.powi(i as i32);
        let mut cfg = CaesarConfig { epsilon: gamma, delta: delta_i / rewards.len() as f64, ..base.clone() };
        let subset: Vec<PolicyTable> = survivors.iter().map(|&k| policies[k].clone()).collect();
        let mut estimates = Vec::with_capacity(rewards.len());
        let mut oracle = Vec::new();
        let mut budget = 0;
        for sim in &sims {
            let before = sim.rollouts();
            cfg.budget_cap = base.budget_cap.saturating_sub(spent + budget);
            let run = match run_caesar(sim, &subset, &cfg, &streams) {
                Ok(run) => run,
                Err(Error::BudgetExceeded { planned, cap, .. }) => {
                    log::warn!("round {i}: {planned} trajectories planned with {cap} left, stopping");
                    spent += budget + sim.rollouts() - before;
                    complete = false;
                    break 'rounds;
                }
                Err(e) => return Err(e),
            };
            budget += sim.rollouts() - before;
            if let Some(v) = run.report.oracle_values {
                oracle.push(v);
            }
            estimates.push(run.report.estimates);
        }
        let kept: Vec<usize> = eliminate_multi(&estimates, gamma).into_iter().map(|j| survivors[j]).collect();
        rounds.push(RoundAudit {
            round: i,
            gamma,
            delta: cfg.delta,
            survivors: survivors.clone(),
            estimates,
            oracle_values: (oracle.len() == rewards.len()).then_some(oracle),
            kept: kept.clone(),
            budget,
        });
        spent += budget;
        survivors = kept;
    }
    let mut rng = streams.fresh().rng();
    let chosen = survivors[rng.random_range(0..survivors.len())];
    Ok(Identification {
        chosen,
        total_trajectories: spent,
        rounds,
        complete,
        epsilon,
        delta,
        seed,
    })
}

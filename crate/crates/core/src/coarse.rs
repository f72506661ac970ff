//! Coarse visitation estimates: accurate to `max{ε, d/c}` from `O(1/ε)`
//! rollouts, plus removal of low-mass pairs.

use serde::{Deserialize, Serialize};

use crate::mdp::{PolicyTable, VisitationTable};
use crate::sampler::{RngStream, Simulator};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseConfig {
    pub epsilon: f64,
    pub delta: f64,
    /// Multiplicative slack `c`: entries above `ε` are accurate to `d/c`.
    pub c_mult: f64,
    /// Universal sample-size constant `C`.
    pub c_univ: f64,
}

impl CoarseConfig {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        Self { epsilon, delta, c_mult: 4.0, c_univ: 32.0 }
    }

    pub fn with_c_univ(mut self, c: f64) -> Self {
        self.c_univ = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidArgument(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta {} outside (0, 1)", self.delta)));
        }
        if !(self.c_mult >= 1.0) {
            return Err(Error::InvalidArgument("c_mult must be at least 1".into()));
        }
        if !(self.c_univ > 0.0 && self.c_univ.is_finite()) {
            return Err(Error::InvalidArgument("c_univ must be positive".into()));
        }
        Ok(())
    }

    /// `log(C·K/(ε·δ))`, floored at 1 so tiny constants still give a sane count.
    fn log_term(&self, k: usize) -> f64 {
        (self.c_univ * k as f64 / (self.epsilon * self.delta)).ln().max(1.0)
    }

    /// Extra factor for slack other than `d/4`; the Bernoulli argument scales
    /// as `1/(c·ε)` in the relative accuracy `1/c`.
    fn slack_factor(&self) -> f64 {
        self.c_mult / 4.0
    }
}

/// Total rollouts to coarsely estimate `k` policies at once:
/// `ceil(C·K·log(C·K/(ε·δ))/ε)`.
pub fn coarse_sample_size(cfg: &CoarseConfig, k: usize) -> u64 {
    let k = k.max(1);
    (cfg.c_univ * k as f64 * cfg.log_term(k) * cfg.slack_factor() / cfg.epsilon).ceil() as u64
}

/// Rollouts spent on each of `k` policies, so that the union over policies
/// keeps failure probability `δ`: `ceil(C·log(C·K/(ε·δ))/ε)`.
pub fn per_policy_sample_size(cfg: &CoarseConfig, k: usize) -> u64 {
    let k = k.max(1);
    (cfg.c_univ * cfg.log_term(k) * cfg.slack_factor() / cfg.epsilon).ceil() as u64
}

/// A coarse table with its bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseVisitation {
    pub table: VisitationTable,
    /// Per-entry accuracy the table was built for.
    pub epsilon_used: f64,
    pub thresholded: bool,
    /// Rollouts consumed.
    pub samples: u64,
}

/// Empirical `(h, s, a)` frequencies of `n` rollouts of `policy`.
pub fn empirical_visitation(
    sim: &Simulator<'_>,
    policy: &PolicyTable,
    n: u64,
    stream: RngStream,
) -> Result<VisitationTable> {
    let mdp = sim.mdp();
    mdp.check_policy(policy)?;
    let (s_n, a_n, h_n) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut counts = vec![0u64; h_n * s_n * a_n];
    let mut rng = stream.rng();
    for _ in 0..n {
        sim.walk(policy, h_n, &mut rng, |h, s, a| counts[(h * s_n + s) * a_n + a] += 1);
    }
    sim.charge(n);
    let inv = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    VisitationTable::from_flat(h_n, s_n, a_n, counts.into_iter().map(|c| c as f64 * inv).collect())
}

/// Coarse estimate for one of `k` policies sharing the failure budget.
pub fn coarse_estimate(
    sim: &Simulator<'_>,
    policy: &PolicyTable,
    cfg: &CoarseConfig,
    k: usize,
    stream: RngStream,
) -> Result<CoarseVisitation> {
    cfg.validate()?;
    let n = per_policy_sample_size(cfg, k);
    let table = empirical_visitation(sim, policy, n, stream)?;
    Ok(CoarseVisitation { table, epsilon_used: cfg.epsilon, thresholded: false, samples: n })
}

/// The per-entry accuracy `ε' = ε/(14·S·A)` that makes thresholding at
/// `5ε'` lose at most `ε/2` of true mass per step.
pub fn threshold_accuracy(epsilon: f64, num_states: usize, num_actions: usize) -> f64 {
    epsilon / (14.0 * (num_states * num_actions) as f64)
}

/// Zeroes entries below `5ε'` with `ε' = ε/(14·S·A)`.
pub fn threshold_low_mass(est: &CoarseVisitation, epsilon: f64) -> CoarseVisitation {
    let t = &est.table;
    let cut = 5.0 * threshold_accuracy(epsilon, t.num_states(), t.num_actions());
    let data = t.as_slice().iter().map(|&x| if x < cut { 0.0 } else { x }).collect();
    CoarseVisitation {
        table: VisitationTable::from_flat(t.horizon(), t.num_states(), t.num_actions(), data).expect("same shape"),
        epsilon_used: est.epsilon_used,
        thresholded: true,
        samples: est.samples,
    }
}

/// Whether `|d̂ − d| ≤ max{ε, d/c}` holds on every entry.
pub fn coarse_event_holds(estimate: &VisitationTable, truth: &VisitationTable, epsilon: f64, c_mult: f64) -> bool {
    estimate.as_slice().iter().zip(truth.as_slice()).all(|(e, d)| (e - d).abs() <= epsilon.max(d / c_mult) + 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::TabularMdp;

    #[test]
    fn sample_size_formula() {
        let cfg = CoarseConfig::new(0.1, 0.1);
        assert_eq!(coarse_sample_size(&cfg, 1), 2583);
        assert_eq!(coarse_sample_size(&cfg, 1), (320.0 * 3200f64.ln()).ceil() as u64);
        assert!(coarse_sample_size(&cfg, 2) >= 2 * coarse_sample_size(&cfg, 1));
        let half = CoarseConfig::new(0.05, 0.1);
        assert!(coarse_sample_size(&half, 1) > 2 * coarse_sample_size(&cfg, 1));
        assert_eq!(per_policy_sample_size(&cfg, 1), 2583);
    }

    #[test]
    fn threshold_examples() {
        // S·A = 1 and ε = 0.14 gives ε' = 0.01
        let t = VisitationTable::from_flat(2, 1, 1, vec![0.04, 0.06]).unwrap();
        let est = CoarseVisitation { table: t, epsilon_used: 0.01, thresholded: false, samples: 0 };
        let out = threshold_low_mass(&est, 0.14);
        assert_eq!(out.table.as_slice(), &[0.0, 0.06]);
        assert!(out.thresholded);
    }

    #[test]
    fn deterministic_path_is_exact() {
        let m = TabularMdp::new(2, 1, 2, vec![1.0, 0.0], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0], vec![0.0; 4])
            .unwrap();
        let sim = Simulator::new(&m);
        let est = coarse_estimate(
            &sim,
            &PolicyTable::uniform(2, 2, 1),
            &CoarseConfig::new(0.2, 0.2),
            1,
            RngStream::new(0, 0),
        )
        .unwrap();
        assert_eq!(est.table.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(sim.rollouts(), est.samples);
    }

    #[test]
    fn bernoulli_coverage() {
        // d = 0.3 at one cell; ε = 0.05, δ = 0.1.
        let m = TabularMdp::new(2, 1, 1, vec![0.3, 0.7], vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2]).unwrap();
        let sim = Simulator::new(&m);
        let cfg = CoarseConfig::new(0.05, 0.1);
        let pol = PolicyTable::uniform(1, 2, 1);
        let good = (0..1000)
            .filter(|&seed| {
                let est = coarse_estimate(&sim, &pol, &cfg, 1, RngStream::new(seed, 0)).unwrap();
                (est.table.get(0, 0, 0) - 0.3).abs() <= 0.075
            })
            .count();
        assert!(good >= 900, "{good}");
    }
}

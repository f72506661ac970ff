//! End-to-end multi-policy evaluation: coarse estimation, mixture solve,
//! importance density estimation and the final weighted estimator, plus the
//! per-policy Monte Carlo baseline.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coarse::{coarse_estimate, threshold_accuracy, threshold_low_mass, CoarseConfig, CoarseVisitation};
use crate::ides::{
    iteration_count, run_ides, IdesConfig, IdesOutput, IdesTarget, ImportanceWeightTable, MixtureSource, TraceRow,
};
use crate::mdp::{PolicyTable, TabularMdp, VisitationTable};
use crate::optdist::{solve_alpha, solve_alpha_per_step, SamplingObjective, SamplingSolution, SolverConfig};
use crate::oracle::{enumerate_deterministic_policies, exact_value, exact_visitation, max_visitation};
use crate::par::map_collect;
use crate::sampler::{Simulator, StreamAllocator, TaggedTrajectory};
use crate::{Error, Result};

/// Largest `S·A·H` for which reports include oracle values.
pub const ORACLE_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantsMode {
    Theory,
    Calibrated,
}

/// The unspecified universal constants of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub mode: ConstantsMode,
    /// Coarse sample-size constant `C`.
    pub coarse_c_univ: f64,
    /// IDES iteration constant `C_h`.
    pub ides_c_h: f64,
    /// Multiplier on the Bernstein final sample size.
    pub bernstein_scale: f64,
}

impl Constants {
    pub fn theory() -> Self {
        Self { mode: ConstantsMode::Theory, coarse_c_univ: 32.0, ides_c_h: 8.0, bernstein_scale: 1.0 }
    }

    /// Values frozen from the calibration harness (`caesar calibrate`).
    pub fn calibrated() -> Self {
        Self { mode: ConstantsMode::Calibrated, coarse_c_univ: 3.3795, ides_c_h: 9.76815, bernstein_scale: 0.0234375 }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let c: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if !(c.coarse_c_univ > 0.0 && c.ides_c_h > 0.0 && c.bernstein_scale > 0.0) {
            return Err(Error::InvalidArgument("constants must be positive".into()));
        }
        Ok(c)
    }
}

impl Default for Constants {
    fn default() -> Self {
        Self::calibrated()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaesarConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub constants: Constants,
    pub budget_cap: u64,
    pub solver: SolverConfig,
    /// Overrides the median-of-means repetition count.
    pub mom_reps: Option<usize>,
    pub trace_stride: Option<u64>,
    /// Attach oracle values when the model is small enough.
    pub with_oracle: bool,
}

impl CaesarConfig {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        Self {
            epsilon,
            delta,
            constants: Constants::default(),
            budget_cap: 100_000_000,
            solver: SolverConfig::default(),
            mom_reps: None,
            trace_stride: None,
            with_oracle: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidArgument(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta {} outside (0, 1)", self.delta)));
        }
        Ok(())
    }

    /// Failure budget of each of the `K·H` median-of-means selections.
    pub fn ides_delta(&self, k: usize, h: usize) -> f64 {
        self.delta / (3.0 * (k * h) as f64)
    }

    pub fn ides_config(&self, k: usize, h: usize) -> IdesConfig {
        IdesConfig {
            c_h: self.constants.ides_c_h,
            mom_reps: self.mom_reps,
            trace_stride: self.trace_stride,
            ..IdesConfig::new(self.epsilon, self.ides_delta(k, h))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounts {
    pub coarse: u64,
    pub ides: u64,
    #[serde(rename = "final")]
    pub final_phase: u64,
    pub total: u64,
}

impl PhaseCounts {
    /// Trajectories spent after the coarse phase.
    pub fn phase_two(&self) -> u64 {
        self.ides + self.final_phase
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub epsilon: f64,
    pub delta: f64,
    pub constants: Option<Constants>,
    pub budget_cap: u64,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub num_policies: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: String,
    pub seed: u64,
    pub estimates: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_values: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abs_errors: Option<Vec<f64>>,
    pub phase_counts: PhaseCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    pub config: ConfigEcho,
}

impl EvaluationReport {
    pub fn max_abs_error(&self) -> Option<f64> {
        self.abs_errors.as_ref().map(|e| e.iter().copied().fold(0.0, f64::max))
    }

    fn attach_oracle(&mut self, mdp: &TabularMdp, policies: &[PolicyTable]) -> Result<()> {
        if mdp.num_states() * mdp.num_actions() * mdp.horizon() > ORACLE_LIMIT {
            return Ok(());
        }
        let values = policies.iter().map(|p| exact_value(mdp, p)).collect::<Result<Vec<_>>>()?;
        self.abs_errors = Some(self.estimates.iter().zip(&values).map(|(e, v)| (e - v).abs()).collect());
        self.oracle_values = Some(values);
        Ok(())
    }

    /// One row per policy: `k,v_hat,v_oracle,abs_err`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["k", "v_hat", "v_oracle", "abs_err"]).map_err(io)?;
        for (k, v) in self.estimates.iter().enumerate() {
            let oracle = self.oracle_values.as_ref().map_or(String::new(), |o| o[k].to_string());
            let err = self.abs_errors.as_ref().map_or(String::new(), |e| e[k].to_string());
            w.write_record([k.to_string(), v.to_string(), oracle, err]).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything a CAESAR run produced, for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct CaesarRun {
    pub report: EvaluationReport,
    pub coarse: Vec<CoarseVisitation>,
    pub solution: SamplingSolution,
    pub ides: IdesOutput,
    pub final_samples: u64,
    /// Stream ids consumed per phase.
    pub streams: PhaseStreams,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PhaseStreams {
    pub coarse: Vec<u64>,
    pub ides: Vec<u64>,
    pub final_phase: Vec<u64>,
}

impl PhaseStreams {
    pub fn pairwise_disjoint(&self) -> bool {
        let mut all: Vec<u64> = self.coarse.iter().chain(&self.ides).chain(&self.final_phase).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        all.len() == n
    }
}

/// `ρ̂ = Σ_h max_k Σ d̂²/μ̂`.
pub fn rho_hat(d_hats: &[&VisitationTable], mu_hat: &VisitationTable) -> f64 {
    (0..mu_hat.horizon())
        .map(|h| {
            d_hats
                .iter()
                .map(|d| {
                    d.step(h)
                        .iter()
                        .zip(mu_hat.step(h))
                        .filter(|(x, m)| **x > 0.0 && **m > 0.0)
                        .map(|(x, m)| x * x / m)
                        .sum::<f64>()
                })
                .fold(0.0, f64::max)
        })
        .sum()
}

/// `M̂ = max_k Σ_h max_{s,a} 2d̂/μ̂`: the largest per-trajectory statistic
/// when weights sit at the top of their box and rewards are at most 1.
pub fn m_hat(d_hats: &[&VisitationTable], mu_hat: &VisitationTable) -> f64 {
    d_hats
        .iter()
        .map(|d| {
            (0..mu_hat.horizon())
                .map(|h| {
                    d.step(h)
                        .iter()
                        .zip(mu_hat.step(h))
                        .filter(|(x, m)| **x > 0.0 && **m > 0.0)
                        .map(|(x, m)| 2.0 * x / m)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// `n = ceil(8·H·ρ̂·log(2K/δ)/ε² + 4·M̂·log(2K/δ)/(3ε))`, times `scale`.
pub fn final_sample_size(
    d_hats: &[&VisitationTable],
    mu_hat: &VisitationTable,
    epsilon: f64,
    delta: f64,
    scale: f64,
) -> u64 {
    let h = mu_hat.horizon() as f64;
    let k = d_hats.len().max(1) as f64;
    let log = (2.0 * k / delta).ln();
    let rho = rho_hat(d_hats, mu_hat);
    let m = m_hat(d_hats, mu_hat);
    (scale * (8.0 * h * rho * log / (epsilon * epsilon) + 4.0 * m * log / (3.0 * epsilon))).ceil() as u64
}

/// `Σ_h (ŵ_h/μ̂_h)(s_h,a_h)·r_h` for one trajectory.
#[inline]
fn statistic(weights: &ImportanceWeightTable, steps: &[(usize, usize, f64)]) -> Result<f64> {
    let mut x = 0.0;
    for (h, &(s, a, r)) in steps.iter().enumerate() {
        let w = weights.w.get(h, s, a);
        if w > 0.0 && weights.mu_hat.get(h, s, a) <= 0.0 {
            return Err(Error::Support(format!("positive weight at ({h}, {s}, {a}) where the mixture has no mass")));
        }
        if r != 0.0 {
            x += weights.ratio(h, s, a) * r;
        }
    }
    Ok(x)
}

/// `V̂ = (1/n) Σ_i Σ_h (ŵ_h/μ̂_h)(s_h^i, a_h^i)·r_h^i` per policy.
pub fn final_estimator(weights: &[ImportanceWeightTable], trajectories: &[TaggedTrajectory]) -> Result<Vec<f64>> {
    let n = trajectories.len().max(1) as f64;
    weights
        .iter()
        .map(|w| {
            let mut sum = 0.0;
            for t in trajectories {
                sum += statistic(w, &t.steps)?;
            }
            Ok(sum / n)
        })
        .collect()
}

fn echo(mdp: &TabularMdp, k: usize, epsilon: f64, delta: f64, constants: Option<Constants>, cap: u64) -> ConfigEcho {
    ConfigEcho {
        epsilon,
        delta,
        constants,
        budget_cap: cap,
        num_states: mdp.num_states(),
        num_actions: mdp.num_actions(),
        horizon: mdp.horizon(),
        num_policies: k,
    }
}

/// Planned IDES trajectories for given per-target, per-step iteration counts.
fn planned_ides(iters: &[Vec<u64>], horizon: usize, reps: usize, fraction: f64) -> u64 {
    (0..horizon)
        .map(|h| {
            let n_max = iters.iter().map(|v| v[h]).max().unwrap_or(0);
            if n_max == 0 {
                return 0;
            }
            let held = if reps > 1 { ((n_max as f64 * fraction).ceil() as u64).max(1) } else { 0 };
            2 * n_max * reps as u64 + held
        })
        .sum()
}

/// Coarse tables (thresholded) and the solved mixture.
#[derive(Debug, Clone)]
pub struct PhaseOne {
    pub coarse: Vec<CoarseVisitation>,
    pub solution: SamplingSolution,
    pub streams: Vec<u64>,
}

/// Coarse estimation at `ε/(14SA)` with `δ/3`, low-mass removal, then the
/// mixture solve.
pub fn run_phase_one(
    sim: &Simulator<'_>,
    policies: &[PolicyTable],
    cfg: &CaesarConfig,
    streams: &StreamAllocator,
) -> Result<PhaseOne> {
    cfg.validate()?;
    let mdp = sim.mdp();
    let k_n = policies.len();
    let coarse_cfg = CoarseConfig {
        epsilon: threshold_accuracy(cfg.epsilon, mdp.num_states(), mdp.num_actions()),
        delta: cfg.delta / 3.0,
        c_mult: 4.0,
        c_univ: cfg.constants.coarse_c_univ,
    };
    let coarse_streams = streams.fresh_many(k_n);
    let ids = coarse_streams.iter().map(|s| s.stream).collect();
    let raw = map_collect(policies.iter().zip(coarse_streams).collect(), |(p, st)| {
        coarse_estimate(sim, p, &coarse_cfg, k_n, st)
    });
    let coarse: Vec<CoarseVisitation> =
        raw.into_iter().map(|r| r.map(|c| threshold_low_mass(&c, cfg.epsilon))).collect::<Result<_>>()?;
    let objective = SamplingObjective::new(coarse.iter().map(|c| c.table.clone()).collect())?;
    let solution = solve_alpha(&objective, &cfg.solver)?;
    Ok(PhaseOne { coarse, solution, streams: ids })
}

/// Runs the pipeline on a shared simulator and stream allocator, so that
/// callers can chain several evaluations on disjoint data.
pub fn run_caesar(
    sim: &Simulator<'_>,
    policies: &[PolicyTable],
    cfg: &CaesarConfig,
    streams: &StreamAllocator,
) -> Result<CaesarRun> {
    cfg.validate()?;
    if policies.is_empty() {
        return Err(Error::InvalidArgument("no target policies".into()));
    }
    let mdp = sim.mdp();
    for p in policies {
        mdp.check_policy(p)?;
    }
    let h_n = mdp.horizon();
    let k_n = policies.len();
    let start = sim.rollouts();
    let mut phase_streams = PhaseStreams::default();

    let phase_one = run_phase_one(sim, policies, cfg, streams)?;
    phase_streams.coarse = phase_one.streams.clone();
    let PhaseOne { coarse, solution, .. } = phase_one;
    let coarse_spent = sim.rollouts() - start;
    let mu_hat = solution.mu_hat.clone();

    // Plan Phase II and check the budget before sampling.
    let ides_cfg = cfg.ides_config(k_n, h_n);
    let d_hats: Vec<&VisitationTable> = coarse.iter().map(|c| &c.table).collect();
    let iters: Vec<Vec<u64>> = d_hats
        .iter()
        .map(|d| {
            (0..h_n)
                .map(|h| iteration_count(&ides_cfg, d, &mu_hat, h).ceil().min(ides_cfg.max_step_iters as f64) as u64)
                .collect()
        })
        .collect();
    let n_final =
        final_sample_size(&d_hats, &mu_hat, cfg.epsilon / 4.0, cfg.delta / 3.0, cfg.constants.bernstein_scale);
    let planned_two = planned_ides(&iters, h_n, ides_cfg.reps(), ides_cfg.heldout_fraction) + n_final;
    if coarse_spent + planned_two > cfg.budget_cap {
        return Err(Error::BudgetExceeded {
            planned: coarse_spent + planned_two,
            cap: cfg.budget_cap,
            spent: coarse_spent,
        });
    }

    // IDES on data from the solved mixture.
    let source = MixtureSource { sim, policies, alpha: &solution.alpha };
    let targets: Vec<IdesTarget<'_>> =
        policies.iter().zip(&d_hats).map(|(p, d)| IdesTarget { policy: p, d_hat: d }).collect();
    let before_ides: Vec<u64> = streams.issued();
    let ides = run_ides(&source, &targets, &mu_hat, &ides_cfg, streams)?;
    phase_streams.ides = streams.issued().into_iter().filter(|s| !before_ides.contains(s)).collect();

    // Final estimator on fresh mixture trajectories.
    let final_stream = streams.fresh();
    phase_streams.final_phase = vec![final_stream.stream];
    let mut rng = final_stream.rng();
    let mut sums = vec![0.0; k_n];
    let mut steps = vec![(0usize, 0usize, 0.0f64); h_n];
    for _ in 0..n_final {
        sim.walk_mixture(policies, &solution.alpha, h_n, &mut rng, |h, s, a| steps[h] = (s, a, mdp.reward(h, s, a)));
        for (sum, w) in sums.iter_mut().zip(&ides.weights) {
            *sum += statistic(w, &steps)?;
        }
    }
    sim.charge(n_final);
    let estimates: Vec<f64> = sums.iter().map(|s| if n_final == 0 { 0.0 } else { s / n_final as f64 }).collect();

    let phase_counts = PhaseCounts {
        coarse: coarse_spent,
        ides: ides.trajectories,
        final_phase: n_final,
        total: sim.rollouts() - start,
    };
    let mut report = EvaluationReport {
        mode: "caesar".into(),
        seed: streams.seed(),
        estimates,
        oracle_values: None,
        abs_errors: None,
        phase_counts,
        alpha: Some(solution.alpha.as_slice().to_vec()),
        config: echo(mdp, k_n, cfg.epsilon, cfg.delta, Some(cfg.constants), cfg.budget_cap),
    };
    if cfg.with_oracle {
        report.attach_oracle(mdp, policies)?;
    }
    Ok(CaesarRun { report, coarse, solution, ides, final_samples: n_final, streams: phase_streams })
}

/// Evaluates all `policies` to accuracy `ε` with probability `1 − δ`.
pub fn evaluate_policies(
    mdp: &TabularMdp,
    policies: &[PolicyTable],
    cfg: &CaesarConfig,
    seed: u64,
) -> Result<EvaluationReport> {
    let sim = Simulator::new(mdp);
    let streams = StreamAllocator::new(seed);
    Ok(run_caesar(&sim, policies, cfg, &streams)?.report)
}

/// Trace rows of a run, if tracing was enabled.
pub fn trace_rows(run: &CaesarRun) -> &[TraceRow] {
    &run.ides.trace
}

/// Rollouts per policy for the Monte Carlo baseline:
/// `ceil(H²·log(2K/δ)/(2ε²))`.
pub fn mc_sample_size(horizon: usize, k: usize, epsilon: f64, delta: f64) -> u64 {
    let h = horizon as f64;
    (h * h * (2.0 * k.max(1) as f64 / delta).ln() / (2.0 * epsilon * epsilon)).ceil() as u64
}

/// Independent on-policy Monte Carlo per target.
pub fn mc_baseline_with(
    sim: &Simulator<'_>,
    policies: &[PolicyTable],
    epsilon: f64,
    delta: f64,
    budget_cap: u64,
    streams: &StreamAllocator,
) -> Result<EvaluationReport> {
    if policies.is_empty() {
        return Err(Error::InvalidArgument("no target policies".into()));
    }
    let mdp = sim.mdp();
    let h_n = mdp.horizon();
    let n = mc_sample_size(h_n, policies.len(), epsilon, delta);
    let planned = n * policies.len() as u64;
    if planned > budget_cap {
        return Err(Error::BudgetExceeded { planned, cap: budget_cap, spent: 0 });
    }
    let start = sim.rollouts();
    let st = streams.fresh_many(policies.len());
    let estimates = map_collect(policies.iter().zip(st).collect(), |(p, stream)| -> Result<f64> {
        mdp.check_policy(p)?;
        let mut rng = stream.rng();
        let mut sum = 0.0;
        for _ in 0..n {
            sim.walk(p, h_n, &mut rng, |h, s, a| sum += mdp.reward(h, s, a));
        }
        sim.charge(n);
        Ok(sum / n as f64)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let total = sim.rollouts() - start;
    let mut report = EvaluationReport {
        mode: "mc".into(),
        seed: streams.seed(),
        estimates,
        oracle_values: None,
        abs_errors: None,
        phase_counts: PhaseCounts { coarse: 0, ides: 0, final_phase: total, total },
        alpha: None,
        config: echo(mdp, policies.len(), epsilon, delta, None, budget_cap),
    };
    report.attach_oracle(mdp, policies)?;
    Ok(report)
}

pub fn mc_baseline(
    mdp: &TabularMdp,
    policies: &[PolicyTable],
    epsilon: f64,
    delta: f64,
    seed: u64,
) -> Result<EvaluationReport> {
    let sim = Simulator::new(mdp);
    mc_baseline_with(&sim, policies, epsilon, delta, u64::MAX, &StreamAllocator::new(seed))
}

/// Worst per-step variance proxy over all deterministic policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicBound {
    /// `max_h max_k Σ d²/μ*` for the per-step optimal mixtures.
    pub solved: f64,
    /// The same quantity for the uniform mixture of per-pair maximisers.
    pub witness: f64,
    /// `S·A`.
    pub bound: f64,
}

impl DeterministicBound {
    pub fn holds(&self) -> bool {
        self.solved <= self.bound * (1.0 + 1e-9) && self.witness <= self.bound * (1.0 + 1e-9)
    }
}

/// Solves the mixture problem over all deterministic policies, step by
/// step, with exact tables.
pub fn deterministic_upper_bound_check(mdp: &TabularMdp, cap: u64) -> Result<DeterministicBound> {
    let policies = enumerate_deterministic_policies(mdp, cap)?;
    let tables = policies.iter().map(|p| exact_visitation(mdp, p)).collect::<Result<Vec<_>>>()?;
    let (s_n, a_n, h_n) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let sa = (s_n * a_n) as f64;
    let (_, argmax) = max_visitation(mdp)?;
    let argmax_tables = argmax.iter().map(|p| exact_visitation(mdp, p)).collect::<Result<Vec<_>>>()?;

    let mut solved: f64 = 0.0;
    let mut witness: f64 = 0.0;
    for h in 0..h_n {
        // distinct step-h tables; duplicates add nothing to the hull
        let mut distinct: Vec<Vec<f64>> = Vec::new();
        for t in &tables {
            let row = t.step(h).to_vec();
            if !distinct.iter().any(|d| d.iter().zip(&row).all(|(x, y)| (x - y).abs() < 1e-15)) {
                distinct.push(row);
            }
        }
        let step_tables: Vec<VisitationTable> =
            distinct.into_iter().map(|d| VisitationTable::from_flat(1, s_n, a_n, d)).collect::<Result<_>>()?;
        let obj = SamplingObjective::new(step_tables.clone())?;
        let sol = solve_alpha_per_step(&obj, &SolverConfig::default())?;
        solved = solved.max(sol.objective[0]);

        // μ'_h = (1/SA) Σ_{s,a} d_h^{π_(h,s,a)}
        let mut mu = vec![0.0; s_n * a_n];
        for s in 0..s_n {
            for a in 0..a_n {
                let t = &argmax_tables[(h * s_n + s) * a_n + a];
                for (m, x) in mu.iter_mut().zip(t.step(h)) {
                    *m += x / sa;
                }
            }
        }
        let mu = VisitationTable::from_flat(1, s_n, a_n, mu)?;
        let w_obj = SamplingObjective::with_generators(step_tables, vec![mu])?;
        witness = witness.max(w_obj.step_value(&[1.0], 0));
    }
    Ok(DeterministicBound { solved, witness, bound: sa })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (TabularMdp, Vec<PolicyTable>) {
        let p = vec![0.7, 0.3, 0.4, 0.6, 0.2, 0.8, 0.5, 0.5, 0.1, 0.9, 0.6, 0.4, 0.3, 0.7, 0.8, 0.2];
        let m = TabularMdp::new(2, 2, 2, vec![0.5, 0.5], p, vec![0.2, 0.9, 0.4, 0.1, 0.6, 0.3, 1.0, 0.0]).unwrap();
        let pols = vec![
            PolicyTable::new(2, 2, 2, vec![0.6, 0.4, 0.3, 0.7, 0.5, 0.5, 0.9, 0.1]).unwrap(),
            PolicyTable::deterministic(2, 2, 2, &[1, 0, 0, 1]).unwrap(),
        ];
        (m, pols)
    }

    #[test]
    fn final_size_formula() {
        let d = VisitationTable::from_flat(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let mu = d.clone();
        // ρ̂ = 1, M̂ = 2
        let n = final_sample_size(&[&d], &mu, 0.1, 0.1, 1.0);
        let log = 20f64.ln();
        assert_eq!(n, (8.0 * log / 0.01 + 8.0 * log / 0.3).ceil() as u64);
        let n2 = final_sample_size(&[&d], &mu, 0.05, 0.1, 1.0);
        let ratio = n2 as f64 / n as f64;
        assert!(ratio > 3.5 && ratio < 4.0);
    }

    #[test]
    fn zero_rewards_give_zero() {
        let (m, pols) = small();
        let m = m.with_rewards(vec![0.0; 8]).unwrap();
        let mut cfg = CaesarConfig::new(0.3, 0.2);
        cfg.mom_reps = Some(3);
        let r = evaluate_policies(&m, &pols, &cfg, 1).unwrap();
        assert!(r.estimates.iter().all(|&v| v == 0.0));
        let mc = mc_baseline(&m, &pols, 0.3, 0.2, 1).unwrap();
        assert!(mc.estimates.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ledger_and_streams() {
        let (m, pols) = small();
        let sim = Simulator::new(&m);
        let streams = StreamAllocator::new(5);
        let mut cfg = CaesarConfig::new(0.3, 0.2);
        cfg.mom_reps = Some(3);
        let run = run_caesar(&sim, &pols, &cfg, &streams).unwrap();
        let c = run.report.phase_counts;
        assert_eq!(c.total, sim.rollouts());
        assert_eq!(c.coarse + c.ides + c.final_phase, c.total);
        assert!(run.streams.pairwise_disjoint());
        assert!(!run.streams.ides.is_empty());
    }

    #[test]
    fn budget_cap_aborts() {
        let (m, pols) = small();
        let mut cfg = CaesarConfig::new(0.3, 0.2);
        cfg.budget_cap = 1000;
        match evaluate_policies(&m, &pols, &cfg, 1) {
            Err(Error::BudgetExceeded { planned, cap, spent }) => {
                assert!(planned > cap);
                assert!(spent <= planned);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn mc_budget_is_additive() {
        let (m, pols) = small();
        let r = mc_baseline(&m, &pols, 0.2, 0.1, 3).unwrap();
        assert_eq!(r.phase_counts.total, 2 * mc_sample_size(2, 2, 0.2, 0.1));
    }

    #[test]
    fn exact_weights_make_estimator_unbiased() {
        let (m, pols) = small();
        let mu = exact_visitation(&m, &pols[0]).unwrap();
        let mix = crate::MixtureWeights::new(vec![1.0, 0.0]).unwrap();
        let d1 = exact_visitation(&m, &pols[1]).unwrap();
        let w = ImportanceWeightTable { w: d1.clone(), mu_hat: mu.clone() };
        // ŵ = d·μ̂/μ̃ with μ̂ = μ̃, so the ratio is d/μ
        let sim = Simulator::new(&m);
        let traj = sim.rollout_mixture(&pols, &mix, 100_000, crate::RngStream::new(2, 0)).unwrap();
        let est = final_estimator(&[w], &traj).unwrap()[0];
        let v = exact_value(&m, &pols[1]).unwrap();
        assert!((est - v).abs() < 0.03, "{est} vs {v}");
    }

    #[test]
    fn tiny_deterministic_bound() {
        let m = TabularMdp::new(1, 1, 2, vec![1.0], vec![1.0; 2], vec![0.0; 2]).unwrap();
        let b = deterministic_upper_bound_check(&m, 1000).unwrap();
        assert!(b.solved <= 1.0 + 1e-9 && b.holds());
    }
}

//! Step-wise importance density estimation.
//!
//! For each step `h` the weights `w_h` minimise the quadratic loss
//!
//! ```text
//! ℓ_h(w) = ½ E_{μ̃_h}[w(s,a)² / μ̂_h(s,a)]
//!        − E_{(s',a')~μ̃_{h−1}, s~P}[(ŵ_{h−1}/μ̂_{h−1})(s',a') Σ_a w(s,a) π_h(a|s)]
//! ```
//!
//! whose minimiser is `d_h·μ̂_h/μ̃_h` when the previous ratio is exact. The
//! loss is minimised by projected SGD on `[0, 2d̂_h]` with a triangularly
//! weighted average, one fresh pair of trajectories per iteration. Several
//! independent runs are reduced by picking the one with the median held-out
//! loss. Step `0` uses the virtual predecessor with ratio 1 and next-state
//! law `ν`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mdp::{PolicyTable, TabularMdp, VisitationTable};
use crate::par::map_collect;
use crate::sampler::{MixtureWeights, Simulator, StreamAllocator};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdesConfig {
    pub epsilon: f64,
    pub delta: f64,
    /// Iteration constant `C_h`.
    pub c_h: f64,
    /// Median-of-means repetitions; `None` means `ceil(8·ln(1/δ))`.
    pub mom_reps: Option<usize>,
    /// Assumed strong-convexity modulus in the step size `2/(γ(i+1))`.
    pub gamma: f64,
    /// Held-out batch size as a fraction of `n_h`.
    pub heldout_fraction: f64,
    /// Guard against absurd iteration counts.
    pub max_step_iters: u64,
    /// Emit a trace row every this many iterations.
    pub trace_stride: Option<u64>,
}

impl IdesConfig {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        Self {
            epsilon,
            delta,
            c_h: 8.0,
            mom_reps: None,
            gamma: 0.8,
            heldout_fraction: 0.25,
            max_step_iters: 200_000_000,
            trace_stride: None,
        }
    }

    pub fn reps(&self) -> usize {
        self.mom_reps.unwrap_or_else(|| mom_reps_for(self.delta))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument("IDES needs ε > 0 and δ in (0, 1)".into()));
        }
        if !(self.c_h > 0.0 && self.gamma > 0.0 && self.heldout_fraction > 0.0) {
            return Err(Error::InvalidArgument("IDES constants must be positive".into()));
        }
        if self.mom_reps == Some(0) {
            return Err(Error::InvalidArgument("at least one repetition is required".into()));
        }
        Ok(())
    }
}

/// `ceil(8·ln(1/δ))`, at least 1.
pub fn mom_reps_for(delta: f64) -> usize {
    ((8.0 * (1.0 / delta).ln()).ceil() as usize).max(1)
}

/// `Σ_{s,a} d̂_h²/μ̂_h` with `0/0 = 0`; the virtual step before the first
/// contributes 1.
fn weighted_mass(d_hat: &VisitationTable, mu_hat: &VisitationTable, h: Option<usize>) -> f64 {
    match h {
        None => 1.0,
        Some(h) => d_hat
            .step(h)
            .iter()
            .zip(mu_hat.step(h))
            .filter(|(d, m)| **d > 0.0 && **m > 0.0)
            .map(|(d, m)| d * d / m)
            .sum(),
    }
}

/// `n_h = C_h·(H⁴/ε²)·Σ_{s,a}(d̂_h²/μ̂_h + d̂_{h−1}²/μ̂_{h−1})`, as a real.
pub fn iteration_count(cfg: &IdesConfig, d_hat: &VisitationTable, mu_hat: &VisitationTable, h: usize) -> f64 {
    let big_h = d_hat.horizon() as f64;
    let cur = weighted_mass(d_hat, mu_hat, Some(h));
    if cur == 0.0 {
        return 0.0;
    }
    let prev = weighted_mass(d_hat, mu_hat, h.checked_sub(1));
    cfg.c_h * big_h.powi(4) / (cfg.epsilon * cfg.epsilon) * (cur + prev)
}

fn capped_iterations(cfg: &IdesConfig, d_hat: &VisitationTable, mu_hat: &VisitationTable, h: usize) -> u64 {
    let n = iteration_count(cfg, d_hat, mu_hat, h).ceil();
    if n > cfg.max_step_iters as f64 {
        log::warn!("step {h}: {n:.3e} iterations capped at {}", cfg.max_step_iters);
        cfg.max_step_iters
    } else {
        n as u64
    }
}

/// Per-step weights `ŵ_h` and the reference `μ̂_h` they are relative to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeightTable {
    pub w: VisitationTable,
    pub mu_hat: VisitationTable,
}

impl ImportanceWeightTable {
    /// `ŵ_h/μ̂_h`, zero off the support.
    #[inline]
    pub fn ratio(&self, h: usize, s: usize, a: usize) -> f64 {
        ratio(self.w.get(h, s, a), self.mu_hat.get(h, s, a))
    }

    pub fn ratio_step(&self, h: usize) -> Vec<f64> {
        self.w.step(h).iter().zip(self.mu_hat.step(h)).map(|(&w, &m)| ratio(w, m)).collect()
    }

    /// `μ̃_h·ŵ_h/μ̂_h`, the implied visitation estimate under the realised
    /// mixture.
    pub fn density(&self, mu_tilde: &VisitationTable) -> VisitationTable {
        let data = self
            .w
            .as_slice()
            .iter()
            .zip(self.mu_hat.as_slice())
            .zip(mu_tilde.as_slice())
            .map(|((&w, &m), &t)| t * ratio(w, m))
            .collect();
        VisitationTable::from_flat(self.w.horizon(), self.w.num_states(), self.w.num_actions(), data)
            .expect("same shape")
    }

    /// Per-step `Σ_{s,a} |μ̃·ŵ/μ̂ − d|`.
    pub fn l1_errors(&self, mu_tilde: &VisitationTable, truth: &VisitationTable) -> Vec<f64> {
        let est = self.density(mu_tilde);
        (0..truth.horizon()).map(|h| est.step(h).iter().zip(truth.step(h)).map(|(x, y)| (x - y).abs()).sum()).collect()
    }
}

#[inline]
fn ratio(w: f64, m: f64) -> f64 {
    if w == 0.0 || m <= 0.0 {
        0.0
    } else {
        w / m
    }
}

/// One SGD input: `(s_h, a_h)` from one trajectory, and `(s_{h−1}, a_{h−1})`
/// with the following state from another. `prev` is `None` at step 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSample {
    pub state: u32,
    pub action: u32,
    pub prev: Option<(u32, u32)>,
    pub next_state: u32,
}

/// The fixed inputs of one step's loss.
#[derive(Debug, Clone)]
pub struct StepProblem<'a> {
    pub h: usize,
    pub policy: &'a PolicyTable,
    /// `μ̂_h`, flat `[s][a]`.
    pub mu_hat: &'a [f64],
    /// Upper end of the feasible box, `2d̂_h`; zero marks excluded cells.
    pub upper: Vec<f64>,
    /// `ŵ_{h−1}/μ̂_{h−1}`, flat `[s][a]`; `None` at step 0.
    pub prev_ratio: Option<Vec<f64>>,
}

impl<'a> StepProblem<'a> {
    pub fn new(
        h: usize,
        policy: &'a PolicyTable,
        d_hat: &VisitationTable,
        mu_hat: &'a VisitationTable,
        prev_ratio: Option<Vec<f64>>,
    ) -> Self {
        Self { h, policy, mu_hat: mu_hat.step(h), upper: d_hat.step(h).iter().map(|d| 2.0 * d).collect(), prev_ratio }
    }

    fn num_actions(&self) -> usize {
        self.policy.num_actions()
    }

    #[inline]
    fn prev_weight(&self, sample: &StepSample) -> f64 {
        match (&self.prev_ratio, sample.prev) {
            (Some(r), Some((s, a))) => r[s as usize * self.num_actions() + a as usize],
            _ => 1.0,
        }
    }

    /// Unbiased single-sample loss.
    pub fn sample_loss(&self, w: &[f64], sample: &StepSample) -> f64 {
        let a_n = self.num_actions();
        let i = sample.state as usize * a_n + sample.action as usize;
        let mut v = 0.0;
        if self.upper[i] > 0.0 {
            v += 0.5 * w[i] * w[i] / self.mu_hat[i];
        }
        let c = self.prev_weight(sample);
        if c != 0.0 {
            let s = sample.next_state as usize;
            let pi = self.policy.row(self.h, s);
            let lin: f64 = (0..a_n).map(|a| w[s * a_n + a] * pi[a]).sum();
            v -= c * lin;
        }
        v
    }

    /// Sparse stochastic gradient as `(cell, value)` pairs; cells off the
    /// support are left out.
    pub fn stochastic_gradient(&self, w: &[f64], sample: &StepSample, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let a_n = self.num_actions();
        let i = sample.state as usize * a_n + sample.action as usize;
        if self.upper[i] > 0.0 {
            out.push((i, w[i] / self.mu_hat[i]));
        }
        let c = self.prev_weight(sample);
        if c == 0.0 {
            return;
        }
        let s = sample.next_state as usize;
        let pi = self.policy.row(self.h, s);
        for (a, &p) in pi.iter().enumerate() {
            let j = s * a_n + a;
            if p == 0.0 || self.upper[j] == 0.0 {
                continue;
            }
            if let Some(e) = out.iter_mut().find(|e| e.0 == j) {
                e.1 -= c * p;
            } else {
                out.push((j, -c * p));
            }
        }
    }

    pub fn project(&self, w: &mut [f64]) {
        for (x, u) in w.iter_mut().zip(&self.upper) {
            *x = x.clamp(0.0, *u);
        }
    }
}

/// One row of the diagnostic SGD trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub run_id: usize,
    pub h: usize,
    pub iteration: u64,
    pub loss_estimate: f64,
    pub grad_norm_estimate: f64,
}

pub fn write_trace_csv<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

#[inline]
fn series(from: u64, to: u64) -> f64 {
    // Σ_{j=from}^{to} j
    if to < from {
        0.0
    } else {
        (from + to) as f64 * (to - from + 1) as f64 / 2.0
    }
}

/// Projected SGD with step `2/(γ(i+1))` over `samples`, returning the
/// average `Σ i·w^i / Σ i`. Starts from `d̂_h`.
pub fn sgd_minimize_step(
    problem: &StepProblem<'_>,
    samples: &[StepSample],
    gamma: f64,
    trace: Option<(usize, u64, &mut Vec<TraceRow>)>,
) -> Vec<f64> {
    let width = problem.upper.len();
    let n = samples.len() as u64;
    let mut w: Vec<f64> = problem.upper.iter().map(|u| u / 2.0).collect();
    if n == 0 || problem.upper.iter().all(|&u| u == 0.0) {
        return vec![0.0; width];
    }
    let mut acc = vec![0.0; width];
    let mut last = vec![0u64; width];
    let mut grad = Vec::with_capacity(problem.num_actions() + 1);
    let (mut trace_run, mut trace_stride, mut trace_out) = (0, 0, None);
    if let Some((run, stride, out)) = trace {
        trace_run = run;
        trace_stride = stride.max(1);
        trace_out = Some(out);
    }
    let (mut loss_sum, mut norm_sum) = (0.0, 0.0);
    for (idx, sample) in samples.iter().enumerate() {
        let i = idx as u64 + 1;
        problem.stochastic_gradient(&w, sample, &mut grad);
        if let Some(rows) = trace_out.as_deref_mut() {
            loss_sum += problem.sample_loss(&w, sample);
            norm_sum += grad.iter().map(|g| g.1 * g.1).sum::<f64>().sqrt();
            if i % trace_stride == 0 {
                rows.push(TraceRow {
                    run_id: trace_run,
                    h: problem.h,
                    iteration: i,
                    loss_estimate: loss_sum / trace_stride as f64,
                    grad_norm_estimate: norm_sum / trace_stride as f64,
                });
                loss_sum = 0.0;
                norm_sum = 0.0;
            }
        }
        let eta = 2.0 / (gamma * (i + 1) as f64);
        for &(c, g) in &grad {
            acc[c] += w[c] * series(last[c] + 1, i - 1);
            w[c] = (w[c] - eta * g).clamp(0.0, problem.upper[c]);
            acc[c] += i as f64 * w[c];
            last[c] = i;
        }
    }
    let total = series(1, n);
    (0..width).map(|c| (acc[c] + w[c] * series(last[c] + 1, n)) / total).collect()
}

/// Index of the lower median of `losses` (stable for ties).
pub fn mom_select(losses: &[f64]) -> usize {
    assert!(!losses.is_empty(), "median of nothing");
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    idx[(losses.len() - 1) / 2]
}

/// Where IDES draws its data: the behaviour mixture `Σ_k α_k π^k`.
pub struct MixtureSource<'s, 'm> {
    pub sim: &'s Simulator<'m>,
    pub policies: &'s [PolicyTable],
    pub alpha: &'s MixtureWeights,
}

impl MixtureSource<'_, '_> {
    /// Two independent prefix rollouts: `(s_h, a_h)` from the first and
    /// `(s_{h−1}, a_{h−1}, s_h)` from the second. Charges nothing.
    fn draw<R: Rng + ?Sized>(&self, h: usize, rng: &mut R) -> StepSample {
        let (mut state, mut action) = (0, 0);
        self.sim.walk_mixture(self.policies, self.alpha, h + 1, rng, |t, s, a| {
            if t == h {
                state = s as u32;
                action = a as u32;
            }
        });
        let mut prev = None;
        let mut next_state = 0;
        self.sim.walk_mixture(self.policies, self.alpha, h + 1, rng, |t, s, a| {
            if t + 1 == h {
                prev = Some((s as u32, a as u32));
            } else if t == h {
                next_state = s as u32;
            }
        });
        StepSample { state, action, prev, next_state }
    }

    /// Both halves of the sample from a single trajectory, for held-out loss
    /// evaluation where the two expectations are estimated separately.
    fn draw_single<R: Rng + ?Sized>(&self, h: usize, rng: &mut R) -> StepSample {
        let mut sample = StepSample { state: 0, action: 0, prev: None, next_state: 0 };
        self.sim.walk_mixture(self.policies, self.alpha, h + 1, rng, |t, s, a| {
            if t + 1 == h {
                sample.prev = Some((s as u32, a as u32));
            } else if t == h {
                sample.state = s as u32;
                sample.action = a as u32;
                sample.next_state = s as u32;
            }
        });
        sample
    }
}

/// A target policy and its (thresholded) coarse table.
#[derive(Debug, Clone, Copy)]
pub struct IdesTarget<'a> {
    pub policy: &'a PolicyTable,
    pub d_hat: &'a VisitationTable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdesOutput {
    pub weights: Vec<ImportanceWeightTable>,
    /// `n_h` per target and step.
    pub iterations: Vec<Vec<u64>>,
    /// Chosen repetition per target and step.
    pub selected: Vec<Vec<usize>>,
    pub trajectories: u64,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

/// Runs the estimator for every target on shared mixture data.
///
/// At each step, every repetition draws `max_k n_h^k` sample pairs on its own
/// stream and target `k` uses the first `n_h^k`. The held-out batch has
/// `ceil(fraction · max_k n_h^k)` single trajectories.
pub fn run_ides(
    source: &MixtureSource<'_, '_>,
    targets: &[IdesTarget<'_>],
    mu_hat: &VisitationTable,
    cfg: &IdesConfig,
    streams: &StreamAllocator,
) -> Result<IdesOutput> {
    cfg.validate()?;
    let mdp: &TabularMdp = source.sim.mdp();
    let (h_n, s_n, a_n) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    for t in targets {
        mdp.check_policy(t.policy)?;
        if t.d_hat.horizon() != h_n || t.d_hat.num_states() != s_n || t.d_hat.num_actions() != a_n {
            return Err(Error::Dimension("coarse table shape does not match the MDP".into()));
        }
    }
    let k_n = targets.len();
    let reps = cfg.reps();
    let mut weights: Vec<VisitationTable> = (0..k_n).map(|_| VisitationTable::zeros(h_n, s_n, a_n)).collect();
    let mut iterations = vec![vec![0u64; h_n]; k_n];
    let mut selected = vec![vec![0usize; h_n]; k_n];
    let mut trace = Vec::new();
    let mut trajectories = 0u64;
    let mut prev_ratio: Vec<Option<Vec<f64>>> = vec![None; k_n];

    for h in 0..h_n {
        let n_k: Vec<u64> = targets.iter().map(|t| capped_iterations(cfg, t.d_hat, mu_hat, h)).collect();
        for k in 0..k_n {
            iterations[k][h] = n_k[k];
        }
        let n_max = n_k.iter().copied().max().unwrap_or(0);
        let problems: Vec<StepProblem<'_>> = targets
            .iter()
            .zip(&prev_ratio)
            .map(|(t, pr)| StepProblem::new(h, t.policy, t.d_hat, mu_hat, pr.clone()))
            .collect();

        let rep_streams = if n_max > 0 { streams.fresh_many(reps) } else { Vec::new() };
        let runs: Vec<(Vec<Vec<f64>>, Vec<TraceRow>)> =
            map_collect(rep_streams.into_iter().enumerate().collect(), |(r, st)| {
                let mut rng = st.rng();
                let samples: Vec<StepSample> = (0..n_max).map(|_| source.draw(h, &mut rng)).collect();
                let mut rows = Vec::new();
                let fits = problems
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        let data = &samples[..n_k[k] as usize];
                        let tr = cfg.trace_stride.map(|stride| (k * reps + r, stride, &mut rows));
                        sgd_minimize_step(p, data, cfg.gamma, tr)
                    })
                    .collect();
                (fits, rows)
            });
        if n_max > 0 {
            trajectories += 2 * n_max * reps as u64;
        }

        let mut chosen: Vec<usize> = vec![0; k_n];
        if reps > 1 && n_max > 0 {
            let m = ((n_max as f64 * cfg.heldout_fraction).ceil() as u64).max(1);
            let mut rng = streams.fresh().rng();
            let held: Vec<StepSample> = (0..m).map(|_| source.draw_single(h, &mut rng)).collect();
            trajectories += m;
            for (k, p) in problems.iter().enumerate() {
                let losses: Vec<f64> = runs
                    .iter()
                    .map(|(fits, _)| held.iter().map(|smp| p.sample_loss(&fits[k], smp)).sum::<f64>() / m as f64)
                    .collect();
                chosen[k] = mom_select(&losses);
            }
        }
        for k in 0..k_n {
            selected[k][h] = chosen[k];
            if let Some((fits, _)) = runs.get(chosen[k]) {
                weights[k].step_mut(h).copy_from_slice(&fits[k]);
            }
            let ratio_h: Vec<f64> = weights[k].step(h).iter().zip(mu_hat.step(h)).map(|(&w, &m)| ratio(w, m)).collect();
            prev_ratio[k] = Some(ratio_h);
        }
        for (_, rows) in runs {
            trace.extend(rows);
        }
    }
    source.sim.charge(trajectories);
    let weights = weights.into_iter().map(|w| ImportanceWeightTable { w, mu_hat: mu_hat.clone() }).collect();
    Ok(IdesOutput { weights, iterations, selected, trajectories, trace })
}

/// Exact step loss, gradient and minimiser, given the true behaviour tables.
#[derive(Debug, Clone)]
pub struct ExactLoss {
    /// `μ̃_h`, flat `[s][a]`.
    pub mu_tilde: Vec<f64>,
    pub mu_hat: Vec<f64>,
    /// `b(s) = Σ_{s',a'} μ̃_{h−1}(s',a') r_{h−1}(s',a') P_{h−1}(s|s',a')`, or
    /// `ν(s)` at step 0.
    pub inflow: Vec<f64>,
    /// `π_h(a|s)`, flat `[s][a]`.
    pub pi: Vec<f64>,
    /// Cells in the parameter vector.
    pub support: Vec<bool>,
    pub num_actions: usize,
}

impl ExactLoss {
    /// `prev_ratio` is `ŵ_{h−1}/μ̂_{h−1}` (ignored at step 0).
    pub fn new(
        mdp: &TabularMdp,
        policy: &PolicyTable,
        h: usize,
        mu_tilde: &VisitationTable,
        mu_hat: &VisitationTable,
        d_hat: &VisitationTable,
        prev_ratio: Option<&[f64]>,
    ) -> Self {
        let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
        let inflow = if h == 0 {
            mdp.initial_dist().to_vec()
        } else {
            let r = prev_ratio.expect("previous ratio needed after the first step");
            let mut b = vec![0.0; s_n];
            for sp in 0..s_n {
                for ap in 0..a_n {
                    let m = mu_tilde.get(h - 1, sp, ap) * r[sp * a_n + ap];
                    if m == 0.0 {
                        continue;
                    }
                    for (bs, p) in b.iter_mut().zip(mdp.transition_row(h - 1, sp, ap)) {
                        *bs += m * p;
                    }
                }
            }
            b
        };
        Self {
            mu_tilde: mu_tilde.step(h).to_vec(),
            mu_hat: mu_hat.step(h).to_vec(),
            inflow,
            pi: (0..s_n).flat_map(|s| policy.row(h, s).to_vec()).collect(),
            support: d_hat.step(h).iter().map(|&d| d > 0.0).collect(),
            num_actions: a_n,
        }
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        let mut v = 0.0;
        for i in 0..w.len() {
            if !self.support[i] {
                continue;
            }
            v += 0.5 * self.mu_tilde[i] * w[i] * w[i] / self.mu_hat[i];
            v -= self.inflow[i / self.num_actions] * self.pi[i] * w[i];
        }
        v
    }

    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        (0..w.len())
            .map(|i| {
                if self.support[i] {
                    self.mu_tilde[i] * w[i] / self.mu_hat[i] - self.inflow[i / self.num_actions] * self.pi[i]
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Unconstrained minimiser `μ̂·b(s)π(a|s)/μ̃` on the support.
    pub fn minimizer(&self) -> Vec<f64> {
        (0..self.pi.len())
            .map(|i| {
                if self.support[i] && self.mu_tilde[i] > 0.0 {
                    self.mu_hat[i] * self.inflow[i / self.num_actions] * self.pi[i] / self.mu_tilde[i]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

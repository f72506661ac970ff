//! β-distance utilities and coarse estimation of many policies from one
//! covering distribution by layer-wise importance weighting.

use serde::{Deserialize, Serialize};

use crate::coarse::{per_policy_sample_size, CoarseConfig, CoarseVisitation};
use crate::mdp::{PolicyTable, TabularMdp, VisitationTable};
use crate::optdist::realized_mixture;
use crate::oracle::{exact_visitation, max_visitation};
use crate::par::map_collect;
use crate::sampler::{MixtureWeights, Simulator, StreamAllocator};
use crate::{Error, Result};

/// `dist^β(x, y) = min_{α ∈ [1/β, β]} |αx − y|`, in closed form.
pub fn beta_dist(x: f64, y: f64, beta: f64) -> Result<f64> {
    if !(x >= 0.0 && y >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative input ({x}, {y})")));
    }
    if !(beta >= 1.0) {
        return Err(Error::InvalidArgument(format!("beta {beta} below 1")));
    }
    let (lo, hi) = (x / beta, x * beta);
    Ok(if y < lo {
        lo - y
    } else if y > hi {
        y - hi
    } else {
        0.0
    })
}

/// Numeric minimisation over `α`: a uniform grid of `steps + 1` points,
/// refined by golden-section search around the best grid cell.
pub fn beta_dist_grid(x: f64, y: f64, beta: f64, steps: usize) -> f64 {
    let f = |a: f64| (a * x - y).abs();
    let (lo, hi) = (1.0 / beta, beta);
    let width = (hi - lo) / steps.max(1) as f64;
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for i in 0..=steps {
        let v = f(lo + i as f64 * width);
        if v < best_v {
            best_v = v;
            best = i;
        }
    }
    let mut a = (lo + (best as f64 - 1.0) * width).max(lo);
    let mut b = (lo + (best as f64 + 1.0) * width).min(hi);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) <= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    best_v.min(f(0.5 * (a + b))).min(f(lo)).min(f(hi))
}

/// Coordinatewise sum of [`beta_dist`].
pub fn beta_dist_vec(x: &[f64], y: &[f64], beta: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("lengths {} and {}", x.len(), y.len())));
    }
    x.iter().zip(y).map(|(&a, &b)| beta_dist(a, b, beta)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoverKind {
    /// Uniform mixture of the per-`(h, s, a)` visitation maximisers.
    OracleCover,
    /// The uniform-random policy.
    UniformMixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverDistribution {
    pub kind: CoverKind,
    pub policies: Vec<PolicyTable>,
    pub weights: MixtureWeights,
    /// Exact per-step visitation of the mixture.
    pub table: VisitationTable,
}

pub fn build_cover(mdp: &TabularMdp, kind: CoverKind) -> Result<CoverDistribution> {
    let policies = match kind {
        CoverKind::OracleCover => max_visitation(mdp)?.1,
        CoverKind::UniformMixture => vec![PolicyTable::uniform(mdp.horizon(), mdp.num_states(), mdp.num_actions())],
    };
    let tables = policies.iter().map(|p| exact_visitation(mdp, p)).collect::<Result<Vec<_>>>()?;
    let weights = MixtureWeights::uniform(policies.len());
    let table = realized_mixture(&tables, &weights)?;
    Ok(CoverDistribution { kind, policies, weights, table })
}

/// A pair where the cover falls short of `d^max_h(s,a)/(2HSA)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageGap {
    pub step: usize,
    pub state: usize,
    pub action: usize,
    pub mu: f64,
    pub required: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub gaps: Vec<CoverageGap>,
}

impl CoverageReport {
    pub fn holds(&self) -> bool {
        self.gaps.is_empty()
    }
}

/// Checks `μ_h(s,a) ≥ d^max_h(s,a)/(2HSA)` wherever `d^max_h(s) ≥ ε/(SA)`.
pub fn check_coverage(mdp: &TabularMdp, cover: &CoverDistribution, epsilon: f64) -> Result<CoverageReport> {
    let (dmax, _) = max_visitation(mdp)?;
    let (s_n, a_n, h_n) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let sa = (s_n * a_n) as f64;
    let scale = 2.0 * h_n as f64 * sa;
    let mut gaps = Vec::new();
    for h in 0..h_n {
        for s in 0..s_n {
            let state_max = (0..a_n).map(|a| dmax.get(h, s, a)).fold(0.0, f64::max);
            if state_max < epsilon / sa {
                continue;
            }
            for a in 0..a_n {
                let required = dmax.get(h, s, a) / scale;
                let mu = cover.table.get(h, s, a);
                if mu < required * (1.0 - 1e-12) {
                    gaps.push(CoverageGap { step: h, state: s, action: a, mu, required });
                }
            }
        }
    }
    Ok(CoverageReport { gaps })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarchConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub c_univ: f64,
    /// Fail when a sample lands on a pair that carries target mass but
    /// has no estimated cover mass.
    pub strict_support: bool,
}

impl MarchConfig {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        Self { epsilon, delta, c_univ: 32.0, strict_support: true }
    }

    /// `1 + 1/H`.
    pub fn beta(horizon: usize) -> f64 {
        1.0 + 1.0 / horizon as f64
    }

    /// Per-batch settings: accuracy `ε/(2H²S²A²)`, relative slack `1/(2H)`.
    pub fn batch_config(&self, mdp: &TabularMdp) -> CoarseConfig {
        let h = mdp.horizon() as f64;
        let sa = (mdp.num_states() * mdp.num_actions()) as f64;
        CoarseConfig {
            epsilon: self.epsilon / (2.0 * h * h * sa * sa),
            delta: self.delta / (2.0 * h),
            c_mult: 2.0 * h,
            c_univ: self.c_univ,
        }
    }

    /// `2HSA`.
    pub fn weight_clip(mdp: &TabularMdp) -> f64 {
        2.0 * (mdp.horizon() * mdp.num_states() * mdp.num_actions()) as f64
    }
}

/// `min(d̂/μ̂, clip)`, zero where `μ̂ = 0`.
pub fn clipped_weight(d_hat: f64, mu_hat: f64, clip: f64) -> f64 {
    if mu_hat <= 0.0 {
        0.0
    } else {
        (d_hat / mu_hat).min(clip)
    }
}

/// What one layer of shared data provides to every policy.
struct Layer {
    /// Estimated cover visitation at step `h`.
    mu: Vec<f64>,
    /// `N(s', a', s) / n` for transitions from step `h` to `h + 1`.
    flow: Vec<f64>,
    /// Pairs at step `h` seen in the transition batch.
    seen: Vec<bool>,
}

/// Coarse tables for every policy from shared cover data.
pub fn march_estimate_many(
    sim: &Simulator<'_>,
    cover: &CoverDistribution,
    policies: &[PolicyTable],
    cfg: &MarchConfig,
    streams: &StreamAllocator,
) -> Result<Vec<CoarseVisitation>> {
    let mdp = sim.mdp();
    for p in policies {
        mdp.check_policy(p)?;
    }
    if cover.table.horizon() != mdp.horizon()
        || cover.table.num_states() != mdp.num_states()
        || cover.table.num_actions() != mdp.num_actions()
    {
        return Err(Error::Dimension("cover shape does not match the MDP".into()));
    }
    let batch = cfg.batch_config(mdp);
    batch.validate()?;
    let n = per_policy_sample_size(&batch, 1);
    let (s_n, a_n, h_n) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let start = sim.rollouts();

    // Initial-state frequencies and, per layer, cover and transition counts.
    let mut nu = vec![0.0; s_n];
    let mut layers = Vec::with_capacity(h_n.saturating_sub(1));
    for h in 0..h_n.saturating_sub(1) {
        let mut rng = streams.fresh().rng();
        let mut mu = vec![0.0; s_n * a_n];
        for _ in 0..n {
            sim.walk_mixture(&cover.policies, &cover.weights, h + 1, &mut rng, |t, s, a| {
                if t == 0 && h == 0 {
                    nu[s] += 1.0;
                }
                if t == h {
                    mu[s * a_n + a] += 1.0;
                }
            });
        }
        let mut rng = streams.fresh().rng();
        let mut flow = vec![0.0; s_n * a_n * s_n];
        let mut seen = vec![false; s_n * a_n];
        let mut from = 0;
        for _ in 0..n {
            sim.walk_mixture(&cover.policies, &cover.weights, h + 2, &mut rng, |t, s, a| {
                if t == h {
                    from = s * a_n + a;
                    seen[from] = true;
                } else if t == h + 1 {
                    flow[from * s_n + s] += 1.0;
                }
            });
        }
        sim.charge(2 * n);
        let inv = 1.0 / n as f64;
        mu.iter_mut().for_each(|x| *x *= inv);
        flow.iter_mut().for_each(|x| *x *= inv);
        layers.push(Layer { mu, flow, seen });
    }
    if h_n == 1 {
        let mut rng = streams.fresh().rng();
        for _ in 0..n {
            sim.walk_mixture(&cover.policies, &cover.weights, 1, &mut rng, |_, s, _| nu[s] += 1.0);
        }
        sim.charge(n);
    }
    let inv = 1.0 / n as f64;
    nu.iter_mut().for_each(|x| *x *= inv);
    let samples = sim.rollouts() - start;
    let clip = MarchConfig::weight_clip(mdp);

    map_collect(policies.iter().collect(), |pi| -> Result<CoarseVisitation> {
        let mut d = VisitationTable::zeros(h_n, s_n, a_n);
        for s in 0..s_n {
            for a in 0..a_n {
                d.set(0, s, a, nu[s] * pi.prob(0, s, a));
            }
        }
        for (h, layer) in layers.iter().enumerate() {
            let mut next = vec![0.0; s_n];
            for from in 0..s_n * a_n {
                let d_from = d.step(h)[from];
                if d_from <= 0.0 {
                    continue;
                }
                let m = layer.mu[from];
                if m <= 0.0 {
                    if cfg.strict_support && layer.seen[from] {
                        return Err(Error::Support(format!(
                            "step {h} pair {from} carries target mass but no estimated cover mass"
                        )));
                    }
                    continue;
                }
                let w = clipped_weight(d_from, m, clip);
                for (x, f) in next.iter_mut().zip(&layer.flow[from * s_n..(from + 1) * s_n]) {
                    *x += f * w;
                }
            }
            for s in 0..s_n {
                for a in 0..a_n {
                    d.set(h + 1, s, a, pi.prob(h + 1, s, a) * next[s]);
                }
            }
        }
        Ok(CoarseVisitation { table: d, epsilon_used: cfg.epsilon, thresholded: false, samples })
    })
    .into_iter()
    .collect()
}

pub fn march_estimate(
    mdp: &TabularMdp,
    cover: &CoverDistribution,
    policy: &PolicyTable,
    cfg: &MarchConfig,
    seed: u64,
) -> Result<CoarseVisitation> {
    let sim = Simulator::new(mdp);
    let mut out = march_estimate_many(&sim, cover, std::slice::from_ref(policy), cfg, &StreamAllocator::new(seed))?;
    Ok(out.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistDiagnostic {
    /// `dist^{e²}(d̂_h, d_h)` per step.
    pub per_step: Vec<f64>,
    /// `H(1 + e²)ε`.
    pub bound: f64,
}

impl DistDiagnostic {
    pub fn within_bound(&self) -> bool {
        self.per_step.iter().all(|&v| v <= self.bound)
    }
}

pub fn beta_dist_diagnostic(d_hat: &VisitationTable, d: &VisitationTable, epsilon: f64) -> Result<DistDiagnostic> {
    if !d_hat.same_shape(d) {
        return Err(Error::Dimension("tables differ in shape".into()));
    }
    let beta = std::f64::consts::E.powi(2);
    let per_step =
        (0..d.horizon()).map(|h| beta_dist_vec(d_hat.step(h), d.step(h), beta)).collect::<Result<Vec<_>>>()?;
    Ok(DistDiagnostic { per_step, bound: d.horizon() as f64 * (1.0 + beta) * epsilon })
}

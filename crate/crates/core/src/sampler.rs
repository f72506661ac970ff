//! Seeded trajectory generation from single policies and policy mixtures.

use std::collections::HashSet;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mdp::{PolicyTable, TabularMdp};
use crate::{Error, Result, PROB_TOL};

/// A `(seed, stream)` pair. Identical pairs produce identical draws and
/// distinct stream ids under one seed are independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Hands out stream ids and refuses to issue any id twice, which keeps the
/// data of different pipeline phases disjoint.
#[derive(Debug)]
pub struct StreamAllocator {
    seed: u64,
    next: AtomicU64,
    issued: Mutex<HashSet<u64>>,
}

impl StreamAllocator {
    pub fn new(seed: u64) -> Self {
        Self { seed, next: AtomicU64::new(0), issued: Mutex::new(HashSet::new()) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Next unused stream id.
    pub fn fresh(&self) -> RngStream {
        loop {
            let id = self.next.fetch_add(1, Ordering::Relaxed);
            if self.issued.lock().unwrap().insert(id) {
                return RngStream::new(self.seed, id);
            }
        }
    }

    /// `n` consecutive fresh streams.
    pub fn fresh_many(&self, n: usize) -> Vec<RngStream> {
        (0..n).map(|_| self.fresh()).collect()
    }

    /// Claims a specific id; fails if it was already issued.
    pub fn claim(&self, stream: u64) -> Result<RngStream> {
        if self.issued.lock().unwrap().insert(stream) {
            Ok(RngStream::new(self.seed, stream))
        } else {
            Err(Error::StreamReused(stream))
        }
    }

    pub fn issued(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.issued.lock().unwrap().iter().copied().collect();
        ids.sort_unstable();
        ids
    }
}

/// Simplex weights over `K` policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixtureWeights {
    alpha: Vec<f64>,
}

impl MixtureWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidArgument("mixture needs at least one weight".into()));
        }
        if alpha.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidArgument("mixture weights must be finite and non-negative".into()));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {sum}")));
        }
        Ok(Self { alpha })
    }

    /// Rescales non-negative weights onto the simplex.
    pub fn normalized(mut alpha: Vec<f64>) -> Result<Self> {
        let sum: f64 = alpha.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidArgument("mixture weights must have positive mass".into()));
        }
        alpha.iter_mut().for_each(|x| *x /= sum);
        Self::new(alpha)
    }

    pub fn uniform(k: usize) -> Self {
        Self { alpha: vec![1.0 / k as f64; k] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.alpha, rng)
    }
}

impl TryFrom<Vec<f64>> for MixtureWeights {
    type Error = Error;

    fn try_from(alpha: Vec<f64>) -> Result<Self> {
        Self::new(alpha)
    }
}

impl From<MixtureWeights> for Vec<f64> {
    fn from(m: MixtureWeights) -> Self {
        m.alpha
    }
}

/// One `(state, action, reward)` per step, exactly `H` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize, f64)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.2).sum()
    }
}

/// A trajectory together with the mixture component that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedTrajectory {
    pub policy_index: usize,
    pub steps: Vec<(usize, usize, f64)>,
}

/// Writes trajectories as JSON lines with `policy_index` and `steps`.
pub fn write_jsonl<W: Write>(mut out: W, trajectories: &[TaggedTrajectory]) -> Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[inline]
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Rollout engine over a shared model. Every started trajectory, complete or
/// prefix, is counted once.
#[derive(Debug)]
pub struct Simulator<'a> {
    mdp: &'a TabularMdp,
    rollouts: AtomicU64,
}

impl<'a> Simulator<'a> {
    pub fn new(mdp: &'a TabularMdp) -> Self {
        Self { mdp, rollouts: AtomicU64::new(0) }
    }

    pub fn mdp(&self) -> &'a TabularMdp {
        self.mdp
    }

    /// Trajectories generated so far.
    pub fn rollouts(&self) -> u64 {
        self.rollouts.load(Ordering::Relaxed)
    }

    pub(crate) fn charge(&self, n: u64) {
        self.rollouts.fetch_add(n, Ordering::Relaxed);
    }

    /// `s_1 ~ ν`, `a_h ~ π_h(·|s_h)`, `s_{h+1} ~ P_h(·|s_h,a_h)`.
    pub fn rollout<R: Rng + ?Sized>(&self, policy: &PolicyTable, rng: &mut R) -> Result<Trajectory> {
        self.mdp.check_policy(policy)?;
        let mut steps = Vec::with_capacity(self.mdp.horizon());
        self.charge(1);
        self.walk(policy, self.mdp.horizon(), rng, |_, s, a| steps.push((s, a, 0.0)));
        for (h, step) in steps.iter_mut().enumerate() {
            step.2 = self.mdp.reward(h, step.0, step.1);
        }
        Ok(Trajectory { steps })
    }

    /// `n` independent rollouts of one policy from one stream.
    pub fn rollout_many(&self, policy: &PolicyTable, n: usize, stream: RngStream) -> Result<Vec<Trajectory>> {
        let mut rng = stream.rng();
        (0..n).map(|_| self.rollout(policy, &mut rng)).collect()
    }

    /// Draws `k ~ α` once per trajectory, then rolls out `π^k`.
    pub fn rollout_mixture(
        &self,
        policies: &[PolicyTable],
        alpha: &MixtureWeights,
        n: usize,
        stream: RngStream,
    ) -> Result<Vec<TaggedTrajectory>> {
        if policies.is_empty() {
            return Err(Error::InvalidArgument("empty policy list".into()));
        }
        if alpha.len() != policies.len() {
            return Err(Error::Dimension(format!("{} mixture weights for {} policies", alpha.len(), policies.len())));
        }
        let mut rng = stream.rng();
        (0..n)
            .map(|_| {
                let k = alpha.sample(&mut rng);
                let t = self.rollout(&policies[k], &mut rng)?;
                Ok(TaggedTrajectory { policy_index: k, steps: t.steps })
            })
            .collect()
    }

    /// Runs the first `len` steps of a rollout, handing `(h, s, a)` to `visit`.
    /// Does not charge the budget; callers do that in bulk.
    #[inline]
    pub(crate) fn walk<R: Rng + ?Sized, F: FnMut(usize, usize, usize)>(
        &self,
        policy: &PolicyTable,
        len: usize,
        rng: &mut R,
        mut visit: F,
    ) {
        let mut s = sample_index(self.mdp.initial_dist(), rng);
        for h in 0..len {
            let a = sample_index(policy.row(h, s), rng);
            visit(h, s, a);
            if h + 1 < len {
                s = sample_index(self.mdp.transition_row(h, s, a), rng);
            }
        }
    }

    /// Like [`walk`](Self::walk) with the policy drawn from a mixture first.
    #[inline]
    pub(crate) fn walk_mixture<R: Rng + ?Sized, F: FnMut(usize, usize, usize)>(
        &self,
        policies: &[PolicyTable],
        alpha: &MixtureWeights,
        len: usize,
        rng: &mut R,
        visit: F,
    ) -> usize {
        let k = alpha.sample(rng);
        self.walk(&policies[k], len, rng, visit);
        k
    }
}

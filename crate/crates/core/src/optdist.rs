//! Mixture weights over target visitation tables that minimise the
//! worst-case importance-weighting variance
//!
//! ```text
//! F(α) = Σ_h max_k Σ_{s,a} d̂_k,h(s,a)² / μ_h(s,a),   μ_h = Σ_j α_j g_j,h
//! ```
//!
//! The targets `d̂_k` and the hull generators `g_j` usually coincide. Keeping
//! them apart lets the same solver handle the all-deterministic-policy hull
//! and the unconstrained problem (unit-vector generators).
//!
//! `F` is convex on the simplex. It is minimised in epigraph form with a
//! log-barrier interior-point method; the barrier parameter gives a duality
//! gap certificate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::mdp::VisitationTable;
use crate::sampler::MixtureWeights;
use crate::{Error, Result};

/// Targets and generators of the mixture problem, all with one shape.
#[derive(Debug, Clone)]
pub struct SamplingObjective {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    targets: Vec<VisitationTable>,
    generators: Vec<VisitationTable>,
}

impl SamplingObjective {
    /// The standard problem: mix the targets themselves.
    pub fn new(targets: Vec<VisitationTable>) -> Result<Self> {
        let generators = targets.clone();
        Self::with_generators(targets, generators)
    }

    pub fn with_generators(targets: Vec<VisitationTable>, generators: Vec<VisitationTable>) -> Result<Self> {
        let first = targets.first().ok_or_else(|| Error::InvalidArgument("no target tables".into()))?.clone();
        if generators.is_empty() {
            return Err(Error::InvalidArgument("no generator tables".into()));
        }
        if targets.iter().chain(&generators).any(|t| !t.same_shape(&first)) {
            return Err(Error::Dimension("all tables must share one shape".into()));
        }
        let obj = Self {
            horizon: first.horizon(),
            num_states: first.num_states(),
            num_actions: first.num_actions(),
            targets,
            generators,
        };
        // every positive target entry must be reachable by some generator
        let mask = obj.generator_support();
        for (k, t) in obj.targets.iter().enumerate() {
            if let Some(i) = t.as_slice().iter().zip(&mask).position(|(&x, &m)| x > 0.0 && !m) {
                return Err(Error::Support(format!("target {k} has mass at flat index {i} that no generator covers")));
            }
        }
        Ok(obj)
    }

    /// Unit-vector generators on the union of target supports at step `h`:
    /// the unconstrained single-step problem.
    pub fn unconstrained_step(targets: &[VisitationTable], h: usize) -> Result<Self> {
        let steps: Vec<VisitationTable> = targets.iter().map(|t| single_step(t, h)).collect();
        let width = steps.first().map_or(0, VisitationTable::width);
        let (s_n, a_n) = steps.first().map_or((0, 0), |t| (t.num_states(), t.num_actions()));
        let mut gens = Vec::new();
        for i in 0..width {
            if steps.iter().any(|t| t.as_slice()[i] > 0.0) {
                let mut unit = vec![0.0; width];
                unit[i] = 1.0;
                gens.push(VisitationTable::from_flat(1, s_n, a_n, unit)?);
            }
        }
        Self::with_generators(steps, gens)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn num_generators(&self) -> usize {
        self.generators.len()
    }

    pub fn targets(&self) -> &[VisitationTable] {
        &self.targets
    }

    pub fn generators(&self) -> &[VisitationTable] {
        &self.generators
    }

    /// Entries where some target is positive.
    pub fn support_mask(&self) -> Vec<bool> {
        union_support(&self.targets)
    }

    fn generator_support(&self) -> Vec<bool> {
        union_support(&self.generators)
    }

    /// The same problem restricted to step `h`.
    pub fn step_only(&self, h: usize) -> Self {
        Self {
            horizon: 1,
            num_states: self.num_states,
            num_actions: self.num_actions,
            targets: self.targets.iter().map(|t| single_step(t, h)).collect(),
            generators: self.generators.iter().map(|t| single_step(t, h)).collect(),
        }
    }

    /// `μ = Σ_j α_j g_j`.
    pub fn mixture(&self, alpha: &[f64]) -> VisitationTable {
        let mut out = VisitationTable::zeros(self.horizon, self.num_states, self.num_actions);
        let _ = self.mix_into(alpha, &mut out);
        out
    }

    fn mix_into(&self, alpha: &[f64], out: &mut VisitationTable) -> Result<()> {
        if alpha.len() != self.generators.len() {
            return Err(Error::Dimension(format!("{} weights for {} generators", alpha.len(), self.generators.len())));
        }
        let mut data = vec![0.0; out.as_slice().len()];
        for (w, g) in alpha.iter().zip(&self.generators) {
            if *w == 0.0 {
                continue;
            }
            for (d, x) in data.iter_mut().zip(g.as_slice()) {
                *d += w * x;
            }
        }
        *out = VisitationTable::from_flat(self.horizon, self.num_states, self.num_actions, data)?;
        Ok(())
    }

    /// `max_k Σ_{s,a} d̂_k,h² / μ_h`, `0/0 = 0`, `+∞` on uncovered mass.
    pub fn step_value(&self, alpha: &[f64], h: usize) -> f64 {
        let mu = self.mixture(alpha);
        self.step_value_with(&mu, h).0
    }

    /// Value and lowest-index maximiser at step `h` for a given mixture.
    fn step_value_with(&self, mu: &VisitationTable, h: usize) -> (f64, usize) {
        let m = mu.step(h);
        let mut best = (f64::NEG_INFINITY, 0);
        for (k, t) in self.targets.iter().enumerate() {
            let v = quad_over_lin(t.step(h), m);
            if v > best.0 {
                best = (v, k);
            }
        }
        best
    }

    pub fn step_values(&self, alpha: &[f64]) -> Vec<f64> {
        let mu = self.mixture(alpha);
        (0..self.horizon).map(|h| self.step_value_with(&mu, h).0).collect()
    }

    /// `F(α) = Σ_h` step values.
    pub fn total(&self, alpha: &[f64]) -> f64 {
        self.step_values(alpha).iter().sum()
    }

    /// Exact subgradient of `F`, using the lowest-index active target per step.
    pub fn subgradient(&self, alpha: &[f64]) -> Vec<f64> {
        let mu = self.mixture(alpha);
        let mut g = vec![0.0; self.generators.len()];
        for h in 0..self.horizon {
            let (_, k) = self.step_value_with(&mu, h);
            let d = self.targets[k].step(h);
            let m = mu.step(h);
            for (gj, gen) in g.iter_mut().zip(&self.generators) {
                let gs = gen.step(h);
                for i in 0..d.len() {
                    if d[i] > 0.0 {
                        *gj -= d[i] * d[i] * gs[i] / (m[i] * m[i]);
                    }
                }
            }
        }
        g
    }
}

fn union_support(tables: &[VisitationTable]) -> Vec<bool> {
    let n = tables.first().map_or(0, |t| t.as_slice().len());
    let mut mask = vec![false; n];
    for t in tables {
        for (m, &x) in mask.iter_mut().zip(t.as_slice()) {
            *m |= x > 0.0;
        }
    }
    mask
}

fn single_step(t: &VisitationTable, h: usize) -> VisitationTable {
    VisitationTable::from_flat(1, t.num_states(), t.num_actions(), t.step(h).to_vec()).expect("one step")
}

#[inline]
fn quad_over_lin(d: &[f64], mu: &[f64]) -> f64 {
    let mut v = 0.0;
    for (x, m) in d.iter().zip(mu) {
        if *x > 0.0 {
            if *m <= 0.0 {
                return f64::INFINITY;
            }
            v += x * x / m;
        }
    }
    v
}

/// `max_k Σ d̂_k,h² / μ_h` at step `h` for the mixture `α`.
pub fn objective_value(obj: &SamplingObjective, alpha: &MixtureWeights, h: usize) -> f64 {
    obj.step_value(alpha.as_slice(), h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Relative optimality tolerance on `F`.
    pub tol: f64,
    /// Newton-step budget.
    pub max_iters: usize,
    /// Lower bound on every weight; `None` means `1e-6/J`.
    pub floor: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-6, max_iters: 20_000, floor: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSolution {
    pub alpha: MixtureWeights,
    /// Per-step value `max_k Σ d̂²/μ̂`.
    pub objective: Vec<f64>,
    pub mu_hat: VisitationTable,
    /// Upper bound on `F(α) − min F`.
    pub gap: f64,
    pub iterations: usize,
}

impl SamplingSolution {
    pub fn total(&self) -> f64 {
        self.objective.iter().sum()
    }
}

/// Minimises `F` over the simplex with `α_j ≥ floor`.
pub fn solve_alpha(obj: &SamplingObjective, cfg: &SolverConfig) -> Result<SamplingSolution> {
    let j_n = obj.num_generators();
    if j_n == 1 {
        let alpha = vec![1.0];
        return Ok(finish(obj, alpha, 0.0, 0));
    }
    let floor = cfg.floor.unwrap_or(1e-6 / j_n as f64);
    if floor * j_n as f64 >= 1.0 {
        return Err(Error::InvalidArgument(format!("weight floor {floor} leaves no interior")));
    }
    let mut ipm = Barrier::new(obj, floor);
    let (alpha, gap, iterations) = ipm.run(cfg)?;
    Ok(finish(obj, alpha, gap, iterations))
}

fn finish(obj: &SamplingObjective, mut alpha: Vec<f64>, gap: f64, iterations: usize) -> SamplingSolution {
    let sum: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|a| *a /= sum);
    let mu_hat = obj.mixture(&alpha);
    let objective = (0..obj.horizon).map(|h| obj.step_value_with(&mu_hat, h).0).collect();
    SamplingSolution { alpha: MixtureWeights::new(alpha).expect("normalised"), objective, mu_hat, gap, iterations }
}

/// Independent solves per step, for diagnostics and per-step bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerStepSolution {
    pub alpha: Vec<MixtureWeights>,
    pub objective: Vec<f64>,
    pub mu_hat: VisitationTable,
}

pub fn solve_alpha_per_step(obj: &SamplingObjective, cfg: &SolverConfig) -> Result<PerStepSolution> {
    let mut mu = VisitationTable::zeros(obj.horizon, obj.num_states, obj.num_actions);
    let mut alpha = Vec::with_capacity(obj.horizon);
    let mut objective = Vec::with_capacity(obj.horizon);
    for h in 0..obj.horizon {
        let sol = solve_alpha(&obj.step_only(h), cfg)?;
        mu.step_mut(h).copy_from_slice(sol.mu_hat.step(0));
        objective.push(sol.objective[0]);
        alpha.push(sol.alpha);
    }
    Ok(PerStepSolution { alpha, objective, mu_hat: mu })
}

/// `μ̃_h = Σ_k α_k d_k,h` from oracle tables.
pub fn realized_mixture(tables: &[VisitationTable], alpha: &MixtureWeights) -> Result<VisitationTable> {
    let first = tables.first().ok_or_else(|| Error::InvalidArgument("no tables".into()))?;
    if tables.len() != alpha.len() {
        return Err(Error::Dimension(format!("{} weights for {} tables", alpha.len(), tables.len())));
    }
    let mut data = vec![0.0; first.as_slice().len()];
    for (w, t) in alpha.as_slice().iter().zip(tables) {
        if !t.same_shape(first) {
            return Err(Error::Dimension("tables differ in shape".into()));
        }
        for (d, x) in data.iter_mut().zip(t.as_slice()) {
            *d += w * x;
        }
    }
    VisitationTable::from_flat(first.horizon(), first.num_states(), first.num_actions(), data)
}

/// Exhaustive search over the simplex grid with spacing `1/steps`; up to
/// three generators.
pub fn grid_search(obj: &SamplingObjective, steps: usize) -> Result<(Vec<f64>, f64)> {
    let j_n = obj.num_generators();
    let mut best = (vec![1.0], f64::INFINITY);
    let mut consider = |alpha: Vec<f64>| {
        let v = obj.total(&alpha);
        if v < best.1 {
            best = (alpha, v);
        }
    };
    let n = steps as f64;
    match j_n {
        1 => consider(vec![1.0]),
        2 => (0..=steps).for_each(|i| consider(vec![i as f64 / n, (steps - i) as f64 / n])),
        3 => {
            for i in 0..=steps {
                for j in 0..=steps - i {
                    consider(vec![i as f64 / n, j as f64 / n, (steps - i - j) as f64 / n]);
                }
            }
        }
        _ => return Err(Error::InvalidArgument("grid search handles at most three generators".into())),
    }
    Ok(best)
}

/// Minimum over the simplex by nested golden-section search, exact for the
/// convex objective up to `tol` in each coordinate. At most three generators.
pub fn line_search_oracle(obj: &SamplingObjective, tol: f64) -> Result<(Vec<f64>, f64)> {
    let at = |alpha: &[f64]| if alpha.iter().any(|&x| x < 0.0) { f64::INFINITY } else { obj.total(alpha) };
    match obj.num_generators() {
        1 => Ok((vec![1.0], obj.total(&[1.0]))),
        2 => {
            let x = golden(0.0, 1.0, tol, |x| at(&[x, 1.0 - x]));
            Ok((vec![x, 1.0 - x], at(&[x, 1.0 - x])))
        }
        3 => {
            let inner = |x: f64| golden(0.0, 1.0 - x, tol, |y| at(&[x, y, 1.0 - x - y]));
            let x = golden(0.0, 1.0, tol, |x| {
                let y = inner(x);
                at(&[x, y, 1.0 - x - y])
            });
            let y = inner(x);
            let alpha = vec![x, y, (1.0 - x - y).max(0.0)];
            let v = at(&alpha);
            Ok((alpha, v))
        }
        _ => Err(Error::InvalidArgument("line search oracle handles at most three generators".into())),
    }
}

fn golden(mut lo: f64, mut hi: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (hi - r * (hi - lo), lo + r * (hi - lo));
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa <= fb {
            hi = b;
            (b, fb) = (a, fa);
            a = hi - r * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            (a, fa) = (b, fb);
            b = lo + r * (hi - lo);
            fb = f(b);
        }
    }
    let mid = (lo + hi) / 2.0;
    [(lo, f(lo)), (mid, f(mid)), (hi, f(hi))]
        .into_iter()
        .fold((mid, f64::INFINITY), |acc, (x, v)| if v < acc.1 { (x, v) } else { acc })
        .0
}

/// Newton steps allowed per barrier parameter.
const CENTERING_STEPS: usize = 200;

/// Epigraph barrier: variables `(α_1..α_J, t_1..t_H)`, constraints
/// `t_h > f_hk(α)` and `α_j > floor`, equality `Σ α = 1`.
struct Barrier<'a> {
    obj: &'a SamplingObjective,
    floor: f64,
    j_n: usize,
    h_n: usize,
    /// Targets per step that carry mass.
    active: Vec<Vec<usize>>,
}

struct Eval {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

impl<'a> Barrier<'a> {
    fn new(obj: &'a SamplingObjective, floor: f64) -> Self {
        let active = (0..obj.horizon)
            .map(|h| (0..obj.targets.len()).filter(|&k| obj.targets[k].step_mass(h) > 0.0).collect())
            .collect();
        Self { obj, floor, j_n: obj.generators.len(), h_n: obj.horizon, active }
    }

    fn num_constraints(&self) -> usize {
        self.active.iter().map(|a| a.len().max(1)).sum::<usize>() + self.j_n
    }

    /// Per-step `f_hk(α)` for the active targets, or `None` if infeasible.
    fn step_values(&self, alpha: &[f64]) -> Vec<Vec<f64>> {
        let mu = self.obj.mixture(alpha);
        (0..self.h_n)
            .map(|h| self.active[h].iter().map(|&k| quad_over_lin(self.obj.targets[k].step(h), mu.step(h))).collect())
            .collect()
    }

    fn feasible(&self, x: &[f64]) -> bool {
        let (alpha, t) = x.split_at(self.j_n);
        if alpha.iter().any(|&a| a <= self.floor) {
            return false;
        }
        let f = self.step_values(alpha);
        (0..self.h_n).all(
            |h| {
                if f[h].is_empty() {
                    t[h] > 0.0
                } else {
                    f[h].iter().all(|&v| v.is_finite() && t[h] > v)
                }
            },
        )
    }

    fn barrier_value(&self, x: &[f64], tau: f64) -> f64 {
        let (alpha, t) = x.split_at(self.j_n);
        let f = self.step_values(alpha);
        let mut v = tau * t.iter().sum::<f64>();
        for h in 0..self.h_n {
            if f[h].is_empty() {
                v -= t[h].ln();
            }
            for &fk in &f[h] {
                v -= (t[h] - fk).ln();
            }
        }
        v - alpha.iter().map(|a| (a - self.floor).ln()).sum::<f64>()
    }

    fn evaluate(&self, x: &[f64], tau: f64) -> Eval {
        let (j_n, h_n) = (self.j_n, self.h_n);
        let n = j_n + h_n;
        let (alpha, t) = x.split_at(j_n);
        let mu = self.obj.mixture(alpha);
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        let mut value = tau * t.iter().sum::<f64>();
        for h in 0..h_n {
            grad[j_n + h] += tau;
            let m = mu.step(h);
            if self.active[h].is_empty() {
                value -= t[h].ln();
                grad[j_n + h] -= 1.0 / t[h];
                hess[(j_n + h, j_n + h)] += 1.0 / (t[h] * t[h]);
                continue;
            }
            // weights Σ_k d_k²/u_k per cell, for the curvature of f
            let mut cell_w = vec![0.0; m.len()];
            for &k in &self.active[h] {
                let d = self.obj.targets[k].step(h);
                let f = quad_over_lin(d, m);
                let u = t[h] - f;
                value -= u.ln();
                // ∇f_j = −Σ d² g_j / μ²
                let mut gf = vec![0.0; j_n];
                for (j, gen) in self.obj.generators.iter().enumerate() {
                    let gs = gen.step(h);
                    let mut acc = 0.0;
                    for i in 0..d.len() {
                        if d[i] > 0.0 && gs[i] > 0.0 {
                            acc -= d[i] * d[i] * gs[i] / (m[i] * m[i]);
                        }
                    }
                    gf[j] = acc;
                }
                let inv_u = 1.0 / u;
                for j in 0..j_n {
                    grad[j] += gf[j] * inv_u;
                }
                grad[j_n + h] -= inv_u;
                // rank one term of ∇²(−log u) with ∇u = (−∇f, e_h)
                let inv_u2 = inv_u * inv_u;
                for a in 0..j_n {
                    for b in 0..j_n {
                        hess[(a, b)] += gf[a] * gf[b] * inv_u2;
                    }
                    hess[(a, j_n + h)] -= gf[a] * inv_u2;
                    hess[(j_n + h, a)] -= gf[a] * inv_u2;
                }
                hess[(j_n + h, j_n + h)] += inv_u2;
                for i in 0..d.len() {
                    if d[i] > 0.0 {
                        cell_w[i] += d[i] * d[i] * inv_u;
                    }
                }
            }
            // Σ_k ∇²f_k / u_k = 2 Σ_i (Σ_k d_k,i²/u_k) / μ_i³ · g_i g_iᵀ
            for i in 0..m.len() {
                if cell_w[i] == 0.0 {
                    continue;
                }
                let c = 2.0 * cell_w[i] / (m[i] * m[i] * m[i]);
                for a in 0..j_n {
                    let ga = self.obj.generators[a].step(h)[i];
                    if ga == 0.0 {
                        continue;
                    }
                    for b in 0..j_n {
                        let gb = self.obj.generators[b].step(h)[i];
                        hess[(a, b)] += c * ga * gb;
                    }
                }
            }
        }
        for j in 0..j_n {
            let s = alpha[j] - self.floor;
            value -= s.ln();
            grad[j] -= 1.0 / s;
            hess[(j, j)] += 1.0 / (s * s);
        }
        Eval { value, grad, hess }
    }

    fn run(&mut self, cfg: &SolverConfig) -> Result<(Vec<f64>, f64, usize)> {
        let (j_n, h_n) = (self.j_n, self.h_n);
        let n = j_n + h_n;
        let alpha0 = vec![1.0 / j_n as f64; j_n];
        let f0 = self.step_values(&alpha0);
        let mut x: Vec<f64> = alpha0.clone();
        for fh in &f0 {
            let top = fh.iter().copied().fold(0.0, f64::max);
            x.push(top * 1.1 + 1.0);
        }
        if !self.feasible(&x) {
            return Err(Error::Support("uniform weights leave target mass uncovered".into()));
        }
        let m = self.num_constraints() as f64;
        let mut tau = m / x[j_n..].iter().sum::<f64>().max(1e-12);
        let mut iterations = 0;
        loop {
            // centering, capped so one ill-conditioned τ cannot stall the run
            for _ in 0..CENTERING_STEPS {
                if iterations >= cfg.max_iters {
                    let alpha = x[..j_n].to_vec();
                    return Err(Error::NotConverged {
                        iterations,
                        best_objective: self.obj.total(&alpha),
                        best_alpha: alpha,
                        gap: m / tau,
                    });
                }
                iterations += 1;
                let ev = self.evaluate(&x, tau);
                let mut kkt = DMatrix::zeros(n + 1, n + 1);
                kkt.view_mut((0, 0), (n, n)).copy_from(&ev.hess);
                for j in 0..j_n {
                    kkt[(j, n)] = 1.0;
                    kkt[(n, j)] = 1.0;
                }
                let mut rhs = DVector::zeros(n + 1);
                rhs.rows_mut(0, n).copy_from(&(-&ev.grad));
                // keep Σα = 1 exact despite rounding drift
                rhs[n] = 1.0 - x[..j_n].iter().sum::<f64>();
                let step = match kkt.lu().solve(&rhs) {
                    Some(s) => s,
                    None => break,
                };
                let dx: Vec<f64> = step.rows(0, n).iter().copied().collect();
                let slope: f64 = dx.iter().zip(ev.grad.iter()).map(|(a, b)| a * b).sum();
                let decrement = -slope;
                if decrement / 2.0 <= 1e-10 {
                    break;
                }
                let mut s = 1.0;
                let mut moved = false;
                for _ in 0..80 {
                    let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + s * b).collect();
                    if self.feasible(&trial) && self.barrier_value(&trial, tau) <= ev.value + 0.25 * s * slope {
                        x = trial;
                        moved = true;
                        break;
                    }
                    s *= 0.5;
                }
                let size = dx.iter().fold(0.0f64, |a, b| a.max(b.abs())) * s;
                if !moved || size < 1e-14 {
                    break;
                }
            }
            let gap = m / tau;
            let f = self.obj.total(&x[..j_n]);
            if gap <= cfg.tol * f.max(1e-12) {
                return Ok((x[..j_n].to_vec(), gap, iterations));
            }
            tau *= 8.0;
        }
    }
}

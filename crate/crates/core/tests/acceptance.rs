//! Acceptance suite. Prints one line per criterion and exits non-zero when a
//! criterion fails that is not listed in `EXPECTED_RED`.
//!
//! `ACCEPTANCE_ONLY=2,6` runs a subset.

use std::time::Instant;

use caesar_core::caesar::{deterministic_upper_bound_check, evaluate_policies, mc_baseline, CaesarConfig, Constants};
use caesar_core::coarse::{coarse_estimate, coarse_event_holds, threshold_accuracy, threshold_low_mass, CoarseConfig};
use caesar_core::harness::{
    gen_random_mdp, gen_random_policies, gen_two_layer, gen_two_layer_k_example, gen_unrealizable_example,
    ides_l1_errors, mean_worst_error,
};
use caesar_core::ides::{mom_reps_for, mom_select};
use caesar_core::march::{beta_dist, beta_dist_grid, build_cover, march_estimate_many, CoverKind, MarchConfig};
use caesar_core::optdist::{
    grid_search, line_search_oracle, realized_mixture, solve_alpha, SamplingObjective, SolverConfig,
};
use caesar_core::oracle::{
    backward_value, enumerate_deterministic_policies, enumerate_paths_visitation, exact_value, exact_visitation,
};
use caesar_core::policy_id::identify;
use caesar_core::sampler::StreamAllocator;
use caesar_core::{PolicyTable, RngStream, Simulator, TabularMdp, VisitationTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto};

/// Criteria known not to hold, with the reason recorded alongside.
const EXPECTED_RED: &[(u8, &str)] = &[
    (7, "the first layer separates the policies, so the mixture objective there is K and Phase II grows with K"),
    (8, "the published difference bound fails when y = 0 < x; the proof's last step drops a factor"),
];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run_seeds<T: Send, F: Fn(u64) -> T + Sync + Send>(seeds: std::ops::Range<u64>, f: F) -> Vec<T> {
    use rayon::prelude::*;
    seeds.into_par_iter().map(f).collect()
}

fn calibrated() -> Constants {
    Constants::calibrated()
}

fn main_instance() -> (TabularMdp, Vec<PolicyTable>) {
    let m = gen_random_mdp(4, 2, 3, 0.0, 7).unwrap();
    let p = gen_random_policies(3, 4, 2, 5, true, 8).unwrap();
    (m, p)
}

fn c1_oracle() -> Outcome {
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for s in 1..=4usize {
        for a in 1..=4usize {
            for h in 1..=12usize {
                if ((s * a) as f64).powi(h as i32) > 4096.0 {
                    break;
                }
                for seed in 0..2u64 {
                    let m = gen_random_mdp(s, a, h, 0.25, 1000 * seed + (s * 100 + a * 10 + h) as u64).unwrap();
                    for p in gen_random_policies(h, s, a, 2, seed == 1, seed + 17).unwrap() {
                        let d = exact_visitation(&m, &p).unwrap();
                        worst = worst.max(d.max_abs_diff(&enumerate_paths_visitation(&m, &p).unwrap()));
                        worst = worst.max((exact_value(&m, &p).unwrap() - backward_value(&m, &p).unwrap()).abs());
                        checked += 1;
                    }
                }
            }
        }
    }
    outcome(worst <= 1e-9, format!("{checked} model/policy pairs, max deviation {worst:.2e}"))
}

fn c2_coarse() -> Outcome {
    let (m, p) = main_instance();
    let truth = exact_visitation(&m, &p[0]).unwrap();
    let cfg = CoarseConfig::new(0.05, 0.1).with_c_univ(calibrated().coarse_c_univ);
    let hits = run_seeds(0..100, |seed| {
        let sim = Simulator::new(&m);
        let est = coarse_estimate(&sim, &p[0], &cfg, 1, RngStream::new(seed, 0)).unwrap();
        coarse_event_holds(&est.table, &truth, 0.05, 4.0)
    })
    .into_iter()
    .filter(|&b| b)
    .count();
    outcome(hits >= 85, format!("event held in {hits}/100 runs (C = {:.3})", cfg.c_univ))
}

fn c3_solver() -> Outcome {
    let (mut worst, mut above, mut exact_gap): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut count = 0;
    for (s, a) in [(1usize, 2usize), (2, 2), (2, 3), (3, 2), (2, 4), (4, 2), (1, 8), (8, 1)] {
        for k in 2..=3usize {
            for seed in 0..2u64 {
                let m = gen_random_mdp(s, a, 2, 0.2, seed * 31 + (s * 10 + a) as u64).unwrap();
                let tables: Vec<VisitationTable> = gen_random_policies(2, s, a, k, seed == 0, seed + 5)
                    .unwrap()
                    .iter()
                    .map(|p| exact_visitation(&m, p).unwrap())
                    .collect();
                let obj = SamplingObjective::new(tables).unwrap();
                let sol = solve_alpha(&obj, &SolverConfig::default()).unwrap();
                let (_, grid) = grid_search(&obj, 1000).unwrap();
                let (_, fine) = line_search_oracle(&obj, 1e-10).unwrap();
                worst = worst.max((sol.total() - grid).abs());
                above = above.max(sol.total() - grid);
                exact_gap = exact_gap.max((sol.total() - fine).abs());
                count += 1;
            }
        }
    }
    let (m, pols, _) = gen_unrealizable_example(2).unwrap();
    let tables: Vec<_> = pols.iter().map(|p| exact_visitation(&m, p).unwrap()).collect();
    let sol = solve_alpha(&SamplingObjective::new(tables).unwrap(), &SolverConfig::default()).unwrap();
    let step2 = sol.objective[1];
    let alpha = sol.alpha.as_slice().to_vec();
    // the 1e-3 lattice misses interior optima such as α = 1/3 by more than 1e-3,
    // so two-sided agreement is checked against nested line search
    let ok = above <= 1e-3
        && exact_gap <= 1e-3
        && (step2 - 1.5).abs() <= 1e-3
        && alpha.iter().all(|x| (x - 0.5).abs() <= 1e-2);
    outcome(
        ok,
        format!(
            "{count} instances, max solver − grid {above:.2e}, max |solver − line search| {exact_gap:.2e} \
             (|solver − 1e-3 grid| {worst:.2e}); two-layer step-2 value {step2:.5}, alpha {alpha:.4?}"
        ),
    )
}

/// Random model and stochastic policies with every row mixed half and half
/// with uniform, so each visitation entry is at least 1/32.
fn smoothed_instance(mdp_seed: u64, policy_seed: u64) -> (TabularMdp, Vec<PolicyTable>) {
    let (s_n, a_n, h_n) = (4, 2, 3);
    let raw = gen_random_mdp(s_n, a_n, h_n, 0.0, mdp_seed).unwrap();
    let half = |x: f64, n: usize| 0.5 * x + 0.5 / n as f64;
    let init = raw.initial_dist().iter().map(|&x| half(x, s_n)).collect();
    let mut trans = Vec::new();
    for h in 0..h_n {
        for s in 0..s_n {
            for a in 0..a_n {
                trans.extend(raw.transition_row(h, s, a).iter().map(|&x| half(x, s_n)));
            }
        }
    }
    let m = TabularMdp::new(s_n, a_n, h_n, init, trans, raw.rewards().to_vec()).unwrap();
    let p = gen_random_policies(h_n, s_n, a_n, 3, false, policy_seed)
        .unwrap()
        .into_iter()
        .map(|x| PolicyTable::new(h_n, s_n, a_n, x.as_slice().iter().map(|&v| half(v, a_n)).collect()).unwrap())
        .collect();
    (m, p)
}

fn c4_ides() -> Outcome {
    let (m, p) = smoothed_instance(11, 12);
    let eps = 0.2;
    let mut cfg = CaesarConfig::new(eps, 0.1);
    cfg.constants = calibrated();
    cfg.with_oracle = false;
    let errs: Vec<Vec<Vec<f64>>> = run_seeds(0..50, |seed| ides_l1_errors(&m, &p, &cfg, seed).unwrap());
    let worst = mean_worst_error(&errs);
    let target = eps / (4.0 * 3.0);

    // quadrupling n_h with a single chain, on an instance with no thresholded pairs
    let min_positive = p
        .iter()
        .flat_map(|x| exact_visitation(&m, x).unwrap().as_slice().to_vec())
        .filter(|&v| v > 0.0)
        .fold(1.0, f64::min);
    let mut single = cfg.clone();
    single.mom_reps = Some(1);
    let mut quad = single.clone();
    quad.constants.ides_c_h *= 4.0;
    let mean = |c: &CaesarConfig| {
        let e: Vec<Vec<Vec<f64>>> = run_seeds(0..50, |seed| ides_l1_errors(&m, &p, c, seed).unwrap());
        e.iter().flatten().flatten().sum::<f64>() / e.iter().flatten().flatten().count() as f64
    };
    let (base, fine) = (mean(&single), mean(&quad));
    let ratio = fine / base;
    let ok = worst <= target && (0.35..=0.65).contains(&ratio) && min_positive > 0.03;
    outcome(
        ok,
        format!(
            "worst seed-averaged L1 {worst:.4} vs {target:.4}; single-chain error {base:.4} -> {fine:.4} at 4x n_h (ratio {ratio:.3}); min visitation {min_positive:.3}"
        ),
    )
}

fn c5_sandwich() -> Outcome {
    let (m, p) = main_instance();
    let eps = 0.1;
    let k = p.len();
    let cfg = CoarseConfig {
        epsilon: threshold_accuracy(eps, 4, 2),
        delta: 0.1 / 3.0,
        c_mult: 4.0,
        c_univ: calibrated().coarse_c_univ,
    };
    let truth: Vec<_> = p.iter().map(|x| exact_visitation(&m, x).unwrap()).collect();
    let results = run_seeds(0..50, |seed| {
        let sim = Simulator::new(&m);
        let streams = StreamAllocator::new(seed);
        let raw: Vec<_> = p.iter().map(|x| coarse_estimate(&sim, x, &cfg, k, streams.fresh()).unwrap()).collect();
        if !raw.iter().zip(&truth).all(|(r, d)| coarse_event_holds(&r.table, d, cfg.epsilon, 4.0)) {
            return None;
        }
        let kept: Vec<VisitationTable> = raw.iter().map(|r| threshold_low_mass(r, eps).table).collect();
        let sol = solve_alpha(&SamplingObjective::new(kept.clone()).unwrap(), &SolverConfig::default()).unwrap();
        // true tables restricted to the pairs that survived thresholding
        let zeroed: Vec<VisitationTable> = truth
            .iter()
            .zip(&kept)
            .map(|(d, e)| {
                let data =
                    d.as_slice().iter().zip(e.as_slice()).map(|(x, y)| if *y > 0.0 { *x } else { 0.0 }).collect();
                VisitationTable::from_flat(3, 4, 2, data).unwrap()
            })
            .collect();
        let mu_tilde = realized_mixture(&zeroed, &sol.alpha).unwrap();
        let mut ok = true;
        let mut worst_cond: f64 = 1.0;
        for h in 0..3 {
            let ratios: Vec<f64> = mu_tilde
                .step(h)
                .iter()
                .zip(sol.mu_hat.step(h))
                .filter(|(_, m)| **m > 0.0)
                .map(|(t, m)| t / m)
                .collect();
            let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ratios.iter().copied().fold(0.0, f64::max);
            ok &= lo >= 0.8 - 1e-12 && hi <= 4.0 / 3.0 + 1e-12 && hi / lo <= 5.0 / 3.0 + 1e-12;
            worst_cond = worst_cond.max(hi / lo);
        }
        Some((ok, worst_cond))
    });
    let events: Vec<(bool, f64)> = results.into_iter().flatten().collect();
    let good = events.iter().filter(|e| e.0).count();
    let cond = events.iter().map(|e| e.1).fold(0.0, f64::max);
    outcome(
        !events.is_empty() && good == events.len(),
        format!("{good}/{} coarse-event runs inside the sandwich, worst condition ratio {cond:.3}", events.len()),
    )
}

fn c6_end_to_end() -> Outcome {
    let (m, p) = main_instance();
    let mut cfg = CaesarConfig::new(0.1, 0.1);
    cfg.constants = calibrated();
    let reports = run_seeds(0..50, |seed| evaluate_policies(&m, &p, &cfg, 1000 + seed).unwrap());
    let good = reports.iter().filter(|r| r.max_abs_error().unwrap() <= 0.1).count();
    let worst = reports.iter().map(|r| r.max_abs_error().unwrap()).fold(0.0, f64::max);
    let mean_budget = reports.iter().map(|r| r.phase_counts.total as f64).sum::<f64>() / reports.len() as f64;
    outcome(
        good >= 45,
        format!("{good}/50 runs all-policy accurate, worst error {worst:.4}, mean budget {mean_budget:.3e}"),
    )
}

fn c7_k_trend() -> Outcome {
    let mut cfg = CaesarConfig::new(0.1, 0.1);
    cfg.constants = calibrated();
    let mut phase_two = Vec::new();
    let mut mc = Vec::new();
    for k in [2usize, 4, 8] {
        let (m, p) = gen_two_layer_k_example(k, 0.05, 8).unwrap();
        let runs =
            run_seeds(0..3, |seed| evaluate_policies(&m, &p, &cfg, seed).unwrap().phase_counts.phase_two() as f64);
        phase_two.push(runs.iter().sum::<f64>() / runs.len() as f64);
        mc.push(mc_baseline(&m, &p, 0.1, 0.1, 0).unwrap().phase_counts.total as f64);
    }
    let spread =
        phase_two.iter().copied().fold(0.0, f64::max) / phase_two.iter().copied().fold(f64::INFINITY, f64::min);
    let doublings = [mc[1] / mc[0], mc[2] / mc[1]];
    let mc_ok = doublings.iter().all(|r| (1.6..=2.4).contains(r));
    outcome(
        spread < 2.0 && mc_ok,
        format!(
            "Phase II {:.3e}/{:.3e}/{:.3e} for K = 2/4/8 (spread {spread:.2}x); MC {:.0}/{:.0}/{:.0} (per-doubling {:.2}, {:.2})",
            phase_two[0], phase_two[1], phase_two[2], mc[0], mc[1], mc[2], doublings[0], doublings[1]
        ),
    )
}

fn c8_beta() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 100_000;
    let mut grid_dev: f64 = 0.0;
    let (mut v1, mut v2, mut v3, mut v_pub, mut v_fixed) = (0, 0, 0, 0, 0);
    for _ in 0..n {
        let (x, y) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        let beta = rng.random_range(1.0..4.0);
        grid_dev = grid_dev.max((beta_dist(x, y, beta).unwrap() - beta_dist_grid(x, y, beta, 200)).abs());
    }
    for _ in 0..n {
        let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..5.0));
        let y: [f64; 2] = std::array::from_fn(|_| rng.random_range(0.0..5.0));
        let g = rng.random_range(0.0..5.0);
        let (b1, b2) = (rng.random_range(1.0..3.0), rng.random_range(1.0..3.0));
        let d = |a: f64, b: f64, beta: f64| beta_dist(a, b, beta).unwrap();
        if (d(g * x[0], g * y[0], b1) - g * d(x[0], y[0], b1)).abs() > 1e-9 * (1.0 + g * (x[0] + y[0])) {
            v1 += 1;
        }
        if d(x[0] + x[1], y[0] + y[1], b1) > d(x[0], y[0], b1) + d(x[1], y[1], b1) + 1e-9 {
            v2 += 1;
        }
        if d(x[0], x[2], b1 * b2) > d(x[0], y[0], b1) * b2 + d(y[0], x[2], b2) + 1e-9 {
            v3 += 1;
        }
        // difference bound, with the tolerance e drawn at or above the distance
        let b = b1 - 1.0;
        let e = d(x[0], y[1], 1.0 + b) * (1.0 + rng.random_range(0.0..0.5));
        let diff = (x[0] - y[1]).abs();
        if diff > b * y[1] + (1.0 + b / (1.0 + b)) * e + 1e-9 {
            v_pub += 1;
        }
        if diff > b * y[1] + (1.0 + b) * e + 1e-9 {
            v_fixed += 1;
        }
    }
    let zero_y = {
        let (x, b) = (4.0, 0.5);
        let e = beta_dist(x, 0.0, 1.0 + b).unwrap();
        (x, (1.0 + b / (1.0 + b)) * e)
    };
    outcome(
        grid_dev <= 1e-9 && v1 + v2 + v3 + v_pub == 0,
        format!(
            "closed form vs grid {grid_dev:.1e}; violations: scaling {v1}, subadditivity {v2}, chaining {v3}, difference bound {v_pub} (with coefficient 1+b: {v_fixed}); e.g. x = {}, y = 0, b = 0.5 gives |x−y| = {} > bound {:.3}",
            zero_y.0, zero_y.0, zero_y.1
        ),
    )
}

fn c9_march() -> Outcome {
    let m = gen_random_mdp(2, 2, 3, 0.0, 9).unwrap();
    let pols = enumerate_deterministic_policies(&m, 1 << 20).unwrap();
    let truth: Vec<_> = pols.iter().map(|p| exact_visitation(&m, p).unwrap()).collect();
    let cover = build_cover(&m, CoverKind::OracleCover).unwrap();
    let mut cfg = MarchConfig::new(0.1, 0.1);
    cfg.c_univ = calibrated().coarse_c_univ;
    let hits = run_seeds(0..20, |seed| {
        let sim = Simulator::new(&m);
        let est = march_estimate_many(&sim, &cover, &pols, &cfg, &StreamAllocator::new(seed)).unwrap();
        est.iter().zip(&truth).all(|(e, d)| coarse_event_holds(&e.table, d, 0.1, 4.0))
    })
    .into_iter()
    .filter(|&b| b)
    .count();
    outcome(hits >= 18, format!("bound held for all {} policies in {hits}/20 runs", pols.len()))
}

fn c10_mom() -> Outcome {
    let eps = 0.1;
    // Pareto(x_m, 1.5) has mean 3·x_m
    let tail = Pareto::new(eps / 12.0, 1.5).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for delta in [0.1, 0.01] {
        let n = mom_reps_for(delta);
        let mut rng = ChaCha8Rng::seed_from_u64((1.0 / delta) as u64);
        let trials = 10_000;
        let good = (0..trials)
            .filter(|_| {
                let errs: Vec<f64> = (0..n)
                    .map(|_| {
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        sign * tail.sample(&mut rng)
                    })
                    .collect();
                errs[mom_select(&errs)].abs() <= eps
            })
            .count();
        let rate = good as f64 / trials as f64;
        ok &= rate >= 1.0 - delta - 0.02;
        lines.push(format!("delta {delta}: N = {n}, rate {rate:.4}"));
    }
    outcome(ok, lines.join("; "))
}

fn c11_identify() -> Outcome {
    let values = [0.95, 0.35, 0.3, 0.2, 0.1];
    let (m, p) = gen_two_layer(&values, 5).unwrap();
    let mut base = CaesarConfig::new(0.1, 0.1);
    base.constants = calibrated();
    let v: Vec<f64> = p.iter().map(|x| exact_value(&m, x).unwrap()).collect();
    let best = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let runs = run_seeds(0..20, |seed| identify(&m, &p, 0.1, 0.1, &base, seed).unwrap());
    let good = runs.iter().filter(|r| best - v[r.chosen] <= 0.1).count();
    // elimination invariants on rounds whose estimates were γ-accurate
    let mut checked = 0;
    let mut broken = 0;
    for r in &runs {
        for round in &r.rounds {
            let est = &round.estimates[0];
            let accurate = round.survivors.iter().zip(est).all(|(&i, e)| (e - v[i]).abs() <= round.gamma);
            if !accurate {
                continue;
            }
            checked += 1;
            let top = round.survivors.iter().map(|&i| v[i]).fold(f64::NEG_INFINITY, f64::max);
            for &i in &round.survivors {
                let kept = round.kept.contains(&i);
                if (v[i] == top && !kept) || (top - v[i] > 4.0 * round.gamma && kept) {
                    broken += 1;
                }
            }
        }
    }
    let mean_budget = runs.iter().map(|r| r.total_trajectories as f64).sum::<f64>() / runs.len() as f64;
    let capped = runs.iter().filter(|r| !r.complete).count();
    outcome(
        good >= 18 && broken == 0,
        format!(
            "{good}/20 runs returned an ε-optimal policy; {checked} accurate rounds, {broken} invariant breaks; \
             {capped} stopped by the cap; mean budget {mean_budget:.3e}"
        ),
    )
}

fn c12_deterministic_bound() -> Outcome {
    let shapes = [(2usize, 2usize, 2usize), (2, 2, 3), (3, 2, 2), (2, 3, 2), (1, 3, 3)];
    let mut worst_ratio: f64 = 0.0;
    let mut ok = true;
    for i in 0..20u64 {
        let (s, a, h) = shapes[i as usize % shapes.len()];
        let m = gen_random_mdp(s, a, h, 0.3, 1200 + i).unwrap();
        let b = deterministic_upper_bound_check(&m, 1 << 20).unwrap();
        ok &= b.holds();
        worst_ratio = worst_ratio.max(b.solved.max(b.witness) / b.bound);
    }
    outcome(ok, format!("20 instances, largest value / SA = {worst_ratio:.4}"))
}

fn main() {
    let only: Option<Vec<u8>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(u8, &str, fn() -> Outcome); 12] = [
        (1, "oracle correctness", c1_oracle),
        (2, "coarse estimation", c2_coarse),
        (3, "mixture solver", c3_solver),
        (4, "importance density accuracy", c4_ides),
        (5, "curvature sandwich", c5_sandwich),
        (6, "end-to-end accuracy", c6_end_to_end),
        (7, "K-independence trend", c7_k_trend),
        (8, "beta-distance suite", c8_beta),
        (9, "shared-cover coarse estimation", c9_march),
        (10, "median of means", c10_mom),
        (11, "policy identification", c11_identify),
        (12, "deterministic-policy bound", c12_deterministic_bound),
    ];
    let mut unexpected = Vec::new();
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let out = f();
        let secs = start.elapsed().as_secs_f64();
        let red = EXPECTED_RED.iter().find(|(i, _)| *i == id);
        let tag = if out.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {tag} {name} ({secs:.1} s): {}", out.detail);
        if let (false, Some((_, why))) = (out.pass, red) {
            println!("             known: {why}");
        }
        if !out.pass && red.is_none() {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

use caesar_core::caesar::{run_caesar, CaesarConfig};
use caesar_core::coarse::{threshold_low_mass, CoarseVisitation};
use caesar_core::harness::{gen_random_mdp, gen_random_policies};
use caesar_core::ides::{mom_select, StepProblem};
use caesar_core::march::{beta_dist, beta_dist_grid, beta_dist_vec, clipped_weight};
use caesar_core::optdist::{solve_alpha, SamplingObjective, SolverConfig};
use caesar_core::oracle::{backward_value, exact_value, exact_visitation, value_from_visitation};
use caesar_core::policy_id::eliminate;
use caesar_core::sampler::StreamAllocator;
use caesar_core::{PolicyTable, Simulator, TabularMdp, VisitationTable};
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..5, 1usize..4, 1usize..5, any::<u64>())
}

fn instance(s: usize, a: usize, h: usize, seed: u64, k: usize) -> (TabularMdp, Vec<PolicyTable>) {
    let m = gen_random_mdp(s, a, h, 0.3, seed).unwrap();
    let p = gen_random_policies(h, s, a, k, seed % 2 == 0, seed ^ 0x5eed).unwrap();
    (m, p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_models_validate((s, a, h, seed) in shape()) {
        let m = gen_random_mdp(s, a, h, 0.5, seed).unwrap();
        prop_assert!(m.validate().is_ok());
        let json = serde_json::to_string(&m).unwrap();
        let back: TabularMdp = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn broken_rows_are_reported((s, a, h, seed) in shape(), bump in 0.01f64..0.5) {
        let m = gen_random_mdp(s, a, h, 0.0, seed).unwrap();
        let mut p: Vec<f64> = (0..h).flat_map(|t| (0..s).flat_map(move |x| (0..a).map(move |y| (t, x, y))))
            .flat_map(|(t, x, y)| m.transition_row(t, x, y).to_vec()).collect();
        p[0] += bump;
        let r = TabularMdp::new(s, a, h, m.initial_dist().to_vec(), p, m.rewards().to_vec());
        prop_assert!(r.is_err());
    }

    #[test]
    fn visitation_is_a_distribution_per_step((s, a, h, seed) in shape()) {
        let (m, pols) = instance(s, a, h, seed, 2);
        for p in &pols {
            let d = exact_visitation(&m, p).unwrap();
            for t in 0..h {
                prop_assert!((d.step_mass(t) - 1.0).abs() < 1e-9);
            }
            prop_assert!(d.as_slice().iter().all(|&x| x >= 0.0));
            let v = exact_value(&m, p).unwrap();
            prop_assert!((v - backward_value(&m, p).unwrap()).abs() < 1e-9);
            prop_assert!((v - value_from_visitation(&m, &d)).abs() < 1e-9);
            prop_assert!(v >= -1e-12 && v <= h as f64 + 1e-12);
        }
    }

    #[test]
    fn threshold_loses_at_most_half_epsilon((s, a, h, seed) in shape(), eps in 0.01f64..0.9) {
        let (m, pols) = instance(s, a, h, seed, 1);
        let d = exact_visitation(&m, &pols[0]).unwrap();
        let est = CoarseVisitation { table: d.clone(), epsilon_used: eps, thresholded: false, samples: 0 };
        let out = threshold_low_mass(&est, eps);
        for t in 0..h {
            prop_assert!(d.step_mass(t) - out.table.step_mass(t) <= eps / 2.0 + 1e-12);
        }
        prop_assert!(out.table.as_slice().iter().zip(d.as_slice()).all(|(o, x)| *o == 0.0 || o == x));
    }

    #[test]
    fn solved_mixture_beats_vertices_and_uniform((s, a, h, seed) in (1usize..4, 1usize..3, 1usize..4, any::<u64>()), k in 1usize..4) {
        let (m, pols) = instance(s, a, h, seed, k);
        let tables: Vec<VisitationTable> = pols.iter().map(|p| exact_visitation(&m, p).unwrap()).collect();
        let obj = SamplingObjective::new(tables).unwrap();
        let sol = solve_alpha(&obj, &SolverConfig::default()).unwrap();
        let best = obj.total(sol.alpha.as_slice());
        let uniform = vec![1.0 / k as f64; k];
        prop_assert!(best <= obj.total(&uniform) * (1.0 + 1e-4) + 1e-9);
        // every step value is at least 1 by Cauchy-Schwarz
        prop_assert!(sol.objective.iter().all(|&v| v >= 1.0 - 1e-6));
        prop_assert!((sol.alpha.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn projection_stays_in_box(w in prop::collection::vec(-5.0f64..5.0, 6), d in prop::collection::vec(0.0f64..1.0, 6)) {
        let pol = PolicyTable::uniform(1, 3, 2);
        let dt = VisitationTable::from_flat(1, 3, 2, d.clone()).unwrap();
        let mu = dt.clone();
        let p = StepProblem::new(0, &pol, &dt, &mu, None);
        let mut x = w.clone();
        p.project(&mut x);
        for (v, u) in x.iter().zip(&d) {
            prop_assert!(*v >= 0.0 && *v <= 2.0 * u);
        }
    }

    #[test]
    fn median_selection_is_a_median(losses in prop::collection::vec(-10.0f64..10.0, 1..40)) {
        let i = mom_select(&losses);
        let v = losses[i];
        let below = losses.iter().filter(|&&x| x < v).count();
        let above = losses.iter().filter(|&&x| x > v).count();
        prop_assert!(below <= losses.len() / 2);
        prop_assert!(above <= losses.len() / 2);
    }

    #[test]
    fn elimination_keeps_the_leader(est in prop::collection::vec(0.0f64..3.0, 1..10), gamma in 0.01f64..0.5) {
        let kept = eliminate(&est, gamma);
        let best = est.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lead = est.iter().position(|&x| x == best).unwrap();
        prop_assert!(kept.contains(&lead));
        for (i, &x) in est.iter().enumerate() {
            prop_assert_eq!(kept.contains(&i), best - x <= 2.0 * gamma);
        }
    }

    #[test]
    fn stream_ids_never_repeat(n in 1usize..200) {
        let alloc = StreamAllocator::new(3);
        let mut ids: Vec<u64> = alloc.fresh_many(n).iter().map(|s| s.stream).collect();
        ids.push(alloc.fresh().stream);
        let len = ids.len();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), len);
        prop_assert!(alloc.claim(ids[0]).is_err());
    }

    #[test]
    fn clipped_weights_respect_cap(d in 0.0f64..1.0, mu in 0.0f64..1.0, clip in 1.0f64..100.0) {
        let w = clipped_weight(d, mu, clip);
        prop_assert!(w >= 0.0 && w <= clip);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn beta_closed_form_matches_grid(x in 0.0f64..10.0, y in 0.0f64..10.0, beta in 1.0f64..4.0) {
        let c = beta_dist(x, y, beta).unwrap();
        prop_assert!((c - beta_dist_grid(x, y, beta, 200)).abs() < 1e-9);
    }

    #[test]
    fn beta_scaling_and_subadditivity(
        x1 in 0.0f64..5.0, y1 in 0.0f64..5.0, x2 in 0.0f64..5.0, y2 in 0.0f64..5.0,
        g in 0.0f64..5.0, beta in 1.0f64..3.0,
    ) {
        let d = |x, y| beta_dist(x, y, beta).unwrap();
        prop_assert!((d(g * x1, g * y1) - g * d(x1, y1)).abs() <= 1e-9 * (1.0 + g * (x1 + y1)));
        prop_assert!(d(x1 + x2, y1 + y2) <= d(x1, y1) + d(x2, y2) + 1e-9);
    }

    #[test]
    fn beta_chaining(x in 0.0f64..5.0, y in 0.0f64..5.0, z in 0.0f64..5.0, b1 in 1.0f64..3.0, b2 in 1.0f64..3.0) {
        let lhs = beta_dist(x, z, b1 * b2).unwrap();
        let rhs = beta_dist(x, y, b1).unwrap() * b2 + beta_dist(y, z, b2).unwrap();
        prop_assert!(lhs <= rhs + 1e-9);
    }

    #[test]
    fn beta_distance_bounds_difference(x in 0.0f64..5.0, y in 0.0f64..5.0, b in 0.0f64..2.0) {
        // the coefficient on e is 1 + b; 1 + b/(1+b) fails for x > 0 = y
        let e = beta_dist(x, y, 1.0 + b).unwrap();
        prop_assert!((x - y).abs() <= b * y + (1.0 + b) * e + 1e-9);
    }

    #[test]
    fn beta_vec_is_additive(x in prop::collection::vec(0.0f64..3.0, 0..6), u in prop::collection::vec(0.0f64..3.0, 0..6), beta in 1.0f64..3.0) {
        let y: Vec<f64> = x.iter().map(|v| v * 0.7 + 0.1).collect();
        let v: Vec<f64> = u.iter().map(|v| v * 1.3).collect();
        let xu: Vec<f64> = x.iter().chain(&u).copied().collect();
        let yv: Vec<f64> = y.iter().chain(&v).copied().collect();
        let whole = beta_dist_vec(&xu, &yv, beta).unwrap();
        let parts = beta_dist_vec(&x, &y, beta).unwrap() + beta_dist_vec(&u, &v, beta).unwrap();
        prop_assert!((whole - parts).abs() < 1e-9);
        prop_assert_eq!(beta_dist_vec(&x, &x, beta).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn pipeline_ledger_and_streams(seed in any::<u64>()) {
        let (m, pols) = instance(3, 2, 2, seed, 3);
        let sim = Simulator::new(&m);
        let streams = StreamAllocator::new(seed);
        let mut cfg = CaesarConfig::new(0.4, 0.2);
        cfg.mom_reps = Some(3);
        let run = run_caesar(&sim, &pols, &cfg, &streams).unwrap();
        let c = run.report.phase_counts;
        prop_assert_eq!(c.total, sim.rollouts());
        prop_assert_eq!(c.coarse + c.ides + c.final_phase, c.total);
        prop_assert!(run.streams.pairwise_disjoint());
        prop_assert!(run.report.estimates.iter().all(|v| v.is_finite()));
    }
}

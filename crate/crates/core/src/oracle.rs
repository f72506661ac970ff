//! Exact dynamic-programming oracle: visitation tables, policy values,
//! planning and deterministic-policy enumeration.

use crate::mdp::{PolicyTable, TabularMdp, VisitationTable};
use crate::{Error, Result};

/// Default cap on `A^(S·H)` for [`enumerate_deterministic_policies`].
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Forward recursion `d_{h+1}(s') = Σ_{s,a} d_h(s,a) P_h(s'|s,a)`.
pub fn exact_visitation(mdp: &TabularMdp, policy: &PolicyTable) -> Result<VisitationTable> {
    mdp.check_policy(policy)?;
    let (s_n, a_n, h_n) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut out = VisitationTable::zeros(h_n, s_n, a_n);
    let mut state = mdp.initial_dist().to_vec();
    let mut next = vec![0.0; s_n];
    for h in 0..h_n {
        next.iter_mut().for_each(|x| *x = 0.0);
        for s in 0..s_n {
            let ds = state[s];
            if ds == 0.0 {
                continue;
            }
            for a in 0..a_n {
                let dsa = ds * policy.prob(h, s, a);
                out.set(h, s, a, dsa);
                if dsa == 0.0 || h + 1 == h_n {
                    continue;
                }
                for (n, p) in next.iter_mut().zip(mdp.transition_row(h, s, a)) {
                    *n += dsa * p;
                }
            }
        }
        std::mem::swap(&mut state, &mut next);
    }
    Ok(out)
}

/// `V_1^π = Σ_h Σ_{s,a} d_h(s,a) r_h(s,a)`.
pub fn exact_value(mdp: &TabularMdp, policy: &PolicyTable) -> Result<f64> {
    let d = exact_visitation(mdp, policy)?;
    Ok(value_from_visitation(mdp, &d))
}

pub fn value_from_visitation(mdp: &TabularMdp, d: &VisitationTable) -> f64 {
    d.as_slice().iter().zip(mdp.rewards()).map(|(x, r)| x * r).sum()
}

/// Backward induction `Q_h = r_h + P_h V_{h+1}`, `V_h(s) = Σ_a π(a|s) Q_h(s,a)`.
pub fn backward_value(mdp: &TabularMdp, policy: &PolicyTable) -> Result<f64> {
    mdp.check_policy(policy)?;
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    let mut v_next = vec![0.0; s_n];
    for h in (0..mdp.horizon()).rev() {
        let mut v = vec![0.0; s_n];
        for (s, vs) in v.iter_mut().enumerate() {
            for a in 0..a_n {
                let pi = policy.prob(h, s, a);
                if pi == 0.0 {
                    continue;
                }
                let cont: f64 = mdp.transition_row(h, s, a).iter().zip(&v_next).map(|(p, x)| p * x).sum();
                *vs += pi * (mdp.reward(h, s, a) + cont);
            }
        }
        v_next = v;
    }
    Ok(mdp.initial_dist().iter().zip(&v_next).map(|(p, v)| p * v).sum())
}

/// Optimal deterministic policy and value for a reward table (flat `[h][s][a]`).
/// Ties go to the lowest action index.
pub fn plan(mdp: &TabularMdp, rewards: &[f64]) -> Result<(PolicyTable, f64)> {
    let (s_n, a_n, h_n) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    if rewards.len() != h_n * s_n * a_n {
        return Err(Error::Dimension(format!(
            "reward table has {} entries, expected {}",
            rewards.len(),
            h_n * s_n * a_n
        )));
    }
    let mut actions = vec![0usize; h_n * s_n];
    let mut v_next = vec![0.0; s_n];
    for h in (0..h_n).rev() {
        let mut v = vec![0.0; s_n];
        for s in 0..s_n {
            let mut best = (0, f64::NEG_INFINITY);
            for a in 0..a_n {
                let cont: f64 = mdp.transition_row(h, s, a).iter().zip(&v_next).map(|(p, x)| p * x).sum();
                let q = rewards[(h * s_n + s) * a_n + a] + cont;
                if q > best.1 {
                    best = (a, q);
                }
            }
            actions[h * s_n + s] = best.0;
            v[s] = best.1;
        }
        v_next = v;
    }
    let value = mdp.initial_dist().iter().zip(&v_next).map(|(p, v)| p * v).sum();
    Ok((PolicyTable::deterministic(h_n, s_n, a_n, &actions)?, value))
}

/// `d^max_h(s,a) = max_π d^π_h(s,a)` over all policies, with the deterministic
/// maximiser for every `(h, s, a)` (flat `[h][s][a]`).
pub fn max_visitation(mdp: &TabularMdp) -> Result<(VisitationTable, Vec<PolicyTable>)> {
    let (s_n, a_n, h_n) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut table = VisitationTable::zeros(h_n, s_n, a_n);
    let mut argmax = Vec::with_capacity(h_n * s_n * a_n);
    let mut indicator = vec![0.0; h_n * s_n * a_n];
    for h in 0..h_n {
        for s in 0..s_n {
            for a in 0..a_n {
                let i = (h * s_n + s) * a_n + a;
                indicator[i] = 1.0;
                let (policy, value) = plan(mdp, &indicator)?;
                indicator[i] = 0.0;
                table.set(h, s, a, value);
                argmax.push(policy);
            }
        }
    }
    Ok((table, argmax))
}

/// `A^(S·H)` as a float so that huge counts do not overflow.
pub fn deterministic_policy_count(mdp: &TabularMdp) -> f64 {
    (mdp.num_actions() as f64).powf((mdp.num_states() * mdp.horizon()) as f64)
}

/// Every deterministic policy exactly once, in lexicographic order of the
/// flat `[h][s]` action vector.
pub fn enumerate_deterministic_policies(mdp: &TabularMdp, cap: u64) -> Result<Vec<PolicyTable>> {
    let count = deterministic_policy_count(mdp);
    if count > cap as f64 {
        return Err(Error::EnumerationCap { count, cap });
    }
    let (s_n, a_n, h_n) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let slots = s_n * h_n;
    let mut digits = vec![0usize; slots];
    let mut out = Vec::with_capacity(count as usize);
    loop {
        out.push(PolicyTable::deterministic(h_n, s_n, a_n, &digits)?);
        // odometer increment, last slot fastest
        let mut i = slots;
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            digits[i] += 1;
            if digits[i] < a_n {
                break;
            }
            digits[i] = 0;
        }
    }
}

/// Brute-force visitation by summing path probabilities over all
/// `(S·A)^H` trajectories. Only meant as a cross-check on tiny models.
pub fn enumerate_paths_visitation(mdp: &TabularMdp, policy: &PolicyTable) -> Result<VisitationTable> {
    mdp.check_policy(policy)?;
    let (s_n, a_n, h_n) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut out = VisitationTable::zeros(h_n, s_n, a_n);
    let mut path = vec![(0usize, 0usize); h_n];
    let total = (s_n * a_n).pow(h_n as u32);
    for code in 0..total {
        let mut c = code;
        for slot in path.iter_mut() {
            let sa = c % (s_n * a_n);
            c /= s_n * a_n;
            *slot = (sa / a_n, sa % a_n);
        }
        let mut prob = mdp.initial_dist()[path[0].0];
        for (h, &(s, a)) in path.iter().enumerate() {
            prob *= policy.prob(h, s, a);
            if h + 1 < h_n {
                prob *= mdp.transition_row(h, s, a)[path[h + 1].0];
            }
            if prob == 0.0 {
                break;
            }
        }
        if prob == 0.0 {
            continue;
        }
        for (h, &(s, a)) in path.iter().enumerate() {
            out.set(h, s, a, out.get(h, s, a) + prob);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_path(h: usize) -> TabularMdp {
        TabularMdp::new(1, 1, h, vec![1.0], vec![1.0; h], vec![0.5; h]).unwrap()
    }

    #[test]
    fn single_path_visits_everything() {
        let m = single_path(4);
        let p = PolicyTable::uniform(4, 1, 1);
        let d = exact_visitation(&m, &p).unwrap();
        assert!(d.as_slice().iter().all(|&x| x == 1.0));
        assert_eq!(exact_value(&m, &p).unwrap(), 2.0);
    }

    #[test]
    fn first_step_is_nu_times_pi() {
        let m = TabularMdp::new(2, 2, 1, vec![0.3, 0.7], vec![0.5; 8], vec![0.0; 4]).unwrap();
        let p = PolicyTable::new(1, 2, 2, vec![0.2, 0.8, 0.6, 0.4]).unwrap();
        let d = exact_visitation(&m, &p).unwrap();
        for (s, nu) in [0.3, 0.7].iter().enumerate() {
            for a in 0..2 {
                assert!((d.get(0, s, a) - nu * p.prob(0, s, a)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rewards_zero_and_one() {
        let m = TabularMdp::new(2, 2, 3, vec![0.5, 0.5], vec![0.5; 24], vec![0.0; 12]).unwrap();
        let p = PolicyTable::uniform(3, 2, 2);
        assert_eq!(exact_value(&m, &p).unwrap(), 0.0);
        let ones = m.with_rewards(vec![1.0; 12]).unwrap();
        assert!((exact_value(&ones, &p).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn policy_counts() {
        let m = TabularMdp::new(1, 2, 1, vec![1.0], vec![1.0; 2], vec![0.0; 2]).unwrap();
        assert_eq!(enumerate_deterministic_policies(&m, DEFAULT_ENUMERATION_CAP).unwrap().len(), 2);
        let m = TabularMdp::new(2, 2, 2, vec![1.0, 0.0], vec![0.5; 16], vec![0.0; 8]).unwrap();
        assert_eq!(enumerate_deterministic_policies(&m, DEFAULT_ENUMERATION_CAP).unwrap().len(), 16);
        let m = TabularMdp::new(2, 3, 3, vec![1.0, 0.0], vec![0.5; 36], vec![0.0; 18]).unwrap();
        let all = enumerate_deterministic_policies(&m, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(all.len(), 729);
        let mut keys: Vec<Vec<u64>> = all.iter().map(|p| p.as_slice().iter().map(|x| x.to_bits()).collect()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 729);
        match enumerate_deterministic_policies(&m, 100) {
            Err(Error::EnumerationCap { count, cap }) => {
                assert_eq!(count, 729.0);
                assert_eq!(cap, 100);
            }
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn plan_beats_every_deterministic_policy() {
        let mut p = Vec::new();
        for i in 0..2 * 2 * 2 {
            let x = 0.1 + 0.1 * i as f64;
            p.extend_from_slice(&[x, 1.0 - x]);
        }
        let r: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37) % 1.0).collect();
        let m = TabularMdp::new(2, 2, 2, vec![0.4, 0.6], p, r).unwrap();
        let (best, v) = plan(&m, m.rewards()).unwrap();
        assert!((exact_value(&m, &best).unwrap() - v).abs() < 1e-12);
        for pol in enumerate_deterministic_policies(&m, 100).unwrap() {
            assert!(exact_value(&m, &pol).unwrap() <= v + 1e-12);
        }
    }
}

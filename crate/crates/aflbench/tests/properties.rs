//! Randomized property tests over the mechanism algebra, the bound
//! formulas, and the engine's determinism contract.

use aflbench::aggregation::{EstimatorMode, Strategy as AggStrategy};
use aflbench::analysis::{convergence_bound, u_max, BoundInputs};
use aflbench::engine::{run_simulation, ClientSpec, DelayDistribution, SimConfig};
use aflbench::mechanism::{
    expected_staleness, fair_weight, influence, influence_from_staleness, normalized_weight_bounds,
    normalized_weights, RateProfile, WeightForm,
};
use aflbench::model::{Dataset, ParamVector, TaskKind, TaskSpec};
use proptest::prelude::*;

fn rates_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..100.0, 1..=20)
}

fn buffer_sizes() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![1usize, 2, 5])
}

proptest! {
    #[test]
    fn fair_weight_times_influence_is_one_over_n(rates in rates_strategy(), b in buffer_sizes()) {
        let profile = RateProfile::new(rates).unwrap();
        let n = profile.len();
        for i in 0..n {
            let tau = expected_staleness(&profile, i, b).unwrap();
            let product = fair_weight(tau, b, n).unwrap()
                * influence_from_staleness(tau, b).unwrap();
            prop_assert!((product - 1.0 / n as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn influence_from_staleness_recovers_influence(rates in rates_strategy(), b in buffer_sizes()) {
        let profile = RateProfile::new(rates).unwrap();
        let mut total = 0.0;
        for i in 0..profile.len() {
            let p = influence(&profile, i).unwrap();
            let tau = expected_staleness(&profile, i, b).unwrap();
            let recovered = influence_from_staleness(tau, b).unwrap();
            prop_assert!((p - recovered).abs() <= 1e-12 * p.max(1.0));
            total += p;
        }
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn normalized_weights_are_a_bounded_probability_vector(
        stalenesses in prop::collection::vec(0.0f64..50.0, 1..=5),
        n in 1usize..=20,
    ) {
        let b = stalenesses.len();
        let weights = normalized_weights(&stalenesses, b, n, WeightForm::Eq8).unwrap();
        let sum: f64 = weights.weights().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        let tau_max = stalenesses.iter().cloned().fold(0.0, f64::max);
        let (lo, hi) = normalized_weight_bounds(b, tau_max);
        for &w in weights.weights() {
            prop_assert!(w >= lo - 1e-12 && w <= hi + 1e-12, "w={w}, bounds=[{lo},{hi}]");
        }
    }

    #[test]
    fn staler_updates_never_get_less_weight(
        stalenesses in prop::collection::vec(0.0f64..50.0, 2..=5),
    ) {
        let b = stalenesses.len();
        let weights = normalized_weights(&stalenesses, b, 10, WeightForm::Eq8).unwrap();
        for j in 0..b {
            for k in 0..b {
                if stalenesses[j] >= stalenesses[k] {
                    prop_assert!(weights.weights()[j] >= weights.weights()[k] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn expected_staleness_is_scale_invariant(rates in rates_strategy(), scale in 0.01f64..100.0, b in buffer_sizes()) {
        let profile = RateProfile::new(rates.clone()).unwrap();
        let scaled = RateProfile::new(rates.iter().map(|r| r * scale).collect()).unwrap();
        for i in 0..profile.len() {
            let a = expected_staleness(&profile, i, b).unwrap();
            let c = expected_staleness(&scaled, i, b).unwrap();
            prop_assert!((a - c).abs() <= 1e-12 * a.max(1.0), "a={a}, c={c}");
        }
    }

    #[test]
    fn u_max_is_nonnegative_and_zero_without_staleness(b in 1usize..=8, tau in 0.0f64..100.0) {
        prop_assert!(u_max(b, tau) >= 0.0);
        prop_assert_eq!(u_max(b, 0.0), 0.0);
        prop_assert_eq!(u_max(1, tau), 0.0);
    }

    #[test]
    fn u_max_monotone_in_tau(b in 2usize..=6, tau in 0.0f64..50.0, bump in 0.0f64..10.0) {
        prop_assert!(u_max(b, tau + bump) >= u_max(b, tau) - 1e-12);
    }

    #[test]
    fn bound_terms_nonnegative_and_monotone(
        g in 0.0f64..10.0,
        sigma_l2 in 0.0f64..5.0,
        sigma_g2 in 0.0f64..5.0,
        tau in 0.0f64..20.0,
        b in buffer_sizes(),
    ) {
        let inputs = BoundInputs {
            f0_minus_fstar: 1.0,
            l_smooth: 1.0,
            sigma_l2,
            sigma_g2,
            g_bound: g,
            q: 1,
            local_lrs: vec![0.05],
            eta_g: 1.0,
            b,
            tau_max_b: tau,
            t_steps: 100,
        };
        let terms = convergence_bound(&inputs).unwrap();
        prop_assert!(terms.term1 >= 0.0 && terms.term2 >= 0.0 && terms.term3 >= 0.0 && terms.term4 >= 0.0);

        let mut longer = inputs.clone();
        longer.t_steps = 200;
        prop_assert!(convergence_bound(&longer).unwrap().total <= terms.total + 1e-12);

        let mut noisier = inputs.clone();
        noisier.sigma_g2 += 1.0;
        prop_assert!(convergence_bound(&noisier).unwrap().total >= terms.total - 1e-12);

        let mut staler = inputs;
        staler.tau_max_b += 1.0;
        prop_assert!(convergence_bound(&staler).unwrap().total >= terms.total - 1e-12);
    }
}

fn tiny_sim(seed: u64, n: usize, b: usize, strategy: AggStrategy) -> SimConfig {
    let task = TaskSpec {
        kind: TaskKind::Quadratic,
        feature_dim: 2,
        num_classes: 1,
        hidden_dim: 0,
        l2_coefficient: 0.0,
    };
    let clients = (0..n)
        .map(|i| ClientSpec {
            agent_id: i as u64,
            delay: DelayDistribution::Uniform { lo: 0.5 + i as f64, hi: 1.5 + i as f64 },
            shard: Dataset::new(vec![i as f64, -(i as f64)], vec![0], 2).unwrap(),
            q: 1,
            eta_l: 0.1,
            batch_size: None,
            rng_seed: seed.wrapping_add(i as u64),
        })
        .collect();
    SimConfig {
        clients,
        buffer_size: b,
        strategy,
        weight_form: WeightForm::Eq8,
        estimator: EstimatorMode::RunningMean,
        eta_g: 1.0,
        total_aggregations: 15,
        task,
        holdout: Dataset::new(vec![], vec![], 2).unwrap(),
        fast_labels: vec![],
        slow_labels: vec![],
        master_seed: seed,
        record_grad_norms: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn simulation_is_deterministic(seed in 0u64..10_000, n in 2usize..=5, b in 1usize..=3) {
        let strategy = if seed % 2 == 0 { AggStrategy::FedStaleWeight } else { AggStrategy::FedAvg };
        let a = run_simulation(&tiny_sim(seed, n, b, strategy)).unwrap();
        let c = run_simulation(&tiny_sim(seed, n, b, strategy)).unwrap();
        let mut csv_a = Vec::new();
        let mut csv_c = Vec::new();
        a.write_csv(&mut csv_a).unwrap();
        c.write_csv(&mut csv_c).unwrap();
        prop_assert_eq!(csv_a, csv_c);
        prop_assert_eq!(a.final_params.values(), c.final_params.values());

        // Staleness bookkeeping invariants over the whole log.
        for row in &a.rows {
            prop_assert_eq!(row.weights_applied.len(), b);
            let sum: f64 = row.weights_applied.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
        }
        prop_assert_eq!(a.total_pushes, 15 * b as u64);
        prop_assert!(a.in_flight_at_end <= n as u64);
    }
}

#[test]
fn param_vector_axpy_matches_manual_loop() {
    let mut a = ParamVector::from_vec(vec![1.0, 2.0]);
    a.axpy(0.5, &ParamVector::from_vec(vec![4.0, -2.0])).unwrap();
    assert_eq!(a.values(), &[3.0, 1.0]);
}

//! Self-check suites behind the `verify` subcommand.
//!
//! Each suite is a batch of randomized or closed-form checks that can run
//! without an experiment file. Suites return per-check results so the CLI
//! can print one line per check and fail with a dedicated exit code.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{alpha_beta, convergence_bound, u_max, BoundInputs};
use crate::engine::{staleness_monte_carlo, OracleDelayKind};
use crate::mechanism::{
    expected_staleness, fair_weight, influence, influence_from_staleness, normalized_weights,
    utility_derivative_sign, BufferComposition, DerivativeSign, RateProfile, WeightForm,
};
use crate::model::{loss_and_gradient, Dataset, ParamVector, TaskKind, TaskSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Mechanism,
    StalenessOracle,
    Bound,
    Gradients,
    All,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mechanism" => Ok(Suite::Mechanism),
            "staleness-oracle" => Ok(Suite::StalenessOracle),
            "bound" => Ok(Suite::Bound),
            "gradients" => Ok(Suite::Gradients),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!(
                "unknown suite {other:?} (expected mechanism, staleness-oracle, bound, gradients, or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(results: &mut Vec<CheckResult>, name: &str, passed: bool, detail: String) {
    results.push(CheckResult { name: name.to_string(), passed, detail });
}

fn random_profile(rng: &mut ChaCha8Rng, n: usize) -> RateProfile {
    let rates: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..50.0)).collect();
    RateProfile::new(rates).unwrap()
}

fn random_composition(rng: &mut ChaCha8Rng, n: usize, b: usize) -> BufferComposition {
    let indices: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
    BufferComposition::new(indices, n).unwrap()
}

/// Identity and invariance checks over random rate profiles, plus a
/// finite-difference audit of the utility derivative sign.
pub fn mechanism_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    let mut max_identity_err = 0.0f64;
    let mut max_influence_sum_err = 0.0f64;
    let mut max_rescale_err = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=20);
        let b = [1usize, 2, 5][rng.gen_range(0..3)];
        let profile = random_profile(&mut rng, n);

        let mut influence_sum = 0.0;
        for i in 0..n {
            let tau = expected_staleness(&profile, i, b)?;
            let identity = fair_weight(tau, b, n)? * influence_from_staleness(tau, b)?;
            max_identity_err = max_identity_err.max((identity - 1.0 / n as f64).abs());
            influence_sum += influence(&profile, i)?;
        }
        max_influence_sum_err = max_influence_sum_err.max((influence_sum - 1.0).abs());

        // Influence and the normalized buffer weights only depend on rate
        // ratios, so a global rescale must leave both unchanged.
        let c = rng.gen_range(0.5..10.0);
        let scaled = RateProfile::new(profile.rates().iter().map(|r| r * c).collect())?;
        let comp = random_composition(&mut rng, n, b);
        let taus = |p: &RateProfile| -> Result<Vec<f64>> {
            comp.agent_indices().iter().map(|&a| expected_staleness(p, a, b)).collect()
        };
        let w1 = normalized_weights(&taus(&profile)?, b, n, WeightForm::Eq8)?;
        let w2 = normalized_weights(&taus(&scaled)?, b, n, WeightForm::Eq8)?;
        for (a, bb) in w1.weights().iter().zip(w2.weights()) {
            max_rescale_err = max_rescale_err.max((a - bb).abs());
        }
        for i in 0..n {
            max_rescale_err =
                max_rescale_err.max((influence(&profile, i)? - influence(&scaled, i)?).abs());
        }
    }
    check(
        &mut results,
        "fair_weight_times_influence_is_uniform",
        max_identity_err <= 1e-12,
        format!("max |w*p - 1/n| = {max_identity_err:.3e} over 1000 profiles"),
    );
    check(
        &mut results,
        "influences_sum_to_one",
        max_influence_sum_err <= 1e-12,
        format!("max |sum p_i - 1| = {max_influence_sum_err:.3e}"),
    );
    check(
        &mut results,
        "rate_rescaling_invariance",
        max_rescale_err <= 1e-12,
        format!("max deviation under global rate rescale = {max_rescale_err:.3e}"),
    );

    // The closed-form derivative sign must agree with a central finite
    // difference of the utility whenever the difference is resolvable.
    let mut sign_mismatches = 0usize;
    let mut sign_checked = 0usize;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=12);
        let b = rng.gen_range(1..=5.min(n));
        let profile = random_profile(&mut rng, n);
        let i = rng.gen_range(0..n);
        let mut indices = random_composition(&mut rng, n, b).agent_indices().to_vec();
        // Exactly one slot for agent i: required by the single-slot utility.
        indices.retain(|&a| a != i);
        indices.truncate(b - 1);
        indices.push(i);
        while indices.len() < b {
            let mut a = rng.gen_range(0..n);
            while a == i {
                a = rng.gen_range(0..n);
            }
            indices.push(a);
        }
        let comp = BufferComposition::new(indices, n)?;
        let r = profile.rate(i)?;
        let h = 1e-6 * r;
        let u_plus = crate::mechanism::agent_utility(&profile.with_rate(i, r + h)?, &comp, i)?;
        let u_minus = crate::mechanism::agent_utility(&profile.with_rate(i, r - h)?, &comp, i)?;
        let fd = (u_plus - u_minus) / (2.0 * h);
        if fd.abs() <= 1e-9 {
            continue;
        }
        sign_checked += 1;
        let expected = if fd > 0.0 { DerivativeSign::Positive } else { DerivativeSign::Negative };
        if utility_derivative_sign(&profile, &comp, i)? != expected {
            sign_mismatches += 1;
        }
    }
    check(
        &mut results,
        "utility_derivative_sign_matches_finite_difference",
        sign_mismatches == 0 && sign_checked > 500,
        format!("{sign_mismatches} mismatches over {sign_checked} resolvable instances"),
    );
    Ok(results)
}

/// Monte-Carlo staleness means versus the closed-form expectation over a
/// spread of rate profiles and buffer sizes.
pub fn staleness_oracle_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut worst_rel = 0.0f64;
    let mut worst_case = String::from("none");
    for trial in 0..15u64 {
        let n = rng.gen_range(2..=20);
        let b = [1usize, 2, 5][rng.gen_range(0..3)];
        // Rate spread capped so the slowest agent still accrues enough
        // observations for the empirical mean to settle.
        let profile =
            RateProfile::new((0..n).map(|_| rng.gen_range(0.5..5.0)).collect::<Vec<_>>())?;
        let means =
            staleness_monte_carlo(&profile, b, OracleDelayKind::Constant, 20_000, seed ^ trial)?;
        for (i, &mc) in means.iter().enumerate() {
            let closed = expected_staleness(&profile, i, b)?;
            let rel = (mc - closed).abs() / closed.max(0.5);
            if rel > worst_rel {
                worst_rel = rel;
                worst_case = format!(
                    "trial {trial} agent {i} (n={n}, b={b}): mc={mc:.4}, closed={closed:.4}"
                );
            }
        }
    }
    check(
        &mut results,
        "monte_carlo_staleness_matches_closed_form",
        worst_rel <= 0.15,
        format!("worst relative error {worst_rel:.4} at {worst_case}"),
    );
    Ok(results)
}

/// Exact values and scaling behavior of the convergence bound.
pub fn bound_suite() -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();

    let (alpha, beta) = alpha_beta(&[0.1, 0.2])?;
    check(
        &mut results,
        "alpha_beta_sums",
        (alpha - 0.3).abs() <= 1e-15 && (beta - 0.05).abs() <= 1e-15,
        format!("alpha={alpha}, beta={beta}"),
    );

    let u = u_max(2, 1.0);
    check(&mut results, "u_max_example", (u - 1.0 / 16.0).abs() <= 1e-15, format!("u_max(2,1)={u}"));

    let inputs = BoundInputs {
        f0_minus_fstar: 1.0,
        l_smooth: 1.0,
        sigma_l2: 0.0,
        sigma_g2: 0.0,
        g_bound: 1.0,
        q: 1,
        local_lrs: vec![0.1],
        eta_g: 1.0,
        b: 1,
        tau_max_b: 0.0,
        t_steps: 100,
    };
    let terms = convergence_bound(&inputs)?;
    let ok = (terms.term1 - 0.2).abs() <= 1e-12
        && terms.term2.abs() <= 1e-12
        && (terms.term3 - 0.12).abs() <= 1e-12
        && terms.term4.abs() <= 1e-12
        && (terms.total - 0.32).abs() <= 1e-12;
    check(
        &mut results,
        "bound_worked_example",
        ok,
        format!(
            "terms = [{}, {}, {}, {}], total = {}",
            terms.term1, terms.term2, terms.term3, terms.term4, terms.total
        ),
    );

    let mut longer = inputs.clone();
    longer.t_steps = 1000;
    let terms_long = convergence_bound(&longer)?;
    check(
        &mut results,
        "term1_decays_as_one_over_t",
        (terms_long.term1 - terms.term1 / 10.0).abs() <= 1e-12
            && terms_long.term3 == terms.term3,
        format!("term1 at T=100: {}, at T=1000: {}", terms.term1, terms_long.term1),
    );

    let mut stale = inputs.clone();
    stale.b = 2;
    stale.tau_max_b = 3.0;
    let terms_stale = convergence_bound(&stale)?;
    check(
        &mut results,
        "staleness_terms_activate",
        terms_stale.term2 > 0.0 && terms_stale.term4 > 0.0 && terms_stale.total > terms.total,
        format!("total at tau=0: {}, at tau=3: {}", terms.total, terms_stale.total),
    );
    Ok(results)
}

fn random_task(rng: &mut ChaCha8Rng, kind: TaskKind) -> TaskSpec {
    TaskSpec {
        kind,
        feature_dim: rng.gen_range(2..=6),
        num_classes: if kind == TaskKind::Quadratic { 1 } else { rng.gen_range(2..=5) },
        hidden_dim: if kind == TaskKind::MlpOneHidden { rng.gen_range(2..=5) } else { 0 },
        l2_coefficient: if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.001..0.1) },
    }
}

fn random_dataset(rng: &mut ChaCha8Rng, task: &TaskSpec) -> Dataset {
    let rows = rng.gen_range(3..=10);
    let d = task.feature_dim;
    let features: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..task.num_classes)).collect();
    Dataset::new(features, labels, d).unwrap()
}

/// Analytic gradients versus central finite differences for every task
/// kind, random parameters, and random data.
pub fn gradients_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for kind in [TaskKind::SoftmaxLinear, TaskKind::MlpOneHidden, TaskKind::Quadratic] {
        let mut worst_rel = 0.0f64;
        for _ in 0..100 {
            let task = random_task(&mut rng, kind);
            let data = random_dataset(&mut rng, &task);
            let params = ParamVector::from_vec(
                (0..task.param_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let (_, grad) = loss_and_gradient(&task, &params, &data)?;
            let h = 1e-6;
            for m in 0..params.dim() {
                let mut plus = params.clone();
                plus[m] += h;
                let mut minus = params.clone();
                minus[m] -= h;
                let fd = (loss_and_gradient(&task, &plus, &data)?.0
                    - loss_and_gradient(&task, &minus, &data)?.0)
                    / (2.0 * h);
                let rel = (grad[m] - fd).abs() / grad[m].abs().max(fd.abs()).max(1e-3);
                worst_rel = worst_rel.max(rel);
            }
        }
        check(
            &mut results,
            &format!("gradient_matches_finite_difference_{kind:?}"),
            worst_rel <= 1e-4,
            format!("worst relative error {worst_rel:.3e} over 100 draws"),
        );
    }
    Ok(results)
}

/// Runs the requested suite (or all of them) and returns every check.
pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    match suite {
        Suite::Mechanism => results.extend(mechanism_suite(seed)?),
        Suite::StalenessOracle => results.extend(staleness_oracle_suite(seed)?),
        Suite::Bound => results.extend(bound_suite()?),
        Suite::Gradients => results.extend(gradients_suite(seed)?),
        Suite::All => {
            results.extend(mechanism_suite(seed)?);
            results.extend(staleness_oracle_suite(seed)?);
            results.extend(bound_suite()?);
            results.extend(gradients_suite(seed)?);
        }
    }
    Ok(results)
}

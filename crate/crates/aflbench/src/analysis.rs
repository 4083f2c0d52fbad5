//! Convergence-bound calculator and post-run metrics.
//!
//! Computes the ergodic convergence bound for the staleness-weighted
//! aggregation (four additive terms), the maximum squared deviation
//! between uniform and normalized fair weights, and fairness metrics
//! over a finished run's holdout evaluations.

use serde::{Deserialize, Serialize};

use crate::engine::{GradRecord, MetricsRow};
use crate::mechanism::normalized_weight_bounds;
use crate::model::{predict_class, Dataset, ParamVector, TaskSpec};
use crate::{Error, Result};

/// Constants feeding the convergence bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// `f(w^0) - f(w^*)`.
    pub f0_minus_fstar: f64,
    /// Gradient Lipschitz constant.
    pub l_smooth: f64,
    /// Local (minibatch) gradient variance bound.
    pub sigma_l2: f64,
    /// Client-to-global gradient variance bound.
    pub sigma_g2: f64,
    /// Squared client gradient norm bound.
    pub g_bound: f64,
    pub q: usize,
    /// Per-step local learning rates, length `q`.
    pub local_lrs: Vec<f64>,
    pub eta_g: f64,
    pub b: usize,
    pub tau_max_b: f64,
    pub t_steps: u64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.f0_minus_fstar < 0.0
            || !(self.l_smooth > 0.0)
            || self.sigma_l2 < 0.0
            || self.sigma_g2 < 0.0
            || self.g_bound < 0.0
            || self.tau_max_b < 0.0
        {
            return Err(Error::InvalidInput("negative or degenerate bound constant".into()));
        }
        if self.q == 0 || self.b == 0 || self.t_steps == 0 || !(self.eta_g > 0.0) {
            return Err(Error::InvalidInput("q, b, t_steps must be >= 1 and eta_g > 0".into()));
        }
        if self.local_lrs.len() != self.q || self.local_lrs.iter().any(|lr| !(*lr > 0.0)) {
            return Err(Error::InvalidInput("local_lrs must have length q with positive entries".into()));
        }
        Ok(())
    }

    /// Whether `eta_g * eta_l^(q) * Q <= 1/L` holds for every local step.
    /// A violation degrades the bound's validity but is reported, not
    /// rejected.
    pub fn step_size_condition_ok(&self) -> bool {
        self.local_lrs
            .iter()
            .all(|&lr| self.eta_g * lr * self.q as f64 <= 1.0 / self.l_smooth)
    }
}

/// `(sum_q eta_l^(q), sum_q (eta_l^(q))^2)`.
pub fn alpha_beta(local_lrs: &[f64]) -> Result<(f64, f64)> {
    if local_lrs.is_empty() {
        return Err(Error::InvalidInput("local_lrs must be non-empty".into()));
    }
    if local_lrs.iter().any(|lr| !(*lr > 0.0)) {
        return Err(Error::InvalidInput("local learning rates must be positive".into()));
    }
    let alpha = local_lrs.iter().sum();
    let beta = local_lrs.iter().map(|lr| lr * lr).sum();
    Ok((alpha, beta))
}

/// Maximum squared deviation between the uniform weight `1/b` and any
/// achievable normalized fair weight given maximum staleness `tau`.
pub fn u_max(b: usize, tau_max_b: f64) -> f64 {
    let (lower, upper) = normalized_weight_bounds(b, tau_max_b);
    let uniform = 1.0 / b as f64;
    let d_up = uniform - upper;
    let d_lo = uniform - lower;
    (d_up * d_up).max(d_lo * d_lo)
}

/// The four additive terms of the ergodic convergence bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
    pub term4: f64,
    pub total: f64,
    pub step_size_condition_ok: bool,
}

pub fn convergence_bound(inputs: &BoundInputs) -> Result<BoundTerms> {
    inputs.validate()?;
    let (alpha_q, beta_q) = alpha_beta(&inputs.local_lrs)?;
    let tau = inputs.tau_max_b;
    let b = inputs.b as f64;
    let q = inputs.q as f64;
    let l2 = inputs.l_smooth * inputs.l_smooth;
    let noise = inputs.sigma_l2 + inputs.sigma_g2 + inputs.g_bound;
    let staleness_ratio = (b * tau + 1.0) / (tau + 1.0);

    let term1 = 2.0 * inputs.f0_minus_fstar / (inputs.eta_g * alpha_q * inputs.t_steps as f64);
    let term2 = 12.0
        * inputs.eta_g
        * inputs.eta_g
        * tau
        * tau
        * beta_q
        * q
        * l2
        * staleness_ratio
        * staleness_ratio
        * noise;
    let term3 = 12.0 * beta_q * q * l2 * noise;
    let term4 = 4.0 * b * b * u_max(inputs.b, tau) * inputs.g_bound;
    Ok(BoundTerms {
        term1,
        term2,
        term3,
        term4,
        total: term1 + term2 + term3 + term4,
        step_size_condition_ok: inputs.step_size_condition_ok(),
    })
}

/// Ergodic average of the recorded squared global gradient norms,
/// divided by the number of recorded iterates.
pub fn empirical_grad_norm_average(records: &[GradRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no gradient records".into()));
    }
    Ok(records.iter().map(|r| r.global_norm_sq).sum::<f64>() / records.len() as f64)
}

/// `(G, sigma_g^2)` measured as the worst case over the visited iterates.
pub fn measured_gradient_constants(records: &[GradRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no gradient records".into()));
    }
    let g = records.iter().map(|r| r.max_client_norm_sq).fold(0.0, f64::max);
    let sigma_g2 = records.iter().map(|r| r.client_variance).fold(0.0, f64::max);
    Ok((g, sigma_g2))
}

/// Final-model fairness summary over holdout label slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessMetrics {
    pub final_global_acc: f64,
    pub final_fast_acc: f64,
    pub final_slow_acc: f64,
    /// `fast - slow`.
    pub acc_gap: f64,
    pub acc_target: f64,
    /// First version whose global holdout accuracy reached the target;
    /// `None` if never.
    pub agg_rounds_to_target: Option<u64>,
}

fn slice_accuracy(task: &TaskSpec, params: &ParamVector, data: &Dataset, labels: Option<&[usize]>) -> Result<f64> {
    let slice = match labels {
        Some(set) => data.filter_labels(set)?,
        None => data.clone(),
    };
    if slice.is_empty() {
        return Err(Error::InvalidInput("empty holdout slice".into()));
    }
    let correct = slice.iter().filter(|(x, y)| predict_class(task, params, x) == *y).count();
    Ok(correct as f64 / slice.len() as f64)
}

pub fn fairness_metrics(
    task: &TaskSpec,
    final_params: &ParamVector,
    holdout: &Dataset,
    fast_labels: &[usize],
    slow_labels: &[usize],
    rows: &[MetricsRow],
    acc_target: f64,
) -> Result<FairnessMetrics> {
    let final_global_acc = slice_accuracy(task, final_params, holdout, None)?;
    let final_fast_acc = slice_accuracy(task, final_params, holdout, Some(fast_labels))?;
    let final_slow_acc = slice_accuracy(task, final_params, holdout, Some(slow_labels))?;
    let agg_rounds_to_target = rows
        .iter()
        .find(|r| r.global_test_accuracy >= acc_target)
        .map(|r| r.version);
    Ok(FairnessMetrics {
        final_global_acc,
        final_fast_acc,
        final_slow_acc,
        acc_gap: final_fast_acc - final_slow_acc,
        acc_target,
        agg_rounds_to_target,
    })
}

/// Convergence section of the per-run report, present when gradient
/// statistics were recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub inputs: BoundInputs,
    pub bound: BoundTerms,
    pub empirical_average: f64,
    pub within_bound: bool,
}

/// Per-run JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub seed: u64,
    pub fairness: Option<FairnessMetrics>,
    pub convergence: Option<ConvergenceReport>,
    pub max_observed_staleness: u64,
    pub total_pushes: u64,
    pub in_flight_at_end: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_beta_examples() {
        assert_eq!(alpha_beta(&[0.1]).unwrap(), (0.1, 0.010000000000000002));
        let (a, b) = alpha_beta(&[0.1, 0.1]).unwrap();
        assert!((a - 0.2).abs() < 1e-15 && (b - 0.02).abs() < 1e-15);
        let (a, b) = alpha_beta(&[0.2, 0.1, 0.05]).unwrap();
        assert!((a - 0.35).abs() < 1e-15 && (b - 0.0525).abs() < 1e-15);
        assert!(alpha_beta(&[]).is_err());
    }

    #[test]
    fn u_max_examples() {
        assert!((u_max(2, 1.0) - 1.0 / 16.0).abs() < 1e-12);
        for b in 1..6 {
            assert_eq!(u_max(b, 0.0), 0.0);
        }
        for tau in [0.0, 0.5, 3.0, 100.0] {
            assert_eq!(u_max(1, tau), 0.0);
        }
    }

    #[test]
    fn u_max_monotone_in_tau() {
        for b in 2..6 {
            let mut prev = -1.0;
            for k in 0..200 {
                let tau = k as f64 * 0.1;
                let u = u_max(b, tau);
                assert!(u >= prev, "b={b} tau={tau}");
                prev = u;
            }
        }
    }

    fn base_inputs() -> BoundInputs {
        BoundInputs {
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
        }
    }

    #[test]
    fn convergence_bound_worked_example() {
        let terms = convergence_bound(&base_inputs()).unwrap();
        assert!((terms.term1 - 0.2).abs() < 1e-12);
        assert_eq!(terms.term2, 0.0);
        assert!((terms.term3 - 0.12).abs() < 1e-12);
        assert_eq!(terms.term4, 0.0);
        assert!((terms.total - 0.32).abs() < 1e-12);
        assert!(terms.step_size_condition_ok);
    }

    #[test]
    fn term1_scales_inversely_with_t() {
        let mut inputs = base_inputs();
        let a = convergence_bound(&inputs).unwrap();
        inputs.t_steps = 1000;
        let b = convergence_bound(&inputs).unwrap();
        assert!((a.term1 / b.term1 - 10.0).abs() < 1e-9);
        assert_eq!(a.term2, b.term2);
        assert_eq!(a.term3, b.term3);
        assert_eq!(a.term4, b.term4);
    }

    #[test]
    fn zero_staleness_kills_terms_two_and_four() {
        let mut inputs = base_inputs();
        inputs.b = 4;
        inputs.tau_max_b = 0.0;
        let terms = convergence_bound(&inputs).unwrap();
        assert_eq!(terms.term2, 0.0);
        assert_eq!(terms.term4, 0.0);
    }

    #[test]
    fn bound_monotone_in_noise_and_staleness() {
        let mut inputs = base_inputs();
        inputs.b = 3;
        inputs.tau_max_b = 1.0;
        let base = convergence_bound(&inputs).unwrap().total;
        for field in 0..4 {
            let mut bumped = inputs.clone();
            match field {
                0 => bumped.tau_max_b += 0.5,
                1 => bumped.sigma_l2 += 0.5,
                2 => bumped.sigma_g2 += 0.5,
                _ => bumped.g_bound += 0.5,
            }
            assert!(convergence_bound(&bumped).unwrap().total >= base);
        }
    }

    #[test]
    fn step_size_condition_flagged_not_rejected() {
        let mut inputs = base_inputs();
        inputs.local_lrs = vec![2.0];
        let terms = convergence_bound(&inputs).unwrap();
        assert!(!terms.step_size_condition_ok);
    }

    #[test]
    fn empirical_average() {
        let rec = |g: f64| GradRecord { global_norm_sq: g, max_client_norm_sq: g, client_variance: 0.0 };
        assert_eq!(empirical_grad_norm_average(&[rec(0.0), rec(0.0)]).unwrap(), 0.0);
        assert_eq!(empirical_grad_norm_average(&[rec(1.0), rec(3.0)]).unwrap(), 2.0);
        assert!(empirical_grad_norm_average(&[]).is_err());
    }
}

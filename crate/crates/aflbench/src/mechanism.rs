//! Staleness-based fair weighting mechanism.
//!
//! Pure algebra over reported update rates: per-agent influence, expected
//! staleness, the fair re-weighting that equalizes weighted influence at
//! `1/n`, per-buffer normalization, and the numeric strategy-proofness
//! harness. Everything here is stateless and safe to call concurrently.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Reported (or true) mean update rates for `n` agents, in updates per
/// unit of virtual time. Rates must be strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct RateProfile {
    rates: Vec<f64>,
}

impl RateProfile {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::InvalidInput("rate profile must be non-empty".into()));
        }
        if let Some(r) = rates.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "rates must be strictly positive and finite, got {r}"
            )));
        }
        Ok(Self { rates })
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn rate(&self, i: usize) -> Result<f64> {
        self.rates
            .get(i)
            .copied()
            .ok_or_else(|| Error::IndexOutOfRange { index: i, len: self.rates.len() })
    }

    /// Same profile with agent `i`'s rate replaced by `rate`.
    pub fn with_rate(&self, i: usize, rate: f64) -> Result<Self> {
        self.rate(i)?;
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::InvalidInput(format!("replacement rate must be positive, got {rate}")));
        }
        let mut rates = self.rates.clone();
        rates[i] = rate;
        Ok(Self { rates })
    }

    fn total(&self) -> f64 {
        self.rates.iter().sum()
    }
}

/// Which agent occupies each of the `b` buffer slots. Repeats allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferComposition {
    agent_indices: Vec<usize>,
}

impl BufferComposition {
    pub fn new(agent_indices: Vec<usize>, n: usize) -> Result<Self> {
        if agent_indices.is_empty() {
            return Err(Error::InvalidInput("buffer composition must be non-empty".into()));
        }
        if let Some(&i) = agent_indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        Ok(Self { agent_indices })
    }

    pub fn len(&self) -> usize {
        self.agent_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn agent_indices(&self) -> &[usize] {
        &self.agent_indices
    }
}

/// Normalized per-buffer weights; sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
}

impl WeightVector {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.weights
    }
}

/// Unnormalized weight formula. `Eq8` is `(E[tau]*b + 1)/n`, consistent
/// with the staleness-to-influence derivation and the normalized-weight
/// bounds; `Alg1` is the `(E[tau] + 1)/n` variant that drops the buffer
/// factor. `Eq8` is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightForm {
    #[default]
    Eq8,
    Alg1,
}

impl WeightForm {
    /// Unnormalized weight of a buffer slot with expected staleness `tau`.
    pub fn unnormalized(self, exp_staleness: f64, b: usize, n: usize) -> f64 {
        match self {
            WeightForm::Eq8 => (exp_staleness * b as f64 + 1.0) / n as f64,
            WeightForm::Alg1 => (exp_staleness + 1.0) / n as f64,
        }
    }
}

/// Sign of the utility derivative with respect to the reported rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeSign {
    Negative,
    Zero,
    Positive,
}

/// Outcome of the grid search for a profitable rate under-report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThrottleReport {
    /// Grid rate maximizing the deviator's utility.
    pub best_rate: f64,
    /// Utility of the best grid rate minus utility at the true rate.
    /// Strategy-proof when this is <= 1e-9.
    pub max_utility_gain: f64,
    pub truthful_utility: f64,
    pub best_utility: f64,
}

impl ThrottleReport {
    pub fn is_truthful(&self) -> bool {
        self.max_utility_gain <= 1e-9
    }
}

/// Expected fraction of aggregated updates contributed by agent `i`
/// absent any re-weighting: `r_i / sum_j r_j`.
pub fn influence(profile: &RateProfile, i: usize) -> Result<f64> {
    Ok(profile.rate(i)? / profile.total())
}

/// Expected staleness of agent `i`'s updates in a buffer of size `b`:
/// `(sum_j r_j / r_i - 1) / b`.
pub fn expected_staleness(profile: &RateProfile, i: usize, b: usize) -> Result<f64> {
    if b == 0 {
        return Err(Error::InvalidInput("buffer size must be >= 1".into()));
    }
    let r_i = profile.rate(i)?;
    Ok((profile.total() / r_i - 1.0) / b as f64)
}

/// Influence recovered from expected staleness: `1 / (E[tau]*b + 1)`.
/// Composes with [`expected_staleness`] to reproduce [`influence`].
pub fn influence_from_staleness(exp_staleness: f64, b: usize) -> Result<f64> {
    if exp_staleness < 0.0 {
        return Err(Error::InvalidInput(format!("staleness must be >= 0, got {exp_staleness}")));
    }
    if b == 0 {
        return Err(Error::InvalidInput("buffer size must be >= 1".into()));
    }
    Ok(1.0 / (exp_staleness * b as f64 + 1.0))
}

/// Fair weight `(E[tau]*b + 1)/n`, the unique multiplier making the
/// weighted influence equal to `1/n` for every agent. At zero staleness
/// this is exactly the synchronous-FedAvg equal weighting.
pub fn fair_weight(exp_staleness: f64, b: usize, n: usize) -> Result<f64> {
    if exp_staleness < 0.0 {
        return Err(Error::InvalidInput(format!("staleness must be >= 0, got {exp_staleness}")));
    }
    if b == 0 || n == 0 {
        return Err(Error::InvalidInput("buffer size and agent count must be >= 1".into()));
    }
    Ok(WeightForm::Eq8.unnormalized(exp_staleness, b, n))
}

/// Per-buffer normalized weights, proportional to the unnormalized fair
/// weights of the `b` slots. The `1/n` factor cancels under the `Eq8`
/// form; `n` stays in the signature for the `Alg1` variant and parity
/// with the unnormalized formula.
pub fn normalized_weights(
    exp_stalenesses: &[f64],
    b: usize,
    n: usize,
    form: WeightForm,
) -> Result<WeightVector> {
    if exp_stalenesses.is_empty() {
        return Err(Error::InvalidInput("staleness vector must be non-empty".into()));
    }
    if exp_stalenesses.len() != b {
        return Err(Error::InvalidInput(format!(
            "staleness vector length {} != buffer size {b}",
            exp_stalenesses.len()
        )));
    }
    if let Some(t) = exp_stalenesses.iter().find(|t| **t < 0.0 || !t.is_finite()) {
        return Err(Error::InvalidInput(format!("stalenesses must be finite and >= 0, got {t}")));
    }
    let raw: Vec<f64> = exp_stalenesses.iter().map(|&t| form.unnormalized(t, b, n)).collect();
    let total: f64 = raw.iter().sum();
    Ok(WeightVector { weights: raw.into_iter().map(|w| w / total).collect() })
}

/// Slot index of agent `i` in `composition`, requiring exactly one
/// occurrence (the deviation analysis is single-slot).
fn single_slot_of(composition: &BufferComposition, i: usize) -> Result<usize> {
    let mut found = None;
    for (slot, &a) in composition.agent_indices.iter().enumerate() {
        if a == i {
            if found.is_some() {
                return Err(Error::InvalidInput(format!(
                    "agent {i} appears more than once in the buffer composition"
                )));
            }
            found = Some(slot);
        }
    }
    found.ok_or_else(|| Error::InvalidInput(format!("agent {i} absent from the buffer composition")))
}

/// Utility of agent `i` occupying one slot of `composition`: its
/// normalized re-weighting times its proportional update frequency
/// `r_i / sum_j r_j`.
pub fn agent_utility(profile: &RateProfile, composition: &BufferComposition, i: usize) -> Result<f64> {
    let slot = single_slot_of(composition, i)?;
    let b = composition.len();
    let n = profile.len();
    let stalenesses: Vec<f64> = composition
        .agent_indices
        .iter()
        .map(|&a| expected_staleness(profile, a, b))
        .collect::<Result<_>>()?;
    let weights = normalized_weights(&stalenesses, b, n, WeightForm::Eq8)?;
    Ok(weights.weights[slot] * influence(profile, i)?)
}

/// Sign of `d u_i / d r_i` from the closed-form numerator `A - C r_i^2`,
/// where `A` sums the other agents' rates and `C` sums the reciprocal
/// rates of the other buffer slots.
pub fn utility_derivative_sign(
    profile: &RateProfile,
    composition: &BufferComposition,
    i: usize,
) -> Result<DerivativeSign> {
    let slot = single_slot_of(composition, i)?;
    let r_i = profile.rate(i)?;
    let a_sum: f64 = profile
        .rates
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, r)| r)
        .sum();
    let c_sum: f64 = composition
        .agent_indices
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != slot)
        .map(|(_, &a)| 1.0 / profile.rates[a])
        .sum();
    let numerator = a_sum - c_sum * r_i * r_i;
    Ok(if numerator > 0.0 {
        DerivativeSign::Positive
    } else if numerator < 0.0 {
        DerivativeSign::Negative
    } else {
        DerivativeSign::Zero
    })
}

/// Searches a grid of candidate under-reports for agent `i`, holding all
/// other rates fixed, and reports the best candidate and its utility gain
/// over truthful reporting.
pub fn check_no_profitable_throttle(
    profile: &RateProfile,
    composition: &BufferComposition,
    i: usize,
    grid: &[f64],
) -> Result<ThrottleReport> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("candidate rate grid must be non-empty".into()));
    }
    let true_rate = profile.rate(i)?;
    if let Some(&g) = grid.iter().find(|&&g| !(g > 0.0) || g > true_rate) {
        return Err(Error::InvalidInput(format!(
            "grid rates must lie in (0, {true_rate}], got {g}"
        )));
    }
    let truthful_utility = agent_utility(profile, composition, i)?;
    let mut best_rate = true_rate;
    let mut best_utility = truthful_utility;
    for &candidate in grid {
        let deviated = profile.with_rate(i, candidate)?;
        let u = agent_utility(&deviated, composition, i)?;
        if u > best_utility {
            best_utility = u;
            best_rate = candidate;
        }
    }
    Ok(ThrottleReport {
        best_rate,
        max_utility_gain: best_utility - truthful_utility,
        truthful_utility,
        best_utility,
    })
}

/// Bounds on a single normalized weight given the largest expected
/// staleness present in the buffer: `[1/((b-1)(b*tau+1)+1), (b*tau+1)/(b(tau+1))]`.
pub fn normalized_weight_bounds(b: usize, tau_max: f64) -> (f64, f64) {
    let b_f = b as f64;
    let lower = 1.0 / ((b_f - 1.0) * (b_f * tau_max + 1.0) + 1.0);
    let upper = (b_f * tau_max + 1.0) / (b_f * (tau_max + 1.0));
    (lower, upper)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(rates: &[f64]) -> RateProfile {
        RateProfile::new(rates.to_vec()).unwrap()
    }

    #[test]
    fn influence_examples() {
        assert_eq!(influence(&profile(&[1.0, 1.0, 1.0]), 0).unwrap(), 1.0 / 3.0);
        assert_eq!(influence(&profile(&[2.0, 1.0, 1.0]), 0).unwrap(), 0.5);
        assert_eq!(influence(&profile(&[5.0]), 0).unwrap(), 1.0);
    }

    #[test]
    fn influence_rejects_bad_index() {
        assert!(influence(&profile(&[1.0]), 3).is_err());
    }

    #[test]
    fn rate_profile_rejects_nonpositive() {
        assert!(RateProfile::new(vec![1.0, 0.0]).is_err());
        assert!(RateProfile::new(vec![-1.0]).is_err());
        assert!(RateProfile::new(vec![]).is_err());
    }

    #[test]
    fn expected_staleness_examples() {
        assert_eq!(expected_staleness(&profile(&[1.0, 1.0, 1.0]), 0, 1).unwrap(), 2.0);
        assert_eq!(expected_staleness(&profile(&[1.0]), 0, 1).unwrap(), 0.0);
        assert_eq!(expected_staleness(&profile(&[2.0, 1.0]), 1, 1).unwrap(), 2.0);
        assert_eq!(expected_staleness(&profile(&[2.0, 1.0]), 0, 1).unwrap(), 0.5);
        assert!(expected_staleness(&profile(&[1.0]), 0, 0).is_err());
    }

    #[test]
    fn influence_from_staleness_examples() {
        assert_eq!(influence_from_staleness(2.0, 1).unwrap(), 1.0 / 3.0);
        assert_eq!(influence_from_staleness(0.0, 5).unwrap(), 1.0);
        assert!((influence_from_staleness(2.8, 5).unwrap() - 1.0 / 15.0).abs() < 1e-15);
        assert!(influence_from_staleness(-0.1, 1).is_err());
    }

    #[test]
    fn fair_weight_examples() {
        assert!((fair_weight(0.0, 5, 15).unwrap() - 1.0 / 15.0).abs() < 1e-15);
        assert_eq!(fair_weight(2.0, 1, 3).unwrap(), 1.0);
        assert!((fair_weight(2.8, 5, 15).unwrap() - 1.0).abs() < 1e-12);
        assert!(fair_weight(0.0, 5, 0).is_err());
    }

    #[test]
    fn normalized_weights_examples() {
        let w = normalized_weights(&[0.0, 2.0], 2, 3, WeightForm::Eq8).unwrap();
        assert!((w.weights()[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!((w.weights()[1] - 5.0 / 6.0).abs() < 1e-15);

        let w = normalized_weights(&[0.0; 5], 5, 15, WeightForm::Eq8).unwrap();
        for &x in w.weights() {
            assert!((x - 0.2).abs() < 1e-15);
        }
        let w = normalized_weights(&[2.8; 5], 5, 15, WeightForm::Eq8).unwrap();
        for &x in w.weights() {
            assert!((x - 0.2).abs() < 1e-12);
        }
        assert!(normalized_weights(&[], 0, 3, WeightForm::Eq8).is_err());
    }

    #[test]
    fn normalized_weights_within_appendix_bounds() {
        let stalenesses = [0.0, 2.0];
        let w = normalized_weights(&stalenesses, 2, 3, WeightForm::Eq8).unwrap();
        let (lo, hi) = normalized_weight_bounds(2, 2.0);
        for &x in w.weights() {
            assert!(x >= lo - 1e-12 && x <= hi + 1e-12, "{x} outside [{lo}, {hi}]");
        }
        // This instance touches both bounds.
        assert!((w.weights()[0] - lo).abs() < 1e-15);
        assert!((w.weights()[1] - hi).abs() < 1e-15);
    }

    #[test]
    fn agent_utility_examples() {
        let comp2 = BufferComposition::new(vec![0, 1], 2).unwrap();
        assert!((agent_utility(&profile(&[1.0, 1.0]), &comp2, 0).unwrap() - 0.25).abs() < 1e-15);

        let comp1 = BufferComposition::new(vec![0], 1).unwrap();
        assert_eq!(agent_utility(&profile(&[1.0]), &comp1, 0).unwrap(), 1.0);

        let comp3 = BufferComposition::new(vec![0, 1, 2], 3).unwrap();
        assert!((agent_utility(&profile(&[1.0, 1.0, 1.0]), &comp3, 0).unwrap() - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn agent_utility_requires_single_occurrence() {
        let comp = BufferComposition::new(vec![0, 0], 2).unwrap();
        assert!(agent_utility(&profile(&[1.0, 1.0]), &comp, 0).is_err());
        let comp = BufferComposition::new(vec![1, 1], 2).unwrap();
        assert!(agent_utility(&profile(&[1.0, 1.0]), &comp, 0).is_err());
    }

    #[test]
    fn derivative_sign_examples() {
        let comp2 = BufferComposition::new(vec![0, 1], 2).unwrap();
        assert_eq!(
            utility_derivative_sign(&profile(&[1.0, 1.0]), &comp2, 0).unwrap(),
            DerivativeSign::Zero
        );

        let mut rates = vec![10.0; 15];
        rates[0] = 1.0;
        let comp5 = BufferComposition::new(vec![0, 1, 2, 3, 4], 15).unwrap();
        assert_eq!(
            utility_derivative_sign(&RateProfile::new(rates).unwrap(), &comp5, 0).unwrap(),
            DerivativeSign::Positive
        );

        assert_eq!(
            utility_derivative_sign(&profile(&[100.0, 1.0]), &comp2, 0).unwrap(),
            DerivativeSign::Negative
        );
    }

    #[test]
    fn throttle_truthful_in_large_n_regime() {
        let mut rates = vec![10.0; 15];
        rates[0] = 1.0;
        let prof = RateProfile::new(rates).unwrap();
        let comp = BufferComposition::new(vec![0, 1, 2, 3, 4], 15).unwrap();
        let grid: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
        let report = check_no_profitable_throttle(&prof, &comp, 0, &grid).unwrap();
        assert_eq!(report.best_rate, 1.0);
        assert!(report.is_truthful());
    }

    #[test]
    fn throttle_profitable_in_small_n_regime() {
        let prof = profile(&[100.0, 1.0]);
        let comp = BufferComposition::new(vec![0, 1], 2).unwrap();
        let grid: Vec<f64> = (1..=20).map(|k| k as f64 * 5.0).collect();
        let report = check_no_profitable_throttle(&prof, &comp, 0, &grid).unwrap();
        assert!(report.best_rate < 100.0);
        assert!(report.max_utility_gain > 1e-9);
    }

    #[test]
    fn throttle_rejects_bad_grid() {
        let prof = profile(&[1.0, 1.0]);
        let comp = BufferComposition::new(vec![0, 1], 2).unwrap();
        assert!(check_no_profitable_throttle(&prof, &comp, 0, &[]).is_err());
        assert!(check_no_profitable_throttle(&prof, &comp, 0, &[2.0]).is_err());
    }

    // The pre-normalization weighting keeps weighted influence constant in
    // the reported rate, so any under-report is utility-neutral there.
    #[test]
    fn isolated_weighting_is_report_invariant() {
        let base = profile(&[1.0, 1.0, 1.0]);
        let n = base.len();
        let b = 1;
        for candidate in [0.1, 0.25, 0.5, 0.75, 1.0] {
            let p = base.with_rate(0, candidate).unwrap();
            let tau = expected_staleness(&p, 0, b).unwrap();
            let weighted = fair_weight(tau, b, n).unwrap() * influence_from_staleness(tau, b).unwrap();
            assert!((weighted - 1.0 / n as f64).abs() < 1e-12);
        }
    }
}

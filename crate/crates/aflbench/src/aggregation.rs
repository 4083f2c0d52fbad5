//! Server-side buffer, staleness tracking, and aggregation strategies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::mechanism::{normalized_weights, WeightForm, WeightVector};
use crate::model::ParamVector;
use crate::{Error, Result};

/// One client update waiting in the buffer.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub delta: ParamVector,
    /// Global model version the client trained from.
    pub base_version: u64,
    pub agent_id: u64,
    pub produced_at: f64,
}

/// Aggregation strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    FedStaleWeight,
    FedAvg,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FedStaleWeight => "fedstaleweight",
            Strategy::FedAvg => "fedavg",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedstaleweight" => Ok(Strategy::FedStaleWeight),
            "fedavg" => Ok(Strategy::FedAvg),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// How per-agent expected staleness is estimated from observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorMode {
    /// Cumulative mean of all observed stalenesses.
    RunningMean,
    /// Exponential moving average with coefficient `beta`.
    Ema { beta: f64 },
}

impl Default for EstimatorMode {
    fn default() -> Self {
        EstimatorMode::RunningMean
    }
}

#[derive(Debug, Clone, Copy)]
struct AgentEstimate {
    count: u64,
    value: f64,
}

/// Per-agent moving estimate of expected staleness. The first observation
/// seeds the estimate directly.
#[derive(Debug, Clone)]
pub struct StalenessTracker {
    mode: EstimatorMode,
    estimates: BTreeMap<u64, AgentEstimate>,
}

impl StalenessTracker {
    pub fn new(mode: EstimatorMode) -> Self {
        Self { mode, estimates: BTreeMap::new() }
    }

    pub fn estimate(&self, agent_id: u64) -> Option<f64> {
        self.estimates.get(&agent_id).map(|e| e.value)
    }

    pub fn observation_count(&self, agent_id: u64) -> u64 {
        self.estimates.get(&agent_id).map_or(0, |e| e.count)
    }

    fn observe(&mut self, agent_id: u64, staleness: f64) {
        let entry = self.estimates.entry(agent_id).or_insert(AgentEstimate { count: 0, value: staleness });
        if entry.count > 0 {
            entry.value = match self.mode {
                EstimatorMode::RunningMean => {
                    (entry.value * entry.count as f64 + staleness) / (entry.count + 1) as f64
                }
                EstimatorMode::Ema { beta } => beta * staleness + (1.0 - beta) * entry.value,
            };
        }
        entry.count += 1;
    }
}

/// Computes `server_version - base_version` and folds the observation into
/// the tracker before any weights for this buffer are computed.
pub fn observe_staleness(
    update: &ClientUpdate,
    server_version: u64,
    tracker: &mut StalenessTracker,
) -> Result<u64> {
    if update.base_version > server_version {
        return Err(Error::Simulation(format!(
            "update from agent {} has base version {} ahead of server version {server_version}",
            update.agent_id, update.base_version
        )));
    }
    let staleness = server_version - update.base_version;
    tracker.observe(update.agent_id, staleness as f64);
    Ok(staleness)
}

/// FIFO update buffer with fixed capacity `b`.
#[derive(Debug, Clone)]
pub struct UpdateBuffer {
    capacity: usize,
    updates: Vec<ClientUpdate>,
}

impl UpdateBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer size must be >= 1".into()));
        }
        Ok(Self { capacity, updates: Vec::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.updates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.updates.len() == self.capacity
    }

    /// Appends in arrival order. A push into a full buffer is an engine
    /// sequencing bug, not a recoverable condition.
    pub fn push(&mut self, update: ClientUpdate) -> Result<()> {
        if self.is_full() {
            return Err(Error::Simulation("push into a full buffer; aggregation must fire first".into()));
        }
        self.updates.push(update);
        Ok(())
    }

    /// Drains the buffer for aggregation.
    pub fn take(&mut self) -> Vec<ClientUpdate> {
        std::mem::take(&mut self.updates)
    }

    pub fn updates(&self) -> &[ClientUpdate] {
        &self.updates
    }
}

/// Result of one aggregation.
#[derive(Debug, Clone)]
pub struct AggregationOutcome {
    pub new_params: ParamVector,
    pub weights_applied: WeightVector,
    pub observed_stalenesses: Vec<u64>,
    pub contributing_agent_ids: Vec<u64>,
    pub version: u64,
}

fn apply_update(
    current: &ParamVector,
    buffer: &[ClientUpdate],
    weights: &WeightVector,
    eta_g: f64,
) -> Result<ParamVector> {
    let mut new_params = current.clone();
    for (update, &w) in buffer.iter().zip(weights.weights()) {
        new_params.axpy(eta_g * w, &update.delta)?;
    }
    Ok(new_params)
}

/// Staleness-weighted aggregation: observes each update's staleness,
/// refreshes the tracker, weights the buffer by the normalized fair
/// weights of the tracker estimates, and steps the global model.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_fedstaleweight(
    buffer: &[ClientUpdate],
    tracker: &mut StalenessTracker,
    current: &ParamVector,
    eta_g: f64,
    n: usize,
    server_version: u64,
    weight_form: WeightForm,
) -> Result<AggregationOutcome> {
    let b = buffer.len();
    if b == 0 {
        return Err(Error::Simulation("cannot aggregate an empty buffer".into()));
    }
    let mut observed = Vec::with_capacity(b);
    for update in buffer {
        observed.push(observe_staleness(update, server_version, tracker)?);
    }
    let estimates: Vec<f64> = buffer
        .iter()
        .map(|u| tracker.estimate(u.agent_id).expect("observed above"))
        .collect();
    let weights = normalized_weights(&estimates, b, n, weight_form)?;
    Ok(AggregationOutcome {
        new_params: apply_update(current, buffer, &weights, eta_g)?,
        weights_applied: weights,
        observed_stalenesses: observed,
        contributing_agent_ids: buffer.iter().map(|u| u.agent_id).collect(),
        version: server_version + 1,
    })
}

/// Buffered FedAvg baseline: uniform `1/b` weights over the buffer.
pub fn aggregate_fedavg_buffered(
    buffer: &[ClientUpdate],
    tracker: &mut StalenessTracker,
    current: &ParamVector,
    eta_g: f64,
    server_version: u64,
) -> Result<AggregationOutcome> {
    let b = buffer.len();
    if b == 0 {
        return Err(Error::Simulation("cannot aggregate an empty buffer".into()));
    }
    let mut observed = Vec::with_capacity(b);
    for update in buffer {
        observed.push(observe_staleness(update, server_version, tracker)?);
    }
    let weights = normalized_weights(&vec![0.0; b], b, 1, WeightForm::Eq8)?;
    Ok(AggregationOutcome {
        new_params: apply_update(current, buffer, &weights, eta_g)?,
        weights_applied: weights,
        observed_stalenesses: observed,
        contributing_agent_ids: buffer.iter().map(|u| u.agent_id).collect(),
        version: server_version + 1,
    })
}

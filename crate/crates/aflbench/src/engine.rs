//! Deterministic virtual-time simulation of the buffered AFL system.
//!
//! Clients alternate pull / train / report on their own virtual-time
//! schedules; the server aggregates whenever the buffer fills. A single
//! event queue totally ordered by (time, agent id, per-agent sequence)
//! makes runs bitwise reproducible for a given master seed.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate_fedavg_buffered, aggregate_fedstaleweight, ClientUpdate, EstimatorMode,
    StalenessTracker, Strategy, UpdateBuffer,
};
use crate::mechanism::{RateProfile, WeightForm};
use crate::model::{local_train, loss_and_gradient, Dataset, ParamVector, TaskKind, TaskSpec};
use crate::seeding::{self, Stream};
use crate::{Error, Result};

/// Training-delay model, in virtual-time units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayDistribution {
    Uniform { lo: f64, hi: f64 },
    Constant { c: f64 },
    Exponential { mean: f64 },
}

impl DelayDistribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DelayDistribution::Uniform { lo, hi } => lo > 0.0 && hi > lo,
            DelayDistribution::Constant { c } => c > 0.0,
            DelayDistribution::Exponential { mean } => mean > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("delay distribution support must be strictly positive: {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            DelayDistribution::Uniform { lo, hi } => rng.gen_range(lo..hi),
            DelayDistribution::Constant { c } => c,
            DelayDistribution::Exponential { mean } => Exp::new(1.0 / mean).unwrap().sample(rng),
        }
    }
}

/// One simulated client.
#[derive(Debug, Clone)]
pub struct ClientSpec {
    pub agent_id: u64,
    pub delay: DelayDistribution,
    pub shard: Dataset,
    pub q: usize,
    pub eta_l: f64,
    pub batch_size: Option<usize>,
    /// Seed of this client's training-batch rng stream.
    pub rng_seed: u64,
}

/// Fully resolved runtime configuration for one simulation.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub clients: Vec<ClientSpec>,
    pub buffer_size: usize,
    pub strategy: Strategy,
    pub weight_form: WeightForm,
    pub estimator: EstimatorMode,
    pub eta_g: f64,
    pub total_aggregations: u64,
    pub task: TaskSpec,
    /// Held-out evaluation data; may be empty (metrics become NaN).
    pub holdout: Dataset,
    pub fast_labels: Vec<usize>,
    pub slow_labels: Vec<usize>,
    pub master_seed: u64,
    /// Record the exact global gradient norm at every version (the full
    /// gradient over all shards); cheap for the quadratic task.
    pub record_grad_norms: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::Config("at least one client required".into()));
        }
        if self.buffer_size == 0 {
            return Err(Error::Config("buffer_size must be >= 1".into()));
        }
        if self.total_aggregations == 0 {
            return Err(Error::Config("total_aggregations must be >= 1".into()));
        }
        self.task.validate()?;
        for c in &self.clients {
            c.delay.validate()?;
            if c.shard.is_empty() {
                return Err(Error::Config(format!("client {} has an empty shard", c.agent_id)));
            }
            if c.q == 0 || !(c.eta_l > 0.0) {
                return Err(Error::Config(format!("client {}: Q must be >= 1 and eta_l > 0", c.agent_id)));
            }
        }
        Ok(())
    }
}

/// One row per completed aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub version: u64,
    pub virtual_time: f64,
    pub global_test_loss: f64,
    pub global_test_accuracy: f64,
    pub fast_accuracy: f64,
    pub slow_accuracy: f64,
    pub weights_applied: Vec<f64>,
    pub observed_stalenesses: Vec<u64>,
    pub contributing_agent_ids: Vec<u64>,
}

/// Exact gradient statistics at one visited iterate, over the full
/// per-client objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradRecord {
    /// `|grad f(w^t)|^2` with `f` the uniform client average.
    pub global_norm_sq: f64,
    /// `max_i |grad F_i(w^t)|^2`.
    pub max_client_norm_sq: f64,
    /// `(1/n) sum_i |grad F_i(w^t) - grad f(w^t)|^2`.
    pub client_variance: f64,
}

/// Full run record.
#[derive(Debug, Clone)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    /// Gradient statistics for versions 0..=N when `record_grad_norms`
    /// is set; empty otherwise.
    pub grad_records: Vec<GradRecord>,
    pub final_params: ParamVector,
    pub total_pushes: u64,
    pub in_flight_at_end: u64,
    pub max_observed_staleness: u64,
}

impl MetricsLog {
    /// CSV with one row per aggregation; vector cells are
    /// semicolon-joined.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "version,virtual_time,global_test_loss,global_test_accuracy,fast_accuracy,slow_accuracy,weights_applied,observed_stalenesses,contributing_agent_ids"
        )?;
        for r in &self.rows {
            let weights: Vec<String> = r.weights_applied.iter().map(|w| w.to_string()).collect();
            let stale: Vec<String> = r.observed_stalenesses.iter().map(|s| s.to_string()).collect();
            let ids: Vec<String> = r.contributing_agent_ids.iter().map(|a| a.to_string()).collect();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.version,
                r.virtual_time,
                r.global_test_loss,
                r.global_test_accuracy,
                r.fast_accuracy,
                r.slow_accuracy,
                weights.join(";"),
                stale.join(";"),
                ids.join(";")
            )?;
        }
        Ok(())
    }
}

/// Event ordering key: ties at equal virtual time break by agent id,
/// then by the agent's own sequence number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventKey {
    pub time: f64,
    pub agent_id: u64,
    pub seq: u64,
}

impl Eq for EventKey {}

impl Ord for EventKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.agent_id.cmp(&other.agent_id))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for EventKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Sorts simultaneous (or any) events into their processing order.
pub fn tiebreak_order(events: &mut [EventKey]) {
    events.sort();
}

struct ClientState {
    base_version: u64,
    base_params: ParamVector,
    round: u64,
    delay_rng: ChaCha8Rng,
}

fn evaluate_split(task: &TaskSpec, params: &ParamVector, data: &Dataset) -> (f64, f64) {
    if data.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let (loss, _) = loss_and_gradient(task, params, data).expect("holdout evaluation");
    if task.kind == TaskKind::Quadratic {
        return (loss, f64::NAN);
    }
    let correct = data
        .iter()
        .filter(|(x, y)| crate::model::predict_class(task, params, x) == *y)
        .count();
    (loss, correct as f64 / data.len() as f64)
}

fn group_accuracy(task: &TaskSpec, params: &ParamVector, holdout: &Dataset, labels: &[usize]) -> f64 {
    if labels.is_empty() || task.kind == TaskKind::Quadratic {
        return f64::NAN;
    }
    match holdout.filter_labels(labels) {
        Ok(slice) if !slice.is_empty() => evaluate_split(task, params, &slice).1,
        _ => f64::NAN,
    }
}

/// Exact gradient statistics at `params`: `f` is the uniform average of
/// the per-client full-batch objectives.
fn grad_record(task: &TaskSpec, params: &ParamVector, clients: &[ClientSpec]) -> GradRecord {
    let n = clients.len() as f64;
    let grads: Vec<ParamVector> = clients
        .iter()
        .map(|c| loss_and_gradient(task, params, &c.shard).expect("gradient on shard").1)
        .collect();
    let mut mean = ParamVector::zeros(params.dim());
    for g in &grads {
        mean.axpy(1.0 / n, g).unwrap();
    }
    let max_client = grads.iter().map(|g| g.norm_sq()).fold(0.0, f64::max);
    let variance = grads.iter().map(|g| g.sub(&mean).unwrap().norm_sq()).sum::<f64>() / n;
    GradRecord {
        global_norm_sq: mean.norm_sq(),
        max_client_norm_sq: max_client,
        client_variance: variance,
    }
}

/// Runs the event loop to `total_aggregations` completed aggregations.
pub fn run_simulation(config: &SimConfig) -> Result<MetricsLog> {
    config.validate()?;
    let n = config.clients.len();
    let dim = config.task.param_dim();
    let mut params = ParamVector::zeros(dim);
    let mut version: u64 = 0;
    let mut buffer = UpdateBuffer::new(config.buffer_size)?;
    let mut tracker = StalenessTracker::new(config.estimator);
    let mut rows = Vec::with_capacity(config.total_aggregations as usize);
    let mut grad_records = Vec::new();
    let mut total_pushes: u64 = 0;
    let mut max_staleness: u64 = 0;

    if config.record_grad_norms {
        grad_records.push(grad_record(&config.task, &params, &config.clients));
    }

    let mut heap: BinaryHeap<std::cmp::Reverse<EventKey>> = BinaryHeap::new();
    let mut states: Vec<ClientState> = Vec::with_capacity(n);
    for (i, c) in config.clients.iter().enumerate() {
        let mut delay_rng = ChaCha8Rng::seed_from_u64(seeding::derive_stream(
            config.master_seed,
            Stream::ClientDelay(c.agent_id),
        ));
        let first = c.delay.sample(&mut delay_rng);
        heap.push(std::cmp::Reverse(EventKey { time: first, agent_id: c.agent_id, seq: 0 }));
        states.push(ClientState {
            base_version: 0,
            base_params: params.clone(),
            round: 0,
            delay_rng,
        });
        debug_assert_eq!(i, states.len() - 1);
    }
    let id_to_index: std::collections::BTreeMap<u64, usize> =
        config.clients.iter().enumerate().map(|(i, c)| (c.agent_id, i)).collect();
    if id_to_index.len() != n {
        return Err(Error::Config("duplicate agent ids".into()));
    }

    while let Some(std::cmp::Reverse(event)) = heap.pop() {
        let idx = id_to_index[&event.agent_id];
        let client = &config.clients[idx];
        let state = &mut states[idx];

        let delta = local_train(
            &config.task,
            &state.base_params,
            &client.shard,
            client.q,
            client.eta_l,
            client.batch_size,
            seeding::derive_round(client.rng_seed, state.round),
        )?;
        if !delta.is_finite() {
            return Err(Error::Simulation(format!(
                "non-finite delta from agent {} at t={} (version {version})",
                event.agent_id, event.time
            )));
        }
        buffer.push(ClientUpdate {
            delta,
            base_version: state.base_version,
            agent_id: event.agent_id,
            produced_at: event.time,
        })?;
        total_pushes += 1;

        if buffer.is_full() {
            let updates = buffer.take();
            let outcome = match config.strategy {
                Strategy::FedStaleWeight => aggregate_fedstaleweight(
                    &updates,
                    &mut tracker,
                    &params,
                    config.eta_g,
                    n,
                    version,
                    config.weight_form,
                )?,
                Strategy::FedAvg => {
                    aggregate_fedavg_buffered(&updates, &mut tracker, &params, config.eta_g, version)?
                }
            };
            if !outcome.new_params.is_finite() {
                return Err(Error::Simulation(format!(
                    "non-finite parameters after aggregation {} at t={}",
                    outcome.version, event.time
                )));
            }
            params = outcome.new_params;
            version = outcome.version;
            max_staleness = max_staleness.max(outcome.observed_stalenesses.iter().copied().max().unwrap_or(0));

            let (loss, acc) = evaluate_split(&config.task, &params, &config.holdout);
            rows.push(MetricsRow {
                version,
                virtual_time: event.time,
                global_test_loss: loss,
                global_test_accuracy: acc,
                fast_accuracy: group_accuracy(&config.task, &params, &config.holdout, &config.fast_labels),
                slow_accuracy: group_accuracy(&config.task, &params, &config.holdout, &config.slow_labels),
                weights_applied: outcome.weights_applied.weights().to_vec(),
                observed_stalenesses: outcome.observed_stalenesses,
                contributing_agent_ids: outcome.contributing_agent_ids,
            });
            if config.record_grad_norms {
                grad_records.push(grad_record(&config.task, &params, &config.clients));
            }
            if version >= config.total_aggregations {
                break;
            }
        }

        // Back-to-back loop: pull the (possibly just aggregated) latest
        // model immediately and schedule the next report.
        state.base_version = version;
        state.base_params = params.clone();
        state.round += 1;
        let delay = client.delay.sample(&mut state.delay_rng);
        heap.push(std::cmp::Reverse(EventKey {
            time: event.time + delay,
            agent_id: event.agent_id,
            seq: state.round,
        }));
    }

    Ok(MetricsLog {
        rows,
        grad_records,
        final_params: params,
        total_pushes,
        in_flight_at_end: heap.len() as u64,
        max_observed_staleness: max_staleness,
    })
}

/// Delay model for the Monte-Carlo staleness oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleDelayKind {
    /// Deterministic inter-update interval `1/r`.
    Constant,
    /// Exponential inter-update interval with mean `1/r`.
    Exponential,
}

/// Empirical mean staleness per agent from the bare event loop (no-op
/// training), mapping each rate to a mean inter-update interval `1/r`.
pub fn staleness_monte_carlo(
    profile: &RateProfile,
    b: usize,
    delay_kind: OracleDelayKind,
    num_aggregations: u64,
    seed: u64,
) -> Result<Vec<f64>> {
    if b == 0 || num_aggregations == 0 {
        return Err(Error::InvalidInput("buffer size and aggregation count must be >= 1".into()));
    }
    let n = profile.len();
    let mut heap: BinaryHeap<std::cmp::Reverse<EventKey>> = BinaryHeap::new();
    let mut rngs: Vec<ChaCha8Rng> = Vec::with_capacity(n);
    let mut base_versions = vec![0u64; n];
    let mut seqs = vec![0u64; n];
    for i in 0..n {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeding::derive_stream(seed, Stream::ClientDelay(i as u64)));
        let mean = 1.0 / profile.rates()[i];
        let first = match delay_kind {
            OracleDelayKind::Constant => mean,
            OracleDelayKind::Exponential => Exp::new(profile.rates()[i]).unwrap().sample(&mut rng),
        };
        heap.push(std::cmp::Reverse(EventKey { time: first, agent_id: i as u64, seq: 0 }));
        rngs.push(rng);
    }

    let mut version: u64 = 0;
    let mut in_buffer: u64 = 0;
    let mut sums = vec![0.0f64; n];
    let mut counts = vec![0u64; n];
    while let Some(std::cmp::Reverse(event)) = heap.pop() {
        let i = event.agent_id as usize;
        sums[i] += (version - base_versions[i]) as f64;
        counts[i] += 1;
        in_buffer += 1;
        if in_buffer == b as u64 {
            in_buffer = 0;
            version += 1;
            if version >= num_aggregations {
                break;
            }
        }
        base_versions[i] = version;
        seqs[i] += 1;
        let delay = match delay_kind {
            OracleDelayKind::Constant => 1.0 / profile.rates()[i],
            OracleDelayKind::Exponential => Exp::new(profile.rates()[i]).unwrap().sample(&mut rngs[i]),
        };
        heap.push(std::cmp::Reverse(EventKey {
            time: event.time + delay,
            agent_id: event.agent_id,
            seq: seqs[i],
        }));
    }

    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect())
}

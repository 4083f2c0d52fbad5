//! Experiment files and run orchestration.
//!
//! An experiment file is a JSON document describing one simulation:
//! task, synthetic data, fast/slow groups, training hyperparameters, and
//! server settings. Unknown keys are rejected, and a `schema_version`
//! mismatch is an error. All randomness derives from a single seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::{EstimatorMode, Strategy};
use crate::analysis::{
    self, BoundInputs, ConvergenceReport, FairnessMetrics, RunReport,
};
use crate::engine::{run_simulation, ClientSpec, DelayDistribution, MetricsLog, SimConfig};
use crate::mechanism::WeightForm;
use crate::model::{
    generate_synthetic_classification, loss_and_gradient, partition_noniid, ParamVector,
    PartitionSpec, TaskKind, TaskSpec,
};
use crate::seeding::{derive_stream, Stream};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV_VAR: &str = "AFLBENCH_SEED";
pub const DEFAULT_ACC_TARGET: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub examples_per_class: usize,
    pub class_separation: f64,
}

/// One client group: `count` agents sharing a delay model and an
/// exclusive label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub count: usize,
    pub labels: Vec<usize>,
    pub delay: DelayDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub q: usize,
    pub eta_l: f64,
    /// `None` means full-batch gradients.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSpec {
    pub buffer_size: usize,
    pub strategy: Strategy,
    pub eta_g: f64,
    pub total_aggregations: u64,
    #[serde(default)]
    pub weight_form: WeightForm,
    #[serde(default)]
    pub estimator: EstimatorMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub schema_version: u32,
    /// Default seed; overridden by `--seed` or the env fallback.
    #[serde(default)]
    pub seed: Option<u64>,
    pub task: TaskSpec,
    pub data: DataSpec,
    pub holdout_fraction: f64,
    pub fast: GroupSpec,
    pub slow: GroupSpec,
    pub training: TrainingSpec,
    pub server: ServerSpec,
    /// Record exact gradient statistics at each version. Defaults to on
    /// for the quadratic task, off otherwise.
    #[serde(default)]
    pub record_grad_norms: Option<bool>,
    #[serde(default)]
    pub acc_target: Option<f64>,
}

impl ExperimentFile {
    pub fn from_json(json: &str) -> Result<Self> {
        let file: ExperimentFile =
            serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.task.validate()?;
        if self.data.examples_per_class == 0 || !(self.data.class_separation > 0.0) {
            return Err(Error::Config("data: examples_per_class >= 1 and class_separation > 0 required".into()));
        }
        self.partition_spec().validate()?;
        self.fast.delay.validate()?;
        if self.slow.count > 0 {
            self.slow.delay.validate()?;
        }
        if self.training.q == 0 || !(self.training.eta_l > 0.0) {
            return Err(Error::Config("training: q >= 1 and eta_l > 0 required".into()));
        }
        if self.server.buffer_size == 0 || self.server.total_aggregations == 0 {
            return Err(Error::Config("server: buffer_size and total_aggregations must be >= 1".into()));
        }
        Ok(())
    }

    fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            fast_count: self.fast.count,
            slow_count: self.slow.count,
            fast_labels: self.fast.labels.clone(),
            slow_labels: self.slow.labels.clone(),
            holdout_fraction: self.holdout_fraction,
        }
    }

    /// Copy with the seed pinned, suitable for `resolved_config.json`.
    pub fn resolved(&self, seed: u64) -> ExperimentFile {
        let mut resolved = self.clone();
        resolved.seed = Some(seed);
        resolved
    }

    /// Materializes data, partition, and clients into a runtime config.
    pub fn build_sim_config(&self, seed: u64) -> Result<SimConfig> {
        self.validate()?;
        let data = generate_synthetic_classification(
            self.task.num_classes.max(1),
            self.task.feature_dim,
            self.data.examples_per_class,
            self.data.class_separation,
            derive_stream(seed, Stream::DataGen),
        )?;
        let (shards, holdout) =
            partition_noniid(&data, &self.partition_spec(), derive_stream(seed, Stream::Partition))?;

        let mut clients = Vec::with_capacity(shards.len());
        for (i, shard) in shards.into_iter().enumerate() {
            let agent_id = i as u64;
            let delay = if i < self.fast.count { self.fast.delay } else { self.slow.delay };
            clients.push(ClientSpec {
                agent_id,
                delay,
                shard,
                q: self.training.q,
                eta_l: self.training.eta_l,
                batch_size: self.training.batch_size,
                rng_seed: derive_stream(seed, Stream::ClientTrain(agent_id)),
            });
        }

        Ok(SimConfig {
            clients,
            buffer_size: self.server.buffer_size,
            strategy: self.server.strategy,
            weight_form: self.server.weight_form,
            estimator: self.server.estimator,
            eta_g: self.server.eta_g,
            total_aggregations: self.server.total_aggregations,
            task: self.task.clone(),
            holdout,
            fast_labels: self.fast.labels.clone(),
            slow_labels: self.slow.labels.clone(),
            master_seed: seed,
            record_grad_norms: self
                .record_grad_norms
                .unwrap_or(self.task.kind == TaskKind::Quadratic),
        })
    }
}

/// Seed precedence: explicit flag, then the config file, then the
/// `AFLBENCH_SEED` environment variable.
pub fn resolve_seed(flag: Option<u64>, file: &ExperimentFile) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = file.seed {
        return Ok(s);
    }
    if let Ok(v) = std::env::var(SEED_ENV_VAR) {
        return v
            .parse()
            .map_err(|e| Error::Config(format!("{SEED_ENV_VAR} is not a valid seed: {e}")));
    }
    Err(Error::Config(format!(
        "no seed: pass --seed, set `seed` in the config, or set {SEED_ENV_VAR}"
    )))
}

/// Uniform average of the per-client full-batch losses.
fn global_loss(sim: &SimConfig, params: &ParamVector) -> Result<f64> {
    let mut total = 0.0;
    for c in &sim.clients {
        total += loss_and_gradient(&sim.task, params, &c.shard)?.0;
    }
    Ok(total / sim.clients.len() as f64)
}

fn convergence_report(sim: &SimConfig, log: &MetricsLog) -> Result<Option<ConvergenceReport>> {
    if log.grad_records.is_empty() || sim.task.kind != TaskKind::Quadratic {
        return Ok(None);
    }
    // Quadratic curvature is the identity (plus any ridge term), the
    // global optimum is the mean of the per-client optima, and full-batch
    // training has zero local gradient variance.
    let l_smooth = 1.0 + sim.task.l2_coefficient;
    let dim = sim.task.param_dim();
    let mut opt = ParamVector::zeros(dim);
    for c in &sim.clients {
        let mut mean = ParamVector::zeros(dim);
        for (x, _) in c.shard.iter() {
            for (m, &v) in (0..dim).zip(x) {
                mean[m] += v / c.shard.len() as f64;
            }
        }
        opt.axpy(1.0 / sim.clients.len() as f64, &mean)?;
    }
    let f0 = global_loss(sim, &ParamVector::zeros(dim))?;
    let fstar = global_loss(sim, &opt)?;
    let (g_bound, sigma_g2) = analysis::measured_gradient_constants(&log.grad_records)?;
    let inputs = BoundInputs {
        f0_minus_fstar: (f0 - fstar).max(0.0),
        l_smooth,
        sigma_l2: 0.0,
        sigma_g2,
        g_bound,
        q: sim.clients[0].q,
        local_lrs: vec![sim.clients[0].eta_l; sim.clients[0].q],
        eta_g: sim.eta_g,
        b: sim.buffer_size,
        tau_max_b: log.max_observed_staleness as f64,
        t_steps: sim.total_aggregations,
    };
    let bound = analysis::convergence_bound(&inputs)?;
    let empirical_average = analysis::empirical_grad_norm_average(&log.grad_records)?;
    Ok(Some(ConvergenceReport {
        inputs,
        bound,
        empirical_average,
        within_bound: empirical_average <= bound.total,
    }))
}

fn fairness_report(sim: &SimConfig, log: &MetricsLog, acc_target: f64) -> Option<FairnessMetrics> {
    if sim.task.kind == TaskKind::Quadratic || sim.holdout.is_empty() {
        return None;
    }
    analysis::fairness_metrics(
        &sim.task,
        &log.final_params,
        &sim.holdout,
        &sim.fast_labels,
        &sim.slow_labels,
        &log.rows,
        acc_target,
    )
    .ok()
}

/// Outcome of one orchestrated run.
pub struct RunOutput {
    pub log: MetricsLog,
    pub report: RunReport,
}

/// Builds the runtime config, runs the simulation, and assembles the
/// per-run report.
pub fn execute(file: &ExperimentFile, seed: u64) -> Result<RunOutput> {
    let sim = file.build_sim_config(seed)?;
    let log = run_simulation(&sim)?;
    let acc_target = file.acc_target.unwrap_or(DEFAULT_ACC_TARGET);
    let report = RunReport {
        strategy: sim.strategy.as_str().to_string(),
        seed,
        fairness: fairness_report(&sim, &log, acc_target),
        convergence: convergence_report(&sim, &log)?,
        max_observed_staleness: log.max_observed_staleness,
        total_pushes: log.total_pushes,
        in_flight_at_end: log.in_flight_at_end,
    };
    Ok(RunOutput { log, report })
}

/// Per-strategy pairing over shared seeds, written by the compare
/// command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunReport>,
}

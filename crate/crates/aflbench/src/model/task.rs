//! Task definitions and closed-form gradients.

use serde::{Deserialize, Serialize};

use super::{Dataset, ParamVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SoftmaxLinear,
    MlpOneHidden,
    /// Mean squared distance to the batch points; each agent's shard sits
    /// at its private optimum, giving a controllable smooth objective.
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub feature_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    #[serde(default)]
    pub l2_coefficient: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if self.l2_coefficient < 0.0 {
            return Err(Error::Config("l2_coefficient must be >= 0".into()));
        }
        match self.kind {
            TaskKind::SoftmaxLinear if self.num_classes < 2 => {
                Err(Error::Config("softmax_linear needs num_classes >= 2".into()))
            }
            TaskKind::MlpOneHidden if self.num_classes < 2 || self.hidden_dim == 0 => {
                Err(Error::Config("mlp_one_hidden needs num_classes >= 2 and hidden_dim >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Flat parameter dimension of this task.
    pub fn param_dim(&self) -> usize {
        let d = self.feature_dim;
        let c = self.num_classes;
        match self.kind {
            TaskKind::SoftmaxLinear => c * d + c,
            TaskKind::MlpOneHidden => {
                let h = self.hidden_dim;
                h * d + h + c * h + c
            }
            TaskKind::Quadratic => d,
        }
    }
}

/// Mean loss over `batch` and its exact gradient.
///
/// Classification tasks use mean cross-entropy plus `l2/2 * |w|^2`;
/// the quadratic task uses `mean 1/2 |w - x|^2` over the batch points.
pub fn loss_and_gradient(
    task: &TaskSpec,
    params: &ParamVector,
    batch: &Dataset,
) -> Result<(f64, ParamVector)> {
    if batch.len() == 0 {
        return Err(Error::InvalidInput("batch must be non-empty".into()));
    }
    if params.dim() != task.param_dim() {
        return Err(Error::DimensionMismatch { expected: task.param_dim(), actual: params.dim() });
    }
    if batch.feature_dim() != task.feature_dim {
        return Err(Error::DimensionMismatch { expected: task.feature_dim, actual: batch.feature_dim() });
    }

    let (mut loss, mut grad) = match task.kind {
        TaskKind::SoftmaxLinear => softmax_linear(task, params, batch),
        TaskKind::MlpOneHidden => mlp_one_hidden(task, params, batch),
        TaskKind::Quadratic => quadratic(params, batch),
    };

    if task.l2_coefficient > 0.0 {
        loss += 0.5 * task.l2_coefficient * params.norm_sq();
        grad.axpy(task.l2_coefficient, params)?;
    }
    Ok((loss, grad))
}

fn softmax_probs(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
}

fn softmax_linear(task: &TaskSpec, params: &ParamVector, batch: &Dataset) -> (f64, ParamVector) {
    let d = task.feature_dim;
    let c = task.num_classes;
    let w = params.values();
    let bias_off = c * d;
    let m = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = ParamVector::zeros(params.dim());

    let mut probs = vec![0.0; c];
    for (x, y) in batch.iter() {
        for k in 0..c {
            let row = &w[k * d..(k + 1) * d];
            probs[k] = w[bias_off + k] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        softmax_probs(&mut probs);
        loss -= probs[y].max(f64::MIN_POSITIVE).ln();
        for k in 0..c {
            let coeff = (probs[k] - if k == y { 1.0 } else { 0.0 }) / m;
            for (g, &xv) in grad.values[k * d..(k + 1) * d].iter_mut().zip(x) {
                *g += coeff * xv;
            }
            grad[bias_off + k] += coeff;
        }
    }
    (loss / m, grad)
}

fn mlp_one_hidden(task: &TaskSpec, params: &ParamVector, batch: &Dataset) -> (f64, ParamVector) {
    let d = task.feature_dim;
    let h = task.hidden_dim;
    let c = task.num_classes;
    // Layout: W1 (h x d), b1 (h), W2 (c x h), b2 (c).
    let w = params.values();
    let w1 = 0;
    let b1 = h * d;
    let w2 = b1 + h;
    let b2 = w2 + c * h;
    let m = batch.len() as f64;

    let mut loss = 0.0;
    let mut grad = ParamVector::zeros(params.dim());
    let mut act = vec![0.0; h];
    let mut probs = vec![0.0; c];

    for (x, y) in batch.iter() {
        for j in 0..h {
            let row = &w[w1 + j * d..w1 + (j + 1) * d];
            let z = w[b1 + j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            act[j] = z.tanh();
        }
        for k in 0..c {
            let row = &w[w2 + k * h..w2 + (k + 1) * h];
            probs[k] = w[b2 + k] + row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>();
        }
        softmax_probs(&mut probs);
        loss -= probs[y].max(f64::MIN_POSITIVE).ln();

        // Backprop: dL/dlogit_k = (p_k - y_k)/m.
        let mut dhidden = vec![0.0; h];
        for k in 0..c {
            let dz = (probs[k] - if k == y { 1.0 } else { 0.0 }) / m;
            for j in 0..h {
                grad[w2 + k * h + j] += dz * act[j];
                dhidden[j] += dz * w[w2 + k * h + j];
            }
            grad[b2 + k] += dz;
        }
        for j in 0..h {
            let da = dhidden[j] * (1.0 - act[j] * act[j]);
            for (g, &xv) in grad.values[w1 + j * d..w1 + (j + 1) * d].iter_mut().zip(x) {
                *g += da * xv;
            }
            grad[b1 + j] += da;
        }
    }
    (loss / m, grad)
}

/// Most likely class under the model for a single feature row. The
/// quadratic task has no class structure and always returns 0.
pub fn predict_class(task: &TaskSpec, params: &ParamVector, x: &[f64]) -> usize {
    let d = task.feature_dim;
    let c = task.num_classes;
    let w = params.values();
    let argmax = |logits: &[f64]| {
        logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0)
    };
    match task.kind {
        TaskKind::SoftmaxLinear => {
            let bias_off = c * d;
            let logits: Vec<f64> = (0..c)
                .map(|k| {
                    w[bias_off + k]
                        + w[k * d..(k + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            argmax(&logits)
        }
        TaskKind::MlpOneHidden => {
            let h = task.hidden_dim;
            let b1 = h * d;
            let w2 = b1 + h;
            let b2 = w2 + c * h;
            let act: Vec<f64> = (0..h)
                .map(|j| {
                    (w[b1 + j]
                        + w[j * d..(j + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                    .tanh()
                })
                .collect();
            let logits: Vec<f64> = (0..c)
                .map(|k| {
                    w[b2 + k]
                        + w[w2 + k * h..w2 + (k + 1) * h].iter().zip(&act).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            argmax(&logits)
        }
        TaskKind::Quadratic => 0,
    }
}

fn quadratic(params: &ParamVector, batch: &Dataset) -> (f64, ParamVector) {
    let m = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = ParamVector::zeros(params.dim());
    for (x, _) in batch.iter() {
        for (j, (&wv, &xv)) in params.values().iter().zip(x).enumerate() {
            let diff = wv - xv;
            loss += 0.5 * diff * diff;
            grad[j] += diff / m;
        }
    }
    (loss / m, grad)
}

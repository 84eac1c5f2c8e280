//! Desk-scale model: a stack of frozen linear layers with trainable adapters,
//! an optional trainable head, and the two task losses.
//!
//! Samples live in columns: a batch of `n` inputs of dimension `q` is a
//! `q x n` matrix. Losses are means over the batch (squared-error norm for
//! regression, cross-entropy for classification), and every gradient below
//! is the gradient of that batch mean.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterGrads, ForwardCache, SoraAdapter};
use crate::baseline::{LoraAdapter, LoraGrads};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::prune::PrunedAdapter;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

/// One adapted layer. Pruned modules are inference-only: they forward but
/// refuse to train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerAdapter {
    Sora(SoraAdapter),
    Lora(LoraAdapter),
    Pruned { w0: Matrix, module: PrunedAdapter },
}

impl LayerAdapter {
    pub fn in_dim(&self) -> usize {
        match self {
            LayerAdapter::Sora(a) => a.q(),
            LayerAdapter::Lora(a) => a.q(),
            LayerAdapter::Pruned { w0, .. } => w0.cols(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            LayerAdapter::Sora(a) => a.p(),
            LayerAdapter::Lora(a) => a.p(),
            LayerAdapter::Pruned { w0, .. } => w0.rows(),
        }
    }

    pub fn w0(&self) -> &Matrix {
        match self {
            LayerAdapter::Sora(a) => a.w0(),
            LayerAdapter::Lora(a) => a.w0(),
            LayerAdapter::Pruned { w0, .. } => w0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Weight-type label for rank reports (e.g. "dense", "attn").
    pub label: String,
    pub adapter: LayerAdapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyModel {
    layers: Vec<Layer>,
    /// Trainable output map (e.g. class logits); `None` when the last layer
    /// itself is the regressor.
    head: Option<Matrix>,
    task: Task,
}

/// Per-layer forward intermediates.
#[derive(Clone, Debug)]
enum LayerCache {
    Sora(ForwardCache),
    Lora(Matrix),
    Pruned,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ModelCache {
    layer_inputs: Vec<Matrix>,
    layer_caches: Vec<LayerCache>,
    /// Output of the last layer (input to the head when a head exists).
    head_input: Matrix,
}

/// Gradients for one layer's trainable parts.
#[derive(Clone, Debug)]
pub enum LayerGrads {
    Sora(AdapterGrads),
    Lora(LoraGrads),
}

#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
    pub d_head: Option<Matrix>,
}

/// Training targets: a value matrix for regression (`p x n`) or class
/// indices for classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum Targets {
    Values(Matrix),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(m) => m.cols(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slice(&self, start: usize, end: usize) -> Targets {
        match self {
            Targets::Values(m) => Targets::Values(m.col_range(start, end)),
            Targets::Classes(c) => Targets::Classes(c[start..end].to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Targets,
}

impl Dataset {
    pub fn new(x: Matrix, y: Targets) -> Result<Self> {
        if x.cols() != y.len() {
            return Err(Error::ShapeMismatch {
                op: "Dataset::new",
                expected: format!("{} targets", x.cols()),
                got: format!("{}", y.len()),
            });
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            x: self.x.col_range(start, end),
            y: self.y.slice(start, end),
        }
    }
}

impl TinyModel {
    pub fn new(layers: Vec<Layer>, head: Option<Matrix>, task: Task) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[1].adapter.in_dim() != w[0].adapter.out_dim() {
                return Err(Error::ShapeMismatch {
                    op: "TinyModel::new",
                    expected: format!("layer input dim {}", w[0].adapter.out_dim()),
                    got: format!("{}", w[1].adapter.in_dim()),
                });
            }
        }
        let last_out = layers.last().unwrap().adapter.out_dim();
        if let Some(h) = &head {
            if h.cols() != last_out {
                return Err(Error::ShapeMismatch {
                    op: "TinyModel::new",
                    expected: format!("head with {last_out} columns"),
                    got: format!("{}x{}", h.rows(), h.cols()),
                });
            }
        }
        if task == Task::Classification && head.is_none() {
            return Err(Error::InvalidConfig(
                "classification needs a head producing class logits".into(),
            ));
        }
        Ok(TinyModel { layers, head, task })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn head(&self) -> Option<&Matrix> {
        self.head.as_ref()
    }

    pub(crate) fn head_mut(&mut self) -> Option<&mut Matrix> {
        self.head.as_mut()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].adapter.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        match &self.head {
            Some(h) => h.rows(),
            None => self.layers.last().unwrap().adapter.out_dim(),
        }
    }

    /// Gate vectors of the gated layers, in layer order.
    pub fn gates(&self) -> Vec<&Vector> {
        self.layers
            .iter()
            .filter_map(|l| match &l.adapter {
                LayerAdapter::Sora(a) => Some(a.gate()),
                _ => None,
            })
            .collect()
    }

    /// Model output for a `q x n` batch: chained layer outputs, then the head
    /// if present. Regression output is the last activation; classification
    /// output is the logits.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ModelCache)> {
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            layer_inputs.push(cur.clone());
            let next = match &layer.adapter {
                LayerAdapter::Sora(a) => {
                    let (out, cache) = a.layer_forward(&cur)?;
                    layer_caches.push(LayerCache::Sora(cache));
                    out
                }
                LayerAdapter::Lora(a) => {
                    let (z, h) = a.forward(&cur)?;
                    layer_caches.push(LayerCache::Lora(h));
                    a.w0().matmul(&cur)?.add(&z)?
                }
                LayerAdapter::Pruned { w0, module } => {
                    layer_caches.push(LayerCache::Pruned);
                    let z = module.forward(&cur)?;
                    w0.matmul(&cur)?.add(&z)?
                }
            };
            cur = next;
        }
        let head_input = cur.clone();
        let output = match &self.head {
            Some(h) => h.matmul(&cur)?,
            None => cur,
        };
        Ok((
            output,
            ModelCache {
                layer_inputs,
                layer_caches,
                head_input,
            },
        ))
    }

    /// Batch-mean data loss at a given model output.
    pub fn loss0(&self, output: &Matrix, y: &Targets) -> Result<f64> {
        Ok(self.loss0_and_grad(output, y)?.0)
    }

    /// Batch-mean data loss and its gradient with respect to the output.
    pub fn loss0_and_grad(&self, output: &Matrix, y: &Targets) -> Result<(f64, Matrix)> {
        let n = output.cols();
        match (self.task, y) {
            (Task::Regression, Targets::Values(t)) => {
                if t.rows() != output.rows() || t.cols() != n {
                    return Err(Error::ShapeMismatch {
                        op: "loss0",
                        expected: format!("targets {}x{}", output.rows(), n),
                        got: format!("{}x{}", t.rows(), t.cols()),
                    });
                }
                let resid = output.sub(t)?;
                let loss = resid.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
                let grad = resid.scale(2.0 / n as f64);
                Ok((loss, grad))
            }
            (Task::Classification, Targets::Classes(classes)) => {
                if classes.len() != n {
                    return Err(Error::ShapeMismatch {
                        op: "loss0",
                        expected: format!("{n} class labels"),
                        got: format!("{}", classes.len()),
                    });
                }
                let c = output.rows();
                if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
                    return Err(Error::InvalidConfig(format!(
                        "class label {bad} out of range for {c} logits"
                    )));
                }
                let mut loss = 0.0;
                let mut grad = Matrix::zeros(c, n);
                for j in 0..n {
                    let mut maxv = f64::NEG_INFINITY;
                    for i in 0..c {
                        maxv = maxv.max(output.get(i, j));
                    }
                    let mut denom = 0.0;
                    for i in 0..c {
                        denom += (output.get(i, j) - maxv).exp();
                    }
                    let log_denom = denom.ln() + maxv;
                    loss += log_denom - output.get(classes[j], j);
                    for i in 0..c {
                        let softmax = (output.get(i, j) - log_denom).exp();
                        let indicator = if i == classes[j] { 1.0 } else { 0.0 };
                        grad.set(i, j, (softmax - indicator) / n as f64);
                    }
                }
                Ok((loss / n as f64, grad))
            }
            _ => Err(Error::InvalidConfig(
                "target kind does not match model task".into(),
            )),
        }
    }

    /// Backpropagate `grad_output` (gradient at the model output) through the
    /// head and every layer. Errors on pruned layers, which are frozen for
    /// good.
    pub fn backward(&self, cache: &ModelCache, grad_output: &Matrix) -> Result<ModelGrads> {
        let (mut grad, d_head) = match &self.head {
            Some(h) => {
                let d_head = grad_output.matmul(&cache.head_input.transpose())?;
                (h.transpose().matmul(grad_output)?, Some(d_head))
            }
            None => (grad_output.clone(), None),
        };

        let mut layer_grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.layer_inputs[idx];
            match (&layer.adapter, &cache.layer_caches[idx]) {
                (LayerAdapter::Sora(a), LayerCache::Sora(fc)) => {
                    let (grads, grad_x_inc) = a.backward(x, fc, &grad)?;
                    // d(out)/d(x) also flows through the frozen base weight.
                    let grad_x = a.w0().transpose().matmul(&grad)?.add(&grad_x_inc)?;
                    layer_grads.push(LayerGrads::Sora(grads));
                    grad = grad_x;
                }
                (LayerAdapter::Lora(a), LayerCache::Lora(h)) => {
                    let (grads, grad_x_inc) = a.backward(x, h, &grad)?;
                    let grad_x = a.w0().transpose().matmul(&grad)?.add(&grad_x_inc)?;
                    layer_grads.push(LayerGrads::Lora(grads));
                    grad = grad_x;
                }
                (LayerAdapter::Pruned { .. }, _) => {
                    return Err(Error::Unsupported(
                        "pruned modules are inference-only and cannot be trained".into(),
                    ));
                }
                _ => {
                    return Err(Error::InvalidConfig(
                        "forward cache does not match model layers".into(),
                    ));
                }
            }
        }
        layer_grads.reverse();
        Ok(ModelGrads {
            layers: layer_grads,
            d_head,
        })
    }
}

/// Mean data loss over a whole dataset in one full-batch pass.
pub fn dataset_loss0(model: &TinyModel, data: &Dataset) -> Result<f64> {
    let (out, _) = model.forward(&data.x)?;
    model.loss0(&out, &data.y)
}

/// Task metric, higher-is-better: negative batch-mean squared error for
/// regression, accuracy for classification.
pub fn task_metric(model: &TinyModel, data: &Dataset) -> Result<f64> {
    let (out, _) = model.forward(&data.x)?;
    match model.task() {
        Task::Regression => Ok(-model.loss0(&out, &data.y)?),
        Task::Classification => {
            let classes = match &data.y {
                Targets::Classes(c) => c,
                _ => {
                    return Err(Error::InvalidConfig(
                        "classification metric needs class targets".into(),
                    ))
                }
            };
            let n = out.cols();
            let mut correct = 0usize;
            for j in 0..n {
                let mut best = 0usize;
                for i in 1..out.rows() {
                    if out.get(i, j) > out.get(best, j) {
                        best = i;
                    }
                }
                if best == classes[j] {
                    correct += 1;
                }
            }
            Ok(correct as f64 / n as f64)
        }
    }
}

/// Name of the metric [`task_metric`] reports for a task.
pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Regression => "neg_mse",
        Task::Classification => "accuracy",
    }
}

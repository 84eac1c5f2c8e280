//! Training loop: gradient steps on the factor matrices and head, proximal
//! soft-threshold steps on the gates.
//!
//! The two parameter families never mix: `W_d`, `W_u`, and the head go
//! through the configured optimizer (plain SGD or adaptive-moment), while
//! each gate takes one [`prox_gate_update`] per step with threshold
//! `eta_t * lambda`. Frozen base weights are never touched. Batches are
//! consecutive column chunks in a fixed order, so a run is a pure function
//! of (initial state, data, config).

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::adapter::{prox_gate_update, regularized_loss};
use crate::error::{Error, Result};
use crate::model::{Dataset, LayerAdapter, LayerGrads, TinyModel};
use crate::numerics::Matrix;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainSgd,
    AdaptiveMoment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Step size for the factor matrices and head.
    pub learning_rate: f64,
    /// Weight of the gate L1 term in the regularized loss.
    pub lambda: f64,
    /// Gate proximal step size; the soft-threshold level is `eta_t * lambda`.
    pub eta_t: f64,
    /// Epoch budget (converging earlier is allowed).
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Leave gates at their current values (plain-LoRA training).
    pub freeze_gates: bool,
    /// Adapter rank budget used when building models from this config.
    pub r_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 8e-4,
            lambda: 0.1,
            eta_t: 0.1,
            epochs: 300,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::AdaptiveMoment,
            freeze_gates: false,
            r_max: 8,
        }
    }
}

impl TrainConfig {
    /// Sparsity threshold of the gate step.
    pub fn xi(&self) -> f64 {
        self.eta_t * self.lambda
    }

    /// Parameterize by the threshold instead of the pair: `lambda` stays at
    /// its default 0.1 and `eta_t = xi / lambda`.
    pub fn from_xi(xi: f64) -> Result<Self> {
        if !(xi > 0.0) || !xi.is_finite() {
            return Err(Error::InvalidParam {
                name: "xi",
                value: xi,
                reason: "threshold must be positive and finite",
            });
        }
        let mut c = TrainConfig::default();
        c.eta_t = xi / c.lambda;
        Ok(c)
    }

    /// When a config spells out all three prox values, they must agree.
    pub fn check_xi_consistent(xi: f64, eta_t: f64, lambda: f64) -> Result<()> {
        let derived = eta_t * lambda;
        let tol = 1e-12 * derived.abs().max(xi.abs()).max(1e-300);
        if (xi - derived).abs() > tol {
            return Err(Error::InvalidConfig(format!(
                "xi = {xi} but eta_t * lambda = {derived}; the threshold must equal their product"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("eta_t", self.eta_t),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.r_max == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch_size, and r_max must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adaptive-moment accumulators for one parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamBlock {
    m: Matrix,
    v: Matrix,
}

/// Optimizer state for all trainable matrices, in walk order
/// (`layer0.wd, layer0.wu, layer1.wd, ..., head`). Plain SGD keeps no
/// per-block state but still tracks the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    kind: OptimizerKind,
    step: u64,
    blocks: Vec<Option<AdamBlock>>,
}

impl OptimizerState {
    pub fn new(model: &TinyModel, kind: OptimizerKind) -> Self {
        let mut blocks = Vec::new();
        let mut push = |rows: usize, cols: usize| {
            blocks.push(match kind {
                OptimizerKind::PlainSgd => None,
                OptimizerKind::AdaptiveMoment => Some(AdamBlock {
                    m: Matrix::zeros(rows, cols),
                    v: Matrix::zeros(rows, cols),
                }),
            });
        };
        for layer in model.layers() {
            match &layer.adapter {
                LayerAdapter::Sora(a) => {
                    push(a.wd().rows(), a.wd().cols());
                    push(a.wu().rows(), a.wu().cols());
                }
                LayerAdapter::Lora(a) => {
                    push(a.wd().rows(), a.wd().cols());
                    push(a.wu().rows(), a.wu().cols());
                }
                LayerAdapter::Pruned { .. } => {}
            }
        }
        if let Some(h) = model.head() {
            push(h.rows(), h.cols());
        }
        OptimizerState {
            kind,
            step: 0,
            blocks,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    fn apply(&mut self, block_idx: usize, w: &mut Matrix, grad: &Matrix, lr: f64) {
        match &mut self.blocks[block_idx] {
            None => w.add_scaled_assign(grad, -lr),
            Some(adam) => {
                let t = self.step as i32; // already incremented for this step
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for idx in 0..grad.data().len() {
                    let g = grad.data()[idx];
                    let m = ADAM_BETA1 * adam.m.data()[idx] + (1.0 - ADAM_BETA1) * g;
                    let v = ADAM_BETA2 * adam.v.data()[idx] + (1.0 - ADAM_BETA2) * g * g;
                    let (i, j) = (idx / grad.cols(), idx % grad.cols());
                    adam.m.set(i, j, m);
                    adam.v.set(i, j, v);
                    let update = lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
                    w.set(i, j, w.get(i, j) - update);
                }
            }
        }
    }
}

/// Summary of one optimization step. `step_time` is wall clock and is the
/// only field exempt from run-to-run determinism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Batch-mean data loss at the pre-update parameters.
    pub loss0: f64,
    /// `loss0 + lambda * Σ ‖g‖₁` at the same point.
    pub reg_loss: f64,
    /// Live gate entries across modules after the step.
    pub nonzero_gates: usize,
    pub step_time: Duration,
}

fn check_block_finite(m: &Matrix, step: u64, block: &str) -> Result<()> {
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            block: block.to_string(),
        });
    }
    Ok(())
}

/// One training step on a batch: forward, loss, backward, optimizer step on
/// the matrices, prox step on each unfrozen gate.
pub fn train_step(
    model: &mut TinyModel,
    batch: &Dataset,
    config: &TrainConfig,
    opt: &mut OptimizerState,
) -> Result<StepReport> {
    let t0 = Instant::now();
    let step = opt.step + 1;

    let (out, cache) = model.forward(&batch.x)?;
    let (loss0, grad_out) = model.loss0_and_grad(&out, &batch.y)?;
    if !loss0.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            block: "model output".into(),
        });
    }
    let reg_loss = regularized_loss(loss0, &model.gates(), config.lambda);
    let grads = model.backward(&cache, &grad_out)?;

    opt.step = step;
    let lr = config.learning_rate;
    let mut block_idx = 0;
    for (li, layer) in model.layers_mut().iter_mut().enumerate() {
        match (&mut layer.adapter, &grads.layers[li]) {
            (LayerAdapter::Sora(a), LayerGrads::Sora(g)) => {
                opt.apply(block_idx, a.wd_mut(), &g.d_wd, lr);
                check_block_finite(a.wd(), step, &format!("layer {li} wd"))?;
                opt.apply(block_idx + 1, a.wu_mut(), &g.d_wu, lr);
                check_block_finite(a.wu(), step, &format!("layer {li} wu"))?;
                block_idx += 2;
                if !config.freeze_gates {
                    let new_gate =
                        prox_gate_update(a.gate(), &g.d_gate, config.eta_t, config.lambda)?;
                    a.set_gate(new_gate)?;
                }
            }
            (LayerAdapter::Lora(a), LayerGrads::Lora(g)) => {
                opt.apply(block_idx, a.wd_mut(), &g.d_wd, lr);
                check_block_finite(a.wd(), step, &format!("layer {li} wd"))?;
                opt.apply(block_idx + 1, a.wu_mut(), &g.d_wu, lr);
                check_block_finite(a.wu(), step, &format!("layer {li} wu"))?;
                block_idx += 2;
            }
            _ => {
                return Err(Error::InvalidConfig(
                    "gradient list does not match model layers".into(),
                ))
            }
        }
    }
    if let Some(d_head) = &grads.d_head {
        let d_head = d_head.clone();
        if let Some(h) = model.head_mut() {
            opt.apply(block_idx, h, &d_head, lr);
        }
        check_block_finite(model.head().unwrap(), step, "head")?;
    }

    let nonzero_gates = model.gates().iter().map(|g| g.count_nonzero()).sum();
    Ok(StepReport {
        loss0,
        reg_loss,
        nonzero_gates,
        step_time: t0.elapsed(),
    })
}

/// One pass over `data` in consecutive chunks of `batch_size` (the last chunk
/// may be short). Returns one report per step.
pub fn train_epoch(
    model: &mut TinyModel,
    data: &Dataset,
    config: &TrainConfig,
    opt: &mut OptimizerState,
) -> Result<Vec<StepReport>> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let n = data.len();
    let mut reports = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + config.batch_size).min(n);
        let batch = data.slice(start, end);
        reports.push(train_step(model, &batch, config, opt)?);
        start = end;
    }
    Ok(reports)
}

/// Outcome of [`train_until_convergence`]. `converged == false` means the
/// epoch cap ran out first — still a success, just flagged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub epochs_used: usize,
    pub converged: bool,
    /// Mean data loss over the final epoch's steps.
    pub final_loss0: f64,
}

const CONVERGENCE_REL_TOL: f64 = 1e-4;
const CONVERGENCE_STREAK: usize = 3;

/// Epochs until the relative improvement of the epoch-mean data loss stays
/// below 1e-4 for three consecutive epochs, or until `config.epochs`.
/// The pre-training full-set loss seeds the comparison, so a model that
/// starts on a plateau stops within three epochs.
pub fn train_until_convergence(
    model: &mut TinyModel,
    data: &Dataset,
    config: &TrainConfig,
    opt: &mut OptimizerState,
) -> Result<ConvergenceReport> {
    let mut prev = crate::model::dataset_loss0(model, data)?;
    let mut streak = 0;
    let mut last_mean = prev;
    for epoch in 1..=config.epochs {
        let reports = train_epoch(model, data, config, opt)?;
        let mean = reports.iter().map(|r| r.loss0).sum::<f64>() / reports.len() as f64;
        last_mean = mean;
        let rel = (prev - mean) / prev.abs().max(1e-30);
        streak = if rel < CONVERGENCE_REL_TOL { streak + 1 } else { 0 };
        prev = mean;
        if streak >= CONVERGENCE_STREAK {
            return Ok(ConvergenceReport {
                epochs_used: epoch,
                converged: true,
                final_loss0: mean,
            });
        }
    }
    Ok(ConvergenceReport {
        epochs_used: config.epochs,
        converged: false,
        final_loss0: last_mean,
    })
}

/// Remaining adapter parameters counting only live ranks: a gated module
/// contributes `‖g‖₀ * (p + q + 1)` (its gate entry plus a row of `W_d` and a
/// column of `W_u` per live rank); ungated and pruned modules contribute
/// `rank * (p + q)`. The head is task plumbing and is not counted.
pub fn count_nonzero_params(model: &TinyModel) -> usize {
    model
        .layers()
        .iter()
        .map(|l| match &l.adapter {
            LayerAdapter::Sora(a) => a.gate().count_nonzero() * (a.p() + a.q() + 1),
            LayerAdapter::Lora(a) => a.rank() * (a.p() + a.q()),
            LayerAdapter::Pruned { module, .. } => {
                module.retained_rank() * (module.p() + module.q())
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::SoraAdapter;
    use crate::model::{Layer, Targets, Task};
    use crate::numerics::{SeededRng, Vector};

    fn toy_problem(seed: u64) -> (TinyModel, Dataset) {
        let mut rng = SeededRng::new(seed);
        let w0 = rng.normal_matrix(4, 4, 1.0);
        let delta = rng.normal_matrix(4, 1, 1.0).matmul(&rng.normal_matrix(1, 4, 1.0)).unwrap();
        let adapter = SoraAdapter::init(w0.clone(), 2, &mut rng).unwrap();
        let model = TinyModel::new(
            vec![Layer {
                label: "dense".into(),
                adapter: LayerAdapter::Sora(adapter),
            }],
            None,
            Task::Regression,
        )
        .unwrap();
        let x = rng.normal_matrix(4, 24, 1.0);
        let y = w0.add(&delta).unwrap().matmul(&x).unwrap();
        let data = Dataset::new(x, Targets::Values(y)).unwrap();
        (model, data)
    }

    #[test]
    fn frozen_base_weight_is_byte_identical_after_training() {
        let (mut model, data) = toy_problem(21);
        let before = match &model.layers()[0].adapter {
            LayerAdapter::Sora(a) => a.w0().clone(),
            _ => unreachable!(),
        };
        let config = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let mut opt = OptimizerState::new(&model, config.optimizer);
        for _ in 0..config.epochs {
            train_epoch(&mut model, &data, &config, &mut opt).unwrap();
        }
        match &model.layers()[0].adapter {
            LayerAdapter::Sora(a) => assert!(a.w0().bits_eq(&before)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn identical_configs_produce_identical_report_sequences() {
        let run = || {
            let (mut model, data) = toy_problem(8);
            let config = TrainConfig {
                epochs: 4,
                batch_size: 7,
                ..TrainConfig::default()
            };
            let mut opt = OptimizerState::new(&model, config.optimizer);
            let mut all = Vec::new();
            for _ in 0..config.epochs {
                all.extend(train_epoch(&mut model, &data, &config, &mut opt).unwrap());
            }
            all
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.loss0.to_bits(), rb.loss0.to_bits());
            assert_eq!(ra.reg_loss.to_bits(), rb.reg_loss.to_bits());
            assert_eq!(ra.nonzero_gates, rb.nonzero_gates);
        }
    }

    #[test]
    fn huge_lambda_zeroes_every_gate_in_one_step_and_freezes_the_increment() {
        let (mut model, data) = toy_problem(13);
        // Plain SGD: with a zero gradient the factors must stop exactly
        // (adaptive-moment would keep drifting on stale momentum).
        let config = TrainConfig {
            lambda: 1e3,
            eta_t: 0.1,
            optimizer: OptimizerKind::PlainSgd,
            ..TrainConfig::default()
        };
        let mut opt = OptimizerState::new(&model, config.optimizer);
        let batch = data.slice(0, data.len().min(32));
        let report = train_step(&mut model, &batch, &config, &mut opt).unwrap();
        assert_eq!(report.nonzero_gates, 0);

        // With all gates at zero the increment path carries no gradient, so
        // the factors stop moving.
        let snapshot = match &model.layers()[0].adapter {
            LayerAdapter::Sora(a) => (a.wd().clone(), a.wu().clone()),
            _ => unreachable!(),
        };
        for _ in 0..3 {
            train_step(&mut model, &batch, &config, &mut opt).unwrap();
        }
        match &model.layers()[0].adapter {
            LayerAdapter::Sora(a) => {
                assert!(a.wd().bits_eq(&snapshot.0));
                assert!(a.wu().bits_eq(&snapshot.1));
                assert_eq!(a.gate().count_nonzero(), 0);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn already_converged_model_stops_within_three_epochs() {
        // Gates zeroed and wu zero: the model cannot move, so the loss is
        // flat from the start.
        let (mut model, data) = toy_problem(34);
        match &mut model.layers_mut()[0].adapter {
            LayerAdapter::Sora(a) => a.set_gate(Vector::zeros(2)).unwrap(),
            _ => unreachable!(),
        }
        let config = TrainConfig {
            epochs: 50,
            ..TrainConfig::default()
        };
        let mut opt = OptimizerState::new(&model, config.optimizer);
        let report = train_until_convergence(&mut model, &data, &config, &mut opt).unwrap();
        assert!(report.converged);
        assert!(report.epochs_used <= 3, "took {} epochs", report.epochs_used);
    }

    #[test]
    fn epoch_cap_reports_unconverged_success() {
        let (mut model, data) = toy_problem(3);
        let config = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let mut opt = OptimizerState::new(&model, config.optimizer);
        let report = train_until_convergence(&mut model, &data, &config, &mut opt).unwrap();
        assert!(!report.converged);
        assert_eq!(report.epochs_used, 2);
    }

    #[test]
    fn nonzero_param_count_follows_the_gate_support() {
        let (mut model, _) = toy_problem(2);
        // p = q = 4, r_max = 2: dense count = 2 * (4 + 4 + 1) = 18.
        assert_eq!(count_nonzero_params(&model), 18);
        match &mut model.layers_mut()[0].adapter {
            LayerAdapter::Sora(a) => {
                a.set_gate(Vector::new(vec![0.0, -0.3]).unwrap()).unwrap()
            }
            _ => unreachable!(),
        }
        assert_eq!(count_nonzero_params(&model), 9);
    }

    #[test]
    fn adaptive_moment_differs_from_plain_sgd_but_stays_deterministic() {
        let run = |kind: OptimizerKind| {
            let (mut model, data) = toy_problem(55);
            let config = TrainConfig {
                optimizer: kind,
                epochs: 3,
                ..TrainConfig::default()
            };
            let mut opt = OptimizerState::new(&model, kind);
            let mut last = 0.0;
            for _ in 0..config.epochs {
                let reports = train_epoch(&mut model, &data, &config, &mut opt).unwrap();
                last = reports.last().unwrap().loss0;
            }
            last
        };
        let sgd1 = run(OptimizerKind::PlainSgd);
        let sgd2 = run(OptimizerKind::PlainSgd);
        let adam = run(OptimizerKind::AdaptiveMoment);
        assert_eq!(sgd1.to_bits(), sgd2.to_bits());
        assert_ne!(sgd1.to_bits(), adam.to_bits());
    }

    #[test]
    fn non_finite_loss_is_reported_with_step_and_block() {
        let (mut model, data) = toy_problem(6);
        // An absurd learning rate overflows the factors within a few steps.
        let config = TrainConfig {
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        let mut opt = OptimizerState::new(&model, config.optimizer);
        let mut saw_error = false;
        for _ in 0..10 {
            match train_epoch(&mut model, &data, &config, &mut opt) {
                Ok(_) => continue,
                Err(Error::NonFiniteLoss { step, block }) => {
                    assert!(step > 0);
                    assert!(!block.is_empty());
                    saw_error = true;
                    break;
                }
                Err(other) => panic!("unexpected error: {other}"),
            }
        }
        assert!(saw_error, "training never produced a non-finite diagnostic");
    }
}

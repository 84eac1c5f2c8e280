//! Sparsifying scheduler: train to convergence at a starting threshold, then
//! raise the threshold by a fixed increment every stage, snapshotting the
//! model after each stage until the threshold passes its maximum.
//!
//! Each snapshot pairs the sparsity level with memorization (train-set) and
//! generalization (eval-set) metrics plus a full checkpoint, so any prefix of
//! the run can be resumed or re-examined offline. The threshold sequence is
//! produced by repeated addition (`xi += delta_xi`), matching the loop it
//! implements — stage counts are whatever that float loop yields.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{metric_name, task_metric, Dataset, LayerAdapter, TinyModel};
use crate::numerics::SeededRng;
use crate::prune::effective_rank;
use crate::train::{
    count_nonzero_params, train_epoch, train_until_convergence, ConvergenceReport,
    OptimizerState, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Starting sparsity threshold.
    pub xi0: f64,
    /// Final threshold; stages run while the incremented threshold stays at
    /// or below this.
    pub xi_max: f64,
    /// Per-stage threshold increment.
    pub delta_xi: f64,
    /// Training epochs in each post-convergence stage.
    pub epochs_per_stage: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            xi0: 1e-4,
            xi_max: 1e-2,
            delta_xi: 1e-3,
            epochs_per_stage: 5,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi0 > 0.0) || !self.xi0.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "xi0 must be positive, got {}",
                self.xi0
            )));
        }
        if !(self.delta_xi > 0.0) || !self.delta_xi.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "delta_xi must be positive, got {}",
                self.delta_xi
            )));
        }
        if !(self.xi_max >= self.xi0) || !self.xi_max.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "xi_max must be at least xi0 = {}, got {}",
                self.xi0, self.xi_max
            )));
        }
        if self.epochs_per_stage == 0 {
            return Err(Error::InvalidConfig("epochs_per_stage must be positive".into()));
        }
        Ok(())
    }

    /// Thresholds of the post-convergence stages, in loop order.
    pub fn stage_xis(&self) -> Vec<f64> {
        let mut xis = Vec::new();
        let mut xi = self.xi0 + self.delta_xi;
        while xi <= self.xi_max {
            xis.push(xi);
            xi += self.delta_xi;
        }
        xis
    }
}

/// State captured after the convergence phase and after each stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub xi: f64,
    pub nonzero_params: usize,
    /// Train-set metric (higher is better).
    pub memorization: f64,
    /// Eval-set metric (same scale).
    pub generalization: f64,
    /// Retained rank per layer, in layer order.
    pub module_ranks: Vec<usize>,
    pub checkpoint: Checkpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    /// Name of the metric in the memorization/generalization columns.
    pub metric: String,
    pub snapshots: Vec<Snapshot>,
    /// Report from the initial train-to-convergence phase.
    pub convergence: Option<ConvergenceReport>,
    /// Set when a non-finite loss cut the schedule short; the snapshots
    /// taken before the failure are preserved.
    pub aborted: Option<String>,
}

/// Train-set and eval-set task metric for a model, in that order.
pub fn memgen_metrics(
    model: &TinyModel,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<(f64, f64)> {
    Ok((task_metric(model, train_set)?, task_metric(model, eval_set)?))
}

fn layer_ranks(model: &TinyModel) -> Vec<usize> {
    model
        .layers()
        .iter()
        .map(|l| match &l.adapter {
            LayerAdapter::Sora(a) => effective_rank(a),
            LayerAdapter::Lora(a) => a.rank(),
            LayerAdapter::Pruned { module, .. } => module.retained_rank(),
        })
        .collect()
}

fn stage_config(base: &TrainConfig, xi: f64, epochs: usize) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.eta_t = xi / base.lambda;
    cfg.epochs = epochs;
    cfg
}

fn take_snapshot(
    model: &TinyModel,
    opt: &OptimizerState,
    rng: &SeededRng,
    train_set: &Dataset,
    eval_set: &Dataset,
    cfg: &TrainConfig,
    // The ladder value itself, not `cfg.xi()`: reconstructing the threshold
    // as `eta_t * lambda` can land one ULP off the value the ladder produced.
    xi: f64,
    epoch: usize,
) -> Result<Snapshot> {
    let (memorization, generalization) = memgen_metrics(model, train_set, eval_set)?;
    Ok(Snapshot {
        xi,
        nonzero_params: count_nonzero_params(model),
        memorization,
        generalization,
        module_ranks: layer_ranks(model),
        checkpoint: Checkpoint::new(
            cfg.clone(),
            model.clone(),
            opt.clone(),
            rng.clone(),
            epoch,
            opt.step(),
        ),
    })
}

/// Run the post-convergence stages for the given threshold values, starting
/// the epoch counter at `start_epoch`. Returns the snapshots plus an abort
/// diagnostic if a non-finite loss stopped the run early. Resuming from a
/// snapshot's checkpoint with the remaining thresholds reproduces the rest
/// of a full run exactly.
pub fn run_stage_sequence(
    model: &mut TinyModel,
    opt: &mut OptimizerState,
    rng: &SeededRng,
    train_set: &Dataset,
    eval_set: &Dataset,
    base: &TrainConfig,
    xis: &[f64],
    epochs_per_stage: usize,
    start_epoch: usize,
) -> Result<(Vec<Snapshot>, Option<String>)> {
    let mut snapshots = Vec::new();
    let mut epoch = start_epoch;
    for &xi in xis {
        let cfg = stage_config(base, xi, epochs_per_stage);
        for _ in 0..epochs_per_stage {
            match train_epoch(model, train_set, &cfg, opt) {
                Ok(_) => epoch += 1,
                Err(Error::NonFiniteLoss { step, block }) => {
                    return Ok((
                        snapshots,
                        Some(format!(
                            "non-finite loss at step {step} (block {block}) during stage xi = {xi}"
                        )),
                    ));
                }
                Err(other) => return Err(other),
            }
        }
        snapshots.push(take_snapshot(
            model, opt, rng, train_set, eval_set, &cfg, xi, epoch,
        )?);
    }
    Ok((snapshots, None))
}

/// The full schedule: converge at `xi0`, snapshot, then raise the threshold
/// by `delta_xi` per stage while it stays within `xi_max`, snapshotting after
/// each stage. A non-finite loss aborts but preserves the trace so far.
pub fn run_schedule(
    model: &mut TinyModel,
    opt: &mut OptimizerState,
    rng: &SeededRng,
    train_set: &Dataset,
    eval_set: &Dataset,
    base: &TrainConfig,
    schedule: &ScheduleConfig,
) -> Result<ScheduleTrace> {
    schedule.validate()?;
    base.validate()?;
    if base.lambda <= 0.0 {
        return Err(Error::InvalidConfig(
            "the schedule derives eta_t = xi / lambda, so lambda must be positive".into(),
        ));
    }
    let metric = metric_name(model.task()).to_string();

    let cfg0 = stage_config(base, schedule.xi0, base.epochs);
    let convergence = match train_until_convergence(model, train_set, &cfg0, opt) {
        Ok(report) => report,
        Err(Error::NonFiniteLoss { step, block }) => {
            return Ok(ScheduleTrace {
                metric,
                snapshots: Vec::new(),
                convergence: None,
                aborted: Some(format!(
                    "non-finite loss at step {step} (block {block}) during initial convergence"
                )),
            });
        }
        Err(other) => return Err(other),
    };
    let mut snapshots = vec![take_snapshot(
        model,
        opt,
        rng,
        train_set,
        eval_set,
        &cfg0,
        schedule.xi0,
        convergence.epochs_used,
    )?];

    let (stage_snaps, aborted) = run_stage_sequence(
        model,
        opt,
        rng,
        train_set,
        eval_set,
        base,
        &schedule.stage_xis(),
        schedule.epochs_per_stage,
        convergence.epochs_used,
    )?;
    snapshots.extend(stage_snaps);
    Ok(ScheduleTrace {
        metric,
        snapshots,
        convergence: Some(convergence),
        aborted,
    })
}

/// Files written for one exported trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub metric: String,
    pub csv_file: String,
    pub entries: Vec<TraceManifestEntry>,
    pub convergence: Option<ConvergenceReport>,
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceManifestEntry {
    pub xi: f64,
    pub nonzero_params: usize,
    pub memorization: f64,
    pub generalization: f64,
    pub module_ranks: Vec<usize>,
    pub checkpoint_file: String,
}

impl ScheduleTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("xi,nonzero_params,memorization,generalization\n");
        for s in &self.snapshots {
            writeln!(
                out,
                "{},{},{},{}",
                s.xi, s.nonzero_params, s.memorization, s.generalization
            )
            .unwrap();
        }
        out
    }

    /// Parse the numeric columns back out of [`ScheduleTrace::to_csv`] output.
    pub fn parse_csv(text: &str) -> Result<Vec<(f64, usize, f64, f64)>> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != "xi,nonzero_params,memorization,generalization" {
            return Err(Error::SpecParse(format!("bad trace header: {header:?}")));
        }
        let mut rows = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::SpecParse(format!(
                    "trace line {}: expected 4 fields, got {}",
                    ln + 2,
                    parts.len()
                )));
            }
            let parse_f = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|e| Error::SpecParse(format!("bad trace number {s:?}: {e}")))
            };
            rows.push((
                parse_f(parts[0])?,
                parts[1]
                    .parse()
                    .map_err(|e| Error::SpecParse(format!("bad param count: {e}")))?,
                parse_f(parts[2])?,
                parse_f(parts[3])?,
            ));
        }
        Ok(rows)
    }

    /// Write `<stem>.csv`, one checkpoint file per snapshot, and
    /// `<stem>_manifest.json` into `dir`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<TraceManifest> {
        std::fs::create_dir_all(dir)?;
        let csv_file = format!("{stem}.csv");
        crate::experiment::write_atomic(&dir.join(&csv_file), self.to_csv().as_bytes())?;
        let mut entries = Vec::new();
        for (k, snap) in self.snapshots.iter().enumerate() {
            let checkpoint_file = format!("{stem}_checkpoint_{k:03}.json");
            snap.checkpoint.save(&dir.join(&checkpoint_file))?;
            entries.push(TraceManifestEntry {
                xi: snap.xi,
                nonzero_params: snap.nonzero_params,
                memorization: snap.memorization,
                generalization: snap.generalization,
                module_ranks: snap.module_ranks.clone(),
                checkpoint_file,
            });
        }
        let manifest = TraceManifest {
            metric: self.metric.clone(),
            csv_file,
            entries,
            convergence: self.convergence.clone(),
            aborted: self.aborted.clone(),
        };
        crate::experiment::write_atomic(
            &dir.join(format!("{stem}_manifest.json")),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        Ok(manifest)
    }
}

impl TraceManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

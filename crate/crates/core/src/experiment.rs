//! Experiment harness: declarative TOML specs, seeded end-to-end runs, and
//! deterministic on-disk results.
//!
//! A spec names a task, a training recipe, the seeds, and optionally a
//! sparsification schedule. Running it produces
//! `<out>/<name>/<seed>/…` per-seed artifacts plus a top-level
//! `aggregate.csv` and `manifest.json`. Everything except wall-clock
//! metadata is a pure function of the spec, so two runs of the same spec
//! produce byte-identical data files; timestamps live in a separate
//! `run_metadata.json` to keep it that way.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};

use crate::adapter::SoraAdapter;
use crate::baseline::{orthogonality_penalty, LoraAdapter};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{
    dataset_loss0, task_metric, Dataset, Layer, LayerAdapter, Targets, TinyModel, Task,
};
use crate::numerics::SeededRng;
use crate::prune::{prune_model, rank_heatmap, RankReport};
use crate::schedule::{run_schedule, ScheduleConfig};
use crate::train::{
    count_nonzero_params, train_step, train_until_convergence, OptimizerKind, OptimizerState,
    TrainConfig,
};

/// Write `bytes` to `path` through a sibling temp file and an atomic rename,
/// so readers never observe a half-written file. Parent directories are
/// created as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    if !parent.as_os_str().is_empty() {
        std::fs::create_dir_all(parent)?;
    }
    let stem = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("cannot write to {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = parent.join(format!(
        ".{stem}.tmp.{}.{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::write(&tmp, bytes)?;
    match std::fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e.into())
        }
    }
}

const SPEC_VERSION: u32 = 1;

fn default_n_train() -> usize {
    256
}
fn default_n_eval() -> usize {
    256
}
fn default_noise_sigma() -> f64 {
    0.01
}
fn default_r_max() -> usize {
    8
}
fn default_hidden() -> usize {
    16
}
fn default_separation() -> f64 {
    2.0
}
fn default_spread() -> f64 {
    1.0
}

/// What to train on. Dataset sizes and adapter rank budgets default to
/// small-but-meaningful values so a spec can stay terse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    /// Regression against a frozen weight plus a hidden low-rank update.
    Planted {
        p: usize,
        q: usize,
        true_rank: usize,
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_eval")]
        n_eval: usize,
        #[serde(default = "default_noise_sigma")]
        noise_sigma: f64,
        #[serde(default = "default_r_max")]
        r_max: usize,
    },
    /// Two-class Gaussian blobs through a frozen two-layer net.
    Blobs {
        dim: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_eval")]
        n_eval: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_r_max")]
        r_max: usize,
    },
}

impl TaskSpec {
    pub fn r_max(&self) -> usize {
        match self {
            TaskSpec::Planted { r_max, .. } | TaskSpec::Blobs { r_max, .. } => *r_max,
        }
    }
}

/// `[train]` section: every field optional, defaults from [`TrainConfig`].
/// The threshold may be given directly as `xi` instead of (or alongside)
/// `eta_t`/`lambda`; when spelled out twice the two must agree.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub lambda: Option<f64>,
    pub eta_t: Option<f64>,
    pub xi: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
    pub freeze_gates: Option<bool>,
}

impl TrainSection {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.optimizer {
            cfg.optimizer = v;
        }
        if let Some(v) = self.freeze_gates {
            cfg.freeze_gates = v;
        }
        match (self.xi, self.eta_t, self.lambda) {
            (Some(xi), None, None) => {
                let base = TrainConfig::from_xi(xi)?;
                cfg.eta_t = base.eta_t;
                cfg.lambda = base.lambda;
            }
            (xi, eta_t, lambda) => {
                if let Some(v) = eta_t {
                    cfg.eta_t = v;
                }
                if let Some(v) = lambda {
                    cfg.lambda = v;
                }
                if let Some(x) = xi {
                    TrainConfig::check_xi_consistent(x, cfg.eta_t, cfg.lambda)?;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A full experiment declaration, parsed from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub output_dir: Option<String>,
    pub seeds: Vec<u64>,
    /// Optional redundancy check: must equal `seeds.len()` when present.
    #[serde(default)]
    pub repeats: Option<usize>,
    pub task: TaskSpec,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| Error::SpecParse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SPEC_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported spec version {} (this build reads version {SPEC_VERSION})",
                self.version
            )));
        }
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            || self.name.starts_with('.')
        {
            return Err(Error::InvalidConfig(format!(
                "experiment name {:?} must be a nonempty [A-Za-z0-9._-] token not starting with a dot",
                self.name
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be nonempty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::InvalidConfig("seeds must be distinct".into()));
        }
        if let Some(r) = self.repeats {
            if r != self.seeds.len() {
                return Err(Error::InvalidConfig(format!(
                    "repeats = {r} but {} seeds were listed",
                    self.seeds.len()
                )));
            }
        }
        self.train.resolve()?;
        if let Some(s) = &self.schedule {
            s.validate()?;
            let cfg = self.train.resolve()?;
            if cfg.lambda <= 0.0 {
                return Err(Error::InvalidConfig(
                    "a schedule needs lambda > 0 to derive eta_t from xi".into(),
                ));
            }
        }
        Ok(())
    }

    /// Training config for one seed of this spec.
    pub fn resolve_train(&self, seed: u64) -> Result<TrainConfig> {
        let mut cfg = self.train.resolve()?;
        cfg.seed = seed;
        cfg.r_max = self.task.r_max();
        Ok(cfg)
    }
}

/// Model plus data splits, built from one seed's stream: task draws first,
/// then adapter initialization.
pub struct BuiltTask {
    pub model: TinyModel,
    pub train: Dataset,
    pub eval: Dataset,
    /// Task-specific extras recorded as metrics (e.g. `noise_floor`).
    pub extra: Vec<(&'static str, f64)>,
}

pub fn build_task(task: &TaskSpec, rng: &mut SeededRng) -> Result<BuiltTask> {
    match *task {
        TaskSpec::Planted {
            p,
            q,
            true_rank,
            n_train,
            n_eval,
            noise_sigma,
            r_max,
        } => {
            let t = crate::task::gen_planted_task(p, q, true_rank, n_train, n_eval, noise_sigma, rng)?;
            let model = crate::task::planted_model(&t, r_max, rng)?;
            Ok(BuiltTask {
                model,
                extra: vec![("noise_floor", t.noise_floor())],
                train: t.train,
                eval: t.eval,
            })
        }
        TaskSpec::Blobs {
            dim,
            hidden,
            n_train,
            n_eval,
            separation,
            spread,
            r_max,
        } => {
            let t = crate::task::gen_blob_task(dim, n_train, n_eval, separation, spread, rng)?;
            let model = crate::task::blob_model(&t, hidden, r_max, rng)?;
            Ok(BuiltTask {
                model,
                extra: Vec::new(),
                train: t.train,
                eval: t.eval,
            })
        }
    }
}

/// Metrics for one seed. Keys are stable names; values are finite floats
/// (non-finite values are dropped rather than written).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

impl SeedReport {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

struct SeedRun {
    report: SeedReport,
    files: Vec<String>,
    failure: Option<String>,
}

fn insert_finite(metrics: &mut BTreeMap<String, f64>, key: &str, value: f64) {
    if value.is_finite() {
        metrics.insert(key.to_string(), value);
    }
}

fn run_seed(spec: &ExperimentSpec, seed: u64, seed_dir: &Path) -> Result<SeedRun> {
    std::fs::create_dir_all(seed_dir)?;
    let mut rng = SeededRng::new(seed);
    let built = build_task(&spec.task, &mut rng)?;
    let BuiltTask {
        mut model,
        train,
        eval,
        extra,
    } = built;
    let cfg = spec.resolve_train(seed)?;
    let mut opt = OptimizerState::new(&model, cfg.optimizer);

    let mut metrics = BTreeMap::new();
    let mut files = Vec::new();
    let mut failure = None;
    let mut epochs_done = 0usize;

    if let Some(sched) = &spec.schedule {
        let trace = run_schedule(&mut model, &mut opt, &rng, &train, &eval, &cfg, sched)?;
        let manifest = trace.export(seed_dir, "trace")?;
        files.push(manifest.csv_file.clone());
        files.push("trace_manifest.json".to_string());
        for entry in &manifest.entries {
            files.push(entry.checkpoint_file.clone());
        }
        if let Some(conv) = &trace.convergence {
            epochs_done = conv.epochs_used + sched.stage_xis().len() * sched.epochs_per_stage;
            insert_finite(&mut metrics, "convergence_epochs", conv.epochs_used as f64);
            insert_finite(&mut metrics, "converged", if conv.converged { 1.0 } else { 0.0 });
        }
        insert_finite(&mut metrics, "stages", trace.snapshots.len() as f64);
        if let Some(last) = trace.snapshots.last() {
            insert_finite(&mut metrics, "final_xi", last.xi);
        }
        failure = trace.aborted;
    } else {
        match train_until_convergence(&mut model, &train, &cfg, &mut opt) {
            Ok(report) => {
                epochs_done = report.epochs_used;
                insert_finite(&mut metrics, "epochs_used", report.epochs_used as f64);
                insert_finite(&mut metrics, "converged", if report.converged { 1.0 } else { 0.0 });
            }
            Err(Error::NonFiniteLoss { step, block }) => {
                failure = Some(format!("non-finite loss at step {step} (block {block})"));
            }
            Err(other) => return Err(other),
        }
    }

    if failure.is_none() {
        insert_finite(&mut metrics, "train_loss0", dataset_loss0(&model, &train)?);
        insert_finite(&mut metrics, "eval_loss0", dataset_loss0(&model, &eval)?);
        insert_finite(&mut metrics, "memorization", task_metric(&model, &train)?);
        insert_finite(&mut metrics, "generalization", task_metric(&model, &eval)?);
        insert_finite(&mut metrics, "nonzero_params", count_nonzero_params(&model) as f64);
        let gate_l0: usize = model.gates().iter().map(|g| g.count_nonzero()).sum();
        insert_finite(&mut metrics, "gate_l0", gate_l0 as f64);
        for (k, v) in &extra {
            insert_finite(&mut metrics, k, *v);
        }

        let full = Checkpoint::new(
            cfg.clone(),
            model.clone(),
            opt.clone(),
            rng.clone(),
            epochs_done,
            opt.step(),
        );
        full.save(&seed_dir.join("checkpoint_full.json"))?;
        files.push("checkpoint_full.json".to_string());

        let pruned_model = prune_model(&model)?;
        // The fold must not move the function: record the largest output gap
        // over the eval inputs as a self-check metric.
        let (z_full, _) = model.forward(&eval.x)?;
        let (z_pruned, _) = pruned_model.forward(&eval.x)?;
        insert_finite(
            &mut metrics,
            "pruned_eval_gap",
            z_full.max_abs_diff(&z_pruned),
        );
        let pruned_opt = OptimizerState::new(&pruned_model, cfg.optimizer);
        let pruned = Checkpoint::new(
            cfg.clone(),
            pruned_model,
            pruned_opt,
            rng.clone(),
            epochs_done,
            opt.step(),
        );
        pruned.save(&seed_dir.join("checkpoint_pruned.json"))?;
        files.push("checkpoint_pruned.json".to_string());

        rank_heatmap(&[&model])?.write_csv(&seed_dir.join("heatmap.csv"))?;
        files.push("heatmap.csv".to_string());
    }

    let report = SeedReport { seed, metrics };
    write_atomic(
        &seed_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    files.push("report.json".to_string());
    files.sort();
    Ok(SeedRun {
        report,
        files,
        failure,
    })
}

/// One row of `aggregate.csv`: a metric's mean and sample standard deviation
/// (ddof = 1; zero when only one seed contributed) across completed seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub experiment: String,
    pub seed_count: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

/// Aggregate completed seed reports. Every report must carry the same metric
/// set; rows come out sorted by metric name.
pub fn aggregate_from_reports(name: &str, reports: &[&SeedReport]) -> Result<Vec<AggregateRow>> {
    if reports.is_empty() {
        return Ok(Vec::new());
    }
    let keys: Vec<&String> = reports[0].metrics.keys().collect();
    for r in &reports[1..] {
        let theirs: Vec<&String> = r.metrics.keys().collect();
        if theirs != keys {
            return Err(Error::InconsistentLabels(format!(
                "seed {} reports metrics {:?}, seed {} reports {:?}",
                reports[0].seed, keys, r.seed, theirs
            )));
        }
    }
    let n = reports.len();
    let mut rows = Vec::with_capacity(keys.len());
    for key in keys {
        let values: Vec<f64> = reports.iter().map(|r| r.metrics[key]).collect();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        };
        rows.push(AggregateRow {
            experiment: name.to_string(),
            seed_count: n,
            metric: key.clone(),
            mean,
            std,
        });
    }
    Ok(rows)
}

pub fn aggregate_to_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("experiment,seed_count,metric,mean,std\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.experiment, r.seed_count, r.metric, r.mean, r.std
        )
        .unwrap();
    }
    out
}

pub fn parse_aggregate_csv(text: &str) -> Result<Vec<AggregateRow>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "experiment,seed_count,metric,mean,std" {
        return Err(Error::SpecParse(format!("bad aggregate header: {header:?}")));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::SpecParse(format!(
                "aggregate line {}: expected 5 fields, got {}",
                ln + 2,
                parts.len()
            )));
        }
        let bad = |what: &str, e: &dyn std::fmt::Display| {
            Error::SpecParse(format!("aggregate line {}: bad {what}: {e}", ln + 2))
        };
        rows.push(AggregateRow {
            experiment: parts[0].to_string(),
            seed_count: parts[1].parse().map_err(|e| bad("seed_count", &e))?,
            metric: parts[2].to_string(),
            mean: parts[3].parse().map_err(|e| bad("mean", &e))?,
            std: parts[4].parse().map_err(|e| bad("std", &e))?,
        });
    }
    Ok(rows)
}

/// Per-seed entry of the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub seed: u64,
    /// Files inside `<name>/<seed>/`, sorted.
    pub files: Vec<String>,
    /// Failure diagnostic when this seed did not complete.
    pub failure: Option<String>,
}

/// Deterministic listing of everything a run wrote (except wall-clock
/// metadata, which deliberately lives outside this file).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub name: String,
    pub aggregate_file: String,
    pub seeds: Vec<SeedEntry>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn failures(&self) -> Vec<(u64, &str)> {
        self.seeds
            .iter()
            .filter_map(|s| s.failure.as_deref().map(|f| (s.seed, f)))
            .collect()
    }
}

/// Wall-clock bookkeeping, quarantined from the deterministic outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub struct ExperimentOutcome {
    /// `<out>/<name>`, the directory holding everything this run wrote.
    pub root: PathBuf,
    pub manifest: RunManifest,
    pub reports: Vec<SeedReport>,
}

impl ExperimentOutcome {
    pub fn all_succeeded(&self) -> bool {
        self.manifest.seeds.iter().all(|s| s.failure.is_none())
    }
}

/// Run every seed of a spec under `out_root`, then aggregate. Seeds that die
/// with a non-finite loss are recorded in the manifest and skipped by the
/// aggregate; other errors abort the whole run.
pub fn run_experiment(spec: &ExperimentSpec, out_root: &Path) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let started = unix_ms();
    let root = out_root.join(&spec.name);
    std::fs::create_dir_all(&root)?;

    let mut entries = Vec::new();
    let mut reports = Vec::new();
    for &seed in &spec.seeds {
        let run = run_seed(spec, seed, &root.join(seed.to_string()))?;
        entries.push(SeedEntry {
            seed,
            files: run.files,
            failure: run.failure,
        });
        reports.push(run.report);
    }

    let completed: Vec<&SeedReport> = entries
        .iter()
        .zip(&reports)
        .filter(|(e, _)| e.failure.is_none())
        .map(|(_, r)| r)
        .collect();
    let rows = aggregate_from_reports(&spec.name, &completed)?;
    write_atomic(&root.join("aggregate.csv"), aggregate_to_csv(&rows).as_bytes())?;

    let manifest = RunManifest {
        version: SPEC_VERSION,
        name: spec.name.clone(),
        aggregate_file: "aggregate.csv".to_string(),
        seeds: entries,
    };
    write_atomic(
        &root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    let metadata = RunMetadata {
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
    };
    write_atomic(
        &root.join("run_metadata.json"),
        serde_json::to_string_pretty(&metadata)?.as_bytes(),
    )?;

    Ok(ExperimentOutcome {
        root,
        manifest,
        reports,
    })
}

/// Mean rank per (layer, weight type) across the models stored in the given
/// checkpoints.
pub fn heatmap_from_checkpoints(paths: &[PathBuf]) -> Result<RankReport> {
    if paths.is_empty() {
        return Err(Error::InvalidConfig("no checkpoints given".into()));
    }
    let mut models = Vec::with_capacity(paths.len());
    for p in paths {
        models.push(Checkpoint::load(p)?.model);
    }
    let refs: Vec<&TinyModel> = models.iter().collect();
    rank_heatmap(&refs)
}

/// Median wall-clock step times for the two sparsification strategies on the
/// same synthetic regression problem: the gated adapter takes its usual
/// train step (including the gate prox update), while the ungated adapter
/// takes the same gradient step plus an orthogonality penalty on its
/// factors. Everything but the timings is seeded and fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub p: usize,
    pub q: usize,
    pub r_max: usize,
    pub batch: usize,
    pub n_steps: usize,
    pub gated_median: Duration,
    pub penalty_median: Duration,
}

const PENALTY_WEIGHT: f64 = 1e-4;

fn median(mut times: Vec<Duration>) -> Duration {
    times.sort_unstable();
    times[times.len() / 2]
}

pub fn compare_step_time(
    p: usize,
    q: usize,
    r_max: usize,
    batch: usize,
    n_steps: usize,
) -> Result<TimingReport> {
    if n_steps == 0 || batch == 0 {
        return Err(Error::InvalidConfig("need at least one step and one sample".into()));
    }
    let mut rng = SeededRng::new(0x5ea5);
    let w0 = rng.normal_matrix(p, q, 1.0);
    let x = rng.normal_matrix(q, batch, 1.0);
    // Targets consistent with the base weight keep every residual (and so
    // every update) bounded for any step count; the arithmetic done per step
    // is identical, which is all a timing comparison needs.
    let y = w0.matmul(&x)?;
    let data = Dataset::new(x, Targets::Values(y))?;
    let cfg = TrainConfig::default();

    // Gated side: the ordinary training step, prox included.
    let mut gated = TinyModel::new(
        vec![Layer {
            label: "dense".into(),
            adapter: LayerAdapter::Sora(SoraAdapter::init(w0.clone(), r_max, &mut rng)?),
        }],
        None,
        Task::Regression,
    )?;
    let mut opt = OptimizerState::new(&gated, OptimizerKind::PlainSgd);
    let mut gated_times = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let t0 = Instant::now();
        train_step(&mut gated, &data, &cfg, &mut opt)?;
        gated_times.push(t0.elapsed());
    }

    // Penalty side: the identical trainer step on an ungated adapter, plus
    // the orthogonality penalty (value and gradients for both factors,
    // column-orthogonality convention: the down-projection enters
    // transposed) applied as its own decoupled gradient step.
    let mut penalized = TinyModel::new(
        vec![Layer {
            label: "dense".into(),
            adapter: LayerAdapter::Lora(LoraAdapter::init(w0, r_max, &mut rng)?),
        }],
        None,
        Task::Regression,
    )?;
    let mut opt2 = OptimizerState::new(&penalized, OptimizerKind::PlainSgd);
    let lr = cfg.learning_rate;
    let mut penalty_times = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let t0 = Instant::now();
        train_step(&mut penalized, &data, &cfg, &mut opt2)?;
        match &mut penalized.layers_mut()[0].adapter {
            LayerAdapter::Lora(a) => {
                let (_, d_wu_pen, d_wdt_pen) =
                    orthogonality_penalty(a.wu(), &a.wd().transpose())?;
                a.wu_mut()
                    .add_scaled_assign(&d_wu_pen, -lr * PENALTY_WEIGHT);
                a.wd_mut()
                    .add_scaled_assign(&d_wdt_pen.transpose(), -lr * PENALTY_WEIGHT);
            }
            _ => unreachable!(),
        }
        penalty_times.push(t0.elapsed());
    }

    Ok(TimingReport {
        p,
        q,
        r_max,
        batch,
        n_steps,
        gated_median: median(gated_times),
        penalty_median: median(penalty_times),
    })
}

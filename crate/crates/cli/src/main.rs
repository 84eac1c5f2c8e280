//! `sora` — experiment harness for gated low-rank adapters.
//!
//! Exit codes: 0 success, 1 validation failure (bad flags, unparseable or
//! inconsistent spec, missing input file), 2 runtime failure (a seed crashed;
//! completed seeds stay on disk and the manifest records what broke).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sora::experiment::heatmap_from_checkpoints;
use sora::prune::rank_heatmap;
use sora::train::{count_nonzero_params, OptimizerKind, OptimizerState};
use sora::{
    compare_step_time, prune_model, write_atomic, Checkpoint, Error, ExperimentOutcome,
    ExperimentSpec, ScheduleConfig,
};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "sora", version, about = "Train, schedule, prune, and benchmark gated low-rank adapters on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a spec file.
    Run {
        /// TOML experiment spec.
        spec: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Run an experiment under the sparsity scheduler, adding a schedule
    /// section if the spec has none.
    Schedule {
        /// TOML experiment spec.
        spec: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[command(flatten)]
        schedule: ScheduleOverrides,
    },
    /// Collapse zero gates out of a checkpointed model and report ranks.
    Prune {
        /// Checkpoint JSON produced by `run` or `schedule`.
        checkpoint: PathBuf,
        /// Where to write the pruned checkpoint (default: alongside the
        /// input with a `.pruned.json` suffix).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the per-layer retained-rank CSV here.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Time a gated training step against the same step with an
    /// orthogonality-penalty gradient instead of the gate machinery.
    BenchStepTime {
        #[arg(long, default_value_t = 128)]
        p: usize,
        #[arg(long, default_value_t = 128)]
        q: usize,
        #[arg(long, default_value_t = 8)]
        r_max: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Steps per side; medians are reported.
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Write the full timing report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Average retained ranks across checkpoints into a heatmap CSV.
    ExportHeatmap {
        /// One or more checkpoint JSON files with identical layer labels.
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        /// Output CSV path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Spec-field overrides shared by `run` and `schedule`. Anything not given
/// keeps the spec file's value.
#[derive(Args)]
struct TrainOverrides {
    /// Output root; results land in `<out>/<name>/`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rename the experiment (and its output subdirectory).
    #[arg(long)]
    name: Option<String>,
    /// Replace the seed list, e.g. `--seeds 0,1,2`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Step size for factor matrices and head.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Gate sparsity strength.
    #[arg(long)]
    lambda: Option<f64>,
    /// Gate step size.
    #[arg(long)]
    eta_t: Option<f64>,
    /// Gate threshold eta_t * lambda, set directly; must agree with
    /// --eta-t/--lambda when those are also given.
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    /// Train factors only, keeping every gate at its current value.
    #[arg(long)]
    freeze_gates: Option<bool>,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "plain-sgd" => Ok(OptimizerKind::PlainSgd),
        "adaptive-moment" => Ok(OptimizerKind::AdaptiveMoment),
        other => Err(format!("unknown optimizer `{other}` (expected plain-sgd or adaptive-moment)")),
    }
}

impl TrainOverrides {
    fn apply(&self, spec: &mut ExperimentSpec) {
        if let Some(name) = &self.name {
            spec.name = name.clone();
        }
        if let Some(seeds) = &self.seeds {
            spec.seeds = seeds.clone();
            // The repeat count is a redundancy check against the file's own
            // seed list; replacing the list retires it.
            spec.repeats = None;
        }
        if let Some(v) = self.epochs {
            spec.train.epochs = Some(v);
        }
        if let Some(v) = self.batch_size {
            spec.train.batch_size = Some(v);
        }
        if let Some(v) = self.learning_rate {
            spec.train.learning_rate = Some(v);
        }
        if let Some(v) = self.lambda {
            spec.train.lambda = Some(v);
        }
        if let Some(v) = self.eta_t {
            spec.train.eta_t = Some(v);
        }
        if let Some(v) = self.xi {
            spec.train.xi = Some(v);
        }
        if let Some(v) = self.optimizer {
            spec.train.optimizer = Some(v);
        }
        if let Some(v) = self.freeze_gates {
            spec.train.freeze_gates = Some(v);
        }
    }

    /// `--out` beats the spec's `output_dir`, which beats the working dir.
    fn out_root(&self, spec: &ExperimentSpec) -> PathBuf {
        self.out
            .clone()
            .or_else(|| spec.output_dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

#[derive(Args)]
struct ScheduleOverrides {
    /// Starting threshold.
    #[arg(long)]
    xi0: Option<f64>,
    /// Final threshold (inclusive).
    #[arg(long)]
    xi_max: Option<f64>,
    /// Threshold increment per stage.
    #[arg(long)]
    delta_xi: Option<f64>,
    #[arg(long)]
    epochs_per_stage: Option<usize>,
}

impl ScheduleOverrides {
    fn apply(&self, sched: &mut ScheduleConfig) {
        if let Some(v) = self.xi0 {
            sched.xi0 = v;
        }
        if let Some(v) = self.xi_max {
            sched.xi_max = v;
        }
        if let Some(v) = self.delta_xi {
            sched.delta_xi = v;
        }
        if let Some(v) = self.epochs_per_stage {
            sched.epochs_per_stage = v;
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}

/// Everything up to here is input validation; failures inside `dispatch`
/// that happen after work has started map to the runtime exit code instead.
fn dispatch(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::Run { spec, overrides } => {
            let spec = load_spec(&spec, &overrides, None)?;
            execute(&spec, &overrides)
        }
        Command::Schedule {
            spec,
            overrides,
            schedule,
        } => {
            let spec = load_spec(&spec, &overrides, Some(&schedule))?;
            execute(&spec, &overrides)
        }
        Command::Prune {
            checkpoint,
            out,
            heatmap,
        } => run_prune(&checkpoint, out.as_deref(), heatmap.as_deref()),
        Command::BenchStepTime {
            p,
            q,
            r_max,
            batch,
            steps,
            json,
        } => run_bench(p, q, r_max, batch, steps, json.as_deref()),
        Command::ExportHeatmap { checkpoints, out } => run_export(&checkpoints, out.as_deref()),
    }
}

fn load_spec(
    path: &Path,
    overrides: &TrainOverrides,
    schedule: Option<&ScheduleOverrides>,
) -> Result<ExperimentSpec, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::SpecParse(format!("{}: {e}", path.display())))?;
    let mut spec = ExperimentSpec::parse(&text)?;
    overrides.apply(&mut spec);
    if let Some(ovr) = schedule {
        let mut sched = spec.schedule.take().unwrap_or_default();
        ovr.apply(&mut sched);
        spec.schedule = Some(sched);
    }
    // Overrides can invalidate a spec that parsed fine (e.g. an xi that
    // contradicts the file's eta_t); catch that before any file is written.
    spec.validate()?;
    if let Some(s) = &spec.schedule {
        s.validate()?;
    }
    Ok(spec)
}

fn execute(spec: &ExperimentSpec, overrides: &TrainOverrides) -> Result<ExitCode, Error> {
    let out_root = overrides.out_root(spec);
    let outcome = match sora::run_experiment(spec, &out_root) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(EXIT_RUNTIME));
        }
    };
    report_outcome(&outcome)
}

fn report_outcome(outcome: &ExperimentOutcome) -> Result<ExitCode, Error> {
    println!("wrote {}", outcome.root.display());
    let failures = outcome.manifest.failures();
    if failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for (seed, what) in &failures {
            eprintln!("seed {seed} failed: {what}");
        }
        eprintln!(
            "{}/{} seeds failed; completed results kept under {}",
            failures.len(),
            outcome.manifest.seeds.len(),
            outcome.root.display()
        );
        Ok(ExitCode::from(EXIT_RUNTIME))
    }
}

fn run_prune(
    checkpoint: &Path,
    out: Option<&Path>,
    heatmap: Option<&Path>,
) -> Result<ExitCode, Error> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let params_before = count_nonzero_params(&ckpt.model);

    let inner = || -> Result<ExitCode, Error> {
        let pruned = prune_model(&ckpt.model)?;
        let params_after = count_nonzero_params(&pruned);
        let report = rank_heatmap(&[&pruned])?;

        let out_path = out.map(PathBuf::from).unwrap_or_else(|| {
            let mut name = checkpoint
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "checkpoint".into());
            name.push_str(".pruned.json");
            checkpoint.with_file_name(name)
        });
        // The optimizer is rebuilt for the pruned shapes; its accumulated
        // moments describe parameters that no longer exist.
        let fresh_opt = OptimizerState::new(&pruned, ckpt.config.optimizer);
        let pruned_ckpt = Checkpoint::new(
            ckpt.config.clone(),
            pruned,
            fresh_opt,
            ckpt.rng.clone(),
            ckpt.epoch,
            ckpt.step,
        );
        pruned_ckpt.save(&out_path)?;

        for e in &report.entries {
            println!("layer {} ({}): retained rank {}", e.layer, e.weight_type, e.rank);
        }
        println!("nonzero params: {params_before} -> {params_after}");
        println!("wrote {}", out_path.display());
        if let Some(hp) = heatmap {
            report.write_csv(hp)?;
            println!("wrote {}", hp.display());
        }
        Ok(ExitCode::SUCCESS)
    };
    // The checkpoint was valid; anything failing past this point is runtime.
    inner().or_else(|e| {
        eprintln!("error: {e}");
        Ok(ExitCode::from(EXIT_RUNTIME))
    })
}

fn run_bench(
    p: usize,
    q: usize,
    r_max: usize,
    batch: usize,
    steps: usize,
    json: Option<&Path>,
) -> Result<ExitCode, Error> {
    if steps < 100 {
        return Err(Error::InvalidConfig(format!(
            "need at least 100 steps for stable medians, got {steps}"
        )));
    }
    let report = compare_step_time(p, q, r_max, batch, steps)?;
    let gated = report.gated_median.as_secs_f64();
    let penalty = report.penalty_median.as_secs_f64();
    println!(
        "{}x{} r_max={} batch={} over {} steps",
        report.p, report.q, report.r_max, report.batch, report.n_steps
    );
    println!("gated step median:   {:.3} us", gated * 1e6);
    println!("penalty step median: {:.3} us", penalty * 1e6);
    println!("gated/penalty ratio: {:.3}", gated / penalty);
    if let Some(path) = json {
        write_atomic(path, serde_json::to_string_pretty(&report)?.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn run_export(checkpoints: &[PathBuf], out: Option<&Path>) -> Result<ExitCode, Error> {
    let report = heatmap_from_checkpoints(checkpoints)?;
    match out {
        Some(path) => {
            report.write_csv(path)?;
            println!("wrote {}", path.display());
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(ExitCode::SUCCESS)
}

//! Experiment orchestration: multi-seed training, mode-layout sweeps,
//! estimator grids and checkpoint evaluation, with their output files.
//!
//! Output layout under the output directory:
//!
//! ```text
//! seed_<s>/metrics.csv     one row per evaluation point
//! seed_<s>/checkpoint.bin  final models
//! aggregate.json           final returns across seeds
//! aggregate.csv            per-step mean and std across seeds
//! <N>x<M>/...              the above, per sweep cell
//! sweep.csv, sweep_seeds.csv
//! estlab.csv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, Snapshot};
use crate::config::{cell_label, ConfigError, EstlabConfig, ObjectiveKind, RunConfig, SweepConfig};
use crate::distributions::SampleMethod;
use crate::envs::{Env, EnvKind};
use crate::estlab::{estimator_stats, EstlabError, Objective, ObjectiveSpec};
use crate::gradcore::Matrix;
use crate::rng::{self, Rng};
use crate::stats::{l2_norm, mean_std};
use crate::trainer::{evaluate, train, EvalOptions, EvalReport, TrainConfig, TrainError, TrainOutcome};

/// Overrides every configured output directory.
pub const OUTPUT_ENV: &str = "CATPOL_OUT";

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const AGGREGATE_JSON: &str = "aggregate.json";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SEEDS_CSV: &str = "sweep_seeds.csv";
pub const ESTLAB_CSV: &str = "estlab.csv";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("seed {seed}: {source}")]
    Train { seed: u64, source: TrainError },
    #[error(transparent)]
    Estlab(#[from] EstlabError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

impl ExperimentError {
    /// 2 for configuration and file-format problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Checkpoint(CheckpointError::Io(_) | CheckpointError::Train(_)) => 1,
            ExperimentError::Checkpoint(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn resolve_output_dir(configured: &Path) -> PathBuf {
    std::env::var_os(OUTPUT_ENV).map_or_else(|| configured.to_path_buf(), PathBuf::from)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |source| ExperimentError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// A CSV with a header but no rows, for empty tables.
fn write_header_only(path: &Path, header: &[&str]) -> Result<()> {
    fs::write(path, format!("{}\n", header.join(","))).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| ExperimentError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Trains one seed and writes its metrics and checkpoint.
pub fn run_seed(cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    let outcome = train(cfg).map_err(|source| ExperimentError::Train { seed: cfg.seed, source })?;
    let dir = seed_dir(out, cfg.seed);
    create_dir(&dir)?;
    write_csv(&dir.join(METRICS_FILE), &outcome.record.rows)?;
    let snap = Snapshot {
        config: cfg.clone(),
        policy: outcome.policy.clone(),
        value: outcome.value.clone(),
        rng: rng::from_state_bytes(outcome.eval_rng),
    };
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &snap.to_checkpoint())?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_return: f64,
    pub metrics: String,
    pub checkpoint: String,
}

/// Contents of `aggregate.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub env: &'static str,
    pub method: &'static str,
    pub n_factors: usize,
    pub n_classes: usize,
    pub updates: usize,
    pub seeds: Vec<u64>,
    pub final_returns: Vec<f64>,
    pub final_return_mean: f64,
    /// Population standard deviation across seeds.
    pub final_return_std: f64,
    pub runs: Vec<SeedSummary>,
}

/// One row of `aggregate.csv`: a step's evaluation return across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub update_step: usize,
    pub env_steps: u64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub n_seeds: usize,
}

/// Trains every seed of `run` in parallel and writes per-seed and aggregate
/// outputs under `out`.
pub fn train_runs(run: &RunConfig, out: &Path) -> Result<RunSummary> {
    if run.seeds.is_empty() {
        return Err(ConfigError::Value {
            key: "seeds".into(),
            msg: "no seeds".into(),
        }
        .into());
    }
    create_dir(out)?;
    let outcomes: Vec<TrainOutcome> = run
        .seeds
        .par_iter()
        .map(|&seed| run_seed(&run.for_seed(seed), out))
        .collect::<Result<_>>()?;

    let final_returns: Vec<f64> = outcomes
        .iter()
        .map(|o| o.record.final_return().unwrap_or(f64::NAN))
        .collect();
    let (final_return_mean, final_return_std) = mean_std(&final_returns);
    let runs = run
        .seeds
        .iter()
        .zip(&final_returns)
        .map(|(&seed, &final_return)| {
            let rel = |file: &str| format!("seed_{seed}/{file}");
            SeedSummary {
                seed,
                final_return,
                metrics: rel(METRICS_FILE),
                checkpoint: rel(CHECKPOINT_FILE),
            }
        })
        .collect();
    let t = &run.train;
    let summary = RunSummary {
        env: t.env.name(),
        method: t.method.name(),
        n_factors: t.n_factors,
        n_classes: t.n_classes,
        updates: t.updates,
        seeds: run.seeds.clone(),
        final_returns,
        final_return_mean,
        final_return_std,
        runs,
    };
    write_json(&out.join(AGGREGATE_JSON), &summary)?;

    // Every seed evaluates at the same steps.
    let steps = &outcomes[0].record.rows;
    let per_step: Vec<AggregateRow> = steps
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let returns: Vec<f64> = outcomes.iter().map(|o| o.record.rows[i].eval_return_mean).collect();
            let (mean, std) = mean_std(&returns);
            AggregateRow {
                update_step: row.update_step,
                env_steps: row.env_steps,
                eval_return_mean: mean,
                eval_return_std: std,
                n_seeds: returns.len(),
            }
        })
        .collect();
    write_csv(&out.join(AGGREGATE_CSV), &per_step)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub cell: String,
    pub n_factors: usize,
    pub n_classes: usize,
    pub n_seeds: usize,
    pub final_return_mean: f64,
    pub final_return_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSeedRow {
    pub cell: String,
    pub seed: u64,
    pub final_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub cells: Vec<SweepRow>,
    pub seeds: Vec<SweepSeedRow>,
}

impl SweepSummary {
    /// Final return of one cell and seed.
    pub fn final_return(&self, cell: (usize, usize), seed: u64) -> Option<f64> {
        let label = cell_label(cell);
        self.seeds
            .iter()
            .find(|r| r.cell == label && r.seed == seed)
            .map(|r| r.final_return)
    }
}

/// Trains every cell as its own multi-seed run under `out/<N>x<M>`.
pub fn sweep(cfg: &SweepConfig, out: &Path) -> Result<SweepSummary> {
    create_dir(out)?;
    let runs: Vec<(String, RunSummary)> = cfg
        .cells
        .par_iter()
        .map(|&cell| {
            let label = cell_label(cell);
            let summary = train_runs(&cfg.run.for_cell(cell), &out.join(&label))?;
            Ok((label, summary))
        })
        .collect::<Result<_>>()?;
    let cells: Vec<SweepRow> = runs
        .iter()
        .map(|(label, s)| SweepRow {
            cell: label.clone(),
            n_factors: s.n_factors,
            n_classes: s.n_classes,
            n_seeds: s.seeds.len(),
            final_return_mean: s.final_return_mean,
            final_return_std: s.final_return_std,
        })
        .collect();
    let seeds: Vec<SweepSeedRow> = runs
        .iter()
        .flat_map(|(label, s)| {
            s.runs.iter().map(move |r| SweepSeedRow {
                cell: label.clone(),
                seed: r.seed,
                final_return: r.final_return,
            })
        })
        .collect();
    write_csv(&out.join(SWEEP_CSV), &cells)?;
    write_csv(&out.join(SWEEP_SEEDS_CSV), &seeds)?;
    Ok(SweepSummary { cells, seeds })
}

/// Random logits and objective for one estimator seed, and the generator
/// that the estimator noise continues from. Every cell with the same seed
/// shares the instance and the noise.
pub fn estlab_instance(
    seed: u64,
    n_factors: usize,
    n_classes: usize,
    kind: ObjectiveKind,
) -> Result<(Matrix, ObjectiveSpec, Rng)> {
    let mut rng = rng::stream(seed, rng::ESTLAB);
    let logits = Matrix::from_fn(n_factors, n_classes, |_, _| StandardNormal.sample(&mut rng));
    let width = n_factors * n_classes;
    let objective = match kind {
        ObjectiveKind::Linear => Objective::random_linear(width, &mut rng),
        ObjectiveKind::Quadratic => Objective::random_quadratic(width, &mut rng),
    };
    Ok((logits, ObjectiveSpec::new(n_factors, n_classes, objective)?, rng))
}

/// One row of `estlab.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstlabRow {
    pub seed: u64,
    pub method: &'static str,
    pub temperature: f64,
    pub objective: &'static str,
    pub n_factors: usize,
    pub n_classes: usize,
    pub n_samples: usize,
    pub bias_kind: &'static str,
    pub bias_norm: f64,
    pub variance_trace: f64,
    pub std_error_norm: f64,
    pub exact_grad_norm: f64,
}

pub const ESTLAB_HEADER: [&str; 12] = [
    "seed",
    "method",
    "temperature",
    "objective",
    "n_factors",
    "n_classes",
    "n_samples",
    "bias_kind",
    "bias_norm",
    "variance_trace",
    "std_error_norm",
    "exact_grad_norm",
];

pub fn estlab_cell(cfg: &EstlabConfig, seed: u64, method: SampleMethod, temperature: f64) -> Result<EstlabRow> {
    let (logits, spec, mut rng) = estlab_instance(seed, cfg.n_factors, cfg.n_classes, cfg.objective)?;
    let r = estimator_stats(method, &logits, &spec, temperature, cfg.n_samples, &mut rng)?;
    Ok(EstlabRow {
        seed,
        method: method.name(),
        temperature,
        objective: cfg.objective.name(),
        n_factors: cfg.n_factors,
        n_classes: cfg.n_classes,
        n_samples: cfg.n_samples,
        bias_kind: r.bias_kind.name(),
        bias_norm: r.bias_norm,
        variance_trace: r.variance_trace,
        std_error_norm: r.std_error_norm,
        exact_grad_norm: l2_norm(r.exact_grad.as_slice()),
    })
}

/// Runs every grid cell in parallel and writes `estlab.csv`.
pub fn estlab_grid(cfg: &EstlabConfig, out: &Path) -> Result<Vec<EstlabRow>> {
    create_dir(out)?;
    let rows: Vec<EstlabRow> = cfg
        .cells()
        .into_par_iter()
        .map(|(seed, method, t)| estlab_cell(cfg, seed, method, t))
        .collect::<Result<_>>()?;
    let path = out.join(ESTLAB_CSV);
    if rows.is_empty() {
        write_header_only(&path, &ESTLAB_HEADER)?;
    } else {
        write_csv(&path, &rows)?;
    }
    Ok(rows)
}

/// What `catpol eval` prints.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub env: EnvKind,
    pub method: &'static str,
    pub n_factors: usize,
    pub n_classes: usize,
    pub stochastic: bool,
    pub report: EvalReport,
    /// Two-goal only: fraction of stochastic rollouts ending near each goal.
    pub goal_fractions: Option<[f64; 2]>,
}

/// Evaluates a snapshot from its stored evaluation stream. Repeated calls
/// give identical summaries.
pub fn evaluate_snapshot(snap: &Snapshot, episodes: usize, stochastic: bool) -> Result<EvalSummary> {
    let env = Env::new(snap.config.env);
    let run = |stochastic| {
        let opts = EvalOptions {
            stochastic,
            freeze_mode: false,
        };
        evaluate(&snap.policy, &env, episodes, &mut snap.rng.clone(), opts).map_err(|source| ExperimentError::Train {
            seed: snap.config.seed,
            source,
        })
    };
    let report = run(stochastic)?;
    let goal_fractions = if env.kind() != EnvKind::TwoGoal {
        None
    } else if stochastic {
        report.goal_fractions()
    } else {
        run(true)?.goal_fractions()
    };
    Ok(EvalSummary {
        env: snap.config.env,
        method: snap.config.method.name(),
        n_factors: snap.config.n_factors,
        n_classes: snap.config.n_classes,
        stochastic,
        report,
        goal_fractions,
    })
}

pub fn evaluate_checkpoint(path: &Path, episodes: usize, stochastic: bool) -> Result<EvalSummary> {
    let snap = Snapshot::from_checkpoint(&checkpoint::load(path)?)?;
    evaluate_snapshot(&snap, episodes, stochastic)
}

impl EvalSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let r = &self.report;
        let _ = writeln!(s, "env: {}", self.env.name());
        if self.method == "unimodal" {
            let _ = writeln!(s, "policy: unimodal");
        } else {
            let _ = writeln!(
                s,
                "policy: {} with {}x{} modes",
                self.method, self.n_factors, self.n_classes
            );
        }
        let kind = if self.stochastic { "stochastic" } else { "deterministic" };
        let _ = writeln!(
            s,
            "{kind} return over {} episodes: mean {} std {}",
            r.returns.len(),
            r.mean,
            r.std
        );
        if let Some(usage) = &r.mode_usage {
            let _ = writeln!(
                s,
                "mode usage ({} distinct, {} decisions):",
                usage.distinct(),
                usage.total()
            );
            for (mode, count) in &usage.counts {
                let _ = writeln!(s, "  mode {mode}: {count}");
            }
        }
        if let Some([right, left]) = self.goal_fractions {
            let _ = writeln!(
                s,
                "stochastic rollouts ending within reach: goal (+1, 0) {right}, goal (-1, 0) {left}"
            );
        }
        s
    }
}

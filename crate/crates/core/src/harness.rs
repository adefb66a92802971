//! Experiment driver behind the command line: config parsing, multi-seed
//! runs, archive snapshots, metric tables and standalone correction.
//!
//! Config schema (TOML, unknown keys rejected):
//!
//! ```toml
//! seeds = [0, 1, 2]
//! sampling_size = 1024
//! generations = 1000
//! output_dir = "results"          # relative to the config file
//! workers = 4                     # optional evaluation thread count
//!
//! [grid]
//! bins = [16, 16]
//! bounds = [[0.0, 1.0], [0.0, 1.0]]   # optional, unit box by default
//!
//! [truth]                         # optional, analytic by default
//! kind = "empirical"
//! reevaluations = 512
//!
//! [[runs]]
//! preset = "extract_me"
//! task = "arm_fit_noise"
//!
//! [[runs]]
//! task = "sphere"
//! genotype_dim = 4
//! noise = { kind = "fitness_gaussian", sigma = 0.1 }
//! [runs.operators]                # explicit operator block instead of a preset
//! name = "my_me"
//! first_eval_samples = 4
//! depth = 2
//! addition_policy = { kind = "order_fitness" }
//! selection = { kind = "uniform_top" }
//! extraction = { kind = "rank_weighted", base = 2.0 }
//! extraction_proportion = 0.25
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{AdditionPolicy, DepthGrid, GridSnapshot, GridSpec};
use crate::error::{Result, UqdError};
use crate::metrics::{
    average_samples, build_corrected_archive, corrected_qd_score, coverage, illusory_qd_score,
    GroundTruthSource,
};
use crate::operators::ExtractionOp;
use crate::scheduler::{preset, AlgorithmConfig, GenerationReport, Run, PRESET_NAMES};
use crate::solution::Aggregator;
use crate::tasks::{NoiseModel, Task, TaskSpec};

/// Overrides `output_dir` of every experiment config when set.
pub const OUTPUT_ROOT_ENV: &str = "UQD_OUTPUT_ROOT";

pub const METRICS_FILE: &str = "metrics.csv";
pub const GENERATIONS_FILE: &str = "generations.csv";
pub const ILLUSORY_FILE: &str = "illusory_archive.json";
pub const CORRECTED_FILE: &str = "corrected_archive.json";

pub const STATUS_OK: &str = "ok";
pub const STATUS_UNDEFINED: &str = "undefined";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub bins: Vec<usize>,
    #[serde(default)]
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl GridConfig {
    /// Grid shape at depth 1; runs substitute their own depth.
    pub fn spec(&self) -> Result<GridSpec> {
        match &self.bounds {
            None => GridSpec::new(self.bins.clone(), 1),
            Some(b) => GridSpec::with_bounds(self.bins.clone(), b.clone(), 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunEntry {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub operators: Option<AlgorithmConfig>,
    pub task: String,
    #[serde(default)]
    pub noise: Option<NoiseModel>,
    #[serde(default)]
    pub genotype_dim: Option<usize>,
}

impl RunEntry {
    pub fn algorithm(&self) -> Result<AlgorithmConfig> {
        match (&self.preset, &self.operators) {
            (Some(name), None) => preset(name),
            (None, Some(config)) => {
                config.validate()?;
                Ok(config.clone())
            }
            _ => Err(UqdError::Config(
                "each run needs exactly one of `preset` or `operators`".into(),
            )),
        }
    }

    pub fn task(&self) -> Result<Task> {
        let task = Task::by_name(&self.task, self.genotype_dim)?;
        match self.noise {
            Some(noise) => task.with_noise(noise),
            None => Ok(task),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: toml::Spanned<Vec<u64>>,
    pub sampling_size: usize,
    pub generations: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub workers: Option<usize>,
    pub grid: GridConfig,
    #[serde(default)]
    pub truth: GroundTruthSource,
    pub runs: toml::Spanned<Vec<toml::Spanned<RunEntry>>>,
}

/// One (algorithm, task, seed) cell of an experiment, fully resolved.
#[derive(Debug, Clone)]
pub struct RunCell {
    pub algorithm: AlgorithmConfig,
    pub task: Task,
    pub seed: u64,
}

impl RunCell {
    pub fn run_id(&self) -> String {
        format!("{}_{}_{}", self.algorithm.name, self.task.name(), self.seed)
    }
}

/// A validated experiment: every run cell plus shared settings.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cells: Vec<RunCell>,
    pub grid: GridSpec,
    pub sampling_size: usize,
    pub generations: u64,
    pub truth: GroundTruthSource,
    pub output_dir: PathBuf,
    pub workers: Option<usize>,
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

fn at_line(source: &str, span: std::ops::Range<usize>, msg: impl std::fmt::Display) -> UqdError {
    UqdError::Config(format!("line {}: {msg}", line_of(source, span.start)))
}

/// Parses and validates a config. `base_dir` anchors a relative
/// `output_dir`; `output_root` replaces it entirely.
pub fn parse_experiment(
    source: &str,
    base_dir: &Path,
    output_root: Option<&Path>,
) -> Result<Experiment> {
    // toml's own errors already carry line and column.
    let config: ExperimentConfig =
        toml::from_str(source).map_err(|e| UqdError::Config(e.to_string()))?;

    if config.seeds.get_ref().is_empty() {
        return Err(at_line(source, config.seeds.span(), "`seeds` must not be empty"));
    }
    if config.runs.get_ref().is_empty() {
        return Err(at_line(source, config.runs.span(), "`runs` must not be empty"));
    }
    if config.generations == 0 {
        return Err(UqdError::Config("`generations` must be at least 1".into()));
    }
    let grid = config.grid.spec()?;
    if let GroundTruthSource::Empirical { reevaluations: 0 } = config.truth {
        return Err(UqdError::Config(
            "empirical ground truth needs at least one re-evaluation".into(),
        ));
    }

    let mut cells = Vec::new();
    for entry in config.runs.get_ref() {
        let span = entry.span();
        let run = entry.get_ref();
        let algorithm = run.algorithm().map_err(|e| at_line(source, span.clone(), e))?;
        let task = run.task().map_err(|e| at_line(source, span.clone(), e))?;
        if task.descriptor_dim() != grid.dims() {
            return Err(at_line(
                source,
                span,
                format!(
                    "task `{}` has a {}-D descriptor but the grid has {} dimensions",
                    task.name(),
                    task.descriptor_dim(),
                    grid.dims()
                ),
            ));
        }
        for &seed in config.seeds.get_ref() {
            cells.push(RunCell {
                algorithm: algorithm.clone(),
                task: task.clone(),
                seed,
            });
        }
    }
    let mut ids: Vec<String> = cells.iter().map(RunCell::run_id).collect();
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(UqdError::Config(format!("duplicate run `{}`", w[0])));
    }

    let output_dir = match output_root {
        Some(root) => root.to_path_buf(),
        None if config.output_dir.is_absolute() => config.output_dir.clone(),
        None => base_dir.join(&config.output_dir),
    };
    Ok(Experiment {
        cells,
        grid,
        sampling_size: config.sampling_size,
        generations: config.generations,
        truth: config.truth,
        output_dir,
        workers: config.workers,
    })
}

/// Archive as written to disk, with enough metadata to re-correct it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveFile {
    pub algorithm: String,
    pub task: TaskSpec,
    pub seed: u64,
    pub addition_policy: AdditionPolicy,
    pub aggregator: Aggregator,
    /// Normalized QD-score of the top layer as stored.
    pub qd_score: f64,
    pub grid: GridSnapshot,
}

impl ArchiveFile {
    fn of(grid: &DepthGrid, algorithm: &str, task: &Task, seed: u64, aggregator: Aggregator) -> Self {
        ArchiveFile {
            algorithm: algorithm.to_string(),
            task: task.spec().clone(),
            seed,
            addition_policy: *grid.policy(),
            aggregator,
            qd_score: illusory_qd_score(grid, task.fitness_bounds()).score,
            grid: grid.to_snapshot(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(path, json)?;
        Ok(())
    }

    /// Task and grid rebuilt from the file, checked against each other.
    pub fn restore(&self) -> Result<(Task, DepthGrid)> {
        let task = Task::from_spec(self.task.clone())
            .map_err(|e| UqdError::SnapshotMismatch(e.to_string()))?;
        if self.grid.spec.dims() != task.descriptor_dim() {
            return Err(UqdError::SnapshotMismatch(format!(
                "grid has {} dimensions, task `{}` has a {}-D descriptor",
                self.grid.spec.dims(),
                task.name(),
                task.descriptor_dim()
            )));
        }
        for cell in &self.grid.cells {
            for slot in &cell.slots {
                if slot.genotype.len() != task.genotype_dim() {
                    return Err(UqdError::SnapshotMismatch(format!(
                        "record {} has {} genes, task `{}` expects {}",
                        slot.id,
                        slot.genotype.len(),
                        task.name(),
                        task.genotype_dim()
                    )));
                }
                if let Some(s) = slot.samples.iter().find(|s| s.descriptor.len() != task.descriptor_dim()) {
                    return Err(UqdError::SnapshotMismatch(format!(
                        "record {} has a {}-D descriptor sample, task `{}` expects {}",
                        slot.id,
                        s.descriptor.len(),
                        task.name(),
                        task.descriptor_dim()
                    )));
                }
            }
        }
        let grid = DepthGrid::from_snapshot(self.grid.clone(), self.addition_policy, self.aggregator)?;
        Ok((task, grid))
    }
}

/// Final metrics of one run cell. Metric fields are `None` when the cell is
/// undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub run_id: String,
    pub seed: u64,
    pub algorithm: String,
    pub task: String,
    pub status: String,
    pub corrected_qd_score: Option<f64>,
    pub illusory_qd_score: Option<f64>,
    pub coverage: Option<f64>,
    pub average_samples: Option<f64>,
    pub evals_total: usize,
    pub clamped: usize,
}

impl CellOutcome {
    pub fn is_defined(&self) -> bool {
        self.status == STATUS_OK
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub output_dir: PathBuf,
    pub outcomes: Vec<CellOutcome>,
}

/// Runs every cell of a config file and writes its artifacts.
pub fn cli_run(config_path: &Path) -> Result<ExperimentSummary> {
    let source = fs::read_to_string(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    let experiment = parse_experiment(&source, base, root.as_deref())?;
    run_experiment(&experiment)
}

pub fn run_experiment(experiment: &Experiment) -> Result<ExperimentSummary> {
    fs::create_dir_all(&experiment.output_dir)?;
    let go = || -> Result<Vec<CellOutcome>> {
        experiment
            .cells
            .par_iter()
            .map(|cell| run_cell(experiment, cell))
            .collect()
    };
    let outcomes = match experiment.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| UqdError::Config(format!("cannot start {n} workers: {e}")))?
            .install(go)?,
        None => go()?,
    };
    write_metrics_csv(&experiment.output_dir.join(METRICS_FILE), &outcomes)?;
    Ok(ExperimentSummary {
        output_dir: experiment.output_dir.clone(),
        outcomes,
    })
}

fn run_cell(experiment: &Experiment, cell: &RunCell) -> Result<CellOutcome> {
    let run_id = cell.run_id();
    let dir = experiment.output_dir.join(&run_id);
    fs::create_dir_all(&dir)?;
    for stale in [ILLUSORY_FILE, CORRECTED_FILE] {
        let path = dir.join(stale);
        if path.exists() {
            fs::remove_file(path)?;
        }
    }
    let mut outcome = CellOutcome {
        run_id,
        seed: cell.seed,
        algorithm: cell.algorithm.name.clone(),
        task: cell.task.name().to_string(),
        status: STATUS_OK.to_string(),
        corrected_qd_score: None,
        illusory_qd_score: None,
        coverage: None,
        average_samples: None,
        evals_total: 0,
        clamped: 0,
    };

    let mut state = Run::new(
        cell.algorithm.clone(),
        cell.task.clone(),
        &experiment.grid,
        experiment.sampling_size,
        cell.seed,
    )?;
    let mut undefined = false;
    for _ in 0..experiment.generations {
        match state.step() {
            Ok(_) => {}
            Err(UqdError::BudgetExceeded { .. }) => {
                undefined = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    write_generations_csv(&dir.join(GENERATIONS_FILE), state.reports())?;
    outcome.evals_total = state.ledger().spent_total;
    if undefined {
        outcome.status = STATUS_UNDEFINED.to_string();
        return Ok(outcome);
    }

    let result = state.finish()?;
    let bounds = cell.task.fitness_bounds();
    let grid = &result.final_grid;
    let illusory = ArchiveFile::of(
        grid,
        &cell.algorithm.name,
        &cell.task,
        cell.seed,
        cell.algorithm.aggregator,
    );
    illusory.save(&dir.join(ILLUSORY_FILE))?;

    let top = grid.top_layer();
    let corrected =
        build_corrected_archive(&top, experiment.truth, &cell.task, grid.spec(), cell.seed)?;
    let score = corrected_qd_score(&corrected, bounds);
    ArchiveFile::of(
        &corrected,
        &cell.algorithm.name,
        &cell.task,
        cell.seed,
        experiment.truth.aggregator(),
    )
    .save(&dir.join(CORRECTED_FILE))?;

    outcome.corrected_qd_score = Some(score.score);
    outcome.clamped = score.clamped;
    outcome.illusory_qd_score = Some(illusory.qd_score);
    outcome.coverage = Some(coverage(grid));
    outcome.average_samples = average_samples(top.iter().copied());
    Ok(outcome)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv(path: &Path, outcomes: &[CellOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record([
        "run_id",
        "seed",
        "algorithm",
        "task",
        "generation",
        "status",
        "corrected_qd_score",
        "illusory_qd_score",
        "coverage",
        "average_samples",
        "evals_total",
        "clamped",
    ])
    .map_err(csv_error)?;
    for o in outcomes {
        w.write_record([
            o.run_id.clone(),
            o.seed.to_string(),
            o.algorithm.clone(),
            o.task.clone(),
            "final".to_string(),
            o.status.clone(),
            opt(o.corrected_qd_score),
            opt(o.illusory_qd_score),
            opt(o.coverage),
            opt(o.average_samples),
            o.evals_total.to_string(),
            o.clamped.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_generations_csv(path: &Path, reports: &[GenerationReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record([
        "generation",
        "evals_used",
        "offspring",
        "extracted",
        "occupied_cells",
        "illusory_qd_score",
        "average_samples",
        "max_eval_count",
    ])
    .map_err(csv_error)?;
    for r in reports {
        w.write_record([
            r.generation.to_string(),
            r.evals_used.to_string(),
            r.offspring.to_string(),
            r.extracted.to_string(),
            r.occupied_cells.to_string(),
            r.illusory_qd_score.to_string(),
            opt(r.average_samples),
            r.max_eval_count.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> UqdError {
    UqdError::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionSummary {
    pub output: PathBuf,
    pub corrected_qd_score: f64,
    pub illusory_qd_score: f64,
    pub clamped: usize,
}

/// Default output path for a correction of `input`: `<stem>.corrected.json`
/// next to it.
pub fn corrected_path_for(input: &Path) -> PathBuf {
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "archive".into());
    input.with_file_name(format!("{stem}.corrected.json"))
}

/// Re-corrects a stored archive against ground truth.
pub fn cli_correct(
    snapshot: &Path,
    truth: GroundTruthSource,
    output: Option<&Path>,
) -> Result<CorrectionSummary> {
    let file = ArchiveFile::load(snapshot)?;
    let (task, grid) = file.restore()?;
    let top = grid.top_layer();
    let corrected = build_corrected_archive(&top, truth, &task, grid.spec(), file.seed)?;
    let score = corrected_qd_score(&corrected, task.fitness_bounds());
    let out = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| corrected_path_for(snapshot));
    ArchiveFile::of(&corrected, &file.algorithm, &task, file.seed, truth.aggregator()).save(&out)?;
    Ok(CorrectionSummary {
        output: out,
        corrected_qd_score: score.score,
        illusory_qd_score: file.qd_score,
        clamped: score.clamped,
    })
}

/// Renders the preset registry as a fixed-width table.
pub fn cli_list_presets() -> String {
    let header = [
        "preset",
        "samples N",
        "depth d",
        "depth ordering",
        "selection",
        "extraction",
        "extracts",
    ];
    let mut rows: Vec<[String; 7]> = vec![header.map(String::from)];
    for name in PRESET_NAMES {
        let c = preset(name).expect("registered preset");
        let extraction = match c.extraction {
            ExtractionOp::RankWeighted { base } => format!(
                "{} (p={}, base {})",
                c.extraction.label(),
                c.extraction_proportion,
                base
            ),
            other => other.label().to_string(),
        };
        rows.push([
            name.to_string(),
            c.first_eval_samples.to_string(),
            c.depth.to_string(),
            c.addition_policy.label().to_string(),
            c.selection.label().to_string(),
            extraction,
            c.extraction.count_formula().to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..7)
        .map(|k| rows.iter().map(|r| r[k].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

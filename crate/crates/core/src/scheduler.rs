//! Generation loop under a fixed per-generation evaluation budget, and the
//! named algorithm presets.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{bin_descriptor, AdditionPolicy, DepthGrid, GridSpec};
use crate::error::{Result, UqdError};
use crate::metrics::{average_samples, normalized_fitness_sum};
use crate::operators::{
    extract_adaptive_challenge, extract_full_archive, extract_rank_weighted, ExtractionOp, Parent,
    SelectionOp, VariationOp,
};
use crate::rng::{substream, Stream};
use crate::solution::{Aggregator, EvalSample, Genotype, SampleBuffer, SolutionRecord};
use crate::tasks::Task;

pub const DEFAULT_SAMPLING_SIZE: usize = 1024;
pub const DEFAULT_EXTRACTION_PROPORTION: f64 = 0.25;
pub const DEFAULT_EXTRACTION_BASE: f64 = 2.0;
pub const DEFAULT_DELTA_FITNESS: f64 = 0.01;
pub const DEFAULT_DELTA_REPROD: f64 = 0.005;

pub const PRESET_NAMES: [&str; 12] = [
    "vanilla_me",
    "me_sampling",
    "archive_sampling",
    "deep_grid",
    "adapt_me",
    "extract_me",
    "me_reprod",
    "me_weighted",
    "me_low_spread",
    "me_delta",
    "as_weighted",
    "as_delta",
];

const UNIMPLEMENTED_PRESETS: [(&str, &str); 2] = [
    ("mome_x", "needs a Pareto-front container"),
    ("aria", "needs a constrained evolution-strategy variation operator"),
];

/// A full operator assembly defining one algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub name: String,
    /// Samples spent on the first evaluation of an offspring.
    pub first_eval_samples: usize,
    /// Samples spent per re-evaluation; defaults to `first_eval_samples`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reeval_samples: Option<usize>,
    pub depth: usize,
    pub addition_policy: AdditionPolicy,
    pub selection: SelectionOp,
    #[serde(default)]
    pub variation: VariationOp,
    pub extraction: ExtractionOp,
    #[serde(default)]
    pub extraction_proportion: f64,
    #[serde(default)]
    pub aggregator: Aggregator,
}

impl AlgorithmConfig {
    fn base(name: &str, samples: usize, depth: usize) -> Self {
        AlgorithmConfig {
            name: name.to_string(),
            first_eval_samples: samples,
            reeval_samples: None,
            depth,
            addition_policy: AdditionPolicy::OrderFitness,
            selection: SelectionOp::UniformTop,
            variation: VariationOp::default(),
            extraction: ExtractionOp::None,
            extraction_proportion: 0.0,
            aggregator: Aggregator::Mean,
        }
    }

    pub fn reeval_samples(&self) -> usize {
        self.reeval_samples.unwrap_or(self.first_eval_samples)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(UqdError::Config(msg));
        if self.first_eval_samples == 0 {
            return fail("first_eval_samples must be at least 1".into());
        }
        if self.reeval_samples == Some(0) {
            return fail("reeval_samples must be at least 1".into());
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        let p = self.extraction_proportion;
        if !(0.0..1.0).contains(&p) {
            return fail(format!("extraction_proportion must lie in [0, 1), got {p}"));
        }
        if self.extraction == ExtractionOp::None && p != 0.0 {
            return fail("extraction_proportion must be 0 without an extraction operator".into());
        }
        if let ExtractionOp::RankWeighted { base } = self.extraction {
            if !(base > 1.0) {
                return fail(format!("rank-weighted extraction needs base > 1, got {base}"));
            }
        }
        if self.addition_policy.is_challenge() && self.depth != 1 {
            return fail(format!(
                "addition policy `{}` compares against a single incumbent and needs depth 1",
                self.addition_policy.label()
            ));
        }
        self.variation.validate()
    }
}

/// Returns the named algorithm assembled from its table row.
pub fn preset(name: &str) -> Result<AlgorithmConfig> {
    let weighted = AdditionPolicy::OrderWeighted {
        fitness_weight: 1.0,
        reprod_weight: 1.0,
    };
    let delta = AdditionPolicy::ChallengeDelta {
        delta_fitness: DEFAULT_DELTA_FITNESS,
        delta_reprod: DEFAULT_DELTA_REPROD,
    };
    let config = match name {
        "vanilla_me" => AlgorithmConfig::base(name, 1, 1),
        "me_sampling" => AlgorithmConfig::base(name, 32, 1),
        "archive_sampling" => AlgorithmConfig {
            extraction: ExtractionOp::FullArchive,
            ..AlgorithmConfig::base(name, 2, 2)
        },
        "deep_grid" => AlgorithmConfig {
            addition_policy: AdditionPolicy::OrderSeniorityThenFitness,
            selection: SelectionOp::FitnessProportionalDepth,
            ..AlgorithmConfig::base(name, 1, 32)
        },
        "adapt_me" => AlgorithmConfig {
            extraction: ExtractionOp::AdaptiveChallenge,
            ..AlgorithmConfig::base(name, 1, 8)
        },
        "extract_me" => AlgorithmConfig {
            extraction: ExtractionOp::RankWeighted {
                base: DEFAULT_EXTRACTION_BASE,
            },
            extraction_proportion: DEFAULT_EXTRACTION_PROPORTION,
            ..AlgorithmConfig::base(name, 2, 8)
        },
        "me_reprod" => AlgorithmConfig {
            addition_policy: AdditionPolicy::OrderReprod,
            ..AlgorithmConfig::base(name, 32, 1)
        },
        "me_weighted" => AlgorithmConfig {
            addition_policy: weighted,
            ..AlgorithmConfig::base(name, 32, 1)
        },
        "me_low_spread" => AlgorithmConfig {
            addition_policy: AdditionPolicy::ChallengeLowSpread,
            ..AlgorithmConfig::base(name, 32, 1)
        },
        "me_delta" => AlgorithmConfig {
            addition_policy: delta,
            ..AlgorithmConfig::base(name, 32, 1)
        },
        "as_weighted" => AlgorithmConfig {
            addition_policy: weighted,
            extraction: ExtractionOp::FullArchive,
            ..AlgorithmConfig::base(name, 2, 2)
        },
        // Challenge policies compare against one incumbent, so depth is 1.
        "as_delta" => AlgorithmConfig {
            addition_policy: delta,
            extraction: ExtractionOp::FullArchive,
            ..AlgorithmConfig::base(name, 2, 1)
        },
        other => {
            if let Some((_, why)) = UNIMPLEMENTED_PRESETS.iter().find(|(n, _)| *n == other) {
                return Err(UqdError::Config(format!(
                    "preset `{other}` is not implemented: it {why}"
                )));
            }
            return Err(UqdError::UnknownPreset {
                name: other.to_string(),
                valid: PRESET_NAMES.join(", "),
            });
        }
    };
    Ok(config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BudgetPlan {
    /// Solution-evaluations the budget affords at `first_eval_samples` each.
    pub batch: usize,
    pub offspring: usize,
    pub extract: usize,
}

/// Splits the per-generation budget `sampling_size` between new offspring and
/// re-evaluated elites.
pub fn plan_budget(
    config: &AlgorithmConfig,
    sampling_size: usize,
    occupied_slots: usize,
) -> Result<BudgetPlan> {
    let n = config.first_eval_samples;
    let n_re = config.reeval_samples();
    if sampling_size < n {
        return Err(UqdError::SamplingSizeTooSmall {
            sampling_size,
            samples: n,
        });
    }
    let batch = sampling_size / n;
    let extract = match config.extraction {
        ExtractionOp::None | ExtractionOp::AdaptiveChallenge => 0,
        ExtractionOp::FullArchive => {
            // At least one offspring must remain affordable.
            if occupied_slots * n_re > sampling_size - n {
                return Err(UqdError::BudgetExceeded {
                    slots: occupied_slots,
                    reeval_samples: n_re,
                    available: sampling_size - n,
                });
            }
            occupied_slots
        }
        ExtractionOp::RankWeighted { .. } => {
            let wanted = (config.extraction_proportion * batch as f64).floor() as usize;
            wanted.min(occupied_slots)
        }
    };
    let offspring = (sampling_size - extract * n_re) / n;
    Ok(BudgetPlan {
        batch,
        offspring,
        extract,
    })
}

/// Per-generation evaluation accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub sampling_size: usize,
    pub spent_this_generation: usize,
    pub spent_total: usize,
}

impl BudgetLedger {
    pub fn new(sampling_size: usize) -> Self {
        BudgetLedger {
            sampling_size,
            spent_this_generation: 0,
            spent_total: 0,
        }
    }

    pub fn reset(&mut self) {
        self.spent_this_generation = 0;
    }

    pub fn remaining(&self) -> usize {
        self.sampling_size - self.spent_this_generation
    }

    pub fn charge(&mut self, evaluations: usize) -> Result<()> {
        if evaluations > self.remaining() {
            return Err(UqdError::Config(format!(
                "generation would spend {} evaluations, over the sampling size {}",
                self.spent_this_generation + evaluations,
                self.sampling_size
            )));
        }
        self.spent_this_generation += evaluations;
        self.spent_total += evaluations;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub generation: u64,
    pub evals_used: usize,
    pub offspring: usize,
    pub extracted: usize,
    pub occupied_cells: usize,
    pub illusory_qd_score: f64,
    /// Mean eval count over the top layer; `None` for an empty archive.
    pub average_samples: Option<f64>,
    pub max_eval_count: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub final_grid: DepthGrid,
    pub reports: Vec<GenerationReport>,
    pub seed: u64,
    pub evals_total: usize,
}

/// Work item awaiting evaluation outside the grid (adaptive challenge only).
#[derive(Debug)]
struct Pending {
    record: SolutionRecord,
    samples: usize,
    /// Extracted incumbents go back through plain insertion; requeued
    /// offspring challenge again.
    incumbent: bool,
}

/// State of one optimization run.
#[derive(Debug)]
pub struct Run {
    config: AlgorithmConfig,
    task: Task,
    grid: DepthGrid,
    ledger: BudgetLedger,
    seed: u64,
    generation: u64,
    next_id: u64,
    pending: VecDeque<Pending>,
    reports: Vec<GenerationReport>,
}

impl Run {
    pub fn new(
        config: AlgorithmConfig,
        task: Task,
        grid_spec: &GridSpec,
        sampling_size: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if grid_spec.dims() != task.descriptor_dim() {
            return Err(UqdError::DimensionMismatch {
                expected: task.descriptor_dim(),
                got: grid_spec.dims(),
            });
        }
        if sampling_size < config.first_eval_samples {
            return Err(UqdError::SamplingSizeTooSmall {
                sampling_size,
                samples: config.first_eval_samples,
            });
        }
        let grid = DepthGrid::new(grid_spec.with_depth(config.depth), config.addition_policy)?;
        Ok(Run {
            config,
            task,
            grid,
            ledger: BudgetLedger::new(sampling_size),
            seed,
            generation: 0,
            next_id: 0,
            pending: VecDeque::new(),
            reports: Vec::new(),
        })
    }

    pub fn grid(&self) -> &DepthGrid {
        &self.grid
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn reports(&self) -> &[GenerationReport] {
        &self.reports
    }

    pub fn config(&self) -> &AlgorithmConfig {
        &self.config
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    /// Runs one generation and returns its report.
    pub fn step(&mut self) -> Result<&GenerationReport> {
        self.ledger.reset();
        let (offspring, extracted) = match self.config.extraction {
            ExtractionOp::AdaptiveChallenge => self.step_adaptive()?,
            _ => self.step_batched()?,
        };
        let top = self.grid.top_layer();
        let report = GenerationReport {
            generation: self.generation,
            evals_used: self.ledger.spent_this_generation,
            offspring,
            extracted,
            occupied_cells: self.grid.occupied_cells(),
            illusory_qd_score: normalized_fitness_sum(top.iter().copied(), self.task.fitness_bounds())
                .score,
            average_samples: average_samples(top.iter().copied()),
            max_eval_count: self.grid.records().map(|r| r.eval_count()).max().unwrap_or(0),
        };
        self.reports.push(report);
        self.generation += 1;
        Ok(self.reports.last().expect("report just pushed"))
    }

    /// Plan, select, extract, vary, evaluate, insert.
    fn step_batched(&mut self) -> Result<(usize, usize)> {
        let plan = plan_budget(
            &self.config,
            self.ledger.sampling_size,
            self.grid.occupied_slot_count(),
        )?;
        // Parents are read before extraction so that emptying extractors
        // still breed from the current archive.
        let children = self.breed(plan.offspring)?;
        let mut rng = substream(self.seed, self.generation, Stream::Extraction, 0);
        let mut extracted = match self.config.extraction {
            ExtractionOp::None | ExtractionOp::AdaptiveChallenge => Vec::new(),
            ExtractionOp::FullArchive => extract_full_archive(&mut self.grid),
            ExtractionOp::RankWeighted { base } => {
                extract_rank_weighted(&mut self.grid, plan.extract, base, &mut rng)?
            }
        };
        debug_assert_eq!(extracted.len(), plan.extract);

        let n = self.config.first_eval_samples;
        let n_re = self.config.reeval_samples();
        let extract_count = extracted.len();
        let offspring_count = children.len();
        self.ledger.charge(extract_count * n_re + offspring_count * n)?;

        // Extracted elites first, then offspring: one evaluation batch.
        let jobs: Vec<(&Genotype, usize)> = extracted
            .iter()
            .map(|r| (r.genotype(), n_re))
            .chain(children.iter().map(|(g, _)| (g, n)))
            .collect();
        let mut samples = self.evaluate(&jobs)?.into_iter();
        for record in extracted.iter_mut() {
            record.append_samples(samples.next().expect("one batch per job"))?;
        }
        let mut fresh = Vec::with_capacity(offspring_count);
        for (genotype, parent) in children {
            let batch = samples.next().expect("one batch per job");
            fresh.push(self.new_record(genotype, batch, parent)?);
        }
        for record in extracted.into_iter().chain(fresh) {
            self.grid.insert(record)?;
        }
        Ok((offspring_count, extract_count))
    }

    /// Batched adaptive challenge: pending re-evaluations are served first,
    /// the rest of the budget goes to offspring.
    fn step_adaptive(&mut self) -> Result<(usize, usize)> {
        let n = self.config.first_eval_samples;
        let budget = self.ledger.sampling_size;
        let mut served = Vec::new();
        let mut spent = 0;
        while let Some(front) = self.pending.front() {
            if spent + front.samples > budget {
                break;
            }
            spent += front.samples;
            served.push(self.pending.pop_front().expect("front exists"));
        }
        let offspring_count = (budget - spent) / n;
        let children = self.breed(offspring_count)?;
        self.ledger.charge(spent + offspring_count * n)?;

        let jobs: Vec<(&Genotype, usize)> = served
            .iter()
            .map(|p| (p.record.genotype(), p.samples))
            .chain(children.iter().map(|(g, _)| (g, n)))
            .collect();
        let mut samples = self.evaluate(&jobs)?.into_iter();
        let mut challengers = Vec::new();
        let served_count = served.len();
        for mut item in served {
            item.record
                .append_samples(samples.next().expect("one batch per job"))?;
            if item.incumbent {
                self.grid.insert(item.record)?;
            } else {
                challengers.push(item.record);
            }
        }
        for (genotype, parent) in children {
            let batch = samples.next().expect("one batch per job");
            challengers.push(self.new_record(genotype, batch, parent)?);
        }

        let n_re = self.config.reeval_samples();
        let result = extract_adaptive_challenge(&mut self.grid, challengers)?;
        for record in result.requeued {
            let index = bin_descriptor(record.descriptor(), self.grid.spec())?;
            let target = self.grid.cells()[index]
                .top()
                .map_or(record.eval_count() + 1, |r| r.eval_count());
            let samples = target.saturating_sub(record.eval_count()).max(1);
            self.pending.push_back(Pending {
                record,
                samples,
                incumbent: false,
            });
        }
        for record in result.extracted {
            self.pending.push_back(Pending {
                record,
                samples: n_re,
                incumbent: true,
            });
        }
        Ok((offspring_count, served_count))
    }

    /// Parents from the archive (or random genotypes while it is empty),
    /// varied into `count` children tagged with their first parent's id.
    fn breed(&mut self, count: usize) -> Result<Vec<(Genotype, Option<u64>)>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let (seed, generation) = (self.seed, self.generation);
        if self.grid.is_empty() {
            return Ok((0..count)
                .into_par_iter()
                .map(|i| {
                    let mut rng = substream(seed, generation, Stream::Init, i as u64);
                    (self.task.random_genotype(&mut rng), None)
                })
                .collect());
        }
        let mut rng = substream(seed, generation, Stream::Selection, 0);
        let parents: Vec<Parent> = self.config.selection.select(&self.grid, 2 * count, &mut rng)?;
        let variation = self.config.variation;
        parents
            .par_chunks(2)
            .enumerate()
            .map(|(i, pair)| {
                let mut rng = substream(seed, generation, Stream::Variation, i as u64);
                let child = variation.vary(&pair[0].genotype, &pair[1].genotype, &mut rng)?;
                Ok((child, Some(pair[0].id)))
            })
            .collect()
    }

    /// Evaluates every job in parallel; job `i` draws from its own stream, so
    /// the result does not depend on the worker count.
    fn evaluate(&self, jobs: &[(&Genotype, usize)]) -> Result<Vec<Vec<EvalSample>>> {
        let (seed, generation) = (self.seed, self.generation);
        jobs.par_iter()
            .enumerate()
            .map(|(i, (genotype, samples))| {
                let mut rng = substream(seed, generation, Stream::Evaluation, i as u64);
                (0..*samples)
                    .map(|_| self.task.evaluate(genotype, &mut rng))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| UqdError::Evaluation {
                generation,
                source: Box::new(e),
            })
    }

    fn new_record(
        &mut self,
        genotype: Genotype,
        samples: Vec<EvalSample>,
        parent: Option<u64>,
    ) -> Result<SolutionRecord> {
        let id = self.next_id;
        self.next_id += 1;
        SolutionRecord::new(
            id,
            genotype,
            SampleBuffer::from_samples(samples),
            self.config.aggregator,
            self.generation,
            parent,
        )
    }

    /// Ends the run. Incumbents still waiting for re-evaluation go back into
    /// the grid with the estimates they have.
    pub fn finish(mut self) -> Result<RunResult> {
        while let Some(item) = self.pending.pop_front() {
            if item.incumbent {
                self.grid.insert(item.record)?;
            }
        }
        Ok(RunResult {
            final_grid: self.grid,
            reports: self.reports,
            seed: self.seed,
            evals_total: self.ledger.spent_total,
        })
    }
}

/// Runs `generations` generations from an empty grid.
pub fn run(
    config: &AlgorithmConfig,
    task: &Task,
    grid_spec: &GridSpec,
    sampling_size: usize,
    generations: u64,
    seed: u64,
) -> Result<RunResult> {
    if generations == 0 {
        return Err(UqdError::Config("generations must be at least 1".into()));
    }
    let mut state = Run::new(config.clone(), task.clone(), grid_spec, sampling_size, seed)?;
    for _ in 0..generations {
        state.step()?;
    }
    state.finish()
}

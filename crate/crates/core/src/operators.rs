//! Selection, variation and extraction operators.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{bin_descriptor, DepthGrid, InsertOutcome};
use crate::error::{Result, UqdError};
use crate::solution::{Genotype, SolutionRecord};

/// Added to shifted fitness so the worst record of a cell keeps a non-zero
/// chance of being picked.
pub const FITNESS_PROPORTIONAL_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectionOp {
    UniformTop,
    FitnessProportionalDepth,
}

impl SelectionOp {
    pub fn select<R: Rng + ?Sized>(
        &self,
        grid: &DepthGrid,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<Parent>> {
        match self {
            SelectionOp::UniformTop => select_uniform_top(grid, k, rng),
            SelectionOp::FitnessProportionalDepth => select_fitness_proportional_depth(grid, k, rng),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SelectionOp::UniformTop => "uniform, top of depth",
            SelectionOp::FitnessProportionalDepth => "uniform, depth fit-prop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VariationOp {
    IsoLine { sigma_iso: f64, sigma_line: f64 },
    Gaussian { sigma: f64 },
}

impl Default for VariationOp {
    fn default() -> Self {
        VariationOp::IsoLine {
            sigma_iso: 0.005,
            sigma_line: 0.05,
        }
    }
}

impl VariationOp {
    /// Produces one child. `second` is only used by operators that combine
    /// two parents.
    pub fn vary<R: Rng + ?Sized>(
        &self,
        first: &Genotype,
        second: &Genotype,
        rng: &mut R,
    ) -> Result<Genotype> {
        match *self {
            VariationOp::IsoLine {
                sigma_iso,
                sigma_line,
            } => variation_iso_line(first, second, sigma_iso, sigma_line, rng),
            VariationOp::Gaussian { sigma } => Ok(variation_gaussian(first, sigma, rng)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            VariationOp::IsoLine {
                sigma_iso,
                sigma_line,
            } => sigma_iso >= 0.0 && sigma_line >= 0.0,
            VariationOp::Gaussian { sigma } => sigma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(UqdError::Config("variation sigmas must be non-negative".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractionOp {
    None,
    FullArchive,
    RankWeighted { base: f64 },
    AdaptiveChallenge,
}

impl ExtractionOp {
    pub fn label(&self) -> &'static str {
        match self {
            ExtractionOp::None => "-",
            ExtractionOp::FullArchive => "grid content",
            ExtractionOp::RankWeighted { .. } => "pb sampled elites",
            ExtractionOp::AdaptiveChallenge => "subset of buffer and grid",
        }
    }

    pub fn count_formula(&self) -> &'static str {
        match self {
            ExtractionOp::None => "0",
            ExtractionOp::FullArchive => "Cd",
            ExtractionOp::RankWeighted { .. } => "min(pb, C)",
            ExtractionOp::AdaptiveChallenge => "<= b + bd",
        }
    }
}

/// A parent copied out of the archive.
#[derive(Debug, Clone, PartialEq)]
pub struct Parent {
    pub id: u64,
    pub genotype: Genotype,
}

impl Parent {
    fn of(record: &SolutionRecord) -> Self {
        Parent {
            id: record.id(),
            genotype: record.genotype().clone(),
        }
    }
}

/// `k` uniform draws with replacement over the top layer.
pub fn select_uniform_top<R: Rng + ?Sized>(
    grid: &DepthGrid,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Parent>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let top = grid.top_layer();
    if top.is_empty() {
        return Err(UqdError::EmptyArchive);
    }
    Ok((0..k)
        .map(|_| Parent::of(top[rng.random_range(0..top.len())]))
        .collect())
}

/// Uniform over non-empty cells, then within the cell proportionally to
/// `f - f_min + epsilon`.
pub fn select_fitness_proportional_depth<R: Rng + ?Sized>(
    grid: &DepthGrid,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Parent>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let cells: Vec<_> = grid.cells().iter().filter(|c| !c.is_empty()).collect();
    if cells.is_empty() {
        return Err(UqdError::EmptyArchive);
    }
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let cell = cells[rng.random_range(0..cells.len())];
        let weights = within_cell_weights(cell.records().map(|r| r.fitness()));
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        out.push(Parent::of(&cell.slots()[pick].record));
    }
    Ok(out)
}

/// Shifted fitness weights used by fitness-proportional depth selection.
pub fn within_cell_weights(fitness: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let min = fitness.clone().fold(f64::INFINITY, f64::min);
    fitness
        .map(|f| f - min + FITNESS_PROPORTIONAL_EPSILON)
        .collect()
}

/// `clip(p1 + sigma_iso * N(0, I) + sigma_line * N(0, 1) * (p2 - p1))`.
pub fn variation_iso_line<R: Rng + ?Sized>(
    first: &Genotype,
    second: &Genotype,
    sigma_iso: f64,
    sigma_line: f64,
    rng: &mut R,
) -> Result<Genotype> {
    if first.len() != second.len() {
        return Err(UqdError::DimensionMismatch {
            expected: first.len(),
            got: second.len(),
        });
    }
    let line: f64 = rng.sample(StandardNormal);
    let child = first
        .values()
        .iter()
        .zip(second.values())
        .map(|(a, b)| {
            let iso: f64 = rng.sample(StandardNormal);
            a + sigma_iso * iso + sigma_line * line * (b - a)
        })
        .collect();
    Ok(Genotype::new(child))
}

pub fn variation_gaussian<R: Rng + ?Sized>(parent: &Genotype, sigma: f64, rng: &mut R) -> Genotype {
    Genotype::new(
        parent
            .values()
            .iter()
            .map(|a| a + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
}

fn cell_weight(len: usize, base: f64) -> f64 {
    (0..len).map(|r| base.powi(-(r as i32))).sum()
}

/// Draws `count` records without replacement over every occupied slot, the
/// slot at depth rank `r` weighing `base^-r`. Each draw removes its record
/// (shifting the rest of the cell up) before the next weights are computed.
pub fn extract_rank_weighted<R: Rng + ?Sized>(
    grid: &mut DepthGrid,
    count: usize,
    base: f64,
    rng: &mut R,
) -> Result<Vec<SolutionRecord>> {
    if !(base > 1.0) {
        return Err(UqdError::Config(format!(
            "rank-weighted extraction needs base > 1, got {base}"
        )));
    }
    let count = count.min(grid.occupied_slot_count());
    let mut cell_weights: Vec<f64> = grid
        .cells()
        .iter()
        .map(|c| cell_weight(c.len(), base))
        .collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = cell_weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = None;
        let mut last = None;
        'cells: for (index, cell) in grid.cells().iter().enumerate() {
            if cell.is_empty() {
                continue;
            }
            last = Some((index, cell.len() - 1));
            if u >= cell_weights[index] {
                u -= cell_weights[index];
                continue;
            }
            for rank in 0..cell.len() {
                let w = base.powi(-(rank as i32));
                if u < w {
                    chosen = Some((index, rank));
                    break 'cells;
                }
                u -= w;
            }
            // Rounding left us past the last slot of this cell.
            chosen = Some((index, cell.len() - 1));
            break;
        }
        let (index, rank) = chosen.or(last).expect("grid has occupied slots");
        out.push(grid.remove_at(index, rank));
        cell_weights[index] = cell_weight(grid.cells()[index].len(), base);
    }
    Ok(out)
}

/// Removes and returns every record, depth included.
pub fn extract_full_archive(grid: &mut DepthGrid) -> Vec<SolutionRecord> {
    grid.drain()
}

/// Result of challenging cell incumbents with freshly evaluated offspring.
#[derive(Debug, Default)]
pub struct ChallengeResult {
    /// Offspring stored in the grid, with their insertion outcome.
    pub admitted: Vec<(u64, InsertOutcome)>,
    /// Offspring that need more samples before they can challenge.
    pub requeued: Vec<SolutionRecord>,
    /// Incumbents pulled out of the grid for one more evaluation.
    pub extracted: Vec<SolutionRecord>,
    pub discarded: Vec<SolutionRecord>,
}

impl ChallengeResult {
    pub fn to_reevaluate(&self) -> usize {
        self.requeued.len() + self.extracted.len()
    }
}

/// Challenges each offspring (in order) against the top incumbent of its
/// cell:
///
/// - empty cell: admitted;
/// - fewer samples than the incumbent: queued for another evaluation;
/// - at least as many samples and strictly better fitness: admitted, the
///   incumbent stays in the depth below;
/// - otherwise: discarded, and the incumbent is extracted for one more
///   evaluation.
pub fn extract_adaptive_challenge(
    grid: &mut DepthGrid,
    offspring: Vec<SolutionRecord>,
) -> Result<ChallengeResult> {
    let mut result = ChallengeResult::default();
    for candidate in offspring {
        let index = bin_descriptor(candidate.descriptor(), grid.spec())?;
        let incumbent = grid.cells()[index]
            .top()
            .map(|r| (r.id(), r.eval_count(), r.fitness()));
        match incumbent {
            None => {
                let id = candidate.id();
                let outcome = grid.insert(candidate)?;
                result.admitted.push((id, outcome));
            }
            Some((_, count, _)) if candidate.eval_count() < count => {
                result.requeued.push(candidate);
            }
            Some((_, _, fitness)) if candidate.fitness() > fitness => {
                let id = candidate.id();
                let outcome = grid.insert(candidate)?;
                result.admitted.push((id, outcome));
            }
            Some((incumbent_id, _, _)) => {
                result.discarded.push(candidate);
                result.extracted.push(grid.remove(incumbent_id)?);
            }
        }
    }
    Ok(result)
}

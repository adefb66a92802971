//! Corrected-archive evaluation: ground-truth re-placement of the returned
//! collection, normalized QD-score, average samples and coverage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{AdditionPolicy, DepthGrid, GridSpec};
use crate::error::{Result, UqdError};
use crate::rng::{substream, Stream};
use crate::solution::{Aggregator, SampleBuffer, SolutionRecord};
use crate::tasks::Task;

pub const DEFAULT_REEVALUATIONS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GroundTruthSource {
    /// Noiseless evaluator of the task.
    Analytic,
    /// Median over `reevaluations` fresh noisy evaluations.
    Empirical { reevaluations: usize },
}

impl Default for GroundTruthSource {
    fn default() -> Self {
        GroundTruthSource::Analytic
    }
}

impl GroundTruthSource {
    pub fn aggregator(&self) -> Aggregator {
        match self {
            GroundTruthSource::Analytic => Aggregator::Mean,
            GroundTruthSource::Empirical { .. } => Aggregator::Median,
        }
    }
}

/// Re-places `illusory_top` into an empty depth-1 fitness grid using ground
/// truth. Records keep their id and genotype; their buffer holds only the
/// ground-truth evaluations. `seed` keys a dedicated correction stream so the
/// optimization run is never perturbed.
pub fn build_corrected_archive(
    illusory_top: &[&SolutionRecord],
    truth: GroundTruthSource,
    task: &Task,
    grid_spec: &GridSpec,
    seed: u64,
) -> Result<DepthGrid> {
    let mut corrected = DepthGrid::new(grid_spec.with_depth(1), AdditionPolicy::OrderFitness)?;
    for (i, record) in illusory_top.iter().enumerate() {
        let buffer = match truth {
            GroundTruthSource::Analytic => {
                SampleBuffer::from_samples([task.ground_truth(record.genotype())?])
            }
            GroundTruthSource::Empirical { reevaluations } => {
                if reevaluations == 0 {
                    return Err(UqdError::Config(
                        "empirical ground truth needs at least one re-evaluation".into(),
                    ));
                }
                let mut rng = substream(seed, 0, Stream::Correction, i as u64);
                let samples = (0..reevaluations)
                    .map(|_| task.evaluate(record.genotype(), &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                SampleBuffer::from_samples(samples)
            }
        };
        let corrected_record = SolutionRecord::new(
            record.id(),
            record.genotype().clone(),
            buffer,
            truth.aggregator(),
            record.birth_generation(),
            record.parent_id(),
        )?;
        corrected.insert(corrected_record)?;
    }
    Ok(corrected)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QdScore {
    pub score: f64,
    /// Number of records whose fitness fell outside the declared bounds and
    /// was clamped.
    pub clamped: usize,
}

/// Sum over records of `(f - f_min) / (f_max - f_min)`, each term clamped
/// into `[0, 1]`.
pub fn normalized_fitness_sum<'a>(
    records: impl IntoIterator<Item = &'a SolutionRecord>,
    fitness_bounds: (f64, f64),
) -> QdScore {
    let (lo, hi) = fitness_bounds;
    let mut score = 0.0;
    let mut clamped = 0;
    for r in records {
        let x = (r.fitness() - lo) / (hi - lo);
        if !(0.0..=1.0).contains(&x) {
            clamped += 1;
        }
        score += x.clamp(0.0, 1.0);
    }
    QdScore { score, clamped }
}

/// QD-score of the top layer of an archive.
pub fn corrected_qd_score(archive: &DepthGrid, fitness_bounds: (f64, f64)) -> QdScore {
    normalized_fitness_sum(archive.top_layer(), fitness_bounds)
}

pub fn illusory_qd_score(archive: &DepthGrid, fitness_bounds: (f64, f64)) -> QdScore {
    normalized_fitness_sum(archive.top_layer(), fitness_bounds)
}

/// Mean evaluation count over the records; `None` for an empty list.
pub fn average_samples<'a>(records: impl IntoIterator<Item = &'a SolutionRecord>) -> Option<f64> {
    let (sum, n) = records
        .into_iter()
        .fold((0usize, 0usize), |(s, n), r| (s + r.eval_count(), n + 1));
    (n > 0).then(|| sum as f64 / n as f64)
}

/// Fraction of cells holding at least one record.
pub fn coverage(archive: &DepthGrid) -> f64 {
    archive.occupied_cells() as f64 / archive.spec().num_cells() as f64
}

/// One-sided Mann-Whitney rank-sum test of "`a` tends to exceed `b`".
///
/// Exact permutation p-value for small samples (`|a| + |b| <= 20`), normal
/// approximation with tie correction otherwise.
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> f64 {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return 1.0;
    }
    let mut pooled: Vec<(f64, usize)> = a
        .iter()
        .map(|&x| (x, 0))
        .chain(b.iter().map(|&x| (x, 1)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = pooled.len();
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = mid;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let observed: f64 = pooled
        .iter()
        .zip(&ranks)
        .filter(|((_, g), _)| *g == 0)
        .map(|(_, r)| r)
        .sum();

    if n <= 20 {
        // Enumerate every assignment of n1 of the pooled ranks to `a`.
        let mut at_least = 0u64;
        let mut total = 0u64;
        let mut chosen = Vec::with_capacity(n1);
        enumerate_rank_sums(&ranks, n1, 0, &mut chosen, &mut |s| {
            total += 1;
            if s >= observed - 1e-9 {
                at_least += 1;
            }
        });
        return at_least as f64 / total as f64;
    }

    let (n1f, n2f, nf) = (n1 as f64, n2 as f64, n as f64);
    let mean = n1f * (nf + 1.0) / 2.0;
    let var = n1f * n2f / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = (observed - mean - 0.5) / var.sqrt();
    0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
}

fn enumerate_rank_sums(
    ranks: &[f64],
    k: usize,
    start: usize,
    chosen: &mut Vec<f64>,
    visit: &mut dyn FnMut(f64),
) {
    if chosen.len() == k {
        visit(chosen.iter().sum());
        return;
    }
    let remaining = k - chosen.len();
    for i in start..=ranks.len() - remaining {
        chosen.push(ranks[i]);
        enumerate_rank_sums(ranks, k, i + 1, chosen, visit);
        chosen.pop();
    }
}

/// Median of a slice (mean of the two middle values for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Draws a random genotype from `task` and evaluates it once; handy for
/// building test archives.
pub fn random_record<R: Rng + ?Sized>(
    task: &Task,
    id: u64,
    rng: &mut R,
) -> Result<SolutionRecord> {
    let g = task.random_genotype(rng);
    let sample = task.evaluate(&g, rng)?;
    SolutionRecord::new(
        id,
        g,
        SampleBuffer::from_samples([sample]),
        Aggregator::Mean,
        0,
        None,
    )
}

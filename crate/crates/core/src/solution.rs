//! Value types for solutions under stochastic evaluation: genotypes, single
//! evaluation samples, per-solution sample buffers and the estimates derived
//! from them.

use std::collections::VecDeque;
use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UqdError};

/// Parameter vector of a solution. Components live in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Genotype(Vec<f64>);

impl Genotype {
    /// Builds a genotype, clipping every component into `[0, 1]`.
    pub fn new(values: Vec<f64>) -> Self {
        let mut g = Genotype(values);
        g.clip();
        g
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn clip(&mut self) {
        for v in &mut self.0 {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// One stochastic evaluation of a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    #[serde(rename = "f")]
    pub fitness: f64,
    #[serde(rename = "d")]
    pub descriptor: Vec<f64>,
}

impl EvalSample {
    /// Builds a sample with the descriptor clamped into the unit box.
    pub fn new(fitness: f64, descriptor: Vec<f64>) -> Self {
        let descriptor = descriptor.into_iter().map(|x| x.clamp(0.0, 1.0)).collect();
        EvalSample {
            fitness,
            descriptor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    Mean,
    Median,
}

/// Append-only record of every evaluation spent on a solution, optionally
/// bounded (oldest samples are evicted first).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleBuffer {
    samples: VecDeque<EvalSample>,
    capacity: Option<NonZeroUsize>,
    sums: Option<ShiftedSums>,
}

/// Running sums of `x - anchor`, anchored at the oldest stored sample.
/// Constant inputs therefore average back to themselves exactly.
#[derive(Debug, Clone, PartialEq)]
struct ShiftedSums {
    anchor: EvalSample,
    fitness: f64,
    descriptor: Vec<f64>,
}

impl ShiftedSums {
    fn anchored_at(anchor: &EvalSample) -> Self {
        ShiftedSums {
            anchor: anchor.clone(),
            fitness: 0.0,
            descriptor: vec![0.0; anchor.descriptor.len()],
        }
    }

    fn add(&mut self, s: &EvalSample) {
        self.fitness += s.fitness - self.anchor.fitness;
        for ((acc, x), a) in self
            .descriptor
            .iter_mut()
            .zip(&s.descriptor)
            .zip(&self.anchor.descriptor)
        {
            *acc += x - a;
        }
    }
}

impl SampleBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity_limit(capacity: NonZeroUsize) -> Self {
        SampleBuffer {
            capacity: Some(capacity),
            ..Self::default()
        }
    }

    pub fn from_samples(samples: impl IntoIterator<Item = EvalSample>) -> Self {
        let mut buf = SampleBuffer::new();
        // An empty iterator leaves the buffer empty, which is fine here.
        let _ = buf.append(samples);
        buf
    }

    pub fn capacity(&self) -> Option<NonZeroUsize> {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> impl ExactSizeIterator<Item = &EvalSample> {
        self.samples.iter()
    }

    /// Appends `new` in evaluation order, evicting from the front when a
    /// capacity is set.
    pub fn append(&mut self, new: impl IntoIterator<Item = EvalSample>) -> Result<()> {
        let before = self.samples.len();
        for sample in new {
            let sums = self
                .sums
                .get_or_insert_with(|| ShiftedSums::anchored_at(&sample));
            sums.add(&sample);
            self.samples.push_back(sample);
        }
        if self.samples.len() == before {
            return Err(UqdError::EmptyAppend);
        }
        if let Some(cap) = self.capacity {
            if self.samples.len() > cap.get() {
                while self.samples.len() > cap.get() {
                    self.samples.pop_front();
                }
                let mut sums = ShiftedSums::anchored_at(&self.samples[0]);
                for s in &self.samples {
                    sums.add(s);
                }
                self.sums = Some(sums);
            }
        }
        Ok(())
    }

    fn mean_fitness(&self, sums: &ShiftedSums) -> f64 {
        sums.anchor.fitness + sums.fitness / self.samples.len() as f64
    }

    fn mean_descriptor(&self, sums: &ShiftedSums) -> Vec<f64> {
        let n = self.samples.len() as f64;
        sums.anchor
            .descriptor
            .iter()
            .zip(&sums.descriptor)
            .map(|(a, s)| a + s / n)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimates {
    pub fitness: f64,
    pub descriptor: Vec<f64>,
    /// `None` when fewer than two samples are available.
    pub spread: Option<f64>,
    pub eval_count: usize,
}

/// Median by linear-time selection; `values` is reordered.
fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    let (left, mid, _) = values.select_nth_unstable_by(n / 2, f64::total_cmp);
    let upper = *mid;
    if n % 2 == 1 {
        upper
    } else {
        let lower = left.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

fn median_descriptor(buffer: &SampleBuffer) -> Vec<f64> {
    let dims = buffer.samples.front().map_or(0, |s| s.descriptor.len());
    let mut column = Vec::with_capacity(buffer.len());
    (0..dims)
        .map(|k| {
            column.clear();
            column.extend(buffer.samples.iter().map(|s| s.descriptor[k]));
            median_in_place(&mut column)
        })
        .collect()
}

/// Mean Euclidean distance of the descriptor samples to their component-wise
/// median. `None` below two samples.
pub fn reproducibility_spread(buffer: &SampleBuffer) -> Option<f64> {
    if buffer.len() < 2 {
        return None;
    }
    Some(spread_around(buffer, &median_descriptor(buffer)))
}

fn spread_around(buffer: &SampleBuffer, median: &[f64]) -> f64 {
    let total: f64 = buffer
        .samples
        .iter()
        .map(|s| {
            s.descriptor
                .iter()
                .zip(median)
                .map(|(x, m)| (x - m) * (x - m))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / buffer.len() as f64
}

pub fn estimate_from_buffer(buffer: &SampleBuffer, aggregator: Aggregator) -> Result<Estimates> {
    let sums = buffer.sums.as_ref().ok_or(UqdError::NoEvaluations)?;
    let n = buffer.len();
    let median = (n >= 2 || aggregator == Aggregator::Median).then(|| median_descriptor(buffer));
    let spread = match &median {
        Some(m) if n >= 2 => Some(spread_around(buffer, m)),
        _ => None,
    };
    let (fitness, descriptor) = match aggregator {
        Aggregator::Mean => (buffer.mean_fitness(sums), buffer.mean_descriptor(sums)),
        Aggregator::Median => {
            let mut f: Vec<f64> = buffer.samples.iter().map(|s| s.fitness).collect();
            (median_in_place(&mut f), median.expect("computed for median"))
        }
    };
    Ok(Estimates {
        fitness,
        descriptor,
        spread,
        eval_count: n,
    })
}

/// A genotype together with its evaluation history and current estimates.
///
/// Estimates are re-derived on every append, so they always reflect the
/// buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionRecord {
    id: u64,
    genotype: Genotype,
    buffer: SampleBuffer,
    estimates: Estimates,
    aggregator: Aggregator,
    birth_generation: u64,
    parent_id: Option<u64>,
}

impl SolutionRecord {
    pub fn new(
        id: u64,
        genotype: Genotype,
        buffer: SampleBuffer,
        aggregator: Aggregator,
        birth_generation: u64,
        parent_id: Option<u64>,
    ) -> Result<Self> {
        let estimates = estimate_from_buffer(&buffer, aggregator)?;
        Ok(SolutionRecord {
            id,
            genotype,
            buffer,
            estimates,
            aggregator,
            birth_generation,
            parent_id,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn genotype(&self) -> &Genotype {
        &self.genotype
    }

    pub fn buffer(&self) -> &SampleBuffer {
        &self.buffer
    }

    pub fn estimates(&self) -> &Estimates {
        &self.estimates
    }

    pub fn fitness(&self) -> f64 {
        self.estimates.fitness
    }

    pub fn descriptor(&self) -> &[f64] {
        &self.estimates.descriptor
    }

    pub fn spread(&self) -> Option<f64> {
        self.estimates.spread
    }

    pub fn eval_count(&self) -> usize {
        self.estimates.eval_count
    }

    pub fn aggregator(&self) -> Aggregator {
        self.aggregator
    }

    pub fn birth_generation(&self) -> u64 {
        self.birth_generation
    }

    pub fn parent_id(&self) -> Option<u64> {
        self.parent_id
    }

    pub fn append_samples(&mut self, new: impl IntoIterator<Item = EvalSample>) -> Result<()> {
        self.buffer.append(new)?;
        self.estimates = estimate_from_buffer(&self.buffer, self.aggregator)?;
        Ok(())
    }

    pub fn to_snapshot(&self) -> RecordSnapshot {
        RecordSnapshot {
            id: self.id,
            genotype: self.genotype.clone(),
            samples: self.buffer.samples.iter().cloned().collect(),
            birth_generation: self.birth_generation,
            parent_id: self.parent_id,
        }
    }

    pub fn from_snapshot(snapshot: RecordSnapshot, aggregator: Aggregator) -> Result<Self> {
        SolutionRecord::new(
            snapshot.id,
            snapshot.genotype,
            SampleBuffer::from_samples(snapshot.samples),
            aggregator,
            snapshot.birth_generation,
            snapshot.parent_id,
        )
    }
}

/// JSON form of a [`SolutionRecord`]. Estimates are not stored; they are
/// re-derived from the samples on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordSnapshot {
    pub id: u64,
    pub genotype: Genotype,
    pub samples: Vec<EvalSample>,
    pub birth_generation: u64,
    pub parent_id: Option<u64>,
}

//! Grid archive with depth.
//!
//! Each cell keeps up to `depth` records ranked by an [`AdditionPolicy`];
//! slot 0 is the top of the cell and only the top layer forms the returned
//! collection.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UqdError};
use crate::solution::{Aggregator, RecordSnapshot, SolutionRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub bins: Vec<usize>,
    pub bounds: Vec<(f64, f64)>,
    pub depth: usize,
}

impl GridSpec {
    /// Grid over the unit box.
    pub fn new(bins: Vec<usize>, depth: usize) -> Result<Self> {
        let bounds = vec![(0.0, 1.0); bins.len()];
        Self::with_bounds(bins, bounds, depth)
    }

    pub fn with_bounds(bins: Vec<usize>, bounds: Vec<(f64, f64)>, depth: usize) -> Result<Self> {
        let spec = GridSpec {
            bins,
            bounds,
            depth,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins.is_empty() {
            return Err(UqdError::Config("grid needs at least one dimension".into()));
        }
        if self.bins.contains(&0) {
            return Err(UqdError::Config("bin counts must be >= 1".into()));
        }
        if self.depth == 0 {
            return Err(UqdError::Config("depth must be >= 1".into()));
        }
        if self.bounds.len() != self.bins.len() {
            return Err(UqdError::DimensionMismatch {
                expected: self.bins.len(),
                got: self.bounds.len(),
            });
        }
        if self.bounds.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(UqdError::Config("grid bounds must satisfy lo < hi".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.bins.len()
    }

    pub fn num_cells(&self) -> usize {
        self.bins.iter().product()
    }

    pub fn with_depth(&self, depth: usize) -> Self {
        GridSpec {
            depth,
            ..self.clone()
        }
    }

    /// Per-dimension bin coordinates of a flat cell index (first dimension
    /// most significant).
    pub fn cell_coords(&self, mut index: usize) -> Vec<usize> {
        let mut coords = vec![0; self.bins.len()];
        for (k, &b) in self.bins.iter().enumerate().rev() {
            coords[k] = index % b;
            index /= b;
        }
        coords
    }
}

/// Maps a descriptor to its flat cell index. Bins are half-open; the upper
/// edge belongs to the last bin.
pub fn bin_descriptor(descriptor: &[f64], spec: &GridSpec) -> Result<usize> {
    if descriptor.len() != spec.dims() {
        return Err(UqdError::DimensionMismatch {
            expected: spec.dims(),
            got: descriptor.len(),
        });
    }
    let mut index = 0;
    for ((&x, &(lo, hi)), &bins) in descriptor.iter().zip(&spec.bounds).zip(&spec.bins) {
        let scaled = ((x - lo) / (hi - lo) * bins as f64).floor();
        let k = if scaled.is_nan() || scaled < 0.0 {
            0
        } else {
            (scaled as usize).min(bins - 1)
        };
        index = index * bins + k;
    }
    Ok(index)
}

/// Depth-ordering rule deciding where (and whether) a record lands in its
/// cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdditionPolicy {
    OrderFitness,
    OrderReprod,
    OrderWeighted {
        fitness_weight: f64,
        reprod_weight: f64,
    },
    OrderSeniorityThenFitness,
    ChallengeLowSpread,
    ChallengeDelta {
        delta_fitness: f64,
        delta_reprod: f64,
    },
}

impl AdditionPolicy {
    pub fn is_challenge(&self) -> bool {
        matches!(
            self,
            AdditionPolicy::ChallengeLowSpread | AdditionPolicy::ChallengeDelta { .. }
        )
    }

    pub fn label(&self) -> &'static str {
        match self {
            AdditionPolicy::OrderFitness => "fitness rank",
            AdditionPolicy::OrderReprod => "reprod rank",
            AdditionPolicy::OrderWeighted { .. } => "fitness+reprod rank sum",
            AdditionPolicy::OrderSeniorityThenFitness => "latest, fitness ranked",
            AdditionPolicy::ChallengeLowSpread => "improve fitness and reprod",
            AdditionPolicy::ChallengeDelta { .. } => "delta dominance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Added { rank: usize },
    Rejected,
    Replaced { rank: usize, evicted_id: u64 },
}

impl InsertOutcome {
    pub fn is_stored(&self) -> bool {
        !matches!(self, InsertOutcome::Rejected)
    }
}

#[derive(Debug, Clone)]
pub struct Slot {
    pub record: SolutionRecord,
    /// Arrival order into the grid, used for seniority eviction.
    pub entered: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Cell {
    slots: Vec<Slot>,
}

impl Cell {
    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn top(&self) -> Option<&SolutionRecord> {
        self.slots.first().map(|s| &s.record)
    }

    pub fn records(&self) -> impl Iterator<Item = &SolutionRecord> + Clone {
        self.slots.iter().map(|s| &s.record)
    }
}

fn spread_key(r: &SolutionRecord) -> f64 {
    r.spread().unwrap_or(f64::INFINITY)
}

fn by_fitness(a: &SolutionRecord, b: &SolutionRecord) -> Ordering {
    b.fitness()
        .total_cmp(&a.fitness())
        .then(a.id().cmp(&b.id()))
}

fn by_spread(a: &SolutionRecord, b: &SolutionRecord) -> Ordering {
    spread_key(a)
        .total_cmp(&spread_key(b))
        .then(a.id().cmp(&b.id()))
}

/// Spread increase of `candidate` relative to `incumbent`; undefined spread
/// counts as infinitely bad.
fn spread_increase(candidate: &SolutionRecord, incumbent: &SolutionRecord) -> f64 {
    match (candidate.spread(), incumbent.spread()) {
        (Some(c), Some(i)) => c - i,
        (None, None) => 0.0,
        (None, Some(_)) => f64::INFINITY,
        (Some(_), None) => f64::NEG_INFINITY,
    }
}

fn challenge_admits(policy: &AdditionPolicy, cand: &SolutionRecord, inc: &SolutionRecord) -> bool {
    let gain = cand.fitness() - inc.fitness();
    let spread_up = spread_increase(cand, inc);
    match *policy {
        AdditionPolicy::ChallengeLowSpread => gain > 0.0 && spread_up < 0.0,
        AdditionPolicy::ChallengeDelta {
            delta_fitness,
            delta_reprod,
        } => {
            gain >= delta_fitness
                || (gain >= 0.0 && spread_up <= delta_reprod)
                || (-spread_up >= delta_reprod && -gain <= delta_fitness)
        }
        _ => unreachable!("not a challenge policy"),
    }
}

/// Sorts a cell best-first under an ordering policy.
fn sort_slots(policy: &AdditionPolicy, slots: &mut [Slot]) {
    match *policy {
        AdditionPolicy::OrderFitness | AdditionPolicy::OrderSeniorityThenFitness => {
            slots.sort_by(|a, b| by_fitness(&a.record, &b.record))
        }
        AdditionPolicy::OrderReprod => slots.sort_by(|a, b| by_spread(&a.record, &b.record)),
        AdditionPolicy::OrderWeighted {
            fitness_weight,
            reprod_weight,
        } => {
            let n = slots.len();
            let mut order: Vec<usize> = (0..n).collect();
            let mut fitness_rank = vec![0usize; n];
            order.sort_by(|&i, &j| by_fitness(&slots[i].record, &slots[j].record));
            for (r, &i) in order.iter().enumerate() {
                fitness_rank[i] = r;
            }
            let mut spread_rank = vec![0usize; n];
            order.sort_by(|&i, &j| by_spread(&slots[i].record, &slots[j].record));
            for (r, &i) in order.iter().enumerate() {
                spread_rank[i] = r;
            }
            let scores: HashMap<u64, f64> = slots
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let score = fitness_weight * fitness_rank[i] as f64
                        + reprod_weight * spread_rank[i] as f64;
                    (s.record.id(), score)
                })
                .collect();
            slots.sort_by(|a, b| {
                scores[&a.record.id()]
                    .total_cmp(&scores[&b.record.id()])
                    .then(a.record.id().cmp(&b.record.id()))
            });
        }
        AdditionPolicy::ChallengeLowSpread | AdditionPolicy::ChallengeDelta { .. } => {}
    }
}

/// Descriptor-space grid holding up to `depth` ranked records per cell.
#[derive(Debug, Clone)]
pub struct DepthGrid {
    spec: GridSpec,
    policy: AdditionPolicy,
    cells: Vec<Cell>,
    occupied: usize,
    locations: HashMap<u64, usize>,
    entries: u64,
}

impl DepthGrid {
    /// Challenge policies compare against a single incumbent and therefore
    /// require `depth == 1`.
    pub fn new(spec: GridSpec, policy: AdditionPolicy) -> Result<Self> {
        spec.validate()?;
        if policy.is_challenge() && spec.depth != 1 {
            return Err(UqdError::Config(format!(
                "{} policy requires depth 1, got {}",
                policy.label(),
                spec.depth
            )));
        }
        let cells = vec![Cell::default(); spec.num_cells()];
        Ok(DepthGrid {
            spec,
            policy,
            cells,
            occupied: 0,
            locations: HashMap::new(),
            entries: 0,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn policy(&self) -> &AdditionPolicy {
        &self.policy
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn occupied_slot_count(&self) -> usize {
        self.occupied
    }

    pub fn occupied_cells(&self) -> usize {
        self.cells.iter().filter(|c| !c.is_empty()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied == 0
    }

    pub fn contains(&self, id: u64) -> bool {
        self.locations.contains_key(&id)
    }

    pub fn cell_of(&self, id: u64) -> Option<usize> {
        self.locations.get(&id).copied()
    }

    pub fn records(&self) -> impl Iterator<Item = &SolutionRecord> {
        self.cells.iter().flat_map(|c| c.records())
    }

    /// Records of every non-empty cell's top slot, in cell order.
    pub fn top_layer(&self) -> Vec<&SolutionRecord> {
        self.cells.iter().filter_map(|c| c.top()).collect()
    }

    pub fn insert(&mut self, record: SolutionRecord) -> Result<InsertOutcome> {
        if self.locations.contains_key(&record.id()) {
            return Err(UqdError::Config(format!(
                "record {} is already in the archive",
                record.id()
            )));
        }
        let index = bin_descriptor(record.descriptor(), &self.spec)?;
        let id = record.id();
        let depth = self.spec.depth;
        let policy = self.policy;
        let entered = self.entries;
        self.entries += 1;
        let slot = Slot { record, entered };
        let cell = &mut self.cells[index];

        if cell.slots.is_empty() {
            cell.slots.push(slot);
            self.occupied += 1;
            self.locations.insert(id, index);
            return Ok(InsertOutcome::Added { rank: 0 });
        }

        let outcome = match policy {
            AdditionPolicy::ChallengeLowSpread | AdditionPolicy::ChallengeDelta { .. } => {
                if challenge_admits(&policy, &slot.record, &cell.slots[0].record) {
                    let old = std::mem::replace(&mut cell.slots[0], slot);
                    let evicted_id = old.record.id();
                    self.locations.remove(&evicted_id);
                    self.locations.insert(id, index);
                    InsertOutcome::Replaced {
                        rank: 0,
                        evicted_id,
                    }
                } else {
                    InsertOutcome::Rejected
                }
            }
            AdditionPolicy::OrderSeniorityThenFitness => {
                let mut evicted = None;
                if cell.slots.len() >= depth {
                    let oldest = cell
                        .slots
                        .iter()
                        .enumerate()
                        .min_by_key(|(_, s)| s.entered)
                        .map(|(i, _)| i)
                        .expect("cell is non-empty");
                    evicted = Some(cell.slots.remove(oldest).record.id());
                } else {
                    self.occupied += 1;
                }
                cell.slots.push(slot);
                sort_slots(&policy, &mut cell.slots);
                let rank = position_of(cell, id);
                self.locations.insert(id, index);
                match evicted {
                    Some(evicted_id) => {
                        self.locations.remove(&evicted_id);
                        InsertOutcome::Replaced { rank, evicted_id }
                    }
                    None => InsertOutcome::Added { rank },
                }
            }
            _ => {
                cell.slots.push(slot);
                sort_slots(&policy, &mut cell.slots);
                if cell.slots.len() > depth {
                    let dropped = cell.slots.pop().expect("cell is non-empty");
                    let dropped_id = dropped.record.id();
                    if matches!(policy, AdditionPolicy::OrderWeighted { .. }) {
                        // Rank sums are relative to the cell contents.
                        sort_slots(&policy, &mut cell.slots);
                    }
                    if dropped_id == id {
                        // Candidate ranks below the depth.
                        InsertOutcome::Rejected
                    } else {
                        let rank = position_of(cell, id);
                        self.locations.remove(&dropped_id);
                        self.locations.insert(id, index);
                        InsertOutcome::Replaced {
                            rank,
                            evicted_id: dropped_id,
                        }
                    }
                } else {
                    let rank = position_of(cell, id);
                    self.occupied += 1;
                    self.locations.insert(id, index);
                    InsertOutcome::Added { rank }
                }
            }
        };
        Ok(outcome)
    }

    /// Removes a record; records below it in its cell shift up.
    pub fn remove(&mut self, id: u64) -> Result<SolutionRecord> {
        let index = self
            .locations
            .get(&id)
            .copied()
            .ok_or(UqdError::RecordNotInArchive(id))?;
        let rank = position_of(&self.cells[index], id);
        Ok(self.remove_at(index, rank))
    }

    /// Removes the record at `rank` in cell `index`.
    ///
    /// Panics if the slot does not exist.
    pub fn remove_at(&mut self, index: usize, rank: usize) -> SolutionRecord {
        let cell = &mut self.cells[index];
        let slot = cell.slots.remove(rank);
        if matches!(self.policy, AdditionPolicy::OrderWeighted { .. }) {
            // Rank sums are relative to the cell contents.
            sort_slots(&self.policy, &mut cell.slots);
        }
        self.occupied -= 1;
        self.locations.remove(&slot.record.id());
        slot.record
    }

    /// Empties the grid, returning every record in cell then rank order.
    pub fn drain(&mut self) -> Vec<SolutionRecord> {
        let mut out = Vec::with_capacity(self.occupied);
        for cell in &mut self.cells {
            out.extend(cell.slots.drain(..).map(|s| s.record));
        }
        self.occupied = 0;
        self.locations.clear();
        out
    }

    pub fn to_snapshot(&self) -> GridSnapshot {
        GridSnapshot {
            spec: self.spec.clone(),
            cells: self
                .cells
                .iter()
                .enumerate()
                .filter(|(_, c)| !c.is_empty())
                .map(|(index, c)| CellSnapshot {
                    index,
                    slots: c.records().map(|r| r.to_snapshot()).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a grid from a snapshot, keeping the stored slot order.
    pub fn from_snapshot(
        snapshot: GridSnapshot,
        policy: AdditionPolicy,
        aggregator: Aggregator,
    ) -> Result<Self> {
        let mut grid = DepthGrid::new(snapshot.spec, policy)?;
        for cell in snapshot.cells {
            if cell.index >= grid.cells.len() {
                return Err(UqdError::SnapshotMismatch(format!(
                    "cell index {} outside grid of {} cells",
                    cell.index,
                    grid.cells.len()
                )));
            }
            if cell.slots.len() > grid.spec.depth {
                return Err(UqdError::SnapshotMismatch(format!(
                    "cell {} holds {} records, depth is {}",
                    cell.index,
                    cell.slots.len(),
                    grid.spec.depth
                )));
            }
            for snap in cell.slots {
                let record = SolutionRecord::from_snapshot(snap, aggregator)?;
                let actual = bin_descriptor(record.descriptor(), &grid.spec)?;
                if actual != cell.index {
                    return Err(UqdError::SnapshotMismatch(format!(
                        "record {} bins to cell {} but is stored in cell {}",
                        record.id(),
                        actual,
                        cell.index
                    )));
                }
                if grid.locations.insert(record.id(), cell.index).is_some() {
                    return Err(UqdError::SnapshotMismatch(format!(
                        "record {} appears twice",
                        record.id()
                    )));
                }
                let entered = grid.entries;
                grid.entries += 1;
                grid.cells[cell.index].slots.push(Slot { record, entered });
                grid.occupied += 1;
            }
        }
        Ok(grid)
    }
}

fn position_of(cell: &Cell, id: u64) -> usize {
    cell.slots
        .iter()
        .position(|s| s.record.id() == id)
        .expect("record is in its cell")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSnapshot {
    pub index: usize,
    pub slots: Vec<RecordSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSnapshot {
    pub spec: GridSpec,
    pub cells: Vec<CellSnapshot>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solution::{EvalSample, Genotype, SampleBuffer};
    use proptest::prelude::*;

    fn rec(id: u64, fitness: f64, desc: &[f64]) -> SolutionRecord {
        rec_samples(id, &[(fitness, desc.to_vec())])
    }

    fn rec_samples(id: u64, samples: &[(f64, Vec<f64>)]) -> SolutionRecord {
        let buf = SampleBuffer::from_samples(
            samples
                .iter()
                .map(|(f, d)| EvalSample::new(*f, d.clone())),
        );
        SolutionRecord::new(id, Genotype::new(vec![0.5]), buf, Aggregator::Mean, 0, None).unwrap()
    }

    /// Record with the given mean fitness and descriptor spread `s` around
    /// (0.5, 0.5): two samples offset by +-s along the first axis.
    fn rec_spread(id: u64, fitness: f64, s: f64) -> SolutionRecord {
        rec_samples(
            id,
            &[
                (fitness, vec![0.5 - s, 0.5]),
                (fitness, vec![0.5 + s, 0.5]),
            ],
        )
    }

    fn grid(depth: usize, policy: AdditionPolicy) -> DepthGrid {
        DepthGrid::new(GridSpec::new(vec![16, 16], depth).unwrap(), policy).unwrap()
    }

    #[test]
    fn binning() {
        let spec = GridSpec::new(vec![16, 16], 1).unwrap();
        let at = |d: &[f64]| spec.cell_coords(bin_descriptor(d, &spec).unwrap());
        assert_eq!(at(&[0.5, 0.5]), vec![8, 8]);
        assert_eq!(at(&[1.0, 1.0]), vec![15, 15]);
        assert_eq!(at(&[0.0, 0.999]), vec![0, 15]);
        assert!(bin_descriptor(&[0.5], &spec).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(GridSpec::new(vec![4, 0], 1).is_err());
        assert!(GridSpec::new(vec![4, 4], 0).is_err());
        assert_eq!(GridSpec::new(vec![4, 8], 2).unwrap().num_cells(), 32);
    }

    #[test]
    fn empty_cell_always_admits() {
        for policy in [
            AdditionPolicy::OrderFitness,
            AdditionPolicy::OrderReprod,
            AdditionPolicy::OrderSeniorityThenFitness,
            AdditionPolicy::ChallengeLowSpread,
            AdditionPolicy::ChallengeDelta {
                delta_fitness: 1.0,
                delta_reprod: 1.0,
            },
        ] {
            let mut g = grid(1, policy);
            assert_eq!(
                g.insert(rec(1, 0.0, &[0.2, 0.2])).unwrap(),
                InsertOutcome::Added { rank: 0 }
            );
        }
    }

    #[test]
    fn worse_candidate_rejected_at_depth_one() {
        let mut g = grid(1, AdditionPolicy::OrderFitness);
        g.insert(rec(1, 5.0, &[0.2, 0.2])).unwrap();
        assert_eq!(
            g.insert(rec(2, 3.0, &[0.2, 0.2])).unwrap(),
            InsertOutcome::Rejected
        );
        assert_eq!(
            g.insert(rec(3, 6.0, &[0.2, 0.2])).unwrap(),
            InsertOutcome::Replaced {
                rank: 0,
                evicted_id: 1
            }
        );
        assert_eq!(g.occupied_slot_count(), 1);
    }

    #[test]
    fn low_spread_needs_both_improvements() {
        let mut g = grid(1, AdditionPolicy::ChallengeLowSpread);
        g.insert(rec_spread(1, 5.0, 0.1)).unwrap();
        assert_eq!(
            g.insert(rec_spread(2, 6.0, 0.3)).unwrap(),
            InsertOutcome::Rejected
        );
        assert_eq!(
            g.insert(rec_spread(3, 4.0, 0.05)).unwrap(),
            InsertOutcome::Rejected
        );
        assert_eq!(
            g.insert(rec_spread(4, 6.0, 0.05)).unwrap(),
            InsertOutcome::Replaced {
                rank: 0,
                evicted_id: 1
            }
        );
    }

    #[test]
    fn delta_clauses() {
        let policy = AdditionPolicy::ChallengeDelta {
            delta_fitness: 1.0,
            delta_reprod: 0.125,
        };
        let admits = |cf: f64, cs: f64| {
            let mut g = grid(1, policy);
            g.insert(rec_spread(1, 5.0, 0.25)).unwrap();
            g.insert(rec_spread(2, cf, cs)).unwrap().is_stored()
        };
        // Large fitness gain wins regardless of spread.
        assert!(admits(6.0, 0.5));
        // Small gain, spread increase within delta (boundary inclusive).
        assert!(admits(5.5, 0.375));
        assert!(!admits(5.5, 0.5));
        // Spread improvement by delta, fitness loss within delta.
        assert!(admits(4.0, 0.125));
        assert!(!admits(3.75, 0.125));
        assert!(!admits(4.5, 0.1875));
    }

    #[test]
    fn challenge_policy_rejects_depth() {
        let spec = GridSpec::new(vec![4, 4], 2).unwrap();
        assert!(DepthGrid::new(spec, AdditionPolicy::ChallengeLowSpread).is_err());
    }

    #[test]
    fn seniority_evicts_oldest() {
        let mut g = grid(2, AdditionPolicy::OrderSeniorityThenFitness);
        g.insert(rec(1, 9.0, &[0.2, 0.2])).unwrap();
        g.insert(rec(2, 8.0, &[0.2, 0.2])).unwrap();
        let out = g.insert(rec(3, -100.0, &[0.2, 0.2])).unwrap();
        assert_eq!(
            out,
            InsertOutcome::Replaced {
                rank: 1,
                evicted_id: 1
            }
        );
        assert_eq!(g.top_layer()[0].id(), 2);
    }

    #[test]
    fn seniority_top_layer_is_best_fitness() {
        let mut g = grid(32, AdditionPolicy::OrderSeniorityThenFitness);
        for (id, f) in [(1, 2.0), (2, 9.0), (3, 4.0)] {
            g.insert(rec(id, f, &[0.7, 0.7])).unwrap();
        }
        let top = g.top_layer();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].fitness(), 9.0);
    }

    #[test]
    fn depth_keeps_best_and_rejects_below() {
        let mut g = grid(3, AdditionPolicy::OrderFitness);
        for (id, f) in [(1, 1.0), (2, 3.0), (3, 2.0)] {
            g.insert(rec(id, f, &[0.1, 0.1])).unwrap();
        }
        assert_eq!(
            g.insert(rec(4, 0.5, &[0.1, 0.1])).unwrap(),
            InsertOutcome::Rejected
        );
        assert_eq!(
            g.insert(rec(5, 2.5, &[0.1, 0.1])).unwrap(),
            InsertOutcome::Replaced {
                rank: 1,
                evicted_id: 1
            }
        );
        let ids: Vec<u64> = g.cells()[g.cell_of(2).unwrap()]
            .records()
            .map(|r| r.id())
            .collect();
        assert_eq!(ids, vec![2, 5, 3]);
    }

    #[test]
    fn fitness_ties_prefer_lower_id() {
        let mut g = grid(1, AdditionPolicy::OrderFitness);
        g.insert(rec(7, 1.0, &[0.1, 0.1])).unwrap();
        assert_eq!(
            g.insert(rec(9, 1.0, &[0.1, 0.1])).unwrap(),
            InsertOutcome::Rejected
        );
        assert_eq!(
            g.insert(rec(3, 1.0, &[0.1, 0.1])).unwrap(),
            InsertOutcome::Replaced {
                rank: 0,
                evicted_id: 7
            }
        );
    }

    #[test]
    fn reprod_orders_by_spread_and_undefined_is_worst() {
        let mut g = grid(3, AdditionPolicy::OrderReprod);
        g.insert(rec(1, 100.0, &[0.5, 0.5])).unwrap();
        g.insert(rec_spread(2, 0.0, 0.2)).unwrap();
        g.insert(rec_spread(3, 0.0, 0.01)).unwrap();
        let ids: Vec<u64> = g.cells()[g.cell_of(1).unwrap()]
            .records()
            .map(|r| r.id())
            .collect();
        assert_eq!(ids, vec![3, 2, 1]);
    }

    #[test]
    fn weighted_uses_rank_sum() {
        let policy = AdditionPolicy::OrderWeighted {
            fitness_weight: 1.0,
            reprod_weight: 1.0,
        };
        let mut g = grid(2, policy);
        g.insert(rec_spread(1, 10.0, 0.3)).unwrap(); // f rank 0, s rank 2
        g.insert(rec_spread(2, 5.0, 0.01)).unwrap(); // f rank 2, s rank 0
        let out = g.insert(rec_spread(3, 8.0, 0.02)).unwrap(); // f 1, s 1
        // Scores: id1 = 2, id2 = 2, id3 = 2: all tie, lower ids win.
        assert_eq!(out, InsertOutcome::Rejected);
        let out = g.insert(rec_spread(4, 11.0, 0.005)).unwrap();
        assert_eq!(
            out,
            InsertOutcome::Replaced {
                rank: 0,
                evicted_id: 2
            }
        );
    }

    #[test]
    fn remove_shifts_up() {
        let mut g = grid(3, AdditionPolicy::OrderFitness);
        for (id, f) in [(1, 3.0), (2, 2.0), (3, 1.0)] {
            g.insert(rec(id, f, &[0.1, 0.1])).unwrap();
        }
        let cell = g.cell_of(1).unwrap();
        assert_eq!(g.remove(1).unwrap().id(), 1);
        let ids: Vec<u64> = g.cells()[cell].records().map(|r| r.id()).collect();
        assert_eq!(ids, vec![2, 3]);
        assert_eq!(g.occupied_slot_count(), 2);
        g.remove(2).unwrap();
        g.remove(3).unwrap();
        assert!(g.cells()[cell].is_empty());
        assert_eq!(g.remove(3).unwrap_err().to_string(), "record not in archive: 3");
    }

    #[test]
    fn top_layer_counts() {
        let mut g = grid(1, AdditionPolicy::OrderFitness);
        assert!(g.top_layer().is_empty());
        g.insert(rec(1, 0.0, &[0.1, 0.1])).unwrap();
        g.insert(rec(2, 0.0, &[0.5, 0.1])).unwrap();
        g.insert(rec(3, 0.0, &[0.9, 0.9])).unwrap();
        assert_eq!(g.top_layer().len(), 3);
        assert_eq!(g.top_layer().len(), g.occupied_slot_count());
    }

    #[test]
    fn snapshot_round_trip_is_exact() {
        let mut g = grid(2, AdditionPolicy::OrderFitness);
        g.insert(rec(1, 0.1 + 0.2, &[1.0 / 3.0, 0.7])).unwrap();
        g.insert(rec(2, -1e-300, &[1.0 / 3.0, 0.7])).unwrap();
        g.insert(rec(3, 2.0f64.sqrt(), &[0.9, 0.05])).unwrap();
        let json = serde_json::to_string(&g.to_snapshot()).unwrap();
        let back: GridSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g.to_snapshot());
        let g2 = DepthGrid::from_snapshot(back, AdditionPolicy::OrderFitness, Aggregator::Mean)
            .unwrap();
        assert_eq!(g2.to_snapshot(), g.to_snapshot());
        assert_eq!(g2.occupied_slot_count(), 3);
    }

    fn check_invariants(g: &DepthGrid) {
        let mut seen = std::collections::HashSet::new();
        let mut total = 0;
        for (index, cell) in g.cells().iter().enumerate() {
            assert!(cell.len() <= g.spec().depth);
            total += cell.len();
            for r in cell.records() {
                assert!(seen.insert(r.id()), "duplicate id {}", r.id());
                assert_eq!(bin_descriptor(r.descriptor(), g.spec()).unwrap(), index);
            }
            let mut sorted: Vec<Slot> = cell.slots().to_vec();
            sort_slots(g.policy(), &mut sorted);
            let a: Vec<u64> = sorted.iter().map(|s| s.record.id()).collect();
            let b: Vec<u64> = cell.records().map(|r| r.id()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(total, g.occupied_slot_count());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert(f64, f64, f64, f64),
        Remove(usize),
    }

    fn arb_ops() -> impl Strategy<Value = Vec<Op>> {
        prop::collection::vec(
            prop_oneof![
                3 => (0.0f64..1.0, 0.0f64..0.3, 0.0f64..1.0, 0.0f64..0.1)
                    .prop_map(|(a, b, f, s)| Op::Insert(a, b, f, s)),
                1 => (0usize..1000).prop_map(Op::Remove),
            ],
            1..200,
        )
    }

    fn arb_order_policy() -> impl Strategy<Value = AdditionPolicy> {
        prop_oneof![
            Just(AdditionPolicy::OrderFitness),
            Just(AdditionPolicy::OrderReprod),
            Just(AdditionPolicy::OrderWeighted {
                fitness_weight: 1.0,
                reprod_weight: 1.0
            }),
            Just(AdditionPolicy::OrderSeniorityThenFitness),
        ]
    }

    proptest! {
        #[test]
        fn grid_invariants_hold(ops in arb_ops(), policy in arb_order_policy(), depth in 1usize..5) {
            let spec = GridSpec::new(vec![4, 2], depth).unwrap();
            let mut g = DepthGrid::new(spec, policy).unwrap();
            let mut next = 0;
            for op in ops {
                match op {
                    Op::Insert(a, b, f, s) => {
                        let r = rec_samples(next, &[
                            (f, vec![a, b]),
                            (f, vec![(a + s).min(1.0), b]),
                        ]);
                        next += 1;
                        g.insert(r).unwrap();
                    }
                    Op::Remove(k) => {
                        let ids: Vec<u64> = g.records().map(|r| r.id()).collect();
                        if !ids.is_empty() {
                            g.remove(ids[k % ids.len()]).unwrap();
                        }
                    }
                }
                check_invariants(&g);
            }
        }

        #[test]
        fn insert_then_remove_restores_cell(
            fits in prop::collection::vec(0.0f64..1.0, 0..4),
            cand in 0.0f64..1.0,
            policy in prop_oneof![Just(AdditionPolicy::OrderFitness), Just(AdditionPolicy::OrderReprod)],
        ) {
            let mut g = DepthGrid::new(GridSpec::new(vec![2, 2], 5).unwrap(), policy).unwrap();
            for (i, f) in fits.iter().enumerate() {
                g.insert(rec_spread(i as u64, *f, f / 10.0)).unwrap();
            }
            let before = g.to_snapshot();
            let out = g.insert(rec_spread(99, cand, cand / 10.0)).unwrap();
            prop_assert!(matches!(out, InsertOutcome::Added { .. }), "expected Added, got {:?}", out);
            g.remove(99).unwrap();
            prop_assert_eq!(g.to_snapshot(), before);
        }

        #[test]
        fn depth_one_matches_textbook_map_elites(
            stream in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, -1.0f64..1.0), 1000)
        ) {
            let spec = GridSpec::new(vec![8, 8], 1).unwrap();
            let mut g = DepthGrid::new(spec.clone(), AdditionPolicy::OrderFitness).unwrap();
            // Reference: one elite per cell, replace only on strict improvement.
            let mut reference: HashMap<(usize, usize), (f64, u64)> = HashMap::new();
            for (id, &(a, b, f)) in stream.iter().enumerate() {
                let key = (((a * 8.0) as usize).min(7), ((b * 8.0) as usize).min(7));
                let accept = reference.get(&key).is_none_or(|&(inc, _)| f > inc);
                if accept {
                    reference.insert(key, (f, id as u64));
                }
                let out = g.insert(rec(id as u64, f, &[a, b])).unwrap();
                prop_assert_eq!(out.is_stored(), accept);
            }
            let mut ours: Vec<(usize, u64)> = g
                .top_layer()
                .iter()
                .map(|r| (g.cell_of(r.id()).unwrap(), r.id()))
                .collect();
            let mut theirs: Vec<(usize, u64)> = reference
                .iter()
                .map(|(&(x, y), &(_, id))| (x * 8 + y, id))
                .collect();
            ours.sort();
            theirs.sort();
            prop_assert_eq!(ours, theirs);
        }
    }
}

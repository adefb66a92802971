//! Quality-diversity optimization under uncertain evaluations: depth grids,
//! sample buffers, extraction operators, a budgeted generation loop and the
//! corrected-archive metrics.

pub mod container;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod operators;
pub mod rng;
pub mod scheduler;
pub mod solution;
pub mod tasks;

pub use container::{AdditionPolicy, DepthGrid, GridSpec, InsertOutcome};
pub use error::{Result, UqdError};
pub use metrics::{build_corrected_archive, corrected_qd_score, GroundTruthSource};
pub use operators::{ExtractionOp, SelectionOp, VariationOp};
pub use scheduler::{plan_budget, preset, run, AlgorithmConfig, Run, RunResult};
pub use solution::{Aggregator, EvalSample, Genotype, SampleBuffer, SolutionRecord};
pub use tasks::{NoiseModel, Task};

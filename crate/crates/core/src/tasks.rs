//! Stochastic benchmark tasks with analytic ground truth.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UqdError};
use crate::solution::{EvalSample, Genotype};

pub const ARM_JOINTS: usize = 8;
pub const ARM_FITNESS_NOISE: f64 = 0.1;
pub const ARM_DESCRIPTOR_NOISE: f64 = 0.01;

/// Gaussian noise parameters, given as standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    None,
    FitnessGaussian { sigma: f64 },
    DescriptorGaussian { sigma: f64 },
    Both { sigma_fitness: f64, sigma_descriptor: f64 },
}

impl NoiseModel {
    pub fn from_sigmas(fitness: f64, descriptor: f64) -> Self {
        match (fitness > 0.0, descriptor > 0.0) {
            (false, false) => NoiseModel::None,
            (true, false) => NoiseModel::FitnessGaussian { sigma: fitness },
            (false, true) => NoiseModel::DescriptorGaussian { sigma: descriptor },
            (true, true) => NoiseModel::Both {
                sigma_fitness: fitness,
                sigma_descriptor: descriptor,
            },
        }
    }

    /// `(sigma_fitness, sigma_descriptor)`.
    pub fn sigmas(&self) -> (f64, f64) {
        match *self {
            NoiseModel::None => (0.0, 0.0),
            NoiseModel::FitnessGaussian { sigma } => (sigma, 0.0),
            NoiseModel::DescriptorGaussian { sigma } => (0.0, sigma),
            NoiseModel::Both {
                sigma_fitness,
                sigma_descriptor,
            } => (sigma_fitness, sigma_descriptor),
        }
    }

    fn validate(&self) -> Result<()> {
        let (f, d) = self.sigmas();
        if f >= 0.0 && d >= 0.0 {
            Ok(())
        } else {
            Err(UqdError::Config("noise sigmas must be non-negative".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Arm,
    Sphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub genotype_dim: usize,
    pub descriptor_dim: usize,
    pub fitness_bounds: (f64, f64),
    pub noise: NoiseModel,
}

/// A task: a deterministic ground-truth evaluator plus a noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    spec: TaskSpec,
}

impl Task {
    pub fn from_spec(spec: TaskSpec) -> Result<Self> {
        spec.noise.validate()?;
        let (lo, hi) = spec.fitness_bounds;
        if !(lo < hi) {
            return Err(UqdError::Config("fitness bounds must satisfy f_min < f_max".into()));
        }
        match spec.kind {
            TaskKind::Arm if spec.genotype_dim != ARM_JOINTS || spec.descriptor_dim != 2 => {
                return Err(UqdError::Config(format!(
                    "arm task has {ARM_JOINTS} joints and a 2-D descriptor"
                )))
            }
            TaskKind::Sphere if spec.genotype_dim < 2 || spec.descriptor_dim != 2 => {
                return Err(UqdError::Config(
                    "sphere task needs genotype_dim >= 2 and a 2-D descriptor".into(),
                ))
            }
            _ => {}
        }
        Ok(Task { spec })
    }

    pub fn arm(name: &str, noise: NoiseModel) -> Result<Self> {
        Task::from_spec(TaskSpec {
            name: name.to_string(),
            kind: TaskKind::Arm,
            genotype_dim: ARM_JOINTS,
            descriptor_dim: 2,
            fitness_bounds: (-0.25, 0.0),
            noise,
        })
    }

    pub fn arm_fit_noise() -> Self {
        Task::arm(
            "arm_fit_noise",
            NoiseModel::FitnessGaussian {
                sigma: ARM_FITNESS_NOISE,
            },
        )
        .expect("valid arm task")
    }

    pub fn arm_desc_noise() -> Self {
        Task::arm(
            "arm_desc_noise",
            NoiseModel::DescriptorGaussian {
                sigma: ARM_DESCRIPTOR_NOISE,
            },
        )
        .expect("valid arm task")
    }

    pub fn arm_clean() -> Self {
        Task::arm("arm_clean", NoiseModel::None).expect("valid arm task")
    }

    /// Synthetic task with fitness `-sum (g_i - 0.5)^2` and descriptor
    /// `(g_1, g_2)`.
    pub fn sphere(genotype_dim: usize, noise: NoiseModel) -> Result<Self> {
        Task::from_spec(TaskSpec {
            name: "sphere".to_string(),
            kind: TaskKind::Sphere,
            genotype_dim,
            descriptor_dim: 2,
            fitness_bounds: (-0.25 * genotype_dim as f64, 0.0),
            noise,
        })
    }

    /// Looks a task up by registry name. `genotype_dim` only applies to the
    /// sphere (default 8).
    pub fn by_name(name: &str, genotype_dim: Option<usize>) -> Result<Self> {
        match name {
            "arm_fit_noise" => Ok(Task::arm_fit_noise()),
            "arm_desc_noise" => Ok(Task::arm_desc_noise()),
            "arm_clean" => Ok(Task::arm_clean()),
            "sphere" => Task::sphere(genotype_dim.unwrap_or(8), NoiseModel::None),
            "hexapod" | "walker" | "ant" | "cheetah" => {
                Err(UqdError::UnsupportedTask(name.to_string()))
            }
            other => Err(UqdError::UnknownTask(other.to_string())),
        }
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Result<Self> {
        self.spec.noise = noise;
        Task::from_spec(self.spec)
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn genotype_dim(&self) -> usize {
        self.spec.genotype_dim
    }

    pub fn descriptor_dim(&self) -> usize {
        self.spec.descriptor_dim
    }

    pub fn fitness_bounds(&self) -> (f64, f64) {
        self.spec.fitness_bounds
    }

    pub fn is_noiseless(&self) -> bool {
        self.spec.noise == NoiseModel::None
    }

    pub fn ground_truth(&self, genotype: &Genotype) -> Result<EvalSample> {
        if genotype.len() != self.spec.genotype_dim {
            return Err(UqdError::DimensionMismatch {
                expected: self.spec.genotype_dim,
                got: genotype.len(),
            });
        }
        Ok(match self.spec.kind {
            TaskKind::Arm => arm_ground_truth(genotype)?,
            TaskKind::Sphere => sphere_ground_truth(genotype),
        })
    }

    /// One noisy evaluation: ground truth perturbed per the noise model.
    pub fn evaluate<R: Rng + ?Sized>(&self, genotype: &Genotype, rng: &mut R) -> Result<EvalSample> {
        let truth = self.ground_truth(genotype)?;
        let (sigma_f, sigma_d) = self.spec.noise.sigmas();
        if sigma_f == 0.0 && sigma_d == 0.0 {
            return Ok(truth);
        }
        let mut fitness = truth.fitness;
        if sigma_f > 0.0 {
            fitness += sigma_f * rng.sample::<f64, _>(StandardNormal);
        }
        let mut descriptor = truth.descriptor;
        if sigma_d > 0.0 {
            for x in &mut descriptor {
                *x += sigma_d * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(EvalSample::new(fitness, descriptor))
    }

    /// Uniform random genotype in the unit box.
    pub fn random_genotype<R: Rng + ?Sized>(&self, rng: &mut R) -> Genotype {
        Genotype::new((0..self.spec.genotype_dim).map(|_| rng.random()).collect())
    }
}

/// Planar redundant arm: 8 joints with angles `pi * (2 g_i - 1) / 8`, equal
/// links of length 1/8, angles accumulating along the chain. Descriptor is the
/// end-effector mapped from the unit disk into the unit square; fitness is
/// minus the variance of the joint parameters.
pub fn arm_ground_truth(genotype: &Genotype) -> Result<EvalSample> {
    let g = genotype.values();
    if g.len() != ARM_JOINTS {
        return Err(UqdError::DimensionMismatch {
            expected: ARM_JOINTS,
            got: g.len(),
        });
    }
    let n = g.len() as f64;
    let link = 1.0 / n;
    let (mut angle, mut x, mut y) = (0.0f64, 0.0f64, 0.0f64);
    for &gi in g {
        angle += PI * (2.0 * gi - 1.0) / n;
        x += link * angle.cos();
        y += link * angle.sin();
    }
    let mean = g.iter().sum::<f64>() / n;
    let variance = g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(EvalSample::new(-variance, vec![0.5 * x + 0.5, 0.5 * y + 0.5]))
}

fn sphere_ground_truth(genotype: &Genotype) -> EvalSample {
    let g = genotype.values();
    let fitness = -g.iter().map(|v| (v - 0.5) * (v - 0.5)).sum::<f64>();
    EvalSample::new(fitness, vec![g[0], g[1]])
}

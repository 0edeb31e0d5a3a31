//! Offline phase-shift optimisation: a genetic algorithm over the `N - 1`
//! free angles, an exhaustive grid search used as its ground truth, and the
//! bookkeeping that compares the two.

use std::cmp::Ordering;
use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonic::{
    conventional_shifts, wrap_angle, CostModel, CostValue, CostWeights, ModulationVector,
    PhaseShiftVector, SystemConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population_size: usize,
    pub max_generations: usize,
    /// Minimum best-cost improvement over `convergence_window` generations.
    pub convergence_tolerance: f64,
    pub convergence_window: usize,
    /// Initial genes are drawn from the lattice `{0, step, 2 step, ...}`.
    pub init_grid_step: f64,
    pub crossover_rate: f64,
    pub mutation_stddev: f64,
    pub elitism_count: usize,
    pub tournament_size: usize,
    pub rng_seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population_size: 60,
            max_generations: 300,
            convergence_tolerance: 1e-6,
            convergence_window: 20,
            init_grid_step: PI / 5.0,
            crossover_rate: 0.9,
            mutation_stddev: PI / 18.0,
            elitism_count: 2,
            tournament_size: 3,
            rng_seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 4 {
            return Err(Error::domain("GA population must hold at least 4 individuals"));
        }
        if !(self.convergence_tolerance > 0.0) {
            return Err(Error::domain("convergence tolerance must be positive"));
        }
        let cells = TAU / self.init_grid_step;
        if !(self.init_grid_step > 0.0) || (cells - cells.round()).abs() > 1e-9 {
            return Err(Error::domain(format!(
                "initial grid step {} does not divide 2pi",
                self.init_grid_step
            )));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err(Error::domain("crossover rate must lie in [0, 1]"));
        }
        if !(self.mutation_stddev >= 0.0) {
            return Err(Error::domain("mutation stddev must be non-negative"));
        }
        if self.elitism_count >= self.population_size {
            return Err(Error::domain("elitism count must be below the population size"));
        }
        if self.tournament_size < 1 {
            return Err(Error::domain("tournament size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Ga,
    Exhaustive,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Source::Ga => "ga",
            Source::Exhaustive => "exhaustive",
        })
    }
}

impl std::str::FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ga" => Ok(Source::Ga),
            "exhaustive" => Ok(Source::Exhaustive),
            other => Err(Error::domain(format!("unknown label source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    /// The modulation vector that was optimised.
    pub modulation: Vec<f64>,
    /// Canonical shifts, `angles[0] == 0`.
    pub best_shifts: PhaseShiftVector,
    pub best_cost: CostValue,
    pub generations_used: usize,
    pub evaluations: u64,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSearchConfig {
    /// Angular step `r`.
    pub resolution: f64,
    pub max_iterations_guard: u64,
}

impl GridSearchConfig {
    pub fn new(resolution: f64) -> Self {
        GridSearchConfig {
            resolution,
            max_iterations_guard: 10_000_000,
        }
    }

    /// Grid values per free angle, `2pi / r` rounded up.
    pub fn steps_per_axis(&self) -> Result<usize> {
        if !(self.resolution > 0.0) {
            return Err(Error::domain("grid resolution must be positive"));
        }
        Ok(((TAU / self.resolution) - 1e-9).ceil().max(1.0) as usize)
    }

    /// `(2pi / r)^(N - 1)`.
    pub fn predicted_iterations(&self, module_count: usize) -> Result<u128> {
        let steps = self.steps_per_axis()? as u128;
        let exponent = module_count.saturating_sub(1) as u32;
        Ok(steps.checked_pow(exponent).unwrap_or(u128::MAX))
    }
}

/// Rotates so the first angle is zero, then picks the lexicographically
/// smaller of the vector and its negation. The cost model is invariant under
/// both operations.
pub fn canonicalize_shifts(phi: &PhaseShiftVector) -> PhaseShiftVector {
    let angles = phi.angles();
    let anchor = angles[0];
    let rotated: Vec<f64> = angles.iter().map(|a| wrap_angle(a - anchor)).collect();
    let negated: Vec<f64> = rotated.iter().map(|a| wrap_angle(-a)).collect();
    let pick = if lexicographic(&negated, &rotated) == Ordering::Less {
        negated
    } else {
        rotated
    };
    PhaseShiftVector::new(pick).expect("wrapped angles are in range")
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

#[derive(Debug, Clone)]
struct Individual {
    genes: Vec<f64>,
    cost: f64,
}

fn rank(a: &Individual, b: &Individual) -> Ordering {
    a.cost
        .total_cmp(&b.cost)
        .then_with(|| lexicographic(&a.genes, &b.genes))
}

fn tournament<'a>(population: &'a [Individual], size: usize, rng: &mut ChaCha8Rng) -> &'a Individual {
    let mut best = &population[rng.random_range(0..population.len())];
    for _ in 1..size {
        let other = &population[rng.random_range(0..population.len())];
        if rank(other, best) == Ordering::Less {
            best = other;
        }
    }
    best
}

fn finish(
    model: &CostModel,
    m: &ModulationVector,
    free: &[f64],
    generations_used: usize,
    evaluations: u64,
    source: Source,
    seed: Option<u64>,
) -> Result<OptimizationResult> {
    let best_shifts = canonicalize_shifts(&PhaseShiftVector::anchored(free)?);
    let best_cost = model.evaluate(best_shifts.angles());
    Ok(OptimizationResult {
        modulation: m.values().to_vec(),
        best_shifts,
        best_cost,
        generations_used,
        evaluations,
        source,
        seed,
    })
}

/// Minimises the cost over the free angles with a genetic algorithm.
///
/// The conventional and the all-zero vectors are always part of the initial
/// population, so the result never costs more than either.
pub fn ga_optimize(
    cfg: &SystemConfig,
    m: &ModulationVector,
    weights: &CostWeights,
    ga: &GaConfig,
) -> Result<OptimizationResult> {
    let model = CostModel::new(cfg, m, weights)?;
    ga_optimize_model(&model, m, ga)
}

/// [`ga_optimize`] against a prebuilt cost model for `m`.
pub fn ga_optimize_model(
    model: &CostModel,
    m: &ModulationVector,
    ga: &GaConfig,
) -> Result<OptimizationResult> {
    ga.validate()?;
    let n = model.module_count();
    if m.len() != n {
        return Err(Error::contract("modulation vector does not match the cost model"));
    }
    let dim = n - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(ga.rng_seed);
    let mutation = Normal::new(0.0, ga.mutation_stddev)
        .map_err(|e| Error::domain(format!("mutation distribution: {e}")))?;
    let mutation_rate = 1.0 / dim as f64;
    let lattice = (TAU / ga.init_grid_step).round() as usize;
    let mut evaluations = 0u64;
    let mut evaluate = |genes: Vec<f64>| {
        evaluations += 1;
        let cost = model.evaluate_free(&genes).total;
        Individual { genes, cost }
    };

    let conventional = conventional_shifts(n)?;
    let mut population = vec![
        evaluate(conventional.free_angles().to_vec()),
        evaluate(vec![0.0; dim]),
    ];
    while population.len() < ga.population_size {
        let genes = (0..dim)
            .map(|_| rng.random_range(0..lattice) as f64 * ga.init_grid_step)
            .map(wrap_angle)
            .collect();
        population.push(evaluate(genes));
    }
    population.sort_by(rank);

    let mut history = vec![population[0].cost];
    let mut generations_used = 0;
    for generation in 1..=ga.max_generations {
        let mut next: Vec<Individual> = population[..ga.elitism_count].to_vec();
        while next.len() < ga.population_size {
            let first = tournament(&population, ga.tournament_size, &mut rng);
            let second = tournament(&population, ga.tournament_size, &mut rng);
            let mut genes = if rng.random::<f64>() < ga.crossover_rate {
                first
                    .genes
                    .iter()
                    .zip(&second.genes)
                    .map(|(&a, &b)| if rng.random::<bool>() { a } else { b })
                    .collect()
            } else {
                first.genes.clone()
            };
            for gene in genes.iter_mut() {
                if rng.random::<f64>() < mutation_rate {
                    *gene = wrap_angle(*gene + mutation.sample(&mut rng));
                }
            }
            next.push(evaluate(genes));
        }
        next.sort_by(rank);
        population = next;
        history.push(population[0].cost);
        generations_used = generation;
        if generation >= ga.convergence_window {
            let improvement = history[generation - ga.convergence_window] - history[generation];
            if improvement < ga.convergence_tolerance {
                break;
            }
        }
    }

    let best = population.swap_remove(0);
    finish(
        model,
        m,
        &best.genes,
        generations_used,
        evaluations,
        Source::Ga,
        Some(ga.rng_seed),
    )
}

/// Compass search from `free`: tries `+-step` on each angle in turn, keeps
/// any strict improvement and halves the step when none helps, until the
/// step drops below `min_step`. Returns wrapped angles and their cost.
pub fn local_refine(
    model: &CostModel,
    free: &[f64],
    initial_step: f64,
    min_step: f64,
) -> Result<(Vec<f64>, CostValue)> {
    if free.len() + 1 != model.module_count() {
        return Err(Error::contract(format!(
            "{} free angles for {} modules",
            free.len(),
            model.module_count()
        )));
    }
    if !(initial_step > 0.0 && min_step > 0.0) {
        return Err(Error::domain("refinement steps must be positive"));
    }
    let mut x: Vec<f64> = free.iter().copied().map(wrap_angle).collect();
    let mut best = model.evaluate_free(&x).total;
    let mut step = initial_step;
    while step >= min_step {
        let mut improved = false;
        for i in 0..x.len() {
            for delta in [step, -step] {
                let old = x[i];
                x[i] = wrap_angle(old + delta);
                let c = model.evaluate_free(&x).total;
                if c < best {
                    best = c;
                    improved = true;
                } else {
                    x[i] = old;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    let cost = model.evaluate_free(&x);
    Ok((x, cost))
}

/// Evaluates every point of the `(2pi / r)^(N - 1)` lattice and returns the
/// lowest-cost one; ties go to the lexicographically first candidate.
pub fn exhaustive_search(
    cfg: &SystemConfig,
    m: &ModulationVector,
    weights: &CostWeights,
    grid: &GridSearchConfig,
) -> Result<OptimizationResult> {
    let model = CostModel::new(cfg, m, weights)?;
    exhaustive_search_model(&model, m, grid)
}

pub fn exhaustive_search_model(
    model: &CostModel,
    m: &ModulationVector,
    grid: &GridSearchConfig,
) -> Result<OptimizationResult> {
    let n = model.module_count();
    let predicted = grid.predicted_iterations(n)?;
    if predicted > grid.max_iterations_guard as u128 {
        return Err(Error::GridGuard {
            predicted,
            guard: grid.max_iterations_guard,
        });
    }
    let steps = grid.steps_per_axis()?;
    let dim = n - 1;
    let mut index = vec![0usize; dim];
    let mut free = vec![0.0; dim];
    let mut best_free = free.clone();
    let mut best_cost = f64::INFINITY;
    let mut evaluations = 0u64;
    loop {
        for (f, &i) in free.iter_mut().zip(&index) {
            *f = i as f64 * grid.resolution;
        }
        let cost = model.evaluate_free(&free).total;
        evaluations += 1;
        if cost < best_cost {
            best_cost = cost;
            best_free.copy_from_slice(&free);
        }
        // odometer, last axis fastest: lexicographic visiting order
        let mut axis = dim;
        loop {
            if axis == 0 {
                return finish(model, m, &best_free, 0, evaluations, Source::Exhaustive, None);
            }
            axis -= 1;
            index[axis] += 1;
            if index[axis] < steps {
                break;
            }
            index[axis] = 0;
        }
    }
}

/// Signed gap `(C_GA - C_perm) / C_perm` in percent; negative when the GA
/// found something better than the grid.
pub fn threshold_metric(c_ga: f64, c_perm: f64) -> Result<f64> {
    if !(c_perm > 0.0) {
        return Err(Error::domain(format!(
            "exhaustive cost must be positive, got {c_perm}"
        )));
    }
    Ok((c_ga - c_perm) / c_perm * 100.0)
}

/// Keeps the cheaper of a GA and a grid result for the same problem; a tie
/// goes to the grid result.
pub fn best_of(ga: OptimizationResult, grid: OptimizationResult) -> Result<OptimizationResult> {
    let same_problem = ga.modulation == grid.modulation
        && ga.best_cost.baseline_ripple == grid.best_cost.baseline_ripple
        && ga.best_cost.baseline_wthd == grid.best_cost.baseline_wthd;
    if !same_problem {
        return Err(Error::contract(
            "GA and exhaustive results belong to different problems",
        ));
    }
    Ok(if ga.best_cost.total < grid.best_cost.total {
        ga
    } else {
        grid
    })
}

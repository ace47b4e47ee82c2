//! Budget-constrained evolutionary search over architecture codes.
//!
//! Every individual that is ever evaluated satisfies the MACs budget: children
//! that violate it are repaired one gene step at a time and resampled when the
//! repair fails. The best individual is carried over unchanged (elitism of
//! one), so the best-so-far score never decreases.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::cmp::Ordering;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::count_macs;
use crate::error::{CoreError, Result};
use crate::space::{ArchCode, SearchSpaceSpec};

/// Hyper-parameters of the genetic search.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EvoParams {
    /// Individuals per generation.
    pub population_size: usize,
    /// Evaluated generations, the random initial one included.
    pub generations: usize,
    /// Per-gene resampling probability.
    pub mutation_prob: f64,
    /// Fraction of the ranked population used as parents.
    pub parent_fraction: f64,
    /// Seed of the search.
    pub seed: u64,
}

impl Default for EvoParams {
    fn default() -> Self {
        Self { population_size: 32, generations: 20, mutation_prob: 0.2, parent_fraction: 0.25, seed: 0 }
    }
}

impl EvoParams {
    fn validate(&self) -> Result<()> {
        if self.population_size < 2 {
            return Err(CoreError::OutOfRange {
                name: "population_size",
                value: self.population_size as f64,
            });
        }
        if self.generations == 0 {
            return Err(CoreError::OutOfRange { name: "generations", value: 0.0 });
        }
        for (name, v) in [("mutation_prob", self.mutation_prob), ("parent_fraction", self.parent_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::OutOfRange { name, value: v });
            }
        }
        Ok(())
    }
}

/// What a budget is searching for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BudgetRole {
    /// Compressed student.
    Student,
    /// Teacher favouring depth.
    TeacherDeeper,
    /// Teacher favouring width.
    TeacherWider,
}

/// MACs window an individual must fall into.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Budget {
    /// Upper MACs bound (inclusive).
    pub max_macs: u64,
    /// Lower MACs bound (inclusive); zero for students.
    pub min_macs: u64,
    /// Role of the searched network.
    pub role: BudgetRole,
    /// Relative tolerance around the teacher target ratio.
    pub ratio_tolerance: f64,
}

impl Budget {
    /// Student budget: anything up to `max_macs`.
    pub fn student(max_macs: u64) -> Self {
        Self { max_macs, min_macs: 0, role: BudgetRole::Student, ratio_tolerance: 0.0 }
    }

    /// Teacher window `ratio * (1 ± tolerance)` times the student's MACs.
    pub fn teacher(role: BudgetRole, student_macs: u64, ratio: f64, tolerance: f64) -> Self {
        let s = student_macs as f64;
        let lo = ratio * (1.0 - tolerance) * s;
        let hi = ratio * (1.0 + tolerance) * s;
        // Round inward so the window never admits a ratio outside the band.
        let min_macs = lo as u64 + u64::from((lo as u64 as f64) < lo);
        Self { max_macs: hi as u64, min_macs, role, ratio_tolerance: tolerance }
    }

    /// Whether `macs` lies inside the window.
    pub fn admits(&self, macs: u64) -> bool {
        macs >= self.min_macs && macs <= self.max_macs
    }
}

/// Ranking rule of a search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Larger fitness wins.
    Fitness,
    /// Larger depth-gene sum wins; fitness breaks ties.
    DepthThenFitness,
    /// Larger smallest active width wins; fitness breaks ties.
    MinWidthThenFitness,
}

impl Objective {
    fn key(self, spec: &SearchSpaceSpec, code: &ArchCode, fitness: f64) -> (f64, f64) {
        match self {
            Objective::Fitness => (fitness, 0.0),
            Objective::DepthThenFitness => (code.depth_sum() as f64, fitness),
            Objective::MinWidthThenFitness => (code.active_min_width(spec) as f64, fitness),
        }
    }
}

/// Summary of one generation.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GenerationStats {
    /// Generation index, 0 being the initial population.
    pub generation: usize,
    /// Fitness of the best-so-far individual.
    pub best_fitness: f64,
    /// Primary ranking key of the best-so-far individual.
    pub best_key: f64,
    /// Mean fitness of this generation.
    pub mean_fitness: f64,
    /// Best-so-far code.
    pub best_code: ArchCode,
}

/// Result of [`evolve`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvolveOutcome {
    /// Winning code.
    pub best: ArchCode,
    /// Its fitness.
    pub best_fitness: f64,
    /// Its MACs.
    pub best_macs: u64,
    /// Per-generation statistics.
    pub history: Vec<GenerationStats>,
    /// Every distinct evaluated code with its MACs, in evaluation order.
    pub evaluated: Vec<(ArchCode, u64)>,
}

/// Resamples each gene with probability `prob`.
pub fn mutate<R: Rng + ?Sized>(code: &ArchCode, spec: &SearchSpaceSpec, prob: f64, rng: &mut R) -> ArchCode {
    let mut out = code.clone();
    for w in out.widths.iter_mut() {
        if prob > 0.0 && rng.random_bool(prob) {
            *w = spec.width_choices[rng.random_range(0..spec.width_choices.len())];
        }
    }
    for d in out.depths.iter_mut() {
        if prob > 0.0 && rng.random_bool(prob) {
            *d = spec.depth_choices[rng.random_range(0..spec.depth_choices.len())];
        }
    }
    out
}

/// Uniform crossover: every gene comes from `a` or `b` with equal odds.
pub fn crossover<R: Rng + ?Sized>(a: &ArchCode, b: &ArchCode, rng: &mut R) -> Result<ArchCode> {
    if a.widths.len() != b.widths.len() {
        return Err(CoreError::DimensionMismatch { field: "widths", expected: a.widths.len(), got: b.widths.len() });
    }
    if a.depths.len() != b.depths.len() {
        return Err(CoreError::DimensionMismatch { field: "depths", expected: a.depths.len(), got: b.depths.len() });
    }
    let mut pick = |x: usize, y: usize| if rng.random_bool(0.5) { x } else { y };
    Ok(ArchCode {
        widths: a.widths.iter().zip(&b.widths).map(|(&x, &y)| pick(x, y)).collect(),
        depths: a.depths.iter().zip(&b.depths).map(|(&x, &y)| pick(x, y)).collect(),
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum GeneClass {
    Width,
    Depth,
}

struct Searcher<'a> {
    spec: &'a SearchSpaceSpec,
    budget: Budget,
    objective: Objective,
}

impl Searcher<'_> {
    fn macs(&self, code: &ArchCode) -> u64 {
        // Codes built here are always valid.
        count_macs(code, self.spec, self.spec.image_size).map(|c| c.macs).unwrap_or(u64::MAX)
    }

    /// Gene class to move first when shrinking (`down`) or growing.
    fn preference(&self, down: bool) -> Option<GeneClass> {
        match (self.objective, down) {
            (Objective::DepthThenFitness, true) | (Objective::MinWidthThenFitness, false) => Some(GeneClass::Width),
            (Objective::DepthThenFitness, false) | (Objective::MinWidthThenFitness, true) => Some(GeneClass::Depth),
            (Objective::Fitness, _) => None,
        }
    }

    /// Genes that can move one choice in the requested direction and that
    /// change the network (hidden widths of inactive blocks are skipped).
    fn movable(&self, code: &ArchCode, down: bool, class: Option<GeneClass>) -> Vec<(GeneClass, usize)> {
        let spec = self.spec;
        let mut out = Vec::new();
        if class != Some(GeneClass::Depth) {
            for (g, &w) in code.widths.iter().enumerate() {
                if g >= spec.n_layer_widths() {
                    let rel = g - spec.n_layer_widths();
                    let (site, block) = (rel / spec.blocks_per_site, rel % spec.blocks_per_site);
                    if block >= code.depths[site] {
                        continue;
                    }
                }
                let i = spec.width_choices.iter().position(|&c| c == w).unwrap();
                if (down && i > 0) || (!down && i + 1 < spec.width_choices.len()) {
                    out.push((GeneClass::Width, g));
                }
            }
        }
        if class != Some(GeneClass::Width) {
            for (g, &d) in code.depths.iter().enumerate() {
                let i = spec.depth_choices.iter().position(|&c| c == d).unwrap();
                if (down && i > 0) || (!down && i + 1 < spec.depth_choices.len()) {
                    out.push((GeneClass::Depth, g));
                }
            }
        }
        out
    }

    /// Walks single-gene steps towards the budget window.
    fn repair<R: Rng + ?Sized>(&self, mut code: ArchCode, rng: &mut R) -> Option<ArchCode> {
        let spec = self.spec;
        let limit = 8 * (code.widths.len() + code.depths.len()) * spec.width_choices.len().max(spec.depth_choices.len());
        for _ in 0..limit {
            let macs = self.macs(&code);
            if self.budget.admits(macs) {
                return Some(code);
            }
            let down = macs > self.budget.max_macs;
            let mut genes = self.movable(&code, down, self.preference(down));
            if genes.is_empty() {
                genes = self.movable(&code, down, None);
            }
            if genes.is_empty() {
                return None;
            }
            let (class, g) = genes[rng.random_range(0..genes.len())];
            let step = |choices: &[usize], v: usize| {
                let i = choices.iter().position(|&c| c == v).unwrap();
                if down { choices[i - 1] } else { choices[i + 1] }
            };
            match class {
                GeneClass::Width => code.widths[g] = step(&spec.width_choices, code.widths[g]),
                GeneClass::Depth => code.depths[g] = step(&spec.depth_choices, code.depths[g]),
            }
        }
        None
    }

    fn sample_feasible<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<ArchCode> {
        for _ in 0..64 {
            let code = self.spec.sample_random(rng);
            if self.budget.admits(self.macs(&code)) {
                return Some(code);
            }
        }
        for _ in 0..64 {
            if let Some(code) = self.repair(self.spec.sample_random(rng), rng) {
                return Some(code);
            }
        }
        None
    }
}

fn rank_cmp(a: &((f64, f64), &ArchCode), b: &((f64, f64), &ArchCode)) -> Ordering {
    b.0 .0
        .total_cmp(&a.0 .0)
        .then(b.0 .1.total_cmp(&a.0 .1))
        .then_with(|| a.1.cmp(b.1))
}

/// Evolutionary search for the best code under `budget`.
///
/// `seeds` are repaired into the budget and placed in the initial
/// population before random individuals. Fitness values are cached per code,
/// so `fitness` is called at most once for each distinct code.
pub fn evolve<F>(
    spec: &SearchSpaceSpec,
    budget: &Budget,
    params: &EvoParams,
    objective: Objective,
    seeds: &[ArchCode],
    mut fitness: F,
) -> Result<EvolveOutcome>
where
    F: FnMut(&ArchCode) -> f64,
{
    spec.validate()?;
    params.validate()?;
    let searcher = Searcher { spec, budget: *budget, objective };
    let smallest = searcher.macs(&spec.sample_smallest());
    let largest = searcher.macs(&spec.sample_largest());
    let infeasible = CoreError::BudgetInfeasible { smallest, min: budget.min_macs, max: budget.max_macs };
    if smallest > budget.max_macs || largest < budget.min_macs {
        return Err(infeasible);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut population: Vec<ArchCode> = Vec::with_capacity(params.population_size);
    for seed in seeds {
        if population.len() == params.population_size {
            break;
        }
        if spec.validate_arch(seed).is_err() {
            continue;
        }
        if let Some(code) = searcher.repair(seed.clone(), &mut rng) {
            if !population.contains(&code) {
                population.push(code);
            }
        }
    }
    let mut attempts = 0;
    while population.len() < params.population_size {
        let code = searcher.sample_feasible(&mut rng).ok_or(infeasible.clone())?;
        attempts += 1;
        // Duplicates are tolerated once distinct draws become hard to find.
        if !population.contains(&code) || attempts > 8 * params.population_size {
            population.push(code);
        }
    }

    let mut cache: BTreeMap<ArchCode, (f64, u64)> = BTreeMap::new();
    let mut evaluated = Vec::new();
    let mut history = Vec::with_capacity(params.generations);
    let mut best: Option<(ArchCode, (f64, f64), f64, u64)> = None;
    let n_parents = ((params.parent_fraction * params.population_size as f64) as usize)
        .clamp(2.min(params.population_size), params.population_size);

    for generation in 0..params.generations {
        let mut scored = Vec::with_capacity(population.len());
        for code in &population {
            let (fit, macs) = *cache.entry(code.clone()).or_insert_with(|| {
                let macs = searcher.macs(code);
                evaluated.push((code.clone(), macs));
                (fitness(code), macs)
            });
            debug_assert!(budget.admits(macs));
            scored.push((objective.key(spec, code, fit), code));
        }
        scored.sort_by(rank_cmp);
        let (top_key, top_code) = scored[0];
        let improves = match &best {
            None => true,
            Some((code, key, _, _)) => rank_cmp(&(top_key, top_code), &(*key, code)) == Ordering::Less,
        };
        if improves {
            let (fit, macs) = cache[top_code];
            best = Some((top_code.clone(), top_key, fit, macs));
        }
        let (best_code, best_key, best_fit, _) = best.as_ref().unwrap();
        let mean = population.iter().map(|c| cache[c].0).sum::<f64>() / population.len() as f64;
        history.push(GenerationStats {
            generation,
            best_fitness: *best_fit,
            best_key: best_key.0,
            mean_fitness: mean,
            best_code: best_code.clone(),
        });
        if generation + 1 == params.generations {
            break;
        }

        let parents: Vec<ArchCode> = scored.iter().take(n_parents).map(|(_, c)| (*c).clone()).collect();
        let mut next = Vec::with_capacity(params.population_size);
        next.push(best_code.clone());
        while next.len() < params.population_size {
            let a = &parents[rng.random_range(0..parents.len())];
            let b = &parents[rng.random_range(0..parents.len())];
            let child = mutate(&crossover(a, b, &mut rng)?, spec, params.mutation_prob, &mut rng);
            let child = match searcher.repair(child, &mut rng) {
                Some(c) => c,
                None => searcher.sample_feasible(&mut rng).ok_or(infeasible.clone())?,
            };
            next.push(child);
        }
        population = next;
    }

    let (best, _, best_fitness, best_macs) = best.unwrap();
    Ok(EvolveOutcome { best, best_fitness, best_macs, history, evaluated })
}

/// Teachers found by [`search_teachers`].
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPair {
    /// Teacher favouring depth.
    pub deeper: ArchCode,
    /// Teacher favouring width.
    pub wider: ArchCode,
    /// MACs window the teachers were searched in.
    pub window: Budget,
    /// Set when the window was unreachable and the feasible extreme was used.
    pub degraded: bool,
    /// Search traces, absent when degraded.
    pub outcomes: Option<(EvolveOutcome, EvolveOutcome)>,
}

/// Searches a deeper and a wider teacher at about `ratio` times the student's
/// MACs (within `ratio * (1 ± tolerance)`).
///
/// The deeper teacher maximizes the depth-gene sum, the wider one the smallest
/// active width; `fitness` breaks ties. If the window lies entirely above the
/// largest code (or below the smallest), both teachers degrade to that
/// extreme and `degraded` is set.
pub fn search_teachers<F>(
    spec: &SearchSpaceSpec,
    student: &ArchCode,
    params: &EvoParams,
    ratio: f64,
    tolerance: f64,
    mut fitness: F,
) -> Result<TeacherPair>
where
    F: FnMut(&ArchCode) -> f64,
{
    let student_macs = count_macs(student, spec, spec.image_size)?.macs;
    let window = Budget::teacher(BudgetRole::TeacherDeeper, student_macs, ratio, tolerance);
    let largest = spec.sample_largest();
    let smallest = spec.sample_smallest();
    let macs = |c: &ArchCode| count_macs(c, spec, spec.image_size).map(|r| r.macs);
    let extreme = if macs(&largest)? < window.min_macs {
        Some(largest)
    } else if macs(&smallest)? > window.max_macs {
        Some(smallest)
    } else {
        None
    };
    if let Some(code) = extreme {
        return Ok(TeacherPair { deeper: code.clone(), wider: code, window, degraded: true, outcomes: None });
    }

    let uniform = |w: usize, d: usize| ArchCode {
        widths: alloc::vec![w; spec.n_width_genes()],
        depths: alloc::vec![d; spec.n_sites()],
    };
    let dmax = *spec.depth_choices.last().unwrap();
    let dmin = spec.depth_choices[0];
    let deep_seeds: Vec<ArchCode> = spec.width_choices.iter().rev().map(|&w| uniform(w, dmax)).collect();
    let wide_seeds: Vec<ArchCode> = spec.width_choices.iter().rev().map(|&w| uniform(w, dmin)).collect();

    let deeper_budget = Budget { role: BudgetRole::TeacherDeeper, ..window };
    let wider_budget = Budget { role: BudgetRole::TeacherWider, ..window };
    let deeper = evolve(spec, &deeper_budget, params, Objective::DepthThenFitness, &deep_seeds, &mut fitness);
    let wider = evolve(spec, &wider_budget, params, Objective::MinWidthThenFitness, &wide_seeds, &mut fitness);
    match (deeper, wider) {
        (Ok(d), Ok(w)) => Ok(TeacherPair {
            deeper: d.best.clone(),
            wider: w.best.clone(),
            window,
            degraded: false,
            outcomes: Some((d, w)),
        }),
        // The window intersects the MACs range but holds no reachable code:
        // fall back to the largest network.
        (Err(CoreError::BudgetInfeasible { .. }), _) | (_, Err(CoreError::BudgetInfeasible { .. })) => {
            let code = spec.sample_largest();
            Ok(TeacherPair { deeper: code.clone(), wider: code, window, degraded: true, outcomes: None })
        }
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

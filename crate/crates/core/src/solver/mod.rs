//! Bi-layer safe optimizer: a genetic search over relaxed actions, with the
//! current best periodically polished by a trust-region step and fed back as
//! a parent.

mod ga;
mod trust_region;

pub use ga::{crossover, crossover_with, mutate, mutation_rate, tournament_select};
pub use trust_region::{trust_region_refine, Refinement, TrStep, TrustRegionState};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::{reformulated_constraint_gradient, reformulated_constraint_value, EnsembleSurrogate};
use crate::error::{Error, Result};
use crate::problem::{ChanceConstraint, ControlAction, GaSection, IntBounds, Objective, ReformulationMode};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population_size: usize,
    pub max_generations: usize,
    pub initial_mutation_rate: f64,
    pub mutation_scale: f64,
    pub tournament_size: usize,
    pub tr_interval: usize,
    /// Trust-region iterations per refinement.
    pub tr_iters: usize,
    pub penalty_weight: f64,
    pub early_stop_tol: f64,
    pub early_stop_patience: usize,
}

impl GaConfig {
    pub fn from_section(ga: &GaSection, tr_iters: usize) -> Result<Self> {
        let cfg = GaConfig {
            population_size: ga.population,
            max_generations: ga.generations,
            initial_mutation_rate: ga.initial_mutation_rate,
            mutation_scale: ga.mutation_scale,
            tournament_size: ga.tournament_size,
            tr_interval: ga.tr_interval,
            tr_iters,
            penalty_weight: ga.penalty_weight,
            early_stop_tol: ga.early_stop_tol,
            early_stop_patience: ga.early_stop_patience,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.population_size < 2 || self.tournament_size < 2 || self.tournament_size > self.population_size {
            return Err(Error::domain("need population >= 2 and 2 <= tournament_size <= population"));
        }
        if !(self.initial_mutation_rate > 0.0 && self.initial_mutation_rate <= 1.0) {
            return Err(Error::domain("initial mutation rate must lie in (0, 1]"));
        }
        Ok(())
    }
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig::from_section(&GaSection::default(), 20).expect("defaults are valid")
    }
}

/// A constraint function `c(a|s)`, feasible where it does not exceed the threshold.
pub trait ConstraintModel<T: Scalar>: Sync {
    fn value(&self, action: &[T], state: &[T]) -> T;

    /// Defaults to central differences.
    fn gradient(&self, action: &[T], state: &[T], out: &mut [T]) {
        let h = T::of(1e-5);
        let mut x = action.to_vec();
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + h;
            let up = self.value(&x, state);
            x[i] = orig - h;
            let down = self.value(&x, state);
            x[i] = orig;
            out[i] = (up - down) / (h + h);
        }
    }
}

impl<T: Scalar, F: Fn(&[T], &[T]) -> T + Sync> ConstraintModel<T> for F {
    fn value(&self, action: &[T], state: &[T]) -> T {
        self(action, state)
    }
}

/// The ensemble's reformulated chance constraint, evaluated through the
/// same functions the rest of the crate uses.
pub struct EnsembleConstraint<'a, T: Scalar> {
    pub surrogate: &'a EnsembleSurrogate<T>,
    pub constraint: ChanceConstraint<T>,
    pub mode: ReformulationMode,
}

impl<T: Scalar> ConstraintModel<T> for EnsembleConstraint<'_, T> {
    fn value(&self, action: &[T], state: &[T]) -> T {
        reformulated_constraint_value(self.surrogate, action, state, &self.constraint, self.mode)
    }

    fn gradient(&self, action: &[T], state: &[T], out: &mut [T]) {
        reformulated_constraint_gradient(self.surrogate, action, state, &self.constraint, self.mode, out)
    }
}

/// Minimize `objective` subject to `constraint <= threshold` over integer boxes.
pub struct SafeProblem<'a, T: Scalar> {
    pub objective: &'a dyn Objective<T>,
    pub constraint: &'a dyn ConstraintModel<T>,
    pub threshold: T,
    pub state: Vec<T>,
    pub bounds: Vec<IntBounds>,
}

impl<T: Scalar> SafeProblem<'_, T> {
    pub fn real_bounds(&self) -> Vec<(T, T)> {
        self.bounds.iter().map(|b| b.as_reals()).collect()
    }

    pub fn violation(&self, x: &[T]) -> T {
        (self.constraint.value(x, &self.state) - self.threshold).max(T::zero())
    }
}

/// `f(x) + w * max(0, c(x) - H)^2`, with `x` clamped into the bounds first.
pub fn fitness<T: Scalar>(problem: &SafeProblem<T>, candidate: &[T], penalty_weight: T) -> T {
    let mut x = candidate.to_vec();
    ga::clamp_into(&mut x, &problem.real_bounds());
    let v = problem.violation(&x);
    problem.objective.value(&x, &problem.state) + penalty_weight * v * v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SolverResult<T: Scalar> {
    /// Integer action, one entry per dimension.
    pub best_action: Vec<i64>,
    /// Continuous optimum before rounding.
    pub best_relaxed: Vec<T>,
    pub best_objective: T,
    pub constraint_value_at_best: T,
    pub generations_run: usize,
    /// Best and mean fitness of every generation, starting with the initial population.
    pub objective_trajectory: Vec<(T, T)>,
    pub feasible: bool,
    pub refinements: usize,
}

impl<T: Scalar> SolverResult<T> {
    pub fn control_action(&self) -> ControlAction {
        ControlAction { vrbs: self.best_action[0] }
    }
}

fn argmin<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] < v[best] {
            best = i;
        }
    }
    best
}

/// Genetic search with elitism and periodic trust-region refinement.
/// Never fails on infeasibility: `feasible = false` marks the least-violating answer.
pub fn solve<T: Scalar>(
    problem: &SafeProblem<T>,
    ga: &GaConfig,
    tr: &TrustRegionState<T>,
    warm_start: Option<&[T]>,
    seed: u64,
) -> Result<SolverResult<T>> {
    ga.validate()?;
    if problem.bounds.is_empty() {
        return Err(Error::domain("problem has no action dimensions"));
    }
    let mut rng = rng_for(seed, &[stream::SOLVER]);
    let bounds = problem.real_bounds();
    let w = T::of(ga.penalty_weight);
    let eval = |pop: &[Vec<T>]| -> Vec<T> { pop.iter().map(|x| fitness(problem, x, w)).collect() };

    let mut pop: Vec<Vec<T>> = (0..ga.population_size)
        .map(|_| {
            bounds
                .iter()
                .map(|&(lo, hi)| T::of(rng.random_range(lo.as_f64()..=hi.as_f64())))
                .collect()
        })
        .collect();
    if let Some(ws) = warm_start {
        let mut x = ws.to_vec();
        ga::clamp_into(&mut x, &bounds);
        pop[0] = x;
    }
    let mut fit = eval(&pop);
    let stats = |fit: &[T]| (fit[argmin(fit)], fit.iter().copied().sum::<T>() / T::of_usize(fit.len()));
    let mut trajectory = vec![stats(&fit)];
    let mut stall = 0;
    let mut refinements = 0;
    let mut generations_run = 0;

    for e in 0..ga.max_generations {
        let elite = argmin(&fit);
        let mut next = Vec::with_capacity(ga.population_size);
        next.push(pop[elite].clone());
        while next.len() < ga.population_size {
            let p1 = tournament_select(&fit, ga.tournament_size, &mut rng);
            let p2 = tournament_select(&fit, ga.tournament_size, &mut rng);
            let (c1, c2) = crossover(&pop[p1], &pop[p2], &bounds, &mut rng);
            for c in [c1, c2] {
                if next.len() < ga.population_size {
                    next.push(mutate(
                        &c,
                        e,
                        ga.max_generations,
                        ga.initial_mutation_rate,
                        ga.mutation_scale,
                        &bounds,
                        &mut rng,
                    ));
                }
            }
        }
        pop = next;
        fit = eval(&pop);

        if (e + 1) % ga.tr_interval == 0 {
            let best = argmin(&fit);
            let mut state = tr.clone();
            let refined = trust_region_refine(&pop[best], problem, &mut state, ga.tr_iters, w).point;
            let rf = fitness(problem, &refined, w);
            // the refined point replaces the worst non-elite member
            let worst = (1..pop.len()).fold(1, |a, i| if fit[i] > fit[a] { i } else { a });
            pop[worst] = refined;
            fit[worst] = rf;
            refinements += 1;
        }

        let prev_best = trajectory.last().expect("initial stats").0;
        let s = stats(&fit);
        trajectory.push(s);
        generations_run = e + 1;
        if (prev_best - s.0).abs() < T::of(ga.early_stop_tol) {
            stall += 1;
            if stall >= ga.early_stop_patience {
                break;
            }
        } else {
            stall = 0;
        }
    }

    let best = pop[argmin(&fit)].clone();
    let (best_action, c_best, feasible) = round_action(problem, &best);
    let xs: Vec<T> = best_action.iter().map(|&v| T::of(v as f64)).collect();
    Ok(SolverResult {
        best_objective: problem.objective.value(&xs, &problem.state),
        best_action,
        best_relaxed: best,
        constraint_value_at_best: c_best,
        generations_run,
        objective_trajectory: trajectory,
        feasible,
        refinements,
    })
}

/// Rounds half up; if that breaks feasibility, tries the other floor/ceil
/// combinations and keeps the cheapest feasible one, else the least violating.
fn round_action<T: Scalar>(problem: &SafeProblem<T>, x: &[T]) -> (Vec<i64>, T, bool) {
    let eval = |a: &[i64]| {
        let xs: Vec<T> = a.iter().map(|&v| T::of(v as f64)).collect();
        let c = problem.constraint.value(&xs, &problem.state);
        (c, problem.objective.value(&xs, &problem.state))
    };
    let rounded: Vec<i64> = x.iter().zip(&problem.bounds).map(|(v, b)| b.round(v.as_f64())).collect();
    let (c, _) = eval(&rounded);
    if c <= problem.threshold {
        return (rounded, c, true);
    }
    let d = x.len().min(16);
    let mut best: Option<(Vec<i64>, T, T)> = None;
    for mask in 0..(1u32 << d) {
        let a: Vec<i64> = x
            .iter()
            .zip(&problem.bounds)
            .enumerate()
            .map(|(i, (v, b))| {
                let v = v.as_f64();
                let r = if i < d && mask & (1 << i) != 0 { v.ceil() } else { v.floor() };
                (r as i64).clamp(b.min, b.max)
            })
            .collect();
        let (c, f) = eval(&a);
        let key_better = |bc: T, bf: T| {
            let (feas, bfeas) = (c <= problem.threshold, bc <= problem.threshold);
            match (feas, bfeas) {
                (true, false) => true,
                (false, true) => false,
                (true, true) => f < bf,
                (false, false) => c < bc,
            }
        };
        if best.as_ref().is_none_or(|(_, bc, bf)| key_better(*bc, *bf)) {
            best = Some((a, c, f));
        }
    }
    let (a, c, _) = best.expect("at least one combination");
    (a, c, c <= problem.threshold)
}

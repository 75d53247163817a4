//! Trust-region refinement of a single candidate.
//!
//! Feasible starts minimize `f - w * ln(H - c)` with `c` linearized inside the
//! subproblem; infeasible starts fall back to the exterior quadratic penalty
//! until they reach the interior.

use serde::{Deserialize, Serialize};

use super::SafeProblem;
use crate::problem::TrustRegionSection;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TrustRegionState<T: Scalar> {
    pub radius: T,
    pub min_radius: T,
    pub max_radius: T,
    pub expand_factor: T,
    pub shrink_factor: T,
    pub accept_threshold_low: T,
    pub accept_threshold_high: T,
    pub barrier_weight: T,
    /// Barrier weight multiplier applied after every iteration.
    pub barrier_decay: T,
    /// Add a finite-difference diagonal curvature term of `f` to the model.
    pub curvature: bool,
}

impl<T: Scalar> TrustRegionState<T> {
    pub fn from_section(s: &TrustRegionSection) -> Self {
        TrustRegionState {
            radius: T::of(s.initial_radius),
            min_radius: T::of(s.min_radius),
            max_radius: T::of(s.max_radius),
            expand_factor: T::of(s.expand_factor),
            shrink_factor: T::of(s.shrink_factor),
            accept_threshold_low: T::of(s.accept_low),
            accept_threshold_high: T::of(s.accept_high),
            barrier_weight: T::of(s.barrier_weight),
            barrier_decay: T::of(s.barrier_decay),
            curvature: s.curvature,
        }
    }

    /// Applies the ratio test; returns whether the step is accepted.
    /// `None` means the model predicted no descent.
    pub fn update(&mut self, rho: Option<T>) -> bool {
        match rho {
            Some(r) if r >= self.accept_threshold_high => {
                self.radius = (self.radius * self.expand_factor).min(self.max_radius);
                true
            }
            Some(r) if r > self.accept_threshold_low => true,
            Some(r) if r == self.accept_threshold_low => false,
            _ => {
                self.radius = self.radius * self.shrink_factor;
                false
            }
        }
    }
}

/// One outer iteration, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct TrStep<T> {
    pub rho: Option<T>,
    pub radius_before: T,
    pub radius_after: T,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct Refinement<T> {
    pub point: Vec<T>,
    /// True when the start violated the constraint, so the penalty merit was used.
    pub started_infeasible: bool,
    pub steps: Vec<TrStep<T>>,
}

#[derive(Clone, Copy, PartialEq)]
enum Merit {
    Barrier,
    Penalty,
}

struct Local<T> {
    f: T,
    g: Vec<T>,
    h: Vec<T>,
    c: T,
    gc: Vec<T>,
}

impl<T: Scalar> Local<T> {
    fn lin_slack(&self, threshold: T, z: &[T]) -> T {
        threshold - self.c - dot(&self.gc, z)
    }

    fn model(&self, z: &[T], merit: Merit, threshold: T, w: T, penalty: T) -> T {
        let q = self.f
            + dot(&self.g, z)
            + T::of(0.5) * self.h.iter().zip(z).map(|(&h, &zi)| h * zi * zi).sum::<T>();
        let slack = self.lin_slack(threshold, z);
        match merit {
            Merit::Barrier if slack > T::zero() => q - w * slack.ln(),
            Merit::Barrier => T::infinity(),
            Merit::Penalty => {
                let v = (-slack).max(T::zero());
                q + penalty * v * v
            }
        }
    }

    fn model_gradient(&self, z: &[T], merit: Merit, threshold: T, w: T, penalty: T) -> Vec<T> {
        let slack = self.lin_slack(threshold, z);
        let k = match merit {
            Merit::Barrier => w / slack,
            Merit::Penalty => T::of(2.0) * penalty * (-slack).max(T::zero()),
        };
        (0..z.len())
            .map(|i| self.g[i] + self.h[i] * z[i] + k * self.gc[i])
            .collect()
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

fn merit_value<T: Scalar>(p: &SafeProblem<T>, x: &[T], merit: Merit, w: T, penalty: T) -> T {
    let f = p.objective.value(x, &p.state);
    let slack = p.threshold - p.constraint.value(x, &p.state);
    match merit {
        Merit::Barrier if slack > T::zero() => f - w * slack.ln(),
        Merit::Barrier => T::infinity(),
        Merit::Penalty => {
            let v = (-slack).max(T::zero());
            f + penalty * v * v
        }
    }
}

/// Keeps `x + z` in the box, then scales `z` back into the ball. Both sets are
/// convex and contain `z = 0`, so the result lies in their intersection.
fn project<T: Scalar>(x: &[T], z: &mut [T], bounds: &[(T, T)], radius: T) {
    for ((zi, &xi), &(lo, hi)) in z.iter_mut().zip(x).zip(bounds) {
        *zi = (xi + *zi).max(lo).min(hi) - xi;
    }
    let n = norm(z);
    if n > radius {
        let s = radius / n;
        z.iter_mut().for_each(|zi| *zi = *zi * s);
    }
}

fn solve_subproblem<T: Scalar>(
    local: &Local<T>,
    x: &[T],
    bounds: &[(T, T)],
    radius: T,
    merit: Merit,
    threshold: T,
    w: T,
    penalty: T,
) -> Vec<T> {
    let mut z = vec![T::zero(); x.len()];
    let mut mz = local.model(&z, merit, threshold, w, penalty);
    let mut step = T::nan();
    for _ in 0..100 {
        let g = local.model_gradient(&z, merit, threshold, w, penalty);
        let gn = norm(&g);
        if !(gn > T::zero()) {
            break;
        }
        if !(step > T::zero()) {
            step = radius / gn;
        }
        let mut improved = false;
        for _ in 0..60 {
            let mut cand: Vec<T> = z.iter().zip(&g).map(|(&zi, &gi)| zi - step * gi).collect();
            project(x, &mut cand, bounds, radius);
            let mc = local.model(&cand, merit, threshold, w, penalty);
            if mc < mz {
                let moved = norm(&cand.iter().zip(&z).map(|(&a, &b)| a - b).collect::<Vec<_>>());
                z = cand;
                mz = mc;
                improved = moved > T::of(1e-12) * (T::one() + radius);
                step = step * T::of(2.0);
                break;
            }
            step = step * T::of(0.5);
        }
        if !improved {
            break;
        }
    }
    z
}

/// Trust-region descent from `start`. Accepted iterates of a feasible start
/// stay strictly feasible.
pub fn trust_region_refine<T: Scalar>(
    start: &[T],
    problem: &SafeProblem<T>,
    tr: &mut TrustRegionState<T>,
    max_iters: usize,
    penalty_weight: T,
) -> Refinement<T> {
    let bounds = problem.real_bounds();
    let mut x = start.to_vec();
    super::ga::clamp_into(&mut x, &bounds);
    let started_infeasible = problem.constraint.value(&x, &problem.state) >= problem.threshold;
    let mut w = tr.barrier_weight;
    let mut steps = Vec::new();
    let n = x.len();
    for _ in 0..max_iters {
        if tr.radius < tr.min_radius {
            break;
        }
        let c = problem.constraint.value(&x, &problem.state);
        let merit = if c < problem.threshold { Merit::Barrier } else { Merit::Penalty };
        let mut g = vec![T::zero(); n];
        problem.objective.gradient(&x, &problem.state, &mut g);
        let mut gc = vec![T::zero(); n];
        problem.constraint.gradient(&x, &problem.state, &mut gc);
        let f = problem.objective.value(&x, &problem.state);
        let h = if tr.curvature { diag_curvature(problem, &x, f) } else { vec![T::zero(); n] };
        let local = Local { f, g, h, c, gc };

        let z = solve_subproblem(&local, &x, &bounds, tr.radius, merit, problem.threshold, w, penalty_weight);
        let predicted = local.model(&vec![T::zero(); n], merit, problem.threshold, w, penalty_weight)
            - local.model(&z, merit, problem.threshold, w, penalty_weight);
        let trial: Vec<T> = x.iter().zip(&z).map(|(&a, &b)| a + b).collect();
        let rho = if predicted > T::of(1e-12) * (T::one() + local.f.abs()) {
            let actual = merit_value(problem, &x, merit, w, penalty_weight)
                - merit_value(problem, &trial, merit, w, penalty_weight);
            Some(if actual.is_finite() { actual / predicted } else { T::neg_infinity() })
        } else {
            None
        };
        let radius_before = tr.radius;
        let accepted = tr.update(rho);
        if accepted {
            x = trial;
        }
        steps.push(TrStep {
            rho,
            radius_before,
            radius_after: tr.radius,
            accepted,
        });
        w = w * tr.barrier_decay;
    }
    Refinement {
        point: x,
        started_infeasible,
        steps,
    }
}

fn diag_curvature<T: Scalar>(p: &SafeProblem<T>, x: &[T], f: T) -> Vec<T> {
    let e = T::of(1e-3);
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + e;
            let up = p.objective.value(&y, &p.state);
            y[i] = x[i] - e;
            let down = p.objective.value(&y, &p.state);
            y[i] = x[i];
            ((up - f - f + down) / (e * e)).max(T::zero())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{IntBounds, VrbCount};
    use crate::solver::ConstraintModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> impl ConstraintModel<f64> {
        |a: &[f64], _s: &[f64]| 600.0 - 5.0 * a[0]
    }

    fn problem<'a>(c: &'a dyn ConstraintModel<f64>) -> SafeProblem<'a, f64> {
        SafeProblem {
            objective: &VrbCount,
            constraint: c,
            threshold: 500.0,
            state: vec![20.0],
            bounds: vec![IntBounds { min: 10, max: 100 }],
        }
    }

    fn state() -> TrustRegionState<f64> {
        TrustRegionState::from_section(&TrustRegionSection::default())
    }

    #[test]
    fn radius_rules_follow_hand_stepped_trace() {
        let mut tr = state();
        assert_eq!(tr.radius, 10.0);
        assert!(tr.update(Some(0.9)));
        assert_eq!(tr.radius, 20.0);
        assert!(tr.update(Some(0.75)));
        assert_eq!(tr.radius, 40.0);
        assert!(tr.update(Some(0.5)));
        assert_eq!(tr.radius, 40.0);
        assert!(!tr.update(Some(0.1)));
        assert_eq!(tr.radius, 10.0);
        assert!(!tr.update(None));
        assert_eq!(tr.radius, 2.5);
        assert!(!tr.update(Some(f64::NEG_INFINITY)));
        assert_eq!(tr.radius, 0.625);
        assert!(tr.update(Some(1.0)));
        assert!(tr.update(Some(1.0)));
        assert!(tr.update(Some(1.0)));
        assert!(tr.update(Some(1.0)));
        assert!(tr.update(Some(1.0)));
        assert!(tr.update(Some(1.0)));
        assert!(tr.update(Some(1.0)));
        assert!(tr.update(Some(1.0)));
        assert_eq!(tr.radius, 90.0, "capped at max_radius");
    }

    #[test]
    fn recorded_steps_obey_ratio_rules() {
        let c = toy();
        let p = problem(&c);
        let mut tr = state();
        let r = trust_region_refine(&[60.0], &p, &mut tr, 20, 1e6);
        for s in &r.steps {
            let expected = match s.rho {
                Some(rho) if rho >= 0.75 => (s.radius_before * 2.0).min(90.0),
                Some(rho) if rho > 0.25 => s.radius_before,
                _ => s.radius_before * 0.25,
            };
            assert_eq!(s.radius_after, expected);
        }
    }

    #[test]
    fn converges_to_linear_toy_optimum() {
        let c = toy();
        let p = problem(&c);
        let r = trust_region_refine(&[60.0], &p, &mut state(), 20, 1e6);
        assert!((r.point[0] - 20.0).abs() < 0.5, "{:?}", r.point);
        assert!(!r.started_infeasible);
    }

    #[test]
    fn stays_put_at_the_constrained_optimum() {
        let c = toy();
        let p = problem(&c);
        let r = trust_region_refine(&[20.0], &p, &mut state(), 20, 1e6);
        assert!((r.point[0] - 20.0).abs() < 1e-6, "{:?}", r.point);
    }

    #[test]
    fn feasible_starts_never_end_infeasible() {
        let c = toy();
        let p = problem(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let a = rng.random_range(20.0..=100.0);
            if 600.0 - 5.0 * a > 500.0 {
                continue;
            }
            let r = trust_region_refine(&[a], &p, &mut state(), 20, 1e6);
            assert!(600.0 - 5.0 * r.point[0] <= 500.0, "start {a} -> {:?}", r.point);
        }
    }

    #[test]
    fn infeasible_start_uses_penalty_and_is_flagged() {
        let c = toy();
        let p = problem(&c);
        let r = trust_region_refine(&[12.0], &p, &mut state(), 20, 1e6);
        assert!(r.started_infeasible);
        assert!(r.point[0] > 12.0);
    }
}

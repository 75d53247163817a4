//! Genetic operators over real-valued candidates.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// Index of the fittest (lowest) of `k` distinct members drawn uniformly.
/// Ties go to the lowest population index.
pub fn tournament_select<T: Scalar, R: Rng + ?Sized>(fitnesses: &[T], k: usize, rng: &mut R) -> usize {
    assert!(!fitnesses.is_empty(), "tournament over an empty population");
    let k = k.clamp(1, fitnesses.len());
    let mut drawn = sample(rng, fitnesses.len(), k).into_vec();
    drawn.sort_unstable();
    let mut best = drawn[0];
    for &i in &drawn[1..] {
        if fitnesses[i] < fitnesses[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn clamp_into<T: Scalar>(x: &mut [T], bounds: &[(T, T)]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.max(lo).min(hi);
    }
}

/// `beta * d1 + (1 - beta) * d2` and its mirror, with a single `beta ~ U(0, 1)`.
pub fn crossover<T: Scalar, R: Rng + ?Sized>(d1: &[T], d2: &[T], bounds: &[(T, T)], rng: &mut R) -> (Vec<T>, Vec<T>) {
    let beta = T::of(rng.random::<f64>());
    crossover_with(d1, d2, beta, bounds)
}

pub fn crossover_with<T: Scalar>(d1: &[T], d2: &[T], beta: T, bounds: &[(T, T)]) -> (Vec<T>, Vec<T>) {
    let one = T::one();
    let mut c1: Vec<T> = d1.iter().zip(d2).map(|(&a, &b)| beta * a + (one - beta) * b).collect();
    let mut c2: Vec<T> = d1.iter().zip(d2).map(|(&a, &b)| beta * b + (one - beta) * a).collect();
    clamp_into(&mut c1, bounds);
    clamp_into(&mut c2, bounds);
    (c1, c2)
}

/// `m(e) = m0 * (1 - e / E)`
pub fn mutation_rate(m0: f64, generation: usize, max_generations: usize) -> f64 {
    if max_generations == 0 {
        return 0.0;
    }
    (m0 * (1.0 - generation as f64 / max_generations as f64)).max(0.0)
}

/// Adds Gaussian noise with probability `m(e)`; a perturbed point that leaves
/// the bounds is discarded and `d` comes back unchanged.
pub fn mutate<T: Scalar, R: Rng + ?Sized>(
    d: &[T],
    generation: usize,
    max_generations: usize,
    m0: f64,
    scale: f64,
    bounds: &[(T, T)],
    rng: &mut R,
) -> Vec<T> {
    let gamma: f64 = rng.random();
    if gamma >= mutation_rate(m0, generation, max_generations) {
        return d.to_vec();
    }
    let normal = Normal::new(0.0, scale.max(0.0)).expect("finite scale");
    let moved: Vec<T> = d.iter().map(|&x| x + T::of(normal.sample(rng))).collect();
    let feasible = moved
        .iter()
        .zip(bounds)
        .all(|(&x, &(lo, hi))| x >= lo && x <= hi);
    if feasible {
        moved
    } else {
        d.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const B: [(f64, f64); 1] = [(10.0, 100.0)];

    #[test]
    fn full_tournament_returns_global_best() {
        let f = [3.0, 1.0, 4.0, 1.0, 5.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(tournament_select(&f, 5, &mut rng), 1);
        }
        assert_eq!(tournament_select(&[7.0], 1, &mut rng), 0);
    }

    #[test]
    fn binary_tournament_frequencies_match_pair_enumeration() {
        let f = [1.0, 2.0, 3.0, 4.0];
        // each of the C(4,2) = 6 pairs is equally likely; the winner is the lower index
        let mut expected = [0.0; 4];
        for i in 0..4 {
            for _ in i + 1..4 {
                expected[i] += 1.0 / 6.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            counts[tournament_select(&f, 2, &mut rng)] += 1;
        }
        for i in 0..4 {
            assert!((counts[i] as f64 / n as f64 - expected[i]).abs() < 0.02, "{i}: {counts:?}");
        }
    }

    #[test]
    fn crossover_fixed_point_and_boundary() {
        let (a, b) = crossover_with(&[40.0], &[40.0], 0.3, &B);
        assert_eq!((a[0], b[0]), (40.0, 40.0));
        let (a, b) = crossover_with(&[30.0], &[70.0], 1.0, &B);
        assert_eq!((a[0], b[0]), (30.0, 70.0));
    }

    #[test]
    fn final_generation_never_mutates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert_eq!(mutate(&[50.0], 30, 30, 1.0, 5.0, &B, &mut rng), vec![50.0]);
        }
    }

    #[test]
    fn initial_mutation_frequency_is_m0() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let changed = (0..n)
            .filter(|_| mutate(&[50.0], 0, 30, 0.3, 5.0, &B, &mut rng)[0] != 50.0)
            .count();
        assert!((changed as f64 / n as f64 - 0.3).abs() < 0.02);
    }

    #[test]
    fn out_of_bounds_mutation_is_discarded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let m = mutate(&[10.0], 0, 30, 1.0, 1e6, &B, &mut rng);
            assert!(m[0] == 10.0 || (10.0..=100.0).contains(&m[0]));
        }
        // a huge scale essentially always leaves the box
        let kept = (0..1000)
            .filter(|_| mutate(&[10.0], 0, 30, 1.0, 1e9, &B, &mut rng)[0] == 10.0)
            .count();
        assert!(kept > 990);
    }

    proptest! {
        #[test]
        fn children_are_convex_and_conserve_sum(d1 in 10.0f64..100.0, d2 in 10.0f64..100.0, beta in 0.0f64..=1.0) {
            let (a, b) = crossover_with(&[d1], &[d2], beta, &B);
            let (lo, hi) = (d1.min(d2), d1.max(d2));
            prop_assert!(a[0] >= lo - 1e-12 && a[0] <= hi + 1e-12);
            prop_assert!(b[0] >= lo - 1e-12 && b[0] <= hi + 1e-12);
            prop_assert!((a[0] + b[0] - d1 - d2).abs() < 1e-9);
        }
    }
}

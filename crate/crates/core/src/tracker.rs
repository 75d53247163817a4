//! Online dynamics tracking: EWC-regularized continual updates with
//! experience replay, and the adaptive threshold offset.

use std::collections::VecDeque;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{normalize, EnsembleSurrogate, Observation};
use crate::error::{Error, Result};
use crate::kan::{kan_train, KanModel, Sample, TrainOptions, Workspace};
use crate::problem::OffsetMode;
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;

/// `(lambda / 2) * sum_i F_i (theta_i - theta*_i)^2`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EwcPenalty<T: Scalar> {
    pub anchor_params: Vec<T>,
    pub fisher_diag: Vec<T>,
    pub lambda: T,
}

impl<T: Scalar> EwcPenalty<T> {
    pub fn new(anchor_params: Vec<T>, fisher_diag: Vec<T>, lambda: T) -> Result<Self> {
        if anchor_params.len() != fisher_diag.len() {
            return Err(Error::domain("fisher and anchor shapes differ"));
        }
        if fisher_diag.iter().any(|f| !(*f >= T::zero())) {
            return Err(Error::domain("fisher entries must be nonnegative"));
        }
        Ok(EwcPenalty {
            anchor_params,
            fisher_diag,
            lambda,
        })
    }

    pub(crate) fn check_shape(&self, n: usize) -> Result<()> {
        if self.anchor_params.len() != n {
            return Err(Error::domain(format!(
                "EWC anchor has {} parameters, model has {n}",
                self.anchor_params.len()
            )));
        }
        Ok(())
    }

    pub fn value(&self, params: &[T]) -> T {
        let s: T = params
            .iter()
            .zip(&self.anchor_params)
            .zip(&self.fisher_diag)
            .map(|((&p, &a), &f)| f * (p - a) * (p - a))
            .sum();
        self.lambda * T::of(0.5) * s
    }

    pub fn add_gradient(&self, params: &[T], grad: &mut [T]) {
        for (((g, &p), &a), &f) in grad
            .iter_mut()
            .zip(params)
            .zip(&self.anchor_params)
            .zip(&self.fisher_diag)
        {
            *g = *g + self.lambda * f * (p - a);
        }
    }
}

/// Diagonal empirical Fisher: mean of squared per-sample squared-error gradients.
pub fn compute_fisher<T: Scalar>(model: &KanModel<T>, data: &[Sample<T>]) -> Result<Vec<T>> {
    if data.is_empty() {
        return Err(Error::domain("fisher needs at least one sample"));
    }
    let n = model.param_count();
    let mut ws = Workspace::new(model);
    let mut fisher = vec![T::zero(); n];
    let mut grad = vec![T::zero(); n];
    let mut d_out = vec![T::zero(); model.output_dim()];
    let denom = T::of_usize(model.output_dim());
    for s in data {
        if s.input.len() != model.input_dim() || s.target.len() != model.output_dim() {
            return Err(Error::domain("sample dimensions do not match the model"));
        }
        grad.iter_mut().for_each(|g| *g = T::zero());
        let out = ws.forward(model, &s.input);
        for (k, (&y, &t)) in out.iter().zip(&s.target).enumerate() {
            d_out[k] = T::of(2.0) * (y - t) / denom;
        }
        ws.backward(model, &d_out, Some(&mut grad));
        for (f, g) in fisher.iter_mut().zip(&grad) {
            *f = *f + *g * *g;
        }
    }
    let m = T::of_usize(data.len());
    fisher.iter_mut().for_each(|f| *f = *f / m);
    Ok(fisher)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ReplayEntry<T: Scalar> {
    pub observation: Observation<T>,
    pub timestamp: u64,
}

/// Bounded FIFO of past observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ReplayBuffer<T: Scalar> {
    capacity: usize,
    entries: VecDeque<ReplayEntry<T>>,
    next_timestamp: u64,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            entries: VecDeque::with_capacity(capacity.max(1)),
            next_timestamp: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, observation: Observation<T>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(ReplayEntry {
            observation,
            timestamp: self.next_timestamp,
        });
        self.next_timestamp += 1;
    }

    pub fn extend(&mut self, obs: impl IntoIterator<Item = Observation<T>>) {
        for o in obs {
            self.push(o);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReplayEntry<T>> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&ReplayEntry<T>> {
        self.entries.get(i)
    }
}

/// Adaptive threshold offset `alpha` with a geometrically decaying step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct OffsetController<T: Scalar> {
    pub alpha: T,
    pub eta: T,
    pub eta_decay: T,
    pub delta: T,
    pub alpha_bounds: (T, T),
    pub mode: OffsetMode,
}

impl<T: Scalar> OffsetController<T> {
    pub fn new(alpha: T, eta: T, eta_decay: T, delta: T, alpha_bounds: (T, T), mode: OffsetMode) -> Result<Self> {
        if !(eta > T::zero()) || !(eta_decay > T::zero() && eta_decay <= T::one()) {
            return Err(Error::domain("need eta > 0 and eta_decay in (0, 1]"));
        }
        if alpha_bounds.0 > alpha_bounds.1 {
            return Err(Error::domain("alpha bounds reversed"));
        }
        Ok(OffsetController {
            alpha: alpha.max(alpha_bounds.0).min(alpha_bounds.1),
            eta,
            eta_decay,
            delta,
            alpha_bounds,
            mode,
        })
    }

    /// Moves `alpha` when the observed confidence `p_r` misses `target` by at
    /// least `delta`. Under-satisfaction lowers `alpha`, tightening `H(1+alpha)`.
    pub fn update(&mut self, p_r: T, target: T) -> T {
        let gap = p_r - target;
        if gap.abs() < self.delta {
            return self.alpha;
        }
        let step = match self.mode {
            OffsetMode::Signed => self.eta * gap.signum(),
            OffsetMode::Unsigned => self.eta,
        };
        self.alpha = (self.alpha + step).max(self.alpha_bounds.0).min(self.alpha_bounds.1);
        self.eta = self.eta * self.eta_decay;
        self.alpha
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ContinualConfig<T> {
    pub lambda: T,
    pub replay_ratio: f64,
    pub train: TrainOptions<T>,
}

/// Per-member diagnostics from one continual update.
#[derive(Clone, Debug)]
pub struct UpdateReport<T> {
    pub final_losses: Vec<T>,
    pub batch_size: usize,
}

/// One continual-learning step over every member:
/// anchor + Fisher over the current buffer, push `new_data`, train each member
/// on `new_data` plus a replay draw, with the EWC penalty.
pub fn continual_update<T: Scalar>(
    surrogate: &mut EnsembleSurrogate<T>,
    new_data: &[Observation<T>],
    buffer: &mut ReplayBuffer<T>,
    config: &ContinualConfig<T>,
    seed: u64,
    parallel: bool,
) -> Result<UpdateReport<T>> {
    if new_data.is_empty() {
        return Err(Error::domain("continual update needs new data"));
    }
    let scaler = surrogate.scaler.clone();
    let old: Vec<Sample<T>> = buffer.iter().map(|e| normalize(&scaler, &e.observation)).collect();
    let use_ewc = config.lambda != T::zero() && !old.is_empty();
    let anchors = |m: &KanModel<T>| -> Result<Option<EwcPenalty<T>>> {
        if !use_ewc {
            return Ok(None);
        }
        let fisher = compute_fisher(m, &old)?;
        EwcPenalty::new(m.params(), fisher, config.lambda).map(Some)
    };
    let penalties: Vec<Option<EwcPenalty<T>>> = if parallel {
        surrogate.members.par_iter().map(anchors).collect::<Result<_>>()?
    } else {
        surrogate.members.iter().map(anchors).collect::<Result<_>>()?
    };

    buffer.extend(new_data.iter().cloned());
    let fresh: Vec<Sample<T>> = new_data.iter().map(|o| normalize(&scaler, o)).collect();
    let n_replay = (config.replay_ratio * new_data.len() as f64).round() as usize;
    let batches: Vec<Vec<Sample<T>>> = (0..surrogate.len())
        .map(|i| {
            let mut rng = rng_for(seed, &[stream::REPLAY, i as u64]);
            let mut batch = fresh.clone();
            for _ in 0..n_replay {
                let e = buffer.get(rng.random_range(0..buffer.len())).expect("index in range");
                batch.push(normalize(&scaler, &e.observation));
            }
            batch
        })
        .collect();
    let batch_size = batches[0].len();

    let train = |(i, (m, (batch, pen))): (usize, (&mut KanModel<T>, (&Vec<Sample<T>>, &Option<EwcPenalty<T>>)))| {
        kan_train(m, batch, &config.train, pen.as_ref())
            .map(|h| *h.last().expect("at least one step"))
            .map_err(|e| Error::Member {
                index: i,
                source: Box::new(e),
            })
    };
    let final_losses: Vec<T> = if parallel {
        surrogate
            .members
            .par_iter_mut()
            .zip(batches.par_iter().zip(penalties.par_iter()))
            .enumerate()
            .map(train)
            .collect::<Result<_>>()?
    } else {
        surrogate
            .members
            .iter_mut()
            .zip(batches.iter().zip(penalties.iter()))
            .enumerate()
            .map(train)
            .collect::<Result<_>>()?
    };
    Ok(UpdateReport {
        final_losses,
        batch_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kan::{KanArch, Scaler};
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> KanModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KanModel::new(&KanArch::default(), &mut rng).unwrap()
    }

    fn random_samples(n: usize, seed: u64) -> Vec<Sample<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Sample::new(
                    vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                    rng.random_range(0.0..1.0),
                )
            })
            .collect()
    }

    #[test]
    fn penalty_is_zero_at_anchor_and_positive_elsewhere() {
        let m = model(1);
        let p = m.params();
        let pen = EwcPenalty::new(p.clone(), vec![0.5; p.len()], 100.0).unwrap();
        assert_eq!(pen.value(&p), 0.0);
        let mut q = p.clone();
        q[3] += 0.01;
        assert!(pen.value(&q) > 0.0);
        assert!(EwcPenalty::new(p.clone(), vec![-1.0; p.len()], 1.0).is_err());
        assert!(EwcPenalty::new(p, vec![1.0], 1.0).is_err());
    }

    #[test]
    fn fisher_is_zero_at_perfect_fit() {
        let m = model(2);
        let data: Vec<Sample<f64>> = random_samples(10, 3)
            .into_iter()
            .map(|s| {
                let y = m.forward(&s.input).unwrap()[0];
                Sample::new(s.input, y)
            })
            .collect();
        assert!(compute_fisher(&m, &data).unwrap().iter().all(|&f| f == 0.0));
    }

    #[test]
    fn fisher_of_one_sample_is_squared_gradient() {
        let m = model(4);
        let s = random_samples(1, 5);
        let mut g = vec![0.0; m.param_count()];
        m.sample_gradient(&s[0], &mut g).unwrap();
        let f = compute_fisher(&m, &s).unwrap();
        for (a, b) in f.iter().zip(&g) {
            assert_eq!(*a, b * b);
        }
    }

    #[test]
    fn fisher_matches_per_sample_loop() {
        let m = model(6);
        let data = random_samples(25, 7);
        let f = compute_fisher(&m, &data).unwrap();
        let mut expected = vec![0.0; m.param_count()];
        for s in &data {
            let mut g = vec![0.0; m.param_count()];
            m.sample_gradient(s, &mut g).unwrap();
            for (e, gi) in expected.iter_mut().zip(&g) {
                *e += gi * gi / data.len() as f64;
            }
        }
        for (a, b) in f.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1e-12));
        }
        assert!(compute_fisher(&m, &[]).is_err());
    }

    #[test]
    fn ewc_at_anchor_adds_nothing_to_first_loss() {
        let mut m = model(8);
        let data = random_samples(20, 9);
        let pen = EwcPenalty::new(m.params(), vec![1.0; m.param_count()], 100.0).unwrap();
        let mse0 = m.mse(&data).unwrap();
        let opts = TrainOptions { steps: 1, ..TrainOptions::default() };
        let hist = kan_train(&mut m, &data, &opts, Some(&pen)).unwrap();
        assert_eq!(hist[0], mse0);
    }

    #[test]
    fn buffer_evicts_oldest_first() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(Observation::scalar(i as f64, 0.0, 0.0));
        }
        assert_eq!(b.len(), 3);
        let acts: Vec<f64> = b.iter().map(|e| e.observation.action[0]).collect();
        assert_eq!(acts, vec![2.0, 3.0, 4.0]);
        let ts: Vec<u64> = b.iter().map(|e| e.timestamp).collect();
        assert_eq!(ts, vec![2, 3, 4]);
    }

    fn ctrl() -> OffsetController<f64> {
        OffsetController::new(0.0, 0.02, 0.95, 0.05, (-0.5, 0.5), OffsetMode::Signed).unwrap()
    }

    #[test]
    fn alpha_unchanged_inside_tolerance() {
        let mut c = ctrl();
        assert_eq!(c.update(0.8, 0.8), 0.0);
        assert_eq!(c.eta, 0.02);
    }

    #[test]
    fn under_satisfaction_tightens() {
        let mut c = ctrl();
        assert!((c.update(0.4, 0.8) + 0.02).abs() < 1e-15);
        let mut c = ctrl();
        assert!((c.update(1.0, 0.8) - 0.02).abs() < 1e-15);
        let mut u = OffsetController::new(0.0f64, 0.02, 0.95, 0.05, (-0.5, 0.5), OffsetMode::Unsigned).unwrap();
        assert!((u.update(0.4, 0.8) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn eta_decays_geometrically() {
        let mut c = ctrl();
        for k in 1..=10 {
            c.update(0.1, 0.8);
            assert!((c.eta - 0.02 * 0.95f64.powi(k)).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn alpha_stays_in_bounds(prs in proptest::collection::vec(0.0f64..=1.0, 1..200)) {
            let mut c = OffsetController::new(0.0, 0.2, 1.0, 0.05, (-0.5, 0.5), OffsetMode::Signed).unwrap();
            for p in prs {
                let a = c.update(p, 0.8);
                prop_assert!((-0.5..=0.5).contains(&a));
            }
        }

        #[test]
        fn buffer_never_exceeds_capacity(cap in 1usize..20, n in 0usize..100) {
            let mut b = ReplayBuffer::new(cap);
            for i in 0..n {
                b.push(Observation::scalar(i as f64, 0.0, 0.0));
                prop_assert!(b.len() <= cap);
            }
            let ts: Vec<u64> = b.iter().map(|e| e.timestamp).collect();
            prop_assert!(ts.windows(2).all(|w| w[1] == w[0] + 1));
        }
    }

    fn small_surrogate() -> (EnsembleSurrogate<f64>, Vec<Observation<f64>>) {
        let scaler = Scaler::new(vec![(10.0, 100.0), (12.0, 27.0)], (0.0, 2000.0)).unwrap();
        let data: Vec<Observation<f64>> = (0..60)
            .map(|i| {
                let a = 10.0 + (i * 13 % 91) as f64;
                let s = 12.0 + (i % 16) as f64;
                Observation::scalar(a, s, 50.0 + 25_000.0 / (a * (1.0 + 0.1 * (s - 12.0))))
            })
            .collect();
        let opts = TrainOptions { steps: 50, ..TrainOptions::default() };
        let (e, _) = EnsembleSurrogate::train(&data, &KanArch::default(), scaler, &opts, 3, 1, false).unwrap();
        (e, data)
    }

    #[test]
    fn huge_lambda_anchors_parameters() {
        let (mut e, data) = small_surrogate();
        let before: Vec<Vec<f64>> = e.members.iter().map(|m| m.params()).collect();
        let mut buf = ReplayBuffer::new(1000);
        buf.extend(data.iter().cloned());
        let new: Vec<Observation<f64>> = (0..20).map(|_| Observation::scalar(40.0, 20.0, 900.0)).collect();
        let cfg = ContinualConfig {
            lambda: 1e8,
            replay_ratio: 3.0,
            train: TrainOptions { steps: 50, learning_rate: 1e-9, momentum: 0.0 },
        };
        continual_update(&mut e, &new, &mut buf, &cfg, 11, false).unwrap();
        for (m, b) in e.members.iter().zip(&before) {
            let d: f64 = m.params().iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(d < 1e-3, "moved {d}");
        }
        assert_eq!(buf.len(), 80);
    }

    #[test]
    fn zero_lambda_is_plain_training_on_mixed_batch() {
        let (e0, data) = small_surrogate();
        let mut buf = ReplayBuffer::new(1000);
        buf.extend(data.iter().cloned());
        let new: Vec<Observation<f64>> = (0..5).map(|k| Observation::scalar(30.0 + k as f64, 20.0, 700.0)).collect();
        let cfg = ContinualConfig {
            lambda: 0.0,
            replay_ratio: 3.0,
            train: TrainOptions { steps: 20, ..TrainOptions::default() },
        };
        let mut e = e0.clone();
        let mut b1 = buf.clone();
        let rep = continual_update(&mut e, &new, &mut b1, &cfg, 5, false).unwrap();
        assert_eq!(rep.batch_size, 20);

        // reproduce member 0 by hand: same batch, no penalty
        let mut b2 = buf.clone();
        b2.extend(new.iter().cloned());
        let mut rng = rng_for(5, &[stream::REPLAY, 0]);
        let mut batch: Vec<Sample<f64>> = new.iter().map(|o| normalize(&e0.scaler, o)).collect();
        for _ in 0..15 {
            let o = &b2.get(rng.random_range(0..b2.len())).unwrap().observation;
            batch.push(normalize(&e0.scaler, o));
        }
        let mut m = e0.members[0].clone();
        kan_train(&mut m, &batch, &cfg.train, None).unwrap();
        assert_eq!(m.params(), e.members[0].params());
    }
}

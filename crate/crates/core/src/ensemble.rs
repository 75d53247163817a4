//! Bagged ensemble of KANs and the Gaussian chance-constraint reformulation.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kan::{extract_closed_form, kan_train, ClosedFormExpr, KanArch, KanModel, Sample, Scaler, TrainOptions};
use crate::problem::{ChanceConstraint, ReformulationMode};
use crate::rng::{derive_seed, rng_for, stream};
use crate::scalar::Scalar;
use crate::stats::inverse_normal_cdf;

/// One observed `(action, state, performance)` triple in raw units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Observation<T: Scalar> {
    pub action: Vec<T>,
    pub state: Vec<T>,
    pub performance: T,
}

impl<T: Scalar> Observation<T> {
    pub fn scalar(action: T, state: T, performance: T) -> Self {
        Observation {
            action: vec![action],
            state: vec![state],
            performance,
        }
    }
}

/// Draws `n_members` bootstrap resamples of `data`, each of size `|data|`.
/// Member `i` uses its own stream derived from `(seed, i)`.
pub fn bootstrap_assign<S: Clone>(data: &[S], n_members: usize, seed: u64) -> Result<Vec<Vec<S>>> {
    if data.is_empty() {
        return Err(Error::domain("cannot bootstrap an empty dataset"));
    }
    Ok((0..n_members)
        .map(|i| bootstrap_member(data, seed, i))
        .collect())
}

pub fn bootstrap_member<S: Clone>(data: &[S], seed: u64, member: usize) -> Vec<S> {
    let mut rng = rng_for(seed, &[stream::BOOTSTRAP, member as u64]);
    (0..data.len())
        .map(|_| data[rng.random_range(0..data.len())].clone())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EnsembleSurrogate<T: Scalar> {
    pub members: Vec<KanModel<T>>,
    pub scaler: Scaler<T>,
    pub member_seeds: Vec<u64>,
}

/// What a bagged training run produced besides the surrogate.
#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub loss_histories: Vec<Vec<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct Manifest<T: Scalar> {
    format: String,
    version: u32,
    members: Vec<String>,
    member_seeds: Vec<u64>,
    scaler: Scaler<T>,
}

impl<T: Scalar> EnsembleSurrogate<T> {
    pub fn from_members(members: Vec<KanModel<T>>, scaler: Scaler<T>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::domain("an ensemble needs at least two members"));
        }
        let (i, o) = (members[0].input_dim(), members[0].output_dim());
        if members.iter().any(|m| m.input_dim() != i || m.output_dim() != o) {
            return Err(Error::domain("members disagree on dimensions"));
        }
        if scaler.input_ranges.len() != i {
            return Err(Error::domain("scaler does not match member input dimension"));
        }
        let n = members.len();
        Ok(EnsembleSurrogate {
            members,
            scaler,
            member_seeds: vec![0; n],
        })
    }

    /// Bagged training: member `i` is initialized from `(seed, i)` and fit on
    /// its own bootstrap resample. Parallel and serial runs are identical.
    pub fn train(
        data: &[Observation<T>],
        arch: &KanArch,
        scaler: Scaler<T>,
        opts: &TrainOptions<T>,
        n_members: usize,
        seed: u64,
        parallel: bool,
    ) -> Result<(Self, TrainReport<T>)> {
        if n_members < 2 {
            return Err(Error::domain("an ensemble needs at least two members"));
        }
        let samples: Vec<Sample<T>> = data.iter().map(|o| normalize(&scaler, o)).collect();
        let bags = bootstrap_assign(&samples, n_members, seed)?;
        let train_one = |(i, bag): (usize, &Vec<Sample<T>>)| -> Result<(KanModel<T>, Vec<T>, u64)> {
            let member_seed = derive_seed(seed, &[stream::MEMBER_INIT, i as u64]);
            let mut rng = rng_for(member_seed, &[]);
            let mut model = KanModel::new(arch, &mut rng)?;
            model.scaler = scaler.clone();
            let hist = kan_train(&mut model, bag, opts, None).map_err(|e| Error::Member {
                index: i,
                source: Box::new(e),
            })?;
            Ok((model, hist, member_seed))
        };
        let results: Vec<Result<_>> = if parallel {
            bags.par_iter().enumerate().map(train_one).collect()
        } else {
            bags.iter().enumerate().map(train_one).collect()
        };
        let mut members = Vec::with_capacity(n_members);
        let mut seeds = Vec::with_capacity(n_members);
        let mut hists = Vec::with_capacity(n_members);
        for r in results {
            let (m, h, s) = r?;
            members.push(m);
            hists.push(h);
            seeds.push(s);
        }
        Ok((
            EnsembleSurrogate {
                members,
                scaler,
                member_seeds: seeds,
            },
            TrainReport { loss_histories: hists },
        ))
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn normalized_input(&self, action: &[T], state: &[T]) -> Vec<T> {
        action
            .iter()
            .chain(state)
            .enumerate()
            .map(|(i, &x)| self.scaler.normalize_input(i, x))
            .collect()
    }

    /// Every member's prediction in raw (de-normalized) units.
    pub fn member_outputs(&self, action: &[T], state: &[T]) -> Vec<T> {
        let x = self.normalized_input(action, state);
        self.members
            .iter()
            .map(|m| {
                let y = m.forward(&x).expect("input matches member dimension")[0];
                self.scaler.denormalize_output(y)
            })
            .collect()
    }

    /// Member predictions and their gradients with respect to the raw action.
    pub fn member_outputs_with_action_gradient(&self, action: &[T], state: &[T]) -> (Vec<T>, Vec<Vec<T>>) {
        let x = self.normalized_input(action, state);
        let out_scale = self.scaler.output_scale();
        let mut outs = Vec::with_capacity(self.members.len());
        let mut grads = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let (y, g) = m.output_and_input_gradient(&x).expect("input matches member dimension");
            outs.push(self.scaler.denormalize_output(y));
            grads.push(
                (0..action.len())
                    .map(|i| out_scale * g[i] * self.scaler.input_scale(i))
                    .collect(),
            );
        }
        (outs, grads)
    }

    pub fn closed_forms(&self) -> Vec<ClosedFormExpr> {
        self.members.iter().map(extract_closed_form).collect()
    }

    /// Writes `manifest.json` plus one checkpoint per member into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let names: Vec<String> = (0..self.members.len()).map(|i| format!("member_{i:02}.json")).collect();
        for (m, name) in self.members.iter().zip(&names) {
            std::fs::write(dir.join(name), m.to_json()?)?;
        }
        let manifest = Manifest {
            format: "inran-ensemble".into(),
            version: crate::kan::CHECKPOINT_VERSION,
            members: names,
            member_seeds: self.member_seeds.clone(),
            scaler: self.scaler.clone(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest<T> = serde_json::from_str(&text)?;
        if manifest.format != "inran-ensemble" {
            return Err(Error::Parse(format!("not an ensemble manifest: {}", manifest.format)));
        }
        let members = manifest
            .members
            .iter()
            .map(|name| KanModel::from_json(&std::fs::read_to_string(dir.join(name))?))
            .collect::<Result<Vec<_>>>()?;
        let mut s = Self::from_members(members, manifest.scaler)?;
        s.member_seeds = manifest.member_seeds;
        Ok(s)
    }
}

pub(crate) fn normalize<T: Scalar>(scaler: &Scaler<T>, o: &Observation<T>) -> Sample<T> {
    let input = o
        .action
        .iter()
        .chain(&o.state)
        .enumerate()
        .map(|(i, &x)| scaler.normalize_input(i, x))
        .collect();
    Sample::new(input, scaler.normalize_output(o.performance))
}

fn mean_of<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::of_usize(v.len())
}

fn variance_of<T: Scalar>(v: &[T]) -> T {
    let mu = mean_of(v);
    v.iter().map(|&k| (k - mu) * (k - mu)).sum::<T>() / T::of_usize(v.len() - 1)
}

/// `mu(a|s)`: average member prediction in raw units.
pub fn ensemble_mean<T: Scalar>(surrogate: &EnsembleSurrogate<T>, action: &[T], state: &[T]) -> T {
    mean_of(&surrogate.member_outputs(action, state))
}

/// `sigma^2(a|s)`: unbiased sample variance of member predictions.
pub fn ensemble_variance<T: Scalar>(surrogate: &EnsembleSurrogate<T>, action: &[T], state: &[T]) -> Result<T> {
    if surrogate.len() < 2 {
        return Err(Error::domain("variance needs at least two members"));
    }
    Ok(variance_of(&surrogate.member_outputs(action, state)))
}

/// `mu + spread * Phi^-1(eps_eff)` where spread is `sigma^2` (paper mode) or `sigma`.
pub fn reformulate<T: Scalar>(mean: T, variance: T, z: T, mode: ReformulationMode) -> T {
    let spread = match mode {
        ReformulationMode::Paper => variance,
        ReformulationMode::Standard => variance.max(T::zero()).sqrt(),
    };
    mean + spread * z
}

/// Value of the deterministic surrogate constraint; feasible iff it does not
/// exceed `constraint.effective_threshold()`.
pub fn reformulated_constraint_value<T: Scalar>(
    surrogate: &EnsembleSurrogate<T>,
    action: &[T],
    state: &[T],
    constraint: &ChanceConstraint<T>,
    mode: ReformulationMode,
) -> T {
    let z = inverse_normal_cdf(constraint.effective_confidence()).expect("validated confidence in (0,1)");
    let outs = surrogate.member_outputs(action, state);
    reformulate(mean_of(&outs), variance_of(&outs), z, mode)
}

/// Gradient of [`reformulated_constraint_value`] with respect to the raw action.
pub fn reformulated_constraint_gradient<T: Scalar>(
    surrogate: &EnsembleSurrogate<T>,
    action: &[T],
    state: &[T],
    constraint: &ChanceConstraint<T>,
    mode: ReformulationMode,
    out: &mut [T],
) {
    let z = inverse_normal_cdf(constraint.effective_confidence()).expect("validated confidence in (0,1)");
    let (outs, grads) = surrogate.member_outputs_with_action_gradient(action, state);
    let n = T::of_usize(outs.len());
    let mu = mean_of(&outs);
    let var = variance_of(&outs);
    for (i, o) in out.iter_mut().enumerate() {
        let dmu = grads.iter().map(|g| g[i]).sum::<T>() / n;
        let dvar = outs
            .iter()
            .zip(&grads)
            .map(|(&k, g)| (k - mu) * (g[i] - dmu))
            .sum::<T>()
            * T::of(2.0)
            / (n - T::one());
        let dspread = match mode {
            ReformulationMode::Paper => dvar,
            ReformulationMode::Standard => {
                if var > T::zero() {
                    dvar / (T::of(2.0) * var.sqrt())
                } else {
                    T::zero()
                }
            }
        };
        *o = dmu + dspread * z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kan::KanArch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Member whose single edge outputs a constant normalized value.
    fn constant_member(v: f64, scaler: &Scaler<f64>) -> KanModel<f64> {
        let arch = KanArch {
            widths: vec![2, 1],
            ..KanArch::default()
        };
        let mut m = KanModel::zeros(&arch).unwrap();
        m.layers[0].edges[0].coefficients = vec![scaler.normalize_output(v); 8];
        m.scaler = scaler.clone();
        m
    }

    fn ms_scaler() -> Scaler<f64> {
        Scaler::new(vec![(10.0, 100.0), (12.0, 27.0)], (0.0, 2000.0)).unwrap()
    }

    fn two_member(a: f64, b: f64) -> EnsembleSurrogate<f64> {
        let s = ms_scaler();
        EnsembleSurrogate::from_members(vec![constant_member(a, &s), constant_member(b, &s)], s).unwrap()
    }

    #[test]
    fn bootstrap_single_sample() {
        let bags = bootstrap_assign(&[7], 3, 1).unwrap();
        assert_eq!(bags, vec![vec![7], vec![7], vec![7]]);
    }

    #[test]
    fn bootstrap_is_reproducible_and_sized() {
        let data: Vec<usize> = (0..250).collect();
        let a = bootstrap_assign(&data, 10, 42).unwrap();
        let b = bootstrap_assign(&data, 10, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|bag| bag.len() == 250));
        assert_ne!(a[0], a[1]);
        assert!(bootstrap_assign::<u8>(&[], 3, 1).is_err());
    }

    #[test]
    fn mean_and_variance_of_two_members() {
        let e = two_member(100.0, 300.0);
        let (a, s) = ([50.0], [20.0]);
        assert!((ensemble_mean(&e, &a, &s) - 200.0).abs() < 1e-9);
        assert!((ensemble_variance(&e, &a, &s).unwrap() - 20000.0).abs() < 1e-6);
    }

    #[test]
    fn identical_members_have_zero_variance() {
        let e = two_member(400.0, 400.0);
        assert_eq!(ensemble_variance(&e, &[30.0], &[15.0]).unwrap(), 0.0);
        let c = ChanceConstraint::new(500.0, 0.7, 0.1).unwrap();
        let v = reformulated_constraint_value(&e, &[30.0], &[15.0], &c, ReformulationMode::Paper);
        assert!((v - 400.0).abs() < 1e-9);
        assert!(v <= c.effective_threshold());
    }

    #[test]
    fn median_confidence_collapses_to_mean() {
        let e = two_member(100.0, 300.0);
        let c = ChanceConstraint::new(500.0, 0.4, 0.1).unwrap();
        for mode in [ReformulationMode::Paper, ReformulationMode::Standard] {
            let v = reformulated_constraint_value(&e, &[50.0], &[20.0], &c, mode);
            assert!((v - ensemble_mean(&e, &[50.0], &[20.0])).abs() < 1e-9);
        }
    }

    #[test]
    fn variance_and_std_modes_differ_by_spread() {
        let z = inverse_normal_cdf(0.8f64).unwrap();
        assert!((z - 0.841_621_233_572_914).abs() < 1e-9);
        assert!((reformulate(300.0, 100.0, z, ReformulationMode::Paper) - (300.0 + 100.0 * z)).abs() < 1e-12);
        assert!((reformulate(300.0, 100.0, z, ReformulationMode::Standard) - (300.0 + 10.0 * z)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = ms_scaler();
        let members: Vec<KanModel<f64>> = (0..4)
            .map(|_| {
                let mut m = KanModel::new(&KanArch::default(), &mut rng).unwrap();
                m.scaler = s.clone();
                m
            })
            .collect();
        let e = EnsembleSurrogate::from_members(members, s).unwrap();
        let c = ChanceConstraint::new(500.0, 0.7, 0.1).unwrap();
        for mode in [ReformulationMode::Paper, ReformulationMode::Standard] {
            let mut g = [0.0];
            reformulated_constraint_gradient(&e, &[40.0], &[18.0], &c, mode, &mut g);
            let h = 1e-5;
            let fd = (reformulated_constraint_value(&e, &[40.0 + h], &[18.0], &c, mode)
                - reformulated_constraint_value(&e, &[40.0 - h], &[18.0], &c, mode))
                / (2.0 * h);
            assert!((fd - g[0]).abs() < 1e-5 * fd.abs().max(1.0), "{mode:?}: {fd} vs {}", g[0]);
        }
    }

    #[test]
    fn parallel_and_serial_training_agree() {
        let data: Vec<Observation<f64>> = (0..40)
            .map(|i| {
                let a = 10.0 + (i * 7 % 91) as f64;
                let s = 12.0 + (i % 16) as f64;
                Observation::scalar(a, s, 50.0 + 25_000.0 / (a * (1.0 + 0.1 * (s - 12.0))))
            })
            .collect();
        let opts = TrainOptions {
            steps: 20,
            ..TrainOptions::default()
        };
        let arch = KanArch::default();
        let (a, _) = EnsembleSurrogate::train(&data, &arch, ms_scaler(), &opts, 3, 9, true).unwrap();
        let (b, _) = EnsembleSurrogate::train(&data, &arch, ms_scaler(), &opts, 3, 9, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = two_member(120.0, 480.0);
        e.save_dir(dir.path()).unwrap();
        let back = EnsembleSurrogate::<f64>::load_dir(dir.path()).unwrap();
        assert_eq!(back, e);
    }
}

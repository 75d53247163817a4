//! Kolmogorov-Arnold networks with B-spline edges.
//!
//! A layer maps `n_in` inputs to `n_out` outputs; output `j` is the plain sum
//! of the `n_in` edge functions feeding it. A model is a composition of layers.

mod expr;
mod spline;
mod symbolic;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use expr::{parse_expression, ParsedExpr};
pub use spline::{uniform_grid, BasisEval, EdgeEval, SplineEdge, MAX_ORDER};
pub use symbolic::{extract_closed_form, fit_candidate, Candidate, ClosedFormExpr, EdgeTerm, FittedForm};
pub use train::{kan_train, Sample, TrainOptions};

/// Checkpoint format version written by [`KanModel::to_json`].
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KanArch {
    /// Layer widths, input first: `[2, 3, 1]` is two inputs, three hidden nodes, one output.
    pub widths: Vec<usize>,
    pub grid_intervals: usize,
    pub spline_order: usize,
    /// Half-width of the uniform noise used to initialize spline coefficients.
    pub init_scale: f64,
}

impl Default for KanArch {
    fn default() -> Self {
        KanArch {
            widths: vec![2, 3, 1],
            grid_intervals: 5,
            spline_order: 3,
            init_scale: 0.1,
        }
    }
}

/// Min-max normalization: inputs to `[-1, 1]`, outputs to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Scaler<T: Scalar> {
    pub input_ranges: Vec<(T, T)>,
    pub output_range: (T, T),
}

impl<T: Scalar> Scaler<T> {
    pub fn new(input_ranges: Vec<(T, T)>, output_range: (T, T)) -> Result<Self> {
        for &(lo, hi) in input_ranges.iter().chain(std::iter::once(&output_range)) {
            if !(hi > lo) {
                return Err(Error::domain("scaler range must have hi > lo"));
            }
        }
        Ok(Scaler {
            input_ranges,
            output_range,
        })
    }

    /// Leaves `n_in` inputs in `[-1, 1]` and outputs in `[0, 1]` untouched.
    pub fn identity(n_in: usize) -> Self {
        Scaler {
            input_ranges: vec![(-T::one(), T::one()); n_in],
            output_range: (T::zero(), T::one()),
        }
    }

    #[inline]
    pub fn normalize_input(&self, i: usize, x: T) -> T {
        let (lo, hi) = self.input_ranges[i];
        T::of(2.0) * (x - lo) / (hi - lo) - T::one()
    }

    /// `d normalized / d raw` for input `i`.
    #[inline]
    pub fn input_scale(&self, i: usize) -> T {
        let (lo, hi) = self.input_ranges[i];
        T::of(2.0) / (hi - lo)
    }

    #[inline]
    pub fn normalize_output(&self, y: T) -> T {
        let (lo, hi) = self.output_range;
        (y - lo) / (hi - lo)
    }

    #[inline]
    pub fn denormalize_output(&self, y: T) -> T {
        let (lo, hi) = self.output_range;
        lo + y * (hi - lo)
    }

    #[inline]
    pub fn output_scale(&self) -> T {
        self.output_range.1 - self.output_range.0
    }

    pub fn normalize_inputs(&self, raw: &[T]) -> Vec<T> {
        raw.iter()
            .enumerate()
            .map(|(i, &x)| self.normalize_input(i, x))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct KanLayer<T: Scalar> {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out x n_in`: edge `(j, p)` is at `j * n_in + p`.
    pub edges: Vec<SplineEdge<T>>,
}

impl<T: Scalar> KanLayer<T> {
    pub fn edge(&self, out: usize, inp: usize) -> &SplineEdge<T> {
        &self.edges[out * self.n_in + inp]
    }

    pub fn edge_mut(&mut self, out: usize, inp: usize) -> &mut SplineEdge<T> {
        &mut self.edges[out * self.n_in + inp]
    }

    pub fn forward(&self, input: &[T], output: &mut [T]) {
        for (j, o) in output.iter_mut().enumerate() {
            *o = (0..self.n_in).map(|p| self.edge(j, p).eval(input[p])).sum();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct KanModel<T: Scalar> {
    pub layers: Vec<KanLayer<T>>,
    pub scaler: Scaler<T>,
    #[serde(default)]
    pub training_loss_history: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ModelDocument<T: Scalar> {
    format: String,
    version: u32,
    scalar: String,
    widths: Vec<usize>,
    model: KanModel<T>,
}

impl<T: Scalar> KanModel<T> {
    /// Randomly initialized model. Spline coefficients are uniform in
    /// `±init_scale`, base weights uniform in `±1/sqrt(n_in)`, spline weights 1.
    pub fn new<R: Rng + ?Sized>(arch: &KanArch, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let s = arch.init_scale;
        for layer in &mut model.layers {
            let b = 1.0 / (layer.n_in as f64).sqrt();
            for e in &mut layer.edges {
                for c in &mut e.coefficients {
                    *c = T::of(rng.random_range(-s..=s));
                }
                e.base_weight = T::of(rng.random_range(-b..=b));
                e.spline_weight = T::one();
            }
        }
        Ok(model)
    }

    /// Model whose every edge is identically zero.
    pub fn zeros(arch: &KanArch) -> Result<Self> {
        if arch.widths.len() < 2 || arch.widths.contains(&0) {
            return Err(Error::domain("architecture needs at least two nonzero widths"));
        }
        let grid = uniform_grid(-T::one(), T::one(), arch.grid_intervals.max(1));
        let proto = SplineEdge::new(grid, arch.spline_order)?;
        let layers = arch
            .widths
            .windows(2)
            .map(|w| KanLayer {
                n_in: w[0],
                n_out: w[1],
                edges: vec![proto.clone(); w[0] * w[1]],
            })
            .collect();
        Ok(KanModel {
            layers,
            scaler: Scaler::identity(arch.widths[0]),
            training_loss_history: Vec::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.n_in).collect();
        w.push(self.output_dim());
        w
    }

    /// Evaluates the network on a normalized input vector.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        if input.len() != self.input_dim() {
            return Err(Error::domain(format!(
                "input has length {}, model expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut cur = input.to_vec();
        for layer in &self.layers {
            let mut next = vec![T::zero(); layer.n_out];
            layer.forward(&cur, &mut next);
            cur = next;
        }
        Ok(cur)
    }

    /// First output and its gradient with respect to the (normalized) inputs.
    pub fn output_and_input_gradient(&self, input: &[T]) -> Result<(T, Vec<T>)> {
        if input.len() != self.input_dim() {
            return Err(Error::domain("input dimension mismatch"));
        }
        let mut ws = Workspace::new(self);
        let out = ws.forward(self, input)[0];
        let mut seed = vec![T::zero(); self.output_dim()];
        seed[0] = T::one();
        let grad = ws.backward(self, &seed, None);
        Ok((out, grad))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.edges)
            .map(SplineEdge::param_count)
            .sum()
    }

    /// Flat parameter vector: per layer, per edge in row-major order,
    /// `[coefficients.., base_weight, spline_weight]`.
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for e in self.layers.iter().flat_map(|l| &l.edges) {
            out.extend_from_slice(&e.coefficients);
            out.push(e.base_weight);
            out.push(e.spline_weight);
        }
        out
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::domain(format!(
                "parameter vector has length {}, model has {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut i = 0;
        for e in self.layers.iter_mut().flat_map(|l| &mut l.edges) {
            let n = e.coefficients.len();
            e.coefficients.copy_from_slice(&params[i..i + n]);
            e.base_weight = params[i + n];
            e.spline_weight = params[i + n + 1];
            i += n + 2;
        }
        Ok(())
    }

    /// Versioned, self-describing JSON checkpoint.
    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            format: "inran-kan".into(),
            version: CHECKPOINT_VERSION,
            scalar: std::any::type_name::<T>().into(),
            widths: self.widths(),
            model: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument<T> = serde_json::from_str(text)?;
        if doc.format != "inran-kan" {
            return Err(Error::Parse(format!("not a KAN checkpoint: {}", doc.format)));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", doc.version)));
        }
        doc.model.validate()?;
        if doc.model.widths() != doc.widths {
            return Err(Error::Parse("checkpoint widths disagree with layers".into()));
        }
        Ok(doc.model)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::domain("model has no layers"));
        }
        for l in &self.layers {
            if l.edges.len() != l.n_in * l.n_out {
                return Err(Error::domain("layer edge count does not match its shape"));
            }
        }
        for w in self.layers.windows(2) {
            if w[0].n_out != w[1].n_in {
                return Err(Error::domain("adjacent layer dimensions do not match"));
            }
        }
        if self.scaler.input_ranges.len() != self.input_dim() {
            return Err(Error::domain("scaler does not match input dimension"));
        }
        Ok(())
    }
}

/// Reusable buffers for forward/backward passes over one model.
pub(crate) struct Workspace<T: Scalar> {
    acts: Vec<Vec<T>>,
    evals: Vec<Vec<EdgeEval<T>>>,
    offsets: Vec<Vec<usize>>,
    delta: Vec<T>,
    delta_next: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    pub(crate) fn new(model: &KanModel<T>) -> Self {
        let mut acts = vec![vec![T::zero(); model.input_dim()]];
        let mut evals = Vec::new();
        let mut offsets = Vec::new();
        let mut off = 0;
        for l in &model.layers {
            acts.push(vec![T::zero(); l.n_out]);
            let proto = l.edges[0].eval_full(T::zero());
            evals.push(vec![proto; l.edges.len()]);
            offsets.push(
                l.edges
                    .iter()
                    .map(|e| {
                        let o = off;
                        off += e.param_count();
                        o
                    })
                    .collect(),
            );
        }
        let widest = model.widths().into_iter().max().unwrap_or(1);
        Workspace {
            acts,
            evals,
            offsets,
            delta: vec![T::zero(); widest],
            delta_next: vec![T::zero(); widest],
        }
    }

    /// Forward pass caching every edge evaluation; returns the output slice.
    pub(crate) fn forward(&mut self, model: &KanModel<T>, input: &[T]) -> &[T] {
        self.acts[0].copy_from_slice(input);
        for (li, layer) in model.layers.iter().enumerate() {
            let (before, after) = self.acts.split_at_mut(li + 1);
            let x = &before[li];
            let y = &mut after[0];
            let evals = &mut self.evals[li];
            for j in 0..layer.n_out {
                let mut s = T::zero();
                for p in 0..layer.n_in {
                    let k = j * layer.n_in + p;
                    let ev = layer.edges[k].eval_full(x[p]);
                    s = s + ev.value;
                    evals[k] = ev;
                }
                y[j] = s;
            }
        }
        &self.acts[model.layers.len()]
    }

    /// Back-propagates `d_out` (dL/d output) through the cached pass. Adds
    /// parameter gradients into `grad` when given; returns dL/d input.
    pub(crate) fn backward(
        &mut self,
        model: &KanModel<T>,
        d_out: &[T],
        mut grad: Option<&mut [T]>,
    ) -> Vec<T> {
        self.delta[..d_out.len()].copy_from_slice(d_out);
        for (li, layer) in model.layers.iter().enumerate().rev() {
            let x = &self.acts[li];
            for v in &mut self.delta_next[..layer.n_in] {
                *v = T::zero();
            }
            for j in 0..layer.n_out {
                let g = self.delta[j];
                if g == T::zero() {
                    continue;
                }
                for p in 0..layer.n_in {
                    let k = j * layer.n_in + p;
                    let edge = &layer.edges[k];
                    let ev = &self.evals[li][k];
                    if let Some(grad) = grad.as_deref_mut() {
                        let off = self.offsets[li][k];
                        let nc = edge.coefficients.len();
                        let gs = g * edge.spline_weight;
                        let b = &ev.basis;
                        for r in 0..=edge.order() {
                            grad[off + b.first + r] = grad[off + b.first + r] + gs * b.values[r];
                        }
                        grad[off + nc] = grad[off + nc] + g * crate::scalar::silu(x[p]);
                        grad[off + nc + 1] = grad[off + nc + 1] + g * ev.spline;
                    }
                    self.delta_next[p] = self.delta_next[p] + g * ev.slope;
                }
            }
            std::mem::swap(&mut self.delta, &mut self.delta_next);
        }
        self.delta[..model.input_dim()].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_edge_maps_to_zero() {
        let arch = KanArch {
            widths: vec![1, 1],
            ..KanArch::default()
        };
        let m: KanModel<f64> = KanModel::zeros(&arch).unwrap();
        assert_eq!(m.forward(&[0.42]).unwrap(), vec![0.0]);
    }

    #[test]
    fn dimension_mismatch_is_domain_error() {
        let m: KanModel<f64> = KanModel::zeros(&KanArch::default()).unwrap();
        assert!(matches!(m.forward(&[0.1]), Err(Error::Domain(_))));
    }

    #[test]
    fn default_two_input_model_evaluates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m: KanModel<f64> = KanModel::new(&KanArch::default(), &mut rng).unwrap();
        let y = m.forward(&[0.5, 0.5]).unwrap();
        assert_eq!(y.len(), 1);
        assert!(y[0].is_finite());
        assert_eq!(m.param_count(), 9 * 10);
    }

    #[test]
    fn stacked_identity_layers_reproduce_input() {
        let arch = KanArch {
            widths: vec![1, 1, 1],
            grid_intervals: 5,
            ..KanArch::default()
        };
        let mut m: KanModel<f64> = KanModel::zeros(&arch).unwrap();
        for l in &mut m.layers {
            l.edges[0].fit_to(|x| x, 200).unwrap();
        }
        for k in 0..=90 {
            let x = -0.9 + k as f64 * 0.02;
            let y = m.forward(&[x]).unwrap()[0];
            assert!((y - x).abs() < 1e-3, "{x} -> {y}");
        }
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m: KanModel<f64> = KanModel::new(&KanArch::default(), &mut rng).unwrap();
        let mut z: KanModel<f64> = KanModel::zeros(&KanArch::default()).unwrap();
        z.set_params(&m.params()).unwrap();
        assert_eq!(z.layers, m.layers);
        assert!(z.set_params(&[1.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m: KanModel<f64> = KanModel::new(&KanArch::default(), &mut rng).unwrap();
        m.training_loss_history = vec![0.1 + 1e-17, 1.0 / 3.0, 2.0f64.sqrt()];
        m.scaler = Scaler::new(vec![(10.0, 100.0), (12.0, 27.0)], (0.0, 2000.0)).unwrap();
        let text = m.to_json().unwrap();
        let back = KanModel::<f64>::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m: KanModel<f64> = KanModel::new(&KanArch::default(), &mut rng).unwrap();
        let x = [0.3, -0.4];
        let (_, g) = m.output_and_input_gradient(&x).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (m.forward(&xp).unwrap()[0] - m.forward(&xm).unwrap()[0]) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }
}

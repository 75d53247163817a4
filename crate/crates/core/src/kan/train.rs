use serde::{Deserialize, Serialize};

use super::{KanModel, Workspace};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tracker::EwcPenalty;

/// One normalized training pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Sample<T: Scalar> {
    pub input: Vec<T>,
    pub target: Vec<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn new(input: Vec<T>, target: T) -> Self {
        Sample {
            input,
            target: vec![target],
        }
    }
}

/// Full-batch heavy-ball gradient descent settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions<T> {
    pub steps: usize,
    pub learning_rate: T,
    pub momentum: T,
}

impl<T: Scalar> Default for TrainOptions<T> {
    fn default() -> Self {
        TrainOptions {
            steps: 200,
            learning_rate: T::of(0.05),
            momentum: T::of(0.9),
        }
    }
}

fn check_data<T: Scalar>(model: &KanModel<T>, data: &[Sample<T>]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::domain("training data is empty"));
    }
    for s in data {
        if s.input.len() != model.input_dim() || s.target.len() != model.output_dim() {
            return Err(Error::domain("sample dimensions do not match the model"));
        }
    }
    Ok(())
}

impl<T: Scalar> KanModel<T> {
    /// Mean squared error over `data` (averaged over samples and outputs).
    pub fn mse(&self, data: &[Sample<T>]) -> Result<T> {
        check_data(self, data)?;
        let mut ws = Workspace::new(self);
        Ok(batch_loss(self, &mut ws, data, None))
    }

    /// MSE and its gradient with respect to [`KanModel::params`].
    pub fn mse_gradient(&self, data: &[Sample<T>]) -> Result<(T, Vec<T>)> {
        check_data(self, data)?;
        let mut ws = Workspace::new(self);
        let mut grad = vec![T::zero(); self.param_count()];
        let loss = batch_loss(self, &mut ws, data, Some(&mut grad));
        Ok((loss, grad))
    }

    /// Gradient of one sample's squared error; used for Fisher estimates.
    pub fn sample_gradient(&self, sample: &Sample<T>, grad: &mut [T]) -> Result<T> {
        check_data(self, std::slice::from_ref(sample))?;
        let mut ws = Workspace::new(self);
        for g in grad.iter_mut() {
            *g = T::zero();
        }
        Ok(batch_loss(self, &mut ws, std::slice::from_ref(sample), Some(grad)))
    }
}

pub(crate) fn batch_loss<T: Scalar>(
    model: &KanModel<T>,
    ws: &mut Workspace<T>,
    data: &[Sample<T>],
    mut grad: Option<&mut [T]>,
) -> T {
    let denom = T::of_usize(data.len() * model.output_dim());
    let two = T::of(2.0);
    let mut loss = T::zero();
    let mut d_out = vec![T::zero(); model.output_dim()];
    for s in data {
        let out = ws.forward(model, &s.input);
        for (k, (&y, &t)) in out.iter().zip(&s.target).enumerate() {
            let r = y - t;
            loss = loss + r * r;
            d_out[k] = two * r / denom;
        }
        if let Some(g) = grad.as_deref_mut() {
            ws.backward(model, &d_out, Some(g));
        }
    }
    loss / denom
}

/// Trains `model` in place on `data`, minimizing MSE plus the optional EWC
/// penalty. Returns the per-step loss (measured before each update), which is
/// also stored in `model.training_loss_history`.
pub fn kan_train<T: Scalar>(
    model: &mut KanModel<T>,
    data: &[Sample<T>],
    opts: &TrainOptions<T>,
    ewc: Option<&EwcPenalty<T>>,
) -> Result<Vec<T>> {
    check_data(model, data)?;
    if opts.steps == 0 {
        return Err(Error::domain("steps must be at least 1"));
    }
    let n = model.param_count();
    if let Some(p) = ewc {
        p.check_shape(n)?;
    }
    let mut ws = Workspace::new(model);
    let mut params = model.params();
    let mut velocity = vec![T::zero(); n];
    let mut grad = vec![T::zero(); n];
    let mut history = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        grad.iter_mut().for_each(|g| *g = T::zero());
        let mut loss = batch_loss(model, &mut ws, data, Some(&mut grad));
        if let Some(p) = ewc {
            loss = loss + p.value(&params);
            p.add_gradient(&params, &mut grad);
        }
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        history.push(loss);
        for ((v, g), w) in velocity.iter_mut().zip(&grad).zip(params.iter_mut()) {
            *v = opts.momentum * *v - opts.learning_rate * *g;
            *w = *w + *v;
        }
        model.set_params(&params)?;
    }
    model.training_loss_history = history.clone();
    Ok(history)
}

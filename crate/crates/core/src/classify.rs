//! Training-free classification: the gradient of `log p(x | p^T E)` with
//! respect to class logits `λ` at `λ = 0`, with an exhaustive per-class
//! likelihood oracle and a multi-step variant.

use crate::error::{Error, Result};
use crate::flow::Conditioning;
use crate::graph::{backward, GraphValue, ParamSet};
use crate::model::{log_likelihood, FlowModel};
use crate::tensor::Tensor;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `log p(x | softmax(λ)^T E)` and its gradient with respect to `λ`.
/// Model parameters are held fixed.
pub fn soft_log_likelihood(
    model: &FlowModel,
    params: &ParamSet,
    x: &Tensor,
    lambda: &Tensor,
) -> Result<(f64, Vec<f64>)> {
    let k = model.geometry().classes;
    if lambda.shape() != [k] {
        return Err(Error::shape("soft_log_likelihood", &[lambda.shape(), &[k]]));
    }
    let bound = params.bind(false);
    let leaf = GraphValue::param("lambda", lambda.clone());
    let cond = Conditioning::Soft(leaf.softmax()?);
    let enc = model.encode(&bound, &GraphValue::constant(x.clone()), &cond)?;
    let ll = log_likelihood(&enc)?;
    if !ll.item().is_finite() {
        return Err(Error::NonFinite("log-likelihood".into()));
    }
    let grad = backward(&ll)?
        .remove("lambda")
        .map_or_else(|| vec![0.0; k], Tensor::into_data);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("logit gradient".into()));
    }
    Ok((ll.item(), grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingleStep {
    pub label: usize,
    pub gradient: Vec<f64>,
}

/// Predicts `argmax_k ∂ log p / ∂λ_k` at `λ = 0`.
pub fn classify_single_step(
    model: &FlowModel,
    params: &ParamSet,
    x: &Tensor,
) -> Result<SingleStep> {
    let k = model.geometry().classes;
    let (_, gradient) = soft_log_likelihood(model, params, x, &Tensor::zeros(&[k]))?;
    Ok(SingleStep {
        label: argmax_lowest(&gradient),
        gradient,
    })
}

/// Evaluates `log p(x | k)` for every class and returns the best one.
pub fn classify_bruteforce(
    model: &FlowModel,
    params: &ParamSet,
    x: &Tensor,
) -> Result<(usize, Vec<f64>)> {
    let lls = (0..model.geometry().classes)
        .map(|k| model.log_prob(params, x, &Conditioning::Label(k)))
        .collect::<Result<Vec<_>>>()?;
    Ok((argmax_lowest(&lls), lls))
}

/// Gradient ascent on `λ` from zero; predicts `argmax softmax(λ)`.
pub fn classify_multistep(
    model: &FlowModel,
    params: &ParamSet,
    x: &Tensor,
    steps: usize,
    lr: f64,
) -> Result<usize> {
    if steps == 0 {
        return Err(Error::Invalid(
            "multi-step classification needs steps >= 1".into(),
        ));
    }
    let k = model.geometry().classes;
    let mut lambda = Tensor::zeros(&[k]);
    for _ in 0..steps {
        let (_, g) = soft_log_likelihood(model, params, x, &lambda)?;
        for (l, gi) in lambda.data_mut().iter_mut().zip(&g) {
            *l += lr * gi;
        }
        if !lambda.all_finite() {
            return Err(Error::NonFinite("class logits diverged".into()));
        }
    }
    Ok(argmax_lowest(lambda.data()))
}

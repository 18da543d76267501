//! Small dense linear algebra with reverse-mode gradients and Adam.
//!
//! Losses are written as closures that build a [`Graph`] from a set of
//! named parameter leaves. [`eval_with_grad`] runs one forward/backward
//! pass; [`finite_diff_check`] compares that against central differences
//! and is what the test suites lean on.

mod adam;
mod graph;
mod tensor;

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use graph::{
    cosine_similarity, gelu, gelu_derivative, log_sum_exp, Axis, Gradients, Graph, NodeId,
};
pub use tensor::Tensor;

/// Named parameter tensors, iterated in name order.
pub type Params = BTreeMap<String, Tensor>;

/// Name → graph leaf for every parameter of one evaluation.
pub type Bindings = BTreeMap<String, NodeId>;

/// Evaluates `build` with every entry of `params` bound as a trainable leaf
/// and returns the scalar loss together with its gradient for each
/// parameter.
pub fn eval_with_grad<F>(params: &Params, build: F) -> Result<(f64, Params)>
where
    F: Fn(&mut Graph, &Bindings) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let bindings: Bindings = params
        .iter()
        .map(|(name, value)| (name.clone(), graph.param(value.clone())))
        .collect();
    let out = build(&mut graph, &bindings)?;
    let loss = graph.value(out);
    if loss.len() != 1 {
        return Err(Error::Shape(format!(
            "loss must be scalar, got {:?}",
            loss.shape()
        )));
    }
    let loss = loss.item();
    let mut grads = graph.backward(out)?;
    let mut named = Params::new();
    for (name, &id) in &bindings {
        let shape = params[name].shape();
        let g = grads
            .take(id)
            .unwrap_or_else(|| Tensor::zeros(shape[0], *shape.last().unwrap()));
        named.insert(name.clone(), g);
    }
    Ok((loss, named))
}

/// Forward-only evaluation of the same closure.
pub fn eval<F>(params: &Params, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &Bindings) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let bindings: Bindings = params
        .iter()
        .map(|(name, value)| (name.clone(), graph.constant(value.clone())))
        .collect();
    let out = build(&mut graph, &bindings)?;
    Ok(graph.value(out).item())
}

/// Maximum over all parameter coordinates of
/// `|analytic − central| / max(|analytic|, |central|, 1e-6)`. The floor
/// keeps coordinates whose true gradient is zero from amplifying the
/// rounding noise of the central difference.
pub fn finite_diff_check<F>(params: &Params, build: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &Bindings) -> Result<NodeId>,
{
    let (_, analytic) = eval_with_grad(params, &build)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (name, value) in params {
        for k in 0..value.len() {
            let orig = value.data()[k];
            probe.get_mut(name).unwrap().data_mut()[k] = orig + step;
            let plus = eval(&probe, &build)?;
            probe.get_mut(name).unwrap().data_mut()[k] = orig - step;
            let minus = eval(&probe, &build)?;
            probe.get_mut(name).unwrap().data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[name].data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

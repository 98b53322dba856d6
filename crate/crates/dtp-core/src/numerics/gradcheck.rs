//! Finite-difference verification of reverse-mode gradients.
//!
//! The checker rebuilds the forward graph from scratch for every
//! perturbation, so it exercises exactly the code path training uses. All
//! checks run at f64: central differences at f32 lose too many digits to
//! separate real defects from rounding noise.

use crate::error::{DtpError, Result};
use crate::numerics::graph::{Graph, ValueId};
use crate::numerics::params::{ParamBinding, ParamStore};
use crate::numerics::tensor::{Real, Tensor};

/// Worst relative error seen for one parameter.
#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// One element whose analytic and finite-difference gradients disagree.
#[derive(Debug, Clone)]
pub struct Mismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub finite_diff: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamReport>,
    pub max_rel_err: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn is_pass(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Relative disagreement with a floor that absorbs finite-difference noise
/// on near-zero gradients.
pub fn relative_error(analytic: f64, finite_diff: f64) -> f64 {
    let denom = analytic.abs().max(finite_diff.abs()).max(1e-4);
    (analytic - finite_diff).abs() / denom
}

/// Verifies every learnable parameter of `store` against central finite
/// differences of the scalar loss defined by `build`. Also requires the
/// forward pass to be bit-identical across two evaluations.
pub fn finite_diff_check<B>(
    store: &ParamStore<f64>,
    build: &B,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &ParamBinding) -> Result<ValueId>,
{
    finite_diff_check_impl(store, build, step, tol, None)
}

/// Same check, but with one analytic gradient entry scaled by `factor`
/// before comparison. Used to prove the checker detects wrong gradients.
pub fn finite_diff_check_corrupted<B>(
    store: &ParamStore<f64>,
    build: &B,
    step: f64,
    tol: f64,
    corrupt_param: &str,
    corrupt_index: usize,
    factor: f64,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &ParamBinding) -> Result<ValueId>,
{
    finite_diff_check_impl(
        store,
        build,
        step,
        tol,
        Some((corrupt_param, corrupt_index, factor)),
    )
}

fn eval_loss<B>(store: &ParamStore<f64>, build: &B) -> Result<f64>
where
    B: Fn(&mut Graph<f64>, &ParamBinding) -> Result<ValueId>,
{
    let mut graph = Graph::new();
    let binding = store.bind(&mut graph)?;
    let loss = build(&mut graph, &binding)?;
    graph.value(loss).item().map(|v| v.to_f64())
}

fn finite_diff_check_impl<B>(
    store: &ParamStore<f64>,
    build: &B,
    step: f64,
    tol: f64,
    corruption: Option<(&str, usize, f64)>,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &ParamBinding) -> Result<ValueId>,
{
    // Determinism gate: the same parameters must give bit-identical losses.
    let mut graph = Graph::new();
    let binding = store.bind(&mut graph)?;
    let loss = build(&mut graph, &binding)?;
    let base = graph.value(loss).item()?;
    let again = eval_loss(store, build)?;
    if base.to_bits() != again.to_bits() {
        return Err(DtpError::NonDeterministic);
    }

    let grads = graph.backward(loss)?;

    let mut per_param = Vec::new();
    let mut mismatches = Vec::new();
    let mut max_rel = 0.0f64;
    for (name, param) in store.iter() {
        if !param.learnable {
            continue;
        }
        let id = binding.get(name)?;
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(param.value.shape()));
        let mut param_max = 0.0f64;
        for k in 0..param.value.len() {
            let mut a = analytic.data()[k];
            if let Some((cname, cidx, factor)) = corruption {
                if cname == name && cidx == k {
                    a *= factor;
                }
            }
            let mut plus = store.clone();
            {
                let p = plus
                    .iter_mut()
                    .find(|(n, _)| *n == name)
                    .expect("name from iteration")
                    .1;
                p.value.data_mut()[k] += step;
            }
            let mut minus = store.clone();
            {
                let p = minus
                    .iter_mut()
                    .find(|(n, _)| *n == name)
                    .expect("name from iteration")
                    .1;
                p.value.data_mut()[k] -= step;
            }
            let fd = (eval_loss(&plus, build)? - eval_loss(&minus, build)?) / (2.0 * step);
            let rel = relative_error(a, fd);
            param_max = param_max.max(rel);
            if rel > tol {
                mismatches.push(Mismatch {
                    name: name.to_string(),
                    index: k,
                    analytic: a,
                    finite_diff: fd,
                    rel_err: rel,
                });
            }
        }
        max_rel = max_rel.max(param_max);
        per_param.push(ParamReport {
            name: name.to_string(),
            checked: param.value.len(),
            max_rel_err: param_max,
        });
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        mismatches,
    })
}

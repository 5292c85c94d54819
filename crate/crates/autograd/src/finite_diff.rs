//! Central-difference gradient oracle.
//!
//! Recomputes the loss with each parameter entry nudged by ±h and compares
//! the quotient against the tape's analytic gradient.  Slow by design; use
//! tiny model instances.

use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{Result, Tensor};

/// Worst observed deviations for one parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_abs_diff: f32,
    pub max_rel_diff: f32,
}

/// Gradient check summary over all requested parameters.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_abs_diff: f32,
    pub max_rel_diff: f32,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn worst_param(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| {
            a.max_abs_diff
                .partial_cmp(&b.max_abs_diff)
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    }
}

/// Numeric gradient of `eval` wrt one parameter via central differences.
pub fn numeric_grad<F>(store: &mut ParamStore, name: &str, h: f32, mut eval: F) -> Result<Tensor>
where
    F: FnMut(&ParamStore) -> Result<f32>,
{
    let id = store.id(name).expect("parameter exists");
    let shape = store.get(id).shape().to_vec();
    let n = store.get(id).numel();
    let mut grad = Tensor::zeros(&shape);
    for i in 0..n {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + h;
        let plus = eval(store)?;
        store.get_mut(id).data_mut()[i] = orig - h;
        let minus = eval(store)?;
        store.get_mut(id).data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Compares analytic gradients of the scalar loss built by `build` against
/// central differences for every listed parameter.
///
/// The relative deviation uses |a - n| / max(|a|, |n|, 0.1), so tiny
/// gradients are judged by the absolute deviation alone.
pub fn gradcheck<F>(
    store: &mut ParamStore,
    names: &[&str],
    h: f32,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    // Analytic pass.
    let mut graph = Graph::new();
    let loss = build(store, &mut graph)?;
    let grads = graph.backward(loss)?;

    let mut report = GradCheckReport::default();
    for &name in names {
        let id = store.id(name).expect("parameter exists");
        let var = graph
            .bound_params()
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|&(_, v)| v);
        let shape = store.get(id).shape().to_vec();
        let analytic = match var.and_then(|v| grads.get(v)) {
            Some(g) => g.clone(),
            // No gradient path: the analytic gradient is zero everywhere.
            None => Tensor::zeros(&shape),
        };
        let numeric = numeric_grad(store, name, h, |s| {
            let mut g = Graph::new();
            let loss = build(s, &mut g)?;
            g.val(loss).item()
        })?;
        let mut check = ParamCheck {
            name: name.to_string(),
            max_abs_diff: 0.0,
            max_rel_diff: 0.0,
        };
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(0.1);
            check.max_abs_diff = check.max_abs_diff.max(abs);
            check.max_rel_diff = check.max_rel_diff.max(rel);
            report.entries_checked += 1;
        }
        report.max_abs_diff = report.max_abs_diff.max(check.max_abs_diff);
        report.max_rel_diff = report.max_rel_diff.max(check.max_rel_diff);
        report.params.push(check);
    }
    Ok(report)
}

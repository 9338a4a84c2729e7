use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::graph::{Feed, Graph, NodeId};
use crate::tensor::Tensor;

/// Denominator floor of the relative error `|a - n| / max(|a|, |n|, floor)`.
/// Below this magnitude the comparison is effectively absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub max_rel_error: f64,
    /// `(parameter, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub groups: Vec<GroupCheck>,
    pub tol: f64,
}

impl CheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }
}

/// Compares analytic gradients of `loss` against central finite differences.
///
/// Every tensor in `params` is perturbed entry by entry; `inputs` supplies the
/// remaining leaves. `group_of` maps a parameter name to the group it is
/// reported under.
pub fn grad_check<F: Feed + ?Sized>(
    graph: &Graph,
    loss: NodeId,
    params: &BTreeMap<String, Tensor>,
    inputs: &F,
    step: f64,
    tol: f64,
    group_of: impl Fn(&str) -> String,
) -> Result<CheckReport> {
    if step.is_nan() || step <= 0.0 {
        return Err(AutodiffError::InvalidStep(step));
    }
    if params.is_empty() {
        return Ok(CheckReport { groups: Vec::new(), tol });
    }

    let mut working = params.clone();
    let eval_loss = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
        Ok(graph.evaluate(&(p, inputs))?.value(loss).item())
    };

    let (analytic, base) = {
        let feed = (&working, inputs);
        let eval = graph.evaluate(&feed)?;
        let names: Vec<&str> = params.keys().map(String::as_str).collect();
        (graph.backprop_wrt(&eval, loss, &names)?, eval.value(loss).item())
    };
    let again = eval_loss(&working)?;
    if again.to_bits() != base.to_bits() {
        return Err(AutodiffError::NonDeterministic { max_diff: (again - base).abs() });
    }

    let mut groups: BTreeMap<String, GroupCheck> = BTreeMap::new();
    for (name, value) in params {
        let grad = analytic.get(name).expect("gradient for every checked parameter");
        let group = group_of(name);
        let entry = groups.entry(group.clone()).or_insert_with(|| GroupCheck {
            group,
            max_rel_error: 0.0,
            worst: None,
            entries: 0,
        });
        for i in 0..value.len() {
            let original = value.data()[i];
            working.get_mut(name).unwrap().data_mut()[i] = original + step;
            let plus = eval_loss(&working)?;
            working.get_mut(name).unwrap().data_mut()[i] = original - step;
            let minus = eval_loss(&working)?;
            working.get_mut(name).unwrap().data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            entry.entries += 1;
            if entry.worst.is_none() || rel > entry.max_rel_error {
                entry.max_rel_error = rel;
                entry.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(CheckReport { groups: groups.into_values().collect(), tol })
}

//! Central-difference gradient checking.

use super::graph::{Graph, Precision, Var};
use super::params::{BoundParams, ParamStore};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and central-difference values at the worst entry.
    pub worst_values: (f64, f64),
    pub checked: usize,
    /// Entries whose probes straddled a kink even at the smallest step.
    pub kinks: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Smallest step tried when shrinking across a kink, relative to `eps`.
const MIN_STEP_FRACTION: f64 = 1e-3;

fn evaluate<F>(params: &ParamStore, loss_fn: &mut F) -> Result<(f64, Vec<usize>)>
where
    F: FnMut(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut graph = Graph::with_precision(Precision::F64);
    let bound = params.bind(&mut graph)?;
    let loss = loss_fn(&mut graph, &bound)?;
    Ok((graph.value(loss).item(), graph.branch_signature()))
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// `(f(x + h) - f(x - h)) / (2 h)` for every entry of every parameter.
///
/// `h` starts at `eps`. When the two probes take different relu or max-pool
/// branches the difference straddles a kink, so `h` is divided by ten until
/// both probes and the base point share a branch signature (down to
/// `eps * 1e-3`, after which the last quotient is used as is).
///
/// `loss_fn` must be deterministic; it is evaluated in 64-bit precision.
pub fn finite_difference_check<F>(
    params: &ParamStore,
    eps: f64,
    tolerance: f64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &BoundParams) -> Result<Var>,
{
    let (analytic, base_signature) = {
        let mut graph = Graph::with_precision(Precision::F64);
        let bound = params.bind(&mut graph)?;
        let loss = loss_fn(&mut graph, &bound)?;
        let grads = graph.backward(loss)?;
        (bound.collect(&grads), graph.branch_signature())
    };

    let mut probe = params.clone();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    let mut worst_values = (0.0, 0.0);
    let mut checked = 0;
    let mut kinks = 0;
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.numel());
        for i in 0..n {
            let original = params.get(&name).unwrap().values()[i];
            let mut step = eps;
            let numeric = loop {
                probe.get_mut(&name).unwrap().values_mut()[i] = original + step;
                let (up, up_sig) = evaluate(&probe, &mut loss_fn)?;
                probe.get_mut(&name).unwrap().values_mut()[i] = original - step;
                let (down, down_sig) = evaluate(&probe, &mut loss_fn)?;
                probe.get_mut(&name).unwrap().values_mut()[i] = original;
                let smooth = up_sig == base_signature && down_sig == base_signature;
                if smooth || step / 10.0 < eps * MIN_STEP_FRACTION {
                    if !smooth {
                        kinks += 1;
                    }
                    break (up - down) / (2.0 * step);
                }
                step /= 10.0;
            };
            let err = relative_error(analytic[&name].values()[i], numeric);
            if err > max_rel_error {
                max_rel_error = err;
                worst = Some((name.clone(), i));
                worst_values = (analytic[&name].values()[i], numeric);
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        worst_values,
        checked,
        kinks,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}

use rand::seq::index;
use rand::Rng as _;

use super::network::Network;
use crate::catalog::{FunctionKind, FunctionSpec};
use crate::phenotype::{GraphNode, LayerGraph, NodeOp};
use super::tensor::Tensor4;
use super::NnError;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `name[index]` of the parameter with the largest error.
    pub worst: String,
}

/// Relative error with a floor on the denominator so that two vanishing
/// gradients compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of the train-mode loss against central
/// differences with step `eps` on `samples` randomly chosen parameters.
/// Every parameter tensor contributes at least one entry.
pub fn grad_check(
    net: &mut Network<f64>,
    x: &Tensor4<f64>,
    labels: &[usize],
    eps: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport, NnError> {
    net.loss_and_grad(x, labels)?;
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();
    let sizes: Vec<usize> = net.params().iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();

    let locate = |mut flat: usize| {
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        (t, flat)
    };
    let mut picks: Vec<(usize, usize)> = index::sample(rng, total, samples.min(total)).into_iter().map(locate).collect();
    for (t, &n) in sizes.iter().enumerate() {
        if !picks.iter().any(|&(pt, _)| pt == t) {
            picks.push((t, rng.gen_range(0..n)));
        }
    }
    picks.sort_unstable();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for (t, i) in picks {
        let orig = net.params()[t].value[i];
        net.params_mut()[t].value[i] = orig + eps;
        let plus = net.loss(x, labels)?;
        net.params_mut()[t].value[i] = orig - eps;
        let minus = net.loss(x, labels)?;
        net.params_mut()[t].value[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[t][i], numeric);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = format!("{}[{}]", net.params()[t].name, i);
        }
    }
    Ok(report)
}

/// A small graph using every node kind: CB, RB with a padded shortcut, MP,
/// AP, Sum, and a Concat whose inputs differ in spatial size.
pub fn coverage_graph() -> LayerGraph {
    let f = |id: usize, spec: FunctionSpec, inputs: Vec<usize>| GraphNode {
        id,
        op: NodeOp::Function(spec),
        inputs,
    };
    LayerGraph {
        nodes: vec![
            GraphNode {
                id: 0,
                op: NodeOp::Input(0),
                inputs: vec![],
            },
            f(1, FunctionSpec::conv_block(4, 3), vec![0]),
            f(2, FunctionSpec::res_block(5, 3), vec![1]),
            f(3, FunctionSpec::simple(FunctionKind::MaxPool), vec![2]),
            f(4, FunctionSpec::simple(FunctionKind::AvgPool), vec![1]),
            f(5, FunctionSpec::simple(FunctionKind::Sum), vec![3, 4]),
            f(6, FunctionSpec::simple(FunctionKind::Concat), vec![5, 2]),
            GraphNode {
                id: 7,
                op: NodeOp::Output,
                inputs: vec![6],
            },
        ],
    }
}

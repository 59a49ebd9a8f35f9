use crate::error::Result;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Elements probed per input; `None` probes all of them.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_elements: None,
        }
    }
}

/// Largest relative disagreement between reverse-mode gradients and central
/// finite differences of the scalar returned by `build`.
///
/// `build` receives a fresh graph and one trainable leaf per input. When only
/// a subset of elements is probed they are spread evenly over the input.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&g, &vars)?;
        Ok(g.item(out))
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&g, &vars)?;
    let grads = g.backward(loss)?;

    let mut pairs = Vec::new();
    let mut work = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let n = inputs[slot].numel();
        let probes = opts.max_elements.unwrap_or(n).clamp(1, n.max(1));
        for p in 0..probes.min(n) {
            let idx = p * n / probes;
            let orig = work[slot].data()[idx];
            work[slot].data_mut()[idx] = orig + opts.step;
            let up = eval(&work)?;
            work[slot].data_mut()[idx] = orig - opts.step;
            let down = eval(&work)?;
            work[slot].data_mut()[idx] = orig;
            pairs.push((analytic.data()[idx], (up - down) / (2.0 * opts.step)));
        }
    }

    // Tiny components are compared on the scale of the largest one.
    let scale = pairs.iter().fold(0.0f64, |m, &(_, n)| m.max(n.abs()));
    let floor = (1e-3 * scale).max(1e-10);
    Ok(pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max))
}

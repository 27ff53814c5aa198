//! Central finite-difference checks of backpropagated gradients.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-6)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between backprop and central differences over every
/// input coordinate. Coordinates whose ±step evaluations land on different
/// pieces of a non-smooth op are skipped.
pub fn max_grad_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> (f64, u64) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let root = f(&mut g, &vars).expect("forward");
        (g.value(root).item(), g.nonsmooth_signature())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars).expect("forward");
    let grads = g.backward(root).expect("backward");

    let mut worst: f64 = 0.0;
    let mut vals = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[i].shape());
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            vals[i].data_mut()[j] = x0 + FD_STEP;
            let (fp, sp) = eval(&vals);
            vals[i].data_mut()[j] = x0 - FD_STEP;
            let (fm, sm) = eval(&vals);
            vals[i].data_mut()[j] = x0;
            if sp != sm {
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Directional version for large inputs: each input `x_i` is replaced by
/// `x_i + t_i·d_i` with unit-norm direction `d_i`, and the derivative with
/// respect to every scalar `t_i` is checked at `t = 0`.
pub fn directional_grad_error<F>(inputs: &[Tensor], directions: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert_eq!(inputs.len(), directions.len());
    let ts: Vec<Tensor> = inputs.iter().map(|_| Tensor::zeros([1, 1])).collect();
    max_grad_error(&ts, |g, t| {
        let mut xs = Vec::with_capacity(inputs.len());
        for ((x, d), &ti) in inputs.iter().zip(directions).zip(t) {
            let norm = d.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let col = g.constant(Tensor::new([d.len(), 1], d.data().iter().map(|v| v / norm).collect())?);
            let step = g.matmul(col, ti)?;
            let step = g.reshape(step, x.shape())?;
            let base = g.constant(x.clone());
            xs.push(g.add(base, step)?);
        }
        f(g, &xs)
    })
}

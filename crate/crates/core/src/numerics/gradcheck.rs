//! Central finite-difference verification of taped gradients.

use crate::error::{invalid, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Gradients of `f` w.r.t. each input, by reverse-mode differentiation.
pub fn analytic_gradient<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Vec<T>>>
where
    T: Scalar,
    F: Fn(&Graph<T>, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map_or_else(|| vec![T::zero(); t.len()], <[T]>::to_vec)
        })
        .collect())
}

fn evaluate<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&Graph<T>, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(invalid!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        ));
    }
    Ok(v.data()[0])
}

/// `(f(x+ε) − f(x−ε)) / 2ε` for every input element.
pub fn numerical_gradient<T, F>(f: &F, inputs: &[Tensor<T>], eps: T) -> Result<Vec<Vec<T>>>
where
    T: Scalar,
    F: Fn(&Graph<T>, &[Var]) -> Result<Var>,
{
    let two = T::one() + T::one();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = evaluate(f, &work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = evaluate(f, &work)?;
            work[i].data_mut()[j] = orig;
            gi.push((plus - minus) / (two * eps));
        }
        out.push(gi);
    }
    Ok(out)
}

/// `maxᵢ |aᵢ − nᵢ| / max(1e-8, |aᵢ| + |nᵢ|)` over all entries.
pub fn max_relative_error<T: Scalar>(analytic: &[Vec<T>], numeric: &[Vec<T>]) -> T {
    let floor = T::from_f64_lossy(1e-8);
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| (a - n).abs() / floor.max(a.abs() + n.abs()))
        .fold(T::zero(), T::max)
}

/// Maximum relative discrepancy between taped and finite-difference
/// gradients of a scalar function.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&Graph<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, inputs)?;
    let numeric = numerical_gradient(&f, inputs, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    /// Early convolutional stages.
    Backbone,
    /// Deeper stages and the small heads stacked on top of them.
    Head,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Head => "head",
        })
    }
}

/// Trainable tensor with its momentum state. The gradient lives in the
/// value's grad slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub momentum_buffer: Vec<T>,
    pub group: ParamGroup,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, group: ParamGroup) -> Self {
        let momentum_buffer = vec![T::zero(); value.len()];
        Self {
            name: name.into(),
            value: value.with_requires_grad(true),
            momentum_buffer,
            group,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Resets every gradient slot to zeros.
pub fn zero_grads<T: Scalar>(params: &mut [Parameter<T>]) {
    for p in params {
        let zeros = vec![T::zero(); p.value.len()];
        p.value
            .set_grad(Some(zeros))
            .expect("zeros match the value length");
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearningRates<T>(BTreeMap<ParamGroup, T>);

impl<T: Scalar> LearningRates<T> {
    pub fn new(backbone: T, head: T) -> Self {
        Self(BTreeMap::from([
            (ParamGroup::Backbone, backbone),
            (ParamGroup::Head, head),
        ]))
    }

    pub fn uniform(lr: T) -> Self {
        Self::new(lr, lr)
    }

    pub fn get(&self, group: ParamGroup) -> Option<T> {
        self.0.get(&group).copied()
    }
}

/// SGD with momentum and L2 weight decay:
/// `g' = grad + wd·value; buf ← μ·buf + g'; value ← value − lr·buf`.
pub fn sgd_step<T: Scalar>(
    params: &mut [Parameter<T>],
    lrs: &LearningRates<T>,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    // validate everything first so a failure leaves all parameters untouched
    for p in params.iter() {
        if p.value.grad().is_none() {
            return Err(Error::Precondition(format!(
                "parameter `{}` has no gradient; run backward before sgd_step",
                p.name
            )));
        }
        if lrs.get(p.group).is_none() {
            return Err(invalid!(
                "no learning rate for group `{}` (parameter `{}`)",
                p.group,
                p.name
            ));
        }
    }
    for p in params.iter_mut() {
        let lr = lrs.get(p.group).expect("checked above");
        let grad = p.value.grad().expect("checked above").to_vec();
        let Parameter {
            value,
            momentum_buffer,
            ..
        } = p;
        for ((v, buf), g) in value
            .data_mut()
            .iter_mut()
            .zip(momentum_buffer.iter_mut())
            .zip(grad)
        {
            let g = g + weight_decay * *v;
            *buf = momentum * *buf + g;
            *v -= lr * *buf;
        }
    }
    Ok(())
}

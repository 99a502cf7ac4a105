//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles.
//! Nodes are appended in evaluation order, so the tape is already
//! topologically sorted and [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use cosim_core::numerics::{Graph, Tensor};
//!
//! let g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::scalar(3.0).with_requires_grad(true));
//! let y = g.sum(g.square(x));
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

use std::cell::{Ref, RefCell};

use crate::error::{invalid, Result};
use crate::numerics::kernels::{self, AxisTaps, ConvGeometry};
use crate::numerics::{Parameter, Scalar, Tensor};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        rows: AxisTaps<T>,
        cols: AxisTaps<T>,
    },
    L2Normalize {
        input: Var,
        norms: Vec<T>,
        eps: T,
    },
    L2Distance {
        a: Var,
        b: Var,
    },
    Cosine {
        a: Var,
        b: Var,
        norm_a: Vec<T>,
        norm_b: Vec<T>,
        eps: T,
    },
    Add(Var, Var),
    Mul(Var, Var),
    MulConst {
        input: Var,
        factors: Vec<T>,
    },
    AddConst(Var),
    Affine {
        input: Var,
        scale: T,
    },
    ScaleBy {
        input: Var,
        factor: Var,
    },
    ShiftBy {
        input: Var,
        shift: Var,
    },
    Abs(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum(Vec<(Var, T)>),
    ConcatChannels(Var, Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        weights: Option<Vec<T>>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
///
/// Operations take `&self`; the tape lives behind a `RefCell`, so a graph
/// is confined to the thread that builds it.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Input node; differentiated iff the tensor's `requires_grad` flag is set.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Differentiable leaf holding a copy of a parameter's value.
    pub fn param(&self, p: &Parameter<T>) -> Var {
        self.push(p.value.clone().with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn item(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn unary_map(&self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn conv2d(
        &self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (out, geom, cols) = {
            let nodes = self.nodes.borrow();
            let (x, k, b) = (
                &nodes[input.0].value,
                &nodes[kernel.0].value,
                &nodes[bias.0].value,
            );
            let geom = ConvGeometry::new(x.shape(), k.shape(), b.shape(), stride, pad)?;
            let (out, cols) = kernels::conv2d_forward(x.data(), k.data(), b.data(), &geom);
            let t = Tensor::from_vec(&[geom.out_channels, geom.out_h, geom.out_w], out)?;
            (t, geom, cols)
        };
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = {
            let v = self.value(x);
            Tensor::from_vec(v.shape(), kernels::relu_forward(v.data())).expect("same shape")
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn maxpool2d(&self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = {
            let v = self.value(x);
            let dims = v.dims3()?;
            check_pool(dims, k, stride)?;
            let (out, arg) = kernels::maxpool_forward(v.data(), dims, k, stride);
            let ho = kernels::pool_output_extent(dims.1, k, stride);
            let wo = kernels::pool_output_extent(dims.2, k, stride);
            (Tensor::from_vec(&[dims.0, ho, wo], out)?, arg)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool { input: x, argmax }, rg))
    }

    pub fn bilinear_upsample(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (out, rows, cols) = {
            let v = self.value(x);
            let dims = v.dims3()?;
            check_upsample(dims, out_h, out_w)?;
            let rows = kernels::align_corners_taps(dims.1, out_h);
            let cols = kernels::align_corners_taps(dims.2, out_w);
            let out = kernels::bilinear_forward(v.data(), dims, &rows, &cols);
            (Tensor::from_vec(&[dims.0, out_h, out_w], out)?, rows, cols)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Upsample {
                input: x,
                rows,
                cols,
            },
            rg,
        ))
    }

    pub fn l2_normalize_channels(&self, x: Var, eps: T) -> Result<Var> {
        let (out, norms) = {
            let v = self.value(x);
            let dims = v.dims3()?;
            let (out, norms) = kernels::l2_normalize_forward(v.data(), dims, eps);
            (Tensor::from_vec(v.shape(), out)?, norms)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::L2Normalize {
                input: x,
                norms,
                eps,
            },
            rg,
        ))
    }

    /// Per-location Euclidean distance over channels; output is `h×w`.
    pub fn l2_distance(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            kernels::same_shape(ta, tb, "l2 distance")?;
            let (_, h, w) = ta.dims3()?;
            Tensor::from_vec(
                &[h, w],
                kernels::l2_distance_forward(ta.data(), tb.data(), ta.dims3()?),
            )?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::L2Distance { a, b }, rg))
    }

    /// Per-location cosine similarity over channels; output is `h×w`.
    pub fn cosine_similarity(&self, a: Var, b: Var, eps: T) -> Result<Var> {
        let (out, parts) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            kernels::same_shape(ta, tb, "cosine similarity")?;
            let dims = ta.dims3()?;
            let mut parts = kernels::cosine_forward(ta.data(), tb.data(), dims, eps);
            let sim = std::mem::take(&mut parts.sim);
            (Tensor::from_vec(&[dims.1, dims.2], sim)?, parts)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            Op::Cosine {
                a,
                b,
                norm_a: parts.norm_a,
                norm_b: parts.norm_b,
                eps,
            },
            rg,
        ))
    }

    fn binary(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        kernels::same_shape(ta, tb, what)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant array of the same length.
    pub fn mul_const(&self, x: Var, factors: &[T]) -> Result<Var> {
        let out = {
            let v = self.value(x);
            if v.len() != factors.len() {
                return Err(invalid!(
                    "mul_const: {} factors for tensor of shape {:?}",
                    factors.len(),
                    v.shape()
                ));
            }
            let data = v.data().iter().zip(factors).map(|(&a, &b)| a * b).collect();
            Tensor::from_vec(v.shape(), data)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::MulConst {
                input: x,
                factors: factors.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise sum with a constant array of the same length.
    pub fn add_const(&self, x: Var, offsets: &[T]) -> Result<Var> {
        let out = {
            let v = self.value(x);
            if v.len() != offsets.len() {
                return Err(invalid!(
                    "add_const: {} offsets for tensor of shape {:?}",
                    offsets.len(),
                    v.shape()
                ));
            }
            let data = v.data().iter().zip(offsets).map(|(&a, &b)| a + b).collect();
            Tensor::from_vec(v.shape(), data)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AddConst(x), rg))
    }

    /// `scale·x + shift` with constant scalars.
    pub fn affine(&self, x: Var, scale: T, shift: T) -> Var {
        self.unary_map(x, Op::Affine { input: x, scale }, |v| scale * v + shift)
    }

    /// `x · s` for a scalar node `s`, broadcast over `x`.
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        let f = self.scalar_of(s, "scale_by")?;
        let out = self.value(x).map(|v| v * f);
        let rg = self.rg(&[x, s]);
        Ok(self.push(
            out,
            Op::ScaleBy {
                input: x,
                factor: s,
            },
            rg,
        ))
    }

    /// `x + s` for a scalar node `s`, broadcast over `x`.
    pub fn shift_by(&self, x: Var, s: Var) -> Result<Var> {
        let b = self.scalar_of(s, "shift_by")?;
        let out = self.value(x).map(|v| v + b);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ShiftBy { input: x, shift: s }, rg))
    }

    fn scalar_of(&self, s: Var, what: &str) -> Result<T> {
        self.value(s)
            .item()
            .map_err(|_| invalid!("{what}: operand must be a scalar node"))
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary_map(x, Op::Abs(x), |v| v.abs())
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary_map(x, Op::Exp(x), |v| v.exp())
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary_map(x, Op::Square(x), |v| v * v)
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = {
            let v = self.value(x);
            v.sum() / T::from_usize_lossy(v.len())
        };
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `Σ wᵢ·xᵢ`, accumulated left to right from zero, over same-shape nodes.
    pub fn weighted_sum(&self, terms: &[(Var, T)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(invalid!("weighted_sum needs at least one term"));
        };
        let out = {
            let nodes = self.nodes.borrow();
            let shape = nodes[first.0].value.shape().to_vec();
            let mut acc = Tensor::zeros(&shape);
            for &(v, wgt) in terms {
                let t = &nodes[v.0].value;
                if t.shape() != shape.as_slice() {
                    return Err(invalid!(
                        "weighted_sum: shape mismatch {:?} vs {:?}",
                        t.shape(),
                        shape
                    ));
                }
                for (a, &x) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a += wgt * x;
                }
            }
            acc
        };
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), rg))
    }

    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (ca, ha, wa) = ta.dims3()?;
            let (cb, hb, wb) = tb.dims3()?;
            if (ha, wa) != (hb, wb) {
                return Err(invalid!(
                    "concat_channels: spatial mismatch {ha}×{wa} vs {hb}×{wb}"
                ));
            }
            let mut data = ta.data().to_vec();
            data.extend_from_slice(tb.data());
            Tensor::from_vec(&[ca + cb, ha, wa], data)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatChannels(a, b), rg))
    }

    /// Mean per-pixel cross-entropy of `K×h×w` logits against class indices.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.xent(logits, labels, None)
    }

    /// [`Graph::softmax_cross_entropy`] with each pixel's term scaled by
    /// its weight.
    pub fn weighted_softmax_cross_entropy(
        &self,
        logits: Var,
        labels: &[usize],
        weights: &[T],
    ) -> Result<Var> {
        if weights.len() != labels.len() {
            return Err(invalid!(
                "cross entropy: {} weights for {} labels",
                weights.len(),
                labels.len()
            ));
        }
        self.xent(logits, labels, Some(weights))
    }

    fn xent(&self, logits: Var, labels: &[usize], weights: Option<&[T]>) -> Result<Var> {
        let (loss, probs) = {
            let v = self.value(logits);
            let dims = v.dims3()?;
            if labels.len() != dims.1 * dims.2 {
                return Err(invalid!(
                    "cross entropy: {} labels for a {}×{} map",
                    labels.len(),
                    dims.1,
                    dims.2
                ));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= dims.0) {
                return Err(invalid!(
                    "cross entropy: label {bad} out of range for {} classes",
                    dims.0
                ));
            }
            kernels::softmax_xent_forward(v.data(), labels, weights, dims)
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                weights: weights.map(<[T]>::to_vec),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| invalid!("backward: node {} does not belong to this graph", loss.0))?;
        if root.value.len() != 1 {
            return Err(invalid!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut send = |v: Var, d: Vec<T>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(d),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped above"),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                    cols,
                } => {
                    let need_input = nodes[input.0].requires_grad;
                    let cg =
                        kernels::conv2d_backward(&g, val(*kernel).data(), cols, geom, need_input);
                    if let Some(dx) = cg.input {
                        send(*input, dx);
                    }
                    send(*kernel, cg.kernel);
                    send(*bias, cg.bias);
                }
                Op::Relu(x) => send(*x, kernels::relu_backward(val(*x).data(), &g)),
                Op::MaxPool { input, argmax } => send(
                    *input,
                    kernels::maxpool_backward(&g, argmax, val(*input).len()),
                ),
                Op::Upsample { input, rows, cols } => {
                    let dims = val(*input).dims3()?;
                    send(*input, kernels::bilinear_backward(&g, dims, rows, cols));
                }
                Op::L2Normalize { input, norms, eps } => {
                    let dims = val(*input).dims3()?;
                    let dx =
                        kernels::l2_normalize_backward(node.value.data(), norms, &g, dims, *eps);
                    send(*input, dx);
                }
                Op::L2Distance { a, b } => {
                    let (ta, tb) = (val(*a), val(*b));
                    let da = kernels::l2_distance_backward(
                        ta.data(),
                        tb.data(),
                        node.value.data(),
                        &g,
                        ta.dims3()?,
                    );
                    let db = da.iter().map(|&v| -v).collect();
                    send(*a, da);
                    send(*b, db);
                }
                Op::Cosine {
                    a,
                    b,
                    norm_a,
                    norm_b,
                    eps,
                } => {
                    let (ta, tb) = (val(*a), val(*b));
                    let dims = ta.dims3()?;
                    let sim = node.value.data();
                    let da = kernels::cosine_backward_one(
                        ta.data(),
                        tb.data(),
                        norm_a,
                        norm_b,
                        sim,
                        &g,
                        dims,
                        *eps,
                    );
                    let db = kernels::cosine_backward_one(
                        tb.data(),
                        ta.data(),
                        norm_b,
                        norm_a,
                        sim,
                        &g,
                        dims,
                        *eps,
                    );
                    send(*a, da);
                    send(*b, db);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                    let db = g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                    send(*a, da);
                    send(*b, db);
                }
                Op::MulConst { input, factors } => send(
                    *input,
                    g.iter().zip(factors).map(|(&x, &f)| x * f).collect(),
                ),
                Op::AddConst(x) => send(*x, g),
                Op::Affine { input, scale } => {
                    send(*input, g.iter().map(|&x| x * *scale).collect())
                }
                Op::ScaleBy { input, factor } => {
                    let f = val(*factor).data()[0];
                    let ds = g.iter().zip(val(*input).data()).map(|(&x, &y)| x * y).sum();
                    send(*input, g.iter().map(|&x| x * f).collect());
                    send(*factor, vec![ds]);
                }
                Op::ShiftBy { input, shift } => {
                    let ds = g.iter().copied().sum();
                    send(*input, g);
                    send(*shift, vec![ds]);
                }
                Op::Abs(x) => {
                    let d = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(&gv, &v)| {
                            if v > T::zero() {
                                gv
                            } else if v < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    send(*x, d);
                }
                Op::Exp(x) => send(
                    *x,
                    g.iter()
                        .zip(node.value.data())
                        .map(|(&a, &e)| a * e)
                        .collect(),
                ),
                Op::Square(x) => {
                    let two = T::one() + T::one();
                    send(
                        *x,
                        g.iter()
                            .zip(val(*x).data())
                            .map(|(&a, &v)| two * v * a)
                            .collect(),
                    )
                }
                Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
                Op::Mean(x) => {
                    let n = val(*x).len();
                    send(*x, vec![g[0] / T::from_usize_lossy(n); n]);
                }
                Op::WeightedSum(terms) => {
                    for &(v, wgt) in terms {
                        send(v, g.iter().map(|&x| x * wgt).collect());
                    }
                }
                Op::ConcatChannels(a, b) => {
                    let na = val(*a).len();
                    send(*a, g[..na].to_vec());
                    send(*b, g[na..].to_vec());
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    weights,
                    probs,
                } => {
                    let dims = val(*logits).dims3()?;
                    send(
                        *logits,
                        kernels::softmax_xent_backward(
                            probs,
                            labels,
                            weights.as_deref(),
                            g[0],
                            dims,
                        ),
                    );
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn check_pool((_, h, w): (usize, usize, usize), k: usize, stride: usize) -> Result<()> {
    if k == 0 || stride == 0 {
        return Err(invalid!("maxpool2d window and stride must be positive"));
    }
    if k > h || k > w {
        return Err(invalid!("maxpool2d window {k} larger than input {h}×{w}"));
    }
    Ok(())
}

pub(crate) fn check_upsample(
    (_, h, w): (usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Result<()> {
    if out_h < h || out_w < w {
        return Err(invalid!(
            "bilinear_upsample target {out_h}×{out_w} is smaller than source {h}×{w}; downsampling is not supported"
        ));
    }
    Ok(())
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the node did not contribute to the loss or was not
    /// differentiable.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of each bound node into its parameter's grad slot.
    /// Parameters whose node received no gradient get zeros added, so the
    /// slot exists afterwards either way.
    pub fn accumulate_into(&self, bindings: &[Var], params: &mut [Parameter<T>]) -> Result<()> {
        if bindings.len() != params.len() {
            return Err(invalid!(
                "{} bindings for {} parameters",
                bindings.len(),
                params.len()
            ));
        }
        for (&v, p) in bindings.iter().zip(params.iter_mut()) {
            match self.get(v) {
                Some(g) => p.value.accumulate_grad(g)?,
                None => {
                    let zeros = vec![T::zero(); p.value.len()];
                    p.value.accumulate_grad(&zeros)?
                }
            }
        }
        Ok(())
    }
}

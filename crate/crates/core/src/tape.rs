//! Reverse-mode automatic differentiation on a flat arena tape.
//!
//! Every operation records its inputs by [`ValueId`] and its result tensor in
//! forward order; [`Tape::backward`] walks the arena once in reverse,
//! dispatching each op's reverse pass from [`crate::kernels`]. Values are
//! checked for finiteness as they are produced, so a numerical failure
//! surfaces at the node that created it instead of as a NaN loss many steps
//! later.
//!
//! The tape holds plain tensors, not references, so a recorded graph is
//! self-contained: gradient checking reruns the same builder code with
//! `f64` tensors and compares against finite differences.

use std::collections::BTreeMap;

use crate::error::SdrError;
use crate::kernels;
use crate::tensor::{Scalar, Tensor};
use crate::Result;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param,
    Conv2d {
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        pad: usize,
    },
    LayerNormChan {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    },
    Relu {
        input: ValueId,
    },
    Softplus {
        input: ValueId,
    },
    ConcatChan {
        inputs: Vec<ValueId>,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Sub {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Affine {
        input: ValueId,
        mul: f64,
    },
    MulBroadcastChan {
        input: ValueId,
        map: ValueId,
    },
    Reshape {
        input: ValueId,
    },
    ReflectPad {
        input: ValueId,
        top: usize,
        left: usize,
    },
    Crop {
        input: ValueId,
        top: usize,
        left: usize,
    },
    WindowAttention {
        query: ValueId,
        key: ValueId,
        bias: ValueId,
        p: usize,
    },
    WindowGather {
        attn: ValueId,
        map: ValueId,
        p: usize,
    },
    LossL1L2 {
        pred: ValueId,
        target: ValueId,
        valid: ValueId,
    },
    LossSilog {
        pred: ValueId,
        target: ValueId,
        valid: ValueId,
        alpha: f64,
        lambda: f64,
    },
}

impl Op {
    fn label(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::LayerNormChan { .. } => "layer_norm_chan",
            Op::Relu { .. } => "relu",
            Op::Softplus { .. } => "softplus",
            Op::ConcatChan { .. } => "concat_chan",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Affine { .. } => "affine",
            Op::MulBroadcastChan { .. } => "mul_broadcast_chan",
            Op::Reshape { .. } => "reshape",
            Op::ReflectPad { .. } => "reflect_pad",
            Op::Crop { .. } => "crop",
            Op::WindowAttention { .. } => "window_attention",
            Op::WindowGather { .. } => "window_gather",
            Op::LossL1L2 { .. } => "loss_l1l2",
            Op::LossSilog { .. } => "loss_silog",
        }
    }
}

struct Node<T: Scalar> {
    op: Op,
    value: Tensor<T>,
    name: Option<String>,
}

/// Gradients of one scalar root with respect to every tape value. Entries
/// stay `None` for values the root does not depend on.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

/// Recording arena. Build a graph with the op methods, read values back with
/// [`Tape::value`], differentiate with [`Tape::backward`].
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Value of a rank-0 node.
    pub fn scalar(&self, id: ValueId) -> T {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value.data()[0]
    }

    fn node_desc(&self, idx: usize) -> String {
        match &self.nodes[idx].name {
            Some(n) => format!("{} '{}'", self.nodes[idx].op.label(), n),
            None => format!("{}#{}", self.nodes[idx].op.label(), idx),
        }
    }

    fn push(&mut self, op: Op, value: Tensor<T>, name: Option<String>) -> Result<ValueId> {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { op, value, name });
        if !self.nodes[id.0].value.all_finite() {
            return Err(SdrError::NonFinite {
                node: self.node_desc(id.0),
            });
        }
        Ok(id)
    }

    /// Records an input tensor that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<ValueId> {
        self.push(Op::Const, value, None)
    }

    /// Records a named trainable tensor. Gradients of params can be harvested
    /// by name with [`Tape::param_grads`].
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<ValueId> {
        self.push(Op::Param, value, Some(name.to_string()))
    }

    pub fn conv2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            out,
            None,
        )
    }

    pub fn conv_transpose2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<ValueId> {
        let out = kernels::conv_transpose2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
            output_pad,
        )?;
        self.push(
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            out,
            None,
        )
    }

    pub fn layer_norm_chan(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        let out =
            kernels::layer_norm_chan(self.value(input), self.value(gamma), self.value(beta), eps)?;
        self.push(
            Op::LayerNormChan {
                input,
                gamma,
                beta,
                eps,
            },
            out,
            None,
        )
    }

    pub fn relu(&mut self, input: ValueId) -> Result<ValueId> {
        let out = kernels::relu(self.value(input));
        self.push(Op::Relu { input }, out, None)
    }

    pub fn softplus(&mut self, input: ValueId) -> Result<ValueId> {
        let out = kernels::softplus(self.value(input));
        self.push(Op::Softplus { input }, out, None)
    }

    pub fn concat_chan(&mut self, inputs: &[ValueId]) -> Result<ValueId> {
        let tensors: Vec<&Tensor<T>> = inputs.iter().map(|&id| self.value(id)).collect();
        let out = kernels::concat_chan(&tensors)?;
        self.push(
            Op::ConcatChan {
                inputs: inputs.to_vec(),
            },
            out,
            None,
        )
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = kernels::ew_add(self.value(a), self.value(b))?;
        self.push(Op::Add { a, b }, out, None)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = kernels::ew_sub(self.value(a), self.value(b))?;
        self.push(Op::Sub { a, b }, out, None)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = kernels::ew_mul(self.value(a), self.value(b))?;
        self.push(Op::Mul { a, b }, out, None)
    }

    /// `mul * x + add` with scalar constants.
    pub fn affine(&mut self, input: ValueId, mul: f64, add: f64) -> Result<ValueId> {
        let out = kernels::affine(self.value(input), T::from_f64(mul), T::from_f64(add));
        self.push(Op::Affine { input, mul }, out, None)
    }

    pub fn mul_broadcast_chan(&mut self, input: ValueId, map: ValueId) -> Result<ValueId> {
        let out = kernels::mul_broadcast_chan(self.value(input), self.value(map))?;
        self.push(Op::MulBroadcastChan { input, map }, out, None)
    }

    /// Reinterprets the value under a new shape with the same element count.
    pub fn reshape(&mut self, input: ValueId, shape: &[usize]) -> Result<ValueId> {
        let out = self.value(input).clone().reshaped(shape)?;
        self.push(Op::Reshape { input }, out, None)
    }

    pub fn reflect_pad(
        &mut self,
        input: ValueId,
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    ) -> Result<ValueId> {
        let out = kernels::reflect_pad2d(self.value(input), top, bottom, left, right)?;
        self.push(Op::ReflectPad { input, top, left }, out, None)
    }

    pub fn crop(
        &mut self,
        input: ValueId,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    ) -> Result<ValueId> {
        let out = kernels::crop2d(self.value(input), top, left, height, width)?;
        self.push(Op::Crop { input, top, left }, out, None)
    }

    pub fn window_attention(
        &mut self,
        query: ValueId,
        key: ValueId,
        bias: ValueId,
        p: usize,
    ) -> Result<ValueId> {
        let out =
            kernels::window_attention(self.value(query), self.value(key), self.value(bias), p)?;
        self.push(
            Op::WindowAttention {
                query,
                key,
                bias,
                p,
            },
            out,
            None,
        )
    }

    pub fn window_gather(&mut self, attn: ValueId, map: ValueId, p: usize) -> Result<ValueId> {
        let out = kernels::window_gather(self.value(attn), self.value(map), p)?;
        self.push(Op::WindowGather { attn, map, p }, out, None)
    }

    pub fn loss_l1l2(&mut self, pred: ValueId, target: ValueId, valid: ValueId) -> Result<ValueId> {
        let loss = kernels::loss_l1l2(self.value(pred), self.value(target), self.value(valid))?;
        let out = Tensor::from_vec(&[], vec![loss])?;
        self.push(
            Op::LossL1L2 {
                pred,
                target,
                valid,
            },
            out,
            None,
        )
    }

    pub fn loss_silog(
        &mut self,
        pred: ValueId,
        target: ValueId,
        valid: ValueId,
        alpha: f64,
        lambda: f64,
    ) -> Result<ValueId> {
        let loss = kernels::loss_silog(
            self.value(pred),
            self.value(target),
            self.value(valid),
            T::from_f64(alpha),
            T::from_f64(lambda),
        )?;
        let out = Tensor::from_vec(&[], vec![loss])?;
        self.push(
            Op::LossSilog {
                pred,
                target,
                valid,
                alpha,
                lambda,
            },
            out,
            None,
        )
    }

    /// Reverse pass from a rank-0 root. Returns the gradient of the root with
    /// respect to every leaf (const or param) it depends on; intermediate
    /// gradients are dropped as soon as they have been propagated.
    pub fn backward(&self, root: ValueId) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(SdrError::Config(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), T::ONE));

        for idx in (0..self.nodes.len()).rev() {
            let go = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !go.all_finite() {
                return Err(SdrError::NonFinite {
                    node: format!("gradient of {}", self.node_desc(idx)),
                });
            }
            match &self.nodes[idx].op {
                Op::Const | Op::Param => {
                    grads[idx] = Some(go);
                    continue;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let (gi, gw, gb) = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        bias.is_some(),
                        *stride,
                        *pad,
                        &go,
                    )?;
                    accum(&mut grads, *input, gi);
                    accum(&mut grads, *weight, gw);
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        accum(&mut grads, *b, gb);
                    }
                }
                Op::ConvTranspose2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let (gi, gw, gb) = kernels::conv_transpose2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        bias.is_some(),
                        *stride,
                        *pad,
                        &go,
                    )?;
                    accum(&mut grads, *input, gi);
                    accum(&mut grads, *weight, gw);
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        accum(&mut grads, *b, gb);
                    }
                }
                Op::LayerNormChan {
                    input,
                    gamma,
                    beta,
                    eps,
                } => {
                    let (gi, gg, gb) = kernels::layer_norm_chan_backward(
                        self.value(*input),
                        self.value(*gamma),
                        *eps,
                        &go,
                    )?;
                    accum(&mut grads, *input, gi);
                    accum(&mut grads, *gamma, gg);
                    accum(&mut grads, *beta, gb);
                }
                Op::Relu { input } => {
                    accum(
                        &mut grads,
                        *input,
                        kernels::relu_backward(self.value(*input), &go),
                    );
                }
                Op::Softplus { input } => {
                    accum(
                        &mut grads,
                        *input,
                        kernels::softplus_backward(self.value(*input), &go),
                    );
                }
                Op::ConcatChan { inputs } => {
                    let shapes: Vec<Vec<usize>> = inputs
                        .iter()
                        .map(|&id| self.value(id).shape().to_vec())
                        .collect();
                    let parts = kernels::concat_chan_backward(&shapes, &go);
                    for (&id, g) in inputs.iter().zip(parts) {
                        accum(&mut grads, id, g);
                    }
                }
                Op::Add { a, b } => {
                    accum(&mut grads, *a, go.clone());
                    accum(&mut grads, *b, go);
                }
                Op::Sub { a, b } => {
                    accum(&mut grads, *a, go.clone());
                    accum(&mut grads, *b, go.map(|v| -v));
                }
                Op::Mul { a, b } => {
                    let ga = kernels::ew_mul(&go, self.value(*b))?;
                    let gb = kernels::ew_mul(&go, self.value(*a))?;
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Affine { input, mul } => {
                    let m = T::from_f64(*mul);
                    accum(&mut grads, *input, go.map(|v| v * m));
                }
                Op::MulBroadcastChan { input, map } => {
                    let (gi, gm) = kernels::mul_broadcast_chan_backward(
                        self.value(*input),
                        self.value(*map),
                        &go,
                    );
                    accum(&mut grads, *input, gi);
                    accum(&mut grads, *map, gm);
                }
                Op::Reshape { input } => {
                    let gi = go.reshaped(self.value(*input).shape())?;
                    accum(&mut grads, *input, gi);
                }
                Op::ReflectPad { input, top, left } => {
                    let gi = kernels::reflect_pad2d_backward(
                        self.value(*input).shape(),
                        *top,
                        *left,
                        &go,
                    );
                    accum(&mut grads, *input, gi);
                }
                Op::Crop { input, top, left } => {
                    let gi =
                        kernels::crop2d_backward(self.value(*input).shape(), *top, *left, &go);
                    accum(&mut grads, *input, gi);
                }
                Op::WindowAttention {
                    query,
                    key,
                    bias,
                    p,
                } => {
                    let (gq, gk, gb) = kernels::window_attention_backward(
                        self.value(*query),
                        self.value(*key),
                        &self.nodes[idx].value,
                        *p,
                        &go,
                    );
                    accum(&mut grads, *query, gq);
                    accum(&mut grads, *key, gk);
                    accum(&mut grads, *bias, gb);
                }
                Op::WindowGather { attn, map, p } => {
                    let (ga, gm) = kernels::window_gather_backward(
                        self.value(*attn),
                        self.value(*map),
                        *p,
                        &go,
                    );
                    accum(&mut grads, *attn, ga);
                    accum(&mut grads, *map, gm);
                }
                Op::LossL1L2 {
                    pred,
                    target,
                    valid,
                } => {
                    let g = kernels::loss_l1l2_backward(
                        self.value(*pred),
                        self.value(*target),
                        self.value(*valid),
                        go.data()[0],
                    )?;
                    accum(&mut grads, *pred, g);
                }
                Op::LossSilog {
                    pred,
                    target,
                    valid,
                    alpha,
                    lambda,
                } => {
                    let g = kernels::loss_silog_backward(
                        self.value(*pred),
                        self.value(*target),
                        self.value(*valid),
                        T::from_f64(*alpha),
                        T::from_f64(*lambda),
                        go.data()[0],
                    )?;
                    accum(&mut grads, *pred, g);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Collects gradients of every named param, keyed by name. Params the
    /// root does not depend on map to zero tensors of the param's shape.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param, Some(name)) = (&node.op, &node.name) {
                let g = grads.grads[idx]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

fn accum<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: ValueId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *v;
            }
        }
        slot => *slot = Some(g),
    }
}

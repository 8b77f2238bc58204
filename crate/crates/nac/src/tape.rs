//! Reverse-mode autodiff on a dynamically recorded tape.
//!
//! Every forward pass records primitive ops into a fresh `Tape`; `backward`
//! replays them once in reverse, accumulating adjoints. The tape is recorded
//! per pass because the attention layer's Euler unroll has data-dependent
//! step counts.
//!
//! A tape built with [`Tape::inference`] runs the same forward code without
//! recording anything: intermediate tensors are freed as soon as the last
//! handle drops, which is what the benchmark harness measures.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, IndexTensor, Tensor};

/// Handle to a tensor produced on (or bound to) a tape.
///
/// Cloning is cheap; the payload is shared. `id` is `None` when the tape is
/// in inference mode.
#[derive(Clone)]
pub struct Value {
    data: Rc<Tensor>,
    id: Option<usize>,
}

impl Value {
    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn item(&self) -> f64 {
        self.data.item()
    }
}

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Neg { a: usize },
    Exp { a: usize },
    Sigmoid { a: usize },
    Softplus { a: usize },
    Tanh { a: usize },
    Scale { a: usize, s: f64 },
    AddScalar { a: usize },
    Matmul { a: usize, b: usize },
    TransposeLast2 { a: usize },
    SwapAxes12 { a: usize },
    SoftmaxLastDim { a: usize },
    LogSoftmaxLastDim { a: usize },
    SumAll { a: usize },
    SumLastDim { a: usize },
    MeanLastDim { a: usize },
    Reshape { a: usize },
    GatherRows { a: usize, idx: IndexTensor, n: usize },
    TileRows { a: usize },
    ConcatLastDim { a: usize, b: usize, da: usize },
    IndexLastDim { a: usize, idx: Vec<usize>, n: usize },
    IndexAxis1 { a: usize, i: usize, b_dim: usize },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Wengert list: ops in topological order, inputs before consumers.
pub struct Tape {
    recording: bool,
    nodes: Vec<Node>,
}

impl Tape {
    /// A recording tape for training / gradient checks.
    pub fn new() -> Self {
        Tape { recording: true, nodes: Vec::new() }
    }

    /// A non-recording tape: same forward math, no saved state, no backward.
    pub fn inference() -> Self {
        Tape { recording: false, nodes: Vec::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Value {
        debug_assert!(value.is_finite(), "non-finite value produced on tape");
        let data = Rc::new(value);
        if !self.recording {
            return Value { data, id: None };
        }
        let id = self.nodes.len();
        self.nodes.push(Node { value: Rc::clone(&data), op });
        Value { data, id: Some(id) }
    }

    fn val(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    /// Bind a tensor as a differentiable leaf (a parameter or input).
    pub fn leaf(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf)
    }

    /// Bind a tensor that never receives a gradient (masks, targets, ...).
    /// On a recording tape this is still a node so ops can read its value.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf)
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: &Value, b: &Value) -> Result<Value> {
        let out = tensor::add(&a.data, &b.data)?;
        Ok(self.push(out, Op::Add { a: a.id.unwrap_or(0), b: b.id.unwrap_or(0) }))
    }

    pub fn sub(&mut self, a: &Value, b: &Value) -> Result<Value> {
        let out = tensor::sub(&a.data, &b.data)?;
        Ok(self.push(out, Op::Sub { a: a.id.unwrap_or(0), b: b.id.unwrap_or(0) }))
    }

    pub fn mul(&mut self, a: &Value, b: &Value) -> Result<Value> {
        let out = tensor::mul(&a.data, &b.data)?;
        Ok(self.push(out, Op::Mul { a: a.id.unwrap_or(0), b: b.id.unwrap_or(0) }))
    }

    pub fn div(&mut self, a: &Value, b: &Value) -> Result<Value> {
        let out = tensor::div(&a.data, &b.data)?;
        Ok(self.push(out, Op::Div { a: a.id.unwrap_or(0), b: b.id.unwrap_or(0) }))
    }

    pub fn neg(&mut self, a: &Value) -> Value {
        self.push(a.data.neg(), Op::Neg { a: a.id.unwrap_or(0) })
    }

    pub fn exp(&mut self, a: &Value) -> Value {
        self.push(a.data.exp(), Op::Exp { a: a.id.unwrap_or(0) })
    }

    pub fn sigmoid(&mut self, a: &Value) -> Value {
        self.push(a.data.sigmoid(), Op::Sigmoid { a: a.id.unwrap_or(0) })
    }

    pub fn softplus(&mut self, a: &Value) -> Value {
        self.push(a.data.softplus(), Op::Softplus { a: a.id.unwrap_or(0) })
    }

    pub fn tanh(&mut self, a: &Value) -> Value {
        self.push(a.data.tanh(), Op::Tanh { a: a.id.unwrap_or(0) })
    }

    pub fn scale(&mut self, a: &Value, s: f64) -> Value {
        self.push(a.data.scale(s), Op::Scale { a: a.id.unwrap_or(0), s })
    }

    pub fn add_scalar(&mut self, a: &Value, s: f64) -> Value {
        self.push(a.data.map(|v| v + s), Op::AddScalar { a: a.id.unwrap_or(0) })
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Value, b: &Value) -> Result<Value> {
        let out = tensor::matmul(&a.data, &b.data)?;
        Ok(self.push(out, Op::Matmul { a: a.id.unwrap_or(0), b: b.id.unwrap_or(0) }))
    }

    pub fn transpose_last2(&mut self, a: &Value) -> Result<Value> {
        let out = tensor::transpose_last2(&a.data)?;
        Ok(self.push(out, Op::TransposeLast2 { a: a.id.unwrap_or(0) }))
    }

    pub fn swap_axes12(&mut self, a: &Value) -> Result<Value> {
        let out = tensor::swap_axes12(&a.data)?;
        Ok(self.push(out, Op::SwapAxes12 { a: a.id.unwrap_or(0) }))
    }

    // ── Softmax / reductions ─────────────────────────────────────────

    pub fn softmax_lastdim(&mut self, a: &Value) -> Result<Value> {
        let out = tensor::softmax_lastdim(&a.data)?;
        Ok(self.push(out, Op::SoftmaxLastDim { a: a.id.unwrap_or(0) }))
    }

    pub fn log_softmax_lastdim(&mut self, a: &Value) -> Result<Value> {
        let out = tensor::log_softmax_lastdim(&a.data)?;
        Ok(self.push(out, Op::LogSoftmaxLastDim { a: a.id.unwrap_or(0) }))
    }

    pub fn sum_all(&mut self, a: &Value) -> Value {
        self.push(Tensor::scalar(a.data.sum()), Op::SumAll { a: a.id.unwrap_or(0) })
    }

    pub fn sum_lastdim(&mut self, a: &Value) -> Value {
        self.push(tensor::sum_lastdim(&a.data), Op::SumLastDim { a: a.id.unwrap_or(0) })
    }

    pub fn mean_lastdim(&mut self, a: &Value) -> Value {
        self.push(tensor::mean_lastdim(&a.data), Op::MeanLastDim { a: a.id.unwrap_or(0) })
    }

    // ── Shape plumbing ───────────────────────────────────────────────

    pub fn reshape(&mut self, a: &Value, shape: Vec<usize>) -> Result<Value> {
        let out = a.data.reshape(shape)?;
        Ok(self.push(out, Op::Reshape { a: a.id.unwrap_or(0) }))
    }

    /// Row gather along the second-to-last axis; indices receive no gradient,
    /// the source receives a scatter-add.
    pub fn gather_rows(&mut self, a: &Value, idx: &IndexTensor) -> Result<Value> {
        let n = a.shape()[a.data.rank() - 2];
        let out = tensor::gather_rows(&a.data, idx)?;
        Ok(self.push(out, Op::GatherRows { a: a.id.unwrap_or(0), idx: idx.clone(), n }))
    }

    pub fn tile_rows(&mut self, a: &Value, k: usize) -> Result<Value> {
        let out = tensor::tile_rows(&a.data, k)?;
        Ok(self.push(out, Op::TileRows { a: a.id.unwrap_or(0) }))
    }

    pub fn concat_lastdim(&mut self, a: &Value, b: &Value) -> Result<Value> {
        let da = a.data.last_dim();
        let out = tensor::concat_lastdim(&a.data, &b.data)?;
        Ok(self.push(out, Op::ConcatLastDim { a: a.id.unwrap_or(0), b: b.id.unwrap_or(0), da }))
    }

    pub fn index_lastdim(&mut self, a: &Value, idx: &[usize]) -> Result<Value> {
        let n = a.data.last_dim();
        let out = tensor::index_lastdim(&a.data, idx)?;
        Ok(self.push(out, Op::IndexLastDim { a: a.id.unwrap_or(0), idx: idx.to_vec(), n }))
    }

    pub fn index_axis1(&mut self, a: &Value, i: usize) -> Result<Value> {
        let b_dim = a.shape()[1];
        let out = tensor::index_axis1(&a.data, i)?;
        Ok(self.push(out, Op::IndexAxis1 { a: a.id.unwrap_or(0), i, b_dim }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Visits each recorded node exactly
    /// once in reverse topological order.
    pub fn backward(&self, loss: &Value) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::arg("backward on an inference tape".to_string()));
        }
        if !loss.data.is_scalar() {
            return Err(Error::arg(format!(
                "loss must be scalar, got shape {:?}",
                loss.data.shape()
            )));
        }
        let root = loss
            .id
            .ok_or_else(|| Error::arg("loss value is not on this tape".to_string()))?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add { a, b } => {
                    self.acc(&mut grads, *a, tensor::reduce_to_shape(&g, self.val(*a).shape()));
                    self.acc(&mut grads, *b, tensor::reduce_to_shape(&g, self.val(*b).shape()));
                }
                Op::Sub { a, b } => {
                    self.acc(&mut grads, *a, tensor::reduce_to_shape(&g, self.val(*a).shape()));
                    self.acc(
                        &mut grads,
                        *b,
                        tensor::reduce_to_shape(&g, self.val(*b).shape()).neg(),
                    );
                }
                Op::Mul { a, b } => {
                    let ga = tensor::mul(&g, self.val(*b))?;
                    let gb = tensor::mul(&g, self.val(*a))?;
                    self.acc(&mut grads, *a, tensor::reduce_to_shape(&ga, self.val(*a).shape()));
                    self.acc(&mut grads, *b, tensor::reduce_to_shape(&gb, self.val(*b).shape()));
                }
                Op::Div { a, b } => {
                    let bv = self.val(*b);
                    let ga = tensor::div(&g, bv)?;
                    // d(a/b)/db = -a / b^2
                    let gb = tensor::mul(&g, &tensor::div(&self.val(*a).neg(), &tensor::mul(bv, bv)?)?)?;
                    self.acc(&mut grads, *a, tensor::reduce_to_shape(&ga, self.val(*a).shape()));
                    self.acc(&mut grads, *b, tensor::reduce_to_shape(&gb, bv.shape()));
                }
                Op::Neg { a } => self.acc(&mut grads, *a, g.neg()),
                Op::Exp { a } => {
                    // d exp(clamp(x)) is zero outside the clamp window
                    let input = self.val(*a);
                    let out = &self.nodes[id].value;
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(input.data())
                        .zip(out.data())
                        .map(|((&gv, &x), &y)| if x.abs() <= tensor::EXP_CLAMP { gv * y } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *a, Tensor::from_vec(input.shape().to_vec(), data)?);
                }
                Op::Sigmoid { a } => {
                    let y = &self.nodes[id].value;
                    let ga = tensor::mul(&g, &y.map(|v| v * (1.0 - v)))?;
                    self.acc(&mut grads, *a, ga);
                }
                Op::Softplus { a } => {
                    let ga = tensor::mul(&g, &self.val(*a).sigmoid())?;
                    self.acc(&mut grads, *a, ga);
                }
                Op::Tanh { a } => {
                    let y = &self.nodes[id].value;
                    let ga = tensor::mul(&g, &y.map(|v| 1.0 - v * v))?;
                    self.acc(&mut grads, *a, ga);
                }
                Op::Scale { a, s } => self.acc(&mut grads, *a, g.scale(*s)),
                Op::AddScalar { a } => self.acc(&mut grads, *a, g),
                Op::Matmul { a, b } => {
                    let av = self.val(*a);
                    let bv = self.val(*b);
                    let ga = tensor::matmul(&g, &tensor::transpose_last2(bv)?)?;
                    let gb = tensor::matmul(&tensor::transpose_last2(av)?, &g)?;
                    self.acc(&mut grads, *a, tensor::reduce_to_shape(&ga, av.shape()));
                    self.acc(&mut grads, *b, tensor::reduce_to_shape(&gb, bv.shape()));
                }
                Op::TransposeLast2 { a } => {
                    self.acc(&mut grads, *a, tensor::transpose_last2(&g)?);
                }
                Op::SwapAxes12 { a } => {
                    self.acc(&mut grads, *a, tensor::swap_axes12(&g)?);
                }
                Op::SoftmaxLastDim { a } => {
                    let y = &self.nodes[id].value;
                    let gy = tensor::mul(&g, y)?;
                    let dot = tensor::sum_lastdim(&gy);
                    let ga = tensor::mul(y, &tensor::sub(&g, &dot)?)?;
                    self.acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxLastDim { a } => {
                    let y = &self.nodes[id].value;
                    let sm = y.exp();
                    let gsum = tensor::sum_lastdim(&g);
                    let ga = tensor::sub(&g, &tensor::mul(&sm, &gsum)?)?;
                    self.acc(&mut grads, *a, ga);
                }
                Op::SumAll { a } => {
                    let shape = self.val(*a).shape().to_vec();
                    self.acc(&mut grads, *a, Tensor::full(&shape, g.item()));
                }
                Op::SumLastDim { a } => {
                    let shape = self.val(*a).shape().to_vec();
                    let ga = tensor::mul(&g, &Tensor::ones(&shape))?;
                    self.acc(&mut grads, *a, ga);
                }
                Op::MeanLastDim { a } => {
                    let shape = self.val(*a).shape().to_vec();
                    let n = *shape.last().unwrap() as f64;
                    let ga = tensor::mul(&g.scale(1.0 / n), &Tensor::ones(&shape))?;
                    self.acc(&mut grads, *a, ga);
                }
                Op::Reshape { a } => {
                    let shape = self.val(*a).shape().to_vec();
                    self.acc(&mut grads, *a, g.reshape(shape)?);
                }
                Op::GatherRows { a, idx, n } => {
                    self.acc(&mut grads, *a, tensor::scatter_add_rows(&g, idx, *n));
                }
                Op::TileRows { a } => {
                    self.acc(&mut grads, *a, tensor::untile_rows(&g));
                }
                Op::ConcatLastDim { a, b, da } => {
                    let (ga, gb) = tensor::split_lastdim(&g, *da);
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::IndexLastDim { a, idx, n } => {
                    self.acc(&mut grads, *a, tensor::scatter_lastdim(&g, idx, *n));
                }
                Op::IndexAxis1 { a, i, b_dim } => {
                    self.acc(&mut grads, *a, tensor::scatter_axis1(&g, *i, *b_dim));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
        match &mut grads[id] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients for every node that received one; indexed by `Value`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: &Value) -> Option<&Tensor> {
        v.id.and_then(|id| self.grads.get(id).and_then(|g| g.as_ref()))
    }

    /// Gradient of a leaf, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: &Value) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

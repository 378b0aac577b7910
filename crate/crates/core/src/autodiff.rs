//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! The tape is rebuilt for every training step. Parameters are registered
//! first with [`Tape::param`]; [`Tape::clear`] drops everything recorded after
//! them and zeroes their gradients, so parameter ids stay valid across steps.
//!
//! Matrix-shaped ops treat axis 0 as the frame axis (one row per frame).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result, Tensor};

/// Variance epsilon used by [`OpKind::LayerNorm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operations the tape knows how to differentiate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    /// Input or parameter; no parents.
    Leaf,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    MatMul,
    Transpose,
    /// Repeats a `[1, c]` row `rows` times.
    BroadcastRows(usize),
    /// Sum of all entries (scalar result).
    Sum,
    /// Sum over one axis of a matrix, keeping it as extent 1.
    SumAxis(usize),
    /// Mean of all entries (scalar result).
    Mean,
    /// Softmax over the last axis of a matrix.
    Softmax,
    /// Per-row standardisation without learned affine parameters.
    LayerNorm,
    Tanh,
    Silu,
    /// Rows `start..end` along the frame axis.
    SliceRows(usize, usize),
    /// Concatenation along the frame axis (any number of inputs).
    ConcatRows,
    Scale(f64),
}

impl OpKind {
    fn same_kind(&self, other: &OpKind) -> bool {
        core::mem::discriminant(self) == core::mem::discriminant(other)
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: OpKind,
    parents: Vec<NodeId>,
    grad: Option<Tensor>,
    is_param: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    fault: Option<OpKind>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + math::exp(-x))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + math::exp(-x))
}

fn arity(kind: &OpKind) -> Option<usize> {
    match kind {
        OpKind::Leaf => Some(0),
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => Some(2),
        OpKind::ConcatRows => None,
        _ => Some(1),
    }
}

fn layer_norm_rows(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (r, c) = x.dims2()?;
    let mut out = vec![0.0; r * c];
    let mut inv_std = vec![0.0; r];
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
        inv_std[i] = is;
        for j in 0..c {
            out[i * c + j] = (row[j] - mean) * is;
        }
    }
    Ok((Tensor::from_parts(vec![r, c], out), inv_std))
}

fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let out = match *kind {
        OpKind::Leaf => return Err(Error::InvalidArgument("leaf nodes are not recorded".into())),
        OpKind::Add => inputs[0].add(inputs[1])?,
        OpKind::Sub => inputs[0].sub(inputs[1])?,
        OpKind::Mul => inputs[0].mul(inputs[1])?,
        OpKind::MatMul => inputs[0].matmul(inputs[1])?,
        OpKind::Transpose => inputs[0].transpose()?,
        OpKind::BroadcastRows(rows) => {
            let (r, c) = inputs[0].dims2()?;
            if r != 1 || rows == 0 {
                return Err(Error::Shape(format!("broadcast of {r}x{c} to {rows} rows")));
            }
            Tensor::from_parts(vec![rows, c], inputs[0].data().repeat(rows))
        }
        OpKind::Sum => Tensor::scalar(inputs[0].sum())?,
        OpKind::Mean => Tensor::scalar(inputs[0].sum() / inputs[0].len() as f64)?,
        OpKind::SumAxis(axis) => {
            let x = inputs[0];
            let (r, c) = x.dims2()?;
            match axis {
                0 => {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for (o, v) in out.iter_mut().zip(x.row(i)) {
                            *o += v;
                        }
                    }
                    Tensor::new(vec![1, c], out)?
                }
                1 => Tensor::new(vec![r, 1], (0..r).map(|i| x.row(i).iter().sum()).collect())?,
                _ => return Err(Error::Shape(format!("sum over axis {axis} of a matrix"))),
            }
        }
        OpKind::Softmax => {
            let x = inputs[0];
            let (r, c) = x.dims2()?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = x.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..c {
                    let e = math::exp(row[j] - max);
                    out[i * c + j] = e;
                    z += e;
                }
                for v in &mut out[i * c..(i + 1) * c] {
                    *v /= z;
                }
            }
            Tensor::from_parts(vec![r, c], out)
        }
        OpKind::LayerNorm => layer_norm_rows(inputs[0])?.0,
        OpKind::Tanh => inputs[0].map(math::tanh)?,
        OpKind::Silu => inputs[0].map(silu)?,
        OpKind::SliceRows(start, end) => inputs[0].slice_rows(start, end)?,
        OpKind::ConcatRows => Tensor::concat_rows(inputs)?,
        OpKind::Scale(c) => inputs[0].scale(c)?,
    };
    out.ensure_finite("tape forward")?;
    Ok(out)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: OpKind, parents: Vec<NodeId>, is_param: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            parents,
            grad: None,
            is_param,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a trainable parameter. Parameters must precede every other node.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        if self.nodes.len() != self.params.len() {
            return Err(Error::InvalidArgument(
                "parameters must be registered before other nodes".into(),
            ));
        }
        let id = self.push(value, OpKind::Leaf, Vec::new(), true);
        self.params.push(id);
        Ok(id)
    }

    /// A non-trainable input (gradients are still accumulated for it).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, OpKind::Leaf, Vec::new(), false)
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        Ok(&self.node(id)?.value)
    }

    /// Accumulated gradient of `id`, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Result<Option<&Tensor>> {
        Ok(self.node(id)?.grad.as_ref())
    }

    /// Replaces the value of a parameter node.
    pub fn set_param_value(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = self.nodes.get_mut(id.0).ok_or(Error::UnknownNode(id.0))?;
        if !node.is_param || node.value.shape() != value.shape() {
            return Err(Error::InvalidArgument(format!("cannot set node {}", id.0)));
        }
        node.value = value;
        Ok(())
    }

    /// Drops every non-parameter node and zeroes parameter gradients.
    pub fn clear(&mut self) {
        self.nodes.truncate(self.params.len());
        self.zero_grads();
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Test hook: perturbs the backward rule of one op kind by 10%.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Records `kind` applied to `inputs` and computes its value.
    pub fn record(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(n) = arity(&kind) {
            if n != inputs.len() || n == 0 {
                return Err(Error::InvalidArgument(format!(
                    "{kind:?} takes {n} inputs, got {}",
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::InvalidArgument(format!("{kind:?} needs inputs")));
        }
        let values = inputs
            .iter()
            .map(|&id| self.value(id))
            .collect::<Result<Vec<_>>>()?;
        let out = forward(&kind, &values)?;
        Ok(self.push(out, kind, inputs.to_vec(), false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Transpose, &[a])
    }
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        self.record(OpKind::BroadcastRows(rows), &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sum, &[a])
    }
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.record(OpKind::SumAxis(axis), &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Mean, &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Softmax, &[a])
    }
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::LayerNorm, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Tanh, &[a])
    }
    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Silu, &[a])
    }
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.record(OpKind::SliceRows(start, end), &[a])
    }
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.record(OpKind::ConcatRows, parts)
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(OpKind::Scale(c), &[a])
    }

    /// `x W + b` with `b` a `[1, out]` row broadcast over the rows of `x`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let rows = self.value(x)?.dims2()?.0;
        let xw = self.matmul(x, w)?;
        let bb = self.broadcast_rows(b, rows)?;
        self.add(xw, bb)
    }

    /// Reverse pass from a scalar `loss`, adding into every node's gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let loss_node = self.node(loss)?;
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut local: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(Tensor::from_parts(loss_node.value.shape().to_vec(), vec![1.0]));
        for idx in (0..=loss.0).rev() {
            let Some(g) = local[idx].take() else {
                continue;
            };
            let contributions = self.backward_rule(idx, &g)?;
            for (parent, pg) in contributions {
                accumulate(&mut local[parent.0], pg);
            }
            accumulate(&mut self.nodes[idx].grad, g);
        }
        Ok(())
    }

    fn backward_rule(&self, idx: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[idx];
        let p = &node.parents;
        let val = |i: usize| &self.nodes[p[i].0].value;
        let mut out: Vec<(NodeId, Tensor)> = match node.op {
            OpKind::Leaf => Vec::new(),
            OpKind::Add => vec![(p[0], g.clone()), (p[1], g.clone())],
            OpKind::Sub => vec![(p[0], g.clone()), (p[1], g.scale(-1.0)?)],
            OpKind::Mul => vec![(p[0], g.mul(val(1))?), (p[1], g.mul(val(0))?)],
            OpKind::MatMul => vec![
                (p[0], g.matmul(&val(1).transpose()?)?),
                (p[1], val(0).transpose()?.matmul(g)?),
            ],
            OpKind::Transpose => vec![(p[0], g.transpose()?)],
            OpKind::BroadcastRows(_) => {
                let (r, c) = g.dims2()?;
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (a, v) in acc.iter_mut().zip(g.row(i)) {
                        *a += v;
                    }
                }
                vec![(p[0], Tensor::from_parts(vec![1, c], acc))]
            }
            OpKind::Sum => {
                let x = val(0);
                vec![(p[0], Tensor::from_parts(x.shape().to_vec(), vec![g.data()[0]; x.len()]))]
            }
            OpKind::Mean => {
                let x = val(0);
                let v = g.data()[0] / x.len() as f64;
                vec![(p[0], Tensor::from_parts(x.shape().to_vec(), vec![v; x.len()]))]
            }
            OpKind::SumAxis(axis) => {
                let (r, c) = val(0).dims2()?;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = if axis == 0 { g.data()[j] } else { g.data()[i] };
                    }
                }
                vec![(p[0], Tensor::from_parts(vec![r, c], d))]
            }
            OpKind::Softmax => {
                let y = &node.value;
                let (r, c) = y.dims2()?;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(p[0], Tensor::from_parts(vec![r, c], d))]
            }
            OpKind::LayerNorm => {
                let (y, inv_std) = layer_norm_rows(val(0))?;
                let (r, c) = y.dims2()?;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let gm = gr.iter().sum::<f64>() / c as f64;
                    let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        d[i * c + j] = inv_std[i] * (gr[j] - gm - yr[j] * gym);
                    }
                }
                vec![(p[0], Tensor::from_parts(vec![r, c], d))]
            }
            OpKind::Tanh => {
                let d = node.value.zip_map(g, |y, gv| gv * (1.0 - y * y))?;
                vec![(p[0], d)]
            }
            OpKind::Silu => {
                let d = val(0).zip_map(g, |x, gv| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                })?;
                vec![(p[0], d)]
            }
            OpKind::SliceRows(start, end) => {
                let (r, c) = val(0).dims2()?;
                let mut d = vec![0.0; r * c];
                d[start * c..end * c].copy_from_slice(g.data());
                vec![(p[0], Tensor::from_parts(vec![r, c], d))]
            }
            OpKind::ConcatRows => {
                let mut offset = 0;
                let mut v = Vec::with_capacity(p.len());
                for &pid in p {
                    let rows = self.nodes[pid.0].value.dims2()?.0;
                    v.push((pid, g.slice_rows(offset, offset + rows)?));
                    offset += rows;
                }
                v
            }
            OpKind::Scale(c) => vec![(p[0], g.scale(c)?)],
        };
        if let Some(fault) = self.fault {
            if fault.same_kind(&node.op) {
                for (_, t) in &mut out {
                    *t = t.scale(1.1)?;
                }
            }
        }
        Ok(out)
    }
}

/// Outcome of comparing reverse-mode gradients to central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Floor on the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Tape, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &ids)?;
    Ok((tape, ids, loss))
}

/// Compares the tape gradient of a scalar function against central
/// differences for every entry of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    grad_check_with(f, params, tolerance, None)
}

/// [`grad_check`] with an optional backward fault injected (negative control).
#[doc(hidden)]
pub fn grad_check_with<F>(
    f: F,
    params: &[Tensor],
    tolerance: f64,
    fault: Option<OpKind>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let scalar_at = |ps: &[Tensor]| -> Result<f64> {
        let (tape, _, loss) = evaluate(&f, ps)?;
        tape.value(loss)?.item()
    };
    let (mut tape, ids, loss) = evaluate(&f, params)?;
    if let Some(kind) = fault {
        tape.inject_backward_fault(kind);
    }
    let first = tape.value(loss)?.item()?;
    let second = scalar_at(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    tape.backward(loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, &id) in ids.iter().enumerate() {
        let analytic = match tape.grad(id)? {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; params[pi].len()],
        };
        let mut worst = 0.0f64;
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + FD_STEP;
            let plus = scalar_at(&work)?;
            work[pi].data_mut()[k] = orig - FD_STEP;
            let minus = scalar_at(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let denom = analytic[k].abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            worst = worst.max((analytic[k] - numeric).abs() / denom);
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::RngStream;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn add_self_doubles() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[vec![1.0, -2.0]]));
        let y = tape.add(x, x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn softmax_of_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[vec![0.0, 0.0]]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn arity_and_shape_errors() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[vec![1.0, 2.0]]));
        let y = tape.input(t(&[vec![1.0], vec![2.0]]));
        assert!(tape.record(OpKind::Add, &[x]).is_err());
        assert!(tape.record(OpKind::Leaf, &[]).is_err());
        assert!(tape.add(x, y).is_err());
        assert!(matches!(
            tape.record(OpKind::Tanh, &[NodeId(99)]),
            Err(Error::UnknownNode(99))
        ));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(p).unwrap().unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut tape = Tape::new();
        let pv = t(&[vec![0.5, -1.5, 2.0]]);
        let p = tape.param(pv.clone()).unwrap();
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq).unwrap();
        let l = tape.scale(s, 0.5).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap().unwrap(), &pv);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[vec![1.0, 2.0]])).unwrap();
        assert!(matches!(tape.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn two_backward_passes_accumulate() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[vec![0.3, -0.7], vec![1.1, 0.2]])).unwrap();
        let y = tape.tanh(p).unwrap();
        let z = tape.matmul(y, p).unwrap();
        let l = tape.mean(z).unwrap();
        tape.backward(l).unwrap();
        let once = tape.grad(p).unwrap().unwrap().clone();
        tape.backward(l).unwrap();
        let twice = tape.grad(p).unwrap().unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn clear_keeps_params() {
        let mut tape = Tape::new();
        let pv = t(&[vec![1.0, 2.0]]);
        let p = tape.param(pv.clone()).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        tape.clear();
        assert_eq!(tape.len(), 1);
        assert_eq!(tape.value(p).unwrap(), &pv);
        assert!(tape.grad(p).unwrap().is_none());
        assert!(tape.param(pv).is_ok());
        let _ = tape.input(t(&[vec![0.0]]));
        assert!(tape.param(t(&[vec![0.0]])).is_err());
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = RngStream::new(3, 0);
        let params = vec![
            rng.gaussian(&[3, 4]).unwrap(),
            rng.gaussian(&[4, 2]).unwrap(),
            rng.gaussian(&[2, 3]).unwrap(),
        ];
        let report = grad_check(
            |tape, p| {
                let a = tape.matmul(p[0], p[1])?;
                let b = tape.matmul(a, p[2])?;
                let c = tape.mul(b, b)?;
                tape.sum(c)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn quadratic_form_grad_check() {
        let mut rng = RngStream::new(4, 0);
        let a = rng.gaussian(&[4, 4]).unwrap();
        let x = Tensor::new(vec![4, 1], vec![1.0, -2.0, 1.5, 0.5]).unwrap();
        let report = grad_check(
            |tape, p| {
                let xt = tape.transpose(p[1])?;
                let ax = tape.matmul(p[0], p[1])?;
                let q = tape.matmul(xt, ax)?;
                tape.sum(q)
            },
            &[a, x],
            1e-8,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn attention_block(tape: &mut Tape, p: &[NodeId]) -> Result<NodeId> {
        let n = tape.layer_norm(p[0])?;
        let q = tape.matmul(n, p[1])?;
        let k = tape.matmul(n, p[2])?;
        let v = tape.matmul(n, p[3])?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, 0.5)?;
        let a = tape.softmax(s)?;
        let o = tape.matmul(a, v)?;
        let h = tape.silu(o)?;
        let r = tape.add(h, p[0])?;
        let r = tape.mul(r, r)?;
        tape.mean(r)
    }

    fn attention_params(seed: u64) -> Vec<Tensor> {
        let mut rng = RngStream::new(seed, 0);
        vec![
            rng.gaussian(&[3, 4]).unwrap(),
            rng.gaussian(&[4, 4]).unwrap(),
            rng.gaussian(&[4, 4]).unwrap(),
            rng.gaussian(&[4, 4]).unwrap(),
        ]
    }

    #[test]
    fn softmax_attention_grad_check() {
        let report = grad_check(attention_block, &attention_params(5), 1e-5).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn corrupted_backward_rule_is_reported() {
        let report =
            grad_check_with(attention_block, &attention_params(5), 1e-5, Some(OpKind::Softmax))
                .unwrap();
        assert!(!report.passed, "{report:?}");
    }

    #[test]
    fn non_deterministic_function_detected() {
        use core::cell::Cell;
        let calls = Cell::new(0.0);
        let err = grad_check(
            |tape, p| {
                calls.set(calls.get() + 1.0);
                let s = tape.sum(p[0])?;
                tape.scale(s, calls.get())
            },
            &[Tensor::ones(&[2]).unwrap()],
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    /// Contracts the op output with a fixed random weight so the scalar's
    /// gradient stays O(1) and finite differences are not roundoff-bound.
    fn readout(tape: &mut Tape, out: NodeId, seed: u64) -> Result<NodeId> {
        let shape = tape.value(out)?.shape().to_vec();
        if shape.iter().product::<usize>() == 1 {
            return tape.scale(out, 1.7);
        }
        let w = RngStream::new(seed, 99).gaussian(&shape)?;
        let w = tape.input(w);
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    }

    #[test]
    fn every_op_kind_matches_finite_differences() {
        type Build = fn(&mut Tape, &[NodeId], usize) -> Result<NodeId>;
        let ops: [(&str, Build); 16] = [
            ("add", |t, p, _| t.add(p[0], p[1])),
            ("sub", |t, p, _| t.sub(p[0], p[1])),
            ("mul", |t, p, _| t.mul(p[0], p[1])),
            ("matmul", |t, p, _| t.matmul(p[0], p[2])),
            ("transpose", |t, p, _| t.transpose(p[0])),
            ("broadcast", |t, p, r| t.broadcast_rows(p[3], r)),
            ("sum", |t, p, _| t.sum(p[0])),
            ("sum_axis0", |t, p, _| t.sum_axis(p[0], 0)),
            ("sum_axis1", |t, p, _| t.sum_axis(p[0], 1)),
            ("mean", |t, p, _| t.mean(p[0])),
            ("softmax", |t, p, _| t.softmax(p[0])),
            ("layer_norm", |t, p, _| t.layer_norm(p[0])),
            ("tanh", |t, p, _| t.tanh(p[0])),
            ("silu", |t, p, _| t.silu(p[0])),
            ("slice_concat", |t, p, r| {
                let top = t.slice_rows(p[0], 0, 1)?;
                let rest = t.slice_rows(p[1], r - 1, r)?;
                t.concat_rows(&[rest, p[0], top])
            }),
            ("scale", |t, p, _| t.scale(p[0], -0.7)),
        ];
        let mut rng = RngStream::new(21, 0);
        for trial in 0..8u64 {
            let r = 1 + rng.below(8) as usize;
            let c = 2 + rng.below(7) as usize;
            let k = 1 + rng.below(8) as usize;
            let params = [
                rng.gaussian(&[r, c]).unwrap(),
                rng.gaussian(&[r, c]).unwrap(),
                rng.gaussian(&[c, k]).unwrap(),
                rng.gaussian(&[1, c]).unwrap(),
            ];
            for (name, build) in ops {
                let report = grad_check(
                    |tape, p| {
                        let out = build(tape, p, r)?;
                        readout(tape, out, trial)
                    },
                    &params,
                    1e-4,
                )
                .unwrap();
                assert!(report.passed, "{name} trial {trial} ({r}x{c}): {report:?}");
            }
        }
    }
}

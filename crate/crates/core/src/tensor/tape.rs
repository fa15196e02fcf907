use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, axis_strides};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Records every operation of one forward pass so gradients can be pulled
/// back from a scalar loss.
///
/// Node ids are assigned in creation order, which is already a topological
/// order: an op can only consume values that exist when it is recorded.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

enum Op<T> {
    Leaf,
    Const,
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddBias(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: usize,
        scaled_mask: Vec<T>,
    },
    Concat(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
        tau: T,
    },
    Ln {
        x: usize,
        floor: T,
    },
    Sum(usize),
    Mean(usize),
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    FakeQuant {
        w: usize,
        scale: usize,
        offset: usize,
        in_range: Vec<bool>,
        code_minus_offset: Vec<T>,
    },
    StraightThrough(usize),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
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

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Const, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Concatenates rank-2 tensors along their last dimension.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = match values[0].shape() {
            [r, _] => *r,
            s => return Err(Error::invalid("concat", format!("rank-2 inputs only, got {s:?}"))),
        };
        for v in &values[1..] {
            if v.rank() != 2 || v.shape()[0] != rows {
                return Err(Error::Shape {
                    op: "concat",
                    left: values[0].shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
        }
        let total: usize = values.iter().map(|v| v.shape()[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.any_grad(&ids);
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::Concat(ids), needs))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data: g,
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn buf<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: usize,
) -> Option<&'g mut Vec<T>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    match &node.op {
        Op::Leaf | Op::Const => {}
        &Op::MatMul(a, b) => {
            let (m, k) = val(a).dims2().expect("checked at record time");
            let n = val(b).shape()[1];
            if let Some(ga) = buf(grads, nodes, a) {
                kernels::matmul_nt(g, val(b).data(), ga, m, k, n);
            }
            if let Some(gb) = buf(grads, nodes, b) {
                kernels::matmul_tn(val(a).data(), g, gb, m, k, n);
            }
        }
        &Op::BatchMatMul(a, b) => {
            let (bs, m, k) = (val(a).shape()[0], val(a).shape()[1], val(a).shape()[2]);
            let n = val(b).shape()[2];
            if let Some(ga) = buf(grads, nodes, a) {
                for i in 0..bs {
                    kernels::matmul_nt(
                        &g[i * m * n..(i + 1) * m * n],
                        &val(b).data()[i * k * n..(i + 1) * k * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
            }
            if let Some(gb) = buf(grads, nodes, b) {
                for i in 0..bs {
                    kernels::matmul_tn(
                        &val(a).data()[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut gb[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        &Op::Add(a, b) => {
            if let Some(ga) = buf(grads, nodes, a) {
                add_into(ga, g);
            }
            if let Some(gb) = buf(grads, nodes, b) {
                add_into(gb, g);
            }
        }
        &Op::Sub(a, b) => {
            if let Some(ga) = buf(grads, nodes, a) {
                add_into(ga, g);
            }
            if let Some(gb) = buf(grads, nodes, b) {
                for (d, &s) in gb.iter_mut().zip(g) {
                    *d = *d - s;
                }
            }
        }
        &Op::Mul(a, b) => {
            if let Some(ga) = buf(grads, nodes, a) {
                for ((d, &s), &bv) in ga.iter_mut().zip(g).zip(val(b).data()) {
                    *d = *d + s * bv;
                }
            }
            if let Some(gb) = buf(grads, nodes, b) {
                for ((d, &s), &av) in gb.iter_mut().zip(g).zip(val(a).data()) {
                    *d = *d + s * av;
                }
            }
        }
        &Op::Scale(a, c) => {
            if let Some(ga) = buf(grads, nodes, a) {
                for (d, &s) in ga.iter_mut().zip(g) {
                    *d = *d + c * s;
                }
            }
        }
        &Op::AddBias(a, bias) => {
            if let Some(ga) = buf(grads, nodes, a) {
                add_into(ga, g);
            }
            let n = val(bias).numel();
            if let Some(gb) = buf(grads, nodes, bias) {
                for row in g.chunks(n) {
                    add_into(gb, row);
                }
            }
        }
        &Op::Transpose(a) => {
            if let Some(ga) = buf(grads, nodes, a) {
                let shape = val(a).shape();
                let (bs, r, c) = match shape {
                    [r, c] => (1, *r, *c),
                    [b, r, c] => (*b, *r, *c),
                    _ => unreachable!("checked at record time"),
                };
                let mut tmp = vec![T::zero(); r * c];
                for i in 0..bs {
                    // output block is [c, r]; its transpose is [r, c]
                    kernels::transpose2(&g[i * r * c..(i + 1) * r * c], &mut tmp, c, r);
                    add_into(&mut ga[i * r * c..(i + 1) * r * c], &tmp);
                }
            }
        }
        &Op::Reshape(a) | &Op::StraightThrough(a) => {
            if let Some(ga) = buf(grads, nodes, a) {
                add_into(ga, g);
            }
        }
        &Op::Gelu(a) => {
            if let Some(ga) = buf(grads, nodes, a) {
                for ((d, &s), &x) in ga.iter_mut().zip(g).zip(val(a).data()) {
                    *d = *d + s * kernels::gelu_grad(x);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = val(*gain).numel();
            let gamma = val(*gain).data();
            if let Some(gg) = buf(grads, nodes, *gain) {
                for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        gg[j] = gg[j] + grow[j] * xrow[j];
                    }
                }
            }
            if let Some(gb) = buf(grads, nodes, *bias) {
                for grow in g.chunks(n) {
                    add_into(gb, grow);
                }
            }
            if let Some(gx) = buf(grads, nodes, *x) {
                let nf = T::from_usize(n).expect("row length fits");
                for (r, ((grow, xrow), gxrow)) in g
                    .chunks(n)
                    .zip(xhat.chunks(n))
                    .zip(gx.chunks_mut(n))
                    .enumerate()
                {
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..n {
                        let d = grow[j] * gamma[j];
                        sum_d = sum_d + d;
                        sum_dx = sum_dx + d * xrow[j];
                    }
                    let scale = rstd[r] / nf;
                    for j in 0..n {
                        let d = grow[j] * gamma[j];
                        gxrow[j] = gxrow[j] + scale * (nf * d - sum_d - xrow[j] * sum_dx);
                    }
                }
            }
        }
        Op::Dropout { x, scaled_mask } => {
            if let Some(gx) = buf(grads, nodes, *x) {
                for ((d, &s), &m) in gx.iter_mut().zip(g).zip(scaled_mask) {
                    *d = *d + s * m;
                }
            }
        }
        Op::Concat(ids) => {
            let rows = node.value.shape()[0];
            let total = node.value.shape()[1];
            let mut offset = 0;
            for &id in ids {
                let c = val(id).shape()[1];
                if let Some(gi) = buf(grads, nodes, id) {
                    for r in 0..rows {
                        add_into(
                            &mut gi[r * c..(r + 1) * c],
                            &g[r * total + offset..r * total + offset + c],
                        );
                    }
                }
                offset += c;
            }
        }
        &Op::SliceCols { x, start } => {
            let cols = val(x).shape()[1];
            let (rows, width) = node.value.dims2().expect("rank 2");
            if let Some(gx) = buf(grads, nodes, x) {
                for r in 0..rows {
                    add_into(
                        &mut gx[r * cols + start..r * cols + start + width],
                        &g[r * width..(r + 1) * width],
                    );
                }
            }
        }
        &Op::Softmax { x, axis, tau } => {
            if let Some(gx) = buf(grads, nodes, x) {
                let y = node.value.data();
                let (outer, len, inner) = axis_strides(node.value.shape(), axis);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot = dot + g[at(j)] * y[at(j)];
                        }
                        for j in 0..len {
                            let k = at(j);
                            gx[k] = gx[k] + y[k] * (g[k] - dot) / tau;
                        }
                    }
                }
            }
        }
        &Op::Ln { x, floor } => {
            if let Some(gx) = buf(grads, nodes, x) {
                for ((d, &s), &v) in gx.iter_mut().zip(g).zip(val(x).data()) {
                    if v > floor {
                        *d = *d + s / v;
                    }
                }
            }
        }
        &Op::Sum(a) => {
            if let Some(ga) = buf(grads, nodes, a) {
                for d in ga.iter_mut() {
                    *d = *d + g[0];
                }
            }
        }
        &Op::Mean(a) => {
            let n = T::from_usize(val(a).numel()).expect("numel fits");
            if let Some(ga) = buf(grads, nodes, a) {
                let share = g[0] / n;
                for d in ga.iter_mut() {
                    *d = *d + share;
                }
            }
        }
        Op::GatherRows { table, ids } => {
            let d = val(*table).shape()[1];
            if let Some(gt) = buf(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::FakeQuant {
            w,
            scale,
            offset,
            in_range,
            code_minus_offset,
        } => {
            if let Some(gw) = buf(grads, nodes, *w) {
                for ((d, &s), &ok) in gw.iter_mut().zip(g).zip(in_range) {
                    if ok {
                        *d = *d + s;
                    }
                }
            }
            if let Some(gs) = buf(grads, nodes, *scale) {
                let total: T = g.iter().zip(code_minus_offset).map(|(&a, &b)| a * b).sum();
                gs[0] = gs[0] + total;
            }
            let s = val(*scale).data()[0];
            if let Some(gb) = buf(grads, nodes, *offset) {
                let total: T = g.iter().copied().sum();
                gb[0] = gb[0] - s * total;
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'t, T> {
        let needs = self.tape.any_grad(inputs);
        self.tape.push(value, op, needs)
    }

    fn same_shape(&self, other: &Var<'t, T>, op: &'static str) -> Result<(Rc<Tensor<T>>, Rc<Tensor<T>>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        Ok((a, b))
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (l, r) => {
                return Err(Error::Shape {
                    op: "matmul",
                    left: l.to_vec(),
                    right: r.to_vec(),
                })
            }
        };
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nn(a.data(), b.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.record(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Batched matmul of `[B, m, k]` by `[B, k, n]`.
    pub fn bmm(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (bs, m, k, n) = match (a.shape(), b.shape()) {
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            (l, r) => {
                return Err(Error::Shape {
                    op: "bmm",
                    left: l.to_vec(),
                    right: r.to_vec(),
                })
            }
        };
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            kernels::matmul_nn(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.record(value, Op::BatchMatMul(self.id, other.id), &[self.id, other.id]))
    }

    fn zip_with(
        &self,
        other: &Var<'t, T>,
        opname: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let (a, b) = self.same_shape(other, opname)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.record(value, op, &[self.id, other.id]))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let value = self.value().map(|v| v * c);
        self.record(value, Op::Scale(self.id, c), &[self.id])
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), bias.value());
        let n = match (a.shape(), b.shape()) {
            ([_, n], [n2]) if n == n2 => *n,
            (l, r) => {
                return Err(Error::Shape {
                    op: "add_bias",
                    left: l.to_vec(),
                    right: r.to_vec(),
                })
            }
        };
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(n) {
            add_into(row, b.data());
        }
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.record(value, Op::AddBias(self.id, bias.id), &[self.id, bias.id]))
    }

    /// Swaps the last two dimensions of a rank-2 or rank-3 tensor.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (bs, r, c) = match a.shape() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            s => return Err(Error::invalid("transpose", format!("rank 2 or 3 only, got {s:?}"))),
        };
        let mut out = vec![T::zero(); a.numel()];
        for i in 0..bs {
            kernels::transpose2(
                &a.data()[i * r * c..(i + 1) * r * c],
                &mut out[i * r * c..(i + 1) * r * c],
                r,
                c,
            );
        }
        let mut shape = a.shape().to_vec();
        let rank = shape.len();
        shape.swap(rank - 2, rank - 1);
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, Op::Transpose(self.id), &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = (*self.value()).clone().reshape(shape.to_vec())?;
        Ok(self.record(value, Op::Reshape(self.id), &[self.id]))
    }

    pub fn gelu(&self) -> Var<'t, T> {
        let value = self.value().map(kernels::gelu);
        self.record(value, Op::Gelu(self.id), &[self.id])
    }

    /// Row-wise layer normalization over the last dimension followed by the
    /// affine `gain`/`bias` of length `n`.
    pub fn layer_norm(&self, gain: &Var<'t, T>, bias: &Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (x, ga, be) = (self.value(), gain.value(), bias.value());
        let n = match x.shape() {
            [_, n] => *n,
            s => return Err(Error::invalid("layer_norm", format!("rank 2 only, got {s:?}"))),
        };
        for p in [&ga, &be] {
            if p.shape() != [n] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: x.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        let nf = T::from_usize(n).expect("row length fits");
        let rows = x.numel() / n.max(1);
        let mut xhat = Vec::with_capacity(x.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = (var + eps).sqrt().recip();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * ga.data()[j] + be.data()[j]);
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            rstd,
        };
        Ok(self.record(value, op, &[self.id, gain.id, bias.id]))
    }

    /// Multiplies by a caller-supplied 0/1 `mask` scaled by `1/(1-rate)`.
    pub fn dropout(&self, mask: &[bool], rate: T) -> Result<Var<'t, T>> {
        let x = self.value();
        if mask.len() != x.numel() {
            return Err(Error::Shape {
                op: "dropout_mask",
                left: x.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        if !(rate >= T::zero() && rate < T::one()) {
            return Err(Error::invalid("dropout_mask", format!("rate {rate} outside [0, 1)")));
        }
        let keep = (T::one() - rate).recip();
        let scaled_mask: Vec<T> = mask
            .iter()
            .map(|&m| if m { keep } else { T::zero() })
            .collect();
        let data = x.data().iter().zip(&scaled_mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.record(
            value,
            Op::Dropout {
                x: self.id,
                scaled_mask,
            },
            &[self.id],
        ))
    }

    /// Columns `start..start + width` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (rows, cols) = x
            .dims2()
            .ok_or_else(|| Error::invalid("slice_cols", format!("rank 2 only, got {:?}", x.shape())))?;
        if start + width > cols {
            return Err(Error::invalid(
                "slice_cols",
                format!("columns {start}..{} out of {cols}", start + width),
            ));
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&x.data()[r * cols + start..r * cols + start + width]);
        }
        let value = Tensor::new(vec![rows, width], out)?;
        Ok(self.record(value, Op::SliceCols { x: self.id, start }, &[self.id]))
    }

    /// Temperature softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize, tau: T) -> Result<Var<'t, T>> {
        let x = self.value();
        if !(tau > T::zero()) {
            return Err(Error::invalid("softmax", format!("temperature must be positive, got {tau}")));
        }
        if axis >= x.rank() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", x.shape()),
            ));
        }
        let (outer, len, inner) = axis_strides(x.shape(), axis);
        let src = x.data();
        let mut out = vec![T::zero(); x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = ((src[at(j)] - max) / tau).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.record(value, Op::Softmax { x: self.id, axis, tau }, &[self.id]))
    }

    /// Natural log with inputs clamped below at `floor`.
    pub fn ln(&self, floor: T) -> Var<'t, T> {
        let value = self.value().map(|v| v.max(floor).ln());
        self.record(value, Op::Ln { x: self.id, floor }, &[self.id])
    }

    pub fn sum(&self) -> Var<'t, T> {
        let total = self.value().data().iter().copied().sum();
        self.record(Tensor::scalar(total), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let x = self.value();
        let n = T::from_usize(x.numel().max(1)).expect("numel fits");
        let total: T = x.data().iter().copied().sum();
        self.record(Tensor::scalar(total / n), Op::Mean(self.id), &[self.id])
    }

    /// Mean squared elementwise difference.
    pub fn mse(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let d = self.sub(other)?;
        Ok(d.mul(&d)?.mean())
    }

    /// Rows `ids` of a `[V, d]` table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t, T>> {
        let t = self.value();
        let (v, d) = t
            .dims2()
            .ok_or_else(|| Error::invalid("gather_rows", format!("rank 2 only, got {:?}", t.shape())))?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::invalid("gather_rows", format!("row {id} out of {v}")));
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.record(
            value,
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Affine fake quantization `s·(clamp(round(w/s + b)) − b)` with
    /// learnable scalar `scale` and `offset`.
    ///
    /// The weight gradient passes straight through wherever the code was not
    /// clamped. Scale and offset gradients treat the rounded code as constant.
    pub fn fake_quant(
        &self,
        scale: &Var<'t, T>,
        offset: &Var<'t, T>,
        qmin: i32,
        qmax: i32,
    ) -> Result<Var<'t, T>> {
        let (w, s, b) = (self.value(), scale.value(), offset.value());
        let (Some(sv), Some(bv)) = (s.item(), b.item()) else {
            return Err(Error::Shape {
                op: "fake_quant",
                left: s.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        };
        if !(sv > T::zero()) || qmin >= qmax {
            return Err(Error::invalid(
                "fake_quant",
                format!("need scale > 0 and qmin < qmax, got s={sv} [{qmin}, {qmax}]"),
            ));
        }
        let (s64, b64) = (sv.as_f64(), bv.as_f64());
        let n = w.numel();
        let mut out = Vec::with_capacity(n);
        let mut in_range = Vec::with_capacity(n);
        let mut code_minus_offset = Vec::with_capacity(n);
        for &x in w.data() {
            let (code, ok) = crate::quant::affine_code(x.as_f64(), s64, b64, qmin, qmax);
            let cm = f64::from(code) - b64;
            out.push(T::from_f64_lossy(s64 * cm));
            in_range.push(ok);
            code_minus_offset.push(T::from_f64_lossy(cm));
        }
        let value = Tensor::new(w.shape().to_vec(), out)?;
        Ok(self.record(
            value,
            Op::FakeQuant {
                w: self.id,
                scale: scale.id,
                offset: offset.id,
                in_range,
                code_minus_offset,
            },
            &[self.id, scale.id, offset.id],
        ))
    }

    /// Replaces the forward value with `value` while passing the gradient
    /// through unchanged.
    pub fn straight_through(&self, value: Tensor<T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if value.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "straight_through",
                left: shape,
                right: value.shape().to_vec(),
            });
        }
        Ok(self.record(value, Op::StraightThrough(self.id), &[self.id]))
    }
}

/// Gradients of every leaf reached by a backward sweep.
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }

    pub fn take(&mut self, var: &Var<'_, T>) -> Tensor<T> {
        self.grads
            .get_mut(var.id)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

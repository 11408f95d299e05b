//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive appends a node to the [`Tape`]; [`Tape::backward`] walks
//! the nodes in reverse and accumulates vector-Jacobian products into the
//! parents that carry gradient tracking.

use crate::error::{CladError, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool(Var),
    Upsample(Var, usize),
    Reshape(Var),
    Stack(Vec<Var>),
    Row(Var, usize),
    MeanRows { table: Var, ids: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op,
    tracked: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    consumed: bool,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input that never receives a gradient.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, false)
    }

    /// Records an input whose gradient is accumulated by `backward`.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<S>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Gradient of the last `backward` target with respect to `v`, or `None`
    /// when `v` is untracked or no backward pass has run.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        if !self.consumed || !self.nodes[v.0].tracked {
            return None;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        let data = match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![S::zero(); self.nodes[v.0].value.numel()],
        };
        Tensor::new(shape, data).ok()
    }

    /// Borrowing variant of [`Tape::grad`]; `None` also when nothing reached `v`.
    pub fn grad_slice(&self, v: Var) -> Option<&[S]> {
        if !self.consumed {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(CladError::NonFinite(name));
        }
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() {
            return Err(CladError::dim(op, "rank", sa.len(), sb.len()));
        }
        for (axis, (x, y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(CladError::dim(op, format!("axis {axis}"), x, y));
            }
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a * factor` for a constant factor.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let c = S::lit(factor);
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    /// `a + shift` for a constant shift.
    pub fn offset(&mut self, a: Var, shift: f64) -> Result<Var> {
        let c = S::lit(shift);
        let out = self.value(a).map(|x| x + c);
        self.push("offset", out, Op::Offset(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.exp());
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push("square", out, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: S = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: S = t.data().iter().copied().sum();
        let m = s / S::lit(t.numel() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Matrix product of `[m, k]` with `[k]` (giving `[m]`) or `[k, n]` (giving `[m, n]`).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let &[m, k] = ta.shape() else {
            return Err(CladError::dim("matmul", "lhs rank", 2, ta.shape().len()));
        };
        let n = match tb.shape() {
            &[kb] | &[kb, _] if kb != k => {
                return Err(CladError::dim("matmul", "inner axis", k, kb));
            }
            [_] => 1,
            [_, n] => *n,
            other => return Err(CladError::dim("matmul", "rhs rank", "1 or 2", other.len())),
        };
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &da[i * k..(i + 1) * k];
            let o = &mut out[i * n..(i + 1) * n];
            for (p, &av) in row.iter().enumerate() {
                let brow = &db[p * n..(p + 1) * n];
                for (ov, &bv) in o.iter_mut().zip(brow) {
                    *ov += av * bv;
                }
            }
        }
        let shape = if tb.shape().len() == 1 { vec![m] } else { vec![m, n] };
        let out = Tensor::new(shape, out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// 2-D cross-correlation of `[C_in, H, W]` with `[C_out, C_in, kh, kw]`
    /// plus per-channel bias, zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let geo = ConvGeometry::infer(
            self.value(input).shape(),
            self.value(kernel).shape(),
            self.value(bias).shape(),
            stride,
            pad,
        )?;
        let out = conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geo,
        );
        let out = Tensor::new(vec![geo.c_out, geo.h_out, geo.w_out], out)?;
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            &[input, kernel, bias],
        )
    }

    /// Spatial mean of `[C, H, W]`, giving `[C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[c, h, w] = t.shape() else {
            return Err(CladError::dim("global_avg_pool", "rank", 3, t.shape().len()));
        };
        let hw = h * w;
        let inv = S::lit(1.0 / hw as f64);
        let out: Vec<S> = t
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<S>() * inv)
            .collect();
        self.push("global_avg_pool", Tensor::new(vec![c], out)?, Op::GlobalAvgPool(a), &[a])
    }

    /// Nearest-neighbour upsampling of `[C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(CladError::usage("upsample factor must be positive"));
        }
        let t = self.value(a);
        let &[c, h, w] = t.shape() else {
            return Err(CladError::dim("upsample_nearest", "rank", 3, t.shape().len()));
        };
        let out = upsample_data(t.data(), c, h, w, factor);
        let out = Tensor::new(vec![c, h * factor, w * factor], out)?;
        self.push("upsample_nearest", out, Op::Upsample(a, factor), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let Some(&first) = items.first() else {
            return Err(CladError::usage("stack of zero tensors"));
        };
        for &v in &items[1..] {
            self.same_shape("stack", first, v)?;
        }
        let inner = self.value(first).shape().to_vec();
        let mut data = Vec::with_capacity(items.len() * self.value(first).numel());
        for &v in items {
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        self.push("stack", Tensor::new(shape, data)?, Op::Stack(items.to_vec()), items)
    }

    /// Slice `i` along the leading axis.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        let Some((&n, rest)) = t.shape().split_first() else {
            return Err(CladError::dim("row", "rank", ">= 1", 0));
        };
        if i >= n {
            return Err(CladError::dim("row", "axis 0 index", format!("< {n}"), i));
        }
        let len: usize = rest.iter().product();
        let data = t.data()[i * len..(i + 1) * len].to_vec();
        let out = Tensor::new(rest.to_vec(), data)?;
        self.push("row", out, Op::Row(a, i), &[a])
    }

    /// Mean of the rows of a `[V, D]` table selected by `ids`.
    pub fn mean_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let &[v, d] = t.shape() else {
            return Err(CladError::dim("mean_rows", "rank", 2, t.shape().len()));
        };
        if ids.is_empty() {
            return Err(CladError::usage("mean_rows needs at least one id"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(CladError::usage(format!("row id {bad} out of range for {v} rows")));
        }
        let mut out = vec![S::zero(); d];
        for &id in ids {
            for (o, &x) in out.iter_mut().zip(&t.data()[id * d..(id + 1) * d]) {
                *o += x;
            }
        }
        let inv = S::lit(1.0 / ids.len() as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let op = Op::MeanRows {
            table,
            ids: ids.to_vec(),
        };
        self.push("mean_rows", Tensor::vector(out), op, &[table])
    }

    /// Accumulates d`output`/d`v` into every tracked node.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.consumed {
            return Err(CladError::usage(
                "backward already ran on this tape; call reset_grads first",
            ));
        }
        let n_out = self.value(output).numel();
        if n_out != 1 {
            return Err(CladError::usage(format!(
                "backward needs a single-element output, got {n_out} elements"
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if self.nodes[output.0].tracked {
            self.grads[output.0] = Some(vec![S::one()]);
        }
        for idx in (0..=output.0).rev() {
            let (lower, upper) = self.grads.split_at_mut(idx);
            let Some(g) = upper[0].as_deref() else { continue };
            let node = &self.nodes[idx];
            backprop_node(&self.nodes, lower, node, g);
        }
        self.consumed = true;
        Ok(())
    }
}

/// Adds a contribution into `grads[v]` if `v` is tracked.
fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    v: Var,
    f: impl FnOnce(&mut [S]),
) {
    if !nodes[v.0].tracked {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.numel()]);
    f(slot);
}

fn backprop_node<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], node: &Node<S>, g: &[S]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y)
            });
        }
        Op::Mul(a, b) => {
            let (xa, xb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |ga| {
                for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(xb) {
                    *x += gy * bv;
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(xa) {
                    *x += gy * av;
                }
            });
        }
        Op::Scale(a, factor) => {
            let c = S::lit(*factor);
            accumulate(nodes, grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * c)
            });
        }
        Op::Offset(a) | Op::Reshape(a) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
        }
        Op::Relu(a) => {
            let xa = val(*a);
            accumulate(nodes, grads, *a, |ga| {
                for ((x, &gy), &input) in ga.iter_mut().zip(g).zip(xa) {
                    if input > S::zero() {
                        *x += gy;
                    }
                }
            });
        }
        Op::Exp(a) => {
            let out = node.value.data();
            accumulate(nodes, grads, *a, |ga| {
                for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(out) {
                    *x += gy * y;
                }
            });
        }
        Op::Square(a) => {
            let xa = val(*a);
            let two = S::lit(2.0);
            accumulate(nodes, grads, *a, |ga| {
                for ((x, &gy), &input) in ga.iter_mut().zip(g).zip(xa) {
                    *x += two * input * gy;
                }
            });
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
        }
        Op::Mean(a) => {
            let n = nodes[a.0].value.numel();
            let share = g[0] / S::lit(n as f64);
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += share));
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = if tb.shape().len() == 1 { 1 } else { tb.shape()[1] };
            let (da, db) = (ta.data(), tb.data());
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &db[p * n..(p + 1) * n];
                        let mut acc = S::zero();
                        for (&gv, &bv) in gi.iter().zip(brow) {
                            acc += gv * bv;
                        }
                        ga[i * k + p] += acc;
                    }
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = da[i * k + p];
                        for (x, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(gi) {
                            *x += av * gv;
                        }
                    }
                }
            });
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            pad,
        } => {
            let geo = ConvGeometry::infer(
                nodes[input.0].value.shape(),
                nodes[kernel.0].value.shape(),
                nodes[bias.0].value.shape(),
                *stride,
                *pad,
            )
            .expect("geometry validated in forward pass");
            let (x, k) = (val(*input), val(*kernel));
            let plane = geo.h_out * geo.w_out;
            accumulate(nodes, grads, *bias, |gb| {
                for (o, slot) in gb.iter_mut().enumerate() {
                    *slot += g[o * plane..(o + 1) * plane].iter().copied().sum::<S>();
                }
            });
            accumulate(nodes, grads, *kernel, |gk| conv2d_grad_kernel(x, g, gk, &geo));
            accumulate(nodes, grads, *input, |gx| conv2d_grad_input(k, g, gx, &geo));
        }
        Op::GlobalAvgPool(a) => {
            let shape = nodes[a.0].value.shape();
            let hw = shape[1] * shape[2];
            let inv = S::lit(1.0 / hw as f64);
            accumulate(nodes, grads, *a, |ga| {
                for (c, chunk) in ga.chunks_mut(hw).enumerate() {
                    let share = g[c] * inv;
                    chunk.iter_mut().for_each(|x| *x += share);
                }
            });
        }
        Op::Upsample(a, f) => {
            let shape = nodes[a.0].value.shape();
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let (f, wo) = (*f, shape[2] * *f);
            accumulate(nodes, grads, *a, |ga| {
                for ch in 0..c {
                    for y in 0..h * f {
                        for xo in 0..wo {
                            ga[(ch * h + y / f) * w + xo / f] += g[(ch * h * f + y) * wo + xo];
                        }
                    }
                }
            });
        }
        Op::Stack(items) => {
            let len = node.value.numel() / items.len();
            for (i, &v) in items.iter().enumerate() {
                accumulate(nodes, grads, v, |gv| add_into(gv, &g[i * len..(i + 1) * len]));
            }
        }
        Op::Row(a, i) => {
            let len = node.value.numel();
            accumulate(nodes, grads, *a, |ga| add_into(&mut ga[i * len..(i + 1) * len], g));
        }
        Op::MeanRows { table, ids } => {
            let d = g.len();
            let inv = S::lit(1.0 / ids.len() as f64);
            accumulate(nodes, grads, *table, |gt| {
                for &id in ids {
                    for (x, &gv) in gt[id * d..(id + 1) * d].iter_mut().zip(g) {
                        *x += gv * inv;
                    }
                }
            });
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
}

pub(crate) fn upsample_data<S: Scalar>(src: &[S], c: usize, h: usize, w: usize, f: usize) -> Vec<S> {
    let (ho, wo) = (h * f, w * f);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            let row = &src[(ch * h + y / f) * w..(ch * h + y / f + 1) * w];
            for x in 0..wo {
                out.push(row[x / f]);
            }
        }
    }
    out
}

/// Validated shape bookkeeping for one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn infer(input: &[usize], kernel: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let &[c_in, h, w] = input else {
            return Err(CladError::dim("conv2d", "input rank", 3, input.len()));
        };
        let &[c_out, kc, kh, kw] = kernel else {
            return Err(CladError::dim("conv2d", "kernel rank", 4, kernel.len()));
        };
        if kc != c_in {
            return Err(CladError::dim("conv2d", "input channels (kernel axis 1)", c_in, kc));
        }
        if bias != [c_out] {
            return Err(CladError::dim("conv2d", "bias length", c_out, format!("{bias:?}")));
        }
        if stride == 0 {
            return Err(CladError::usage("conv2d stride must be positive"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(CladError::usage(format!("conv2d kernel must be odd, got {kh}x{kw}")));
        }
        if h + 2 * pad < kh {
            return Err(CladError::dim("conv2d", "height (padded)", format!(">= {kh}"), h + 2 * pad));
        }
        if w + 2 * pad < kw {
            return Err(CladError::dim("conv2d", "width (padded)", format!(">= {kw}"), w + 2 * pad));
        }
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Output columns `ox` for which kernel column `kx` reads inside the input.
    fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.w + self.pad > kx {
            ((self.w - 1 + self.pad - kx) / self.stride + 1).min(self.w_out)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    /// Input row read by output row `oy` with kernel row `ky`, if inside.
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        (iy < self.h).then_some(iy)
    }

    fn kernel_index(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.c_in + c) * self.kh + ky) * self.kw + kx
    }
}

// Row kernels: the unit-stride branches are written as plain zips so they vectorize.

fn axpy_strided<S: Scalar>(out: &mut [S], input: &[S], stride: usize, w: S) {
    if stride == 1 {
        out.iter_mut().zip(input).for_each(|(o, &x)| *o += w * x);
    } else {
        out.iter_mut().zip(input.iter().step_by(stride)).for_each(|(o, &x)| *o += w * x);
    }
}

fn dot_strided<S: Scalar>(g: &[S], input: &[S], stride: usize) -> S {
    if stride == 1 {
        g.iter().zip(input).map(|(&a, &b)| a * b).sum()
    } else {
        g.iter().zip(input.iter().step_by(stride)).map(|(&a, &b)| a * b).sum()
    }
}

fn scatter_strided<S: Scalar>(target: &mut [S], g: &[S], stride: usize, w: S) {
    if stride == 1 {
        target.iter_mut().zip(g).for_each(|(t, &x)| *t += w * x);
    } else {
        target.iter_mut().step_by(stride).zip(g).for_each(|(t, &x)| *t += w * x);
    }
}

fn conv2d_forward<S: Scalar>(x: &[S], k: &[S], b: &[S], geo: &ConvGeometry) -> Vec<S> {
    let plane = geo.h_out * geo.w_out;
    let mut out = vec![S::zero(); geo.c_out * plane];
    for o in 0..geo.c_out {
        let out_o = &mut out[o * plane..(o + 1) * plane];
        out_o.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..geo.c_in {
            let xin = &x[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
            for ky in 0..geo.kh {
                for kx in 0..geo.kw {
                    let wv = k[geo.kernel_index(o, c, ky, kx)];
                    let cols = geo.valid_cols(kx);
                    for oy in 0..geo.h_out {
                        let Some(iy) = geo.input_row(oy, ky) else { continue };
                        let row_in = &xin[iy * geo.w..(iy + 1) * geo.w];
                        let row_out = &mut out_o[oy * geo.w_out..(oy + 1) * geo.w_out];
                        let start = cols.start * geo.stride + kx - geo.pad;
                        axpy_strided(&mut row_out[cols.clone()], &row_in[start..], geo.stride, wv);
                    }
                }
            }
        }
    }
    out
}

fn conv2d_grad_kernel<S: Scalar>(x: &[S], g: &[S], gk: &mut [S], geo: &ConvGeometry) {
    let plane = geo.h_out * geo.w_out;
    for o in 0..geo.c_out {
        let g_o = &g[o * plane..(o + 1) * plane];
        for c in 0..geo.c_in {
            let xin = &x[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
            for ky in 0..geo.kh {
                for kx in 0..geo.kw {
                    let cols = geo.valid_cols(kx);
                    let mut acc = S::zero();
                    for oy in 0..geo.h_out {
                        let Some(iy) = geo.input_row(oy, ky) else { continue };
                        let row_in = &xin[iy * geo.w..(iy + 1) * geo.w];
                        let row_g = &g_o[oy * geo.w_out..(oy + 1) * geo.w_out];
                        let start = cols.start * geo.stride + kx - geo.pad;
                        acc += dot_strided(&row_g[cols.clone()], &row_in[start..], geo.stride);
                    }
                    gk[geo.kernel_index(o, c, ky, kx)] += acc;
                }
            }
        }
    }
}

fn conv2d_grad_input<S: Scalar>(k: &[S], g: &[S], gx: &mut [S], geo: &ConvGeometry) {
    let plane = geo.h_out * geo.w_out;
    for o in 0..geo.c_out {
        let g_o = &g[o * plane..(o + 1) * plane];
        for c in 0..geo.c_in {
            let gin = &mut gx[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
            for ky in 0..geo.kh {
                for kx in 0..geo.kw {
                    let wv = k[geo.kernel_index(o, c, ky, kx)];
                    let cols = geo.valid_cols(kx);
                    for oy in 0..geo.h_out {
                        let Some(iy) = geo.input_row(oy, ky) else { continue };
                        let row_g = &g_o[oy * geo.w_out..(oy + 1) * geo.w_out];
                        let row_in = &mut gin[iy * geo.w..(iy + 1) * geo.w];
                        let start = cols.start * geo.stride + kx - geo.pad;
                        scatter_strided(&mut row_in[start..], &row_g[cols.clone()], geo.stride, wv);
                    }
                }
            }
        }
    }
}

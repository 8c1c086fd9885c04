//! Differentiable primitives. Each op is a small struct implementing
//! [`Op`]; the `Tape` methods at the bottom are the public entry points.

use crate::error::{shape_err, Error, Result};
use crate::numerics::tape::{Op, Tape, Var};
use crate::numerics::tensor::{numel, strides};
use crate::numerics::{ParamId, ParamStore, Tensor};

// ---------------------------------------------------------------------------
// broadcasting helpers

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `input` laid against `out`, zero on broadcast axes.
fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(input);
    let off = out.len() - input.len();
    (0..out.len())
        .map(|i| {
            if i < off || input[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_broadcast2(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped like the broadcast output) back down to `shape`.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let s = broadcast_strides(shape, grad.shape());
    let mut out = Tensor::zeros(shape.to_vec());
    let g = grad.data();
    let d = out.data_mut();
    for_each_broadcast2(grad.shape(), &s, &s, |o, i, _| d[i] += g[o]);
    out
}

// ---------------------------------------------------------------------------
// binary elementwise

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

struct Binary(BinaryKind);

impl Op for Binary {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
            BinaryKind::Max => "maximum",
            BinaryKind::Min => "minimum",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let sa = broadcast_strides(a.shape(), &shape);
        let sb = broadcast_strides(b.shape(), &shape);
        let mut out = Tensor::zeros(shape.clone());
        let (ad, bd) = (a.data(), b.data());
        let od = out.data_mut();
        let kind = self.0;
        for_each_broadcast2(&shape, &sa, &sb, |o, i, j| {
            let (x, y) = (ad[i], bd[j]);
            od[o] = match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
                BinaryKind::Max => x.max(y),
                BinaryKind::Min => x.min(y),
            };
        });
        Ok(out)
    }

    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let shape = output.shape();
        let sa = broadcast_strides(a.shape(), shape);
        let sb = broadcast_strides(b.shape(), shape);
        let mut ga = Tensor::zeros(a.shape().to_vec());
        let mut gb = Tensor::zeros(b.shape().to_vec());
        {
            let (ad, bd, g) = (a.data(), b.data(), grad.data());
            let (gad, gbd) = (ga.data_mut(), gb.data_mut());
            let kind = self.0;
            for_each_broadcast2(shape, &sa, &sb, |o, i, j| {
                let (x, y, go) = (ad[i], bd[j], g[o]);
                let (da, db) = match kind {
                    BinaryKind::Add => (go, go),
                    BinaryKind::Sub => (go, -go),
                    BinaryKind::Mul => (go * y, go * x),
                    BinaryKind::Div => (go / y, -go * x / (y * y)),
                    BinaryKind::Max => {
                        if x >= y {
                            (go, 0.0)
                        } else {
                            (0.0, go)
                        }
                    }
                    BinaryKind::Min => {
                        if x <= y {
                            (go, 0.0)
                        } else {
                            (0.0, go)
                        }
                    }
                };
                gad[i] += da;
                gbd[j] += db;
            });
        }
        Ok(vec![needs[0].then_some(ga), needs[1].then_some(gb)])
    }
}

// ---------------------------------------------------------------------------
// unary elementwise

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Sigmoid,
    Gelu,
    Abs,
    Square,
    Sqrt,
    /// logit with the input clamped to `[eps, 1 - eps]`
    InvSigmoid(f64),
}

struct Unary(UnaryKind);

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Op for Unary {
    fn name(&self) -> &'static str {
        match self.0 {
            UnaryKind::Neg => "neg",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::AddScalar(_) => "add_scalar",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Gelu => "gelu",
            UnaryKind::Abs => "abs",
            UnaryKind::Square => "square",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::InvSigmoid(_) => "inverse_sigmoid",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let k = self.0;
        Ok(inputs[0].map(|x| match k {
            UnaryKind::Neg => -x,
            UnaryKind::Scale(c) => c * x,
            UnaryKind::AddScalar(c) => x + c,
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Square => x * x,
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::InvSigmoid(eps) => {
                let p = x.clamp(eps, 1.0 - eps);
                (p / (1.0 - p)).ln()
            }
        }))
    }

    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0].data();
        let y = output.data();
        let g = grad.data();
        let k = self.0;
        let data = (0..x.len())
            .map(|i| {
                let d = match k {
                    UnaryKind::Neg => -1.0,
                    UnaryKind::Scale(c) => c,
                    UnaryKind::AddScalar(_) => 1.0,
                    UnaryKind::Exp => y[i],
                    UnaryKind::Log => 1.0 / x[i],
                    UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                    UnaryKind::Gelu => {
                        let v = x[i];
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
                    }
                    UnaryKind::Abs => {
                        if x[i] >= 0.0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    UnaryKind::Square => 2.0 * x[i],
                    UnaryKind::Sqrt => 0.5 / y[i],
                    UnaryKind::InvSigmoid(eps) => {
                        if x[i] < eps || x[i] > 1.0 - eps {
                            0.0
                        } else {
                            1.0 / (x[i] * (1.0 - x[i]))
                        }
                    }
                };
                d * g[i]
            })
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), data)?)])
    }
}

// ---------------------------------------------------------------------------
// shape ops

struct Reshape(Vec<usize>);

impl Op for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        inputs[0].clone().reshape(self.0.clone())
    }
    fn vjp(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(
            grad.clone().reshape(inputs[0].shape().to_vec())?,
        )])
    }
}

pub(crate) fn permute_tensor(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank
        || axes
            .iter()
            .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
    {
        return shape_err(format!(
            "invalid permutation {axes:?} for shape {:?}",
            x.shape()
        ));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let in_strides = strides(x.shape());
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Tensor::zeros(out_shape.clone());
    let xd = x.data();
    let od = out.data_mut();
    for_each_broadcast2(&out_shape, &src, &src, |o, i, _| od[o] = xd[i]);
    Ok(out)
}

struct Permute(Vec<usize>);

impl Op for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        permute_tensor(inputs[0], &self.0)
    }
    fn vjp(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let mut inv = vec![0; self.0.len()];
        for (i, &a) in self.0.iter().enumerate() {
            inv[a] = i;
        }
        Ok(vec![Some(permute_tensor(grad, &inv)?)])
    }
}

struct BroadcastTo(Vec<usize>);

impl Op for BroadcastTo {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let shape = broadcast_shape(x.shape(), &self.0)?;
        if shape != self.0 {
            return shape_err(format!("cannot broadcast {:?} to {:?}", x.shape(), self.0));
        }
        let s = broadcast_strides(x.shape(), &shape);
        let mut out = Tensor::zeros(shape.clone());
        let xd = x.data();
        let od = out.data_mut();
        for_each_broadcast2(&shape, &s, &s, |o, i, _| od[o] = xd[i]);
        Ok(out)
    }
    fn vjp(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(reduce_to(grad, inputs[0].shape()))])
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn resolve_axis(rank: usize, axis: isize) -> Result<usize> {
    let a = if axis < 0 { rank as isize + axis } else { axis };
    if a < 0 || a as usize >= rank {
        return Err(Error::Shape(format!(
            "axis {axis} out of range for rank {rank}"
        )));
    }
    Ok(a as usize)
}

struct Concat(usize);

impl Op for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let axis = self.0;
        let first = inputs[0].shape();
        let mut out_shape = first.to_vec();
        out_shape[axis] = 0;
        for t in inputs {
            let s = t.shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &n)| i != axis && n != first[i])
            {
                return shape_err(format!("concat of {first:?} with {s:?} along {axis}"));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for t in inputs {
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::new(out_shape, data)
    }
    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let axis = self.0;
        let (outer, total, inner) = axis_split(output.shape(), axis);
        let g = grad.data();
        let mut res = Vec::new();
        let mut start = 0;
        for t in inputs {
            let n = t.shape()[axis];
            let mut d = Vec::with_capacity(t.len());
            for o in 0..outer {
                let base = o * total * inner + start * inner;
                d.extend_from_slice(&g[base..base + n * inner]);
            }
            res.push(Some(Tensor::new(t.shape().to_vec(), d)?));
            start += n;
        }
        Ok(res)
    }
}

struct Narrow {
    axis: usize,
    start: usize,
    len: usize,
}

impl Op for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if self.start + self.len > x.shape()[self.axis] {
            return shape_err(format!(
                "narrow [{}, {}) out of range for axis {} of {:?}",
                self.start,
                self.start + self.len,
                self.axis,
                x.shape()
            ));
        }
        let (outer, n, inner) = axis_split(x.shape(), self.axis);
        let mut shape = x.shape().to_vec();
        shape[self.axis] = self.len;
        let mut d = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let base = (o * n + self.start) * inner;
            d.extend_from_slice(&x.data()[base..base + self.len * inner]);
        }
        Tensor::new(shape, d)
    }
    fn vjp(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (outer, n, inner) = axis_split(x.shape(), self.axis);
        let mut gx = Tensor::zeros(x.shape().to_vec());
        let gd = gx.data_mut();
        let g = grad.data();
        for o in 0..outer {
            let base = (o * n + self.start) * inner;
            let src = o * self.len * inner;
            gd[base..base + self.len * inner].copy_from_slice(&g[src..src + self.len * inner]);
        }
        Ok(vec![Some(gx)])
    }
}

/// Selects entries along axis 0.
struct IndexSelect(Vec<usize>);

impl Op for IndexSelect {
    fn name(&self) -> &'static str {
        "index_select"
    }
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.rank() == 0 {
            return shape_err("index_select on a scalar");
        }
        let rows = x.shape()[0];
        let inner = numel(&x.shape()[1..]);
        let mut shape = x.shape().to_vec();
        shape[0] = self.0.len();
        let mut d = Vec::with_capacity(numel(&shape));
        for &i in &self.0 {
            if i >= rows {
                return shape_err(format!("index {i} out of range for {rows} rows"));
            }
            d.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
        }
        Tensor::new(shape, d)
    }
    fn vjp(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let inner = numel(&x.shape()[1..]);
        let mut gx = Tensor::zeros(x.shape().to_vec());
        let gd = gx.data_mut();
        for (r, &i) in self.0.iter().enumerate() {
            for c in 0..inner {
                gd[i * inner + c] += grad.data()[r * inner + c];
            }
        }
        Ok(vec![Some(gx)])
    }
}

// ---------------------------------------------------------------------------
// reductions

struct SumAll;

impl Op for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(inputs[0].sum()))
    }
    fn vjp(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(
            inputs[0].shape().to_vec(),
            grad.data()[0],
        ))])
    }
}

/// Sum over one axis, removing it.
struct SumAxis(usize);

impl Op for SumAxis {
    fn name(&self) -> &'static str {
        "sum_axis"
    }
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let (outer, n, inner) = axis_split(x.shape(), self.0);
        let mut shape = x.shape().to_vec();
        shape.remove(self.0);
        let mut out = Tensor::zeros(shape);
        let od = out.data_mut();
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    od[o * inner + i] += x.data()[(o * n + a) * inner + i];
                }
            }
        }
        Ok(out)
    }
    fn vjp(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (outer, n, inner) = axis_split(x.shape(), self.0);
        let mut gx = Tensor::zeros(x.shape().to_vec());
        let gd = gx.data_mut();
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    gd[(o * n + a) * inner + i] = grad.data()[o * inner + i];
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

// ---------------------------------------------------------------------------
// softmax

pub(crate) fn softmax_forward(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    if n == 0 {
        return shape_err(format!("softmax over empty axis {axis} of {:?}", x.shape()));
    }
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * n + a) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for a in 0..n {
                m = m.max(d[at(a)]);
            }
            let mut s = 0.0;
            for a in 0..n {
                let e = (d[at(a)] - m).exp();
                d[at(a)] = e;
                s += e;
            }
            for a in 0..n {
                d[at(a)] /= s;
            }
        }
    }
    Ok(out)
}

struct Softmax(usize);

impl Op for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        softmax_forward(inputs[0], self.0)
    }
    fn vjp(
        &self,
        _: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (outer, n, inner) = axis_split(output.shape(), self.0);
        let y = output.data();
        let g = grad.data();
        let mut gx = Tensor::zeros(output.shape().to_vec());
        let gd = gx.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let dot: f64 = (0..n).map(|a| g[at(a)] * y[at(a)]).sum();
                for a in 0..n {
                    gd[at(a)] = y[at(a)] * (g[at(a)] - dot);
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

// ---------------------------------------------------------------------------
// matmul

struct MatmulPlan {
    batch: Vec<usize>,
    a_batch_strides: Vec<usize>,
    b_batch_strides: Vec<usize>,
    p: usize,
    q: usize,
    r: usize,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return shape_err(format!(
            "matmul needs rank >= 2 operands, got {a:?} x {b:?}"
        ));
    }
    let (p, q) = (a[a.len() - 2], a[a.len() - 1]);
    let (q2, r) = (b[b.len() - 2], b[b.len() - 1]);
    if q != q2 {
        return shape_err(format!("matmul inner extents differ: {a:?} x {b:?}"));
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shape(ab, bb)
        .map_err(|_| Error::Shape(format!("matmul batch extents differ: {a:?} x {b:?}")))?;
    Ok(MatmulPlan {
        a_batch_strides: broadcast_strides(ab, &batch),
        b_batch_strides: broadcast_strides(bb, &batch),
        batch,
        p,
        q,
        r,
    })
}

/// `c[p,r] += a[p,q] * b[q,r]` with optional transposes of the stored operands.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let crow = &mut c[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = if ta { a[k * p + i] } else { a[i * q + k] };
            if aik == 0.0 {
                continue;
            }
            if tb {
                for (j, cj) in crow.iter_mut().enumerate() {
                    *cj += aik * b[j * q + k];
                }
            } else {
                let brow = &b[k * r..(k + 1) * r];
                for (cj, bj) in crow.iter_mut().zip(brow) {
                    *cj += aik * bj;
                }
            }
        }
    }
}

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let MatmulPlan { p, q, r, .. } = plan;
    let mut shape = plan.batch.clone();
    shape.extend([p, r]);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast2(
        &plan.batch,
        &plan.a_batch_strides,
        &plan.b_batch_strides,
        |o, ia, ib| {
            gemm_acc(
                &ad[ia * p * q..(ia + 1) * p * q],
                false,
                &bd[ib * q * r..(ib + 1) * q * r],
                false,
                &mut od[o * p * r..(o + 1) * p * r],
                p,
                q,
                r,
            );
        },
    );
    Ok(out)
}

struct Matmul;

impl Op for Matmul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        matmul_forward(inputs[0], inputs[1])
    }
    fn vjp(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let plan = matmul_plan(a.shape(), b.shape())?;
        let MatmulPlan { p, q, r, .. } = plan;
        let mut ga = needs[0].then(|| Tensor::zeros(a.shape().to_vec()));
        let mut gb = needs[1].then(|| Tensor::zeros(b.shape().to_vec()));
        let (ad, bd, g) = (a.data(), b.data(), grad.data());
        for_each_broadcast2(
            &plan.batch,
            &plan.a_batch_strides,
            &plan.b_batch_strides,
            |o, ia, ib| {
                let go = &g[o * p * r..(o + 1) * p * r];
                if let Some(ga) = ga.as_mut() {
                    // dA = dC * B^T
                    gemm_acc(
                        go,
                        false,
                        &bd[ib * q * r..(ib + 1) * q * r],
                        true,
                        &mut ga.data_mut()[ia * p * q..(ia + 1) * p * q],
                        p,
                        r,
                        q,
                    );
                }
                if let Some(gb) = gb.as_mut() {
                    // dB = A^T * dC
                    gemm_acc(
                        &ad[ia * p * q..(ia + 1) * p * q],
                        true,
                        go,
                        false,
                        &mut gb.data_mut()[ib * q * r..(ib + 1) * q * r],
                        q,
                        p,
                        r,
                    );
                }
            },
        );
        Ok(vec![ga, gb])
    }
}

// ---------------------------------------------------------------------------
// normalization

/// Normalizes groups of elements of a `[rows, c]` view; `group_of(ch)` gives
/// the group of channel `ch`, and statistics span all rows for `Group` mode
/// or a single row for `Row` mode.
#[derive(Clone, Copy, Debug, PartialEq)]
enum NormMode {
    /// layer norm over the last axis
    Row,
    /// group norm over all positions and the channels of one group
    Group(usize),
}

struct Norm {
    mode: NormMode,
    eps: f64,
    // per statistic set: (mean, rstd)
    stats: Vec<(f64, f64)>,
}

impl Norm {
    fn sets(&self, shape: &[usize]) -> (usize, usize, usize) {
        let c = *shape.last().unwrap_or(&1);
        let rows = numel(shape) / c.max(1);
        match self.mode {
            NormMode::Row => (rows, c, 1),
            NormMode::Group(g) => (g, c / g, rows),
        }
    }

    /// Flat indices of statistic set `s`.
    fn members(&self, shape: &[usize], s: usize) -> Vec<usize> {
        let c = *shape.last().unwrap_or(&1);
        match self.mode {
            NormMode::Row => (s * c..(s + 1) * c).collect(),
            NormMode::Group(g) => {
                let per = c / g;
                let rows = numel(shape) / c;
                (0..rows)
                    .flat_map(|r| (0..per).map(move |k| r * c + s * per + k))
                    .collect()
            }
        }
    }
}

impl Op for Norm {
    fn name(&self) -> &'static str {
        match self.mode {
            NormMode::Row => "layer_norm",
            NormMode::Group(_) => "group_norm",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, gain, shift) = (inputs[0], inputs[1], inputs[2]);
        let c = *x
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("norm of a scalar".into()))?;
        if gain.shape() != [c] || shift.shape() != [c] {
            return shape_err(format!(
                "norm affine params {:?}/{:?} do not match channels {c}",
                gain.shape(),
                shift.shape()
            ));
        }
        if let NormMode::Group(g) = self.mode {
            if g == 0 || c % g != 0 {
                return Err(Error::Config(format!(
                    "{c} channels not divisible into {g} groups"
                )));
            }
        }
        let (nsets, _, _) = self.sets(x.shape());
        let mut out = Tensor::zeros(x.shape().to_vec());
        self.stats.clear();
        for s in 0..nsets {
            let idx = self.members(x.shape(), s);
            let n = idx.len() as f64;
            let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / n;
            let var = idx
                .iter()
                .map(|&i| (x.data()[i] - mean).powi(2))
                .sum::<f64>()
                / n;
            let rstd = 1.0 / (var + self.eps).sqrt();
            self.stats.push((mean, rstd));
            for &i in &idx {
                let ch = i % c;
                out.data_mut()[i] =
                    (x.data()[i] - mean) * rstd * gain.data()[ch] + shift.data()[ch];
            }
        }
        Ok(out)
    }

    fn vjp(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, gain) = (inputs[0], inputs[1]);
        let c = *x.shape().last().unwrap();
        let mut gx = Tensor::zeros(x.shape().to_vec());
        let mut gg = Tensor::zeros([c]);
        let mut gs = Tensor::zeros([c]);
        let g = grad.data();
        for (s, &(mean, rstd)) in self.stats.iter().enumerate() {
            let idx = self.members(x.shape(), s);
            let n = idx.len() as f64;
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for &i in &idx {
                let ch = i % c;
                let xh = (x.data()[i] - mean) * rstd;
                let dxh = g[i] * gain.data()[ch];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
                gg.data_mut()[ch] += g[i] * xh;
                gs.data_mut()[ch] += g[i];
            }
            let (m1, m2) = (sum_dxh / n, sum_dxh_xh / n);
            for &i in &idx {
                let ch = i % c;
                let xh = (x.data()[i] - mean) * rstd;
                let dxh = g[i] * gain.data()[ch];
                gx.data_mut()[i] = rstd * (dxh - m1 - xh * m2);
            }
        }
        Ok(vec![
            needs[0].then_some(gx),
            needs[1].then_some(gg),
            needs[2].then_some(gs),
        ])
    }
}

// ---------------------------------------------------------------------------
// focal loss (elementwise, fused for stable log-sigmoid arithmetic)

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-element sigmoid focal loss against fixed binary targets.
pub(crate) struct SigmoidFocal {
    pub targets: Tensor,
    /// `None` weights both classes by 1
    pub alpha: Option<f64>,
    pub gamma: f64,
}

impl SigmoidFocal {
    fn alpha_t(&self, y: f64) -> f64 {
        match self.alpha {
            Some(a) if y > 0.5 => a,
            Some(a) => 1.0 - a,
            None => 1.0,
        }
    }
}

impl Op for SigmoidFocal {
    fn name(&self) -> &'static str {
        "sigmoid_focal"
    }
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.shape() != self.targets.shape() {
            return shape_err(format!(
                "focal logits {:?} vs targets {:?}",
                x.shape(),
                self.targets.shape()
            ));
        }
        let data = x
            .data()
            .iter()
            .zip(self.targets.data())
            .map(|(&z, &y)| {
                let p = sigmoid(z);
                // -log p_t via softplus for stability
                let (one_minus_pt, nlog_pt) = if y > 0.5 {
                    (1.0 - p, softplus(-z))
                } else {
                    (p, softplus(z))
                };
                self.alpha_t(y) * one_minus_pt.powf(self.gamma) * nlog_pt
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
    fn vjp(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let gamma = self.gamma;
        let data = x
            .data()
            .iter()
            .zip(self.targets.data())
            .zip(grad.data())
            .map(|((&z, &y), &g)| {
                let p = sigmoid(z);
                let a = self.alpha_t(y);
                let d = if y > 0.5 {
                    // d/dz [ (1-p)^g * softplus(-z) ]
                    let q = 1.0 - p;
                    let pow_g = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
                    let dpow = if gamma == 0.0 {
                        0.0
                    } else {
                        -gamma * q.powf(gamma - 1.0) * p * q
                    };
                    dpow * softplus(-z) + pow_g * (-q)
                } else {
                    let pow_g = if gamma == 0.0 { 1.0 } else { p.powf(gamma) };
                    let dpow = if gamma == 0.0 {
                        0.0
                    } else {
                        gamma * p.powf(gamma - 1.0) * p * (1.0 - p)
                    };
                    dpow * softplus(z) + pow_g * p
                };
                a * d * g
            })
            .collect();
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), data)?)])
    }
}

// ---------------------------------------------------------------------------
// public tape API

impl Tape {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary(kind), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Min, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        self.apply(Unary(kind), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), x)
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, x)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn inverse_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::InvSigmoid(1e-5), x)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        self.apply(Reshape(shape.to_vec()), &[x])
    }
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Permute(axes.to_vec()), &[x])
    }
    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return shape_err("transpose needs rank >= 2");
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        self.apply(BroadcastTo(shape.to_vec()), &[x])
    }
    pub fn concat(&mut self, xs: &[Var], axis: isize) -> Result<Var> {
        let rank = self.shape(xs[0]).len();
        let a = resolve_axis(rank, axis)?;
        self.apply(Concat(a), xs)
    }
    pub fn narrow(&mut self, x: Var, axis: isize, start: usize, len: usize) -> Result<Var> {
        let a = resolve_axis(self.shape(x).len(), axis)?;
        self.apply(
            Narrow {
                axis: a,
                start,
                len,
            },
            &[x],
        )
    }
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        self.apply(IndexSelect(indices.to_vec()), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(SumAll, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return shape_err("mean of an empty tensor");
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }
    pub fn sum_axis(&mut self, x: Var, axis: isize) -> Result<Var> {
        let a = resolve_axis(self.shape(x).len(), axis)?;
        self.apply(SumAxis(a), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: isize) -> Result<Var> {
        let a = resolve_axis(self.shape(x).len(), axis)?;
        self.apply(Softmax(a), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Matmul, &[a, b])
    }

    /// `x[..., p] * w[p, r] + b[r]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return shape_err(format!("linear input {xs:?} against weight {ws:?}"));
        }
        let rows = numel(&xs[..xs.len() - 1]);
        let x2 = self.reshape(x, &[rows, ws[0]])?;
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return shape_err(format!(
                    "linear bias {:?} for output dim {}",
                    self.shape(b),
                    ws[1]
                ));
            }
            y = self.add(y, b)?;
        }
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(ws[1]);
        self.reshape(y, &out_shape)
    }

    /// Non-overlapping `p x p` patches of `x[H, W, c]` flattened in
    /// `(dy, dx, c)` order, giving `[H/p, W/p, p*p*c]`.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || p == 0 || !s[0].is_multiple_of(p) || !s[1].is_multiple_of(p) {
            return shape_err(format!("cannot patchify {s:?} with stride {p}"));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let r = self.reshape(x, &[h / p, p, w / p, p, c])?;
        let r = self.permute(r, &[0, 2, 1, 3, 4])?;
        self.reshape(r, &[h / p, w / p, p * p * c])
    }

    /// Stride-equals-kernel convolution; `weight` is `[p*p*c, c_out]`.
    pub fn conv2d_patchify(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        p: usize,
    ) -> Result<Var> {
        let patches = self.patchify(x, p)?;
        self.linear(patches, weight, bias)
    }

    /// Inverse of a stride-2 patchify: `[H, W, 4c]` to `[2H, 2W, c]`.
    pub fn depth_to_space2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[2].is_multiple_of(4) {
            return shape_err(format!("depth_to_space2 needs [H, W, 4c], got {s:?}"));
        }
        let (h, w, c) = (s[0], s[1], s[2] / 4);
        let r = self.reshape(x, &[h, w, 2, 2, c])?;
        let r = self.permute(r, &[0, 2, 1, 3, 4])?;
        self.reshape(r, &[2 * h, 2 * w, c])
    }

    /// Stride-2, kernel-2 transposed convolution. `weight` is `[c, 4*c_out]`
    /// in `(dy, dx, c_out)` order; `bias` is `[c_out]`.
    pub fn deconv2x(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.linear(x, weight, None)?;
        let y = self.depth_to_space2(y)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        self.apply(
            Norm {
                mode: NormMode::Row,
                eps,
                stats: vec![],
            },
            &[x, gain, shift],
        )
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gain: Var,
        shift: Var,
        eps: f64,
    ) -> Result<Var> {
        self.apply(
            Norm {
                mode: NormMode::Group(groups),
                eps,
                stats: vec![],
            },
            &[x, gain, shift],
        )
    }

    pub fn sigmoid_focal(
        &mut self,
        logits: Var,
        targets: Tensor,
        alpha: Option<f64>,
        gamma: f64,
    ) -> Result<Var> {
        self.apply(
            SigmoidFocal {
                targets,
                alpha,
                gamma,
            },
            &[logits],
        )
    }

    /// Convenience: parameter lookup.
    pub fn p(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.param(store, id)
    }
}

/// Default GroupNorm group count: 32, or one group per channel below that.
pub fn default_groups(channels: usize) -> usize {
    if channels >= 32 && channels.is_multiple_of(32) {
        32
    } else {
        channels
    }
}

use std::cell::RefCell;

use super::kernels::{gemm, pad_index, softmax_rows, softmax_rows_backward, Mat};
use super::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Boundary handling for same-length convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Replicate,
    Zero,
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    /// tanh approximation
    Gelu,
    Silu,
    Exp,
    Square,
    Abs,
    Softplus,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    AddPerBatch(usize, usize),
    Affine(usize, f64),
    Unary(usize, Unary),
    MatMul(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    Transpose(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: usize,
        kernel: usize,
        padding: Padding,
    },
    MovingAverage {
        x: usize,
        window: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    SliceLast {
        x: usize,
        start: usize,
    },
    ConcatLast(Vec<usize>),
    SelectTime {
        x: usize,
        index: usize,
    },
    StackTime(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    grad: Option<Vec<f64>>,
}

/// Wengert list recording every operation of a forward pass.
///
/// Nodes are appended in evaluation order, so replaying the list backwards is a
/// reverse topological traversal. A tape is single-threaded; build one per
/// forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if tracked { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            tracked,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Reverse sweep from a scalar loss. Gradients are added to whatever a
    /// previous call left on the nodes.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.tracked {
            return Err(Error::Contract(
                "backward called on a value that does not depend on any tracked input".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let mut finished = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            finished.push((id, g));
        }
        for (id, g) in finished {
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    contribution: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].tracked {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    contribution(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| {
                d.iter_mut().zip(g).for_each(|(d, s)| *d -= s)
            });
        }
        Op::Mul(a, b) => {
            let va = nodes[*a].value.data();
            let vb = nodes[*b].value.data();
            let ga: Vec<f64> = g.iter().zip(vb).map(|(g, v)| g * v).collect();
            let gb: Vec<f64> = g.iter().zip(va).map(|(g, v)| g * v).collect();
            accumulate(nodes, grads, *a, |d| add_into(d, &ga));
            accumulate(nodes, grads, *b, |d| add_into(d, &gb));
        }
        Op::AddBias(a, bias) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            let c = nodes[*bias].value.len();
            accumulate(nodes, grads, *bias, |d| {
                for row in g.chunks(c) {
                    add_into(d, row);
                }
            });
        }
        Op::AddPerBatch(a, e) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            let shape = nodes[*a].value.shape();
            let (l, c) = (shape[1], shape[2]);
            accumulate(nodes, grads, *e, |d| {
                for (b, chunk) in g.chunks(l * c).enumerate() {
                    for row in chunk.chunks(c) {
                        add_into(&mut d[b * c..(b + 1) * c], row);
                    }
                }
            });
        }
        Op::Affine(a, scale) => {
            accumulate(nodes, grads, *a, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += scale * g)
            });
        }
        Op::Unary(a, kind) => {
            let x = nodes[*a].value.data();
            accumulate(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * unary_derivative(*kind, x[i], out[i]);
                }
            });
        }
        Op::MatMul(a, b) => {
            let va = &nodes[*a].value;
            let vb = &nodes[*b].value;
            let (k, n) = (vb.shape()[0], vb.shape()[1]);
            let m = va.len() / k;
            let gm = Mat::row_major(m, n);
            if nodes[*a].tracked {
                let mut ga = vec![0.0; m * k];
                gemm(1.0, g, gm, vb.data(), Mat::row_major(k, n).t(), 0.0, &mut ga, Mat::row_major(m, k));
                accumulate(nodes, grads, *a, |d| add_into(d, &ga));
            }
            if nodes[*b].tracked {
                let mut gb = vec![0.0; k * n];
                gemm(1.0, va.data(), Mat::row_major(m, k).t(), g, gm, 0.0, &mut gb, Mat::row_major(k, n));
                accumulate(nodes, grads, *b, |d| add_into(d, &gb));
            }
        }
        Op::Softmax(a) => {
            let cols = *node.value.shape().last().unwrap_or(&1);
            let mut ga = vec![0.0; out.len()];
            softmax_rows_backward(out, g, &mut ga, cols);
            accumulate(nodes, grads, *a, |d| add_into(d, &ga));
        }
        Op::LogSoftmax(a) => {
            let cols = *node.value.shape().last().unwrap_or(&1);
            accumulate(nodes, grads, *a, |d| {
                for ((d, g), y) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                    let total: f64 = g.iter().sum();
                    for j in 0..cols {
                        d[j] += g[j] - y[j].exp() * total;
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (r, c) = (node.value.shape()[1], node.value.shape()[0]);
            accumulate(nodes, grads, *a, |d| {
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let vx = nodes[*x].value.data();
            let gamma = nodes[*gain].value.data();
            let c = gamma.len();
            let mut gx = vec![0.0; vx.len()];
            let mut ggain = vec![0.0; c];
            let mut gbias = vec![0.0; c];
            let mut dxhat = vec![0.0; c];
            for (r, (xr, gr)) in vx.chunks(c).zip(g.chunks(c)).enumerate() {
                let (mu, rs) = (mean[r], rstd[r]);
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..c {
                    let xhat = (xr[j] - mu) * rs;
                    ggain[j] += gr[j] * xhat;
                    gbias[j] += gr[j];
                    dxhat[j] = gr[j] * gamma[j];
                    m1 += dxhat[j];
                    m2 += dxhat[j] * xhat;
                }
                m1 /= c as f64;
                m2 /= c as f64;
                let gxr = &mut gx[r * c..(r + 1) * c];
                for j in 0..c {
                    let xhat = (xr[j] - mu) * rs;
                    gxr[j] = rs * (dxhat[j] - m1 - xhat * m2);
                }
            }
            accumulate(nodes, grads, *x, |d| add_into(d, &gx));
            accumulate(nodes, grads, *gain, |d| add_into(d, &ggain));
            accumulate(nodes, grads, *bias, |d| add_into(d, &gbias));
        }
        Op::Conv1d { x, kernel, padding } => {
            let vx = &nodes[*x].value;
            let vk = &nodes[*kernel].value;
            let (b, l, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let (k, co) = (vk.shape()[0], vk.shape()[2]);
            let rows = b * l;
            let gm = Mat::row_major(rows, co);
            let replicate = *padding == Padding::Replicate;
            if nodes[*kernel].tracked {
                let cols = im2col(vx.data(), b, l, c, k, replicate);
                let mut gk = vec![0.0; k * c * co];
                gemm(1.0, &cols, Mat::row_major(rows, k * c).t(), g, gm, 0.0, &mut gk, Mat::row_major(k * c, co));
                accumulate(nodes, grads, *kernel, |d| add_into(d, &gk));
            }
            if nodes[*x].tracked {
                let mut gcols = vec![0.0; rows * k * c];
                gemm(1.0, g, gm, vk.data(), Mat::row_major(k * c, co).t(), 0.0, &mut gcols, Mat::row_major(rows, k * c));
                let half = (k / 2) as isize;
                accumulate(nodes, grads, *x, |d| {
                    for bi in 0..b {
                        for t in 0..l {
                            let row = &gcols[(bi * l + t) * k * c..(bi * l + t + 1) * k * c];
                            for j in 0..k {
                                let pos = t as isize + j as isize - half;
                                if let Some(src) = pad_index(pos, l, replicate) {
                                    add_into(
                                        &mut d[(bi * l + src) * c..(bi * l + src + 1) * c],
                                        &row[j * c..(j + 1) * c],
                                    );
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::MovingAverage { x, window } => {
            let shape = nodes[*x].value.shape();
            let (b, l, c) = (shape[0], shape[1], shape[2]);
            let half = (*window / 2) as isize;
            let w = 1.0 / *window as f64;
            accumulate(nodes, grads, *x, |d| {
                for bi in 0..b {
                    for t in 0..l {
                        let gr = &g[(bi * l + t) * c..(bi * l + t + 1) * c];
                        for j in -half..=half {
                            let src = (t as isize + j).clamp(0, l as isize - 1) as usize;
                            let dr = &mut d[(bi * l + src) * c..(bi * l + src + 1) * c];
                            dr.iter_mut().zip(gr).for_each(|(d, g)| *d += w * g);
                        }
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => {
            let (gq, gk, gv) = attention_backward(
                &nodes[*q].value,
                &nodes[*k].value,
                &nodes[*v].value,
                *heads,
                probs,
                g,
            );
            accumulate(nodes, grads, *q, |d| add_into(d, &gq));
            accumulate(nodes, grads, *k, |d| add_into(d, &gk));
            accumulate(nodes, grads, *v, |d| add_into(d, &gv));
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            accumulate(nodes, grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0] / n))
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, |d| add_into(d, g)),
        Op::SliceLast { x, start } => {
            let c = *nodes[*x].value.shape().last().unwrap();
            let len = *node.value.shape().last().unwrap();
            accumulate(nodes, grads, *x, |d| {
                for (dr, gr) in d.chunks_mut(c).zip(g.chunks(len)) {
                    add_into(&mut dr[*start..*start + len], gr);
                }
            });
        }
        Op::ConcatLast(parts) => {
            let total = *node.value.shape().last().unwrap();
            let mut offset = 0;
            for &p in parts {
                let c = *nodes[p].value.shape().last().unwrap();
                accumulate(nodes, grads, p, |d| {
                    for (dr, gr) in d.chunks_mut(c).zip(g.chunks(total)) {
                        add_into(dr, &gr[offset..offset + c]);
                    }
                });
                offset += c;
            }
        }
        Op::SelectTime { x, index } => {
            let shape = nodes[*x].value.shape();
            let (l, c) = (shape[1], shape[2]);
            accumulate(nodes, grads, *x, |d| {
                for (bi, gr) in g.chunks(c).enumerate() {
                    add_into(&mut d[(bi * l + index) * c..(bi * l + index + 1) * c], gr);
                }
            });
        }
        Op::StackTime(parts) => {
            let l = parts.len();
            for (t, &p) in parts.iter().enumerate() {
                let c = nodes[p].value.shape()[1];
                accumulate(nodes, grads, p, |d| {
                    for (bi, dr) in d.chunks_mut(c).enumerate() {
                        add_into(dr, &g[(bi * l + t) * c..(bi * l + t + 1) * c]);
                    }
                });
            }
        }
    }
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        Unary::Silu => x * sigmoid(x),
        Unary::Exp => x.exp(),
        Unary::Square => x * x,
        Unary::Abs => x.abs(),
        Unary::Softplus => {
            if x > 0.0 {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Gelu => {
            let inner = GELU_C * (x + 0.044715 * x * x * x);
            let th = inner.tanh();
            0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        }
        Unary::Silu => {
            let s = sigmoid(x);
            s + x * s * (1.0 - s)
        }
        Unary::Exp => y,
        Unary::Square => 2.0 * x,
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Softplus => sigmoid(x),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(x: &[f64], b: usize, l: usize, c: usize, k: usize, replicate: bool) -> Vec<f64> {
    let half = (k / 2) as isize;
    let mut cols = vec![0.0; b * l * k * c];
    for bi in 0..b {
        for t in 0..l {
            let row = &mut cols[(bi * l + t) * k * c..(bi * l + t + 1) * k * c];
            for j in 0..k {
                let pos = t as isize + j as isize - half;
                if let Some(src) = pad_index(pos, l, replicate) {
                    row[j * c..(j + 1) * c].copy_from_slice(&x[(bi * l + src) * c..(bi * l + src + 1) * c]);
                }
            }
        }
    }
    cols
}

struct AttnDims {
    b: usize,
    lq: usize,
    lk: usize,
    d: usize,
    dh: usize,
    heads: usize,
}

fn attention_dims(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<AttnDims> {
    if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
        return Err(Error::dim("attention", q.shape(), k.shape()));
    }
    let (b, lq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    if k.shape()[2] != d || k.shape()[0] != b {
        return Err(Error::dim("attention (query vs key)", q.shape(), k.shape()));
    }
    if v.shape() != k.shape() {
        return Err(Error::dim("attention (key vs value)", k.shape(), v.shape()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention width {d} is not divisible by {heads} heads"
        )));
    }
    Ok(AttnDims {
        b,
        lq,
        lk: k.shape()[1],
        d,
        dh: d / heads,
        heads,
    })
}

fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, dims: &AttnDims) -> (Vec<f64>, Vec<f64>) {
    let AttnDims {
        b,
        lq,
        lk,
        d,
        dh,
        heads,
    } = *dims;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; b * heads * lq * lk];
    let mut out = vec![0.0; b * lq * d];
    let qm = Mat::strided(lq, dh, d);
    let km = Mat::strided(lk, dh, d);
    let pm = Mat::row_major(lq, lk);
    for bi in 0..b {
        for h in 0..heads {
            let qo = bi * lq * d + h * dh;
            let ko = bi * lk * d + h * dh;
            let po = (bi * heads + h) * lq * lk;
            let p = &mut probs[po..po + lq * lk];
            gemm(scale, &q.data()[qo..], qm, &k.data()[ko..], km.t(), 0.0, p, pm);
            softmax_rows(p, lk);
            gemm(1.0, p, pm, &v.data()[ko..], km, 0.0, &mut out[qo..], qm);
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dims = attention_dims(q, k, v, heads).expect("validated in forward");
    let AttnDims { b, lq, lk, d, dh, .. } = dims;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let qm = Mat::strided(lq, dh, d);
    let km = Mat::strided(lk, dh, d);
    let pm = Mat::row_major(lq, lk);
    let mut dp = vec![0.0; lq * lk];
    let mut ds = vec![0.0; lq * lk];
    for bi in 0..b {
        for h in 0..heads {
            let qo = bi * lq * d + h * dh;
            let ko = bi * lk * d + h * dh;
            let po = (bi * heads + h) * lq * lk;
            let p = &probs[po..po + lq * lk];
            gemm(1.0, &g[qo..], qm, &v.data()[ko..], km.t(), 0.0, &mut dp, pm);
            gemm(1.0, p, pm.t(), &g[qo..], qm, 1.0, &mut gv[ko..], km);
            softmax_rows_backward(p, &dp, &mut ds, lk);
            gemm(scale, &ds, pm, &k.data()[ko..], km, 1.0, &mut gq[qo..], qm);
            gemm(scale, &ds, pm.t(), &q.data()[qo..], qm, 1.0, &mut gk[ko..], km);
        }
    }
    (gq, gk, gv)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.tape.value_of(self.id).data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    /// Accumulated gradient, if a backward pass has reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    fn tracked_with(&self, others: &[Var<'_>]) -> bool {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].tracked || others.iter().any(|o| nodes[o.id].tracked)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables from different tapes"
        );
    }

    fn elementwise(self, other: Var<'t>, name: &'static str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            if a.shape() != b.shape() {
                return Err(Error::dim(name, a.shape(), b.shape()));
            }
            a.zip_map(&b, f)?
        };
        let tracked = self.tracked_with(&[other]);
        Ok(self.tape.push(value, op, tracked))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// `x + bias` with `bias` broadcast over every leading axis.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let value = {
            let x = self.tape.value_of(self.id);
            let b = self.tape.value_of(bias.id);
            let c = *x.shape().last().unwrap_or(&0);
            if b.rank() != 1 || b.len() != c {
                return Err(Error::dim("add_bias", x.shape(), b.shape()));
            }
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(c) {
                add_into(row, b.data());
            }
            out
        };
        let tracked = self.tracked_with(&[bias]);
        Ok(self.tape.push(value, Op::AddBias(self.id, bias.id), tracked))
    }

    /// `x[b, l, c] + e[b, c]`: one offset per batch element, shared over time.
    pub fn add_per_batch(self, e: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&e);
        let value = {
            let x = self.tape.value_of(self.id);
            let ev = self.tape.value_of(e.id);
            if x.rank() != 3 || ev.rank() != 2 || x.shape()[0] != ev.shape()[0] || x.shape()[2] != ev.shape()[1] {
                return Err(Error::dim("add_per_batch", x.shape(), ev.shape()));
            }
            let (l, c) = (x.shape()[1], x.shape()[2]);
            let mut out = x.clone();
            for (bi, chunk) in out.data_mut().chunks_mut(l * c).enumerate() {
                let row = &ev.data()[bi * c..(bi + 1) * c];
                for r in chunk.chunks_mut(c) {
                    add_into(r, row);
                }
            }
            out
        };
        let tracked = self.tracked_with(&[e]);
        Ok(self.tape.push(value, Op::AddPerBatch(self.id, e.id), tracked))
    }

    /// `scale * x + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        let value = self.tape.value_of(self.id).map(|x| scale * x + shift);
        let tracked = self.requires_grad();
        self.tape.push(value, Op::Affine(self.id, scale), tracked)
    }

    pub fn scale(self, scale: f64) -> Var<'t> {
        self.affine(scale, 0.0)
    }

    pub fn unary(self, kind: Unary) -> Var<'t> {
        let value = self.tape.value_of(self.id).map(|x| unary_forward(kind, x));
        let tracked = self.requires_grad();
        self.tape.push(value, Op::Unary(self.id, kind), tracked)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(Unary::Gelu)
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Unary::Silu)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    /// Matrix product `self[.., k] · w[k, n]`. Leading axes of `self` are
    /// flattened into rows, so a rank-3 activation times a weight matrix is a
    /// per-position linear map.
    pub fn matmul(self, w: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&w);
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(w.id);
            if a.rank() < 1 || b.rank() != 2 || a.shape()[a.rank() - 1] != b.shape()[0] {
                return Err(Error::dim("matmul", a.shape(), b.shape()));
            }
            let (k, n) = (b.shape()[0], b.shape()[1]);
            let m = a.len() / k;
            let mut out = vec![0.0; m * n];
            gemm(1.0, a.data(), Mat::row_major(m, k), b.data(), Mat::row_major(k, n), 0.0, &mut out, Mat::row_major(m, n));
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::new(&shape, out)?
        };
        let tracked = self.tracked_with(&[w]);
        Ok(self.tape.push(value, Op::MatMul(self.id, w.id), tracked))
    }

    /// Numerically stable `log softmax` over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let value = {
            let mut v = self.tape.value_of(self.id).clone();
            let c = (*v.shape().last().unwrap_or(&1)).max(1);
            for row in v.data_mut().chunks_mut(c) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            v
        };
        let tracked = self.requires_grad();
        self.tape.push(value, Op::LogSoftmax(self.id), tracked)
    }

    /// Transpose of a matrix.
    pub fn transpose(self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            if a.rank() != 2 {
                return Err(Error::dim("transpose", a.shape(), &[0, 0]));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            Tensor::from_fn(&[c, r], |i| {
                let (j, k) = (i / r, i % r);
                a.data()[k * c + j]
            })
        };
        let tracked = self.requires_grad();
        Ok(self.tape.push(value, Op::Transpose(self.id), tracked))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let value = {
            let mut v = self.tape.value_of(self.id).clone();
            let c = *v.shape().last().unwrap_or(&1);
            softmax_rows(v.data_mut(), c);
            v
        };
        let tracked = self.requires_grad();
        self.tape.push(value, Op::Softmax(self.id), tracked)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (value, mean, rstd) = {
            let x = self.tape.value_of(self.id);
            let gm = self.tape.value_of(gain.id);
            let bt = self.tape.value_of(bias.id);
            let c = *x.shape().last().unwrap_or(&0);
            if gm.len() != c || bt.len() != c {
                return Err(Error::dim("layer_norm", x.shape(), gm.shape()));
            }
            let rows = x.len() / c;
            let mut out = vec![0.0; x.len()];
            let mut mean = Vec::with_capacity(rows);
            let mut rstd = Vec::with_capacity(rows);
            for (xr, or) in x.data().chunks(c).zip(out.chunks_mut(c)) {
                let mu = xr.iter().sum::<f64>() / c as f64;
                let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..c {
                    or[j] = (xr[j] - mu) * rs * gm.data()[j] + bt.data()[j];
                }
                mean.push(mu);
                rstd.push(rs);
            }
            (Tensor::new(x.shape(), out)?, mean, rstd)
        };
        let tracked = self.tracked_with(&[gain, bias]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                mean,
                rstd,
            },
            tracked,
        ))
    }

    /// Same-length cross-correlation of `x[B, L, C]` with `kernel[k, C, C']`.
    pub fn conv1d(self, kernel: Var<'t>, padding: Padding) -> Result<Var<'t>> {
        self.same_tape(&kernel);
        let value = {
            let x = self.tape.value_of(self.id);
            let kv = self.tape.value_of(kernel.id);
            if x.rank() != 3 || kv.rank() != 3 || kv.shape()[1] != x.shape()[2] {
                return Err(Error::dim("conv1d", x.shape(), kv.shape()));
            }
            let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (k, co) = (kv.shape()[0], kv.shape()[2]);
            if k % 2 == 0 {
                return Err(Error::Config(format!("conv1d kernel width {k} must be odd")));
            }
            let cols = im2col(x.data(), b, l, c, k, padding == Padding::Replicate);
            let mut out = vec![0.0; b * l * co];
            gemm(1.0, &cols, Mat::row_major(b * l, k * c), kv.data(), Mat::row_major(k * c, co), 0.0, &mut out, Mat::row_major(b * l, co));
            Tensor::new(&[b, l, co], out)?
        };
        let tracked = self.tracked_with(&[kernel]);
        Ok(self.tape.push(
            value,
            Op::Conv1d {
                x: self.id,
                kernel: kernel.id,
                padding,
            },
            tracked,
        ))
    }

    /// Same-length moving average along time with replicate padding.
    pub fn moving_average(self, window: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            moving_average(&x, window)?
        };
        let tracked = self.requires_grad();
        Ok(self.tape.push(value, Op::MovingAverage { x: self.id, window }, tracked))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `self` is the query `[B, Lq, d]`; `key` and `value` are `[B, Lk, d]`.
    /// The width `d` is split into `heads` contiguous slices.
    pub fn attention(self, key: Var<'t>, value: Var<'t>, heads: usize) -> Result<Var<'t>> {
        self.same_tape(&key);
        self.same_tape(&value);
        let (out, probs) = {
            let q = self.tape.value_of(self.id);
            let k = self.tape.value_of(key.id);
            let v = self.tape.value_of(value.id);
            let dims = attention_dims(&q, &k, &v, heads)?;
            let (out, probs) = attention_forward(&q, &k, &v, &dims);
            (Tensor::new(q.shape(), out)?, probs)
        };
        let tracked = self.tracked_with(&[key, value]);
        Ok(self.tape.push(
            out,
            Op::Attention {
                q: self.id,
                k: key.id,
                v: value.id,
                heads,
                probs,
            },
            tracked,
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.tape.value_of(self.id).sum());
        let tracked = self.requires_grad();
        self.tape.push(value, Op::Sum(self.id), tracked)
    }

    pub fn mean(self) -> Var<'t> {
        let value = Tensor::scalar(self.tape.value_of(self.id).mean());
        let tracked = self.requires_grad();
        self.tape.push(value, Op::Mean(self.id), tracked)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.value_of(self.id).clone().reshape(shape)?;
        let tracked = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape(self.id), tracked))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            let c = *x.shape().last().unwrap_or(&0);
            if start + len > c || len == 0 {
                return Err(Error::dim("slice_last", x.shape(), &[start, len]));
            }
            let mut data = Vec::with_capacity(x.len() / c * len);
            for row in x.data().chunks(c) {
                data.extend_from_slice(&row[start..start + len]);
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::new(&shape, data)?
        };
        let tracked = self.requires_grad();
        Ok(self.tape.push(value, Op::SliceLast { x: self.id, start }, tracked))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero variables".into()))?;
        let tape = first.tape;
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value_of(p.id)).collect();
            let lead = &vals[0].shape()[..vals[0].rank() - 1];
            for v in &vals {
                if &v.shape()[..v.rank() - 1] != lead {
                    return Err(Error::dim("concat_last", vals[0].shape(), v.shape()));
                }
            }
            let widths: Vec<usize> = vals.iter().map(|v| *v.shape().last().unwrap()).collect();
            let total: usize = widths.iter().sum();
            let rows = vals[0].len() / widths[0];
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (v, &w) in vals.iter().zip(&widths) {
                    data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::new(&shape, data)?
        };
        let tracked = first.tracked_with(parts);
        Ok(tape.push(value, Op::ConcatLast(parts.iter().map(|p| p.id).collect()), tracked))
    }

    /// Time slice `x[:, index, :]` of a `[B, L, C]` variable.
    pub fn select_time(self, index: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            if x.rank() != 3 || index >= x.shape()[1] {
                return Err(Error::dim("select_time", x.shape(), &[index]));
            }
            let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut data = Vec::with_capacity(b * c);
            for bi in 0..b {
                data.extend_from_slice(&x.data()[(bi * l + index) * c..(bi * l + index + 1) * c]);
            }
            Tensor::new(&[b, c], data)?
        };
        let tracked = self.requires_grad();
        Ok(self.tape.push(value, Op::SelectTime { x: self.id, index }, tracked))
    }

    /// Stacks `L` variables of shape `[B, C]` into `[B, L, C]`.
    pub fn stack_time(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("stack of zero variables".into()))?;
        let tape = first.tape;
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value_of(p.id)).collect();
            let shape0 = vals[0].shape().to_vec();
            if shape0.len() != 2 {
                return Err(Error::dim("stack_time", &shape0, &[]));
            }
            for v in &vals {
                if v.shape() != shape0.as_slice() {
                    return Err(Error::dim("stack_time", &shape0, v.shape()));
                }
            }
            let (b, c, l) = (shape0[0], shape0[1], vals.len());
            let mut data = vec![0.0; b * l * c];
            for (t, v) in vals.iter().enumerate() {
                for bi in 0..b {
                    data[(bi * l + t) * c..(bi * l + t + 1) * c]
                        .copy_from_slice(&v.data()[bi * c..(bi + 1) * c]);
                }
            }
            Tensor::new(&[b, l, c], data)?
        };
        let tracked = first.tracked_with(parts);
        Ok(tape.push(value, Op::StackTime(parts.iter().map(|p| p.id).collect()), tracked))
    }
}

/// Same-length moving average along axis 1 of a `[B, L, C]` tensor with
/// replicate padding of `(window - 1) / 2` steps on each side.
pub fn moving_average(x: &Tensor, window: usize) -> Result<Tensor> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!(
            "moving-average window {window} must be odd and positive"
        )));
    }
    if x.rank() != 3 {
        return Err(Error::dim("moving_average", x.shape(), &[window]));
    }
    let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if window > 2 * l - 1 {
        return Err(Error::Config(format!(
            "moving-average window {window} exceeds 2L-1 for L={l}"
        )));
    }
    let half = (window / 2) as isize;
    let w = 1.0 / window as f64;
    let mut out = vec![0.0; x.len()];
    let xd = x.data();
    // centre + mean deviation: algebraically the plain average, and exact
    // on constant stretches
    for bi in 0..b {
        for t in 0..l {
            let centre = &xd[(bi * l + t) * c..(bi * l + t + 1) * c];
            let or = &mut out[(bi * l + t) * c..(bi * l + t + 1) * c];
            for j in -half..=half {
                let src = (t as isize + j).clamp(0, l as isize - 1) as usize;
                let row = &xd[(bi * l + src) * c..(bi * l + src + 1) * c];
                for ((o, &v), &m) in or.iter_mut().zip(row).zip(centre) {
                    *o += v - m;
                }
            }
            for (o, &m) in or.iter_mut().zip(centre) {
                *o = m + *o * w;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(id.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let proj = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let m = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        assert_eq!(proj.matmul(m).unwrap().value().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn conv1d_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 3, 1], &[1.0, 2.0, 3.0]));
        let id = tape.constant(t(&[1, 1, 1], &[1.0]));
        assert_eq!(x.conv1d(id, Padding::Replicate).unwrap().value().data(), &[1.0, 2.0, 3.0]);
        let avg = tape.constant(t(&[3, 1, 1], &[1.0 / 3.0; 3]));
        let out = x.conv1d(avg, Padding::Replicate).unwrap().value();
        assert!(close(out.data(), &[4.0 / 3.0, 2.0, 8.0 / 3.0], 1e-12));
        let out = x.conv1d(avg, Padding::Zero).unwrap().value();
        assert!(close(out.data(), &[1.0, 2.0, 5.0 / 3.0], 1e-12));
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 1]));
        let k = tape.constant(Tensor::zeros(&[2, 1, 1]));
        assert!(matches!(x.conv1d(k, Padding::Zero), Err(Error::Config(_))));
    }

    #[test]
    fn attention_single_key_returns_value() {
        let tape = Tape::new();
        let q = tape.constant(t(&[1, 2, 2], &[3.0, -1.0, 0.5, 7.0]));
        let k = tape.constant(t(&[1, 1, 2], &[0.2, 0.9]));
        let v = tape.constant(t(&[1, 1, 2], &[4.0, -2.0]));
        let out = q.attention(k, v, 1).unwrap().value();
        assert!(close(out.data(), &[4.0, -2.0, 4.0, -2.0], 1e-12));
    }

    #[test]
    fn attention_uniform_over_identical_values() {
        let tape = Tape::new();
        let q = tape.constant(t(&[1, 1, 2], &[1.0, 0.0]));
        let k = tape.constant(t(&[1, 2, 2], &[0.0, 1.0, 0.0, -1.0]));
        let v = tape.constant(t(&[1, 2, 2], &[2.5, 3.5, 2.5, 3.5]));
        let out = q.attention(k, v, 1).unwrap().value();
        assert!(close(out.data(), &[2.5, 3.5], 1e-12));
    }

    #[test]
    fn attention_head_mismatch_is_dimension_error() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[1, 2, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 2, 6]));
        assert!(matches!(q.attention(k, k, 2), Err(Error::Dimension { .. })));
    }

    #[test]
    fn moving_average_examples() {
        let x = t(&[1, 5, 1], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let out = moving_average(&x, 3).unwrap();
        assert!(close(out.data(), &[4.0 / 3.0, 2.0, 3.0, 4.0, 14.0 / 3.0], 1e-12));
        assert_eq!(moving_average(&x, 1).unwrap(), x);
        let c = Tensor::full(&[2, 6, 3], 0.37);
        for w in [1, 3, 5, 7, 11] {
            assert!(moving_average(&c, w).unwrap().data().iter().all(|&v| v == 0.37));
        }
        assert!(matches!(moving_average(&x, 4), Err(Error::Config(_))));
        assert!(matches!(moving_average(&x, 11), Err(Error::Config(_))));
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        tape.backward(x.square()).unwrap();
        assert_eq!(x.grad().unwrap().item(), 6.0);

        let tape = Tape::new();
        let x = tape.param(Tensor::full(&[2, 2], 0.3));
        tape.backward(x.sum()).unwrap();
        assert_eq!(x.grad().unwrap(), Tensor::ones(&[2, 2]));
    }

    #[test]
    fn backward_accumulates_and_sums_fan_out() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        // x consumed three times: d(x*x + x)/dx = 2x + 1
        let y = x.mul(x).unwrap().add(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().item(), 5.0);
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().item(), 10.0);
        tape.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_are_not_recorded_for_gradients() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::ones(&[3]));
        let y = c.scale(2.0).sum();
        assert!(!y.requires_grad());
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[-50.0, 0.0, 50.0, 1.0, 1.0, 1.0]));
        let y = x.softmax().value();
        for row in y.data().chunks(3) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

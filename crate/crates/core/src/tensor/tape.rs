use std::cell::RefCell;

use super::kernels::{dot, matmul_a_bt, matmul_at_b, matmul_into};
use super::Tensor;
use crate::error::{Error, Result};

/// Dynamic computation tape. One per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

enum Bcast {
    Same,
    /// `b` repeats over the leading dimensions of `a`.
    Tail,
    General {
        ai: Vec<usize>,
        bi: Vec<usize>,
    },
}

#[derive(Clone, Copy)]
enum Unary {
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Elu,
    Exp,
    Log,
    Tanh,
    Abs,
    Neg,
    Square,
    Recip,
    Clamp(f64, f64),
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cout: usize,
}

enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        map: Bcast,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Unary {
        a: usize,
        kind: Unary,
    },
    Scale {
        a: usize,
        c: f64,
    },
    AddScalar {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
        inner: usize,
    },
    Slice {
        a: usize,
        outer: usize,
        inner: usize,
        in_len: usize,
        start: usize,
        len: usize,
    },
    GatherRows {
        a: usize,
        idx: Vec<usize>,
        cols: usize,
    },
    Reshape {
        a: usize,
    },
    Softmax {
        a: usize,
        len: usize,
    },
    LayerNorm {
        a: usize,
        len: usize,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    DeformSample {
        levels: Vec<(usize, usize, usize)>,
        loc: usize,
        weights: usize,
        n: usize,
        k: usize,
        c: usize,
    },
    PairDiff {
        a: usize,
        n: usize,
        h: usize,
    },
    PairAggregate {
        alpha: usize,
        r: usize,
        n: usize,
        h: usize,
    },
    EdgeAttention {
        z: usize,
        fs: usize,
        fd: usize,
        bias: Option<usize>,
        nbrs: Vec<Vec<usize>>,
        coeffs: Vec<Vec<f64>>,
        pre: Vec<Vec<f64>>,
        slope: f64,
        d: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Transpose { a, .. }
            | Op::Unary { a, .. }
            | Op::Scale { a, .. }
            | Op::AddScalar { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::Slice { a, .. }
            | Op::GatherRows { a, .. }
            | Op::Reshape { a }
            | Op::Softmax { a, .. }
            | Op::LayerNorm { a, .. }
            | Op::PairDiff { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.iter().map(|p| p.0).collect(),
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::DeformSample {
                levels, loc, weights, ..
            } => {
                let mut v: Vec<usize> = levels.iter().map(|l| l.0).collect();
                v.push(*loc);
                v.push(*weights);
                v
            }
            Op::PairAggregate { alpha, r, .. } => vec![*alpha, *r],
            Op::EdgeAttention { z, fs, fd, bias, .. } => {
                let mut v = vec![*z, *fs, *fd];
                v.extend(bias);
                v
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_leaf(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Registers a tensor as a leaf; it receives a gradient iff `requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Trainable leaf.
    pub fn param(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        check_len(shape, &data)?;
        Ok(self.push_leaf(shape.to_vec(), data, true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        check_len(shape, &data)?;
        Ok(self.push_leaf(shape.to_vec(), data, false))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push_leaf(vec![1], vec![v], false)
    }

    /// Reverse-mode sweep from a single-element `root`.
    ///
    /// Gradients from all paths are summed into every node that requires one;
    /// previous gradients on this tape are discarded.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let rn = &nodes[root.id];
        if rn.value.len() != 1 {
            return Err(Error::shape("backward root", &rn.shape, &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, &mut grads, id, &g);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn check_len(shape: &[usize], data: &[f64]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::shape("leaf", shape, &[data.len()]));
    }
    Ok(())
}

fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let node = &nodes[id];
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, map } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let blen = bv.len();
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                match (kind, map) {
                    (BinKind::Mul, Bcast::Same) => ga.iter_mut().zip(g).zip(bv).for_each(|((o, g), b)| *o += g * b),
                    (BinKind::Mul, Bcast::Tail) => {
                        for (i, (o, gv)) in ga.iter_mut().zip(g).enumerate() {
                            *o += gv * bv[i % blen];
                        }
                    }
                    (BinKind::Mul, Bcast::General { ai, bi }) => {
                        for (o, gv) in g.iter().enumerate() {
                            ga[ai[o]] += gv * bv[bi[o]];
                        }
                    }
                    (_, Bcast::General { ai, .. }) => {
                        for (o, gv) in g.iter().enumerate() {
                            ga[ai[o]] += gv;
                        }
                    }
                    _ => ga.iter_mut().zip(g).for_each(|(o, g)| *o += g),
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, *b) {
                let sign = if matches!(kind, BinKind::Sub) { -1.0 } else { 1.0 };
                match (kind, map) {
                    (BinKind::Mul, Bcast::Same) => gb.iter_mut().zip(g).zip(av).for_each(|((o, g), a)| *o += g * a),
                    (BinKind::Mul, Bcast::Tail) => {
                        for (i, (gv, a)) in g.iter().zip(av).enumerate() {
                            gb[i % blen] += gv * a;
                        }
                    }
                    (BinKind::Mul, Bcast::General { ai, bi }) => {
                        for (o, gv) in g.iter().enumerate() {
                            gb[bi[o]] += gv * av[ai[o]];
                        }
                    }
                    (_, Bcast::Same) => gb.iter_mut().zip(g).for_each(|(o, g)| *o += sign * g),
                    (_, Bcast::Tail) => {
                        for (i, gv) in g.iter().enumerate() {
                            gb[i % blen] += sign * gv;
                        }
                    }
                    (_, Bcast::General { bi, .. }) => {
                        for (o, gv) in g.iter().enumerate() {
                            gb[bi[o]] += sign * gv;
                        }
                    }
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                matmul_a_bt(g, bv, ga, *m, *k, *n);
            }
            if let Some(gb) = grad_buf(grads, nodes, *b) {
                matmul_at_b(av, g, gb, *m, *k, *n);
            }
        }
        Op::Transpose { a, rows, cols } => {
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                for r in 0..*rows {
                    for c in 0..*cols {
                        ga[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        Op::Unary { a, kind } => {
            let x = &nodes[*a].value;
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                for i in 0..g.len() {
                    let d = match *kind {
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Relu => f64::from(u8::from(x[i] > 0.0)),
                        Unary::LeakyRelu(s) => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                s
                            }
                        }
                        Unary::Elu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                y[i] + 1.0
                            }
                        }
                        Unary::Exp => y[i],
                        Unary::Log => 1.0 / x[i],
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Abs => {
                            if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Neg => -1.0,
                        Unary::Square => 2.0 * x[i],
                        Unary::Recip => -y[i] * y[i],
                        Unary::Clamp(lo, hi) => f64::from(u8::from(x[i] >= lo && x[i] <= hi)),
                    };
                    ga[i] += g[i] * d;
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(o, g)| *o += c * g);
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(o, g)| *o += g);
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Mean { a } => {
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|o| *o += s);
            }
        }
        Op::Concat { parts, outer, inner } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(pid, len) in parts {
                if let Some(gp) = grad_buf(grads, nodes, pid) {
                    let w = len * inner;
                    for o in 0..*outer {
                        let src = &g[o * total * inner + offset * inner..][..w];
                        gp[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                offset += len;
            }
        }
        Op::Slice {
            a,
            outer,
            inner,
            in_len,
            start,
            len,
        } => {
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                let w = len * inner;
                for o in 0..*outer {
                    let dst = &mut ga[(o * in_len + start) * inner..][..w];
                    dst.iter_mut().zip(&g[o * w..(o + 1) * w]).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::GatherRows { a, idx, cols } => {
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..*cols {
                        ga[src * cols + c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::Softmax { a, len } => {
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                for row in 0..y.len() / len {
                    let ys = &y[row * len..(row + 1) * len];
                    let gs = &g[row * len..(row + 1) * len];
                    let s = dot(ys, gs);
                    for j in 0..*len {
                        ga[row * len + j] += ys[j] * (gs[j] - s);
                    }
                }
            }
        }
        Op::LayerNorm { a, len, rstd } => {
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                let nf = *len as f64;
                for row in 0..y.len() / len {
                    let ys = &y[row * len..(row + 1) * len];
                    let gs = &g[row * len..(row + 1) * len];
                    let gm = gs.iter().sum::<f64>() / nf;
                    let gy = dot(gs, ys) / nf;
                    for j in 0..*len {
                        ga[row * len + j] += rstd[row] * (gs[j] - gm - ys[j] * gy);
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let patch = geom.k * geom.k * geom.cin;
            let rows = geom.ho * geom.wo;
            if let Some(gw) = grad_buf(grads, nodes, *w) {
                matmul_at_b(cols, g, gw, rows, patch, geom.cout);
            }
            if let Some(gb) = grad_buf(grads, nodes, *b) {
                for r in 0..rows {
                    gb.iter_mut()
                        .zip(&g[r * geom.cout..(r + 1) * geom.cout])
                        .for_each(|(o, g)| *o += g);
                }
            }
            let wv = &nodes[*w].value;
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                let mut dcols = vec![0.0; rows * patch];
                matmul_a_bt(g, wv, &mut dcols, rows, patch, geom.cout);
                col2im(&dcols, gx, geom);
            }
        }
        Op::DeformSample {
            levels,
            loc,
            weights,
            n,
            k,
            c,
        } => deform_backward(nodes, grads, g, levels, *loc, *weights, *n, *k, *c),
        Op::PairDiff { a, n, h } => {
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                for i in 0..*n {
                    for j in 0..*n {
                        let gr = &g[(i * n + j) * h..][..*h];
                        for t in 0..*h {
                            ga[i * h + t] += gr[t];
                            ga[j * h + t] -= gr[t];
                        }
                    }
                }
            }
        }
        Op::PairAggregate { alpha, r, n, h } => {
            let (alv, rv) = (&nodes[*alpha].value, &nodes[*r].value);
            if let Some(gal) = grad_buf(grads, nodes, *alpha) {
                for i in 0..*n {
                    let gi = &g[i * h..(i + 1) * h];
                    for j in 0..*n {
                        gal[i * n + j] += dot(gi, &rv[(i * n + j) * h..][..*h]);
                    }
                }
            }
            if let Some(gr) = grad_buf(grads, nodes, *r) {
                for i in 0..*n {
                    let gi = &g[i * h..(i + 1) * h];
                    for j in 0..*n {
                        let a = alv[i * n + j];
                        let dst = &mut gr[(i * n + j) * h..][..*h];
                        dst.iter_mut().zip(gi).for_each(|(o, g)| *o += a * g);
                    }
                }
            }
        }
        Op::EdgeAttention {
            z,
            fs,
            fd,
            bias,
            nbrs,
            coeffs,
            pre,
            slope,
            d,
        } => {
            let zv = &nodes[*z].value;
            let n = nbrs.len();
            let mut dpre: Vec<Vec<f64>> = Vec::with_capacity(n);
            let mut dlogit: Vec<Vec<f64>> = Vec::with_capacity(n);
            for (i, nb) in nbrs.iter().enumerate() {
                let gi = &g[i * d..(i + 1) * d];
                let dal: Vec<f64> = nb.iter().map(|&j| dot(gi, &zv[j * d..(j + 1) * d])).collect();
                let s: f64 = dal.iter().zip(&coeffs[i]).map(|(a, b)| a * b).sum();
                let de: Vec<f64> = (0..nb.len()).map(|t| coeffs[i][t] * (dal[t] - s)).collect();
                dpre.push(
                    de.iter()
                        .zip(&pre[i])
                        .map(|(de, &p)| de * if p > 0.0 { 1.0 } else { *slope })
                        .collect(),
                );
                dlogit.push(de);
            }
            if let Some(gb) = bias.and_then(|b| grad_buf(grads, nodes, b)) {
                for (i, nb) in nbrs.iter().enumerate() {
                    for (t, &j) in nb.iter().enumerate() {
                        gb[i * n + j] += dlogit[i][t];
                    }
                }
            }
            if let Some(gz) = grad_buf(grads, nodes, *z) {
                for (i, nb) in nbrs.iter().enumerate() {
                    let gi = &g[i * d..(i + 1) * d];
                    for (t, &j) in nb.iter().enumerate() {
                        let a = coeffs[i][t];
                        gz[j * d..(j + 1) * d].iter_mut().zip(gi).for_each(|(o, g)| *o += a * g);
                    }
                }
            }
            if let Some(gs) = grad_buf(grads, nodes, *fs) {
                for (i, dp) in dpre.iter().enumerate() {
                    gs[i] += dp.iter().sum::<f64>();
                }
            }
            if let Some(gd) = grad_buf(grads, nodes, *fd) {
                for (i, nb) in nbrs.iter().enumerate() {
                    for (t, &j) in nb.iter().enumerate() {
                        gd[j] += dpre[i][t];
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Var: accessors

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    /// First element; intended for single-element results.
    pub fn scalar(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient from the last [`Tape::backward`]; `None` if the node was not
    /// reached or does not require a gradient.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grads.borrow().get(self.id).and_then(|g| g.clone())
    }

    /// Value (and gradient, when available) as a standalone tensor.
    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let mut t = Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape consistent");
        if n.requires_grad {
            t = t.with_grad();
            let grad = self
                .tape
                .grads
                .borrow()
                .get(self.id)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; n.value.len()]);
            t.set_grad(grad);
        }
        t
    }

    /// Edge-attention coefficients saved by [`edge_attention`], one probability
    /// vector per node in neighbor-list order.
    pub fn edge_coefficients(&self) -> Option<Vec<Vec<f64>>> {
        match &self.tape.nodes.borrow()[self.id].op {
            Op::EdgeAttention { coeffs, .. } => Some(coeffs.clone()),
            _ => None,
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape();
        match s.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::shape(op, &s, &[0, 0])),
        }
    }
}

// ---------------------------------------------------------------------------
// Var: operations

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_index(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n = out.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, n - src.len())
        .chain(src.iter().copied())
        .collect();
    let mut strides = vec![0; n];
    let mut s = 1;
    for i in (0..n).rev() {
        strides[i] = if padded[i] == 1 { 0 } else { s };
        s *= padded[i];
    }
    let total: usize = out.iter().product();
    let mut idx = vec![0; total];
    let mut counter = vec![0; n];
    for slot in idx.iter_mut() {
        *slot = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
        for d in (0..n).rev() {
            counter[d] += 1;
            if counter[d] < out[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    idx
}

// Arithmetic is fallible (shape checks), so the std operator traits don't fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, kind: BinKind, op: &'static str) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let (shape, value, map) = {
            let nodes = self.tape.nodes.borrow();
            let (av, bv) = (&nodes[self.id].value, &nodes[other.id].value);
            if sa == sb {
                let v: Vec<f64> = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
                (sa, v, Bcast::Same)
            } else if sb.len() <= sa.len() && sa.ends_with(&sb) {
                let bl = bv.len();
                let v: Vec<f64> = av.iter().enumerate().map(|(i, &x)| f(x, bv[i % bl])).collect();
                (sa, v, Bcast::Tail)
            } else {
                let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(op, &sa, &sb))?;
                let ai = broadcast_index(&out, &sa);
                let bi = broadcast_index(&out, &sb);
                let v: Vec<f64> = ai.iter().zip(&bi).map(|(&i, &j)| f(av[i], bv[j])).collect();
                (out, v, Bcast::General { ai, bi })
            }
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                map,
            },
        ))
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes.borrow();
            matmul_into(&nodes[self.id].value, &nodes[other.id].value, &mut out, m, k, n);
        }
        Ok(self.tape.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        ))
    }

    /// 2D transpose.
    pub fn t(self) -> Result<Var<'t>> {
        let (rows, cols) = self.dims2("transpose")?;
        let v = self.with_value(|x| {
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
            out
        });
        Ok(self
            .tape
            .push(vec![cols, rows], v, Op::Transpose { a: self.id, rows, cols }))
    }

    fn unary(self, kind: Unary) -> Var<'t> {
        let v: Vec<f64> = self.with_value(|x| {
            x.iter()
                .map(|&x| match kind {
                    Unary::Sigmoid => sigmoid(x),
                    Unary::Relu => x.max(0.0),
                    Unary::LeakyRelu(s) => {
                        if x > 0.0 {
                            x
                        } else {
                            s * x
                        }
                    }
                    Unary::Elu => {
                        if x > 0.0 {
                            x
                        } else {
                            x.exp_m1()
                        }
                    }
                    Unary::Exp => x.exp(),
                    Unary::Log => x.ln(),
                    Unary::Tanh => x.tanh(),
                    Unary::Abs => x.abs(),
                    Unary::Neg => -x,
                    Unary::Square => x * x,
                    Unary::Recip => 1.0 / x,
                    Unary::Clamp(lo, hi) => x.clamp(lo, hi),
                })
                .collect()
        });
        self.tape.push(self.shape(), v, Op::Unary { a: self.id, kind })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }
    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }
    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(Unary::LeakyRelu(slope))
    }
    /// ELU with unit scale.
    pub fn elu(self) -> Var<'t> {
        self.unary(Unary::Elu)
    }
    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }
    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Log)
    }
    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }
    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }
    pub fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }
    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    /// Elementwise `1 / x`.
    pub fn recip(self) -> Var<'t> {
        self.unary(Unary::Recip)
    }

    /// Elementwise quotient, broadcasting like [`Var::mul`].
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.mul(other.recip())
    }
    /// Clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Unary::Clamp(lo, hi))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.with_value(|x| x.iter().map(|v| v * c).collect());
        self.tape.push(self.shape(), v, Op::Scale { a: self.id, c })
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.with_value(|x| x.iter().map(|v| v + c).collect());
        self.tape.push(self.shape(), v, Op::AddScalar { a: self.id })
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.with_value(|x| x.iter().sum());
        self.tape.push(vec![1], vec![s], Op::Sum { a: self.id })
    }

    pub fn mean(self) -> Var<'t> {
        let s = self.with_value(|x| x.iter().sum::<f64>() / x.len().max(1) as f64);
        self.tape.push(vec![1], vec![s], Op::Mean { a: self.id })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let old = self.shape();
        if old.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::shape("reshape", &old, shape));
        }
        Ok(self.tape.push(shape.to_vec(), self.value(), Op::Reshape { a: self.id }))
    }

    /// Sub-range `start..start+len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, len]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let in_len = s[axis];
        let v = self.with_value(|x| {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                out.extend_from_slice(&x[(o * in_len + start) * inner..][..len * inner]);
            }
            out
        });
        let mut shape = s;
        shape[axis] = len;
        Ok(self.tape.push(
            shape,
            v,
            Op::Slice {
                a: self.id,
                outer,
                inner,
                in_len,
                start,
                len,
            },
        ))
    }

    /// Rows of a 2D tensor, in `idx` order (repeats allowed).
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let (rows, cols) = self.dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", &[rows, cols], &[bad]));
        }
        let v = self.with_value(|x| {
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &r in idx {
                out.extend_from_slice(&x[r * cols..(r + 1) * cols]);
            }
            out
        });
        Ok(self.tape.push(
            vec![idx.len(), cols],
            v,
            Op::GatherRows {
                a: self.id,
                idx: idx.to_vec(),
                cols,
            },
        ))
    }

    /// Stable softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let s = self.shape();
        let len = *s.last().unwrap_or(&0);
        if len == 0 {
            return Err(Error::Empty("softmax"));
        }
        let v = self.with_value(|x| {
            let mut out = vec![0.0; x.len()];
            for (xs, os) in x.chunks(len).zip(out.chunks_mut(len)) {
                let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (o, &v) in os.iter_mut().zip(xs) {
                    *o = (v - m).exp();
                    z += *o;
                }
                os.iter_mut().for_each(|o| *o /= z);
            }
            out
        });
        Ok(self.tape.push(s, v, Op::Softmax { a: self.id, len }))
    }

    /// Normalizes each last-axis lane to zero mean and unit variance.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let s = self.shape();
        let len = *s.last().unwrap_or(&0);
        if len == 0 {
            return Err(Error::Empty("layer_norm"));
        }
        let (v, rstd) = self.with_value(|x| {
            let mut out = vec![0.0; x.len()];
            let mut rstd = Vec::with_capacity(x.len() / len);
            for (xs, os) in x.chunks(len).zip(out.chunks_mut(len)) {
                let mu = xs.iter().sum::<f64>() / len as f64;
                let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / len as f64;
                let r = 1.0 / (var + eps).sqrt();
                for (o, &v) in os.iter_mut().zip(xs) {
                    *o = (v - mu) * r;
                }
                rstd.push(r);
            }
            (out, rstd)
        });
        Ok(self.tape.push(s, v, Op::LayerNorm { a: self.id, len, rstd }))
    }

    /// 2D convolution of an `[H, W, C_in]` map with a square kernel.
    ///
    /// `weight` is `[k·k·C_in, C_out]` (patch-major: row, column, channel),
    /// `bias` is `[C_out]`; out-of-bounds taps read zero.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, k: usize, stride: usize, pad: usize) -> Result<Var<'t>> {
        let s = self.shape();
        let [h, w, cin] = s[..] else {
            return Err(Error::shape("conv2d input", &s, &[0, 0, 0]));
        };
        let (patch, cout) = weight.dims2("conv2d weight")?;
        if patch != k * k * cin || bias.numel() != cout || stride == 0 {
            return Err(Error::shape("conv2d", &s, &weight.shape()));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("conv2d kernel", &s, &[k, k]));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            h,
            w,
            cin,
            k,
            stride,
            pad,
            ho,
            wo,
            cout,
        };
        let cols = self.with_value(|x| im2col(x, &geom));
        let mut out = vec![0.0; ho * wo * cout];
        {
            let nodes = self.tape.nodes.borrow();
            let bv = &nodes[bias.id].value;
            for r in 0..ho * wo {
                out[r * cout..(r + 1) * cout].copy_from_slice(bv);
            }
            matmul_into(&cols, &nodes[weight.id].value, &mut out, ho * wo, patch, cout);
        }
        Ok(self.tape.push(
            vec![ho, wo, cout],
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
                cols,
            },
        ))
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(self) -> Var<'t> {
        self.tape.push_leaf(self.shape(), self.value(), false)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.k * g.k * g.cin;
    let mut cols = vec![0.0; g.ho * g.wo * patch];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    row[(ky * g.k + kx) * g.cin..][..g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], gx: &mut [f64], g: &ConvGeom) {
    let patch = g.k * g.k * g.cin;
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &dcols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = &row[(ky * g.k + kx) * g.cin..][..g.cin];
                    gx[dst..dst + g.cin].iter_mut().zip(src).for_each(|(o, s)| *o += s);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Multi-input operations

/// Concatenation along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts.first().ok_or(Error::Empty("concat"))?;
    let tape = first.tape;
    let s0 = first.shape();
    if axis >= s0.len() {
        return Err(Error::shape("concat axis", &s0, &[axis]));
    }
    let mut lens = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        let compatible = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", &s0, &s));
        }
        lens.push((p.id, s[axis]));
    }
    let outer: usize = s0[..axis].iter().product();
    let inner: usize = s0[axis + 1..].iter().product();
    let total: usize = lens.iter().map(|l| l.1).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    {
        let nodes = tape.nodes.borrow();
        for o in 0..outer {
            for &(id, len) in &lens {
                out.extend_from_slice(&nodes[id].value[o * len * inner..][..len * inner]);
            }
        }
    }
    let mut shape = s0;
    shape[axis] = total;
    Ok(tape.push(
        shape,
        out,
        Op::Concat {
            parts: lens,
            outer,
            inner,
        },
    ))
}

/// Bilinear value and spatial derivative of one `[H, W, C]` map at a
/// normalized point. Points outside `[0,1]²` read zero; inside, taps that fall
/// off the grid read zero.
fn bilinear_tap(h: usize, w: usize, c: usize, x: f64, y: f64, mut visit: impl FnMut(usize, f64, f64, f64)) {
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return;
    }
    let u = x * w as f64 - 0.5;
    let v = y * h as f64 - 0.5;
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    // (dx, dy, weight, d weight/du, d weight/dv)
    let taps = [
        (0, 0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (1, 0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (0, 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (1, 1, fx * fy, fy, fx),
    ];
    for (dx, dy, wt, dwu, dwv) in taps {
        let (cx, cy) = (x0 + dx, y0 + dy);
        if cx < 0 || cy < 0 || cx >= w as isize || cy >= h as isize {
            continue;
        }
        let base = (cy as usize * w + cx as usize) * c;
        visit(base, wt, dwu * w as f64, dwv * h as f64);
    }
}

/// Multi-level deformable sampling.
///
/// `levels`: feature maps `[H_l, W_l, C]`; `loc`: `[N, K, 2]` normalized (x, y)
/// sampling locations; `weights`: `[N, K]`. Output `[N, C]`:
/// `out_n = (1/L) Σ_l Σ_k weights_nk · bilinear_l(loc_nk)`.
pub fn deform_sample<'t>(levels: &[Var<'t>], loc: Var<'t>, weights: Var<'t>) -> Result<Var<'t>> {
    let first = levels.first().ok_or(Error::Empty("deform_sample levels"))?;
    let tape = first.tape;
    let c = *first.shape().last().unwrap_or(&0);
    let mut lv = Vec::with_capacity(levels.len());
    for l in levels {
        let s = l.shape();
        match s[..] {
            [h, w, cc] if cc == c && h > 0 && w > 0 => lv.push((l.id, h, w)),
            _ => return Err(Error::shape("deform_sample level", &first.shape(), &s)),
        }
    }
    let ls = loc.shape();
    let [n, k, 2] = ls[..] else {
        return Err(Error::shape("deform_sample locations", &ls, &[0, 0, 2]));
    };
    let ws = weights.shape();
    if ws != [n, k] {
        return Err(Error::shape("deform_sample weights", &ws, &[n, k]));
    }
    let inv_l = 1.0 / lv.len() as f64;
    let mut out = vec![0.0; n * c];
    {
        let nodes = tape.nodes.borrow();
        let (locv, wv) = (&nodes[loc.id].value, &nodes[weights.id].value);
        for &(lid, h, w) in &lv {
            let map = &nodes[lid].value;
            for q in 0..n {
                let o = &mut out[q * c..(q + 1) * c];
                for p in 0..k {
                    let a = wv[q * k + p] * inv_l;
                    let (x, y) = (locv[(q * k + p) * 2], locv[(q * k + p) * 2 + 1]);
                    bilinear_tap(h, w, c, x, y, |base, wt, _, _| {
                        let s = a * wt;
                        o.iter_mut().zip(&map[base..base + c]).for_each(|(o, m)| *o += s * m);
                    });
                }
            }
        }
    }
    Ok(tape.push(
        vec![n, c],
        out,
        Op::DeformSample {
            levels: lv,
            loc: loc.id,
            weights: weights.id,
            n,
            k,
            c,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn deform_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    levels: &[(usize, usize, usize)],
    loc: usize,
    weights: usize,
    n: usize,
    k: usize,
    c: usize,
) {
    let inv_l = 1.0 / levels.len() as f64;
    let (locv, wv) = (&nodes[loc].value, &nodes[weights].value);
    let mut dloc = vec![0.0; n * k * 2];
    let mut dw = vec![0.0; n * k];
    for &(lid, h, w) in levels {
        let map = &nodes[lid].value;
        let mut dmap = if nodes[lid].requires_grad {
            Some(vec![0.0; map.len()])
        } else {
            None
        };
        for q in 0..n {
            let gq = &g[q * c..(q + 1) * c];
            for p in 0..k {
                let a = wv[q * k + p] * inv_l;
                let (x, y) = (locv[(q * k + p) * 2], locv[(q * k + p) * 2 + 1]);
                let (mut sx, mut sy, mut sv) = (0.0, 0.0, 0.0);
                bilinear_tap(h, w, c, x, y, |base, wt, dwx, dwy| {
                    let gm = dot(gq, &map[base..base + c]);
                    sv += wt * gm;
                    sx += dwx * gm;
                    sy += dwy * gm;
                    if let Some(dm) = dmap.as_mut() {
                        let s = a * wt;
                        dm[base..base + c].iter_mut().zip(gq).for_each(|(o, g)| *o += s * g);
                    }
                });
                dw[q * k + p] += inv_l * sv;
                dloc[(q * k + p) * 2] += a * sx;
                dloc[(q * k + p) * 2 + 1] += a * sy;
            }
        }
        if let (Some(dm), Some(gl)) = (dmap, grad_buf(grads, nodes, lid)) {
            gl.iter_mut().zip(&dm).for_each(|(o, d)| *o += d);
        }
    }
    if let Some(gl) = grad_buf(grads, nodes, loc) {
        gl.iter_mut().zip(&dloc).for_each(|(o, d)| *o += d);
    }
    if let Some(gw) = grad_buf(grads, nodes, weights) {
        gw.iter_mut().zip(&dw).for_each(|(o, d)| *o += d);
    }
}

/// All ordered-pair differences of the rows of `a` (`[N, H]`): row `i·N + j`
/// of the `[N·N, H]` result is `a_i − a_j`.
pub fn pair_diff(a: Var<'_>) -> Result<Var<'_>> {
    let (n, h) = a.dims2("pair_diff")?;
    let v = a.with_value(|x| {
        let mut out = Vec::with_capacity(n * n * h);
        for i in 0..n {
            for j in 0..n {
                out.extend(
                    x[i * h..(i + 1) * h]
                        .iter()
                        .zip(&x[j * h..(j + 1) * h])
                        .map(|(p, q)| p - q),
                );
            }
        }
        out
    });
    Ok(a.tape.push(vec![n * n, h], v, Op::PairDiff { a: a.id, n, h }))
}

/// Row-weighted aggregation of pairwise rows: `out_i = Σ_j alpha_ij · r_(i·N+j)`,
/// with `alpha` `[N, N]` and `r` `[N·N, H]`.
pub fn pair_aggregate<'t>(alpha: Var<'t>, r: Var<'t>) -> Result<Var<'t>> {
    let (n, n2) = alpha.dims2("pair_aggregate")?;
    let (rows, h) = r.dims2("pair_aggregate")?;
    if n != n2 || rows != n * n {
        return Err(Error::shape("pair_aggregate", &[n, n2], &[rows, h]));
    }
    let mut out = vec![0.0; n * h];
    {
        let nodes = alpha.tape.nodes.borrow();
        let (av, rv) = (&nodes[alpha.id].value, &nodes[r.id].value);
        for i in 0..n {
            let o = &mut out[i * h..(i + 1) * h];
            for j in 0..n {
                let a = av[i * n + j];
                o.iter_mut()
                    .zip(&rv[(i * n + j) * h..][..h])
                    .for_each(|(o, v)| *o += a * v);
            }
        }
    }
    Ok(alpha.tape.push(
        vec![n, h],
        out,
        Op::PairAggregate {
            alpha: alpha.id,
            r: r.id,
            n,
            h,
        },
    ))
}

/// Sparse graph attention aggregation.
///
/// For node `i` with neighbor list `nbrs[i]` (which should include `i` itself),
/// `e_ij = leaky_relu(src_i + dst_j) + bias_ij`, `a_i = softmax_j(e_i·)` and
/// `out_i = Σ_j a_ij · z_j`. `z` is `[N, D]`, `src` and `dst` are `[N, 1]`,
/// the optional `bias` is a dense `[N, N]` matrix read only on listed edges.
pub fn edge_attention<'t>(
    z: Var<'t>,
    src: Var<'t>,
    dst: Var<'t>,
    bias: Option<Var<'t>>,
    nbrs: &[Vec<usize>],
    slope: f64,
) -> Result<Var<'t>> {
    let (n, d) = z.dims2("edge_attention")?;
    if src.numel() != n || dst.numel() != n || nbrs.len() != n {
        return Err(Error::shape(
            "edge_attention",
            &[n, d],
            &[src.numel(), dst.numel(), nbrs.len()],
        ));
    }
    if let Some(b) = bias {
        if b.numel() != n * n {
            return Err(Error::shape("edge_attention bias", &[n, n], &b.shape()));
        }
    }
    if nbrs.iter().any(|nb| nb.is_empty() || nb.iter().any(|&j| j >= n)) {
        return Err(Error::shape("edge_attention neighbors", &[n], &[nbrs.len()]));
    }
    let mut out = vec![0.0; n * d];
    let mut coeffs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    {
        let nodes = z.tape.nodes.borrow();
        let (zv, sv, dv) = (&nodes[z.id].value, &nodes[src.id].value, &nodes[dst.id].value);
        let bv = bias.map(|b| &nodes[b.id].value);
        for (i, nb) in nbrs.iter().enumerate() {
            let p: Vec<f64> = nb.iter().map(|&j| sv[i] + dv[j]).collect();
            let e: Vec<f64> = p
                .iter()
                .zip(nb)
                .map(|(&x, &j)| (if x > 0.0 { x } else { slope * x }) + bv.map_or(0.0, |b| b[i * n + j]))
                .collect();
            let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut a: Vec<f64> = e.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = a.iter().sum();
            a.iter_mut().for_each(|v| *v /= s);
            let o = &mut out[i * d..(i + 1) * d];
            for (t, &j) in nb.iter().enumerate() {
                o.iter_mut()
                    .zip(&zv[j * d..(j + 1) * d])
                    .for_each(|(o, v)| *o += a[t] * v);
            }
            coeffs.push(a);
            pre.push(p);
        }
    }
    Ok(z.tape.push(
        vec![n, d],
        out,
        Op::EdgeAttention {
            z: z.id,
            fs: src.id,
            fd: dst.id,
            bias: bias.map(|b| b.id),
            nbrs: nbrs.to_vec(),
            coeffs,
            pre,
            slope,
            d,
        },
    ))
}

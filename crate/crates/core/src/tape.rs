//! Tensor-level reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`Tape`] as they execute. Every node stores
//! its value; nodes are appended in execution order, so inputs always precede
//! the nodes that consume them and [`Tape::backward`] can sweep the node list
//! in reverse.
//!
//! Every forward operation checks its output for NaN/Inf and reports
//! [`Error::NonFinite`] instead of propagating it.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: usize, w: usize, b: usize },
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Tanh { a: usize },
    Gelu { a: usize },
    Concat { a: usize, b: usize },
    SumSquares { a: usize },
    LinComb { terms: Vec<(usize, f64)> },
    Reshape { a: usize },
    Tokenize { x: usize, u: usize, c: usize },
    Attention { x: usize, wq: usize, wk: usize, wv: usize, saved: Box<AttentionSaved> },
}

#[derive(Debug)]
struct AttentionSaved {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    /// Gradient with respect to `v`; exactly zero when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.grads[v.0].shape().to_vec();
        std::mem::replace(&mut self.grads[v.0], Tensor::zeros(shape))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `out[n, m] += a[n, k] · b[k, m]`
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n, k] += a[n, m] · b[k, m]ᵀ`
fn mm_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + j] += dot;
        }
    }
}

/// `out[k, m] += a[n, k]ᵀ · b[n, m]`
fn mm_at_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn add_into(acc: &mut Option<Tensor>, delta: &[f64], shape: &[usize]) {
    match acc {
        Some(t) => t
            .data_mut()
            .iter_mut()
            .zip(delta)
            .for_each(|(a, d)| *a += d),
        None => *acc = Some(Tensor::new(shape.to_vec(), delta.to_vec()).expect("gradient shape")),
    }
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => dim_err(format!("{what} must be 2-D, got shape {s:?}")),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// `x[B, in] · w[in, out] + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (rows, inner) = matrix_dims(xv, "linear input")?;
        let (w_in, w_out) = matrix_dims(wv, "linear weights")?;
        if inner != w_in {
            return dim_err(format!(
                "linear: input has {inner} columns but weights have {w_in} rows"
            ));
        }
        if bv.shape() != [w_out] {
            return dim_err(format!(
                "linear: bias shape {:?} does not match output dim {w_out}",
                bv.shape()
            ));
        }
        let mut out = Vec::with_capacity(rows * w_out);
        for _ in 0..rows {
            out.extend_from_slice(bv.data());
        }
        mm_acc(xv.data(), wv.data(), &mut out, rows, inner, w_out);
        let value = Tensor::new(vec![rows, w_out], out)?;
        self.push(value, Op::Linear { x: x.0, w: w.0, b: b.0 }, "linear")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = matrix_dims(av, "matmul lhs")?;
        let (k2, m) = matrix_dims(bv, "matmul rhs")?;
        if k != k2 {
            return dim_err(format!("matmul: inner dims {k} and {k2} differ"));
        }
        let mut out = vec![0.0; n * m];
        mm_acc(av.data(), bv.data(), &mut out, n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        self.push(value, Op::MatMul { a: a.0, b: b.0 }, "matmul")
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if !self.value(a).same_shape(self.value(b)) {
            return dim_err(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Add { a: a.0, b: b.0 }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Sub { a: a.0, b: b.0 }, "sub")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| c * x);
        self.push(value, Op::Scale { a: a.0, c }, "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh { a: a.0 }, "tanh")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu { a: a.0 }, "gelu")
    }

    /// Concatenates two matrices along columns: `[B, n] ++ [B, m] -> [B, n + m]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = matrix_dims(av, "concat lhs")?;
        let (rb, cb) = matrix_dims(bv, "concat rhs")?;
        if ra != rb {
            return dim_err(format!("concat: row counts {ra} and {rb} differ"));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let value = Tensor::new(vec![ra, ca + cb], data)?;
        self.push(value, Op::Concat { a: a.0, b: b.0 }, "concat")
    }

    /// `Σ a²` as a scalar.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { a: a.0 }, "sum_squares")
    }

    /// `Σ cᵢ·vᵢ` over same-shaped inputs, accumulated left to right.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return dim_err("lincomb of no terms");
        };
        let shape = self.value(first).shape().to_vec();
        let mut acc = vec![0.0; self.value(first).len()];
        for &(v, c) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return dim_err(format!("lincomb: shape {:?} vs {:?}", t.shape(), shape));
            }
            acc.iter_mut().zip(t.data()).for_each(|(a, x)| *a += c * x);
        }
        let value = Tensor::new(shape, acc)?;
        let terms = terms.iter().map(|&(v, c)| (v.0, c)).collect();
        self.push(value, Op::LinComb { terms }, "lincomb")
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape { a: a.0 }, "reshape")
    }

    /// Lifts each input feature to a token: `out[b, i, :] = x[b, i]·u + c[i, :]`.
    pub fn tokenize(&mut self, x: Var, u: Var, c: Var) -> Result<Var> {
        let (xv, uv, cv) = (self.value(x), self.value(u), self.value(c));
        let (batch, n) = matrix_dims(xv, "tokenize input")?;
        let (cn, h) = matrix_dims(cv, "token embedding")?;
        if cn != n || uv.shape() != [h] {
            return dim_err(format!(
                "tokenize: input {:?}, scale {:?}, embedding {:?}",
                xv.shape(),
                uv.shape(),
                cv.shape()
            ));
        }
        let mut out = Vec::with_capacity(batch * n * h);
        for b in 0..batch {
            for i in 0..n {
                let xi = xv.data()[b * n + i];
                out.extend(uv.data().iter().zip(cv.row(i)).map(|(u, c)| xi * u + c));
            }
        }
        let value = Tensor::new(vec![batch, n, h], out)?;
        self.push(value, Op::Tokenize { x: x.0, u: u.0, c: c.0 }, "tokenize")
    }

    /// Single-head self-attention with residual:
    /// `x + softmax(Q Kᵀ / √d) V` with `Q = x Wq`, `K = x Wk`, `V = x Wv`.
    ///
    /// `x` is `[B, T, d]` (or `[T, d]`, treated as `B = 1`).
    pub fn attention(&mut self, x: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
        let xv = self.value(x);
        let (batch, n, d) = match *xv.shape() {
            [t, d] => (1, t, d),
            [b, t, d] => (b, t, d),
            ref s => return dim_err(format!("attention input must be 2-D or 3-D, got {s:?}")),
        };
        if d == 0 {
            return dim_err("attention: model dimension is zero");
        }
        for w in [wq, wk, wv] {
            if self.value(w).shape() != [d, d] {
                return dim_err(format!(
                    "attention: projection shape {:?}, expected [{d}, {d}]",
                    self.value(w).shape()
                ));
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let (wqv, wkv, wvv) = (self.value(wq), self.value(wk), self.value(wv));
        let mut q = vec![0.0; batch * n * d];
        let mut k = vec![0.0; batch * n * d];
        let mut v = vec![0.0; batch * n * d];
        mm_acc(xv.data(), wqv.data(), &mut q, batch * n, d, d);
        mm_acc(xv.data(), wkv.data(), &mut k, batch * n, d, d);
        mm_acc(xv.data(), wvv.data(), &mut v, batch * n, d, d);
        let mut probs = vec![0.0; batch * n * n];
        let mut out = xv.data().to_vec();
        for b in 0..batch {
            let off = b * n * d;
            let p = &mut probs[b * n * n..(b + 1) * n * n];
            mm_bt_acc(&q[off..off + n * d], &k[off..off + n * d], p, n, d, n);
            for row in p.chunks_mut(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = ((*s - max) * scale).exp();
                    z += *s;
                }
                row.iter_mut().for_each(|s| *s /= z);
            }
            mm_acc(p, &v[off..off + n * d], &mut out[off..off + n * d], n, n, d);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let saved = Box::new(AttentionSaved { q, k, v, probs });
        self.push(
            value,
            Op::Attention { x: x.0, wq: wq.0, wk: wk.0, wv: wv.0, saved },
            "attention",
        )
    }

    /// Row-stochastic attention matrices recorded by an attention node, `[B, T, T]`.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { saved, .. } => {
                let n = match *self.value(v).shape() {
                    [t, _] | [_, t, _] => t,
                    _ => return None,
                };
                let b = saved.probs.len() / (n * n).max(1);
                Tensor::new(vec![b, n, n], saved.probs.clone()).ok()
            }
            _ => None,
        }
    }

    /// Propagates `d loss / d node` for every node. `loss` must be a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.unwrap_or_else(|| Tensor::zeros(n.value.shape().to_vec())))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (rows, inner) = (val(*x).shape()[0], val(*x).shape()[1]);
                let out = val(*w).shape()[1];
                let mut gx = vec![0.0; rows * inner];
                mm_bt_acc(gd, val(*w).data(), &mut gx, rows, out, inner);
                add_into(&mut grads[*x], &gx, val(*x).shape());
                let mut gw = vec![0.0; inner * out];
                mm_at_acc(val(*x).data(), gd, &mut gw, rows, inner, out);
                add_into(&mut grads[*w], &gw, val(*w).shape());
                let mut gb = vec![0.0; out];
                for r in gd.chunks(out) {
                    gb.iter_mut().zip(r).for_each(|(a, d)| *a += d);
                }
                add_into(&mut grads[*b], &gb, val(*b).shape());
            }
            Op::MatMul { a, b } => {
                let (n, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let m = val(*b).shape()[1];
                let mut ga = vec![0.0; n * k];
                mm_bt_acc(gd, val(*b).data(), &mut ga, n, m, k);
                add_into(&mut grads[*a], &ga, val(*a).shape());
                let mut gb = vec![0.0; k * m];
                mm_at_acc(val(*a).data(), gd, &mut gb, n, k, m);
                add_into(&mut grads[*b], &gb, val(*b).shape());
            }
            Op::Add { a, b } => {
                add_into(&mut grads[*a], gd, g.shape());
                add_into(&mut grads[*b], gd, g.shape());
            }
            Op::Sub { a, b } => {
                add_into(&mut grads[*a], gd, g.shape());
                let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                add_into(&mut grads[*b], &neg, g.shape());
            }
            Op::Scale { a, c } => {
                let d: Vec<f64> = gd.iter().map(|x| c * x).collect();
                add_into(&mut grads[*a], &d, g.shape());
            }
            Op::Tanh { a } => {
                let d: Vec<f64> = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                add_into(&mut grads[*a], &d, g.shape());
            }
            Op::Gelu { a } => {
                let d: Vec<f64> = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| g * gelu_grad(*x))
                    .collect();
                add_into(&mut grads[*a], &d, g.shape());
            }
            Op::Concat { a, b } => {
                let (rows, ca) = (val(*a).shape()[0], val(*a).shape()[1]);
                let cb = val(*b).shape()[1];
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in gd.chunks(ca + cb) {
                    ga.extend_from_slice(&r[..ca]);
                    gb.extend_from_slice(&r[ca..]);
                }
                add_into(&mut grads[*a], &ga, val(*a).shape());
                add_into(&mut grads[*b], &gb, val(*b).shape());
            }
            Op::SumSquares { a } => {
                let s = gd[0];
                let d: Vec<f64> = val(*a).data().iter().map(|x| 2.0 * s * x).collect();
                add_into(&mut grads[*a], &d, val(*a).shape());
            }
            Op::LinComb { terms } => {
                for &(t, c) in terms {
                    let d: Vec<f64> = gd.iter().map(|x| c * x).collect();
                    add_into(&mut grads[t], &d, g.shape());
                }
            }
            Op::Reshape { a } => add_into(&mut grads[*a], gd, val(*a).shape()),
            Op::Tokenize { x, u, c } => {
                let (batch, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                let h = val(*u).len();
                let (xd, ud) = (val(*x).data(), val(*u).data());
                let mut gx = vec![0.0; batch * n];
                let mut gu = vec![0.0; h];
                let mut gc = vec![0.0; n * h];
                for b in 0..batch {
                    for i in 0..n {
                        let tok = &gd[(b * n + i) * h..(b * n + i + 1) * h];
                        let xi = xd[b * n + i];
                        let mut s = 0.0;
                        for j in 0..h {
                            s += tok[j] * ud[j];
                            gu[j] += tok[j] * xi;
                            gc[i * h + j] += tok[j];
                        }
                        gx[b * n + i] = s;
                    }
                }
                add_into(&mut grads[*x], &gx, val(*x).shape());
                add_into(&mut grads[*u], &gu, val(*u).shape());
                add_into(&mut grads[*c], &gc, val(*c).shape());
            }
            Op::Attention { x, wq, wk, wv, saved } => {
                let xs = val(*x);
                let d = *xs.shape().last().unwrap();
                let n = xs.shape()[xs.ndim() - 2];
                let batch = xs.len() / (n * d);
                let scale = 1.0 / (d as f64).sqrt();
                let AttentionSaved { q, k, v, probs } = saved.as_ref();
                let mut gq = vec![0.0; batch * n * d];
                let mut gk = vec![0.0; batch * n * d];
                let mut gv = vec![0.0; batch * n * d];
                for b in 0..batch {
                    let off = b * n * d;
                    let p = &probs[b * n * n..(b + 1) * n * n];
                    let go = &gd[off..off + n * d];
                    // dV = Pᵀ dO
                    mm_at_acc(p, go, &mut gv[off..off + n * d], n, n, d);
                    // dP = dO Vᵀ
                    let mut gp = vec![0.0; n * n];
                    mm_bt_acc(go, &v[off..off + n * d], &mut gp, n, d, n);
                    // softmax backward, then the 1/√d scale
                    let mut gs = vec![0.0; n * n];
                    for i in 0..n {
                        let pr = &p[i * n..(i + 1) * n];
                        let gr = &gp[i * n..(i + 1) * n];
                        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gs[i * n + j] = pr[j] * (gr[j] - dot) * scale;
                        }
                    }
                    mm_acc(&gs, &k[off..off + n * d], &mut gq[off..off + n * d], n, n, d);
                    mm_at_acc(&gs, &q[off..off + n * d], &mut gk[off..off + n * d], n, n, d);
                }
                let rows = batch * n;
                let mut gx = gd.to_vec();
                for (gproj, w) in [(&gq, *wq), (&gk, *wk), (&gv, *wv)] {
                    mm_bt_acc(gproj, val(w).data(), &mut gx, rows, d, d);
                    let mut gw = vec![0.0; d * d];
                    mm_at_acc(xs.data(), gproj, &mut gw, rows, d, d);
                    add_into(&mut grads[w], &gw, val(w).shape());
                }
                add_into(&mut grads[*x], &gx, xs.shape());
            }
        }
    }
}

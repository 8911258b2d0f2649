//! Dynamic reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so reverse iteration over the node list is a valid
//! topological order for the backward sweep.

use super::conv::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, f64),
    AddConst(Var),
    /// Elementwise product with a constant mask (dropout).
    MulMask(Var, Vec<f64>),
    Sum(Var),
    Square(Var),
    Ln(Var),
    Softplus(Var),
    SignSte { x: Var, clip: f64 },
    HardTanh { x: Var, clip: f64 },
    /// `x[n, c·P + p] + b[c]`
    AddChannel { x: Var, b: Var, positions: usize },
    /// `x[n, c·P + p] * s[c]`
    MulChannel { x: Var, s: Var, positions: usize },
    /// `x[n, c·P + p] * s[n, c]`
    MulRowChannel { x: Var, s: Var, positions: usize },
    /// `x[n, c·P + p] + b[n, c]`
    AddRowChannel { x: Var, b: Var, positions: usize },
    /// Row `n` is `s` when kept, the neutral vector `fill` when dropped.
    SelectRows { s: Var, keep: Vec<bool> },
    /// `mu[c] + sigma[c] * eps[n, c]`
    Reparam { mu: Var, sigma: Var, eps: Vec<f64> },
    Im2Col { x: Var, geom: ConvGeometry, n: usize },
    RowsToNchw { x: Var, n: usize, positions: usize, channels: usize },
    BatchNorm {
        x: Var,
        positions: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-channel statistics recorded by a training-mode normalization node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    stats: Vec<(usize, BatchStats)>,
}

/// Gradients of a scalar with respect to every node that needs them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a` (m×k), `b` (k×n) and the
    // row-major `c` (m×n); lengths are checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major `(m×k)·(k×n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), &mut c);
    c
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Statistics of every training-mode normalization, in creation order.
    pub fn batch_stats(&self) -> impl Iterator<Item = &BatchStats> {
        self.stats.iter().map(|(_, s)| s)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            let axis = sa.iter().zip(sb).position(|(x, y)| x != y).unwrap_or(0);
            let (e, g) = (
                sa.get(axis).copied().unwrap_or(0),
                sb.get(axis).copied().unwrap_or(0),
            );
            return Err(Error::dim(format!("axis {axis}"), e, g));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x).map(f);
        let ng = self.ng(&[x]);
        self.push(v, op, ng)
    }

    /// `a (m×k) · b (k×n)`; `a` may be any tensor viewed as rows × cols.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 {
            return Err(Error::dim("rhs rank", 2, tb.shape().len()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
        if tb.shape()[0] != k {
            return Err(Error::dim("inner axis (lhs cols vs rhs rows)", k, tb.shape()[0]));
        }
        let out = matmul(ta.data(), tb.data(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let d = zip(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(d, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let d = zip(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(d, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let d = zip(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(d, Op::Mul(a, b), ng))
    }

    pub fn mul_const(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v * k, Op::MulConst(x, k))
    }

    pub fn add_const(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v + k, Op::AddConst(x))
    }

    pub fn mul_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(Error::dim("mask length", t.len(), mask.len()));
        }
        let d: Vec<f64> = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::new(t.shape(), d)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::MulMask(x, mask), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// `sign(x)` with tie `sign(0) = +1`; backward passes the gradient where
    /// `|x| <= clip`.
    pub fn sign_ste(&mut self, x: Var, clip: f64) -> Var {
        self.unary(x, crate::binarize::sign, Op::SignSte { x, clip })
    }

    pub fn hardtanh(&mut self, x: Var, clip: f64) -> Var {
        self.unary(x, |v| v.clamp(-clip, clip), Op::HardTanh { x, clip })
    }

    fn channel_check(&self, x: Var, c: usize, positions: usize) -> Result<usize> {
        let t = self.value(x);
        if t.cols() != c * positions {
            return Err(Error::dim("channel axis", c * positions, t.cols()));
        }
        Ok(t.rows())
    }

    pub fn add_channel(&mut self, x: Var, b: Var, positions: usize) -> Result<Var> {
        let c = self.value(b).len();
        self.channel_check(x, c, positions)?;
        let (tx, tb) = (self.value(x), self.value(b));
        let mut d = tx.data().to_vec();
        for row in d.chunks_mut(c * positions) {
            for (ch, seg) in row.chunks_mut(positions).enumerate() {
                seg.iter_mut().for_each(|v| *v += tb.data()[ch]);
            }
        }
        let v = Tensor::new(tx.shape(), d)?;
        let ng = self.ng(&[x, b]);
        Ok(self.push(v, Op::AddChannel { x, b, positions }, ng))
    }

    pub fn mul_channel(&mut self, x: Var, s: Var, positions: usize) -> Result<Var> {
        let c = self.value(s).len();
        self.channel_check(x, c, positions)?;
        let (tx, ts) = (self.value(x), self.value(s));
        let mut d = tx.data().to_vec();
        for row in d.chunks_mut(c * positions) {
            for (ch, seg) in row.chunks_mut(positions).enumerate() {
                seg.iter_mut().for_each(|v| *v *= ts.data()[ch]);
            }
        }
        let v = Tensor::new(tx.shape(), d)?;
        let ng = self.ng(&[x, s]);
        Ok(self.push(v, Op::MulChannel { x, s, positions }, ng))
    }

    fn row_channel_check(&self, x: Var, s: Var, positions: usize) -> Result<usize> {
        let (n, c) = (self.value(s).rows(), self.value(s).cols());
        let rows = self.channel_check(x, c, positions)?;
        if rows != n {
            return Err(Error::dim("batch axis", rows, n));
        }
        Ok(c)
    }

    pub fn mul_row_channel(&mut self, x: Var, s: Var, positions: usize) -> Result<Var> {
        let c = self.row_channel_check(x, s, positions)?;
        let (tx, ts) = (self.value(x), self.value(s));
        let mut d = tx.data().to_vec();
        for (n, row) in d.chunks_mut(c * positions).enumerate() {
            for (ch, seg) in row.chunks_mut(positions).enumerate() {
                let k = ts.data()[n * c + ch];
                seg.iter_mut().for_each(|v| *v *= k);
            }
        }
        let v = Tensor::new(tx.shape(), d)?;
        let ng = self.ng(&[x, s]);
        Ok(self.push(v, Op::MulRowChannel { x, s, positions }, ng))
    }

    pub fn add_row_channel(&mut self, x: Var, b: Var, positions: usize) -> Result<Var> {
        let c = self.row_channel_check(x, b, positions)?;
        let (tx, tb) = (self.value(x), self.value(b));
        let mut d = tx.data().to_vec();
        for (n, row) in d.chunks_mut(c * positions).enumerate() {
            for (ch, seg) in row.chunks_mut(positions).enumerate() {
                let k = tb.data()[n * c + ch];
                seg.iter_mut().for_each(|v| *v += k);
            }
        }
        let v = Tensor::new(tx.shape(), d)?;
        let ng = self.ng(&[x, b]);
        Ok(self.push(v, Op::AddRowChannel { x, b, positions }, ng))
    }

    /// Broadcasts the vector `s` to one row per `keep` entry; dropped rows
    /// hold `fill` instead.
    pub fn select_rows(&mut self, s: Var, keep: Vec<bool>, fill: f64) -> Result<Var> {
        let ts = self.value(s);
        let c = ts.len();
        let mut d = Vec::with_capacity(keep.len() * c);
        for &k in &keep {
            if k {
                d.extend_from_slice(ts.data());
            } else {
                d.extend(std::iter::repeat_n(fill, c));
            }
        }
        let v = Tensor::new(&[keep.len(), c], d)?;
        let ng = self.ng(&[s]);
        Ok(self.push(v, Op::SelectRows { s, keep }, ng))
    }

    /// Reparameterized Gaussian rows `mu + sigma ⊙ eps[n]`.
    pub fn reparam(&mut self, mu: Var, sigma: Var, eps: Vec<f64>) -> Result<Var> {
        self.same_shape(mu, sigma)?;
        let c = self.value(mu).len();
        if eps.len() % c != 0 || eps.is_empty() {
            return Err(Error::dim("noise length", c, eps.len()));
        }
        let (tm, ts) = (self.value(mu).data(), self.value(sigma).data());
        let d: Vec<f64> = eps
            .iter()
            .enumerate()
            .map(|(i, e)| tm[i % c] + ts[i % c] * e)
            .collect();
        let v = Tensor::new(&[eps.len() / c, c], d)?;
        let ng = self.ng(&[mu, sigma]);
        Ok(self.push(v, Op::Reparam { mu, sigma, eps }, ng))
    }

    pub fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Result<Var> {
        let t = self.value(x);
        if t.cols() != geom.in_len() {
            return Err(Error::dim("conv input length", geom.in_len(), t.cols()));
        }
        let n = t.rows();
        let d = conv::im2col(&geom, t.data(), n);
        let v = Tensor::new(&[n * geom.positions(), geom.patch_len()], d)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Im2Col { x, geom, n }, ng))
    }

    pub fn rows_to_nchw(&mut self, x: Var, n: usize, positions: usize) -> Result<Var> {
        let t = self.value(x);
        let channels = t.cols();
        if t.rows() != n * positions {
            return Err(Error::dim("unfolded rows", n * positions, t.rows()));
        }
        let d = conv::rows_to_nchw(t.data(), n, positions, channels);
        let v = Tensor::new(&[n, channels * positions], d)?;
        let ng = self.ng(&[x]);
        Ok(self.push(
            v,
            Op::RowsToNchw {
                x,
                n,
                positions,
                channels,
            },
            ng,
        ))
    }

    /// Normalizes each channel by its batch mean and (biased) variance.
    pub fn batch_norm(&mut self, x: Var, channels: usize, positions: usize, eps: f64) -> Result<Var> {
        let n = self.channel_check(x, channels, positions)?;
        if n < 2 {
            return Err(Error::BatchStatistics(n));
        }
        let t = self.value(x);
        let m = (n * positions) as f64;
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for row in t.data().chunks(channels * positions) {
            for (c, seg) in row.chunks(positions).enumerate() {
                mean[c] += seg.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for row in t.data().chunks(channels * positions) {
            for (c, seg) in row.chunks(positions).enumerate() {
                var[c] += seg.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = t.data().to_vec();
        for row in xhat.chunks_mut(channels * positions) {
            for (c, seg) in row.chunks_mut(positions).enumerate() {
                seg.iter_mut()
                    .for_each(|v| *v = (*v - mean[c]) * inv_std[c]);
            }
        }
        let v = Tensor::new(t.shape(), xhat.clone())?;
        let ng = self.ng(&[x]);
        let id = self.push(
            v,
            Op::BatchNorm {
                x,
                positions,
                xhat,
                inv_std,
            },
            ng,
        );
        self.stats.push((id.0, BatchStats { mean, var }));
        Ok(id)
    }

    /// Mean softmax cross-entropy over the batch; returns a scalar node.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = (t.rows(), t.cols());
        if labels.len() != n {
            return Err(Error::dim("label count", n, labels.len()));
        }
        let probs = softmax_rows(t.data(), c);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::Index {
                    what: "class label".into(),
                    index: l,
                    bound: c,
                });
            }
            let row = &t.data()[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= n as f64;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Affine map `x·W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wc = self.shape(w).get(1).copied().unwrap_or(0);
        if self.value(b).len() != wc {
            return Err(Error::dim("bias length (W cols)", wc, self.value(b).len()));
        }
        let z = self.matmul(x, w)?;
        self.add_channel(z, b, 1)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::dim("loss element count", 1, root.len()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, d: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(d).for_each(|(b, x)| *b += x),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), tb.data(), (1, n), &mut da);
                    acc(*a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), (1, k), g, (n, 1), &mut db);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::MulConst(x, k) => acc(*x, g.iter().map(|v| v * k).collect()),
            Op::AddConst(x) => acc(*x, g.to_vec()),
            Op::MulMask(x, m) => acc(*x, g.iter().zip(m).map(|(g, m)| g * m).collect()),
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[x.0].value.len()]),
            Op::Square(x) => acc(
                *x,
                g.iter().zip(self.val(*x)).map(|(g, v)| 2.0 * v * g).collect(),
            ),
            Op::Ln(x) => acc(*x, g.iter().zip(self.val(*x)).map(|(g, v)| g / v).collect()),
            Op::Softplus(x) => acc(
                *x,
                g.iter().zip(self.val(*x)).map(|(g, v)| g * sigmoid(*v)).collect(),
            ),
            Op::SignSte { x, clip } | Op::HardTanh { x, clip } => acc(
                *x,
                crate::binarize::ste_mask_apply(g, self.val(*x), *clip),
            ),
            Op::AddChannel { x, b, positions } => {
                acc(*x, g.to_vec());
                let c = self.nodes[b.0].value.len();
                let mut db = vec![0.0; c];
                for row in g.chunks(c * positions) {
                    for (ch, seg) in row.chunks(*positions).enumerate() {
                        db[ch] += seg.iter().sum::<f64>();
                    }
                }
                acc(*b, db);
            }
            Op::MulChannel { x, s, positions } => {
                let (vx, vs) = (self.val(*x), self.val(*s));
                let c = vs.len();
                let mut dx = g.to_vec();
                let mut ds = vec![0.0; c];
                for (r, row) in dx.chunks_mut(c * positions).enumerate() {
                    let xr = &vx[r * c * positions..(r + 1) * c * positions];
                    for (ch, seg) in row.chunks_mut(*positions).enumerate() {
                        let xs = &xr[ch * positions..(ch + 1) * positions];
                        ds[ch] += seg.iter().zip(xs).map(|(g, x)| g * x).sum::<f64>();
                        seg.iter_mut().for_each(|v| *v *= vs[ch]);
                    }
                }
                acc(*x, dx);
                acc(*s, ds);
            }
            Op::MulRowChannel { x, s, positions } => {
                let (vx, vs) = (self.val(*x), self.val(*s));
                let c = self.nodes[s.0].value.cols();
                let mut dx = g.to_vec();
                let mut ds = vec![0.0; vs.len()];
                for (r, row) in dx.chunks_mut(c * positions).enumerate() {
                    let xr = &vx[r * c * positions..(r + 1) * c * positions];
                    for (ch, seg) in row.chunks_mut(*positions).enumerate() {
                        let xs = &xr[ch * positions..(ch + 1) * positions];
                        ds[r * c + ch] += seg.iter().zip(xs).map(|(g, x)| g * x).sum::<f64>();
                        seg.iter_mut().for_each(|v| *v *= vs[r * c + ch]);
                    }
                }
                acc(*x, dx);
                acc(*s, ds);
            }
            Op::AddRowChannel { x, b, positions } => {
                acc(*x, g.to_vec());
                let t = &self.nodes[b.0].value;
                let c = t.cols();
                let mut db = vec![0.0; t.len()];
                for (r, row) in g.chunks(c * positions).enumerate() {
                    for (ch, seg) in row.chunks(*positions).enumerate() {
                        db[r * c + ch] += seg.iter().sum::<f64>();
                    }
                }
                acc(*b, db);
            }
            Op::SelectRows { s, keep } => {
                let c = self.nodes[s.0].value.len();
                let mut ds = vec![0.0; c];
                for (row, &k) in g.chunks(c).zip(keep) {
                    if k {
                        ds.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
                acc(*s, ds);
            }
            Op::Reparam { mu, sigma, eps } => {
                let c = self.nodes[mu.0].value.len();
                let mut dm = vec![0.0; c];
                let mut dsig = vec![0.0; c];
                for (i, (gv, e)) in g.iter().zip(eps).enumerate() {
                    dm[i % c] += gv;
                    dsig[i % c] += gv * e;
                }
                acc(*mu, dm);
                acc(*sigma, dsig);
            }
            Op::Im2Col { x, geom, n } => acc(*x, conv::col2im(geom, g, *n)),
            Op::RowsToNchw {
                x,
                n,
                positions,
                channels,
            } => acc(*x, conv::nchw_to_rows(g, *n, *positions, *channels)),
            Op::BatchNorm {
                x,
                positions,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let n = g.len() / (c * positions);
                let m = (n * positions) as f64;
                let mut sg = vec![0.0; c];
                let mut sgx = vec![0.0; c];
                for (row, xr) in g.chunks(c * positions).zip(xhat.chunks(c * positions)) {
                    for ch in 0..c {
                        let r = ch * positions..(ch + 1) * positions;
                        sg[ch] += row[r.clone()].iter().sum::<f64>();
                        sgx[ch] += row[r.clone()]
                            .iter()
                            .zip(&xr[r])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
                let mut dx = vec![0.0; g.len()];
                for ((drow, row), xr) in dx
                    .chunks_mut(c * positions)
                    .zip(g.chunks(c * positions))
                    .zip(xhat.chunks(c * positions))
                {
                    for ch in 0..c {
                        for p in ch * positions..(ch + 1) * positions {
                            drow[p] = inv_std[ch] / m * (m * row[p] - sg[ch] - xr[p] * sgx[ch]);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= 1.0;
                }
                let k = g[0] / n as f64;
                d.iter_mut().for_each(|v| *v *= k);
                acc(*logits, d);
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), d).expect("shapes checked by caller")
}

/// Row-wise max-stabilized softmax of a flat `n × c` buffer.
pub fn softmax_rows(logits: &[f64], c: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(c) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Inverse of the softplus map, for initializing positive parameters.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn softplus_value(v: f64) -> f64 {
    softplus(v)
}

use crate::autodiff::real::{gemm, sigmoid, View};
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Shift { a: Var },
    Sigmoid { a: Var },
    Abs { a: Var },
    Gelu { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run tape. Every operation appends a node; [`Graph::backward`]
/// walks the nodes in exact reverse order. Ops whose inputs are all frozen are
/// evaluated eagerly and stored as constants.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass. Only trainable leaves carry a buffer.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn acc<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Trainability follows [`Tensor::requires_grad`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Records a frozen leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0]
            .value
            .dims2()
            .ok_or_else(|| shape_err(op, self.shape(v), &[]))
    }

    // ---- forward ops ----

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`, the shape of a linear layer with weight `b`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let (m, k) = self.dims2(op, a)?;
        let (br, bc) = self.dims2(op, b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        let bv = if trans_b {
            View::transposed(0, k)
        } else {
            View::rows(0, n)
        };
        gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            View::rows(0, k),
            self.data(b),
            bv,
            T::zero(),
            &mut out,
            View::rows(0, n),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.data(a).len(), self.data(b).len());
        if sa == sb {
            Ok(sa.to_vec())
        } else if nb == 1 {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else {
            Err(shape_err(op, sa, sb))
        }
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (da, db) = (self.data(a), self.data(b));
        match (da.len(), db.len()) {
            (x, y) if x == y => da.iter().zip(db).map(|(&p, &q)| f(p, q)).collect(),
            (_, 1) => da.iter().map(|&p| f(p, db[0])).collect(),
            _ => db.iter().map(|&q| f(da[0], q)).collect(),
        }
    }

    /// Elementwise sum; one side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_check("add", a, b)?;
        let out = self.zip(a, b, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    /// Elementwise product; one side may be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_check("mul", a, b)?;
        let out = self.zip(a, b, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Shift { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid { a }, rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.abs());
        let rg = self.rg(&[a]);
        self.push(value, Op::Abs { a }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64_lossy(GELU_C);
        let k = T::from_f64_lossy(GELU_A);
        let half = T::from_f64_lossy(0.5);
        let value = self.nodes[a.0]
            .value
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = T::from_f64_lossy(sum_f64(self.data(a)));
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len();
        if n == 0 {
            return Err(shape_err("mean", self.shape(a), &[]));
        }
        let m = T::from_f64_lossy(sum_f64(self.data(a)) / n as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(m), Op::Mean { a }, rg))
    }

    fn last_dim(&self, op: &'static str, a: Var) -> Result<usize> {
        match self.shape(a).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(shape_err(op, self.shape(a), &[])),
        }
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim("softmax", a)?;
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a }, rg))
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim("log_softmax", a)?;
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(d) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax { a }, rg))
    }

    /// Mean cross-entropy of `logits[R×V]` against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != r || r == 0 {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::invalid(format!(
                "cross_entropy target {bad} out of range for {v} classes"
            )));
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            let lse = log_sum_exp(row);
            total += (lse - row[t]).to_f64().unwrap();
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let loss = T::from_f64_lossy(total / r as f64);
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs: if rg { probs } else { Vec::new() },
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Row lookup `table[ids[i]]` for a `[V×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("embedding", table)?;
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::invalid(format!(
                    "embedding id {id} out of range for table of {v} rows"
                )));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(Tensor::new([ids.len(), d], out)?, op, rg))
    }

    /// Row-wise RMS normalization with a learned gain: `x / rms(x) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (r, d) = self.dims2("rms_norm", x)?;
        if self.data(gain).len() != d {
            return Err(shape_err("rms_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.data(x);
        let gs = self.data(gain);
        let dn = T::from_usize(d).unwrap();
        let mut out = vec![T::zero(); r * d];
        let mut inv = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xs[i * d..(i + 1) * d];
            let ms: T = row.iter().map(|&a| a * a).sum::<T>() / dn;
            let ir = T::one() / (ms + eps).sqrt();
            inv.push(ir);
            for j in 0..d {
                out[i * d + j] = row[j] * ir * gs[j];
            }
        }
        let rg = self.rg(&[x, gain]);
        let op = Op::RmsNorm {
            x,
            gain,
            inv_rms: inv,
        };
        Ok(self.push(Tensor::new([r, d], out)?, op, rg))
    }

    /// Multi-head causal self-attention over `[batch·seq × d]` projections.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (r, d) = self.dims2("attention", q)?;
        if self.shape(k) != [r, d] {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if self.shape(v) != [r, d] {
            return Err(shape_err("attention", self.shape(q), self.shape(v)));
        }
        if heads == 0 || d % heads != 0 || batch * seq != r {
            return Err(Error::invalid(format!(
                "attention layout batch={batch} seq={seq} heads={heads} incompatible with [{r}, {d}]"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); r * d];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm(
                    seq,
                    dh,
                    seq,
                    scale,
                    qd,
                    View::rows(base, d),
                    kd,
                    View::transposed(base, d),
                    T::zero(),
                    p,
                    View::rows(0, seq),
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].fill(T::zero());
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    p,
                    View::rows(0, seq),
                    vd,
                    View::rows(base, d),
                    T::zero(),
                    &mut out,
                    View::rows(base, d),
                );
            }
        }
        let rg = self.rg(&[q, k, v]);
        let op = Op::Attention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            probs: if rg { probs } else { Vec::new() },
        };
        Ok(self.push(Tensor::new([r, d], out)?, op, rg))
    }

    // ---- reverse pass ----

    /// Reverse-mode sweep from a scalar `loss`. Buffers start at zero on every
    /// call, so repeated calls return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty graph"));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
        }
        // Only trainable leaves keep their buffers.
        for (i, node) in self.nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = node.value.dims2().unwrap().1;
                let (ad, bd) = (self.data(*a), self.data(*b));
                if want(*a) {
                    // dA = dC · Bᵀ  (or dC · B when B is stored transposed)
                    let bv = if *trans_b {
                        View::rows(0, k)
                    } else {
                        View::transposed(0, n)
                    };
                    let ga = acc(&mut grads[a.0], m * k);
                    gemm(m, n, k, T::one(), gout, View::rows(0, n), bd, bv, T::one(), ga, View::rows(0, k));
                }
                if want(*b) {
                    let gb = acc(&mut grads[b.0], k * n);
                    if *trans_b {
                        // dB[n×k] = dCᵀ · A
                        gemm(n, m, k, T::one(), gout, View::transposed(0, n), ad, View::rows(0, k), T::one(), gb, View::rows(0, k));
                    } else {
                        // dB[k×n] = Aᵀ · dC
                        gemm(k, m, n, T::one(), ad, View::transposed(0, k), gout, View::rows(0, n), T::one(), gb, View::rows(0, n));
                    }
                }
            }
            Op::Add { a, b } => {
                for &x in [a, b] {
                    if want(x) {
                        let g = acc(&mut grads[x.0], len(x));
                        reduce_into(g, gout, |go, _| go);
                    }
                }
            }
            Op::Mul { a, b } => {
                let pairs = [(*a, *b), (*b, *a)];
                for (x, other) in pairs {
                    if want(x) {
                        let od = self.data(other);
                        let g = acc(&mut grads[x.0], len(x));
                        reduce_into(g, gout, |go, i| go * od[if od.len() == 1 { 0 } else { i }]);
                    }
                }
            }
            Op::Scale { a, c } => {
                if want(*a) {
                    let g = acc(&mut grads[a.0], len(*a));
                    g.iter_mut().zip(gout).for_each(|(g, &go)| *g += go * *c);
                }
            }
            Op::Shift { a } => {
                if want(*a) {
                    let g = acc(&mut grads[a.0], len(*a));
                    g.iter_mut().zip(gout).for_each(|(g, &go)| *g += go);
                }
            }
            Op::Sigmoid { a } => {
                // σ'(x) = σ(x)σ(−x), evaluated from the input so saturated
                // entries keep their (tiny) derivative instead of rounding to 0.
                let x = self.data(*a);
                let g = acc(&mut grads[a.0], x.len());
                for ((g, &go), &xi) in g.iter_mut().zip(gout).zip(x) {
                    *g += go * sigmoid(xi) * sigmoid(-xi);
                }
            }
            Op::Abs { a } => {
                let x = self.data(*a);
                let g = acc(&mut grads[a.0], x.len());
                for ((g, &go), &xi) in g.iter_mut().zip(gout).zip(x) {
                    if xi > T::zero() {
                        *g += go;
                    } else if xi < T::zero() {
                        *g -= go;
                    }
                }
            }
            Op::Gelu { a } => {
                let c = T::from_f64_lossy(GELU_C);
                let k = T::from_f64_lossy(GELU_A);
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                let x = self.data(*a);
                let g = acc(&mut grads[a.0], x.len());
                for ((g, &go), &xi) in g.iter_mut().zip(gout).zip(x) {
                    let t = (c * (xi + k * xi * xi * xi)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * k * xi * xi);
                    *g += go * (half * (T::one() + t) + half * xi * dt);
                }
            }
            Op::Sum { a } => {
                let g = acc(&mut grads[a.0], len(*a));
                g.iter_mut().for_each(|g| *g += gout[0]);
            }
            Op::Mean { a } => {
                let n = len(*a);
                let s = gout[0] / T::from_usize(n).unwrap();
                let g = acc(&mut grads[a.0], n);
                g.iter_mut().for_each(|g| *g += s);
            }
            Op::Softmax { a } => {
                let d = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let g = acc(&mut grads[a.0], y.len());
                for ((gr, yr), gor) in g.chunks_mut(d).zip(y.chunks(d)).zip(gout.chunks(d)) {
                    let dot: T = yr.iter().zip(gor).map(|(&p, &q)| p * q).sum();
                    for j in 0..d {
                        gr[j] += yr[j] * (gor[j] - dot);
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let d = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let g = acc(&mut grads[a.0], y.len());
                for ((gr, yr), gor) in g.chunks_mut(d).zip(y.chunks(d)).zip(gout.chunks(d)) {
                    let total: T = gor.iter().copied().sum();
                    for j in 0..d {
                        gr[j] += gor[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.nodes[logits.0].value.shape()[1];
                let s = gout[0] / T::from_usize(targets.len()).unwrap();
                let g = acc(&mut grads[logits.0], probs.len());
                for (i, &t) in targets.iter().enumerate() {
                    let row = &mut g[i * v..(i + 1) * v];
                    for (gj, &pj) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                        *gj += s * pj;
                    }
                    row[t] -= s;
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[table.0].value.shape()[1];
                let g = acc(&mut grads[table.0], len(*table));
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut g[id * d..(id + 1) * d];
                    dst.iter_mut()
                        .zip(&gout[r * d..(r + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (r, d) = node.value.dims2().unwrap();
                let xs = self.data(*x);
                let gs = self.data(*gain);
                let dn = T::from_usize(d).unwrap();
                if want(*x) {
                    let g = acc(&mut grads[x.0], r * d);
                    for i in 0..r {
                        let ir = inv_rms[i];
                        let xr = &xs[i * d..(i + 1) * d];
                        let gor = &gout[i * d..(i + 1) * d];
                        let dot: T = (0..d).map(|j| gor[j] * gs[j] * xr[j]).sum();
                        let coef = ir * ir * ir * dot / dn;
                        for j in 0..d {
                            g[i * d + j] += ir * gs[j] * gor[j] - xr[j] * coef;
                        }
                    }
                }
                if want(*gain) {
                    let g = acc(&mut grads[gain.0], d);
                    for i in 0..r {
                        for j in 0..d {
                            g[j] += gout[i * d + j] * xs[i * d + j] * inv_rms[i];
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(node, gout, grads, (*q, *k, *v), (*batch, *seq, *heads), probs),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node<T>,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
        (q, k, v): (Var, Var, Var),
        (batch, seq, heads): (usize, usize, usize),
        probs: &[T],
    ) {
        let (r, d) = node.value.dims2().unwrap();
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut gq = vec![T::zero(); r * d];
        let mut gk = vec![T::zero(); r * d];
        let mut gv = vec![T::zero(); r * d];
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * d + h * dh;
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                // dV += Pᵀ dO
                gemm(seq, seq, dh, T::one(), p, View::transposed(0, seq), gout, View::rows(base, d), T::one(), &mut gv, View::rows(base, d));
                // dP = dO Vᵀ
                gemm(seq, dh, seq, T::one(), gout, View::rows(base, d), vd, View::transposed(base, d), T::zero(), &mut dp, View::rows(0, seq));
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let dot: T = (0..=i).map(|j| pr[j] * dr[j]).sum();
                    for j in 0..seq {
                        dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { T::zero() };
                    }
                }
                // dQ += dS K ; dK += dSᵀ Q
                gemm(seq, seq, dh, T::one(), &dp, View::rows(0, seq), kd, View::rows(base, d), T::one(), &mut gq, View::rows(base, d));
                gemm(seq, seq, dh, T::one(), &dp, View::transposed(0, seq), qd, View::rows(base, d), T::one(), &mut gk, View::rows(base, d));
            }
        }
        for (x, gx) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[x.0].requires_grad {
                let g = acc(&mut grads[x.0], r * d);
                g.iter_mut().zip(gx).for_each(|(a, b)| *a += b);
            }
        }
    }
}

/// Accumulates `gout` into `g`, summing when `g` is a broadcast scalar.
fn reduce_into<T: Real>(g: &mut [T], gout: &[T], f: impl Fn(T, usize) -> T) {
    if g.len() == gout.len() {
        for (i, (g, &go)) in g.iter_mut().zip(gout).enumerate() {
            *g += f(go, i);
        }
    } else {
        let s: T = gout.iter().enumerate().map(|(i, &go)| f(go, i)).sum();
        g[0] += s;
    }
}

fn sum_f64<T: Real>(xs: &[T]) -> f64 {
    xs.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).sum()
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&x| (x - mx).exp()).sum();
    mx + s.ln()
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x = *x / s);
}

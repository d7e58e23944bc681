use super::params::{ParamId, ParamStore};
use super::tensor::{matmul, matmul_at, matmul_bt, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MeanRows(NodeId),
    RepeatRows(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, inv_std: Vec<f64> },
    Transpose(NodeId),
    Reshape(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Conv2d { x: NodeId, w: NodeId, b: NodeId },
    AvgPool(NodeId, usize),
    GlobalAvgPool(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run tape. Nodes are appended in evaluation order, which is a
/// topological order; `backward` walks it in exact reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints of every node reachable from the output.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    /// Adds parameter adjoints into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(pid, g)?;
            }
        }
        Ok(())
    }
}

fn finite(t: Tensor, what: &str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(format!("{what} produced a non-finite value")))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Floored at the smallest normal f64 so the output stays strictly positive
/// where `e^x` underflows.
pub(crate) fn softplus(x: f64) -> f64 {
    (x.max(0.0) + (-x.abs()).exp().ln_1p()).max(f64::MIN_POSITIVE)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<NodeId> {
        let value = finite(value, what)?;
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn v(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Result<NodeId> {
        self.push(t, Op::Leaf, "input")
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        self.push(store.value(id).clone(), Op::Param(id), "parameter")
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op, what: &str) -> Result<NodeId> {
        let x = self.v(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.push(t, op, what)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<NodeId> {
        let (x, y) = (self.v(a), self.v(b));
        same_shape(x, y, what)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.push(t, op, what)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.v(a).dims2()?;
        let (k2, m) = self.v(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dimensions {k} and {k2}")));
        }
        let out = matmul(self.v(a).data(), self.v(b).data(), n, k, m);
        self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a[n,m] + b[m]` broadcast over rows.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, m) = self.v(a).dims2()?;
        if self.v(b).len() != m {
            return Err(Error::Shape(format!("bias of length {} for {m} columns", self.v(b).len())));
        }
        let bias = self.v(b).data().to_vec();
        let mut out = self.v(a).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        self.push(Tensor::matrix(n, m, out)?, Op::AddBias(a, b), "add_bias")
    }

    /// `a[n,m] * g[m]` broadcast over rows.
    pub fn mul_row(&mut self, a: NodeId, g: NodeId) -> Result<NodeId> {
        let (n, m) = self.v(a).dims2()?;
        if self.v(g).len() != m {
            return Err(Error::Shape(format!("row scale of length {} for {m} columns", self.v(g).len())));
        }
        let gain = self.v(g).data().to_vec();
        let mut out = self.v(a).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &gv) in row.iter_mut().zip(&gain) {
                *o *= gv;
            }
        }
        self.push(Tensor::matrix(n, m, out)?, Op::MulRow(a, g), "mul_row")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.unary(a, |x| x * s, Op::Scale(a, s), "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.unary(a, |x| x + s, Op::AddScalar(a), "add_scalar")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a), "relu")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::tanh, Op::Tanh(a), "tanh")
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, softplus, Op::Softplus(a), "softplus")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::exp, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.v(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        self.unary(a, f64::ln, Op::Log(a), "log")
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x * x, Op::Square(a), "square")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.v(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.v(a);
        if x.is_empty() {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Column means of `a[n,m]`, giving `[1,m]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.v(a).dims2()?;
        if n == 0 {
            return Err(Error::Shape("mean over zero rows".into()));
        }
        let mut out = vec![0.0; m];
        for row in self.v(a).data().chunks(m) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        self.push(Tensor::matrix(1, m, out)?, Op::MeanRows(a), "mean_rows")
    }

    /// Tiles a `[1,m]` row `n` times.
    pub fn repeat_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let (r, m) = self.v(a).dims2()?;
        if r != 1 {
            return Err(Error::Shape(format!("repeat_rows needs a single row, got {r}")));
        }
        let out = self.v(a).data().repeat(n);
        self.push(Tensor::matrix(n, m, out)?, Op::RepeatRows(a), "repeat_rows")
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.v(a).dims2()?;
        let mut out = self.v(a).data().to_vec();
        for row in out.chunks_mut(m) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.push(Tensor::matrix(n, m, out)?, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let (n, m) = self.v(a).dims2()?;
        let mut out = self.v(a).data().to_vec();
        let mut inv_std = Vec::with_capacity(n);
        for row in out.chunks_mut(m) {
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * inv);
            inv_std.push(inv);
        }
        self.push(Tensor::matrix(n, m, out)?, Op::LayerNorm { x: a, inv_std }, "layer_norm")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.v(a).dims2()?;
        let x = self.v(a).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = x[i * m + j];
            }
        }
        self.push(Tensor::matrix(m, n, out)?, Op::Transpose(a), "transpose")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = Tensor::new(shape.to_vec(), self.v(a).data().to_vec())?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (n, _) = self.v(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.v(p).dims2()?;
            if r != n {
                return Err(Error::Shape(format!("concat rows {r} and {n}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.v(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::matrix(n, total, out)?, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (n, m) = self.v(a).dims2()?;
        if start >= end || end > m {
            return Err(Error::Shape(format!("column slice {start}..{end} of {m}")));
        }
        let w = end - start;
        let x = self.v(a).data();
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(&x[i * m + start..i * m + end]);
        }
        self.push(Tensor::matrix(n, w, out)?, Op::SliceCols(a, start), "slice_cols")
    }

    /// Stride-1 convolution with zero "same" padding: `x[N,C,H,W]`, `w[O,C,K,K]` (K odd), `b[O]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, c, h, wd) = self.v(x).dims4()?;
        let (o, c2, k, k2) = self.v(w).dims4()?;
        if c != c2 || k != k2 || k % 2 == 0 {
            return Err(Error::Shape(format!("conv kernel {:?} for input {:?}", self.v(w).shape(), self.v(x).shape())));
        }
        if self.v(b).len() != o {
            return Err(Error::Shape(format!("conv bias length {} for {o} filters", self.v(b).len())));
        }
        let pad = k / 2;
        let (xd, wdat, bd) = (self.v(x).data(), self.v(w).data(), self.v(b).data());
        let mut out = vec![0.0; n * o * h * wd];
        for ni in 0..n {
            for oi in 0..o {
                let plane = &mut out[(ni * o + oi) * h * wd..(ni * o + oi + 1) * h * wd];
                plane.iter_mut().for_each(|v| *v = bd[oi]);
                for ci in 0..c {
                    let xin = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                    for p in 0..k {
                        for q in 0..k {
                            let wv = wdat[((oi * c + ci) * k + p) * k + q];
                            for i in 0..h {
                                let si = i as isize + p as isize - pad as isize;
                                if si < 0 || si >= h as isize {
                                    continue;
                                }
                                let si = si as usize;
                                for j in 0..wd {
                                    let sj = j as isize + q as isize - pad as isize;
                                    if sj >= 0 && sj < wd as isize {
                                        plane[i * wd + j] += wv * xin[si * wd + sj as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(Tensor::new(vec![n, o, h, wd], out)?, Op::Conv2d { x, w, b }, "conv2d")
    }

    /// Non-overlapping `k×k` average pooling of `x[N,C,H,W]`; H and W must be multiples of k.
    pub fn avg_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.v(x).dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Shape(format!("pool size {k} does not tile {h}x{w}")));
        }
        let (ho, wo) = (h / k, w / k);
        let xd = self.v(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let norm = 1.0 / (k * k) as f64;
        for plane in 0..n * c {
            for i in 0..h {
                for j in 0..w {
                    out[plane * ho * wo + (i / k) * wo + j / k] += xd[plane * h * w + i * w + j] * norm;
                }
            }
        }
        self.push(Tensor::new(vec![n, c, ho, wo], out)?, Op::AvgPool(x, k), "avg_pool")
    }

    /// Spatial mean of `x[N,C,H,W]`, giving `[N,C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.v(x).dims4()?;
        let hw = h * w;
        let out = self.v(x).data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        self.push(Tensor::matrix(n, c, out)?, Op::GlobalAvgPool(x), "global_avg_pool")
    }

    /// Reverse pass from a single-element output with seed gradient 1.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let node = self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::State("backward called before any forward computation".into()))?;
        if node.value.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar output, got {:?}", node.value.shape())));
        }
        self.backward_with(output, Tensor::filled(node.value.shape(), 1.0))
    }

    pub fn backward_with(&self, output: NodeId, seed: Tensor) -> Result<Gradients> {
        let node = self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::State("backward called before any forward computation".into()))?;
        same_shape(&node.value, &seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let params = self.nodes[..=output.0]
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((i, p)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &self.nodes[idx].value;
        let gd = g.data();
        let add = |grads: &mut [Option<Tensor>], id: NodeId, delta: Vec<f64>| -> Result<()> {
            let shape = self.v(id).shape().to_vec();
            match &mut grads[id.0] {
                Some(t) => t.data_mut().iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(Tensor::new(shape, delta)?),
            }
            Ok(())
        };
        let elementwise = |a: NodeId, f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..self.v(a).len()).map(|i| gd[i] * f(i)).collect()
        };
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (n, k) = self.v(a).dims2()?;
                let (_, m) = self.v(b).dims2()?;
                add(grads, a, matmul_bt(gd, self.v(b).data(), n, m, k))?;
                add(grads, b, matmul_at(self.v(a).data(), gd, n, k, m))?;
            }
            &Op::AddBias(a, b) => {
                let (_, m) = y.dims2()?;
                let mut db = vec![0.0; m];
                for row in gd.chunks(m) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                add(grads, a, gd.to_vec())?;
                add(grads, b, db)?;
            }
            &Op::MulRow(a, gn) => {
                let (_, m) = y.dims2()?;
                let (x, gain) = (self.v(a).data(), self.v(gn).data());
                let da = (0..x.len()).map(|i| gd[i] * gain[i % m]).collect();
                let mut dg = vec![0.0; m];
                for (i, (&d, &xv)) in gd.iter().zip(x).enumerate() {
                    dg[i % m] += d * xv;
                }
                add(grads, a, da)?;
                add(grads, gn, dg)?;
            }
            &Op::Add(a, b) => {
                add(grads, a, gd.to_vec())?;
                add(grads, b, gd.to_vec())?;
            }
            &Op::Sub(a, b) => {
                add(grads, a, gd.to_vec())?;
                add(grads, b, gd.iter().map(|v| -v).collect())?;
            }
            &Op::Mul(a, b) => {
                let (x, z) = (self.v(a).data(), self.v(b).data());
                add(grads, a, elementwise(a, &|i| z[i]))?;
                add(grads, b, elementwise(b, &|i| x[i]))?;
            }
            &Op::Scale(a, s) => add(grads, a, gd.iter().map(|v| v * s).collect())?,
            &Op::AddScalar(a) => add(grads, a, gd.to_vec())?,
            &Op::Relu(a) => {
                let x = self.v(a).data();
                add(grads, a, elementwise(a, &|i| if x[i] > 0.0 { 1.0 } else { 0.0 }))?
            }
            &Op::Tanh(a) => add(grads, a, elementwise(a, &|i| 1.0 - y.data()[i] * y.data()[i]))?,
            &Op::Softplus(a) => {
                let x = self.v(a).data();
                add(grads, a, elementwise(a, &|i| sigmoid(x[i])))?
            }
            &Op::Exp(a) => add(grads, a, elementwise(a, &|i| y.data()[i]))?,
            &Op::Log(a) => {
                let x = self.v(a).data();
                add(grads, a, elementwise(a, &|i| 1.0 / x[i]))?
            }
            &Op::Square(a) => {
                let x = self.v(a).data();
                add(grads, a, elementwise(a, &|i| 2.0 * x[i]))?
            }
            &Op::Sum(a) => add(grads, a, vec![gd[0]; self.v(a).len()])?,
            &Op::Mean(a) => {
                let n = self.v(a).len();
                add(grads, a, vec![gd[0] / n as f64; n])?
            }
            &Op::MeanRows(a) => {
                let (n, m) = self.v(a).dims2()?;
                add(grads, a, (0..n * m).map(|i| gd[i % m] / n as f64).collect())?
            }
            &Op::RepeatRows(a) => {
                let (_, m) = y.dims2()?;
                let mut da = vec![0.0; m];
                for row in gd.chunks(m) {
                    da.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                add(grads, a, da)?
            }
            &Op::SoftmaxRows(a) => {
                let (_, m) = y.dims2()?;
                let mut da = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(m).zip(gd.chunks(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    da.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                add(grads, a, da)?
            }
            Op::LayerNorm { x, inv_std } => {
                let (_, m) = y.dims2()?;
                let mut da = Vec::with_capacity(y.len());
                for ((yr, gr), inv) in y.data().chunks(m).zip(gd.chunks(m)).zip(inv_std) {
                    let mg = gr.iter().sum::<f64>() / m as f64;
                    let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / m as f64;
                    da.extend(gr.iter().zip(yr).map(|(gv, yv)| inv * (gv - mg - yv * mgy)));
                }
                add(grads, *x, da)?
            }
            &Op::Transpose(a) => {
                let (n, m) = self.v(a).dims2()?;
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        da[i * m + j] = gd[j * n + i];
                    }
                }
                add(grads, a, da)?
            }
            &Op::Reshape(a) => add(grads, a, gd.to_vec())?,
            Op::ConcatCols(parts) => {
                let (n, total) = y.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.v(p).dims2()?;
                    let mut dp = Vec::with_capacity(n * w);
                    for i in 0..n {
                        dp.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                    }
                    add(grads, p, dp)?;
                    offset += w;
                }
            }
            &Op::SliceCols(a, start) => {
                let (n, m) = self.v(a).dims2()?;
                let (_, w) = y.dims2()?;
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    da[i * m + start..i * m + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                add(grads, a, da)?
            }
            &Op::Conv2d { x, w, b } => {
                let (n, c, h, wd) = self.v(x).dims4()?;
                let (o, _, k, _) = self.v(w).dims4()?;
                let pad = k / 2;
                let (xd, wdat) = (self.v(x).data(), self.v(w).data());
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wdat.len()];
                let mut db = vec![0.0; o];
                for ni in 0..n {
                    for oi in 0..o {
                        let gplane = &gd[(ni * o + oi) * h * wd..(ni * o + oi + 1) * h * wd];
                        db[oi] += gplane.iter().sum::<f64>();
                        for ci in 0..c {
                            let base = (ni * c + ci) * h * wd;
                            for p in 0..k {
                                for q in 0..k {
                                    let widx = ((oi * c + ci) * k + p) * k + q;
                                    let wv = wdat[widx];
                                    let mut acc = 0.0;
                                    for i in 0..h {
                                        let si = i as isize + p as isize - pad as isize;
                                        if si < 0 || si >= h as isize {
                                            continue;
                                        }
                                        let si = si as usize;
                                        for j in 0..wd {
                                            let sj = j as isize + q as isize - pad as isize;
                                            if sj >= 0 && sj < wd as isize {
                                                let xi = base + si * wd + sj as usize;
                                                let gv = gplane[i * wd + j];
                                                acc += gv * xd[xi];
                                                dx[xi] += gv * wv;
                                            }
                                        }
                                    }
                                    dw[widx] += acc;
                                }
                            }
                        }
                    }
                }
                add(grads, x, dx)?;
                add(grads, w, dw)?;
                add(grads, b, db)?;
            }
            &Op::AvgPool(x, k) => {
                let (_, _, h, w) = self.v(x).dims4()?;
                let (ho, wo) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let planes = self.v(x).len() / (h * w);
                let mut dx = vec![0.0; self.v(x).len()];
                for plane in 0..planes {
                    for i in 0..h {
                        for j in 0..w {
                            dx[plane * h * w + i * w + j] = gd[plane * ho * wo + (i / k) * wo + j / k] * norm;
                        }
                    }
                }
                add(grads, x, dx)?
            }
            &Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.v(x).dims4()?;
                let hw = h * w;
                add(grads, x, (0..self.v(x).len()).map(|i| gd[i / hw] / hw as f64).collect())?
            }
        }
        Ok(())
    }
}

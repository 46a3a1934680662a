use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{rodrigues, rodrigues_derivatives};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        p: usize,
        q: usize,
        r: usize,
    },
    RotExpm(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    PseudoHuber {
        z: Var,
        mask: Option<Tensor>,
        coords: usize,
        eps: f64,
    },
    CenterVisible {
        z: Var,
        mask: Tensor,
        coords: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics computed by a training-mode normalization node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Reverse-mode recording of primitive operations.
///
/// Nodes are appended in evaluation order, which is a topological order of
/// the expression graph, so the backward sweep simply walks them in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `var`; exact zeros when `var` did not participate.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.adjoints[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.adjoints[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

fn ensure_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        ensure_finite(&value, name)?;
        let requires_grad = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, op, requires_grad))
    }

    /// Trainable input; gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        ensure_finite(&value, "leaf")?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        ensure_finite(&value, "constant")?;
        Ok(self.push(value, Op::Constant, false))
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Constant, false)
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::shape(op, format!("rank > 2: {:?}", self.value(v).shape())))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} @ {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let value = Tensor::matrix(m, n, out)?;
        self.record(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.record(value, op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `x + 1·row`, broadcasting a `1 × m` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, m) = self.dims(x, "add_row")?;
        if self.value(row).len() != m {
            return Err(Error::shape("add_row", format!("row of {} vs {m} columns", self.value(row).len())));
        }
        let mut data = self.value(x).data().to_vec();
        let r = self.value(row).data();
        for i in 0..n {
            for (d, b) in data[i * m..(i + 1) * m].iter_mut().zip(r) {
                *d += b;
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.record(value, Op::AddRow(x, row), &[x, row], "add_row")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.record(value, Op::Scale(x, factor), &[x], "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.record(value, Op::Relu(x), &[x], "relu")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.record(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.dims(x, "slice_cols")?;
        if start > end || end > m {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {m}")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&src[i * m + start..i * m + end]);
        }
        let value = Tensor::matrix(n, w, data)?;
        self.record(value, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ma) = self.dims(a, "concat_cols")?;
        let (nb, mb) = self.dims(b, "concat_cols")?;
        if n != nb {
            return Err(Error::shape("concat_cols", format!("{n} rows vs {nb} rows")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            data.extend_from_slice(&da[i * ma..(i + 1) * ma]);
            data.extend_from_slice(&db[i * mb..(i + 1) * mb]);
        }
        let value = Tensor::matrix(n, ma + mb, data)?;
        self.record(value, Op::ConcatCols(a, b), &[a, b], "concat_cols")
    }

    /// Per-row matrix product: row `i` of `a` holds a row-major `p × q`
    /// matrix, row `i` of `b` a `q × r` matrix; row `i` of the result holds
    /// their `p × r` product.
    pub fn batch_matmul(&mut self, a: Var, b: Var, p: usize, q: usize, r: usize) -> Result<Var> {
        let (n, ca) = self.dims(a, "batch_matmul")?;
        let (nb, cb) = self.dims(b, "batch_matmul")?;
        if n != nb || ca != p * q || cb != q * r {
            return Err(Error::shape(
                "batch_matmul",
                format!("{n}x{ca} with {nb}x{cb} as ({p}x{q})({q}x{r})"),
            ));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; n * p * r];
        for i in 0..n {
            let ai = &da[i * p * q..(i + 1) * p * q];
            let bi = &db[i * q * r..(i + 1) * q * r];
            let oi = &mut data[i * p * r..(i + 1) * p * r];
            for row in 0..p {
                for inner in 0..q {
                    let s = ai[row * q + inner];
                    let brow = &bi[inner * r..(inner + 1) * r];
                    for (o, bv) in oi[row * r..(row + 1) * r].iter_mut().zip(brow) {
                        *o += s * bv;
                    }
                }
            }
        }
        let value = Tensor::matrix(n, p * r, data)?;
        self.record(value, Op::BatchMatMul { a, b, p, q, r }, &[a, b], "batch_matmul")
    }

    /// Rotation matrices `expm([θ]×)` for each row `θ` of an `n × 3` input,
    /// returned row-major as an `n × 9` matrix.
    pub fn rot_expm(&mut self, theta: Var) -> Result<Var> {
        let (n, c) = self.dims(theta, "rot_expm")?;
        if c != 3 {
            return Err(Error::shape("rot_expm", format!("expected n x 3, got {n}x{c}")));
        }
        let src = self.value(theta).data();
        let mut data = Vec::with_capacity(n * 9);
        for i in 0..n {
            let t = [src[3 * i], src[3 * i + 1], src[3 * i + 2]];
            data.extend_from_slice(&rodrigues(t));
        }
        let value = Tensor::matrix(n, 9, data)?;
        self.record(value, Op::RotExpm(theta), &[theta], "rot_expm")
    }

    /// Column-wise normalization `gamma * (x - mean) / sqrt(var + eps) + beta`.
    ///
    /// With `stats = None` the mean and variance are taken over the batch
    /// (rows) and returned; otherwise the given running statistics are used
    /// as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, m) = self.dims(x, "batch_norm")?;
        if self.value(gamma).len() != m || self.value(beta).len() != m {
            return Err(Error::shape("batch_norm", "gamma/beta width"));
        }
        let xs = self.value(x).data();
        let (mean, var, batch) = match stats {
            Some((mu, var)) => {
                if mu.len() != m || var.len() != m {
                    return Err(Error::shape("batch_norm", "running stats width"));
                }
                (mu.to_vec(), var.to_vec(), None)
            }
            None => {
                if n == 0 {
                    return Err(Error::shape("batch_norm", "empty batch"));
                }
                let mut mu = vec![0.0; m];
                for i in 0..n {
                    for (a, v) in mu.iter_mut().zip(&xs[i * m..(i + 1) * m]) {
                        *a += v;
                    }
                }
                mu.iter_mut().for_each(|a| *a /= n as f64);
                let mut var = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        let d = xs[i * m + j] - mu[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|a| *a /= n as f64);
                let stats = BatchStats {
                    mean: mu.clone(),
                    var: var.clone(),
                    count: n,
                };
                (mu, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = vec![0.0; n * m];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let h = (xs[i * m + j] - mean[j]) * inv_std[j];
                normalized[i * m + j] = h;
                out[i * m + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        let batch_stats = batch.is_some();
        let v = self.record(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
            "batch_norm",
        )?;
        Ok((v, batch))
    }

    /// Row-wise robust reprojection sum.
    ///
    /// Row `i` of `z` holds a row-major `coords × K` block of residual
    /// vectors (one per column). The output is the `n × 1` matrix
    /// `(1/K) Σ_k mask[i,k] · ‖z_i[:,k]‖_ε` with the pseudo-Huber norm
    /// `‖z‖_ε = ε(√(1 + (‖z‖/ε)²) − 1)`.
    pub fn pseudo_huber(&mut self, z: Var, mask: Option<&Tensor>, coords: usize, eps: f64) -> Result<Var> {
        let (n, c) = self.dims(z, "pseudo_huber")?;
        if coords == 0 || c % coords != 0 || c == 0 {
            return Err(Error::shape("pseudo_huber", format!("{c} columns not divisible into {coords} coordinates")));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::InvalidConfig(format!("pseudo-Huber epsilon must be > 0, got {eps}")));
        }
        let k = c / coords;
        if let Some(m) = mask {
            if m.dims2() != Some((n, k)) {
                return Err(Error::shape("pseudo_huber", format!("mask {:?} vs {n}x{k}", m.shape())));
            }
        }
        let zs = self.value(z).data();
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &zs[i * c..(i + 1) * c];
            let mut acc = 0.0;
            for kk in 0..k {
                let w = mask.map_or(1.0, |m| m.data()[i * k + kk]);
                if w == 0.0 {
                    continue;
                }
                let r2: f64 = (0..coords).map(|d| row[d * k + kk].powi(2)).sum();
                acc += w * pseudo_huber_sq(r2, eps);
            }
            *o = acc / k as f64;
        }
        let value = Tensor::matrix(n, 1, out)?;
        let op = Op::PseudoHuber {
            z,
            mask: mask.cloned(),
            coords,
            eps,
        };
        self.record(value, op, &[z], "pseudo_huber")
    }

    /// Subtracts, per row and coordinate, the mean over visible columns;
    /// invisible columns of the result are zero.
    pub fn center_visible(&mut self, z: Var, mask: &Tensor, coords: usize) -> Result<Var> {
        let (n, c) = self.dims(z, "center_visible")?;
        if coords == 0 || c % coords != 0 {
            return Err(Error::shape("center_visible", format!("{c} columns into {coords} coordinates")));
        }
        let k = c / coords;
        if mask.dims2() != Some((n, k)) {
            return Err(Error::shape("center_visible", format!("mask {:?} vs {n}x{k}", mask.shape())));
        }
        let zs = self.value(z).data();
        let ms = mask.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let m = &ms[i * k..(i + 1) * k];
            let count = m.iter().filter(|&&w| w != 0.0).count();
            if count == 0 {
                return Err(Error::NoVisiblePoints);
            }
            for d in 0..coords {
                let base = i * c + d * k;
                let mean: f64 = (0..k).filter(|&kk| m[kk] != 0.0).map(|kk| zs[base + kk]).sum::<f64>() / count as f64;
                for kk in 0..k {
                    if m[kk] != 0.0 {
                        out[base + kk] = zs[base + kk] - mean;
                    }
                }
            }
        }
        let value = Tensor::matrix(n, c, out)?;
        let op = Op::CenterVisible {
            z,
            mask: mask.clone(),
            coords,
        };
        self.record(value, op, &[z], "center_visible")
    }

    /// Reverse sweep from a scalar output. Consumes the tape's adjoint
    /// state: a second call fails with [`Error::TapeConsumed`].
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes.is_empty() {
            return Err(Error::shape("backward", "empty tape"));
        }
        let out_value = &self.nodes[output.0].value;
        if out_value.len() != 1 {
            return Err(Error::NotScalar(out_value.shape().to_vec()));
        }
        self.consumed = true;

        let n = output.0 + 1;
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Tensor::filled(out_value.shape(), 1.0));

        for idx in (0..n).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { adjoints: adj, shapes })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("checked in forward");
                let nn = self.value(*b).cols();
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, nn, k, g.data(), false, self.value(*b).data(), true, &mut da, 0.0);
                    let t = Tensor::new(self.value(*a).shape().to_vec(), da)?;
                    self.accumulate(adj, *a, t);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * nn];
                    gemm(k, m, nn, self.value(*a).data(), true, g.data(), false, &mut db, 0.0);
                    let t = Tensor::new(self.value(*b).shape().to_vec(), db)?;
                    self.accumulate(adj, *b, t);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(adj, *a, Tensor::new(va.shape().to_vec(), d)?);
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(adj, *b, Tensor::new(vb.shape().to_vec(), d)?);
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(adj, *x, g.clone());
                if self.rg(*row) {
                    let m = self.value(*row).len();
                    let mut d = vec![0.0; m];
                    for chunk in g.data().chunks(m) {
                        for (a, v) in d.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    self.accumulate(adj, *row, Tensor::new(self.value(*row).shape().to_vec(), d)?);
                }
            }
            Op::Scale(x, f) => self.accumulate(adj, *x, g.map(|v| v * f)),
            Op::Relu(x) => {
                let vx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(adj, *x, Tensor::new(vx.shape().to_vec(), d)?);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.accumulate(adj, *x, Tensor::filled(self.value(*x).shape(), s));
            }
            Op::Mean(x) => {
                let len = self.value(*x).len() as f64;
                let s = g.data()[0] / len;
                self.accumulate(adj, *x, Tensor::filled(self.value(*x).shape(), s));
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let (n, m) = self.value(*x).dims2().expect("checked in forward");
                    let w = g.cols();
                    let mut d = vec![0.0; n * m];
                    for i in 0..n {
                        d[i * m + start..i * m + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    self.accumulate(adj, *x, Tensor::new(self.value(*x).shape().to_vec(), d)?);
                }
            }
            Op::ConcatCols(a, b) => {
                let ma = self.value(*a).cols();
                let mb = self.value(*b).cols();
                let n = g.rows();
                let (mut da, mut db) = (Vec::with_capacity(n * ma), Vec::with_capacity(n * mb));
                for i in 0..n {
                    let row = &g.data()[i * (ma + mb)..(i + 1) * (ma + mb)];
                    da.extend_from_slice(&row[..ma]);
                    db.extend_from_slice(&row[ma..]);
                }
                self.accumulate(adj, *a, Tensor::new(self.value(*a).shape().to_vec(), da)?);
                self.accumulate(adj, *b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
            }
            Op::BatchMatMul { a, b, p, q, r } => {
                let (p, q, r) = (*p, *q, *r);
                let n = g.rows();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut da = vec![0.0; n * p * q];
                    for i in 0..n {
                        let gi = &g.data()[i * p * r..(i + 1) * p * r];
                        let bi = &vb[i * q * r..(i + 1) * q * r];
                        for row in 0..p {
                            for inner in 0..q {
                                da[i * p * q + row * q + inner] = gi[row * r..(row + 1) * r]
                                    .iter()
                                    .zip(&bi[inner * r..(inner + 1) * r])
                                    .map(|(x, y)| x * y)
                                    .sum();
                            }
                        }
                    }
                    self.accumulate(adj, *a, Tensor::new(self.value(*a).shape().to_vec(), da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * q * r];
                    for i in 0..n {
                        let gi = &g.data()[i * p * r..(i + 1) * p * r];
                        let ai = &va[i * p * q..(i + 1) * p * q];
                        let di = &mut db[i * q * r..(i + 1) * q * r];
                        for row in 0..p {
                            for inner in 0..q {
                                let s = ai[row * q + inner];
                                for (d, gv) in di[inner * r..(inner + 1) * r].iter_mut().zip(&gi[row * r..(row + 1) * r]) {
                                    *d += s * gv;
                                }
                            }
                        }
                    }
                    self.accumulate(adj, *b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
                }
            }
            Op::RotExpm(theta) => {
                let vt = self.value(*theta);
                let n = vt.rows();
                let mut d = vec![0.0; n * 3];
                for i in 0..n {
                    let t = [vt.data()[3 * i], vt.data()[3 * i + 1], vt.data()[3 * i + 2]];
                    let derivs = rodrigues_derivatives(t);
                    let gi = &g.data()[9 * i..9 * (i + 1)];
                    for (axis, dr) in derivs.iter().enumerate() {
                        d[3 * i + axis] = gi.iter().zip(dr).map(|(x, y)| x * y).sum();
                    }
                }
                self.accumulate(adj, *theta, Tensor::new(vt.shape().to_vec(), d)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let (n, m) = g.dims2().expect("matrix");
                let gd = g.data();
                let mut dgamma = vec![0.0; m];
                let mut dbeta = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        dgamma[j] += gd[i * m + j] * normalized[i * m + j];
                        dbeta[j] += gd[i * m + j];
                    }
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0; n * m];
                    if *batch_stats {
                        let nf = n as f64;
                        for i in 0..n {
                            for j in 0..m {
                                dx[i * m + j] = gam[j] * inv_std[j] / nf
                                    * (nf * gd[i * m + j] - dbeta[j] - normalized[i * m + j] * dgamma[j]);
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..m {
                                dx[i * m + j] = gd[i * m + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate(adj, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                }
                self.accumulate(adj, *gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dgamma)?);
                self.accumulate(adj, *beta, Tensor::new(self.value(*beta).shape().to_vec(), dbeta)?);
            }
            Op::PseudoHuber { z, mask, coords, eps } => {
                let vz = self.value(*z);
                let (n, c) = vz.dims2().expect("matrix");
                let k = c / coords;
                let mut d = vec![0.0; n * c];
                for i in 0..n {
                    let gi = g.data()[i] / k as f64;
                    let row = &vz.data()[i * c..(i + 1) * c];
                    for kk in 0..k {
                        let w = mask.as_ref().map_or(1.0, |m| m.data()[i * k + kk]);
                        if w == 0.0 {
                            continue;
                        }
                        let r2: f64 = (0..*coords).map(|dd| row[dd * k + kk].powi(2)).sum();
                        // d/dz ε(√(1+r²/ε²) − 1) = z / (ε √(1 + r²/ε²))
                        let f = w * gi / (eps * (1.0 + r2 / (eps * eps)).sqrt());
                        for dd in 0..*coords {
                            d[i * c + dd * k + kk] = f * row[dd * k + kk];
                        }
                    }
                }
                self.accumulate(adj, *z, Tensor::new(vz.shape().to_vec(), d)?);
            }
            Op::CenterVisible { z, mask, coords } => {
                let (n, c) = g.dims2().expect("matrix");
                let k = c / coords;
                let mut d = vec![0.0; n * c];
                for i in 0..n {
                    let m = &mask.data()[i * k..(i + 1) * k];
                    let count = m.iter().filter(|&&w| w != 0.0).count() as f64;
                    for dd in 0..*coords {
                        let base = i * c + dd * k;
                        let mean: f64 = (0..k).filter(|&kk| m[kk] != 0.0).map(|kk| g.data()[base + kk]).sum::<f64>() / count;
                        for kk in 0..k {
                            if m[kk] != 0.0 {
                                d[base + kk] = g.data()[base + kk] - mean;
                            }
                        }
                    }
                }
                self.accumulate(adj, *z, Tensor::new(self.value(*z).shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

/// Pseudo-Huber value from a squared norm.
pub(crate) fn pseudo_huber_sq(r2: f64, eps: f64) -> f64 {
    // ε(√(1+x) − 1) = ε·x / (√(1+x) + 1), stable for small x
    let x = r2 / (eps * eps);
    eps * x / ((1.0 + x).sqrt() + 1.0)
}

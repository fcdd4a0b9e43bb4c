//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward call records a node; `backward` walks the node list in
//! reverse (creation order is a topological order) and accumulates
//! gradients into every node on a path to a `requires_grad` leaf.

use super::{matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    ConcatRows(usize, usize),
    SliceRows { x: usize, start: usize },
    Sigmoid(usize),
    Gelu(usize),
    /// Row softmax; the optional mask marks *excluded* key columns.
    SoftmaxRows(usize),
    LayerNormRows(usize),
    MeanPoolRows(usize),
    L2NormalizeRows(usize),
    Sum(usize),
    Mse(usize, usize),
    Cosine(usize, usize),
    Embedding { table: usize, ids: Vec<usize> },
    Conv2d { x: usize, w: usize, b: usize },
    MulChannels(usize, usize),
    AddChannels(usize, usize),
    MulSpatial(usize, usize),
    ConcatChannels(usize, usize),
    UpsampleNearest(usize, usize),
    AddRow(usize, usize),
    Exp(usize),
    /// Multiply a tensor by a one-element tensor variable.
    ScaleVar(usize, usize),
    /// Mean over rows of (logsumexp(row) - row[diag]); InfoNCE building block.
    XentDiag(usize),
    /// `[h, w, c]` -> `[(h/p)*(w/p), p*p*c]` patch extraction.
    Patchify(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass; owns every intermediate value.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    grads: Vec<Option<Vec<f64>>>,
}

const LN_EPS: f64 = 1e-12;
const NORM_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated for `v` by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0).and_then(|g| {
            g.as_ref().map(|d| Tensor {
                shape: self.nodes[v.0].value.shape().to_vec(),
                data: d.clone(),
            })
        })
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn out(&mut self, value: Tensor, op: Op, kernel: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(kernel));
        }
        let needs = match &op {
            Op::Leaf => false,
            op => self.op_parents(op).iter().any(|&p| self.nodes[p].needs_grad),
        };
        Ok(self.push(value, op, needs))
    }

    fn op_parents(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::ConcatRows(a, b)
            | Op::Mse(a, b)
            | Op::Cosine(a, b)
            | Op::MulChannels(a, b)
            | Op::AddChannels(a, b)
            | Op::MulSpatial(a, b)
            | Op::ConcatChannels(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SliceRows { x: a, .. }
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::LayerNormRows(a)
            | Op::MeanPoolRows(a)
            | Op::L2NormalizeRows(a)
            | Op::Sum(a)
            | Op::Embedding { table: a, .. }
            | Op::UpsampleNearest(a, _)
            | Op::Exp(a)
            | Op::XentDiag(a)
            | Op::Patchify(a, _) => vec![*a],
            Op::ScaleVar(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, b } => vec![*x, *w, *b],
        }
    }

    fn same_shape(&self, a: Var, b: Var, kernel: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dim(format!(
                "{kernel}: shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.out(data, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.out(data, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "elementwise_mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.out(data, Op::Mul(a.0, b.0), "elementwise_mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v * c).collect(),
        };
        self.out(out, Op::Scale(a.0, c), "scale")
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::Dim(format!(
                "matmul: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_raw(ta.data(), tb.data(), m, k, n, &mut out);
        self.out(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a.0, b.0),
            "matmul",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::Dim(format!("transpose: rank {} input", t.shape().len())));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        self.out(
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            Op::Transpose(a.0),
            "transpose",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.out(t, Op::Reshape(a.0), "reshape")
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(Error::Dim(format!(
                "concat_rows: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let shape = vec![ta.rows() + tb.rows(), ta.cols()];
        let mut data = Vec::with_capacity(shape[0] * shape[1]);
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        self.out(Tensor { shape, data }, Op::ConcatRows(a.0, b.0), "concat_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || end > t.rows() || start >= end {
            return Err(Error::Dim(format!(
                "slice_rows: [{start}, {end}) of {:?}",
                t.shape()
            )));
        }
        let n = t.cols();
        let data = t.data()[start * n..end * n].to_vec();
        self.out(
            Tensor {
                shape: vec![end - start, n],
                data,
            },
            Op::SliceRows { x: a.0, start },
            "slice_rows",
        )
    }

    /// `x[p,q] + row[1,q]` broadcast over rows (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tx.shape().len() != 2 || tr.numel() != tx.cols() {
            return Err(Error::Dim(format!(
                "add_row: {:?} + {:?}",
                tx.shape(),
                tr.shape()
            )));
        }
        let n = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tr.data()[i % n])
            .collect();
        self.out(
            Tensor {
                shape: tx.shape().to_vec(),
                data,
            },
            Op::AddRow(x.0, row.0),
            "add_row",
        )
    }

    // ---- nonlinearities ----

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        self.out(
            Tensor {
                shape: t.shape().to_vec(),
                data,
            },
            Op::Sigmoid(a.0),
            "sigmoid",
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&v| gelu(v)).collect();
        self.out(
            Tensor {
                shape: t.shape().to_vec(),
                data,
            },
            Op::Gelu(a.0),
            "gelu",
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_rows_masked(a, None)
    }

    /// Row softmax; `key_mask[j] = true` excludes column `j` (PAD keys).
    pub fn softmax_rows_masked(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::Dim("softmax_rows: rank-2 input required".into()));
        }
        let (m, n) = (t.rows(), t.cols());
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(Error::Dim("softmax_rows: mask length mismatch".into()));
            }
            if mask.iter().all(|&b| b) {
                return Err(Error::Contract("softmax_rows: every key masked".into()));
            }
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if key_mask.map_or(true, |mk| !mk[j]) && row[j] > mx {
                    mx = row[j];
                }
            }
            let mut z = 0.0;
            for j in 0..n {
                if key_mask.map_or(true, |mk| !mk[j]) {
                    let e = (row[j] - mx).exp();
                    data[i * n + j] = e;
                    z += e;
                }
            }
            for j in 0..n {
                data[i * n + j] /= z;
            }
        }
        self.out(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::SoftmaxRows(a.0),
            "softmax_rows",
        )
    }

    pub fn layernorm_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::Dim("layernorm_rows: rank-2 input required".into()));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let s = (var + LN_EPS).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mu) / s;
            }
        }
        self.out(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::LayerNormRows(a.0),
            "layernorm_rows",
        )
    }

    /// Mean over rows: `[k, d] -> [1, d]`.
    pub fn mean_pool_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::Dim("mean_pool_rows: rank-2 input required".into()));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += t.data()[i * n + j];
            }
        }
        for v in &mut data {
            *v /= m as f64;
        }
        self.out(
            Tensor {
                shape: vec![1, n],
                data,
            },
            Op::MeanPoolRows(a.0),
            "mean_pool_rows",
        )
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::Dim("l2_normalize_rows: rank-2 input required".into()));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_EPS {
                return Err(Error::DegenerateInput(format!(
                    "l2_normalize_rows: zero-norm row {i}"
                )));
            }
            for j in 0..n {
                data[i * n + j] = row[j] / norm;
            }
        }
        self.out(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::L2NormalizeRows(a.0),
            "l2_normalize_rows",
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.out(Tensor::scalar(s), Op::Sum(a.0), "sum")
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.out(Tensor::scalar(s / n), Op::Mse(a.0, b.0), "mse")
    }

    /// Cosine similarity of two same-size tensors viewed as flat vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(Error::Dim(format!(
                "cosine: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (na, nb) = (self.value(a).l2_norm(), self.value(b).l2_norm());
        if na < NORM_EPS || nb < NORM_EPS {
            return Err(Error::DegenerateInput("cosine: zero-norm argument".into()));
        }
        let dot: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        self.out(
            Tensor::scalar(dot / (na * nb)),
            Op::Cosine(a.0, b.0),
            "cosine",
        )
    }

    // ---- lookup ----

    /// Row gather: `table[V, d]`, ids -> `[len(ids), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Dim("embedding: rank-2 table required".into()));
        }
        let (v, d) = (t.rows(), t.cols());
        if ids.iter().any(|&i| i >= v) {
            return Err(Error::Contract("embedding: id out of range".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        self.out(
            Tensor {
                shape: vec![ids.len(), d],
                data,
            },
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    // ---- image-shaped ops (layout [h, w, c]) ----

    /// 3x3 same-padding convolution: x `[h,w,cin]`, w `[cout,cin,3,3]`, b `[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.shape().len() != 3 || tw.shape().len() != 4 {
            return Err(Error::Dim("conv2d: x must be [h,w,c], w [cout,cin,3,3]".into()));
        }
        let (h, wd, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, wcin, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if wcin != cin || kh != 3 || kw != 3 || tb.numel() != cout {
            return Err(Error::Dim(format!(
                "conv2d: x {:?} w {:?} b {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; h * wd * cout];
        conv2d_forward(tx.data(), tw.data(), tb.data(), h, wd, cin, cout, &mut out);
        self.out(
            Tensor {
                shape: vec![h, wd, cout],
                data: out,
            },
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            "conv2d",
        )
    }

    /// `x[h,w,c] * s[c]`, channel-broadcast.
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let c = *tx.shape().last().unwrap();
        if tx.shape().len() != 3 || ts.numel() != c {
            return Err(Error::Dim("mul_channels: shape mismatch".into()));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * ts.data()[i % c])
            .collect();
        self.out(
            Tensor {
                shape: tx.shape().to_vec(),
                data,
            },
            Op::MulChannels(x.0, s.0),
            "mul_channels",
        )
    }

    /// `x[h,w,c] + s[c]`, channel-broadcast.
    pub fn add_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let c = *tx.shape().last().unwrap();
        if tx.shape().len() != 3 || ts.numel() != c {
            return Err(Error::Dim("add_channels: shape mismatch".into()));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + ts.data()[i % c])
            .collect();
        self.out(
            Tensor {
                shape: tx.shape().to_vec(),
                data,
            },
            Op::AddChannels(x.0, s.0),
            "add_channels",
        )
    }

    /// `x[h,w,c] * m[h,w]`, mask broadcast over channels.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (tx, tm) = (self.value(x), self.value(m));
        if tx.shape().len() != 3
            || tm.shape().len() != 2
            || tm.shape()[0] != tx.shape()[0]
            || tm.shape()[1] != tx.shape()[1]
        {
            return Err(Error::Dim("mul_spatial: shape mismatch".into()));
        }
        let c = tx.shape()[2];
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * tm.data()[i / c])
            .collect();
        self.out(
            Tensor {
                shape: tx.shape().to_vec(),
                data,
            },
            Op::MulSpatial(x.0, m.0),
            "mul_spatial",
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 3
            || tb.shape().len() != 3
            || ta.shape()[0] != tb.shape()[0]
            || ta.shape()[1] != tb.shape()[1]
        {
            return Err(Error::Dim(format!(
                "concat_channels: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (h, w, c1, c2) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
        let mut data = Vec::with_capacity(h * w * (c1 + c2));
        for p in 0..h * w {
            data.extend_from_slice(&ta.data()[p * c1..(p + 1) * c1]);
            data.extend_from_slice(&tb.data()[p * c2..(p + 1) * c2]);
        }
        self.out(
            Tensor {
                shape: vec![h, w, c1 + c2],
                data,
            },
            Op::ConcatChannels(a.0, b.0),
            "concat_channels",
        )
    }

    /// Nearest-neighbor upsampling of a 2-D grid by integer factor `k`.
    pub fn upsample_nearest(&mut self, a: Var, k: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || k == 0 {
            return Err(Error::Dim("upsample_nearest: rank-2 input, k >= 1".into()));
        }
        let (gh, gw) = (t.shape()[0], t.shape()[1]);
        let (h, w) = (gh * k, gw * k);
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = t.data()[(y / k) * gw + (x / k)];
            }
        }
        self.out(
            Tensor {
                shape: vec![h, w],
                data,
            },
            Op::UpsampleNearest(a.0, k),
            "upsample_nearest",
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v.exp()).collect();
        self.out(
            Tensor {
                shape: t.shape().to_vec(),
                data,
            },
            Op::Exp(a.0),
            "exp",
        )
    }

    /// Multiply `x` by a scalar held in a one-element variable `s`.
    pub fn scale_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Dim("scale_var: scalar variable required".into()));
        }
        let sv = self.value(s).item();
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * sv).collect();
        self.out(
            Tensor {
                shape: t.shape().to_vec(),
                data,
            },
            Op::ScaleVar(x.0, s.0),
            "scale_var",
        )
    }

    /// Mean over rows of softmax cross-entropy against the diagonal target.
    pub fn xent_diag(&mut self, logits: Var) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.rows() != t.cols() {
            return Err(Error::Dim("xent_diag: square logits required".into()));
        }
        let n = t.rows();
        let mut total = 0.0;
        for i in 0..n {
            let row = &t.data()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[i];
        }
        self.out(
            Tensor::scalar(total / n as f64),
            Op::XentDiag(logits.0),
            "xent_diag",
        )
    }

    /// Non-overlapping `p x p` patch extraction, row-major over the patch
    /// grid: `[h, w, c] -> [(h/p)*(w/p), p*p*c]`.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 3 || p == 0 || t.shape()[0] % p != 0 || t.shape()[1] % p != 0 {
            return Err(Error::Dim(format!(
                "patchify: shape {:?} with patch {p}",
                t.shape()
            )));
        }
        let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let (gh, gw) = (h / p, w / p);
        let mut data = Vec::with_capacity(h * w * c);
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    let y = py * p + dy;
                    let off = (y * w + px * p) * c;
                    data.extend_from_slice(&t.data()[off..off + p * c]);
                }
            }
        }
        self.out(
            Tensor {
                shape: vec![gh * gw, p * p * c],
                data,
            },
            Op::Patchify(x.0, p),
            "patchify",
        )
    }

    // ---- backward ----

    /// Accumulate d(loss)/d(node) for every node reaching a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward called twice on the same tape".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    fn accum(&mut self, node: usize, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[node].needs_grad {
            return;
        }
        if self.grads[node].is_none() {
            self.grads[node] = Some(vec![0.0; self.nodes[node].value.numel()]);
        }
        add(self.grads[node].as_mut().unwrap());
    }

    fn step_backward(&mut self, i: usize) {
        if matches!(self.nodes[i].op, Op::Leaf) {
            // Leaf grads stay on the tape so callers can read them out.
            return;
        }
        let g = self.grads[i].take().unwrap();
        // Op data needed for parent grads; values are borrowed immutably
        // via raw clones of small slices where required.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, |ga| axpy(ga, &g, 1.0));
                self.accum(b, |gb| axpy(gb, &g, 1.0));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, |ga| axpy(ga, &g, 1.0));
                self.accum(b, |gb| axpy(gb, &g, -1.0));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let bd = self.nodes[b].value.data().to_vec();
                self.accum(a, |ga| {
                    for (k, gv) in ga.iter_mut().enumerate() {
                        *gv += g[k] * bd[k];
                    }
                });
                let ad = self.nodes[a].value.data().to_vec();
                self.accum(b, |gb| {
                    for (k, gv) in gb.iter_mut().enumerate() {
                        *gv += g[k] * ad[k];
                    }
                });
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accum(a, |ga| axpy(ga, &g, c));
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let ta = &self.nodes[a].value;
                let tb = &self.nodes[b].value;
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G * B^T
                if self.nodes[a].needs_grad {
                    let mut da = vec![0.0; m * k];
                    let bd = tb.data();
                    for i0 in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i0 * n + j] * bd[p * n + j];
                            }
                            da[i0 * k + p] = s;
                        }
                    }
                    self.accum(a, |ga| axpy(ga, &da, 1.0));
                }
                // dB = A^T * G
                if self.nodes[b].needs_grad {
                    let mut db = vec![0.0; k * n];
                    let ad = self.nodes[a].value.data();
                    for i0 in 0..m {
                        for p in 0..k {
                            let av = ad[i0 * k + p];
                            for j in 0..n {
                                db[p * n + j] += av * g[i0 * n + j];
                            }
                        }
                    }
                    self.accum(b, |gb| axpy(gb, &db, 1.0));
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                let t = &self.nodes[i].value; // [n, m]
                let (n, m) = (t.rows(), t.cols());
                let mut da = vec![0.0; m * n];
                for r in 0..n {
                    for c in 0..m {
                        da[c * n + r] = g[r * m + c];
                    }
                }
                self.accum(a, |ga| axpy(ga, &da, 1.0));
            }
            Op::Reshape(a) => {
                let a = *a;
                self.accum(a, |ga| axpy(ga, &g, 1.0));
            }
            Op::ConcatRows(a, b) => {
                let (a, b) = (*a, *b);
                let na = self.nodes[a].value.numel();
                self.accum(a, |ga| axpy(ga, &g[..na], 1.0));
                self.accum(b, |gb| axpy(gb, &g[na..], 1.0));
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                let cols = self.nodes[x].value.cols();
                let off = start * cols;
                self.accum(x, |gx| axpy(&mut gx[off..off + g.len()], &g, 1.0));
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = self.nodes[i].value.data().to_vec();
                self.accum(a, |ga| {
                    for (k, gv) in ga.iter_mut().enumerate() {
                        *gv += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Gelu(a) => {
                let a = *a;
                let x = self.nodes[a].value.data().to_vec();
                self.accum(a, |ga| {
                    for (k, gv) in ga.iter_mut().enumerate() {
                        *gv += g[k] * gelu_grad(x[k]);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let a = *a;
                let y = &self.nodes[i].value;
                let (m, n) = (y.rows(), y.cols());
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..n {
                        da[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(a, |ga| axpy(ga, &da, 1.0));
            }
            Op::LayerNormRows(a) => {
                let a = *a;
                let x = &self.nodes[a].value;
                let y = &self.nodes[i].value;
                let (m, n) = (x.rows(), x.cols());
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let xr = &x.data()[r * n..(r + 1) * n];
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mu = xr.iter().sum::<f64>() / n as f64;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                    let s = (var + LN_EPS).sqrt();
                    let gm = gr.iter().sum::<f64>() / n as f64;
                    let gy: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum::<f64>() / n as f64;
                    for j in 0..n {
                        da[r * n + j] = (gr[j] - gm - yr[j] * gy) / s;
                    }
                }
                self.accum(a, |ga| axpy(ga, &da, 1.0));
            }
            Op::MeanPoolRows(a) => {
                let a = *a;
                let (m, n) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                self.accum(a, |ga| {
                    for r in 0..m {
                        for j in 0..n {
                            ga[r * n + j] += g[j] / m as f64;
                        }
                    }
                });
            }
            Op::L2NormalizeRows(a) => {
                let a = *a;
                let x = &self.nodes[a].value;
                let y = &self.nodes[i].value;
                let (m, n) = (x.rows(), x.cols());
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let xr = &x.data()[r * n..(r + 1) * n];
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum();
                    for j in 0..n {
                        da[r * n + j] = (gr[j] - dot * yr[j]) / norm;
                    }
                }
                self.accum(a, |ga| axpy(ga, &da, 1.0));
            }
            Op::Sum(a) => {
                let a = *a;
                let gv = g[0];
                self.accum(a, |ga| {
                    for v in ga.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::Mse(a, b) => {
                let (a, b) = (*a, *b);
                let n = self.nodes[a].value.numel() as f64;
                let ad = self.nodes[a].value.data().to_vec();
                let bd = self.nodes[b].value.data().to_vec();
                let c = 2.0 * g[0] / n;
                self.accum(a, |ga| {
                    for (k, gv) in ga.iter_mut().enumerate() {
                        *gv += c * (ad[k] - bd[k]);
                    }
                });
                self.accum(b, |gb| {
                    for (k, gv) in gb.iter_mut().enumerate() {
                        *gv -= c * (ad[k] - bd[k]);
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (a, b) = (*a, *b);
                let ad = self.nodes[a].value.data().to_vec();
                let bd = self.nodes[b].value.data().to_vec();
                let na = self.nodes[a].value.l2_norm();
                let nb = self.nodes[b].value.l2_norm();
                let cosv = self.nodes[i].value.item();
                let gv = g[0];
                self.accum(a, |ga| {
                    for k in 0..ga.len() {
                        ga[k] += gv * (bd[k] / (na * nb) - cosv * ad[k] / (na * na));
                    }
                });
                self.accum(b, |gb| {
                    for k in 0..gb.len() {
                        gb[k] += gv * (ad[k] / (na * nb) - cosv * bd[k] / (nb * nb));
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.nodes[table].value.cols();
                self.accum(table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                });
            }
            Op::Conv2d { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let tx = &self.nodes[x].value;
                let (h, wd, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let cout = self.nodes[b].value.numel();
                if self.nodes[x].needs_grad {
                    let wdta = self.nodes[w].value.data().to_vec();
                    let mut dx = vec![0.0; h * wd * cin];
                    conv2d_backward_input(&g, &wdta, h, wd, cin, cout, &mut dx);
                    self.accum(x, |gx| axpy(gx, &dx, 1.0));
                }
                if self.nodes[w].needs_grad {
                    let xd = self.nodes[x].value.data().to_vec();
                    let mut dw = vec![0.0; cout * cin * 9];
                    conv2d_backward_weight(&g, &xd, h, wd, cin, cout, &mut dw);
                    self.accum(w, |gw| axpy(gw, &dw, 1.0));
                }
                if self.nodes[b].needs_grad {
                    let mut db = vec![0.0; cout];
                    for p in 0..h * wd {
                        for oc in 0..cout {
                            db[oc] += g[p * cout + oc];
                        }
                    }
                    self.accum(b, |gb| axpy(gb, &db, 1.0));
                }
            }
            Op::MulChannels(x, s) => {
                let (x, s) = (*x, *s);
                let c = self.nodes[s].value.numel();
                let sd = self.nodes[s].value.data().to_vec();
                self.accum(x, |gx| {
                    for (k, gv) in gx.iter_mut().enumerate() {
                        *gv += g[k] * sd[k % c];
                    }
                });
                let xd = self.nodes[x].value.data().to_vec();
                self.accum(s, |gs| {
                    for (k, &gv) in g.iter().enumerate() {
                        gs[k % c] += gv * xd[k];
                    }
                });
            }
            Op::AddChannels(x, s) => {
                let (x, s) = (*x, *s);
                let c = self.nodes[s].value.numel();
                self.accum(x, |gx| axpy(gx, &g, 1.0));
                self.accum(s, |gs| {
                    for (k, &gv) in g.iter().enumerate() {
                        gs[k % c] += gv;
                    }
                });
            }
            Op::MulSpatial(x, m) => {
                let (x, m) = (*x, *m);
                let c = self.nodes[x].value.shape()[2];
                let md = self.nodes[m].value.data().to_vec();
                self.accum(x, |gx| {
                    for (k, gv) in gx.iter_mut().enumerate() {
                        *gv += g[k] * md[k / c];
                    }
                });
                let xd = self.nodes[x].value.data().to_vec();
                self.accum(m, |gm| {
                    for (k, &gv) in g.iter().enumerate() {
                        gm[k / c] += gv * xd[k];
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let (a, b) = (*a, *b);
                let c1 = self.nodes[a].value.shape()[2];
                let c2 = self.nodes[b].value.shape()[2];
                let pixels = self.nodes[a].value.numel() / c1;
                self.accum(a, |ga| {
                    for p in 0..pixels {
                        axpy(
                            &mut ga[p * c1..(p + 1) * c1],
                            &g[p * (c1 + c2)..p * (c1 + c2) + c1],
                            1.0,
                        );
                    }
                });
                self.accum(b, |gb| {
                    for p in 0..pixels {
                        axpy(
                            &mut gb[p * c2..(p + 1) * c2],
                            &g[p * (c1 + c2) + c1..(p + 1) * (c1 + c2)],
                            1.0,
                        );
                    }
                });
            }
            Op::UpsampleNearest(a, k) => {
                let (a, k) = (*a, *k);
                let gw = self.nodes[a].value.shape()[1];
                let w = gw * k;
                self.accum(a, |ga| {
                    for (idx, &gv) in g.iter().enumerate() {
                        let (y, x0) = (idx / w, idx % w);
                        ga[(y / k) * gw + (x0 / k)] += gv;
                    }
                });
            }
            Op::Exp(a) => {
                let a = *a;
                let y = self.nodes[i].value.data().to_vec();
                self.accum(a, |ga| {
                    for (k, gv) in ga.iter_mut().enumerate() {
                        *gv += g[k] * y[k];
                    }
                });
            }
            Op::ScaleVar(x, s) => {
                let (x, s) = (*x, *s);
                let sv = self.nodes[s].value.item();
                self.accum(x, |gx| axpy(gx, &g, sv));
                let dot: f64 = self.nodes[x]
                    .value
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(xv, gv)| xv * gv)
                    .sum();
                self.accum(s, |gs| gs[0] += dot);
            }
            Op::XentDiag(a) => {
                let a = *a;
                let t = &self.nodes[a].value;
                let n = t.rows();
                let gv = g[0] / n as f64;
                let mut da = vec![0.0; n * n];
                for r in 0..n {
                    let row = &t.data()[r * n..(r + 1) * n];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..n {
                        let p = (row[j] - mx).exp() / z;
                        da[r * n + j] = gv * (p - if j == r { 1.0 } else { 0.0 });
                    }
                }
                self.accum(a, |ga| axpy(ga, &da, 1.0));
            }
            Op::Patchify(x, p) => {
                let (x, p) = (*x, *p);
                let t = &self.nodes[x].value;
                let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let (gw,) = (w / p,);
                self.accum(x, |gx| {
                    let mut src = 0;
                    for py in 0..h / p {
                        for px in 0..gw {
                            for dy in 0..p {
                                let y = py * p + dy;
                                let off = (y * w + px * p) * c;
                                axpy(&mut gx[off..off + p * c], &g[src..src + p * c], 1.0);
                                src += p * c;
                            }
                        }
                    }
                });
            }
            Op::AddRow(x, row) => {
                let (x, row) = (*x, *row);
                let n = self.nodes[row].value.numel();
                self.accum(x, |gx| axpy(gx, &g, 1.0));
                self.accum(row, |gr| {
                    for (k, &gv) in g.iter().enumerate() {
                        gr[k % n] += gv;
                    }
                });
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape().to_vec(),
        data: a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    }
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// tanh-form GELU
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    h: usize,
    wd: usize,
    cin: usize,
    cout: usize,
    out: &mut [f64],
) {
    for y in 0..h {
        for x0 in 0..wd {
            let orow = &mut out[(y * wd + x0) * cout..(y * wd + x0 + 1) * cout];
            orow.copy_from_slice(b);
            for dy in 0..3usize {
                let yy = y as isize + dy as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in 0..3usize {
                    let xx = x0 as isize + dx as isize - 1;
                    if xx < 0 || xx >= wd as isize {
                        continue;
                    }
                    let xrow = &x[(yy as usize * wd + xx as usize) * cin..][..cin];
                    let koff = dy * 3 + dx;
                    for (oc, ov) in orow.iter_mut().enumerate() {
                        let wrow = &w[oc * cin * 9..];
                        let mut s = 0.0;
                        for (ic, &xv) in xrow.iter().enumerate() {
                            s += xv * wrow[ic * 9 + koff];
                        }
                        *ov += s;
                    }
                }
            }
        }
    }
}

fn conv2d_backward_input(
    g: &[f64],
    w: &[f64],
    h: usize,
    wd: usize,
    cin: usize,
    cout: usize,
    dx: &mut [f64],
) {
    for y in 0..h {
        for x0 in 0..wd {
            let grow = &g[(y * wd + x0) * cout..][..cout];
            for dy in 0..3usize {
                let yy = y as isize + dy as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx0 in 0..3usize {
                    let xx = x0 as isize + dx0 as isize - 1;
                    if xx < 0 || xx >= wd as isize {
                        continue;
                    }
                    let xrow = &mut dx[(yy as usize * wd + xx as usize) * cin..][..cin];
                    let koff = dy * 3 + dx0;
                    for (oc, &gv) in grow.iter().enumerate() {
                        let wrow = &w[oc * cin * 9..];
                        for (ic, xv) in xrow.iter_mut().enumerate() {
                            *xv += gv * wrow[ic * 9 + koff];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_weight(
    g: &[f64],
    x: &[f64],
    h: usize,
    wd: usize,
    cin: usize,
    cout: usize,
    dw: &mut [f64],
) {
    for y in 0..h {
        for x0 in 0..wd {
            let grow = &g[(y * wd + x0) * cout..][..cout];
            for dy in 0..3usize {
                let yy = y as isize + dy as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx0 in 0..3usize {
                    let xx = x0 as isize + dx0 as isize - 1;
                    if xx < 0 || xx >= wd as isize {
                        continue;
                    }
                    let xrow = &x[(yy as usize * wd + xx as usize) * cin..][..cin];
                    let koff = dy * 3 + dx0;
                    for (oc, &gv) in grow.iter().enumerate() {
                        let wrow = &mut dw[oc * cin * 9..(oc + 1) * cin * 9];
                        for (ic, &xv) in xrow.iter().enumerate() {
                            wrow[ic * 9 + koff] += gv * xv;
                        }
                    }
                }
            }
        }
    }
}

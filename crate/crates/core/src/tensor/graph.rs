//! Recorded computation tape with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. `backward` walks
//! the tape in reverse and accumulates gradients into the nodes that need
//! them. Parameters enter the tape through [`Graph::param`], which binds a
//! named tensor from a [`ParamStore`] once per graph.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::params::{param_group, ParamStore};
use super::scalar::{c, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Tanh,
    Sigmoid,
    Hsigmoid,
    Relu,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => {
                let half: T = c(0.5);
                half * x * (T::one() + (x * c(std::f64::consts::FRAC_1_SQRT_2)).erf())
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Hsigmoid => ((x + c(3.0)) / c(6.0)).max(T::zero()).min(T::one()),
            Activation::Relu => x.max(T::zero()),
        }
    }

    /// Derivative given the input `x` and output `y`.
    pub fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Gelu => {
                let cdf = c::<T>(0.5) * (T::one() + (x * c(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = (-(x * x) * c(0.5)).exp() * c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                cdf + x * pdf
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Hsigmoid => {
                if x > c(-3.0) && x < c(3.0) {
                    c(1.0 / 6.0)
                } else {
                    T::zero()
                }
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    /// Closed range of the output, used to validate gate values.
    pub fn range(self) -> (f64, f64) {
        match self {
            Activation::Tanh => (-1.0, 1.0),
            Activation::Sigmoid | Activation::Hsigmoid => (0.0, 1.0),
            Activation::Relu => (0.0, f64::INFINITY),
            Activation::Gelu => (-0.17, f64::INFINITY),
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Bilinear {
        x: Var,
        h: usize,
        w: usize,
    },
    MeanRows(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
    },
    Reshape(Var),
    Expand(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    frozen: BTreeSet<String>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: BTreeSet::new(),
            grads: Vec::new(),
        }
    }

    /// A graph in which parameters of the named groups are bound as constants.
    pub fn with_frozen<I, S>(groups: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut g = Self::new();
        g.frozen = groups.into_iter().map(Into::into).collect();
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Differentiable leaf that is not tied to a parameter name.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, true, "input")
    }

    /// Binds a named parameter, reusing the leaf if it was bound before.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        let trainable = !self.frozen.contains(param_group(name));
        let v = self.push(t, Op::Leaf, trainable, name)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.cols() != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), ng, "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng, "mul")
    }

    fn row_check(&self, op: &'static str, x: Var, r: Var) -> Result<usize> {
        let (xv, rv) = (self.value(x), self.value(r));
        if rv.len() != xv.cols() {
            return Err(Error::shape(
                op,
                format!("row vector {:?} against {:?}", rv.shape(), xv.shape()),
            ));
        }
        Ok(xv.cols())
    }

    /// `x[.., c] + b[c]`
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = self.row_check("add_row", x, b)?;
        let bv = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % cols])
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        let ng = self.ng(x) || self.ng(b);
        self.push(t, Op::AddRow(x, b), ng, "add_row")
    }

    /// `x[.., c] * g[c]`
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let cols = self.row_check("mul_row", x, g)?;
        let gv = self.value(g).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[i % cols])
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        let ng = self.ng(x) || self.ng(g);
        self.push(t, Op::MulRow(x, g), ng, "mul_row")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s: T = c(s);
        let data = self.value(x).data().iter().map(|&v| v * s).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng, "scale")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| kind.apply(v))
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        let ng = self.ng(x);
        self.push(t, Op::Act(x, kind), ng, "activation")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    /// Normalizes each row over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = self.row_check("layer_norm", x, gamma)?;
        self.row_check("layer_norm", x, beta)?;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let nc: T = c(cols as f64);
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / nc;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nc;
            let rs = T::one() / (var + c(LN_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let xh = (row[j] - mean) * rs;
                xhat[r * cols + j] = xh;
                out[r * cols + j] = xh * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
            "layer_norm",
        )
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng, "softmax")
    }

    /// Multi-head scaled dot-product attention on `[n, d]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let qv = self.value(q);
        if qv.rank() != 2 || heads == 0 || !qv.cols().is_multiple_of(heads) {
            return Err(Error::shape(
                "attention",
                format!("{:?} with {heads} heads", qv.shape()),
            ));
        }
        let (n, d) = (qv.rows(), qv.cols());
        let (out, probs) = kernels::attention_forward(
            qv.data(),
            self.value(k).data(),
            self.value(v).data(),
            n,
            d,
            heads,
            causal,
        );
        let t = Tensor::new(&[n, d], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            },
            ng,
            "attention",
        )
    }

    /// `x: [h, w, c_in]`, `w: [k, k, c_in, c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 4 || ws[0] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, kernel {ws:?}"),
            ));
        }
        if xs[2] != ws[2] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but kernel expects {}", xs[2], ws[2]),
            ));
        }
        let k = ws[0];
        if stride == 0 || k > xs[0] + 2 * pad || k > xs[1] + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} stride {stride} pad {pad} on {xs:?}"),
            ));
        }
        let geom = ConvGeom {
            h: xs[0],
            w: xs[1],
            ci: xs[2],
            co: ws[3],
            k,
            stride,
            pad,
            ho: (xs[0] + 2 * pad - k) / stride + 1,
            wo: (xs[1] + 2 * pad - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), geom);
        let t = Tensor::new(&[geom.ho, geom.wo, geom.co], out)?;
        let ng = self.ng(x) || self.ng(w);
        self.push(t, Op::Conv2d { x, w, geom }, ng, "conv2d")
    }

    /// Align-corners-false bilinear resize of an `[h, w, c]` grid.
    pub fn interpolate_bilinear(&mut self, x: Var, th: usize, tw: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || th == 0 || tw == 0 {
            return Err(Error::shape(
                "interpolate_bilinear",
                format!("{xs:?} -> {th}x{tw}"),
            ));
        }
        let (h, w, ch) = (xs[0], xs[1], xs[2]);
        let out = kernels::bilinear_forward(self.value(x).data(), h, w, ch, th, tw);
        let t = Tensor::new(&[th, tw, ch], out)?;
        let ng = self.ng(x);
        self.push(t, Op::Bilinear { x, h, w }, ng, "interpolate_bilinear")
    }

    /// Mean over all leading positions: `[.., c] -> [c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = vec![T::zero(); cols];
        for row in xv.data().chunks(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let inv: T = c(1.0 / rows as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        let t = Tensor::new(&[cols], out)?;
        let ng = self.ng(x);
        self.push(t, Op::MeanRows(x), ng, "mean_rows")
    }

    /// Channel concatenation: `[.., a] ++ [.., b] -> [.., a + b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let lead_a = &av.shape()[..av.rank() - 1];
        let lead_b = &bv.shape()[..bv.rank() - 1];
        if lead_a != lead_b {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks(ca).zip(bv.data().chunks(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::ConcatCols(a, b), ng, "concat_cols")
    }

    /// Sequence concatenation of `[n_i, d]` blocks.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self
            .value(
                *parts
                    .first()
                    .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?,
            )
            .cols();
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != d {
                return Err(Error::shape(
                    "concat_rows",
                    format!("width {} vs {d}", pv.cols()),
                ));
            }
            out.extend_from_slice(pv.data());
        }
        let rows = out.len() / d;
        let t = Tensor::new(&[rows, d], out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(t, Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    /// Row lookup: `table[m, d]`, ids -> `[len, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 || ids.is_empty() {
            return Err(Error::shape("embedding", format!("table {:?}", tv.shape())));
        }
        let (m, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= m {
                return Err(Error::shape(
                    "embedding",
                    format!("token id {id} outside vocabulary of {m}"),
                ));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        let ng = self.ng(table);
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
            "embedding",
        )
    }

    /// Mean negative log-likelihood over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, m) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::shape("cross_entropy", "no target rows"));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (row, target) in probs.chunks_mut(m).zip(targets) {
            softmax_in_place(row);
            if let Some(t) = *target {
                if t >= m {
                    return Err(Error::shape(
                        "cross_entropy",
                        format!("target {t} outside {m} classes"),
                    ));
                }
                loss = loss - row[t].max(T::min_positive_value()).ln();
            }
        }
        loss = loss / c(count as f64);
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
            "cross_entropy",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng, "reshape")
    }

    /// Broadcasts a single-element tensor to `[n]`.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != 1 {
            return Err(Error::shape("expand", format!("{:?}", xv.shape())));
        }
        let t = Tensor::full(&[n], xv.data()[0]);
        let ng = self.ng(x);
        self.push(t, Op::Expand(x), ng, "expand")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.sum() / c(xv.len() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng, "mean")
    }

    /// Convenience: `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            self.backward_node(i, &gout, &mut grads);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("grad shape")))
            .collect();
        Ok(())
    }

    fn backward_node(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let needs = |v: Var| nodes[v.0].needs_grad;
        macro_rules! buf {
            ($v:expr) => {
                gbuf(nodes, grads, $v)
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(da) = buf!(*a) {
                    kernels::matmul_a_bt_acc(gout, bv.data(), da, m, k, n);
                }
                if let Some(db) = buf!(*b) {
                    kernels::matmul_at_b_acc(av.data(), gout, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = buf!(v) {
                        add_into(d, gout);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
                if let Some(da) = buf!(*a) {
                    for ((d, &g), &y) in da.iter_mut().zip(gout).zip(&bv) {
                        *d = *d + g * y;
                    }
                }
                if let Some(db) = buf!(*b) {
                    for ((d, &g), &x) in db.iter_mut().zip(gout).zip(&av) {
                        *d = *d + g * x;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(dx) = buf!(*x) {
                    add_into(dx, gout);
                }
                if let Some(db) = buf!(*b) {
                    let cols = db.len();
                    for row in gout.chunks(cols) {
                        add_into(db, row);
                    }
                }
            }
            Op::MulRow(x, g) => {
                let cols = val(*g).len();
                if needs(*x) {
                    let gv = val(*g).to_vec();
                    let dx = buf!(*x).unwrap();
                    for (j, (d, &go)) in dx.iter_mut().zip(gout).enumerate() {
                        *d = *d + go * gv[j % cols];
                    }
                }
                if needs(*g) {
                    let xv = val(*x).to_vec();
                    let dg = buf!(*g).unwrap();
                    for (j, (&go, &xx)) in gout.iter().zip(&xv).enumerate() {
                        dg[j % cols] = dg[j % cols] + go * xx;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = buf!(*x) {
                    for (d, &g) in dx.iter_mut().zip(gout) {
                        *d = *d + g * *s;
                    }
                }
            }
            Op::Act(x, kind) => {
                let xv = val(*x);
                let yv = nodes[i].value.data();
                let local: Vec<T> = xv
                    .iter()
                    .zip(yv)
                    .zip(gout)
                    .map(|((&xx, &yy), &g)| g * kind.derivative(xx, yy))
                    .collect();
                if let Some(dx) = buf!(*x) {
                    add_into(dx, &local);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = val(*gamma).to_vec();
                let cols = gv.len();
                if let Some(dgm) = buf!(*gamma) {
                    for (row_g, row_x) in gout.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            dgm[j] = dgm[j] + row_g[j] * row_x[j];
                        }
                    }
                }
                if let Some(dbt) = buf!(*beta) {
                    for row_g in gout.chunks(cols) {
                        add_into(dbt, row_g);
                    }
                }
                if let Some(dx) = buf!(*x) {
                    let nc: T = c(cols as f64);
                    for (r, (row_g, row_x)) in gout.chunks(cols).zip(xhat.chunks(cols)).enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..cols {
                            let dxh = row_g[j] * gv[j];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * row_x[j];
                        }
                        let k = rstd[r] / nc;
                        for j in 0..cols {
                            let dxh = row_g[j] * gv[j];
                            let idx = r * cols + j;
                            dx[idx] = dx[idx] + k * (nc * dxh - s1 - row_x[j] * s2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let cols = nodes[i].value.cols();
                if let Some(dx) = buf!(*x) {
                    for (r, (yr, gr)) in y.chunks(cols).zip(gout.chunks(cols)).enumerate() {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            dx[r * cols + j] = dx[r * cols + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            } => {
                let qv = &nodes[q.0].value;
                let (n, d) = (qv.rows(), qv.cols());
                let mut dq = vec![T::zero(); n * d];
                let mut dk = vec![T::zero(); n * d];
                let mut dv = vec![T::zero(); n * d];
                kernels::attention_backward(
                    qv.data(),
                    val(*k),
                    val(*v),
                    probs,
                    gout,
                    n,
                    d,
                    *heads,
                    *causal,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(b) = buf!(var) {
                        add_into(b, &g);
                    }
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (val(*x).to_vec(), val(*w).to_vec());
                let mut dx = needs(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = needs(*w).then(|| vec![T::zero(); wv.len()]);
                kernels::conv2d_backward(
                    &xv,
                    &wv,
                    gout,
                    *geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(g) = dx {
                    add_into(buf!(*x).unwrap(), &g);
                }
                if let Some(g) = dw {
                    add_into(buf!(*w).unwrap(), &g);
                }
            }
            Op::Bilinear { x, h, w } => {
                let s = nodes[i].value.shape();
                let (th, tw, ch) = (s[0], s[1], s[2]);
                if let Some(dx) = buf!(*x) {
                    kernels::bilinear_backward(gout, dx, *h, *w, ch, th, tw);
                }
            }
            Op::MeanRows(x) => {
                let rows = nodes[x.0].value.rows();
                let inv: T = c(1.0 / rows as f64);
                if let Some(dx) = buf!(*x) {
                    let cols = gout.len();
                    for row in dx.chunks_mut(cols) {
                        for (d, &g) in row.iter_mut().zip(gout) {
                            *d = *d + g * inv;
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = nodes[a.0].value.cols();
                let cb = nodes[b.0].value.cols();
                if let Some(da) = buf!(*a) {
                    for (d, g) in da.chunks_mut(ca).zip(gout.chunks(ca + cb)) {
                        add_into(d, &g[..ca]);
                    }
                }
                if let Some(db) = buf!(*b) {
                    for (d, g) in db.chunks_mut(cb).zip(gout.chunks(ca + cb)) {
                        add_into(d, &g[ca..]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(d) = buf!(p) {
                        add_into(d, &gout[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.cols();
                if let Some(dt) = buf!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let m = nodes[logits.0].value.cols();
                let count = targets.iter().filter(|t| t.is_some()).count();
                let scale = gout[0] / c(count as f64);
                if let Some(dl) = buf!(*logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..m {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            dl[r * m + j] = dl[r * m + j] + scale * (probs[r * m + j] - onehot);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = buf!(*x) {
                    add_into(dx, gout);
                }
            }
            Op::Expand(x) => {
                let s: T = gout.iter().copied().sum();
                if let Some(dx) = buf!(*x) {
                    dx[0] = dx[0] + s;
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = buf!(*x) {
                    dx.iter_mut().for_each(|d| *d = *d + gout[0]);
                }
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.len();
                let g = gout[0] / c(n as f64);
                if let Some(dx) = buf!(*x) {
                    dx.iter_mut().for_each(|d| *d = *d + g);
                }
            }
        }
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all trainable bound parameters, zero-filled where no
    /// gradient flowed.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

fn gbuf<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z = z + *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

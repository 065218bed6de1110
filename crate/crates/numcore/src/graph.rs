//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables in execution
//! order. [`Graph::backward`] walks the tape once in reverse, so a graph is
//! built for one loss evaluation and then dropped.

use std::collections::{BTreeMap, HashMap};

use crate::error::{NumError, Result};
use crate::gemm::{gemm, Mat};
use crate::param::ParamSet;
use crate::tensor::Tensor;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a parameter as `(component, name)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub set: String,
    pub name: String,
}

impl ParamKey {
    pub fn new(set: &str, name: &str) -> Self {
        Self { set: set.to_owned(), name: name.to_owned() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }

    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

/// Batch-norm statistics observed during a train-mode forward.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub set: String,
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    Linear { x: Var, w: Var },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    Relu(Var),
    LeakyRelu(Var, f64),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    GlobalAvgPool { x: Var, spatial: usize },
    Concat(Var, Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    MseScalar { x: Var, target: f64 },
    Mse(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Gather { table: Var, index: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients keyed by component and name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn get(&self, set: &str, name: &str) -> Option<&Tensor> {
        self.map.get(&ParamKey::new(set, name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Writes gradients into the grad slots of `params` for component `set`.
    /// Every non-frozen parameter gets a slot; parameters the loss never
    /// touched get zeros. Frozen parameters have their slot cleared.
    pub fn fill(&self, set: &str, params: &mut ParamSet) -> Result<()> {
        for (name, p) in params.iter_mut() {
            if p.frozen {
                p.value.clear_grad();
                continue;
            }
            let g = match self.map.get(&ParamKey::new(set, name)) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; p.value.len()],
            };
            p.value.set_grad(g)?;
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamKey, Var>,
    stats: Vec<BatchStats>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Records parameter `name` of component `set`. Repeated calls return the
    /// same variable so gradients from every use accumulate.
    pub fn param(&mut self, set: &str, name: &str, params: &ParamSet) -> Result<Var> {
        let key = ParamKey::new(set, name);
        if let Some(&v) = self.param_vars.get(&key) {
            return Ok(v);
        }
        let value = params.get(name)?.clone();
        let trainable = !params.is_frozen(name);
        let mut value = value;
        value.clear_grad();
        let v = self.push(value, Op::Param, trainable);
        self.param_vars.insert(key, v);
        Ok(v)
    }

    pub fn take_batch_stats(&mut self) -> Vec<BatchStats> {
        std::mem::take(&mut self.stats)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::raw(shape, data), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::raw(shape, data), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::raw(shape, data), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::raw(shape, data), Op::Scale(a, s), rg)
    }

    /// Sum of equally shaped variables.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| NumError::Contract("sum of zero terms".into()))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// Adds a per-channel bias along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).channels();
        if self.shape(bias) != [c] {
            return Err(NumError::Shape(format!(
                "bias {:?} for {c} channels",
                self.shape(bias)
            )));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::raw(shape, data), Op::AddBias { x, bias }, rg))
    }

    /// `x·wᵀ` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let cin = self.value(x).channels();
        if ws.len() != 2 || ws[1] != cin {
            return Err(NumError::Shape(format!("linear weight {ws:?} for input {:?}", self.shape(x))));
        }
        let rows = self.value(x).len() / cin;
        let cout = ws[0];
        let mut out = vec![0.0; rows * cout];
        gemm(
            rows,
            cin,
            cout,
            Mat { data: self.data(x), rs: cin, cs: 1 },
            Mat { data: self.data(w), rs: 1, cs: cin },
            &mut out,
            cout,
            0.0,
        );
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = cout;
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::raw(shape, out), Op::Linear { x, w }, rg))
    }

    /// 2-D convolution over `[batch, height, width, channels]` with weight
    /// `[out, kernel, kernel, in]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != ws[2] || ws[3] != xs[3] {
            return Err(NumError::Shape(format!("conv2d weight {ws:?} for input {xs:?}")));
        }
        if stride == 0 {
            return Err(NumError::Config("conv2d stride must be positive".into()));
        }
        let k = ws[1];
        let (h, wd) = (xs[1], xs[2]);
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(NumError::Shape(format!("kernel {k} larger than padded input {xs:?}")));
        }
        let geom = ConvGeom {
            batch: xs[0],
            height: h,
            width: wd,
            in_channels: xs[3],
            out_channels: ws[0],
            kernel: k,
            stride,
            padding,
            out_height: (h + 2 * padding - k) / stride + 1,
            out_width: (wd + 2 * padding - k) / stride + 1,
        };
        let cols = im2col(self.data(x), &geom);
        let (rows, patch) = (geom.rows(), geom.patch());
        let mut out = vec![0.0; rows * geom.out_channels];
        gemm(
            rows,
            patch,
            geom.out_channels,
            Mat { data: &cols, rs: patch, cs: 1 },
            Mat { data: self.data(w), rs: 1, cs: patch },
            &mut out,
            geom.out_channels,
            0.0,
        );
        let shape = vec![geom.batch, geom.out_height, geom.out_width, geom.out_channels];
        let rg = self.rg(&[x, w]);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(Tensor::raw(shape, out), Op::Conv2d { x, w, geom, cols }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::raw(shape, data), Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::raw(shape, data), Op::LeakyRelu(x, slope), rg)
    }

    /// Batch normalization over every axis but the last.
    ///
    /// With `running = None` the batch statistics are used (and reported via
    /// [`Graph::take_batch_stats`] under `set`/`prefix`); otherwise the given
    /// `(mean, var)` are treated as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
        set: &str,
        prefix: &str,
    ) -> Result<Var> {
        let c = self.value(x).channels();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(NumError::Shape(format!("batch norm affine for {c} channels")));
        }
        let xd = self.data(x);
        let n = xd.len() / c;
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(NumError::Shape("running statistics length".into()));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let mut mean = vec![0.0; c];
                for row in xd.chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for row in xd.chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        if batch_stats {
            self.stats.push(BatchStats { set: set.to_owned(), prefix: prefix.to_owned(), mean, var });
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::raw(shape, out),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            rg,
        ))
    }

    /// Mean over the spatial axes of `[batch, h, w, c]`, giving `[batch, c]`.
    /// Rank-2 inputs pass through unchanged.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        match xs.len() {
            2 => Ok(x),
            4 => {
                let (b, spatial, c) = (xs[0], xs[1] * xs[2], xs[3]);
                let xd = self.data(x);
                let mut out = vec![0.0; b * c];
                for bi in 0..b {
                    let o = &mut out[bi * c..(bi + 1) * c];
                    for row in xd[bi * spatial * c..(bi + 1) * spatial * c].chunks(c) {
                        for (a, v) in o.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    o.iter_mut().for_each(|a| *a /= spatial as f64);
                }
                let rg = self.rg(&[x]);
                Ok(self.push(Tensor::raw(vec![b, c], out), Op::GlobalAvgPool { x, spatial }, rg))
            }
            _ => Err(NumError::Shape(format!("global pool over {xs:?}"))),
        }
    }

    /// Concatenation along the last (channel) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(NumError::Shape(format!("concat {sa:?} with {sb:?}")));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut out = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        for (ra, rb) in self.data(a).chunks(ca).zip(self.data(b).chunks(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::raw(shape, out), Op::Concat(a, b), rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let c = self.value(x).channels();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks(c) {
            out.extend(crate::functional::softmax_slice(row));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::raw(shape, out), Op::Softmax(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::raw(vec![1], vec![s]), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum::<f64>() / self.value(x).len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::raw(vec![1], vec![s]), Op::Mean(x), rg)
    }

    /// Mean squared difference between every element of `x` and a constant.
    pub fn mse_scalar(&mut self, x: Var, target: f64) -> Var {
        let d = self.data(x);
        let s = d.iter().map(|v| (v - target) * (v - target)).sum::<f64>() / d.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::raw(vec![1], vec![s]), Op::MseScalar { x, target }, rg)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / self.value(a).len() as f64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::raw(vec![1], vec![s]), Op::Mse(a, b), rg))
    }

    /// Batch-mean cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(NumError::Shape(format!(
                "cross entropy of {ls:?} with {} labels",
                labels.len()
            )));
        }
        let n = ls[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
            return Err(NumError::Contract(format!("label {bad} outside [0, {n})")));
        }
        let mut probs = Vec::with_capacity(ls[0] * n);
        let mut loss = 0.0;
        for (row, &y) in self.data(logits).chunks(n).zip(labels) {
            loss -= crate::functional::log_softmax_at(row, y);
            probs.extend(crate::functional::softmax_slice(row));
        }
        loss /= labels.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::raw(vec![1], vec![loss]),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Rows of `table` (indexed along its first axis) selected by `index`.
    pub fn gather(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        let rows = ts[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(NumError::Contract(format!("row {bad} outside table of {rows}")));
        }
        if index.is_empty() {
            return Err(NumError::Contract("gather with empty index".into()));
        }
        let per = self.value(table).len() / rows;
        let td = self.data(table);
        let mut out = Vec::with_capacity(per * index.len());
        for &i in index {
            out.extend_from_slice(&td[i * per..(i + 1) * per]);
        }
        let mut shape = ts;
        shape[0] = index.len();
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::raw(shape, out), Op::Gather { table, index: index.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// trainable parameter recorded on the tape; parameters the loss does not
    /// depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(NumError::State("backward on a variable not recorded in this graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumError::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut map = BTreeMap::new();
        for (key, &v) in &self.param_vars {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            let shape = self.shape(v).to_vec();
            let data = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; self.value(v).len()]);
            map.insert(key.clone(), Tensor::raw(shape, data));
        }
        Ok(Gradients { map })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Vec<f64>| accumulate(grads, v, delta);
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                if want(*a) {
                    acc(*a, g.to_vec());
                }
                if want(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(*a, g.to_vec());
                }
                if want(*b) {
                    acc(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    acc(*a, g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect());
                }
                if want(*b) {
                    acc(*b, g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::AddBias { x, bias } => {
                if want(*x) {
                    acc(*x, g.to_vec());
                }
                if want(*bias) {
                    let c = self.value(*bias).len();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Linear { x, w } => {
                let (cout, cin) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = self.value(*x).len() / cin;
                if want(*x) {
                    let mut dx = vec![0.0; rows * cin];
                    gemm(
                        rows,
                        cout,
                        cin,
                        Mat { data: g, rs: cout, cs: 1 },
                        Mat { data: self.data(*w), rs: cin, cs: 1 },
                        &mut dx,
                        cin,
                        0.0,
                    );
                    acc(*x, dx);
                }
                if want(*w) {
                    let mut dw = vec![0.0; cout * cin];
                    gemm(
                        cout,
                        rows,
                        cin,
                        Mat { data: g, rs: 1, cs: cout },
                        Mat { data: self.data(*x), rs: cin, cs: 1 },
                        &mut dw,
                        cin,
                        0.0,
                    );
                    acc(*w, dw);
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (rows, patch, cout) = (geom.rows(), geom.patch(), geom.out_channels);
                if want(*w) {
                    let mut dw = vec![0.0; cout * patch];
                    gemm(
                        cout,
                        rows,
                        patch,
                        Mat { data: g, rs: 1, cs: cout },
                        Mat { data: cols, rs: patch, cs: 1 },
                        &mut dw,
                        patch,
                        0.0,
                    );
                    acc(*w, dw);
                }
                if want(*x) {
                    let mut dcols = vec![0.0; rows * patch];
                    gemm(
                        rows,
                        cout,
                        patch,
                        Mat { data: g, rs: cout, cs: 1 },
                        Mat { data: self.data(*w), rs: patch, cs: 1 },
                        &mut dcols,
                        patch,
                        0.0,
                    );
                    acc(*x, col2im(&dcols, geom));
                }
            }
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect(),
            ),
            Op::LeakyRelu(x, slope) => acc(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(d, &v)| if v > 0.0 { *d } else { slope * d })
                    .collect(),
            ),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = inv_std.len();
                let n = (xhat.len() / c) as f64;
                let gm = self.data(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                if want(*x) {
                    let mut dx = Vec::with_capacity(xhat.len());
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            let d = if *batch_stats {
                                gm[j] * inv_std[j] / n * (n * grow[j] - dbeta[j] - hrow[j] * dgamma[j])
                            } else {
                                gm[j] * inv_std[j] * grow[j]
                            };
                            dx.push(d);
                        }
                    }
                    acc(*x, dx);
                }
                if want(*gamma) {
                    acc(*gamma, dgamma);
                }
                if want(*beta) {
                    acc(*beta, dbeta);
                }
            }
            Op::GlobalAvgPool { x, spatial } => {
                let c = self.value(*x).channels();
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for grow in g.chunks(c) {
                    for _ in 0..*spatial {
                        dx.extend(grow.iter().map(|v| v / *spatial as f64));
                    }
                }
                acc(*x, dx);
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.value(*a).channels(), self.value(*b).channels());
                let rows = g.len() / (ca + cb);
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for row in g.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                if want(*a) {
                    acc(*a, da);
                }
                if want(*b) {
                    acc(*b, db);
                }
            }
            Op::Softmax(x) => {
                let c = node.value.channels();
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(c).zip(node.value.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(d, y)| y * (d - dot)));
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::MseScalar { x, target } => {
                let n = self.value(*x).len() as f64;
                acc(*x, self.data(*x).iter().map(|v| 2.0 * (v - target) / n * g[0]).collect());
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len() as f64;
                let diff: Vec<f64> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(x, y)| 2.0 * (x - y) / n * g[0])
                    .collect();
                if want(*b) {
                    acc(*b, diff.iter().map(|v| -v).collect());
                }
                if want(*a) {
                    acc(*a, diff);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = self.value(*logits).channels();
                let scale = g[0] / labels.len() as f64;
                let mut dx = probs.clone();
                for (row, &y) in dx.chunks_mut(n).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, dx);
            }
            Op::Gather { table, index } => {
                let rows = self.shape(*table)[0];
                let per = self.value(*table).len() / rows;
                let mut dt = vec![0.0; rows * per];
                for (k, &r) in index.iter().enumerate() {
                    for (d, v) in dt[r * per..(r + 1) * per].iter_mut().zip(&g[k * per..(k + 1) * per]) {
                        *d += v;
                    }
                }
                acc(*table, dt);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, cin) = (g.kernel, g.in_channels);
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    let mut r = 0;
    for b in 0..g.batch {
        let img = &x[b * g.height * g.width * cin..(b + 1) * g.height * g.width * cin];
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let row = &mut cols[r * patch..(r + 1) * patch];
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = (iy as usize * g.width + ix as usize) * cin;
                        let dst = (ky * k + kx) * cin;
                        row[dst..dst + cin].copy_from_slice(&img[src..src + cin]);
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, cin) = (g.kernel, g.in_channels);
    let patch = g.patch();
    let mut x = vec![0.0; g.batch * g.height * g.width * cin];
    let mut r = 0;
    for b in 0..g.batch {
        let base = b * g.height * g.width * cin;
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let row = &cols[r * patch..(r + 1) * patch];
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = base + (iy as usize * g.width + ix as usize) * cin;
                        let src = (ky * k + kx) * cin;
                        for (d, s) in x[dst..dst + cin].iter_mut().zip(&row[src..src + cin]) {
                            *d += s;
                        }
                    }
                }
                r += 1;
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(entries: &[(&str, Tensor)]) -> ParamSet {
        let mut ps = ParamSet::new();
        for (n, t) in entries {
            ps.insert(*n, t.clone()).unwrap();
        }
        ps
    }

    #[test]
    fn square_sum_gradient() {
        let ps = params(&[("w", Tensor::from_vec(vec![1.0, 2.0]).unwrap())]);
        let mut g = Graph::new();
        let w = g.param("m", "w", &ps).unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("m", "w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let ps = params(&[
            ("a", Tensor::from_vec(vec![3.0]).unwrap()),
            ("b", Tensor::from_vec(vec![5.0]).unwrap()),
        ]);
        let mut g = Graph::new();
        let a = g.param("m", "a", &ps).unwrap();
        let _b = g.param("m", "b", &ps).unwrap();
        let loss = g.sum(a);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("m", "b").unwrap().data(), &[0.0]);
    }

    #[test]
    fn frozen_param_receives_nothing() {
        let mut ps = params(&[("w", Tensor::from_vec(vec![1.0, 2.0]).unwrap())]);
        ps.set_frozen("w", true).unwrap();
        let mut g = Graph::new();
        let w = g.param("m", "w", &ps).unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("m", "w").is_none());
        let mut ps2 = ps.clone();
        grads.fill("m", &mut ps2).unwrap();
        assert!(ps2.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(NumError::Contract(_))));
        let other = Graph::new();
        assert!(matches!(other.backward(x), Err(NumError::State(_))));
    }

    #[test]
    fn delta_kernel_is_identity() {
        let img: Vec<f64> = (0..25).map(|v| v as f64 * 0.1 - 1.0).collect();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let ps = params(&[("k", Tensor::new(vec![1, 3, 3, 1], k).unwrap())]);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 5, 5, 1], img.clone()).unwrap());
        let w = g.param("c", "k", &ps).unwrap();
        let y = g.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 5, 5, 1]);
        assert_eq!(g.value(y).data(), img.as_slice());
    }

    #[test]
    fn conv_matches_direct_loop() {
        // 2 input channels, 3 output channels, stride 2, padding 1, 5x4 image
        let (h, w, cin, cout, k, s, p) = (5usize, 4usize, 2usize, 3usize, 3usize, 2usize, 1usize);
        let xd: Vec<f64> = (0..h * w * cin).map(|i| ((i * 7 % 11) as f64) / 5.0 - 1.0).collect();
        let wd: Vec<f64> = (0..cout * k * k * cin).map(|i| ((i * 5 % 13) as f64) / 6.0 - 1.0).collect();
        let ps = params(&[("k", Tensor::new(vec![cout, k, k, cin], wd.clone()).unwrap())]);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, h, w, cin], xd.clone()).unwrap());
        let wv = g.param("c", "k", &ps).unwrap();
        let y = g.conv2d(x, wv, s, p).unwrap();
        let (ho, wo) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
        assert_eq!(g.shape(y), &[1, ho, wo, cout]);
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += xd[(iy as usize * w + ix as usize) * cin + ci]
                                    * wd[((co * k + ky) * k + kx) * cin + ci];
                            }
                        }
                    }
                    let got = g.value(y).data()[(oy * wo + ox) * cout + co];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

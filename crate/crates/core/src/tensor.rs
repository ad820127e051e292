//! Dense `f64` tensors and a tape for reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass. Leaves are
//! pushed with [`Tape::leaf`] (trainable or differentiated inputs) or
//! [`Tape::constant`]; each operation method validates shapes, computes its
//! output eagerly and records a backward rule only when at least one input
//! requires a gradient. Outputs of operations whose inputs are all constant
//! are stored as constants.
//!
//! [`Tape::backward`] clears any previously stored gradients before it
//! propagates, so calling it twice on the same tape yields identical
//! gradients rather than accumulating.
//!
//! Broadcasting is limited to adding a rank-1 bias to every row of a
//! matrix ([`Tape::add_bias`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows of a matrix (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Length of the trailing axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy with one coordinate shifted by `delta`.
    pub fn perturbed(&self, index: usize, delta: f64) -> Self {
        let mut out = self.clone();
        out.data[index] += delta;
        out
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self { shape, data }
    }
}

/// Handle to a value stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        axis: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Select(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Operation recorder. Single-threaded; build one per forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient stored by the most recent [`Tape::backward`], if `v`
    /// requires a gradient and was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::unchecked(node.value.shape.clone(), g.clone()))
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn matrix_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.shape_err(op, a, b));
        }
        Ok((sa[0], sa[1], sb[0], sb[1]))
    }

    /// `[n,k] x [k,m] -> [n,m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k, k2, m) = self.matrix_dims("matmul", a, b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let t = Tensor::unchecked(vec![n, m], out);
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// `[n,k] x [m,k]^T -> [n,m]`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k, m, k2) = self.matrix_dims("matmul_t", a, b)?;
        if k != k2 {
            return Err(self.shape_err("matmul_t", a, b));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..m {
                let br = &bd[j * k..(j + 1) * k];
                out[i * m + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        let t = Tensor::unchecked(vec![n, m], out);
        self.push("matmul_t", t, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::unchecked(self.shape(a).to_vec(), data);
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    /// Adds rank-1 `bias` of length `m` to every row of `[n,m]` matrix `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(self.shape_err("add_bias", a, bias));
        }
        let m = sb[0];
        let bd = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % m])
            .collect();
        let t = Tensor::unchecked(sa.to_vec(), data);
        self.push("add_bias", t, Op::AddBias(a, bias), &[a, bias])
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::unchecked(self.shape(a).to_vec(), data);
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let v = self.value(a);
        let t = Tensor::unchecked(v.shape.clone(), v.data.iter().map(|x| x * c).collect());
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::unchecked(v.shape.clone(), v.data.iter().map(|&x| x.max(0.0)).collect());
        self.push("relu", t, Op::Relu(a), &[a])
    }

    /// Softmax over `axis` of a rank-1 or rank-2 tensor.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let groups = Groups::new("softmax", self.shape(a), axis)?;
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for g in 0..groups.count {
            let max = groups.iter(g).map(|i| x[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in groups.iter(g) {
                y[i] = (x[i] - max).exp();
                z += y[i];
            }
            for i in groups.iter(g) {
                y[i] /= z;
            }
        }
        let t = Tensor::unchecked(self.shape(a).to_vec(), y);
        self.push("softmax", t, Op::Softmax { x: a, axis }, &[a])
    }

    /// Gathers rows of `table` (`[V,D]`) -> `[ids.len(), D]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "embedding_lookup",
                lhs: s.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::contract(format!(
                "embedding_lookup: id {bad} out of range for vocabulary of {v}"
            )));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let t = Tensor::unchecked(vec![ids.len(), d], out);
        self.push(
            "embedding_lookup",
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Mean over rows: `[n,m] -> [1,m]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::Shape {
                op: "mean_rows",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (n, m) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += x[i * m + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let t = Tensor::unchecked(vec![1, m], out);
        self.push("mean_rows", t, Op::MeanRows(a), &[a])
    }

    /// Row-wise layer normalization with elementwise affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(self.shape_err("layer_norm", a, gamma));
        }
        let (n, m) = (s[0], s[1]);
        if self.shape(gamma) != [m] {
            return Err(self.shape_err("layer_norm", a, gamma));
        }
        if self.shape(beta) != [m] {
            return Err(self.shape_err("layer_norm", a, beta));
        }
        let x = self.value(a).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normed = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &x[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let xh = (row[j] - mean) * is;
                normed[i * m + j] = xh;
                out[i * m + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::unchecked(vec![n, m], out);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x: a,
                gamma,
                beta,
                normed,
                inv_std,
            },
            &[a, gamma, beta],
        )
    }

    /// Fused log-softmax + negative log-likelihood, averaged over the
    /// non-class axis. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], axis: usize) -> Result<Var> {
        let groups = Groups::new("cross_entropy", self.shape(logits), axis)?;
        if targets.len() != groups.count {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= groups.len) {
            return Err(Error::contract(format!(
                "cross_entropy: target {t} out of range for {} classes",
                groups.len
            )));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (g, &target) in targets.iter().enumerate() {
            let max = groups.iter(g).map(|i| x[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + groups.iter(g).map(|i| (x[i] - max).exp()).sum::<f64>().ln();
            for i in groups.iter(g) {
                probs[i] = (x[i] - lse).exp();
            }
            loss += lse - x[groups.index(g, target)];
        }
        loss /= groups.count as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                axis,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Scalar at flat `index`.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.value(a);
        if index >= v.len() {
            return Err(Error::Shape {
                op: "select",
                lhs: v.shape.clone(),
                rhs: vec![index],
            });
        }
        let x = v.data[index];
        self.push("select", Tensor::scalar(x), Op::Select(a, index), &[a])
    }

    /// Propagates d`output`/d`v` to every node that requires a gradient.
    ///
    /// Gradients from any earlier call are discarded first.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = &self.nodes[output.0];
        if !out.value.shape.is_empty() {
            return Err(Error::contract(format!(
                "backward: output must be a scalar, got shape {:?}",
                out.value.shape
            )));
        }
        if !out.requires_grad {
            return Err(Error::contract("backward: output is detached from every differentiable input"));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = g;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    // dA = dC B^T
                    let bd = val(*b);
                    let acc = self.slot(grads, *a);
                    for r in 0..n {
                        for c in 0..m {
                            let gv = g[r * m + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..k {
                                acc[r * k + t] += gv * bd[t * m + c];
                            }
                        }
                    }
                }
                if self.requires_grad(*b) {
                    // dB = A^T dC
                    let ad = val(*a);
                    let acc = self.slot(grads, *b);
                    for r in 0..n {
                        for t in 0..k {
                            let av = ad[r * k + t];
                            for c in 0..m {
                                acc[t * m + c] += av * g[r * m + c];
                            }
                        }
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                if self.requires_grad(*a) {
                    let bd = val(*b);
                    let acc = self.slot(grads, *a);
                    for r in 0..n {
                        for c in 0..m {
                            let gv = g[r * m + c];
                            for t in 0..k {
                                acc[r * k + t] += gv * bd[c * k + t];
                            }
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let ad = val(*a);
                    let acc = self.slot(grads, *b);
                    for r in 0..n {
                        for c in 0..m {
                            let gv = g[r * m + c];
                            for t in 0..k {
                                acc[c * k + t] += gv * ad[r * k + t];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        add_into(self.slot(grads, v), g);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if self.requires_grad(*a) {
                    add_into(self.slot(grads, *a), g);
                }
                if self.requires_grad(*bias) {
                    let m = self.shape(*bias)[0];
                    let acc = self.slot(grads, *bias);
                    for (idx, gv) in g.iter().enumerate() {
                        acc[idx % m] += gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bd = val(*b);
                    let acc = self.slot(grads, *a);
                    for ((s, gv), bv) in acc.iter_mut().zip(g).zip(bd) {
                        *s += gv * bv;
                    }
                }
                if self.requires_grad(*b) {
                    let ad = val(*a);
                    let acc = self.slot(grads, *b);
                    for ((s, gv), av) in acc.iter_mut().zip(g).zip(ad) {
                        *s += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                let acc = self.slot(grads, *a);
                for (s, gv) in acc.iter_mut().zip(g) {
                    *s += c * gv;
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                let acc = self.slot(grads, *a);
                for ((s, gv), xv) in acc.iter_mut().zip(g).zip(x) {
                    // subgradient 0 at exactly 0
                    if *xv > 0.0 {
                        *s += gv;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let groups = Groups::new("softmax", self.shape(*x), *axis).expect("validated in forward");
                let acc = self.slot(grads, *x);
                for grp in 0..groups.count {
                    let dot: f64 = groups.iter(grp).map(|idx| g[idx] * y[idx]).sum();
                    for idx in groups.iter(grp) {
                        acc[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let acc = self.slot(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut acc[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::MeanRows(a) => {
                let (n, m) = (self.shape(*a)[0], self.shape(*a)[1]);
                let acc = self.slot(grads, *a);
                let inv = 1.0 / n as f64;
                for r in 0..n {
                    for c in 0..m {
                        acc[r * m + c] += g[c] * inv;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let (n, m) = (self.shape(*x)[0], self.shape(*x)[1]);
                if self.requires_grad(*gamma) {
                    let acc = self.slot(grads, *gamma);
                    for (idx, gv) in g.iter().enumerate() {
                        acc[idx % m] += gv * normed[idx];
                    }
                }
                if self.requires_grad(*beta) {
                    let acc = self.slot(grads, *beta);
                    for (idx, gv) in g.iter().enumerate() {
                        acc[idx % m] += gv;
                    }
                }
                if self.requires_grad(*x) {
                    let gam = val(*gamma);
                    let acc = self.slot(grads, *x);
                    let mf = m as f64;
                    let mut dxh = vec![0.0; m];
                    for r in 0..n {
                        let base = r * m;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..m {
                            dxh[c] = g[base + c] * gam[c];
                            s1 += dxh[c];
                            s2 += dxh[c] * normed[base + c];
                        }
                        for c in 0..m {
                            acc[base + c] +=
                                inv_std[r] / mf * (mf * dxh[c] - s1 - normed[base + c] * s2);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                axis,
                targets,
                probs,
            } => {
                let groups =
                    Groups::new("cross_entropy", self.shape(*logits), *axis).expect("validated in forward");
                let scale = g[0] / groups.count as f64;
                let acc = self.slot(grads, *logits);
                for (grp, &t) in targets.iter().enumerate() {
                    for idx in groups.iter(grp) {
                        acc[idx] += scale * probs[idx];
                    }
                    acc[groups.index(grp, t)] -= scale;
                }
            }
            Op::Sum(a) => {
                let acc = self.slot(grads, *a);
                acc.iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Select(a, index) => {
                self.slot(grads, *a)[*index] += g[0];
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

/// Index arithmetic for reductions along one axis of a rank-1/rank-2 shape.
struct Groups {
    count: usize,
    len: usize,
    stride: usize,
    group_step: usize,
}

impl Groups {
    fn new(op: &'static str, shape: &[usize], axis: usize) -> Result<Self> {
        match (shape.len(), axis) {
            (1, 0) => Ok(Self {
                count: 1,
                len: shape[0],
                stride: 1,
                group_step: 0,
            }),
            (2, 1) => Ok(Self {
                count: shape[0],
                len: shape[1],
                stride: 1,
                group_step: shape[1],
            }),
            (2, 0) => Ok(Self {
                count: shape[1],
                len: shape[0],
                stride: shape[1],
                group_step: 1,
            }),
            _ => Err(Error::Shape {
                op,
                lhs: shape.to_vec(),
                rhs: vec![axis],
            }),
        }
        .and_then(|g| {
            if g.len == 0 {
                Err(Error::Shape {
                    op,
                    lhs: shape.to_vec(),
                    rhs: vec![axis],
                })
            } else {
                Ok(g)
            }
        })
    }

    fn index(&self, group: usize, j: usize) -> usize {
        group * self.group_step + j * self.stride
    }

    fn iter(&self, group: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).map(move |j| self.index(group, j))
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * m..(t + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (s, v) in acc.iter_mut().zip(g) {
        *s += v;
    }
}

/// Central-difference estimate of the gradient of scalar `f` at `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::contract(format!(
            "finite_difference_gradient: step must be positive, got {step}"
        )));
    }
    let mut out = vec![0.0; x.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let hi = f(&x.perturbed(i, step))?;
        let lo = f(&x.perturbed(i, -step))?;
        *o = (hi - lo) / (2.0 * step);
    }
    Tensor::new(x.shape.clone(), out)
}

/// `|a-b| / max(|a|, |b|, floor)`, maximised over elements.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn t2(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 2, &[1., 2., 3., 4.]));
        let i = tape.constant(t2(2, 2, &[1., 0., 0., 1.]));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![-1., 0., 2.5]).unwrap());
        let r = tape.relu(a).unwrap();
        assert_eq!(tape.value(r).data(), &[0., 0., 2.5]);
    }

    #[test]
    fn softmax_symmetric() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0., 0.]).unwrap());
        let s = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]).unwrap(), true);
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_flat_region_and_kink() {
        for x0 in [-1.0, 0.0] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(vec![x0]).unwrap(), true);
            let r = tape.relu(x).unwrap();
            let s = tape.sum(r).unwrap();
            tape.backward(s).unwrap();
            assert_eq!(tape.grad(x).unwrap().data(), &[0.0]);
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 3, &[0.; 6]));
        let b = tape.constant(t2(2, 3, &[0.; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }), "{err}");
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Tensor::vector(vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1e300]).unwrap());
        assert!(matches!(tape.scale(a, 1e300), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_requires_scalar_and_attached_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        let c = tape.constant(Tensor::vector(vec![1.0]).unwrap());
        let s = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn replay_yields_identical_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.5, -2.0]).unwrap(), true);
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let first = tape.grad(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(first, tape.grad(x).unwrap());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0]).unwrap(), true);
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn fd_quadratic_and_constant() {
        let x = Tensor::vector(vec![3.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
        let z = finite_difference_gradient(|_| Ok(4.2), &x, 1e-5).unwrap();
        assert_eq!(z.data(), &[0.0]);
        assert!(finite_difference_gradient(|_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn fused_cross_entropy_matches_naive_composition() {
        let logits = t2(2, 3, &[0.3, -1.2, 2.0, 0.0, 0.5, -0.5]);
        let targets = [2usize, 0];
        let mut fused = Tape::new();
        let l = fused.leaf(logits.clone(), true);
        let loss = fused.cross_entropy(l, &targets, 1).unwrap();
        fused.backward(loss).unwrap();

        // naive: -mean(log softmax[target])
        let mut naive = 0.0;
        let mut grad = vec![0.0; 6];
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            naive -= (row[t].exp() / z).ln() / 2.0;
            for c in 0..3 {
                grad[r * 3 + c] = (row[c].exp() / z - if c == t { 1.0 } else { 0.0 }) / 2.0;
            }
        }
        assert!((fused.value(loss).item().unwrap() - naive).abs() < 1e-12);
        assert!(max_relative_error(fused.grad(l).unwrap().data(), &grad, 1e-12) < 1e-12);
    }

    #[test]
    fn cross_entropy_column_axis_matches_row_axis() {
        let logits = t2(2, 3, &[0.3, -1.2, 2.0, 0.0, 0.5, -0.5]);
        let transposed = t2(3, 2, &[0.3, 0.0, -1.2, 0.5, 2.0, -0.5]);
        let mut a = Tape::new();
        let la = a.constant(logits);
        let ra = a.cross_entropy(la, &[1, 0], 1).unwrap();
        let mut b = Tape::new();
        let lb = b.constant(transposed);
        let rb = b.cross_entropy(lb, &[1, 0], 0).unwrap();
        assert!((a.value(ra).item().unwrap() - b.value(rb).item().unwrap()).abs() < 1e-14);
    }

    /// Builds a random composite exercising every op, returns scalar output.
    fn composite(tape: &mut Tape, vars: &[Var], ids: &[usize]) -> Result<Var> {
        let (table, w, g, b, bias) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
        let x = tape.embedding_lookup(table, ids)?;
        let q = tape.matmul(x, w)?;
        let s = tape.matmul_t(q, x)?;
        let s = tape.scale(s, 0.5)?;
        let p = tape.softmax(s, 1)?;
        let o = tape.matmul(p, x)?;
        let r = tape.add(o, x)?;
        let n = tape.layer_norm(r, g, b)?;
        let sq = tape.mul(n, n)?;
        let h = tape.add_bias(sq, bias)?;
        let h = tape.relu(h)?;
        let m = tape.mean_rows(h)?;
        let pc = tape.softmax(m, 0)?;
        let ce = tape.cross_entropy(m, &[1], 1)?;
        let sel = tape.select(pc, 2)?;
        let tot = tape.add(ce, sel)?;
        tape.sum(tot)
    }

    fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>, scale: f64) -> Tensor {
        let n = shape.iter().product();
        let d = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        Tensor::new(shape, d).unwrap()
    }

    #[test]
    fn all_ops_match_finite_differences() {
        for seed in 0..100u64 {
            let mut rng = crate::seed::rng(seed);
            let d = 4;
            let params = vec![
                random_tensor(&mut rng, vec![6, d], 1.0),
                random_tensor(&mut rng, vec![d, d], 1.0),
                random_tensor(&mut rng, vec![d], 1.0),
                random_tensor(&mut rng, vec![d], 1.0),
                random_tensor(&mut rng, vec![d], 1.0),
            ];
            let ids = [0usize, 3, 5, 3];
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
            let out = composite(&mut tape, &vars, &ids).unwrap();
            tape.backward(out).unwrap();
            for (k, p) in params.iter().enumerate() {
                let fd = finite_difference_gradient(
                    |t| {
                        let mut tp = Tape::new();
                        let vs: Vec<Var> = params
                            .iter()
                            .enumerate()
                            .map(|(j, q)| tp.leaf(if j == k { t.clone() } else { q.clone() }, true))
                            .collect();
                        let o = composite(&mut tp, &vs, &ids)?;
                        Ok(tp.value(o).item().unwrap())
                    },
                    p,
                    1e-5,
                )
                .unwrap();
                let err = max_relative_error(tape.grad(vars[k]).unwrap().data(), fd.data(), 1e-4);
                assert!(err < 1e-4, "seed {seed} param {k}: rel err {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(v in proptest::collection::vec(-50.0f64..50.0, 1..24)) {
            let cols = v.len();
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::matrix(1, cols, v).unwrap());
            let s = tape.softmax(a, 1).unwrap();
            let d = tape.value(s).data();
            prop_assert!(d.iter().all(|&p| p >= 0.0));
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn batch_gradient_is_sum_of_sample_gradients(
            w in proptest::collection::vec(-1.0f64..1.0, 6),
            x in proptest::collection::vec(-1.0f64..1.0, 9),
        ) {
            // rows of x are samples; loss = sum over samples of relu(x_i W) summed
            let wt = Tensor::matrix(3, 2, w).unwrap();
            let per_sample = |rows: &[usize]| {
                let mut tape = Tape::new();
                let wv = tape.leaf(wt.clone(), true);
                let data: Vec<f64> = rows.iter().flat_map(|&r| x[r * 3..r * 3 + 3].to_vec()).collect();
                let xv = tape.constant(Tensor::matrix(rows.len(), 3, data).unwrap());
                let h = tape.matmul(xv, wv).unwrap();
                let h = tape.relu(h).unwrap();
                let h = tape.mul(h, h).unwrap();
                let s = tape.sum(h).unwrap();
                tape.backward(s).unwrap();
                tape.grad(wv).unwrap().into_data()
            };
            let batch = per_sample(&[0, 1, 2]);
            let mut summed = vec![0.0; 6];
            for r in 0..3 {
                for (s, g) in summed.iter_mut().zip(per_sample(&[r])) {
                    *s += g;
                }
            }
            for (a, b) in batch.iter().zip(&summed) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

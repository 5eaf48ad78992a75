//! Reverse-mode differentiation tape.
//!
//! Operations execute eagerly and append a record to the tape; `backward`
//! sweeps the records in reverse to accumulate gradients. Insertion order is
//! topological by construction because an op's inputs must already exist.

use super::{IntTensor, Scalar, Tensor, TensorError};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
pub enum Op<E> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast add of a rank-1 bias row to every row of a rank-2 tensor.
    AddBias(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    /// Concatenation of rank-2 tensors along the last axis.
    Concat(Vec<Var>),
    /// Mean over one axis of a rank-2 tensor.
    MeanAxis(Var, usize),
    Reshape(Var),
    Scale(Var, E),
    SumAll(Var),
    /// Row gather: `table[indices]`, duplicate indices accumulate on backward.
    Embedding { table: Var, indices: IntTensor },
    /// Mean over sequence positions where `mask` is nonzero (count clamped to 1).
    MaskedMeanPool { seq: Var, mask: Tensor<E> },
    /// Fused softmax + cross-entropy on integer class targets, mean over batch.
    SoftmaxCrossEntropy {
        logits: Var,
        targets: IntTensor,
        probs: Tensor<E>,
    },
    /// Fused numerically stable binary cross-entropy on logits, mean over elements.
    SigmoidBce { logits: Var, targets: Tensor<E> },
    /// Mean squared error against a constant target, mean over elements.
    Mse { pred: Var, target: Tensor<E> },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
}

/// Gradients produced by one backward sweep, addressed by [`Var`].
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, materialized as zeros when `v` is not on any path to
    /// the loss.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape<E>) -> Tensor<E> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape().to_vec()),
        }
    }
}

#[derive(Default)]
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input or parameter value.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected rank-2 tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner extents differ: [{m}x{k}] x [{k2}x{n}]"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for l in 0..k {
                let a_il = av[i * k + l];
                let brow = &bv[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + a_il * brow[j];
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out).expect("matmul output shape"),
            Op::Matmul(a, b),
        ))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(E, E) -> E,
        op: Op<E>,
    ) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op_name,
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_vec(shape, data).expect("elementwise shape"), op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x, "add_bias")?;
        let bshape = self.value(bias).shape();
        if bshape != [n] {
            return Err(shape_err(
                "add_bias",
                format!("bias shape {bshape:?} does not match row width {n}"),
            ));
        }
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(xv[i * n + j] + bv[j]);
            }
        }
        Ok(self.push(
            Tensor::from_vec(vec![m, n], out).expect("add_bias shape"),
            Op::AddBias(x, bias),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > E::zero() { v } else { E::zero() });
        self.push(value, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.push(value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid_scalar);
        self.push(value, Op::Sigmoid(x))
    }

    /// Concatenate rank-2 tensors along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".to_string()));
        }
        let (rows, _) = self.dims2(parts[0], "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, w) = self.dims2(p, "concat")?;
            if r != rows {
                return Err(shape_err(
                    "concat",
                    format!("row counts differ: {rows} vs {r}"),
                ));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::from_vec(vec![rows, total], out).expect("concat shape"),
            Op::Concat(parts.to_vec()),
        ))
    }

    /// Mean over `axis` (0 or 1) of a rank-2 tensor.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x, "mean_axis")?;
        if axis > 1 {
            return Err(shape_err("mean_axis", format!("axis {axis} out of range")));
        }
        let xv = self.value(x).data();
        let value = if axis == 0 {
            let inv = E::from_f64(1.0 / m as f64);
            let mut out = vec![E::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += xv[i * n + j];
                }
            }
            for v in &mut out {
                *v *= inv;
            }
            Tensor::from_vec(vec![n], out).expect("mean_axis shape")
        } else {
            let inv = E::from_f64(1.0 / n as f64);
            let mut out = vec![E::zero(); m];
            for i in 0..m {
                for j in 0..n {
                    out[i] += xv[i * n + j];
                }
            }
            for v in &mut out {
                *v *= inv;
            }
            Tensor::from_vec(vec![m], out).expect("mean_axis shape")
        };
        Ok(self.push(value, Op::MeanAxis(x, axis)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.value(x).len() {
            return Err(shape_err(
                "reshape",
                format!(
                    "cannot reshape {:?} into {shape:?}",
                    self.value(x).shape()
                ),
            ));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push(
            Tensor::from_vec(shape, data).expect("reshape shape"),
            Op::Reshape(x),
        ))
    }

    pub fn scale(&mut self, x: Var, c: E) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = E::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll(x))
    }

    /// Gather rows of `table` ([vocab, dim]) at `indices` ([batch, len]),
    /// producing [batch, len, dim].
    pub fn embedding_lookup(&mut self, table: Var, indices: &IntTensor) -> Result<Var, TensorError> {
        let (vocab, dim) = self.dims2(table, "embedding_lookup")?;
        if indices.rank() != 2 {
            return Err(shape_err(
                "embedding_lookup",
                format!("indices must be rank-2, got {:?}", indices.shape()),
            ));
        }
        let (batch, len) = (indices.shape()[0], indices.shape()[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(batch * len * dim);
        for &idx in indices.data() {
            let idx = idx as usize;
            if idx >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: idx,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tv[idx * dim..(idx + 1) * dim]);
        }
        Ok(self.push(
            Tensor::from_vec(vec![batch, len, dim], out).expect("embedding shape"),
            Op::Embedding {
                table,
                indices: indices.clone(),
            },
        ))
    }

    /// Mean over sequence positions where `mask` ([batch, len]) is nonzero.
    /// Rows with an all-zero mask produce zeros (count clamps to 1).
    pub fn masked_mean_pool(&mut self, seq: Var, mask: &Tensor<E>) -> Result<Var, TensorError> {
        let s = self.value(seq).shape().to_vec();
        if s.len() != 3 {
            return Err(shape_err(
                "masked_mean_pool",
                format!("expected rank-3 sequence, got {s:?}"),
            ));
        }
        let (batch, len, dim) = (s[0], s[1], s[2]);
        if mask.shape() != [batch, len] {
            return Err(shape_err(
                "masked_mean_pool",
                format!("mask shape {:?} vs sequence {s:?}", mask.shape()),
            ));
        }
        let sv = self.value(seq).data();
        let mv = mask.data();
        let mut out = vec![E::zero(); batch * dim];
        for b in 0..batch {
            let mut count = E::zero();
            for l in 0..len {
                let m = mv[b * len + l];
                if m != E::zero() {
                    count += E::one();
                    for d in 0..dim {
                        out[b * dim + d] += sv[(b * len + l) * dim + d];
                    }
                }
            }
            let denom = if count > E::zero() { count } else { E::one() };
            for d in 0..dim {
                out[b * dim + d] = out[b * dim + d] / denom;
            }
        }
        Ok(self.push(
            Tensor::from_vec(vec![batch, dim], out).expect("pool shape"),
            Op::MaskedMeanPool {
                seq,
                mask: mask.clone(),
            },
        ))
    }

    /// Mean cross-entropy of `logits` ([batch, classes]) against integer
    /// targets ([batch]). Returns the scalar loss and the softmax
    /// probabilities (the latter detached from the tape).
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &IntTensor,
    ) -> Result<(Var, Tensor<E>), TensorError> {
        let (batch, classes) = self.dims2(logits, "softmax_cross_entropy")?;
        if targets.shape() != [batch] {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("targets shape {:?} vs batch {batch}", targets.shape()),
            ));
        }
        for &t in targets.data() {
            if t as usize >= classes {
                return Err(TensorError::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: t as usize,
                    bound: classes,
                });
            }
        }
        let zv = self.value(logits).data();
        let probs = softmax_rows(self.value(logits));
        let mut total = E::zero();
        for (b, &t) in targets.data().iter().enumerate() {
            let row = &zv[b * classes..(b + 1) * classes];
            let mut max = row[0];
            for &z in row {
                if z > max {
                    max = z;
                }
            }
            let mut sum = E::zero();
            for &z in row {
                sum += (z - max).exp();
            }
            // -ln softmax(z)[t] in log-sum-exp form: stays finite for any
            // finite logits.
            total += sum.ln() - (row[t as usize] - max);
        }
        let loss = total * E::from_f64(1.0 / batch as f64);
        let var = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.clone(),
                probs: probs.clone(),
            },
        );
        Ok((var, probs))
    }

    /// Mean stable binary cross-entropy on logits against {0,1} targets of
    /// the same shape.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &Tensor<E>) -> Result<Var, TensorError> {
        if self.value(logits).shape() != targets.shape() {
            return Err(shape_err(
                "sigmoid_bce",
                format!(
                    "{:?} vs {:?}",
                    self.value(logits).shape(),
                    targets.shape()
                ),
            ));
        }
        let zv = self.value(logits).data();
        let n = zv.len();
        let mut total = E::zero();
        for (&z, &y) in zv.iter().zip(targets.data()) {
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            let zpos = if z > E::zero() { z } else { E::zero() };
            total += zpos - z * y + (E::one() + (-z.abs()).exp()).ln();
        }
        let loss = total * E::from_f64(1.0 / n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SigmoidBce {
                logits,
                targets: targets.clone(),
            },
        ))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor<E>) -> Result<Var, TensorError> {
        if self.value(pred).shape() != target.shape() {
            return Err(shape_err(
                "mse",
                format!("{:?} vs {:?}", self.value(pred).shape(), target.shape()),
            ));
        }
        let n = target.len();
        let mut total = E::zero();
        for (&p, &t) in self.value(pred).data().iter().zip(target.data()) {
            let d = p - t;
            total += d * d;
        }
        let loss = total * E::from_f64(1.0 / n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradient of the loss w.r.t.
    /// itself is 1; values not on any path to the loss have no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), E::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.accumulate(&self.nodes[id].op, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Tensor<E>>], v: Var, delta: Tensor<E>) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn accumulate(&self, op: &Op<E>, id: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1])
                };
                let n = self.value(*b).shape()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let gv = g.data();
                let mut da = vec![E::zero(); m * k];
                for i in 0..m {
                    for j in 0..n {
                        let g_ij = gv[i * n + j];
                        for l in 0..k {
                            da[i * k + l] += g_ij * bv[l * n + j];
                        }
                    }
                }
                let mut db = vec![E::zero(); k * n];
                for i in 0..m {
                    for l in 0..k {
                        let a_il = av[i * k + l];
                        for j in 0..n {
                            db[l * n + j] += a_il * gv[i * n + j];
                        }
                    }
                }
                self.add_grad(grads, *a, Tensor::from_vec(vec![m, k], da).unwrap());
                self.add_grad(grads, *b, Tensor::from_vec(vec![k, n], db).unwrap());
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                let da: Vec<E> = g.data().iter().zip(bv).map(|(&gv, &b)| gv * b).collect();
                let db: Vec<E> = g.data().iter().zip(av).map(|(&gv, &a)| gv * a).collect();
                let shape = g.shape().to_vec();
                self.add_grad(grads, *a, Tensor::from_vec(shape.clone(), da).unwrap());
                self.add_grad(grads, *b, Tensor::from_vec(shape, db).unwrap());
            }
            Op::AddBias(x, bias) => {
                let (m, n) = {
                    let s = g.shape();
                    (s[0], s[1])
                };
                let gv = g.data();
                let mut db = vec![E::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += gv[i * n + j];
                    }
                }
                self.add_grad(grads, *x, g.clone());
                self.add_grad(grads, *bias, Tensor::from_vec(vec![n], db).unwrap());
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx: Vec<E> = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &x)| if x > E::zero() { gv } else { E::zero() })
                    .collect();
                self.add_grad(grads, *x, Tensor::from_vec(g.shape().to_vec(), dx).unwrap());
            }
            Op::Tanh(x) => {
                let yv = self.nodes[id].value.data();
                let dx: Vec<E> = g
                    .data()
                    .iter()
                    .zip(yv)
                    .map(|(&gv, &y)| gv * (E::one() - y * y))
                    .collect();
                self.add_grad(grads, *x, Tensor::from_vec(g.shape().to_vec(), dx).unwrap());
            }
            Op::Sigmoid(x) => {
                let yv = self.nodes[id].value.data();
                let dx: Vec<E> = g
                    .data()
                    .iter()
                    .zip(yv)
                    .map(|(&gv, &y)| gv * y * (E::one() - y))
                    .collect();
                self.add_grad(grads, *x, Tensor::from_vec(g.shape().to_vec(), dx).unwrap());
            }
            Op::Concat(parts) => {
                let rows = g.shape()[0];
                let total = g.shape()[1];
                let gv = g.data();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut dp = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        dp.extend_from_slice(&gv[i * total + offset..i * total + offset + w]);
                    }
                    self.add_grad(grads, p, Tensor::from_vec(vec![rows, w], dp).unwrap());
                    offset += w;
                }
            }
            Op::MeanAxis(x, axis) => {
                let s = self.value(*x).shape();
                let (m, n) = (s[0], s[1]);
                let gv = g.data();
                let mut dx = vec![E::zero(); m * n];
                if *axis == 0 {
                    let inv = E::from_f64(1.0 / m as f64);
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = gv[j] * inv;
                        }
                    }
                } else {
                    let inv = E::from_f64(1.0 / n as f64);
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = gv[i] * inv;
                        }
                    }
                }
                self.add_grad(grads, *x, Tensor::from_vec(vec![m, n], dx).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                let dx = Tensor::from_vec(shape, g.data().to_vec()).unwrap();
                self.add_grad(grads, *x, dx);
            }
            Op::Scale(x, c) => {
                self.add_grad(grads, *x, g.map(|v| v * *c));
            }
            Op::SumAll(x) => {
                let seed = g.data()[0];
                let shape = self.value(*x).shape().to_vec();
                self.add_grad(grads, *x, Tensor::full(shape, seed));
            }
            Op::Embedding { table, indices } => {
                let (vocab, dim) = {
                    let s = self.value(*table).shape();
                    (s[0], s[1])
                };
                let gv = g.data();
                let mut dt = vec![E::zero(); vocab * dim];
                for (pos, &idx) in indices.data().iter().enumerate() {
                    let idx = idx as usize;
                    for d in 0..dim {
                        dt[idx * dim + d] += gv[pos * dim + d];
                    }
                }
                self.add_grad(grads, *table, Tensor::from_vec(vec![vocab, dim], dt).unwrap());
            }
            Op::MaskedMeanPool { seq, mask } => {
                let s = self.value(*seq).shape();
                let (batch, len, dim) = (s[0], s[1], s[2]);
                let gv = g.data();
                let mv = mask.data();
                let mut ds = vec![E::zero(); batch * len * dim];
                for b in 0..batch {
                    let mut count = E::zero();
                    for l in 0..len {
                        if mv[b * len + l] != E::zero() {
                            count += E::one();
                        }
                    }
                    let denom = if count > E::zero() { count } else { E::one() };
                    let inv = E::one() / denom;
                    for l in 0..len {
                        if mv[b * len + l] != E::zero() {
                            for d in 0..dim {
                                ds[(b * len + l) * dim + d] = gv[b * dim + d] * inv;
                            }
                        }
                    }
                }
                self.add_grad(
                    grads,
                    *seq,
                    Tensor::from_vec(vec![batch, len, dim], ds).unwrap(),
                );
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (batch, classes) = {
                    let s = probs.shape();
                    (s[0], s[1])
                };
                let seed = g.data()[0];
                let inv = E::from_f64(1.0 / batch as f64);
                let mut dz = probs.data().to_vec();
                for (b, &t) in targets.data().iter().enumerate() {
                    dz[b * classes + t as usize] -= E::one();
                }
                for v in &mut dz {
                    *v = *v * inv * seed;
                }
                self.add_grad(
                    grads,
                    *logits,
                    Tensor::from_vec(vec![batch, classes], dz).unwrap(),
                );
            }
            Op::SigmoidBce { logits, targets } => {
                let zv = self.value(*logits).data();
                let seed = g.data()[0];
                let inv = E::from_f64(1.0 / zv.len() as f64);
                let dz: Vec<E> = zv
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &y)| (sigmoid_scalar(z) - y) * inv * seed)
                    .collect();
                self.add_grad(
                    grads,
                    *logits,
                    Tensor::from_vec(self.value(*logits).shape().to_vec(), dz).unwrap(),
                );
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred).data();
                let seed = g.data()[0];
                let two_inv = E::from_f64(2.0 / pv.len() as f64);
                let dp: Vec<E> = pv
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| (p - t) * two_inv * seed)
                    .collect();
                self.add_grad(
                    grads,
                    *pred,
                    Tensor::from_vec(self.value(*pred).shape().to_vec(), dp).unwrap(),
                );
            }
        }
    }
}

fn sigmoid_scalar<E: Scalar>(z: E) -> E {
    if z >= E::zero() {
        E::one() / (E::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (E::one() + e)
    }
}

/// Row-wise softmax with max subtraction, detached from any tape.
pub fn softmax_rows<E: Scalar>(logits: &Tensor<E>) -> Tensor<E> {
    assert_eq!(logits.rank(), 2, "softmax_rows expects rank-2 logits");
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    let zv = logits.data();
    let mut out = vec![E::zero(); rows * cols];
    for i in 0..rows {
        let row = &zv[i * cols..(i + 1) * cols];
        let mut max = row[0];
        for &z in row {
            if z > max {
                max = z;
            }
        }
        let mut sum = E::zero();
        for j in 0..cols {
            let e = (row[j] - max).exp();
            out[i * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[i * cols + j] = out[i * cols + j] / sum;
        }
    }
    Tensor::from_vec(vec![rows, cols], out).expect("softmax shape")
}

/// Element-wise stable sigmoid, detached from any tape.
pub fn sigmoid_elems<E: Scalar>(logits: &Tensor<E>) -> Tensor<E> {
    logits.map(sigmoid_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let id = tape.leaf(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let c = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(c), &t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    }

    #[test]
    fn matmul_small_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(t2(&[&[5.0], &[6.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &t2(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_rejects_bad_inner() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_gradient_of_sum_is_ones_times_b_transposed() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(t2(&[&[0.5, -1.0, 2.0], &[1.5, 0.0, -0.5]]));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss).unwrap();
        // d sum(AB) / dA = ones * B^T: row i of dA is the column sums of B.
        let da = grads.get(a).unwrap();
        let expected = [0.5 - 1.0 + 2.0, 1.5 + 0.0 - 0.5];
        for row in 0..2 {
            for col in 0..2 {
                assert!((da.data()[row * 2 + col] - expected[col]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embedding_gathers_rows() {
        let mut tape = Tape::new();
        let table = tape.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let idx = IntTensor::from_vec(vec![1, 2], vec![0, 2]).unwrap();
        let out = tape.embedding_lookup(table, &idx).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 2, 2]);
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn embedding_duplicate_indices_accumulate() {
        let mut tape = Tape::new();
        let table = tape.leaf(t2(&[&[0.0, 0.0], &[0.0, 0.0]]));
        let idx = IntTensor::from_vec(vec![1, 2], vec![1, 1]).unwrap();
        let out = tape.embedding_lookup(table, &idx).unwrap();
        let loss = tape.sum_all(out);
        let grads = tape.backward(loss).unwrap();
        let dt = grads.get(table).unwrap();
        // Row 1 was gathered twice, so its gradient is the sum of both
        // position gradients (1 + 1 per column).
        assert_eq!(dt.data(), &[0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::<f64>::zeros(vec![3, 2]));
        let idx = IntTensor::from_vec(vec![1, 1], vec![3]).unwrap();
        assert!(matches!(
            tape.embedding_lookup(table, &idx),
            Err(TensorError::IndexOutOfRange { index: 3, bound: 3, .. })
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::<f64>::zeros(vec![1, 4]));
        let targets = IntTensor::from_vec(vec![1], vec![2]).unwrap();
        let (loss, probs) = tape.softmax_cross_entropy(logits, &targets).unwrap();
        let l = tape.value(loss).scalar_value().unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);
        for &p in probs.data() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_extreme_logits_stay_finite() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t2(&[&[1000.0, 0.0]]));
        let targets = IntTensor::from_vec(vec![1], vec![0]).unwrap();
        let (loss, _) = tape.softmax_cross_entropy(logits, &targets).unwrap();
        let l = tape.value(loss).scalar_value().unwrap();
        assert!(l.is_finite());
        assert!(l.abs() < 1e-9);
    }

    #[test]
    fn bce_at_zero_logit_is_ln_two() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t2(&[&[0.0]]));
        let targets = t2(&[&[1.0]]);
        let loss = tape.sigmoid_bce(logits, &targets).unwrap();
        let l = tape.value(loss).scalar_value().unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_extreme_negative_logit_stays_finite() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t2(&[&[-1000.0]]));
        let targets = t2(&[&[0.0]]);
        let loss = tape.sigmoid_bce(logits, &targets).unwrap();
        let l = tape.value(loss).scalar_value().unwrap();
        assert!(l.is_finite());
        assert!(l.abs() < 1e-9);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(t2(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn disconnected_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(t2(&[&[1.0]]));
        let unused = tape.leaf(t2(&[&[5.0]]));
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(
            grads.get_or_zeros(unused, &tape).data(),
            &[0.0],
            "materialized gradient for a disconnected value is zero"
        );
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let p = tape.leaf(t2(&[&[1.0, 2.0]]));
        assert!(matches!(
            tape.backward(p),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn masked_pool_ignores_padded_positions() {
        let mut tape = Tape::new();
        let seq = tape.leaf(
            Tensor::from_vec(vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0]).unwrap(),
        );
        let mask = t2(&[&[1.0, 1.0, 0.0]]);
        let out = tape.masked_mean_pool(seq, &mask).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 3.0]);
    }

    #[test]
    fn empty_batch_flows_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f32>::zeros(vec![0, 3]));
        let w = tape.leaf(Tensor::<f32>::zeros(vec![3, 2]));
        let y = tape.matmul(x, w).unwrap();
        assert_eq!(tape.value(y).shape(), &[0, 2]);
        let r = tape.relu(y);
        assert_eq!(tape.value(r).shape(), &[0, 2]);
    }

    /// Central finite differences in f64 for every differentiable input of a
    /// scalar-valued tape program.
    fn finite_diff_check(
        build: impl Fn(&mut Tape<f64>, &[Tensor<f64>]) -> (Vec<Var>, Var),
        inputs: &[Tensor<f64>],
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let (vars, loss) = build(&mut tape, inputs);
        let grads = tape.backward(loss).unwrap();

        let h = 1e-3;
        for (which, base) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[which], &tape);
            for i in 0..base.len() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[i] += h;
                let mut tp = Tape::new();
                let (_, lp) = build(&mut tp, &plus);
                let fp = tp.value(lp).scalar_value().unwrap();

                let mut minus = inputs.to_vec();
                minus[which].data_mut()[i] -= h;
                let mut tm = Tape::new();
                let (_, lm) = build(&mut tm, &minus);
                let fm = tm.value(lm).scalar_value().unwrap();

                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic.data()[i];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom <= tol,
                    "input {which} coord {i}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    fn pseudo_values(n: usize, seed: u64) -> Vec<f64> {
        // Small deterministic values, kept away from relu's kink.
        (0..n)
            .map(|i| {
                let x = ((i as u64 + 1).wrapping_mul(seed).wrapping_mul(6364136223846793005) >> 33)
                    as f64
                    / (1u64 << 31) as f64;
                let v = x - 0.5;
                if v.abs() < 0.05 {
                    v + 0.1
                } else {
                    v
                }
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        // matmul -> add_bias -> tanh -> concat with relu branch -> mse
        let a = Tensor::from_vec(vec![3, 4], pseudo_values(12, 11)).unwrap();
        let w = Tensor::from_vec(vec![4, 2], pseudo_values(8, 23)).unwrap();
        let bias = Tensor::from_vec(vec![2], pseudo_values(2, 37)).unwrap();
        let target = Tensor::from_vec(vec![3, 8], pseudo_values(24, 53)).unwrap();
        finite_diff_check(
            |tape, inputs| {
                let a = tape.leaf(inputs[0].clone());
                let w = tape.leaf(inputs[1].clone());
                let b = tape.leaf(inputs[2].clone());
                let mm = tape.matmul(a, w).unwrap();
                let biased = tape.add_bias(mm, b).unwrap();
                let t = tape.tanh(biased);
                let r = tape.relu(a);
                let s = tape.sigmoid(mm);
                let joined = tape.concat(&[t, r, s]).unwrap();
                let pooled = tape.mean_axis(joined, 1).unwrap();
                let wide = tape.reshape(pooled, vec![3, 1]).unwrap();
                let scaled = tape.scale(wide, 1.7);
                let back = tape.reshape(scaled, vec![3, 1]).unwrap();
                let sum = tape.sum_all(back);
                let joined2 = tape.scale(joined, 0.3);
                let m = tape.mse(joined2, &target).unwrap();
                let both = tape.add(sum, m).unwrap();
                (vec![a, w, b], both)
            },
            &[a, w, bias],
            1e-6,
        );
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let logits = Tensor::from_vec(vec![4, 3], pseudo_values(12, 71)).unwrap();
        let ce_targets = IntTensor::from_vec(vec![4], vec![0, 2, 1, 2]).unwrap();
        finite_diff_check(
            |tape, inputs| {
                let z = tape.leaf(inputs[0].clone());
                let (loss, _) = tape.softmax_cross_entropy(z, &ce_targets).unwrap();
                (vec![z], loss)
            },
            &[logits.clone()],
            1e-6,
        );

        let bce_targets =
            Tensor::from_vec(vec![4, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0])
                .unwrap();
        finite_diff_check(
            |tape, inputs| {
                let z = tape.leaf(inputs[0].clone());
                let loss = tape.sigmoid_bce(z, &bce_targets).unwrap();
                (vec![z], loss)
            },
            &[logits],
            1e-6,
        );
    }

    #[test]
    fn embedding_and_pool_gradients_match_finite_differences() {
        let table = Tensor::from_vec(vec![5, 3], pseudo_values(15, 91)).unwrap();
        let indices = IntTensor::from_vec(vec![2, 4], vec![0, 3, 3, 1, 4, 0, 0, 2]).unwrap();
        let mask =
            Tensor::from_vec(vec![2, 4], vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        finite_diff_check(
            |tape, inputs| {
                let t = tape.leaf(inputs[0].clone());
                let emb = tape.embedding_lookup(t, &indices).unwrap();
                let pooled = tape.masked_mean_pool(emb, &mask).unwrap();
                let sq = tape.mul(pooled, pooled).unwrap();
                let loss = tape.sum_all(sq);
                (vec![t], loss)
            },
            &[table],
            1e-6,
        );
    }
}

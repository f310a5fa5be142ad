//! Eager reverse-mode differentiation over a recorded operation tape.
//!
//! Operations execute immediately and append a node holding the result plus
//! enough structure to replay exact vector-Jacobian products in reverse.
//! The primitive set is the minimal closed family needed by multi-layer
//! perceptrons and every loss in this crate: affine maps, ReLU, batched
//! norms and normalization, cosine similarity, mean-squared row distance,
//! fused softmax cross-entropy, temperature-softened KL divergence, the
//! scalar hinge, elementwise add/mul/scale, row concatenation, and batch
//! mean.
//!
//! Every completed operation is checked for non-finite values; violations
//! surface as numeric errors naming the offending node. Subgradients at the
//! ReLU and hinge kinks are defined as zero, so the hinge's zero-loss region
//! is an exact no-op for gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numeric::tensor::{ParamSet, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param {
        trainable: bool,
    },
    /// (m,k)·(k,n) → (m,n)
    MatMul {
        a: ValueId,
        b: ValueId,
    },
    /// (m,k)·(n,k)ᵀ → (m,n)
    MatMulNt {
        a: ValueId,
        b: ValueId,
    },
    /// (m,n) + (n,) broadcast over rows
    AddRowBias {
        x: ValueId,
        bias: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        x: ValueId,
        factor: f64,
    },
    Relu {
        x: ValueId,
    },
    ConcatRows {
        a: ValueId,
        b: ValueId,
    },
    RowL2Norm {
        x: ValueId,
    },
    L2NormalizeRows {
        x: ValueId,
    },
    CosineRows {
        a: ValueId,
        b: ValueId,
    },
    SqL2MeanRows {
        a: ValueId,
        b: ValueId,
    },
    SoftmaxCeRows {
        logits: ValueId,
        labels: Vec<usize>,
    },
    KlSoftenedRows {
        teacher: ValueId,
        student: ValueId,
        temperature: f64,
    },
    Hinge {
        x: ValueId,
        margin: f64,
    },
    MeanAll {
        x: ValueId,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNt { .. } => "matmul_nt",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::ConcatRows { .. } => "concat_rows",
            Op::RowL2Norm { .. } => "row_l2_norms",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::CosineRows { .. } => "cosine_rows",
            Op::SqL2MeanRows { .. } => "sq_l2_mean_rows",
            Op::SoftmaxCeRows { .. } => "softmax_ce_rows",
            Op::KlSoftenedRows { .. } => "kl_softened_rows",
            Op::Hinge { .. } => "hinge",
            Op::MeanAll { .. } => "mean_all",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients with respect to tape values, indexed by [`ValueId`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for a value, if any gradient flowed to it.
    pub fn get(&self, id: ValueId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Recorded forward computation supporting exact reverse-mode gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: BTreeMap<String, ValueId>,
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

    /// Value produced by a node.
    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Registers a constant leaf. No gradient obligation is implied, but a
    /// gradient with respect to it is still available from [`Tape::backward`].
    pub fn input(&mut self, t: &Tensor) -> ValueId {
        self.push_unchecked(Op::Input, t.clone())
    }

    /// Registers a named parameter leaf, cloning its current value.
    /// Repeated registration of one name returns the original node so
    /// gradient contributions accumulate correctly.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<ValueId> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let p = params.get(name)?;
        let id = self.push_unchecked(
            Op::Param {
                trainable: p.trainable,
            },
            p.value.clone(),
        );
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Appends a node after validating the result is finite everywhere.
    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<ValueId> {
        let node = self.nodes.len();
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                node,
                op: op.name(),
                message: format!("non-finite value {} at flat index {}", data[bad], bad),
            });
        }
        let value = Tensor::new(shape, data).map_err(|e| Error::Internal(e.to_string()))?;
        Ok(self.push_unchecked(op, value))
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Config(format!(
            "{detail} (node {} would be {op})",
            self.nodes.len()
        ))
    }

    fn want_rank2(&self, op: &'static str, id: ValueId) -> Result<(usize, usize)> {
        let t = self.value(id);
        if t.rank() != 2 {
            return Err(self.shape_err(op, format!("expected rank-2 input, got {:?}", t.shape())));
        }
        Ok((t.rows(), t.cols()))
    }

    /// (m,k)·(k,n) matrix product.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.want_rank2("matmul", a)?;
        let (k2, n) = self.want_rank2("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", format!("inner dims {k} vs {k2} differ")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * db[p * n + j];
                }
            }
        }
        self.push(Op::MatMul { a, b }, vec![m, n], out)
    }

    /// (m,k)·(n,k)ᵀ product; right operand rows index the output columns.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.want_rank2("matmul_nt", a)?;
        let (n, k2) = self.want_rank2("matmul_nt", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul_nt", format!("inner dims {k} vs {k2} differ")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += da[i * k + p] * db[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        self.push(Op::MatMulNt { a, b }, vec![m, n], out)
    }

    /// Adds a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_row_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (m, n) = self.want_rank2("add_row_bias", x)?;
        let bt = self.value(bias);
        if bt.rank() != 1 || bt.len() != n {
            return Err(self.shape_err(
                "add_row_bias",
                format!("bias shape {:?} does not match {n} columns", bt.shape()),
            ));
        }
        let (dx, db) = (self.value(x).data(), self.value(bias).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = dx[i * n + j] + db[j];
            }
        }
        self.push(Op::AddRowBias { x, bias }, vec![m, n], out)
    }

    fn want_same_shape(&self, op: &'static str, a: ValueId, b: ValueId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(self.shape_err(op, format!("shapes {sa:?} and {sb:?} differ")));
        }
        Ok(sa.to_vec())
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let shape = self.want_same_shape("add", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add { a, b }, shape, out)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let shape = self.want_same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul { a, b }, shape, out)
    }

    /// Multiplies every entry by a constant.
    pub fn scale(&mut self, x: ValueId, factor: f64) -> Result<ValueId> {
        if !factor.is_finite() {
            return Err(self.shape_err("scale", format!("non-finite factor {factor}")));
        }
        let shape = self.value(x).shape().to_vec();
        let out = self.value(x).data().iter().map(|v| v * factor).collect();
        self.push(Op::Scale { x, factor }, shape, out)
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        let shape = self.value(x).shape().to_vec();
        let out = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        self.push(Op::Relu { x }, shape, out)
    }

    /// Stacks the rows of `a` above the rows of `b` (equal column counts).
    pub fn concat_rows(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ma, na) = self.want_rank2("concat_rows", a)?;
        let (mb, nb) = self.want_rank2("concat_rows", b)?;
        if na != nb {
            return Err(self.shape_err("concat_rows", format!("column counts {na} vs {nb}")));
        }
        let mut out = Vec::with_capacity((ma + mb) * na);
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        self.push(Op::ConcatRows { a, b }, vec![ma + mb, na], out)
    }

    /// Per-row Euclidean norms of a rank-2 tensor.
    pub fn row_l2_norms(&mut self, x: ValueId) -> Result<ValueId> {
        let (m, n) = self.want_rank2("row_l2_norms", x)?;
        let d = self.value(x).data();
        let out = (0..m)
            .map(|i| d[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.push(Op::RowL2Norm { x }, vec![m], out)
    }

    /// Scales each row to unit Euclidean norm. Zero rows are a data error.
    pub fn l2_normalize_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let (m, n) = self.want_rank2("l2_normalize_rows", x)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Data(format!(
                    "cannot normalize zero-norm row {i} (node {} would be l2_normalize_rows)",
                    self.nodes.len()
                )));
            }
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        self.push(Op::L2NormalizeRows { x }, vec![m, n], out)
    }

    /// Per-row cosine similarity of two same-shape rank-2 tensors.
    /// Zero-norm rows are a data error (degenerate direction).
    pub fn cosine_rows(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let shape = self.want_same_shape("cosine_rows", a, b)?;
        if shape.len() != 2 {
            return Err(self.shape_err("cosine_rows", format!("expected rank 2, got {shape:?}")));
        }
        let (m, n) = (shape[0], shape[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m];
        for i in 0..m {
            let (ra, rb) = (&da[i * n..(i + 1) * n], &db[i * n..(i + 1) * n]);
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Data(format!(
                    "cosine similarity undefined for zero-norm row {i}"
                )));
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out[i] = dot / (na * nb);
        }
        self.push(Op::CosineRows { a, b }, vec![m], out)
    }

    /// Per-row mean over dimensions of the squared difference.
    pub fn sq_l2_mean_rows(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let shape = self.want_same_shape("sq_l2_mean_rows", a, b)?;
        if shape.len() != 2 {
            return Err(self.shape_err("sq_l2_mean_rows", format!("expected rank 2, got {shape:?}")));
        }
        let (m, n) = (shape[0], shape[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out = (0..m)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let d = da[i * n + j] - db[i * n + j];
                        d * d
                    })
                    .sum::<f64>()
                    / n as f64
            })
            .collect();
        self.push(Op::SqL2MeanRows { a, b }, vec![m], out)
    }

    /// Per-row softmax cross-entropy against integer labels, fused through
    /// log-sum-exp with max subtraction so it cannot overflow.
    pub fn softmax_ce_rows(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let (m, c) = self.want_rank2("softmax_ce_rows", logits)?;
        if labels.len() != m {
            return Err(self.shape_err(
                "softmax_ce_rows",
                format!("{} labels for {m} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let d = self.value(logits).data();
        let out = (0..m)
            .map(|i| {
                let row = &d[i * c..(i + 1) * c];
                log_sum_exp(row) - row[labels[i]]
            })
            .collect();
        self.push(
            Op::SoftmaxCeRows {
                logits,
                labels: labels.to_vec(),
            },
            vec![m],
            out,
        )
    }

    /// Per-row temperature-softened KL divergence, teacher distribution
    /// against student distribution, scaled by the squared temperature.
    pub fn kl_softened_rows(
        &mut self,
        teacher: ValueId,
        student: ValueId,
        temperature: f64,
    ) -> Result<ValueId> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        let shape = self.want_same_shape("kl_softened_rows", teacher, student)?;
        if shape.len() != 2 {
            return Err(
                self.shape_err("kl_softened_rows", format!("expected rank 2, got {shape:?}"))
            );
        }
        let (m, c) = (shape[0], shape[1]);
        let (dt, ds) = (self.value(teacher).data(), self.value(student).data());
        let mut out = vec![0.0; m];
        for i in 0..m {
            let rt = &dt[i * c..(i + 1) * c];
            let rs = &ds[i * c..(i + 1) * c];
            let lp = log_softmax_scaled(rt, temperature);
            let lq = log_softmax_scaled(rs, temperature);
            let kl: f64 = lp
                .iter()
                .zip(lq.iter())
                .map(|(&a, &b)| a.exp() * (a - b))
                .sum();
            out[i] = temperature * temperature * kl;
        }
        self.push(
            Op::KlSoftenedRows {
                teacher,
                student,
                temperature,
            },
            vec![m],
            out,
        )
    }

    /// Elementwise `max(x - margin, 0)`. The subgradient at the kink is zero,
    /// so entries at or below the margin contribute no gradient.
    pub fn hinge(&mut self, x: ValueId, margin: f64) -> Result<ValueId> {
        if !(margin >= 0.0) || !margin.is_finite() {
            return Err(Error::Config(format!(
                "hinge margin must be non-negative and finite, got {margin}"
            )));
        }
        let shape = self.value(x).shape().to_vec();
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|v| (v - margin).max(0.0))
            .collect();
        self.push(Op::Hinge { x, margin }, shape, out)
    }

    /// Mean over all entries, producing a shape-`[1]` scalar.
    pub fn mean_all(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(self.shape_err("mean_all", "mean of empty tensor".into()));
        }
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::MeanAll { x }, vec![1], vec![mean])
    }

    /// Signs of every ReLU and hinge pre-activation, in node order. Two tapes
    /// built from the same graph structure have comparable patterns; a
    /// difference means some evaluation crossed a kink.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    pattern.extend(self.value(*x).data().iter().map(|&v| v > 0.0));
                }
                Op::Hinge { x, margin } => {
                    pattern.extend(self.value(*x).data().iter().map(|&v| v > *margin));
                }
                _ => {}
            }
        }
        pattern
    }

    /// Reverse-mode sweep from a scalar loss. Exact derivatives are written
    /// into the gradient buffers of trainable parameters (zeros for trainable
    /// parameters the loss does not reach); frozen parameters receive no
    /// gradients. The returned [`Gradients`] also exposes per-node gradients,
    /// including those of `input` leaves.
    pub fn backward(&self, loss: ValueId, params: &mut ParamSet) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backward on unknown node".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        // Zero-filled buffers for every trainable parameter, then add in the
        // contributions that actually flowed. Frozen parameters are skipped.
        let mut contributions: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, &id) in &self.param_nodes {
            if let Op::Param { trainable } = &self.nodes[id.0].op {
                if *trainable {
                    if let Some(g) = &grads[id.0] {
                        contributions.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let mut buf = vec![0.0; p.value.len()];
            if let Some(g) = contributions.get(name) {
                if g.len() != buf.len() {
                    return Err(Error::Internal(format!(
                        "gradient length mismatch for parameter {name:?}"
                    )));
                }
                buf.copy_from_slice(g);
            }
            if let Some(bad) = buf.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    node: self.param_nodes[name].0,
                    op: "param",
                    message: format!("non-finite gradient at flat index {bad} of {name:?}"),
                });
            }
            p.value.set_grad(buf)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let accumulate = |grads: &mut [Option<Vec<f64>>], id: ValueId, contrib: Vec<f64>| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };

        match &self.nodes[idx].op {
            Op::Input | Op::Param { .. } => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for j in 0..n {
                        let go = g[i * n + j];
                        if go == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            ga[i * k + p] += go * db[p * n + j];
                            gb[p * n + j] += go * da[i * k + p];
                        }
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; n * k];
                for i in 0..m {
                    for j in 0..n {
                        let go = g[i * n + j];
                        if go == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            ga[i * k + p] += go * db[j * k + p];
                            gb[j * k + p] += go * da[i * k + p];
                        }
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::AddRowBias { x, bias } => {
                let (m, n) = (self.value(*x).rows(), self.value(*x).cols());
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += g[i * n + j];
                    }
                }
                accumulate(grads, *x, g.to_vec());
                accumulate(grads, *bias, gb);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let ga = g.iter().zip(db).map(|(go, y)| go * y).collect();
                let gb = g.iter().zip(da).map(|(go, x)| go * x).collect();
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale { x, factor } => {
                accumulate(grads, *x, g.iter().map(|go| go * factor).collect());
            }
            Op::Relu { x } => {
                let dx = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(dx)
                    .map(|(go, &v)| if v > 0.0 { *go } else { 0.0 })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::ConcatRows { a, b } => {
                let la = self.value(*a).len();
                accumulate(grads, *a, g[..la].to_vec());
                accumulate(grads, *b, g[la..].to_vec());
            }
            Op::RowL2Norm { x } => {
                let (m, n) = (self.value(*x).rows(), self.value(*x).cols());
                let dx = self.value(*x).data();
                let norms = self.value(ValueId(idx)).data();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let s = g[i] / norms[i];
                    for j in 0..n {
                        gx[i * n + j] = s * dx[i * n + j];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::L2NormalizeRows { x } => {
                let (m, n) = (self.value(*x).rows(), self.value(*x).cols());
                let dx = self.value(*x).data();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let row = &dx[i * n..(i + 1) * n];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let grow = &g[i * n..(i + 1) * n];
                    let dot: f64 = row.iter().zip(grow).map(|(x, go)| x * go).sum();
                    let n3 = norm * norm * norm;
                    for j in 0..n {
                        gx[i * n + j] = grow[j] / norm - row[j] * dot / n3;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::CosineRows { a, b } => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let cos = self.value(ValueId(idx)).data();
                let mut ga = vec![0.0; m * n];
                let mut gb = vec![0.0; m * n];
                for i in 0..m {
                    let (ra, rb) = (&da[i * n..(i + 1) * n], &db[i * n..(i + 1) * n]);
                    let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let c = cos[i];
                    for j in 0..n {
                        ga[i * n + j] = g[i] * (rb[j] / (na * nb) - c * ra[j] / (na * na));
                        gb[i * n + j] = g[i] * (ra[j] / (na * nb) - c * rb[j] / (nb * nb));
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::SqL2MeanRows { a, b } => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; m * n];
                let mut gb = vec![0.0; m * n];
                for i in 0..m {
                    let s = 2.0 * g[i] / n as f64;
                    for j in 0..n {
                        let d = da[i * n + j] - db[i * n + j];
                        ga[i * n + j] = s * d;
                        gb[i * n + j] = -s * d;
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::SoftmaxCeRows { logits, labels } => {
                let (m, c) = (self.value(*logits).rows(), self.value(*logits).cols());
                let d = self.value(*logits).data();
                let mut gl = vec![0.0; m * c];
                for i in 0..m {
                    let row = &d[i * c..(i + 1) * c];
                    let lse = log_sum_exp(row);
                    for j in 0..c {
                        let softmax = (row[j] - lse).exp();
                        let indicator = if j == labels[i] { 1.0 } else { 0.0 };
                        gl[i * c + j] = g[i] * (softmax - indicator);
                    }
                }
                accumulate(grads, *logits, gl);
            }
            Op::KlSoftenedRows {
                teacher,
                student,
                temperature,
            } => {
                let t = *temperature;
                let (m, c) = (self.value(*teacher).rows(), self.value(*teacher).cols());
                let (dt, ds) = (self.value(*teacher).data(), self.value(*student).data());
                let mut gt = vec![0.0; m * c];
                let mut gs = vec![0.0; m * c];
                for i in 0..m {
                    let lp = log_softmax_scaled(&dt[i * c..(i + 1) * c], t);
                    let lq = log_softmax_scaled(&ds[i * c..(i + 1) * c], t);
                    let kl: f64 = lp
                        .iter()
                        .zip(lq.iter())
                        .map(|(&a, &b)| a.exp() * (a - b))
                        .sum();
                    for j in 0..c {
                        let p = lp[j].exp();
                        let q = lq[j].exp();
                        gs[i * c + j] = g[i] * t * (q - p);
                        gt[i * c + j] = g[i] * t * p * (lp[j] - lq[j] - kl);
                    }
                }
                accumulate(grads, *teacher, gt);
                accumulate(grads, *student, gs);
            }
            Op::Hinge { x, margin } => {
                let dx = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(dx)
                    .map(|(go, &v)| if v > *margin { *go } else { 0.0 })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).len();
                accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
        }
        Ok(())
    }
}

/// Overflow-free log of a sum of exponentials.
fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-softmax of `row / temperature`.
fn log_softmax_scaled(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
    let lse = log_sum_exp(&scaled);
    scaled.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_input(tape: &mut Tape, v: f64) -> ValueId {
        tape.input(&Tensor::scalar(v).unwrap())
    }

    #[test]
    fn identity_graph_returns_its_input() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::vector(&[1.0, 2.0, 3.0]).unwrap());
        assert_eq!(tape.value(x).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn affine_with_identity_weights_is_identity() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::matrix(1, 2, vec![5.0, 7.0]).unwrap());
        let w = tape.input(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 7.0]);
    }

    #[test]
    fn two_layer_mlp_with_zero_weights_maps_to_zero() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::matrix(1, 3, vec![0.3, -1.2, 8.0]).unwrap());
        let w0 = tape.input(&Tensor::zeros(vec![3, 4]));
        let w1 = tape.input(&Tensor::zeros(vec![4, 2]));
        let h = tape.matmul(x, w0).unwrap();
        let h = tape.relu(h).unwrap();
        let y = tape.matmul(h, w1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn square_loss_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = scalar_input(&mut tape, 3.0);
        let loss = tape.mul(x, x).unwrap();
        let mut params = ParamSet::new();
        let grads = tape.backward(loss, &mut params).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut params = ParamSet::new();
        params
            .insert("w", Tensor::vector(&[2.0, -1.0]).unwrap(), true)
            .unwrap();
        let mut tape = Tape::new();
        let _w = tape.param(&params, "w").unwrap();
        let c = scalar_input(&mut tape, 4.2);
        let loss = tape.scale(c, 1.0).unwrap();
        tape.backward(loss, &mut params).unwrap();
        let g = params.get("w").unwrap().value.grad().unwrap();
        assert_eq!(g, &[0.0, 0.0]);
    }

    #[test]
    fn frozen_params_receive_no_gradient_buffer() {
        let mut params = ParamSet::new();
        params
            .insert("frozen", Tensor::scalar(1.5).unwrap(), false)
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&params, "frozen").unwrap();
        let loss = tape.mul(w, w).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert!(params.get("frozen").unwrap().value.grad().is_none());
    }

    #[test]
    fn repeated_param_registration_reuses_the_node() {
        let mut params = ParamSet::new();
        params
            .insert("w", Tensor::scalar(3.0).unwrap(), true)
            .unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&params, "w").unwrap();
        let b = tape.param(&params, "w").unwrap();
        assert_eq!(a, b);
        // loss = w*w accumulates both factor contributions: d/dw = 2w
        let loss = tape.mul(a, b).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get("w").unwrap().value.grad().unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::vector(&[1.0, 2.0]).unwrap());
        let mut params = ParamSet::new();
        assert!(matches!(
            tape.backward(x, &mut params),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_the_offending_node() {
        let mut tape = Tape::new();
        let a = tape.input(&Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.input(&Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("node 2"), "{err}");
    }

    #[test]
    fn overflowing_op_reports_numeric_error_with_node_id() {
        let mut tape = Tape::new();
        let x = scalar_input(&mut tape, 1e308);
        let err = tape.scale(x, 1e308).unwrap_err();
        match err {
            Error::Numeric { node, op, .. } => {
                assert_eq!(node, 1);
                assert_eq!(op, "scale");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn hinge_at_or_below_margin_blocks_gradient() {
        let mut params = ParamSet::new();
        params
            .insert("d", Tensor::vector(&[0.05, 0.09, 0.13]).unwrap(), true)
            .unwrap();
        let mut tape = Tape::new();
        let d = tape.param(&params, "d").unwrap();
        let h = tape.hinge(d, 0.09).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0, 0.0, 0.040000000000000015]);
        let loss = tape.mean_all(h).unwrap();
        tape.backward(loss, &mut params).unwrap();
        let g = params.get("d").unwrap().value.grad().unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0); // exactly at the kink: subgradient 0
        assert!(g[2] > 0.0);
    }

    #[test]
    fn softmax_ce_uniform_logits_is_log_c() {
        let mut tape = Tape::new();
        let logits = tape.input(&Tensor::matrix(1, 4, vec![0.7; 4]).unwrap());
        let ce = tape.softmax_ce_rows(logits, &[2]).unwrap();
        let v = tape.value(ce).data()[0];
        assert!((v - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_rejects_out_of_range_labels() {
        let mut tape = Tape::new();
        let logits = tape.input(&Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        assert!(matches!(
            tape.softmax_ce_rows(logits, &[3]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let mut tape = Tape::new();
        let t = tape.input(&Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 3.0, 3.0]).unwrap());
        let kl = tape.kl_softened_rows(t, t, 2.0).unwrap();
        for v in tape.value(kl).data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_of_orthogonal_unit_rows_is_zero() {
        let mut tape = Tape::new();
        let a = tape.input(&Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let b = tape.input(&Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        let c = tape.cosine_rows(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0]);
    }

    #[test]
    fn cosine_rejects_zero_norm_rows() {
        let mut tape = Tape::new();
        let a = tape.input(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let b = tape.input(&Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        assert!(matches!(tape.cosine_rows(a, b), Err(Error::Data(_))));
    }
}

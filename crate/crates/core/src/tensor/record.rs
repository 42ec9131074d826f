//! The computation record: an append-only tape of primitive applications.
//!
//! Nodes are stored in the order they were created, so the tape is already
//! topologically sorted and the backward sweep is a single reverse pass.
//! Replaying the same operations on the same inputs reproduces every forward
//! value bit-exactly; backward is deterministic for the same reason.

use super::{Result, Tensor, TensorError};

pub type NodeId = usize;

/// Primitive operation kinds. Attribute-carrying variants keep the
/// per-node metadata next to the kind itself.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    /// Elementwise add; the right operand may be a single row broadcast
    /// over the rows of the left operand (bias add).
    Add,
    /// Elementwise multiply, equal shapes.
    Mul,
    Tanh,
    Relu,
    /// Inputs `(logits [n,v], targets [n])`; output `[n]` of per-row
    /// negative log-likelihoods. Targets are class indices and receive
    /// no gradient.
    SoftmaxCrossEntropy,
    /// Inputs `(table [r,c], indices [n])`; output `[n,c]`. Indices
    /// receive no gradient.
    GatherRows,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    /// Sum of all elements, output `[1]`.
    Sum,
    /// Mean of all elements, output `[1]`.
    Mean,
    Scale { factor: f64 },
    /// 2-D transpose.
    Transpose,
    /// Row-wise softmax of a 2-D tensor.
    SoftmaxRows,
    /// Same data, new shape with equal element count.
    Reshape { shape: Vec<usize> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::SoftmaxCrossEntropy => "softmax_cross_entropy",
            Primitive::GatherRows => "gather_rows",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Scale { .. } => "scale",
            Primitive::Transpose => "transpose",
            Primitive::SoftmaxRows => "softmax_rows",
            Primitive::Reshape { .. } => "reshape",
        }
    }
}

enum NodeKind {
    Leaf,
    Op(Primitive),
}

struct Node {
    kind: NodeKind,
    inputs: Vec<NodeId>,
    value: Tensor,
    /// Saved forward byproducts some backward rules need (softmax
    /// probabilities for cross-entropy).
    aux: Option<Vec<f64>>,
}

/// An active computation record. Create with [`Record::new`] to track
/// gradients, or [`Record::disabled`] for pure inference with identical
/// forward arithmetic and no tape growth.
pub struct Record {
    nodes: Vec<Node>,
    enabled: bool,
}

impl Record {
    pub fn new() -> Self {
        Record {
            nodes: Vec::new(),
            enabled: true,
        }
    }

    pub fn disabled() -> Self {
        Record {
            nodes: Vec::new(),
            enabled: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a differentiable leaf (a parameter or a checked input).
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        if !self.enabled {
            return t.clone().with_node(None);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            kind: NodeKind::Leaf,
            inputs: Vec::new(),
            value: t.clone().with_node(Some(id)),
            aux: None,
        });
        t.clone().with_node(Some(id))
    }

    /// Register a constant input. Constants still live on the tape (so
    /// consumers can reference them) but callers never ask for their grad.
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        self.leaf(t)
    }

    fn intern(&mut self, t: &Tensor) -> (NodeId, Tensor) {
        match t.node() {
            Some(id) => (id, t.clone()),
            None => {
                let bound = self.leaf(t);
                (bound.node().unwrap_or(0), bound)
            }
        }
    }

    /// Apply a primitive to the inputs, appending a node when recording.
    pub fn apply(&mut self, kind: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        let (value, aux) = eval_primitive(&kind, inputs)?;
        if !self.enabled {
            return Ok(value);
        }
        let mut ids = Vec::with_capacity(inputs.len());
        for t in inputs {
            let (id, _) = self.intern(t);
            ids.push(id);
        }
        let id = self.nodes.len();
        let out = value.with_node(Some(id));
        self.nodes.push(Node {
            kind: NodeKind::Op(kind),
            inputs: ids,
            value: out.clone(),
            aux,
        });
        Ok(out)
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn softmax_cross_entropy(&mut self, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::SoftmaxCrossEntropy, &[logits, targets])
    }

    pub fn gather_rows(&mut self, table: &Tensor, indices: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::GatherRows, &[table, indices])
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.apply(Primitive::Slice { axis, start, len }, &[a])
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn scale(&mut self, a: &Tensor, factor: f64) -> Result<Tensor> {
        self.apply(Primitive::Scale { factor }, &[a])
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::SoftmaxRows, &[a])
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every node;
    /// leaves the loss cannot reach get `None` (read back as zeros via
    /// [`Gradients::get_or_zeros`]).
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let loss_id = loss.node().ok_or(TensorError::Detached)?;
        if loss.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: loss.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.kind {
                NodeKind::Leaf => {
                    grads[id] = Some(gout);
                }
                NodeKind::Op(op) => {
                    let input_values: Vec<&Tensor> =
                        node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                    let contribs =
                        backward_primitive(op, &input_values, &node.value, &node.aux, &gout);
                    for (slot, contrib) in node.inputs.iter().zip(contribs) {
                        let Some(contrib) = contrib else { continue };
                        match &mut grads[*slot] {
                            Some(acc) => {
                                for (a, c) in acc.iter_mut().zip(&contrib) {
                                    *a += c;
                                }
                            }
                            None => grads[*slot] = Some(contrib),
                        }
                    }
                }
            }
        }

        let shaped = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[id].value.shape().to_vec(), data)
                        .expect("gradient shape matches node value")
                })
            })
            .collect();
        Ok(Gradients { grads: shaped })
    }
}

impl Default for Record {
    fn default() -> Self {
        Record::new()
    }
}

/// Gradients keyed by node id, produced by [`Record::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        t.node().and_then(|id| self.grads.get(id)?.as_ref())
    }

    /// Gradient of a bound tensor, zeros when the loss does not reach it.
    pub fn get_or_zeros(&self, t: &Tensor) -> Tensor {
        match self.get(t) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape()),
        }
    }
}

fn shape_err(op: &'static str, details: String) -> TensorError {
    TensorError::ShapeMismatch { op, details }
}

/// Forward evaluation of a primitive. Returns the output tensor plus any
/// saved byproducts the backward rule needs.
fn eval_primitive(kind: &Primitive, inputs: &[&Tensor]) -> Result<(Tensor, Option<Vec<f64>>)> {
    let arity_ok = match kind {
        Primitive::Concat { .. } => !inputs.is_empty(),
        Primitive::MatMul
        | Primitive::Add
        | Primitive::Mul
        | Primitive::SoftmaxCrossEntropy
        | Primitive::GatherRows => inputs.len() == 2,
        _ => inputs.len() == 1,
    };
    if !arity_ok {
        return Err(shape_err(
            kind.name(),
            format!("wrong number of inputs: {}", inputs.len()),
        ));
    }

    match kind {
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape().len() != 2 || b.shape().len() != 2 {
                return Err(shape_err(
                    "matmul",
                    format!("expects 2-D operands, got {:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(shape_err(
                    "matmul",
                    format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let mut out = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), m, k, n, &mut out);
            Ok((Tensor::new(vec![m, n], out)?, None))
        }
        Primitive::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Ok((Tensor::new(a.shape().to_vec(), data)?, None))
            } else if a.shape().len() == 2 && b.numel() == a.shape()[1] {
                // row broadcast: [m,n] + [n] or [m,n] + [1,n]
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let mut data = Vec::with_capacity(m * n);
                for r in 0..m {
                    for c in 0..n {
                        data.push(a.data()[r * n + c] + b.data()[c]);
                    }
                }
                Ok((Tensor::new(vec![m, n], data)?, None))
            } else {
                Err(shape_err(
                    "add",
                    format!("incompatible shapes {:?} + {:?}", a.shape(), b.shape()),
                ))
            }
        }
        Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(
                    "mul",
                    format!("incompatible shapes {:?} * {:?}", a.shape(), b.shape()),
                ));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Ok((Tensor::new(a.shape().to_vec(), data)?, None))
        }
        Primitive::Tanh => {
            let a = inputs[0];
            let data = a.data().iter().map(|x| x.tanh()).collect();
            Ok((Tensor::new(a.shape().to_vec(), data)?, None))
        }
        Primitive::Relu => {
            let a = inputs[0];
            let data = a.data().iter().map(|x| x.max(0.0)).collect();
            Ok((Tensor::new(a.shape().to_vec(), data)?, None))
        }
        Primitive::SoftmaxCrossEntropy => {
            let (logits, targets) = (inputs[0], inputs[1]);
            if logits.shape().len() != 2 {
                return Err(shape_err(
                    "softmax_cross_entropy",
                    format!("logits must be 2-D, got {:?}", logits.shape()),
                ));
            }
            let (n, v) = (logits.shape()[0], logits.shape()[1]);
            if targets.numel() != n {
                return Err(shape_err(
                    "softmax_cross_entropy",
                    format!("{} logit rows vs {} targets", n, targets.numel()),
                ));
            }
            let mut nll = Vec::with_capacity(n);
            let mut probs = vec![0.0; n * v];
            for r in 0..n {
                let row = &logits.data()[r * v..(r + 1) * v];
                let t = targets.data()[r] as usize;
                if t >= v {
                    return Err(TensorError::IndexOutOfBounds {
                        op: "softmax_cross_entropy",
                        index: t,
                        size: v,
                    });
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..v {
                    let e = (row[c] - m).exp();
                    probs[r * v + c] = e;
                    z += e;
                }
                for c in 0..v {
                    probs[r * v + c] /= z;
                }
                nll.push(m + z.ln() - row[t]);
            }
            Ok((Tensor::new(vec![n], nll)?, Some(probs)))
        }
        Primitive::GatherRows => {
            let (table, idx) = (inputs[0], inputs[1]);
            if table.shape().len() != 2 {
                return Err(shape_err(
                    "gather_rows",
                    format!("table must be 2-D, got {:?}", table.shape()),
                ));
            }
            let (r, c) = (table.shape()[0], table.shape()[1]);
            let mut data = Vec::with_capacity(idx.numel() * c);
            for &i in idx.data() {
                let i = i as usize;
                if i >= r {
                    return Err(TensorError::IndexOutOfBounds {
                        op: "gather_rows",
                        index: i,
                        size: r,
                    });
                }
                data.extend_from_slice(&table.data()[i * c..(i + 1) * c]);
            }
            Ok((Tensor::new(vec![idx.numel(), c], data)?, None))
        }
        Primitive::Concat { axis } => {
            let rank = inputs[0].shape().len();
            if *axis >= rank {
                return Err(shape_err(
                    "concat",
                    format!("axis {} out of range for rank {}", axis, rank),
                ));
            }
            for t in inputs {
                if t.shape().len() != rank {
                    return Err(shape_err("concat", "mixed ranks".to_string()));
                }
                for (d, (&a, &b)) in inputs[0].shape().iter().zip(t.shape()).enumerate() {
                    if d != *axis && a != b {
                        return Err(shape_err(
                            "concat",
                            format!("shapes {:?} vs {:?} differ off-axis", inputs[0].shape(), t.shape()),
                        ));
                    }
                }
            }
            if rank == 1 || *axis == 0 {
                let mut shape = inputs[0].shape().to_vec();
                shape[0] = inputs.iter().map(|t| t.shape()[0]).sum();
                let mut data = Vec::new();
                for t in inputs {
                    data.extend_from_slice(t.data());
                }
                Ok((Tensor::new(shape, data)?, None))
            } else {
                let rows = inputs[0].shape()[0];
                let total_cols: usize = inputs.iter().map(|t| t.shape()[1]).sum();
                let mut data = Vec::with_capacity(rows * total_cols);
                for r in 0..rows {
                    for t in inputs {
                        let c = t.shape()[1];
                        data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                    }
                }
                Ok((Tensor::new(vec![rows, total_cols], data)?, None))
            }
        }
        Primitive::Slice { axis, start, len } => {
            let a = inputs[0];
            let rank = a.shape().len();
            if *axis >= rank {
                return Err(shape_err(
                    "slice",
                    format!("axis {} out of range for rank {}", axis, rank),
                ));
            }
            let dim = a.shape()[*axis];
            if start + len > dim {
                return Err(TensorError::IndexOutOfBounds {
                    op: "slice",
                    index: start + len,
                    size: dim,
                });
            }
            if rank == 1 {
                let data = a.data()[*start..start + len].to_vec();
                Ok((Tensor::new(vec![*len], data)?, None))
            } else if *axis == 0 {
                let c = a.shape()[1];
                let data = a.data()[start * c..(start + len) * c].to_vec();
                Ok((Tensor::new(vec![*len, c], data)?, None))
            } else {
                let (rows, cols) = (a.shape()[0], a.shape()[1]);
                let mut data = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    data.extend_from_slice(&a.data()[r * cols + start..r * cols + start + len]);
                }
                Ok((Tensor::new(vec![rows, *len], data)?, None))
            }
        }
        Primitive::Sum => {
            let s: f64 = inputs[0].data().iter().sum();
            Ok((Tensor::scalar(s), None))
        }
        Primitive::Mean => {
            let n = inputs[0].numel() as f64;
            let s: f64 = inputs[0].data().iter().sum();
            Ok((Tensor::scalar(s / n), None))
        }
        Primitive::Scale { factor } => {
            let a = inputs[0];
            let data = a.data().iter().map(|x| x * factor).collect();
            Ok((Tensor::new(a.shape().to_vec(), data)?, None))
        }
        Primitive::Transpose => {
            let a = inputs[0];
            if a.shape().len() != 2 {
                return Err(TensorError::UnsupportedRank {
                    op: "transpose",
                    rank: a.shape().len(),
                });
            }
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let mut data = vec![0.0; m * n];
            for r in 0..m {
                for c in 0..n {
                    data[c * m + r] = a.data()[r * n + c];
                }
            }
            Ok((Tensor::new(vec![n, m], data)?, None))
        }
        Primitive::SoftmaxRows => {
            let a = inputs[0];
            if a.shape().len() != 2 {
                return Err(shape_err(
                    "softmax_rows",
                    format!("expects 2-D input, got {:?}", a.shape()),
                ));
            }
            let (n, v) = (a.shape()[0], a.shape()[1]);
            let mut data = vec![0.0; n * v];
            for r in 0..n {
                let row = &a.data()[r * v..(r + 1) * v];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..v {
                    let e = (row[c] - m).exp();
                    data[r * v + c] = e;
                    z += e;
                }
                for c in 0..v {
                    data[r * v + c] /= z;
                }
            }
            Ok((Tensor::new(vec![n, v], data)?, None))
        }
        Primitive::Reshape { shape } => {
            let a = inputs[0];
            let numel: usize = shape.iter().product();
            if numel != a.numel() {
                return Err(shape_err(
                    "reshape",
                    format!("{:?} -> {:?} changes element count", a.shape(), shape),
                ));
            }
            Ok((Tensor::new(shape.clone(), a.data().to_vec())?, None))
        }
    }
}

/// Vector-Jacobian products. Each element of the returned vec lines up with
/// the corresponding input; `None` means "no gradient flows here" (integer
/// index inputs).
fn backward_primitive(
    kind: &Primitive,
    inputs: &[&Tensor],
    output: &Tensor,
    aux: &Option<Vec<f64>>,
    gout: &[f64],
) -> Vec<Option<Vec<f64>>> {
    match kind {
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            // dA = G . B^T
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for j in 0..n {
                    let g = gout[i * n + j];
                    if g != 0.0 {
                        for p in 0..k {
                            da[i * k + p] += g * b.data()[p * n + j];
                        }
                    }
                }
            }
            // dB = A^T . G
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a.data()[i * k + p];
                    if av != 0.0 {
                        for j in 0..n {
                            db[p * n + j] += av * gout[i * n + j];
                        }
                    }
                }
            }
            vec![Some(da), Some(db)]
        }
        Primitive::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                vec![Some(gout.to_vec()), Some(gout.to_vec())]
            } else {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let mut db = vec![0.0; b.numel()];
                for r in 0..m {
                    for c in 0..n {
                        db[c] += gout[r * n + c];
                    }
                }
                vec![Some(gout.to_vec()), Some(db)]
            }
        }
        Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = gout.iter().zip(b.data()).map(|(g, y)| g * y).collect();
            let db = gout.iter().zip(a.data()).map(|(g, x)| g * x).collect();
            vec![Some(da), Some(db)]
        }
        Primitive::Tanh => {
            let y = output.data();
            let dx = gout.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
            vec![Some(dx)]
        }
        Primitive::Relu => {
            let x = inputs[0].data();
            let dx = gout
                .iter()
                .zip(x)
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            vec![Some(dx)]
        }
        Primitive::SoftmaxCrossEntropy => {
            let (logits, targets) = (inputs[0], inputs[1]);
            let (n, v) = (logits.shape()[0], logits.shape()[1]);
            let probs = aux.as_ref().expect("softmax_cross_entropy saves probs");
            let mut dl = vec![0.0; n * v];
            for r in 0..n {
                let g = gout[r];
                let t = targets.data()[r] as usize;
                for c in 0..v {
                    dl[r * v + c] = g * probs[r * v + c];
                }
                dl[r * v + t] -= g;
            }
            vec![Some(dl), None]
        }
        Primitive::GatherRows => {
            let (table, idx) = (inputs[0], inputs[1]);
            let c = table.shape()[1];
            let mut dt = vec![0.0; table.numel()];
            for (row, &i) in idx.data().iter().enumerate() {
                let i = i as usize;
                for j in 0..c {
                    dt[i * c + j] += gout[row * c + j];
                }
            }
            vec![Some(dt), None]
        }
        Primitive::Concat { axis } => {
            let rank = inputs[0].shape().len();
            if rank == 1 || *axis == 0 {
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let n = t.numel();
                        let g = gout[offset..offset + n].to_vec();
                        offset += n;
                        Some(g)
                    })
                    .collect()
            } else {
                let rows = inputs[0].shape()[0];
                let total_cols: usize = inputs.iter().map(|t| t.shape()[1]).sum();
                let mut col_offset = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let c = t.shape()[1];
                        let mut g = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            let base = r * total_cols + col_offset;
                            g.extend_from_slice(&gout[base..base + c]);
                        }
                        col_offset += c;
                        Some(g)
                    })
                    .collect()
            }
        }
        Primitive::Slice { axis, start, len } => {
            let a = inputs[0];
            let mut da = vec![0.0; a.numel()];
            let rank = a.shape().len();
            if rank == 1 {
                da[*start..start + len].copy_from_slice(gout);
            } else if *axis == 0 {
                let c = a.shape()[1];
                da[start * c..(start + len) * c].copy_from_slice(gout);
            } else {
                let cols = a.shape()[1];
                let rows = a.shape()[0];
                for r in 0..rows {
                    for j in 0..*len {
                        da[r * cols + start + j] = gout[r * len + j];
                    }
                }
            }
            vec![Some(da)]
        }
        Primitive::Sum => {
            let g = gout[0];
            vec![Some(vec![g; inputs[0].numel()])]
        }
        Primitive::Mean => {
            let g = gout[0] / inputs[0].numel() as f64;
            vec![Some(vec![g; inputs[0].numel()])]
        }
        Primitive::Scale { factor } => {
            vec![Some(gout.iter().map(|g| g * factor).collect())]
        }
        Primitive::Transpose => {
            let (m, n) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            // gout has shape [n, m]; route back to [m, n]
            let mut da = vec![0.0; m * n];
            for r in 0..n {
                for c in 0..m {
                    da[c * n + r] = gout[r * m + c];
                }
            }
            vec![Some(da)]
        }
        Primitive::SoftmaxRows => {
            let y = output.data();
            let (n, v) = (output.shape()[0], output.shape()[1]);
            let mut dx = vec![0.0; n * v];
            for r in 0..n {
                let yr = &y[r * v..(r + 1) * v];
                let gr = &gout[r * v..(r + 1) * v];
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for c in 0..v {
                    dx[r * v + c] = yr[c] * (gr[c] - dot);
                }
            }
            vec![Some(dx)]
        }
        Primitive::Reshape { .. } => vec![Some(gout.to_vec())],
    }
}

/// Cache-friendly `C += A . B` kernel shared by forward matmul.
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut rec = Record::new();
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let id = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let out = rec.matmul(&a, &id).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn tanh_at_origin_is_zero() {
        let mut rec = Record::disabled();
        let z = Tensor::zeros(&[3, 4]);
        let out = rec.tanh(&z).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_vocab() {
        let mut rec = Record::disabled();
        let logits = Tensor::matrix(1, 4, vec![0.3; 4]).unwrap();
        let targets = Tensor::vector(vec![2.0]);
        let nll = rec.softmax_cross_entropy(&logits, &targets).unwrap();
        assert!((nll.data()[0] - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_names_offending_shapes() {
        let mut rec = Record::new();
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 3, &[0.0; 6]);
        let err = rec.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut rec = Record::new();
        let x = rec.leaf(&Tensor::vector(vec![3.0]));
        let sq = rec.mul(&x, &x).unwrap();
        let loss = rec.sum(&sq).unwrap();
        let grads = rec.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut rec = Record::new();
        let x = rec.leaf(&Tensor::vector(vec![2.0]));
        let p = rec.leaf(&Tensor::vector(vec![5.0]));
        let loss = rec.sum(&x).unwrap();
        let grads = rec.backward(&loss).unwrap();
        assert!(grads.get(&p).is_none());
        assert_eq!(grads.get_or_zeros(&p).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut rec = Record::new();
        let x = rec.leaf(&Tensor::vector(vec![1.0, 2.0]));
        let y = rec.scale(&x, 2.0).unwrap();
        assert!(matches!(
            rec.backward(&y),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rec = Record::new();
            let x = rec.leaf(&Tensor::vector(vec![0.3, -0.7, 1.9]));
            let h = rec.tanh(&x).unwrap();
            let sq = rec.mul(&h, &h).unwrap();
            let loss = rec.mean(&sq).unwrap();
            let g = rec.backward(&loss).unwrap();
            g.get(&x).unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn disabled_record_matches_recorded_forward() {
        let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 2.0, 0.7, -1.3, 0.5]).unwrap();
        let w = Tensor::matrix(3, 2, vec![0.3, 0.1, -0.2, 0.8, 0.05, -0.6]).unwrap();
        let mut on = Record::new();
        let mut off = Record::disabled();
        let y_on = {
            let xb = on.leaf(&x);
            let h = on.matmul(&xb, &w).unwrap();
            on.tanh(&h).unwrap()
        };
        let y_off = {
            let h = off.matmul(&x, &w).unwrap();
            off.tanh(&h).unwrap()
        };
        assert_eq!(y_on.data(), y_off.data());
        assert!(off.is_empty());
    }

    #[test]
    fn mean_loss_gradient_equals_average_of_per_example_gradients() {
        // loss = mean over batch of per-example losses; compare against
        // running backward per example and averaging by hand.
        let rows = [
            vec![0.5, -0.2, 0.9],
            vec![-1.1, 0.3, 0.4],
            vec![0.2, 0.8, -0.6],
            vec![1.5, -0.9, 0.1],
        ];
        let w_data = vec![0.3, -0.5, 0.7];

        // batched: loss = mean_i sum((x_i * w)^2)
        let mut rec = Record::new();
        let w = rec.leaf(&Tensor::vector(w_data.clone()));
        let mut per_example = Vec::new();
        for r in &rows {
            let x = rec.constant(&Tensor::vector(r.clone()));
            let xw = rec.mul(&x, &w).unwrap();
            let sq = rec.mul(&xw, &xw).unwrap();
            per_example.push(rec.sum(&sq).unwrap());
        }
        let refs: Vec<&Tensor> = per_example.iter().collect();
        let stacked = rec.concat(&refs, 0).unwrap();
        let loss = rec.mean(&stacked).unwrap();
        let batched = rec.backward(&loss).unwrap().get(&w).unwrap().data().to_vec();

        // per-example, summed manually
        let mut manual = vec![0.0; 3];
        for r in &rows {
            let mut rec = Record::new();
            let w = rec.leaf(&Tensor::vector(w_data.clone()));
            let x = rec.constant(&Tensor::vector(r.clone()));
            let xw = rec.mul(&x, &w).unwrap();
            let sq = rec.mul(&xw, &xw).unwrap();
            let loss = rec.sum(&sq).unwrap();
            let g = rec.backward(&loss).unwrap();
            for (m, v) in manual.iter_mut().zip(g.get(&w).unwrap().data()) {
                *m += v / rows.len() as f64;
            }
        }
        for (b, m) in batched.iter().zip(&manual) {
            assert!((b - m).abs() < 1e-12, "batched {b} vs manual {m}");
        }
    }

    #[test]
    fn concat_slice_roundtrip_axis1() {
        let mut rec = Record::new();
        let a = t2(2, 2, &[1.0, 2.0, 5.0, 6.0]);
        let b = t2(2, 3, &[3.0, 4.0, 9.0, 7.0, 8.0, 10.0]);
        let cat = rec.concat(&[&a, &b], 1).unwrap();
        assert_eq!(cat.shape(), &[2, 5]);
        assert_eq!(cat.data(), &[1.0, 2.0, 3.0, 4.0, 9.0, 5.0, 6.0, 7.0, 8.0, 10.0]);
        let back = rec.slice(&cat, 1, 2, 3).unwrap();
        assert_eq!(back.data(), b.data());
    }

    #[test]
    fn softmax_rows_sums_to_one_and_is_shift_invariant() {
        let mut rec = Record::disabled();
        let x = t2(2, 3, &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0]);
        let y = rec.softmax_rows(&x).unwrap();
        for r in 0..2 {
            let s: f64 = y.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let shifted = rec.scale(&x, 1.0).unwrap();
        let shifted = rec.add(&shifted, &Tensor::matrix(2, 3, vec![100.0; 6]).unwrap()).unwrap();
        let y2 = rec.softmax_rows(&shifted).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

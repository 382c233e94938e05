//! Static compute graphs with reverse-mode differentiation.
//!
//! A `Graph` is built once (append-only, so node order is topological),
//! then evaluated any number of times; every evaluation owns its value
//! buffers, so a shared `&Graph` is safe across threads. `backward` replays
//! nodes in reverse exactly once, accumulating vector-Jacobian products.
//!
//! Reductions (dots, softmax denominators, norms, losses) accumulate in
//! f64; storage is f32 throughout.

use std::collections::BTreeMap;

use crate::tensor::{matmul, matmul_nt, transpose};
use crate::{Error, Result, Tensor};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Input { name: String },
    Constant { value: Tensor },
    /// [m,k] x [k,n]
    MatMul { a: NodeId, b: NodeId },
    /// [m,k] x [n,k]^T -> [m,n]
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// [m,n] + [n] per row (the only broadcast allowed)
    AddBias { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f32 },
    Silu { a: NodeId },
    /// Identity on [-1,1], saturating to +/-2 outside; C1 everywhere.
    SoftClip { a: NodeId },
    SoftmaxRows { a: NodeId },
    /// Row i is a softmax over columns 0..=i; upper triangle is exactly 0.
    CausalSoftmaxRows { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Embed { table: NodeId, ids: Vec<usize> },
    SelectRows { a: NodeId, rows: Vec<usize> },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    /// Mean over rows of -sum_j target * log softmax(logits). Scalar.
    CrossEntropyRows { logits: NodeId, targets: NodeId },
    /// Mean over all elements of (a-b)^2. Scalar.
    MeanSqDiff { a: NodeId, b: NodeId },
    SumAll { a: NodeId },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Named tensors bound to graph inputs for one evaluation.
#[derive(Default)]
pub struct Bindings<'a> {
    map: BTreeMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, t: &'a Tensor) -> &mut Self {
        self.map.insert(name.into(), t);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

/// Value buffers for one forward pass. One tensor per node. Scalar reduction
/// nodes additionally keep their f64 accumulator, so loss probes (the
/// finite-difference oracle, holdout curves) do not lose precision to the
/// f32 cast.
pub struct Eval {
    values: Vec<Tensor>,
    scalars_f64: Vec<Option<f64>>,
}

impl Eval {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    /// f64 value of a scalar reduction node; falls back to the f32 value.
    pub fn scalar_f64(&self, id: NodeId) -> f64 {
        self.scalars_f64[id].unwrap_or_else(|| self.values[id].item() as f64)
    }
}

/// Gradients keyed by input name. Inputs not reached by the loss hold zeros.
pub struct Grads {
    by_input: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_input.get(name)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        self.by_input.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_input.iter()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn dims2(&self, id: NodeId, context: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[id].shape;
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(Error::ShapeMismatch {
                context: context.into(),
                detail: format!("expected rank <= 2, got {:?}", s),
            }),
        }
    }

    // ── construction ─────────────────────────────────────────────

    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        let id = self.push(Op::Input { name: name.to_string() }, shape);
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant { value }, shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul lhs")?;
        let (kb, n) = self.dims2(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                context: "matmul".into(),
                detail: format!("{:?} x {:?}", self.nodes[a].shape, self.nodes[b].shape),
            });
        }
        Ok(self.push(Op::MatMul { a, b }, vec![m, n]))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul_nt lhs")?;
        let (n, kb) = self.dims2(b, "matmul_nt rhs")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                context: "matmul_nt".into(),
                detail: format!("{:?} x {:?}^T", self.nodes[a].shape, self.nodes[b].shape),
            });
        }
        Ok(self.push(Op::MatMulNT { a, b }, vec![m, n]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch {
                context: "add".into(),
                detail: format!("{:?} + {:?}", self.nodes[a].shape, self.nodes[b].shape),
            });
        }
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Add { a, b }, shape))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, n) = self.dims2(a, "add_bias lhs")?;
        let bs = &self.nodes[bias].shape;
        if bs.len() != 1 || bs[0] != n {
            return Err(Error::ShapeMismatch {
                context: "add_bias".into(),
                detail: format!("{:?} + bias {:?}", self.nodes[a].shape, bs),
            });
        }
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::AddBias { a, bias }, shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch {
                context: "mul".into(),
                detail: format!("{:?} * {:?}", self.nodes[a].shape, self.nodes[b].shape),
            });
        }
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Mul { a, b }, shape))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Scale { a, c }, shape)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Silu { a }, shape)
    }

    pub fn soft_clip(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::SoftClip { a }, shape)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.dims2(a, "softmax_rows")?;
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::SoftmaxRows { a }, shape))
    }

    pub fn causal_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "causal_softmax_rows")?;
        if m != n {
            return Err(Error::ShapeMismatch {
                context: "causal_softmax_rows".into(),
                detail: format!("requires square scores, got {:?}", self.nodes[a].shape),
            });
        }
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::CausalSoftmaxRows { a }, shape))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, n) = self.dims2(x, "layer_norm")?;
        for (nm, id) in [("gain", gain), ("bias", bias)] {
            let s = &self.nodes[id].shape;
            if s.len() != 1 || s[0] != n {
                return Err(Error::ShapeMismatch {
                    context: "layer_norm".into(),
                    detail: format!("{nm} {:?} vs width {n}", s),
                });
            }
        }
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(Op::LayerNorm { x, gain, bias }, shape))
    }

    pub fn embed(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let (rows, width) = self.dims2(table, "embed")?;
        if let Some(&bad) = ids.iter().find(|&&t| t >= rows) {
            return Err(Error::TokenOutOfRange { token: bad as u32, vocab: rows });
        }
        let n = ids.len();
        Ok(self.push(Op::Embed { table, ids }, vec![n, width]))
    }

    pub fn select_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let (m, width) = self.dims2(a, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::ShapeMismatch {
                context: "select_rows".into(),
                detail: format!("row {bad} out of {m}"),
            });
        }
        let n = rows.len();
        Ok(self.push(Op::SelectRows { a, rows }, vec![n, width]))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + len > n {
            return Err(Error::ShapeMismatch {
                context: "slice_cols".into(),
                detail: format!("[{start}..{}) out of width {n}", start + len),
            });
        }
        Ok(self.push(Op::SliceCols { a, start, len }, vec![m, len]))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                context: "concat_cols".into(),
                detail: "no parts".into(),
            });
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut total = 0;
        for &p in &parts {
            let (mp, np) = self.dims2(p, "concat_cols")?;
            if mp != m {
                return Err(Error::ShapeMismatch {
                    context: "concat_cols".into(),
                    detail: format!("row counts differ: {m} vs {mp}"),
                });
            }
            total += np;
        }
        Ok(self.push(Op::ConcatCols { parts }, vec![m, total]))
    }

    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        if self.nodes[logits].shape != self.nodes[targets].shape {
            return Err(Error::ShapeMismatch {
                context: "cross_entropy_rows".into(),
                detail: format!(
                    "logits {:?} vs targets {:?}",
                    self.nodes[logits].shape, self.nodes[targets].shape
                ),
            });
        }
        self.dims2(logits, "cross_entropy_rows")?;
        Ok(self.push(Op::CrossEntropyRows { logits, targets }, vec![1]))
    }

    pub fn mean_sq_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch {
                context: "mean_sq_diff".into(),
                detail: format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            });
        }
        Ok(self.push(Op::MeanSqDiff { a, b }, vec![1]))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll { a }, vec![1])
    }

    // ── forward ──────────────────────────────────────────────────

    pub fn forward(&self, binds: &Bindings) -> Result<Eval> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut scalars: Vec<Option<f64>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let out = self.eval_node(id, node, &values, binds)?;
            out.check_finite(&format!("node {id} ({})", op_name(&node.op)))?;
            values.push(out);
            scalars.push(self.scalar_of(node, &values));
        }
        Ok(Eval { values, scalars_f64: scalars })
    }

    pub fn output<'e>(&self, eval: &'e Eval, name: &str) -> Result<&'e Tensor> {
        let id = self
            .outputs
            .get(name)
            .ok_or_else(|| Error::UnknownInput(format!("output '{name}'")))?;
        Ok(&eval.values[*id])
    }

    /// f64 accumulator value for scalar reduction nodes, recomputed from the
    /// already-evaluated operands.
    fn scalar_of(&self, node: &Node, values: &[Tensor]) -> Option<f64> {
        match &node.op {
            Op::CrossEntropyRows { logits, targets } => {
                let (m, n) = rc(&values[*logits]);
                Some(ce_rows_f64(values[*logits].data(), values[*targets].data(), m, n))
            }
            Op::MeanSqDiff { a, b } => {
                Some(mean_sq_diff_f64(values[*a].data(), values[*b].data()))
            }
            Op::SumAll { a } => Some(values[*a].data().iter().map(|&x| x as f64).sum()),
            _ => None,
        }
    }

    fn eval_node(
        &self,
        _id: NodeId,
        node: &Node,
        values: &[Tensor],
        binds: &Bindings,
    ) -> Result<Tensor> {
        let v = |id: NodeId| &values[id];
        Ok(match &node.op {
            Op::Input { name } => {
                let t = binds
                    .get(name)
                    .ok_or_else(|| Error::UnknownInput(name.clone()))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        context: format!("input '{name}'"),
                        detail: format!("declared {:?}, bound {:?}", node.shape, t.shape()),
                    });
                }
                t.clone()
            }
            Op::Constant { value } => value.clone(),
            Op::MatMul { a, b } => {
                let (m, k) = rc(v(*a));
                let (_, n) = rc(v(*b));
                Tensor::new(vec![m, n], matmul(v(*a).data(), v(*b).data(), m, k, n))?
            }
            Op::MatMulNT { a, b } => {
                let (m, k) = rc(v(*a));
                let (n, _) = rc(v(*b));
                Tensor::new(vec![m, n], matmul_nt(v(*a).data(), v(*b).data(), m, k, n))?
            }
            Op::Add { a, b } => zip_map(v(*a), v(*b), |x, y| x + y),
            Op::AddBias { a, bias } => {
                let (m, n) = rc(v(*a));
                let ad = v(*a).data();
                let bd = v(*bias).data();
                let mut out = vec![0f32; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = ad[i * n + j] + bd[j];
                    }
                }
                Tensor::new(node.shape.clone(), out)?
            }
            Op::Mul { a, b } => zip_map(v(*a), v(*b), |x, y| x * y),
            Op::Scale { a, c } => map(v(*a), |x| x * c),
            Op::Silu { a } => map(v(*a), |x| {
                let s = 1.0 / (1.0 + (-x as f64).exp());
                (x as f64 * s) as f32
            }),
            Op::SoftClip { a } => map(v(*a), soft_clip),
            Op::SoftmaxRows { a } => {
                let (m, n) = rc(v(*a));
                let mut out = vec![0f32; m * n];
                for i in 0..m {
                    softmax_slice(&v(*a).data()[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
                }
                Tensor::new(node.shape.clone(), out)?
            }
            Op::CausalSoftmaxRows { a } => {
                let (m, n) = rc(v(*a));
                let mut out = vec![0f32; m * n];
                for i in 0..m {
                    let w = i + 1;
                    softmax_slice(
                        &v(*a).data()[i * n..i * n + w],
                        &mut out[i * n..i * n + w],
                    );
                }
                Tensor::new(node.shape.clone(), out)?
            }
            Op::LayerNorm { x, gain, bias } => {
                let (m, n) = rc(v(*x));
                let xd = v(*x).data();
                let g = v(*gain).data();
                let b = v(*bias).data();
                let mut out = vec![0f32; m * n];
                for i in 0..m {
                    let row = &xd[i * n..(i + 1) * n];
                    let (mu, inv) = ln_stats(row);
                    for j in 0..n {
                        let xh = (row[j] as f64 - mu) * inv;
                        out[i * n + j] = (xh * g[j] as f64 + b[j] as f64) as f32;
                    }
                }
                Tensor::new(node.shape.clone(), out)?
            }
            Op::Embed { table, ids } => {
                let (_, width) = rc(v(*table));
                let td = v(*table).data();
                let mut out = Vec::with_capacity(ids.len() * width);
                for &t in ids {
                    out.extend_from_slice(&td[t * width..(t + 1) * width]);
                }
                Tensor::new(node.shape.clone(), out)?
            }
            Op::SelectRows { a, rows } => {
                let (_, width) = rc(v(*a));
                let ad = v(*a).data();
                let mut out = Vec::with_capacity(rows.len() * width);
                for &r in rows {
                    out.extend_from_slice(&ad[r * width..(r + 1) * width]);
                }
                Tensor::new(node.shape.clone(), out)?
            }
            Op::SliceCols { a, start, len } => {
                let (m, n) = rc(v(*a));
                let ad = v(*a).data();
                let mut out = Vec::with_capacity(m * len);
                for i in 0..m {
                    out.extend_from_slice(&ad[i * n + start..i * n + start + len]);
                }
                Tensor::new(node.shape.clone(), out)?
            }
            Op::ConcatCols { parts } => {
                let m = rc(v(parts[0])).0;
                let widths: Vec<usize> = parts.iter().map(|&p| rc(v(p)).1).collect();
                let total: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(m * total);
                for i in 0..m {
                    for (pi, &p) in parts.iter().enumerate() {
                        let w = widths[pi];
                        out.extend_from_slice(&v(p).data()[i * w..(i + 1) * w]);
                    }
                }
                Tensor::new(node.shape.clone(), out)?
            }
            Op::CrossEntropyRows { logits, targets } => {
                // Generalized weighted form sum_j y_j * (lse - x_j); reduces to
                // standard CE when each target row sums to 1. Normalization is
                // the caller's contract (model::loss_ce), which keeps this op
                // differentiable w.r.t. targets for the finite-difference oracle.
                let (m, n) = rc(v(*logits));
                Tensor::scalar(ce_rows_f64(v(*logits).data(), v(*targets).data(), m, n) as f32)
            }
            Op::MeanSqDiff { a, b } => {
                Tensor::scalar(mean_sq_diff_f64(v(*a).data(), v(*b).data()) as f32)
            }
            Op::SumAll { a } => {
                let s: f64 = v(*a).data().iter().map(|&x| x as f64).sum();
                Tensor::scalar(s as f32)
            }
        })
    }

    // ── backward ─────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `loss` node with respect to every
    /// input. Inputs the loss does not reach get zero tensors.
    pub fn backward(&self, eval: &Eval, loss: NodeId) -> Result<Grads> {
        if loss >= self.nodes.len() {
            return Err(Error::DisconnectedNode(loss));
        }
        if eval.values[loss].numel() != 1 {
            return Err(Error::LossNotScalar);
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient at node {id} ({})",
                    op_name(&self.nodes[id].op)
                )));
            }
            self.backward_node(id, &g, eval, &mut grads)?;
            grads[id] = Some(g);
        }

        let mut by_input = BTreeMap::new();
        for (name, &id) in &self.inputs {
            let t = match grads[id].take() {
                Some(g) => Tensor::new(self.nodes[id].shape.clone(), g)?,
                None => Tensor::zeros(self.nodes[id].shape.clone()),
            };
            by_input.insert(name.clone(), t);
        }
        Ok(Grads { by_input })
    }

    fn backward_node(
        &self,
        id: NodeId,
        g: &[f32],
        eval: &Eval,
        grads: &mut [Option<Vec<f32>>],
    ) -> Result<()> {
        let v = |nid: NodeId| &eval.values[nid];
        let mut acc = |nid: NodeId, delta: Vec<f32>| accumulate(grads, nid, delta);
        match &self.nodes[id].op {
            Op::Input { .. } | Op::Constant { .. } => {}
            Op::MatMul { a, b } => {
                let (m, k) = rc(v(*a));
                let (_, n) = rc(v(*b));
                // dA = dC * B^T; B stored [k,n] row-major is exactly the NT operand
                acc(*a, matmul_nt(g, v(*b).data(), m, n, k));
                let at = transpose(v(*a).data(), m, k);
                acc(*b, matmul(&at, g, k, m, n));
            }
            Op::MatMulNT { a, b } => {
                let (m, k) = rc(v(*a));
                let (n, _) = rc(v(*b));
                acc(*a, matmul(g, v(*b).data(), m, n, k));
                let gt = transpose(g, m, n);
                acc(*b, matmul(&gt, v(*a).data(), n, m, k));
            }
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddBias { a, bias } => {
                let (m, n) = rc(v(*a));
                acc(*a, g.to_vec());
                let mut db = vec![0f32; n];
                for j in 0..n {
                    let mut s = 0f64;
                    for i in 0..m {
                        s += g[i * n + j] as f64;
                    }
                    db[j] = s as f32;
                }
                acc(*bias, db);
            }
            Op::Mul { a, b } => {
                let bd = v(*b).data();
                let ad = v(*a).data();
                acc(*a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
            }
            Op::Scale { a, c } => {
                acc(*a, g.iter().map(|x| x * c).collect());
            }
            Op::Silu { a } => {
                let xd = v(*a).data();
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(gy, &x)| {
                        let s = 1.0 / (1.0 + (-x as f64).exp());
                        (*gy as f64 * (s + x as f64 * s * (1.0 - s))) as f32
                    })
                    .collect();
                acc(*a, dx);
            }
            Op::SoftClip { a } => {
                let xd = v(*a).data();
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(gy, &x)| gy * soft_clip_deriv(x))
                    .collect();
                acc(*a, dx);
            }
            Op::SoftmaxRows { a } => {
                let (m, n) = rc(v(*a));
                let yd = v(id).data();
                let mut dx = vec![0f32; m * n];
                for i in 0..m {
                    softmax_vjp(
                        &yd[i * n..(i + 1) * n],
                        &g[i * n..(i + 1) * n],
                        &mut dx[i * n..(i + 1) * n],
                    );
                }
                acc(*a, dx);
            }
            Op::CausalSoftmaxRows { a } => {
                let (m, n) = rc(v(*a));
                let yd = v(id).data();
                let mut dx = vec![0f32; m * n];
                for i in 0..m {
                    let w = i + 1;
                    softmax_vjp(
                        &yd[i * n..i * n + w],
                        &g[i * n..i * n + w],
                        &mut dx[i * n..i * n + w],
                    );
                }
                acc(*a, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (m, n) = rc(v(*x));
                let xd = v(*x).data();
                let gd = v(*gain).data();
                let mut dx = vec![0f32; m * n];
                let mut dgain = vec![0f64; n];
                let mut dbias = vec![0f64; n];
                for i in 0..m {
                    let row = &xd[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let (mu, inv) = ln_stats(row);
                    let mut mean_dxh = 0f64;
                    let mut mean_dxh_xh = 0f64;
                    let mut xh = vec![0f64; n];
                    let mut dxh = vec![0f64; n];
                    for j in 0..n {
                        xh[j] = (row[j] as f64 - mu) * inv;
                        dxh[j] = grow[j] as f64 * gd[j] as f64;
                        mean_dxh += dxh[j];
                        mean_dxh_xh += dxh[j] * xh[j];
                        dgain[j] += grow[j] as f64 * xh[j];
                        dbias[j] += grow[j] as f64;
                    }
                    mean_dxh /= n as f64;
                    mean_dxh_xh /= n as f64;
                    for j in 0..n {
                        dx[i * n + j] = (inv * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh)) as f32;
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain.iter().map(|&x| x as f32).collect());
                acc(*bias, dbias.iter().map(|&x| x as f32).collect());
            }
            Op::Embed { table, ids } => {
                let (rows, width) = rc(v(*table));
                let mut dt = vec![0f32; rows * width];
                for (pos, &t) in ids.iter().enumerate() {
                    for j in 0..width {
                        dt[t * width + j] += g[pos * width + j];
                    }
                }
                acc(*table, dt);
            }
            Op::SelectRows { a, rows } => {
                let (m, width) = rc(v(*a));
                let mut da = vec![0f32; m * width];
                for (pos, &r) in rows.iter().enumerate() {
                    for j in 0..width {
                        da[r * width + j] += g[pos * width + j];
                    }
                }
                acc(*a, da);
            }
            Op::SliceCols { a, start, len } => {
                let (m, n) = rc(v(*a));
                let mut da = vec![0f32; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*a, da);
            }
            Op::ConcatCols { parts } => {
                let m = rc(v(parts[0])).0;
                let total = self.nodes[id].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = rc(v(p)).1;
                    let mut dp = vec![0f32; m * w];
                    for i in 0..m {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    acc(p, dp);
                    offset += w;
                }
            }
            Op::CrossEntropyRows { logits, targets } => {
                let (m, n) = rc(v(*logits));
                let ld = v(*logits).data();
                let td = v(*targets).data();
                let scale = g[0] as f64 / m as f64;
                let mut dl = vec![0f32; m * n];
                let mut dt = vec![0f32; m * n];
                for i in 0..m {
                    let lrow = &ld[i * n..(i + 1) * n];
                    let trow = &td[i * n..(i + 1) * n];
                    let tsum: f64 = trow.iter().map(|&y| y as f64).sum();
                    let lse = log_sum_exp(lrow);
                    for j in 0..n {
                        let logp = lrow[j] as f64 - lse;
                        let p = logp.exp();
                        dl[i * n + j] = (scale * (tsum * p - trow[j] as f64)) as f32;
                        dt[i * n + j] = (scale * -logp) as f32;
                    }
                }
                acc(*logits, dl);
                acc(*targets, dt);
            }
            Op::MeanSqDiff { a, b } => {
                let ad = v(*a).data();
                let bd = v(*b).data();
                let scale = 2.0 * g[0] as f64 / ad.len() as f64;
                let da: Vec<f32> = ad
                    .iter()
                    .zip(bd)
                    .map(|(x, y)| (scale * (*x as f64 - *y as f64)) as f32)
                    .collect();
                let db: Vec<f32> = da.iter().map(|x| -x).collect();
                acc(*a, da);
                acc(*b, db);
            }
            Op::SumAll { a } => {
                acc(*a, vec![g[0]; v(*a).numel()]);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], id: NodeId, delta: Vec<f32>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                *e += d;
            }
        }
        None => grads[id] = Some(delta),
    }
}

fn rc(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn map(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::from_fn(t.shape().to_vec(), |i| f(t.data()[i]))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::from_fn(a.shape().to_vec(), |i| f(a.data()[i], b.data()[i]))
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input { .. } => "input",
        Op::Constant { .. } => "constant",
        Op::MatMul { .. } => "matmul",
        Op::MatMulNT { .. } => "matmul_nt",
        Op::Add { .. } => "add",
        Op::AddBias { .. } => "add_bias",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Silu { .. } => "silu",
        Op::SoftClip { .. } => "soft_clip",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::CausalSoftmaxRows { .. } => "causal_softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embed { .. } => "embed",
        Op::SelectRows { .. } => "select_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols { .. } => "concat_cols",
        Op::CrossEntropyRows { .. } => "cross_entropy_rows",
        Op::MeanSqDiff { .. } => "mean_sq_diff",
        Op::SumAll { .. } => "sum_all",
    }
}

// ── numeric helpers ──────────────────────────────────────────────────

fn softmax_slice(x: &[f32], out: &mut [f32]) {
    let mx = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let mut denom = 0f64;
    for &v in x {
        denom += (v as f64 - mx).exp();
    }
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v as f64 - mx).exp() / denom) as f32;
    }
}

fn softmax_vjp(y: &[f32], dy: &[f32], dx: &mut [f32]) {
    let mut dot = 0f64;
    for (a, b) in y.iter().zip(dy) {
        dot += *a as f64 * *b as f64;
    }
    for ((o, &yv), &gv) in dx.iter_mut().zip(y).zip(dy) {
        *o = (yv as f64 * (gv as f64 - dot)) as f32;
    }
}

fn log_sum_exp(x: &[f32]) -> f64 {
    let mx = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let mut s = 0f64;
    for &v in x {
        s += (v as f64 - mx).exp();
    }
    s.ln() + mx
}

fn ce_rows_f64(ld: &[f32], td: &[f32], m: usize, n: usize) -> f64 {
    let mut total = 0f64;
    for i in 0..m {
        let trow = &td[i * n..(i + 1) * n];
        let lrow = &ld[i * n..(i + 1) * n];
        let tsum: f64 = trow.iter().map(|&y| y as f64).sum();
        let lse = log_sum_exp(lrow);
        let mut dot = 0f64;
        for j in 0..n {
            dot += trow[j] as f64 * lrow[j] as f64;
        }
        total += tsum * lse - dot;
    }
    total / m as f64
}

fn mean_sq_diff_f64(ad: &[f32], bd: &[f32]) -> f64 {
    let mut total = 0f64;
    for (x, y) in ad.iter().zip(bd) {
        let d = *x as f64 - *y as f64;
        total += d * d;
    }
    total / ad.len() as f64
}

fn ln_stats(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mut mu = 0f64;
    for &v in row {
        mu += v as f64;
    }
    mu /= n;
    let mut var = 0f64;
    for &v in row {
        let d = v as f64 - mu;
        var += d * d;
    }
    var /= n;
    (mu, 1.0 / (var + LN_EPS).sqrt())
}

fn soft_clip(x: f32) -> f32 {
    if x.abs() <= 1.0 {
        x
    } else {
        x.signum() * (2.0 - 1.0 / x.abs())
    }
}

fn soft_clip_deriv(x: f32) -> f32 {
    if x.abs() <= 1.0 {
        1.0
    } else {
        1.0 / (x * x)
    }
}

// ── finite differences ───────────────────────────────────────────────

/// Central-difference gradient oracle: per coordinate,
/// (L(p + e) - L(p - e)) / 2e with e = eps * max(1, |p_i|).
pub fn finite_diff_grad(
    loss_fn: &mut dyn FnMut(&Tensor) -> Result<f64>,
    params: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    let mut work = params.clone();
    let mut grad = vec![0f32; params.numel()];
    for i in 0..params.numel() {
        let orig = params.data()[i];
        let h = eps as f64 * (orig.abs() as f64).max(1.0);
        // Divide by the realized (f32-rounded) interval, not the nominal 2h.
        let plus = (orig as f64 + h) as f32;
        let minus = (orig as f64 - h) as f32;
        work.data_mut()[i] = plus;
        let up = loss_fn(&work)?;
        work.data_mut()[i] = minus;
        let down = loss_fn(&work)?;
        work.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("finite_diff at coordinate {i}")));
        }
        grad[i] = ((up - down) / (plus as f64 - minus as f64)) as f32;
    }
    Tensor::new(params.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_forward_and_grad() {
        // y = x * x at x = 3
        let mut g = Graph::new();
        let x = g.input("x", vec![1]);
        let y = g.mul(x, x).unwrap();
        g.mark_output("y", y);
        let xv = Tensor::scalar(3.0);
        let mut b = Bindings::new();
        b.bind("x", &xv);
        let eval = g.forward(&b).unwrap();
        assert_eq!(g.output(&eval, "y").unwrap().item(), 9.0);
        let grads = g.backward(&eval, y).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let v = g.input("v", vec![1, 2]);
        let y = g.softmax_rows(v).unwrap();
        g.mark_output("y", y);
        let vv = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let mut b = Bindings::new();
        b.bind("v", &vv);
        let eval = g.forward(&b).unwrap();
        assert_eq!(g.output(&eval, "y").unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::new();
        let a = g.input("a", vec![2, 2]);
        let bnode = g.input("b", vec![2, 3]);
        let y = g.matmul(a, bnode).unwrap();
        g.mark_output("y", y);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bv = Tensor::new(vec![2, 3], vec![5.0, -1.0, 2.0, 0.5, 3.0, 9.0]).unwrap();
        let mut b = Bindings::new();
        b.bind("a", &eye).bind("b", &bv);
        let eval = g.forward(&b).unwrap();
        assert_eq!(g.output(&eval, "y").unwrap().data(), bv.data());
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut g = Graph::new();
        let _x = g.input("x", vec![3]);
        let c = g.constant(Tensor::scalar(7.0));
        let eval = {
            let xv = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
            let mut b = Bindings::new();
            b.bind("x", &xv);
            g.forward(&b).unwrap()
        };
        let grads = g.backward(&eval, c).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", vec![2]);
        let y = g.scale(x, 2.0);
        let xv = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut b = Bindings::new();
        b.bind("x", &xv);
        let eval = g.forward(&b).unwrap();
        assert!(matches!(g.backward(&eval, y), Err(Error::LossNotScalar)));
    }

    #[test]
    fn out_of_graph_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", vec![1]);
        let y = g.mul(x, x).unwrap();
        let xv = Tensor::scalar(1.0);
        let mut b = Bindings::new();
        b.bind("x", &xv);
        let eval = g.forward(&b).unwrap();
        assert!(matches!(
            g.backward(&eval, y + 10),
            Err(Error::DisconnectedNode(_))
        ));
    }

    #[test]
    fn missing_binding_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", vec![1]);
        g.mark_output("x", x);
        let b = Bindings::new();
        assert!(matches!(g.forward(&b), Err(Error::UnknownInput(_))));
    }

    #[test]
    fn finite_diff_quadratic() {
        // loss = sum p^2 at p = (1, 2) -> grad (2, 4)
        let p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut f = |t: &Tensor| -> crate::Result<f64> {
            Ok(t.data().iter().map(|&v| v as f64 * v as f64).sum())
        };
        let fd = finite_diff_grad(&mut f, &p, 1e-4).unwrap();
        assert!((fd.data()[0] - 2.0).abs() < 1e-6);
        assert!((fd.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let p = Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
        let mut f = |_: &Tensor| -> crate::Result<f64> { Ok(42.0) };
        let fd = finite_diff_grad(&mut f, &p, 1e-3).unwrap();
        assert_eq!(fd.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn nonfinite_intermediate_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", vec![1]);
        let y = g.scale(x, f32::MAX);
        let z = g.mul(y, y).unwrap();
        g.mark_output("z", z);
        let xv = Tensor::scalar(2.0);
        let mut b = Bindings::new();
        b.bind("x", &xv);
        assert!(matches!(g.forward(&b), Err(Error::NonFinite(_))));
    }
}

//! Define-by-run computation tape with reverse-mode differentiation.
//!
//! Every primitive records enough of its inputs to replay a backward rule.
//! `backward` walks the recorded ops in reverse, accumulates gradients, and
//! flushes leaf gradients into the owning [`ParamStore`]; the tape is
//! consumed by the pass. Inputs of an op always have smaller node indices
//! than its output, so reverse index order is a valid topological order.
//!
//! A checked tape (the default) rejects NaN/Inf the moment one appears in a
//! forward value or a gradient buffer.

use super::conv::{col2im, im2col, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    /// Both operands share a shape.
    Same,
    /// Rhs is a length-n vector applied to every row of an [m, n] lhs.
    Row,
    /// Rhs is a single value applied to every element of lhs.
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var, bc: Broadcast },
    Sub { a: Var, b: Var, bc: Broadcast },
    Mul { a: Var, b: Var, bc: Broadcast },
    Div { a: Var, b: Var, bc: Broadcast },
    AddScalar { a: Var },
    MulScalar { a: Var, c: f64 },
    Relu { a: Var },
    Sigmoid { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Square { a: Var },
    Sqrt { a: Var },
    Neg { a: Var },
    Abs { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    SumRows { a: Var },
    MeanCols { a: Var },
    ConcatCols { parts: Vec<Var> },
    SliceCols { a: Var, start: usize, len: usize },
    PermuteCols { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Im2col { a: Var, geom: ConvGeom },
    ColsToNchw { a: Var, oc: usize, oh: usize, ow: usize },
    UpsampleNearest { a: Var, ch: usize, h: usize, w: usize, th: usize, tw: usize },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Checked tape: forward values and gradients are validated finite.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: true,
            consumed: false,
        }
    }

    /// Tape without NaN/Inf validation; non-finite values propagate.
    pub fn unchecked() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: false,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if self.checked {
            if let Some(v) = data.iter().find(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite value {v} produced by {op:?}"
                )));
            }
        }
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf { param: None })
            .expect("constant tensors are pre-validated")
    }

    pub fn constant_values(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dimension(format!(
                "shape {shape:?} incompatible with {} values",
                data.len()
            )));
        }
        self.push(shape, data, false, Op::Leaf { param: None })
    }

    /// Parameter leaf. `backward` flushes its gradient into the store entry.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
            Op::Leaf { param: Some(id) },
        )
        .expect("store tensors are pre-validated")
    }

    /// Parameter used as a constant (frozen component in the current pass).
    pub fn param_detached(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf { param: None })
            .expect("store tensors are pre-validated")
    }

    // ── Inspection ──────────────────────────────────────────────────

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn extract(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node shape is consistent")
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn infer_broadcast(&self, a: Var, b: Var, what: &str) -> Result<Broadcast> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if self.nodes[b.0].data.len() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1] {
            return Ok(Broadcast::Row);
        }
        Err(Error::dimension(format!(
            "{what}: incompatible shapes {sa:?} vs {sb:?}"
        )))
    }

    // ── Binary ops ──────────────────────────────────────────────────

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let bc = self.infer_broadcast(a, b, what)?;
        let (la, lb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let data: Vec<f64> = match bc {
            Broadcast::Same => la.data.iter().zip(&lb.data).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => {
                let y = lb.data[0];
                la.data.iter().map(|&x| f(x, y)).collect()
            }
            Broadcast::Row => {
                let n = la.shape[1];
                la.data
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, lb.data[i % n]))
                    .collect()
            }
        };
        let rg = la.requires_grad || lb.requires_grad;
        let shape = la.shape.clone();
        self.push(shape, data, rg, make(a, b, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |a, b, bc| Op::Add { a, b, bc })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, |a, b, bc| Op::Sub { a, b, bc })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b, bc| Op::Mul { a, b, bc })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, |a, b, bc| Op::Div { a, b, bc })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let node = &self.nodes[a.0];
        let data = node.data.iter().map(|&x| x + c).collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        self.push(shape, data, rg, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let node = &self.nodes[a.0];
        let data = node.data.iter().map(|&x| x * c).collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        self.push(shape, data, rg, Op::MulScalar { a, c })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dimension(format!(
                "matmul needs 2-D operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::dimension(format!(
                "matmul inner dimensions disagree: {sa:?} x {sb:?}"
            )));
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.req(a) || self.req(b);
        self.push(vec![m, n], data, rg, Op::Matmul { a, b })
    }

    // ── Unary ops ───────────────────────────────────────────────────

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let node = &self.nodes[a.0];
        let data = node.data.iter().map(|&x| f(x)).collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        self.push(shape, data, rg, op)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.checked {
            if let Some(v) = self.nodes[a.0].data.iter().find(|&&x| x <= 0.0) {
                return Err(Error::numeric(format!("log of non-positive value {v}")));
            }
        }
        self.unary(a, f64::ln, Op::Log { a })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sqrt, Op::Sqrt { a })
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg { a })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs { a })
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let node = &self.nodes[a.0];
        let s: f64 = node.data.iter().sum();
        let rg = node.requires_grad;
        self.push(vec![1], vec![s], rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let node = &self.nodes[a.0];
        let s: f64 = node.data.iter().sum();
        let n = node.data.len() as f64;
        let rg = node.requires_grad;
        self.push(vec![1], vec![s / n], rg, Op::Mean { a })
    }

    /// [m, n] -> [m]: sum over each row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let node = &self.nodes[a.0];
        if node.shape.len() != 2 {
            return Err(Error::dimension("sum_rows needs a 2-D input"));
        }
        let (m, n) = (node.shape[0], node.shape[1]);
        let data: Vec<f64> = (0..m).map(|i| node.data[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = node.requires_grad;
        self.push(vec![m], data, rg, Op::SumRows { a })
    }

    /// [m, n] -> [n]: mean over the batch dimension.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let node = &self.nodes[a.0];
        if node.shape.len() != 2 {
            return Err(Error::dimension("mean_cols needs a 2-D input"));
        }
        let (m, n) = (node.shape[0], node.shape[1]);
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += node.data[i * n + j];
            }
        }
        for v in data.iter_mut() {
            *v /= m as f64;
        }
        let rg = node.requires_grad;
        self.push(vec![n], data, rg, Op::MeanCols { a })
    }

    // ── Structural ops ──────────────────────────────────────────────

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero parts"));
        }
        let m = self.nodes[parts[0].0].shape[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[0] != m {
                return Err(Error::dimension(format!(
                    "concat_cols: expected [{m}, _], got {s:?}"
                )));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].data;
            for i in 0..m {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.req(p));
        self.push(vec![m, total], data, rg, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let node = &self.nodes[a.0];
        if node.shape.len() != 2 || start + len > node.shape[1] {
            return Err(Error::dimension(format!(
                "slice_cols [{start}, {start}+{len}) out of {:?}",
                node.shape
            )));
        }
        let (m, n) = (node.shape[0], node.shape[1]);
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&node.data[i * n + start..i * n + start + len]);
        }
        let rg = node.requires_grad;
        self.push(vec![m, len], data, rg, Op::SliceCols { a, start, len })
    }

    /// Column gather: out[:, j] = in[:, perm[j]].
    pub fn permute_cols(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let node = &self.nodes[a.0];
        if node.shape.len() != 2 || node.shape[1] != perm.len() {
            return Err(Error::dimension(format!(
                "permute_cols: permutation of length {} on shape {:?}",
                perm.len(),
                node.shape
            )));
        }
        let (m, n) = (node.shape[0], node.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for (j, &src) in perm.iter().enumerate() {
                data[i * n + j] = node.data[i * n + src];
            }
        }
        let rg = node.requires_grad;
        self.push(vec![m, n], data, rg, Op::PermuteCols { a, perm: perm.to_vec() })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let node = &self.nodes[a.0];
        if shape.iter().product::<usize>() != node.data.len() {
            return Err(Error::dimension(format!(
                "reshape {:?} -> {shape:?}",
                node.shape
            )));
        }
        let (data, rg) = (node.data.clone(), node.requires_grad);
        self.push(shape, data, rg, Op::Reshape { a })
    }

    // ── Convolution support ─────────────────────────────────────────

    /// Patch extraction: [batch, c*h*w] -> [batch*oh*ow, c*kh*kw].
    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Result<Var> {
        let node = &self.nodes[a.0];
        let expected = geom.batch * geom.in_ch * geom.h * geom.w;
        if node.data.len() != expected {
            return Err(Error::dimension(format!(
                "im2col: input has {} values, geometry wants {expected}",
                node.data.len()
            )));
        }
        let data = im2col(&node.data, &geom);
        let rows = geom.batch * geom.out_h() * geom.out_w();
        let cols = geom.in_ch * geom.kh * geom.kw;
        let rg = node.requires_grad;
        self.push(vec![rows, cols], data, rg, Op::Im2col { a, geom })
    }

    /// [batch*oh*ow, oc] -> [batch, oc*oh*ow] channel-major reorder.
    pub fn cols_to_nchw(&mut self, a: Var, batch: usize, oc: usize, oh: usize, ow: usize) -> Result<Var> {
        let node = &self.nodes[a.0];
        if node.shape != [batch * oh * ow, oc] {
            return Err(Error::dimension(format!(
                "cols_to_nchw: got {:?}, want [{}, {oc}]",
                node.shape,
                batch * oh * ow
            )));
        }
        let hw = oh * ow;
        let mut data = vec![0.0; batch * oc * hw];
        for b in 0..batch {
            for p in 0..hw {
                for c in 0..oc {
                    data[b * oc * hw + c * hw + p] = node.data[(b * hw + p) * oc + c];
                }
            }
        }
        let rg = node.requires_grad;
        self.push(vec![batch, oc * hw], data, rg, Op::ColsToNchw { a, oc, oh, ow })
    }

    /// Nearest-neighbor resize of a [batch, ch*h*w] map to [batch, ch*th*tw].
    pub fn upsample_nearest(
        &mut self,
        a: Var,
        ch: usize,
        h: usize,
        w: usize,
        th: usize,
        tw: usize,
    ) -> Result<Var> {
        let node = &self.nodes[a.0];
        if node.shape.len() != 2 || node.shape[1] != ch * h * w {
            return Err(Error::dimension(format!(
                "upsample_nearest: shape {:?} vs ch*h*w = {}",
                node.shape,
                ch * h * w
            )));
        }
        let batch = node.shape[0];
        let mut data = vec![0.0; batch * ch * th * tw];
        for b in 0..batch {
            for c in 0..ch {
                for y in 0..th {
                    let sy = y * h / th;
                    for x in 0..tw {
                        let sx = x * w / tw;
                        data[((b * ch + c) * th + y) * tw + x] =
                            node.data[((b * ch + c) * h + sy) * w + sx];
                    }
                }
            }
        }
        let rg = node.requires_grad;
        self.push(vec![batch, ch * th * tw], data, rg, Op::UpsampleNearest { a, ch, h, w, th, tw })
    }

    // ── Losses ──────────────────────────────────────────────────────

    /// Mean cross-entropy of logits [m, c] against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let node = &self.nodes[logits.0];
        if node.shape.len() != 2 || node.shape[0] != targets.len() {
            return Err(Error::dimension(format!(
                "cross_entropy: logits {:?} vs {} targets",
                node.shape,
                targets.len()
            )));
        }
        let (m, c) = (node.shape[0], node.shape[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::contract(format!(
                "target class {t} out of range for {c} logits"
            )));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &node.data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            total -= row[t] - lse;
        }
        let rg = node.requires_grad;
        self.push(
            vec![1],
            vec![total / m as f64],
            rg,
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        )
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients of parameter leaves are
    /// accumulated into `store`; the tape is consumed.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::contract("backward on a consumed tape"));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = node.grad.as_ref() else { continue };
            if self.checked {
                if let Some(v) = grad.iter().find(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!(
                        "non-finite gradient {v} at node {i} ({:?})",
                        node.op
                    )));
                }
            }
            backprop_node(node, grad, before, store);
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(())
    }
}

fn needs(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn buf<'a>(nodes: &'a mut [Node], v: Var) -> &'a mut [f64] {
    let node = &mut nodes[v.0];
    if node.grad.is_none() {
        node.grad = Some(vec![0.0; node.data.len()]);
    }
    node.grad.as_mut().expect("just allocated")
}

fn backprop_node(node: &Node, grad: &[f64], nodes: &mut [Node], store: &mut ParamStore) {
    match &node.op {
        Op::Leaf { param } => {
            if let Some(id) = param {
                store.get_mut(*id).accumulate_grad(grad);
            }
        }
        Op::Matmul { a, b } => {
            let (m, n) = (node.shape[0], node.shape[1]);
            let k = nodes[a.0].shape[1];
            if needs(nodes, *a) {
                // dA = G . B^T
                let bt = transpose(&nodes[b.0].data, k, n);
                let da = matmul_raw(grad, &bt, m, n, k);
                add_into(buf(nodes, *a), &da);
            }
            if needs(nodes, *b) {
                // dB = A^T . G
                let at = transpose(&nodes[a.0].data, m, k);
                let db = matmul_raw(&at, grad, k, m, n);
                add_into(buf(nodes, *b), &db);
            }
        }
        Op::Add { a, b, bc } => {
            if needs(nodes, *a) {
                add_into(buf(nodes, *a), grad);
            }
            if needs(nodes, *b) {
                reduce_into(buf(nodes, *b), grad, &node.shape, *bc, 1.0);
            }
        }
        Op::Sub { a, b, bc } => {
            if needs(nodes, *a) {
                add_into(buf(nodes, *a), grad);
            }
            if needs(nodes, *b) {
                reduce_into(buf(nodes, *b), grad, &node.shape, *bc, -1.0);
            }
        }
        Op::Mul { a, b, bc } => {
            if needs(nodes, *a) {
                let scaled = apply_rhs(grad, &nodes[b.0].data, &node.shape, *bc, |g, y| g * y);
                add_into(buf(nodes, *a), &scaled);
            }
            if needs(nodes, *b) {
                let prod: Vec<f64> = grad
                    .iter()
                    .zip(&nodes[a.0].data)
                    .map(|(&g, &x)| g * x)
                    .collect();
                reduce_into(buf(nodes, *b), &prod, &node.shape, *bc, 1.0);
            }
        }
        Op::Div { a, b, bc } => {
            if needs(nodes, *a) {
                let scaled = apply_rhs(grad, &nodes[b.0].data, &node.shape, *bc, |g, y| g / y);
                add_into(buf(nodes, *a), &scaled);
            }
            if needs(nodes, *b) {
                // d(a/b)/db = -a / b^2, with a expanded to the output shape
                let a_data = &nodes[a.0].data;
                let with_a: Vec<f64> = grad
                    .iter()
                    .zip(a_data)
                    .map(|(&g, &x)| g * x)
                    .collect();
                let term = apply_rhs(&with_a, &nodes[b.0].data, &node.shape, *bc, |gx, y| -gx / (y * y));
                reduce_into(buf(nodes, *b), &term, &node.shape, *bc, 1.0);
            }
        }
        Op::AddScalar { a } => {
            if needs(nodes, *a) {
                add_into(buf(nodes, *a), grad);
            }
        }
        Op::MulScalar { a, c } => {
            if needs(nodes, *a) {
                let scaled: Vec<f64> = grad.iter().map(|&g| g * c).collect();
                add_into(buf(nodes, *a), &scaled);
            }
        }
        Op::Relu { a } => {
            if needs(nodes, *a) {
                let mask: Vec<f64> = nodes[a.0]
                    .data
                    .iter()
                    .zip(grad)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                add_into(buf(nodes, *a), &mask);
            }
        }
        Op::Sigmoid { a } => {
            if needs(nodes, *a) {
                let d: Vec<f64> = node
                    .data
                    .iter()
                    .zip(grad)
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                add_into(buf(nodes, *a), &d);
            }
        }
        Op::Exp { a } => {
            if needs(nodes, *a) {
                let d: Vec<f64> = node.data.iter().zip(grad).map(|(&e, &g)| g * e).collect();
                add_into(buf(nodes, *a), &d);
            }
        }
        Op::Log { a } => {
            if needs(nodes, *a) {
                let d: Vec<f64> = nodes[a.0]
                    .data
                    .iter()
                    .zip(grad)
                    .map(|(&x, &g)| g / x)
                    .collect();
                add_into(buf(nodes, *a), &d);
            }
        }
        Op::Square { a } => {
            if needs(nodes, *a) {
                let d: Vec<f64> = nodes[a.0]
                    .data
                    .iter()
                    .zip(grad)
                    .map(|(&x, &g)| 2.0 * x * g)
                    .collect();
                add_into(buf(nodes, *a), &d);
            }
        }
        Op::Sqrt { a } => {
            if needs(nodes, *a) {
                let d: Vec<f64> = node
                    .data
                    .iter()
                    .zip(grad)
                    .map(|(&s, &g)| g / (2.0 * s))
                    .collect();
                add_into(buf(nodes, *a), &d);
            }
        }
        Op::Neg { a } => {
            if needs(nodes, *a) {
                let d: Vec<f64> = grad.iter().map(|&g| -g).collect();
                add_into(buf(nodes, *a), &d);
            }
        }
        Op::Abs { a } => {
            if needs(nodes, *a) {
                let d: Vec<f64> = nodes[a.0]
                    .data
                    .iter()
                    .zip(grad)
                    .map(|(&x, &g)| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_into(buf(nodes, *a), &d);
            }
        }
        Op::Sum { a } => {
            if needs(nodes, *a) {
                let g = grad[0];
                for v in buf(nodes, *a).iter_mut() {
                    *v += g;
                }
            }
        }
        Op::Mean { a } => {
            if needs(nodes, *a) {
                let n = nodes[a.0].data.len() as f64;
                let g = grad[0] / n;
                for v in buf(nodes, *a).iter_mut() {
                    *v += g;
                }
            }
        }
        Op::SumRows { a } => {
            if needs(nodes, *a) {
                let n = nodes[a.0].shape[1];
                let b = buf(nodes, *a);
                for (i, &g) in grad.iter().enumerate() {
                    for v in b[i * n..(i + 1) * n].iter_mut() {
                        *v += g;
                    }
                }
            }
        }
        Op::MeanCols { a } => {
            if needs(nodes, *a) {
                let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let scale = 1.0 / m as f64;
                let b = buf(nodes, *a);
                for i in 0..m {
                    for j in 0..n {
                        b[i * n + j] += grad[j] * scale;
                    }
                }
            }
        }
        Op::ConcatCols { parts } => {
            let m = node.shape[0];
            let total = node.shape[1];
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p.0].shape[1];
                if needs(nodes, p) {
                    let off = offset;
                    let mut slice_grad = vec![0.0; m * w];
                    for i in 0..m {
                        slice_grad[i * w..(i + 1) * w]
                            .copy_from_slice(&grad[i * total + off..i * total + off + w]);
                    }
                    add_into(buf(nodes, p), &slice_grad);
                }
                offset += w;
            }
        }
        Op::SliceCols { a, start, len } => {
            if needs(nodes, *a) {
                let n = nodes[a.0].shape[1];
                let m = node.shape[0];
                let b = buf(nodes, *a);
                for i in 0..m {
                    for j in 0..*len {
                        b[i * n + start + j] += grad[i * len + j];
                    }
                }
            }
        }
        Op::PermuteCols { a, perm } => {
            if needs(nodes, *a) {
                let (m, n) = (node.shape[0], node.shape[1]);
                let b = buf(nodes, *a);
                for i in 0..m {
                    for (j, &src) in perm.iter().enumerate() {
                        b[i * n + src] += grad[i * n + j];
                    }
                }
            }
        }
        Op::Reshape { a } => {
            if needs(nodes, *a) {
                add_into(buf(nodes, *a), grad);
            }
        }
        Op::Im2col { a, geom } => {
            if needs(nodes, *a) {
                let d = col2im(grad, geom);
                add_into(buf(nodes, *a), &d);
            }
        }
        Op::ColsToNchw { a, oc, oh, ow } => {
            if needs(nodes, *a) {
                let hw = oh * ow;
                let batch = node.shape[0];
                let b = buf(nodes, *a);
                for bi in 0..batch {
                    for p in 0..hw {
                        for c in 0..*oc {
                            b[(bi * hw + p) * oc + c] += grad[bi * oc * hw + c * hw + p];
                        }
                    }
                }
            }
        }
        Op::UpsampleNearest { a, ch, h, w, th, tw } => {
            if needs(nodes, *a) {
                let batch = node.shape[0];
                let b = buf(nodes, *a);
                for bi in 0..batch {
                    for c in 0..*ch {
                        for y in 0..*th {
                            let sy = y * h / th;
                            for x in 0..*tw {
                                let sx = x * w / tw;
                                b[((bi * ch + c) * h + sy) * w + sx] +=
                                    grad[((bi * ch + c) * th + y) * tw + x];
                            }
                        }
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets } => {
            if needs(nodes, *logits) {
                let (m, c) = (nodes[logits.0].shape[0], nodes[logits.0].shape[1]);
                let g = grad[0] / m as f64;
                let data = nodes[logits.0].data.clone();
                let b = buf(nodes, *logits);
                for (i, &t) in targets.iter().enumerate() {
                    let row = &data[i * c..(i + 1) * c];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                    for j in 0..c {
                        let soft = (row[j] - max).exp() / denom;
                        let indicator = if j == t { 1.0 } else { 0.0 };
                        b[i * c + j] += g * (soft - indicator);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Expand the rhs operand over the output shape and combine with `grad`.
fn apply_rhs(
    grad: &[f64],
    rhs: &[f64],
    out_shape: &[usize],
    bc: Broadcast,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    match bc {
        Broadcast::Same => grad.iter().zip(rhs).map(|(&g, &y)| f(g, y)).collect(),
        Broadcast::Scalar => grad.iter().map(|&g| f(g, rhs[0])).collect(),
        Broadcast::Row => {
            let n = out_shape[1];
            grad.iter()
                .enumerate()
                .map(|(i, &g)| f(g, rhs[i % n]))
                .collect()
        }
    }
}

/// Fold an output-shaped gradient back onto the (possibly broadcast) rhs.
fn reduce_into(dst: &mut [f64], grad: &[f64], out_shape: &[usize], bc: Broadcast, sign: f64) {
    match bc {
        Broadcast::Same => {
            for (d, &g) in dst.iter_mut().zip(grad) {
                *d += sign * g;
            }
        }
        Broadcast::Scalar => {
            dst[0] += sign * grad.iter().sum::<f64>();
        }
        Broadcast::Row => {
            let n = out_shape[1];
            for (i, &g) in grad.iter().enumerate() {
                dst[i % n] += sign * g;
            }
        }
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// Serial row-major matrix product with a fixed accumulation order.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::new(vec![n, n], data).unwrap()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut tape = Tape::new();
        let b = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i3 = tape.constant(&eye(3));
        let bv = tape.constant(&b);
        let out = tape.matmul(i3, bv).unwrap();
        assert_eq!(tape.value(out), b.data());
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
        let mut tape = Tape::new();
        let a = tape
            .constant_values(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let b = tape.constant_values(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::new();
        let a = tape
            .constant_values(vec![2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0])
            .unwrap();
        let z = tape.constant_values(vec![3, 2], vec![0.0; 6]).unwrap();
        let out = tape.matmul(a, z).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_identity_association_is_bitwise() {
        let mut rng = crate::rng::SeededRng::new(17);
        let a_data: Vec<f64> = (0..12).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let b_data: Vec<f64> = (0..20).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let a = Tensor::new(vec![3, 4], a_data).unwrap();
        let b = Tensor::new(vec![4, 5], b_data).unwrap();

        let mut t1 = Tape::new();
        let (av, iv, bv) = (t1.constant(&a), t1.constant(&eye(4)), t1.constant(&b));
        let ai = t1.matmul(av, iv).unwrap();
        let left = t1.matmul(ai, bv).unwrap();

        let mut t2 = Tape::new();
        let (av, iv, bv) = (t2.constant(&a), t2.constant(&eye(4)), t2.constant(&b));
        let ib = t2.matmul(iv, bv).unwrap();
        let right = t2.matmul(av, ib).unwrap();

        let mut t3 = Tape::new();
        let (av, bv) = (t3.constant(&a), t3.constant(&b));
        let plain = t3.matmul(av, bv).unwrap();

        assert_eq!(t1.value(left), t3.value(plain));
        assert_eq!(t2.value(right), t3.value(plain));
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.constant_values(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant_values(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(
            tape.matmul(a, b),
            Err(crate::error::Error::Dimension(_))
        ));
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let x = tape
            .constant_values(vec![3], vec![-1.0, 0.0, 2.0])
            .unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);

        let z = tape.constant_values(vec![1], vec![0.0]).unwrap();
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s), &[0.5]);

        let p = tape.constant_values(vec![2], vec![0.3, 4.2]).unwrap();
        let logged = tape.log(p).unwrap();
        let back = tape.exp(logged).unwrap();
        for (a, b) in tape.value(back).iter().zip(&[0.3, 4.2]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn log_of_nonpositive_is_domain_error_when_checked() {
        let mut tape = Tape::new();
        let x = tape.constant_values(vec![2], vec![1.0, -0.5]).unwrap();
        assert!(matches!(tape.log(x), Err(crate::error::Error::Numeric(_))));

        let mut loose = Tape::unchecked();
        let x = loose.constant_values(vec![2], vec![1.0, -0.5]).unwrap();
        let l = loose.log(x).unwrap();
        assert!(loose.value(l)[1].is_nan());
    }

    #[test]
    fn checked_mode_rejects_overflow() {
        let mut tape = Tape::new();
        let x = tape.constant_values(vec![1], vec![1e308]).unwrap();
        let doubled = tape.add(x, x);
        assert!(matches!(doubled, Err(crate::error::Error::Numeric(_))));
    }

    #[test]
    fn backward_of_sum_of_matmul_broadcasts_x() {
        // loss = sum(W . x): dW[i][j] = x[j] for every row i
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
        );
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let x = tape
            .constant_values(vec![3, 1], vec![2.0, -1.0, 0.5])
            .unwrap();
        let prod = tape.matmul(wv, x).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let grad = store.get(w).grad.as_ref().unwrap();
        assert_eq!(grad, &vec![2.0, -1.0, 0.5, 2.0, -1.0, 0.5]);
    }

    #[test]
    fn constant_loss_leaves_zero_grad() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let _wv = tape.param(&store, w);
        let c = tape.constant_values(vec![1], vec![3.0]).unwrap();
        let loss = tape.mul_scalar(c, 2.0).unwrap();
        tape.backward(loss, &mut store).unwrap();
        // w never participates: its grad buffer is untouched
        assert!(store.get(w).grad.is_none());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let doubled = tape.mul_scalar(wv, 2.0).unwrap();
        assert!(matches!(
            tape.backward(doubled, &mut store),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn backward_consumes_the_tape() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![1.0]));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = tape.sum(wv).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert!(tape.is_empty());
        assert!(tape.backward(loss, &mut store).is_err());
    }

    #[test]
    fn concat_slice_permute_roundtrip_with_grads() {
        let mut store = ParamStore::new();
        let p = store.add(
            "p",
            Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let left = tape.slice_cols(v, 0, 2).unwrap();
        let right = tape.slice_cols(v, 2, 1).unwrap();
        let joined = tape.concat_cols(&[right, left]).unwrap();
        assert_eq!(tape.value(joined), &[3.0, 1.0, 2.0, 6.0, 4.0, 5.0]);
        let back = tape.permute_cols(joined, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        // weight each column differently so a permutation bug shows up in grads
        let weights = tape
            .constant_values(vec![3], vec![1.0, 10.0, 100.0])
            .unwrap();
        let weighted = tape.mul(back, weights).unwrap();
        let loss = tape.sum(weighted).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let g = store.get(p).grad.as_ref().unwrap();
        assert_eq!(g, &vec![1.0, 10.0, 100.0, 1.0, 10.0, 100.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.constant_values(vec![4, 2], vec![0.0; 8]).unwrap();
        let loss = tape.cross_entropy(logits, &[0, 1, 0, 1]).unwrap();
        assert!((tape.value(loss)[0] - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::new();
        let logits = tape.constant_values(vec![1, 2], vec![0.0; 2]).unwrap();
        assert!(tape.cross_entropy(logits, &[2]).is_err());
    }
}

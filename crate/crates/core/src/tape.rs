//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! A [`Tape`] records every forward op in execution order, which is a
//! topological order of the computation DAG by construction. [`Tape::backward`]
//! sweeps the records once in reverse and accumulates gradients into the
//! `requires_grad` leaves. Tapes are rebuilt per forward pass, which keeps the
//! optimization loops downstream (trigger reversal, query tuning) simple.
//!
//! Accumulation is in f32 like the rest of the core; reductions that feed
//! statistics (softmax, losses) stabilize internally via max-subtraction or
//! f64 partial sums.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    /// `[B, D] + [D]`, the one broadcast the core allows besides channel bias.
    AddRow { x: NodeId, bias: NodeId, rows: usize, cols: usize },
    /// `[B, C, H, W] + [C]`.
    AddChan { x: NodeId, bias: NodeId, chans: usize, chan_len: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Affine { x: NodeId, scale: f32 },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Conv2d { x: NodeId, w: NodeId, geom: ConvGeom },
    AvgPool2 { x: NodeId, k: usize, dims: [usize; 4] },
    Reshape { x: NodeId },
    RepeatRows { v: NodeId, rows: usize },
    SumAll { x: NodeId },
    MeanCols { x: NodeId, rows: usize, row_len: usize, cols: Vec<usize> },
    Stack { parts: Vec<NodeId>, part_len: usize },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f32> },
    BceWithLogits { z: NodeId, targets: Vec<f32> },
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Output extent `(H + 2p − k)/s + 1`, rejecting non-integral results.
    fn out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
        let padded = extent + 2 * pad;
        if padded < k {
            return Err(Error::Config(format!(
                "kernel {k} exceeds padded extent {padded}"
            )));
        }
        let span = padded - k;
        if span % stride != 0 {
            return Err(Error::Config(format!(
                "non-integral conv output: ({extent} + 2*{pad} - {k}) not divisible by stride {stride}"
            )));
        }
        Ok(span / stride + 1)
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run autodiff tape. One tape per forward pass, one worker at a time.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Register an input tensor. Gradients accumulate into it on backward
    /// only if the tensor was marked `with_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated into a leaf; `None` for detached leaves and
    /// before any backward call.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].value.grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn data(&self, id: NodeId) -> &[f32] {
        self.nodes[id.0].value.data()
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!("matmul needs 2-d operands, got {sa:?} x {sb:?}")));
        }
        if sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b, m, k, n }))
    }

    /// Row-broadcast bias add: `[B, D] + [D]`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::Shape(format!("add_row expects [B,D] + [D], got {sx:?} + {sb:?}")));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let bd = self.data(bias).to_vec();
        let mut out = self.data(x).to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += bd[c];
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(value, Op::AddRow { x, bias, rows, cols }))
    }

    /// Channel-broadcast bias add: `[B, C, H, W] + [C]`.
    pub fn add_chan(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 4 || sb != [sx[1]] {
            return Err(Error::Shape(format!(
                "add_chan expects [B,C,H,W] + [C], got {sx:?} + {sb:?}"
            )));
        }
        let chans = sx[1];
        let chan_len = sx[2] * sx[3];
        let bd = self.data(bias).to_vec();
        let mut out = self.data(x).to_vec();
        let batch = sx[0];
        for b in 0..batch {
            for c in 0..chans {
                let base = (b * chans + c) * chan_len;
                for i in 0..chan_len {
                    out[base + i] += bd[c];
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(value, Op::AddChan { x, bias, chans, chan_len }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} vs {:?}; explicit reshape required",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, op))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f32, shift: f32) -> NodeId {
        let out: Vec<f32> = self.data(x).iter().map(|&v| scale * v + shift).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("affine preserves shape");
        self.push(value, Op::Affine { x, scale })
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f32> = self.data(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("relu preserves shape");
        self.push(value, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f32> = self.data(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("sigmoid preserves shape");
        self.push(value, Op::Sigmoid { x })
    }

    /// Cross-correlation of `x: [B, C_in, H, W]` with a kernel bank
    /// `w: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::Shape(format!(
                "conv2d expects [B,C,H,W] x [Co,Ci,k,k], got {sx:?} x {sw:?}"
            )));
        }
        if sx[1] != sw[1] {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {} vs kernel {}",
                sx[1], sw[1]
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            c_out: sw[0],
            h: sx[2],
            w: sx[3],
            k: sw[2],
            stride,
            pad,
            h_out: ConvGeom::out_extent(sx[2], sw[2], stride, pad)?,
            w_out: ConvGeom::out_extent(sx[3], sw[2], stride, pad)?,
        };
        let out = conv2d_raw(self.data(x), self.data(w), &geom);
        let value = Tensor::new(vec![geom.batch, geom.c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom }))
    }

    /// Non-overlapping `k x k` average pooling over `[B, C, H, W]`.
    pub fn avg_pool2(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::Shape(format!("avg_pool2 expects [B,C,H,W], got {sx:?}")));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if h % k != 0 || w % k != 0 {
            return Err(Error::Config(format!("pool size {k} does not divide {h}x{w}")));
        }
        let (ho, wo) = (h / k, w / k);
        let xd = self.data(x);
        let mut out = vec![0.0f32; b * c * ho * wo];
        let inv = 1.0 / (k * k) as f32;
        for bi in 0..b {
            for ci in 0..c {
                let in_base = (bi * c + ci) * h * w;
                let out_base = (bi * c + ci) * ho * wo;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0f32;
                        for dh in 0..k {
                            for dw in 0..k {
                                acc += xd[in_base + (oh * k + dh) * w + (ow * k + dw)];
                            }
                        }
                        out[out_base + oh * wo + ow] = acc * inv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.push(value, Op::AvgPool2 { x, k, dims: [b, c, h, w] }))
    }

    /// Explicit reshape; the only shape coercion the tape performs.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = Tensor::new(shape, self.data(x).to_vec())?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Tile a flat tensor of length D into `[rows, D]`; backward sums rows.
    pub fn repeat_rows(&mut self, v: NodeId, rows: usize) -> NodeId {
        let d = self.data(v).len();
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            out.extend_from_slice(self.data(v));
        }
        let value = Tensor::new(vec![rows, d], out).expect("repeat_rows shape");
        self.push(value, Op::RepeatRows { v, rows })
    }

    /// Sum of all elements, as a `[1]` scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f32 = self.data(x).iter().sum();
        let value = Tensor::scalar(s);
        self.push(value, Op::SumAll { x })
    }

    /// Mean over the batch rows of the mean over the selected flat columns,
    /// as a `[1]` scalar node. Rows are the leading extent.
    pub fn mean_cols(&mut self, x: NodeId, cols: Vec<usize>) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || cols.is_empty() {
            return Err(Error::Contract("mean_cols needs rows and columns".into()));
        }
        let rows = sx[0];
        let row_len: usize = sx[1..].iter().product::<usize>().max(1);
        if let Some(&bad) = cols.iter().find(|&&c| c >= row_len) {
            return Err(Error::Index(format!("column {bad} out of row length {row_len}")));
        }
        let xd = self.data(x);
        let mut acc = 0.0f64;
        for r in 0..rows {
            for &c in &cols {
                acc += xd[r * row_len + c] as f64;
            }
        }
        let mean = (acc / (rows * cols.len()) as f64) as f32;
        let value = Tensor::scalar(mean);
        Ok(self.push(value, Op::MeanCols { x, rows, row_len, cols }))
    }

    /// Stack equally-shaped nodes as the rows of a `[P, len]` tensor.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("stack of zero parts".into()));
        }
        let part_len = self.data(parts[0]).len();
        let mut out = Vec::with_capacity(parts.len() * part_len);
        for &p in parts {
            if self.data(p).len() != part_len {
                return Err(Error::Shape("stack parts must have equal length".into()));
            }
            out.extend_from_slice(self.data(p));
        }
        let value = Tensor::new(vec![parts.len(), part_len], out)?;
        Ok(self.push(value, Op::Stack { parts: parts.to_vec(), part_len }))
    }

    /// Mean negative log-softmax at the label, stabilized by max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("softmax_cross_entropy expects [B,C], got {s:?}")));
        }
        let (batch, classes) = (s[0], s[1]);
        if labels.len() != batch {
            return Err(Error::Shape(format!(
                "{} labels for batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} out of {classes} classes")));
        }
        let xd = self.data(logits);
        let mut probs = vec![0.0f32; batch * classes];
        let mut loss = 0.0f64;
        for b in 0..batch {
            let row = &xd[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for &v in row {
                denom += ((v - max) as f64).exp();
            }
            for (c, &v) in row.iter().enumerate() {
                probs[b * classes + c] = (((v - max) as f64).exp() / denom) as f32;
            }
            loss += denom.ln() - (row[labels[b]] - max) as f64;
        }
        let value = Tensor::scalar((loss / batch as f64) as f32);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Mean binary cross-entropy over logits `z` (any shape, flattened)
    /// against targets in `{0, 1}`.
    pub fn bce_with_logits(&mut self, z: NodeId, targets: &[f32]) -> Result<NodeId> {
        let n = self.data(z).len();
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} logits", targets.len())));
        }
        let zd = self.data(z);
        let mut loss = 0.0f64;
        for (&zi, &ti) in zd.iter().zip(targets) {
            let z64 = zi as f64;
            let t64 = ti as f64;
            // max(z,0) - z*t + ln(1 + exp(-|z|))
            loss += z64.max(0.0) - z64 * t64 + (-z64.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar((loss / n as f64) as f32);
        Ok(self.push(value, Op::BceWithLogits { z, targets: targets.to_vec() }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populate gradients of every `requires_grad` leaf with d(loss)/d(leaf).
    /// Repeated calls without `zero_grad` accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    let leaf = &mut self.nodes[i].value;
                    if leaf.requires_grad() {
                        leaf.accumulate_grad(&g);
                    }
                }
                op => {
                    let op = op.clone();
                    self.propagate(&op, i, &g, &mut adj);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out_idx: usize, g: &[f32], adj: &mut [Option<Vec<f32>>]) {
        match op {
            Op::Leaf => unreachable!("leaves handled by backward"),
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let ad = self.data(*a);
                let bd = self.data(*b);
                // dA = g . B^T
                let mut da = vec![0.0f32; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += gv * bd[p * n + j];
                        }
                    }
                }
                // dB = A^T . g
                let mut db = vec![0.0f32; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                accumulate(adj, a.0, &da);
                accumulate(adj, b.0, &db);
            }
            Op::AddRow { x, bias, rows, cols } => {
                accumulate(adj, x.0, g);
                let mut db = vec![0.0f32; *cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        db[c] += g[r * cols + c];
                    }
                }
                accumulate(adj, bias.0, &db);
            }
            Op::AddChan { x, bias, chans, chan_len } => {
                accumulate(adj, x.0, g);
                let mut db = vec![0.0f32; *chans];
                let batch = g.len() / (chans * chan_len);
                for b in 0..batch {
                    for c in 0..*chans {
                        let base = (b * chans + c) * chan_len;
                        for i in 0..*chan_len {
                            db[c] += g[base + i];
                        }
                    }
                }
                accumulate(adj, bias.0, &db);
            }
            Op::Add { a, b } => {
                accumulate(adj, a.0, g);
                accumulate(adj, b.0, g);
            }
            Op::Sub { a, b } => {
                accumulate(adj, a.0, g);
                let neg: Vec<f32> = g.iter().map(|&v| -v).collect();
                accumulate(adj, b.0, &neg);
            }
            Op::Mul { a, b } => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                let da: Vec<f32> = g.iter().zip(bd).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<f32> = g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect();
                accumulate(adj, a.0, &da);
                accumulate(adj, b.0, &db);
            }
            Op::Affine { x, scale } => {
                let dx: Vec<f32> = g.iter().map(|&v| v * scale).collect();
                accumulate(adj, x.0, &dx);
            }
            Op::Relu { x } => {
                // relu'(0) == 0 by convention
                let xd = self.data(*x);
                let dx: Vec<f32> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(adj, x.0, &dx);
            }
            Op::Sigmoid { x } => {
                let out = self.nodes[out_idx].value.data();
                let dx: Vec<f32> = g.iter().zip(out).map(|(&gv, &s)| gv * s * (1.0 - s)).collect();
                accumulate(adj, x.0, &dx);
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = conv2d_backward_raw(self.data(*x), self.data(*w), g, geom);
                accumulate(adj, x.0, &dx);
                accumulate(adj, w.0, &dw);
            }
            Op::AvgPool2 { x, k, dims } => {
                let [b, c, h, w] = *dims;
                let (ho, wo) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f32;
                let mut dx = vec![0.0f32; b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        let in_base = (bi * c + ci) * h * w;
                        let out_base = (bi * c + ci) * ho * wo;
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let gv = g[out_base + oh * wo + ow] * inv;
                                for dh in 0..*k {
                                    for dw in 0..*k {
                                        dx[in_base + (oh * k + dh) * w + (ow * k + dw)] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(adj, x.0, &dx);
            }
            Op::Reshape { x } => accumulate(adj, x.0, g),
            Op::RepeatRows { v, rows } => {
                let d = g.len() / rows;
                let mut dv = vec![0.0f32; d];
                for r in 0..*rows {
                    for i in 0..d {
                        dv[i] += g[r * d + i];
                    }
                }
                accumulate(adj, v.0, &dv);
            }
            Op::SumAll { x } => {
                let dx = vec![g[0]; self.data(*x).len()];
                accumulate(adj, x.0, &dx);
            }
            Op::MeanCols { x, rows, row_len, cols } => {
                let scale = g[0] / (rows * cols.len()) as f32;
                let mut dx = vec![0.0f32; rows * row_len];
                for r in 0..*rows {
                    for &c in cols {
                        dx[r * row_len + c] += scale;
                    }
                }
                accumulate(adj, x.0, &dx);
            }
            Op::Stack { parts, part_len } => {
                for (p, &part) in parts.iter().enumerate() {
                    accumulate(adj, part.0, &g[p * part_len..(p + 1) * part_len]);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / batch as f32;
                let mut dl = vec![0.0f32; probs.len()];
                for b in 0..batch {
                    for c in 0..classes {
                        let indicator = if c == labels[b] { 1.0 } else { 0.0 };
                        dl[b * classes + c] = scale * (probs[b * classes + c] - indicator);
                    }
                }
                accumulate(adj, logits.0, &dl);
            }
            Op::BceWithLogits { z, targets } => {
                let zd = self.data(*z);
                let scale = g[0] / zd.len() as f32;
                let dz: Vec<f32> = zd
                    .iter()
                    .zip(targets)
                    .map(|(&zi, &ti)| scale * (sigmoid_scalar(zi) - ti))
                    .collect();
                accumulate(adj, z.0, &dz);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f32>>], idx: usize, delta: &[f32]) {
    match &mut adj[idx] {
        Some(buf) => {
            for (a, d) in buf.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => adj[idx] = Some(delta.to_vec()),
    }
}

fn sigmoid_scalar(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn conv2d_raw(x: &[f32], w: &[f32], geom: &ConvGeom) -> Vec<f32> {
    let ConvGeom { batch, c_in, c_out, h, w: wid, k, stride, pad, h_out, w_out } = *geom;
    let mut out = vec![0.0f32; batch * c_out * h_out * w_out];
    for b in 0..batch {
        for co in 0..c_out {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut acc = 0.0f32;
                    for ci in 0..c_in {
                        let x_base = (b * c_in + ci) * h * wid;
                        let w_base = (co * c_in + ci) * k * k;
                        for kh in 0..k {
                            let ih = (oh * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let iw = (ow * stride + kw) as isize - pad as isize;
                                if iw < 0 || iw >= wid as isize {
                                    continue;
                                }
                                acc += x[x_base + ih as usize * wid + iw as usize]
                                    * w[w_base + kh * k + kw];
                            }
                        }
                    }
                    out[((b * c_out + co) * h_out + oh) * w_out + ow] = acc;
                }
            }
        }
    }
    out
}

fn conv2d_backward_raw(x: &[f32], w: &[f32], g: &[f32], geom: &ConvGeom) -> (Vec<f32>, Vec<f32>) {
    let ConvGeom { batch, c_in, c_out, h, w: wid, k, stride, pad, h_out, w_out } = *geom;
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; w.len()];
    for b in 0..batch {
        for co in 0..c_out {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let gv = g[((b * c_out + co) * h_out + oh) * w_out + ow];
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..c_in {
                        let x_base = (b * c_in + ci) * h * wid;
                        let w_base = (co * c_in + ci) * k * k;
                        for kh in 0..k {
                            let ih = (oh * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let iw = (ow * stride + kw) as isize - pad as isize;
                                if iw < 0 || iw >= wid as isize {
                                    continue;
                                }
                                let xi = x_base + ih as usize * wid + iw as usize;
                                let wi = w_base + kh * k + kw;
                                dx[xi] += gv * w[wi];
                                dw[wi] += gv * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Row-wise softmax of `[B, C]` logits, stabilized by max-subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    assert_eq!(s.len(), 2, "softmax_rows expects [B, C]");
    let (batch, classes) = (s[0], s[1]);
    let xd = logits.data();
    let mut out = vec![0.0f32; xd.len()];
    for b in 0..batch {
        let row = &xd[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v - max) as f64).exp();
        }
        for (c, &v) in row.iter().enumerate() {
            out[b * classes + c] = (((v - max) as f64).exp() / denom) as f32;
        }
    }
    Tensor::new(vec![batch, classes], out).expect("softmax shape")
}

/// Index of the largest element; first occurrence wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Central-difference gradient check: builds `f` on a fresh tape, compares
/// `backward` against `(f(x+h) - f(x-h)) / 2h` elementwise, and returns the
/// largest relative error, normalized by `max(|analytic|, |numeric|, 1)`.
pub fn finite_diff_gradcheck<F>(f: F, x: &Tensor, h: f32) -> f64
where
    F: Fn(&mut Tape, NodeId) -> NodeId,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone().with_grad());
    let loss = f(&mut tape, xid);
    tape.backward(loss).expect("gradcheck function must produce a scalar");
    let analytic = tape.grad(xid).expect("leaf was marked requires_grad").to_vec();

    let eval = |probe: &Tensor| -> f64 {
        let mut t = Tape::new();
        let id = t.leaf(probe.clone());
        let out = f(&mut t, id);
        t.value(out).data()[0] as f64
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
        let a = analytic[i] as f64;
        let denom = a.abs().max(numeric.abs()).max(1.0);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    max_rel
}

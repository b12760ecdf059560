//! Tape-recorded reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and enough saved state
//! to run its vector-Jacobian product. `Graph::backward` walks the tape in
//! reverse and sums contributions into per-node gradient buffers, so a node
//! consumed by several ops receives the total of their gradients.

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulNt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    ScaleByExp {
        a: Var,
        s: Var,
        factor: f64,
        clamped: bool,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Reshape {
        a: Var,
    },
    ConcatRows {
        a: Var,
        b: Var,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedMeanPool {
        x: Var,
        mask: Vec<bool>,
        len: usize,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    LogSumExpRows {
        x: Var,
    },
    Diagonal {
        x: Var,
        cols: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Attention {
        qkv: Var,
        batch: usize,
        len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Patchify {
        x: Var,
        geom: PatchGeometry,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Layout of an image batch `[B, C, H, W]` cut into `P × P` patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchGeometry {
    pub fn patches_per_image(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Source offset in the `[B, C, H, W]` buffer for each output slot of
    /// the `[(B·N), P·P·C]` patch matrix. Patches are raster-ordered, and
    /// features within a patch run over `(channel, row, col)`.
    fn gather_index(&self) -> Vec<usize> {
        let PatchGeometry {
            batch,
            channels,
            height,
            width,
            patch,
        } = *self;
        let (gh, gw) = (height / patch, width / patch);
        let mut idx = Vec::with_capacity(batch * channels * height * width);
        for b in 0..batch {
            for py in 0..gh {
                for px in 0..gw {
                    for c in 0..channels {
                        for y in 0..patch {
                            for x in 0..patch {
                                let row = py * patch + y;
                                let col = px * patch + x;
                                idx.push(((b * channels + c) * height + row) * width + col);
                            }
                        }
                    }
                }
            }
        }
        idx
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Sums the gradient of `v` into `t.grad`. Unreached nodes contribute zeros.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.numel()]),
        }
    }
}

/// A recording of forward computations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
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

    /// Differentiable leaf (a parameter or a checked input).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Leaf honouring the tensor's own `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), t.requires_grad())
    }

    fn leaf(&mut self, t: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_nt")?;
        let (n, k2) = dims2(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m}x{k}] · [{n}x{k2}]ᵀ")));
        }
        let out = gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul_nt", t, Op::MatMulNt { a, b, m, k, n }, &[a, b])
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push("add", t, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push("sub", t, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push("mul", t, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * factor).collect())?;
        self.push("scale", t, Op::Scale { a, factor }, &[a])
    }

    /// `a · exp(min(s, cap))` for a single-element `s`. The gradient with
    /// respect to `s` is zero while the cap is active.
    pub fn scale_by_exp(&mut self, a: Var, s: Var, cap: f64) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::shape(
                "scale_by_exp",
                format!("scale must be scalar, got {:?}", sv.shape()),
            ));
        }
        let raw = sv.data()[0];
        let clamped = raw > cap;
        let factor = raw.min(cap).exp();
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * factor).collect())?;
        self.push("scale_by_exp", t, Op::ScaleByExp { a, s, factor, clamped }, &[a, s])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = dims2(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let t = Tensor::new(vec![cols, rows], out)?;
        self.push("transpose", t, Op::Transpose { a, rows, cols }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", t.with_requires_grad(false), Op::Reshape { a }, &[a])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = dims2(self.value(a), "concat_rows")?;
        let (n, d2) = dims2(self.value(b), "concat_rows")?;
        if d != d2 {
            return Err(Error::shape("concat_rows", format!("widths {d} and {d2}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::new(vec![m + n, d], data)?;
        self.push("concat_rows", t, Op::ConcatRows { a, b }, &[a, b])
    }

    /// Row lookup into `table: [V×d]`, e.g. a token embedding.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = dims2(self.value(table), "gather_rows")?;
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid("ids", format!("id {bad} outside table of {vocab} rows")));
        }
        if ids.is_empty() {
            return Err(Error::invalid("ids", "empty lookup"));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "gather_rows",
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Averages rows of `x: [(B·L)×d]` over positions where `mask` (B×L) is true.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool], len: usize) -> Result<Var> {
        let (rows, d) = dims2(self.value(x), "masked_mean_pool")?;
        if len == 0 || rows % len != 0 || mask.len() != rows {
            return Err(Error::shape(
                "masked_mean_pool",
                format!("{rows} rows, mask of {}, sequence length {len}", mask.len()),
            ));
        }
        let batch = rows / len;
        let src = self.value(x).data();
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            let count = mask[b * len..(b + 1) * len].iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::invalid("mask", format!("sequence {b} has no real tokens")));
            }
            let o = &mut out[b * d..(b + 1) * d];
            for l in 0..len {
                if mask[b * len + l] {
                    let r = &src[(b * len + l) * d..(b * len + l + 1) * d];
                    o.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                }
            }
            let inv = 1.0 / count as f64;
            o.iter_mut().for_each(|a| *a *= inv);
        }
        let t = Tensor::new(vec![batch, d], out)?;
        self.push(
            "masked_mean_pool",
            t,
            Op::MaskedMeanPool {
                x,
                mask: mask.to_vec(),
                len,
            },
            &[x],
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = dims2(self.value(x), "l2_normalize_rows")?;
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= 1e-12) {
                return Err(Error::DegenerateRow { row: r, norm });
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let t = Tensor::new(vec![rows, d], out)?;
        self.push("l2_normalize_rows", t, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Per-row `max + ln Σ exp(x − max)`; output shape `[rows]`.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !tx.all_finite() {
            return Err(Error::NonFinite { op: "log_sum_exp_rows" });
        }
        let (rows, n) = dims2(tx, "log_sum_exp_rows")?;
        let out = (0..rows).map(|r| log_sum_exp(&tx.data()[r * n..(r + 1) * n])).collect();
        let t = Tensor::new(vec![rows], out)?;
        self.push("log_sum_exp_rows", t, Op::LogSumExpRows { x }, &[x])
    }

    /// Entries `x[r][r]` for `r < rows` of a `[rows×cols]` matrix, `cols ≥ rows`.
    pub fn diagonal(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = dims2(self.value(x), "diagonal")?;
        if cols < rows {
            return Err(Error::shape(
                "diagonal",
                format!("[{rows}x{cols}] has fewer columns than rows"),
            ));
        }
        let src = self.value(x).data();
        let out = (0..rows).map(|r| src[r * cols + r]).collect();
        let t = Tensor::new(vec![rows], out)?;
        self.push("diagonal", t, Op::Diagonal { x, cols }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// Multi-head scaled dot-product attention over a packed projection.
    ///
    /// `qkv` is `[(B·L) × 3d]` with query, key and value blocks side by side.
    /// `mask[b·L + j] == false` removes key `j` of sequence `b`. With `slopes`,
    /// head `h` adds `−slopes[h]·|i − j|` to its logits. Returns `[(B·L) × d]`.
    pub fn attention(
        &mut self,
        qkv: Var,
        batch: usize,
        len: usize,
        heads: usize,
        mask: Option<&[bool]>,
        slopes: Option<&[f64]>,
    ) -> Result<Var> {
        let (rows, width) = dims2(self.value(qkv), "attention")?;
        if rows != batch * len || width % 3 != 0 || heads == 0 || (width / 3) % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("qkv [{rows}x{width}] for batch {batch}, len {len}, heads {heads}"),
            ));
        }
        if mask.is_some_and(|m| m.len() != rows) || slopes.is_some_and(|s| s.len() != heads) {
            return Err(Error::shape("attention", "mask or slope length mismatch"));
        }
        let d = width / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * len * len];
        let mut logits = vec![0.0; len];
        for b in 0..batch {
            let keep = |j: usize| mask.is_none_or(|m| m[b * len + j]);
            if !(0..len).any(keep) {
                return Err(Error::EmptyAttentionRow { row: b });
            }
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..len {
                    let q = &src[(b * len + i) * width + qo..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        logits[j] = if keep(j) {
                            let k = &src[(b * len + j) * width + ko..][..dh];
                            let mut s = q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() * scale;
                            if let Some(sl) = slopes {
                                s -= sl[h] * i.abs_diff(j) as f64;
                            }
                            max = max.max(s);
                            s
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    let p = &mut probs[((b * heads + h) * len + i) * len..][..len];
                    let mut total = 0.0;
                    for j in 0..len {
                        p[j] = (logits[j] - max).exp();
                        total += p[j];
                    }
                    let o = &mut out[(b * len + i) * d + qo..][..dh];
                    for j in 0..len {
                        p[j] /= total;
                        if p[j] != 0.0 {
                            let v = &src[(b * len + j) * width + vo..][..dh];
                            o.iter_mut().zip(v).for_each(|(a, x)| *a += p[j] * x);
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        self.push(
            "attention",
            t,
            Op::Attention {
                qkv,
                batch,
                len,
                heads,
                probs,
            },
            &[qkv],
        )
    }

    /// Cuts `[B, C, H, W]` images into a `[(B·N) × (P·P·C)]` patch matrix.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let geom = match *self.value(x).shape() {
            [batch, channels, height, width] => PatchGeometry {
                batch,
                channels,
                height,
                width,
                patch,
            },
            ref s => return Err(Error::shape("patchify", format!("expected [B,C,H,W], got {s:?}"))),
        };
        if patch == 0 || geom.height % patch != 0 || geom.width % patch != 0 {
            return Err(Error::invalid(
                "patch_size",
                format!(
                    "{}x{} image is not divisible into {patch}x{patch} patches",
                    geom.height, geom.width
                ),
            ));
        }
        let src = self.value(x).data();
        let data = geom.gather_index().into_iter().map(|i| src[i]).collect();
        let t = Tensor::new(vec![geom.batch * geom.patches_per_image(), geom.patch_dim()], data)?;
        self.push("patchify", t, Op::Patchify { x, geom }, &[x])
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    send(a, gemm_nt(dy, val(b), m, n, k));
                }
                if wants(b) {
                    send(b, gemm_tn(val(a), dy, m, k, n));
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if wants(a) {
                    send(a, gemm(dy, val(b), m, n, k));
                }
                if wants(b) {
                    send(b, gemm_tn(dy, val(a), m, n, k));
                }
            }
            &Op::Add { a, b } => {
                send(a, dy.to_vec());
                send(b, dy.to_vec());
            }
            &Op::Sub { a, b } => {
                send(a, dy.to_vec());
                send(b, dy.iter().map(|g| -g).collect());
            }
            &Op::Mul { a, b } => {
                send(a, dy.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                send(b, dy.iter().zip(val(a)).map(|(g, x)| g * x).collect());
            }
            &Op::Scale { a, factor } => send(a, dy.iter().map(|g| g * factor).collect()),
            &Op::ScaleByExp { a, s, factor, clamped } => {
                send(a, dy.iter().map(|g| g * factor).collect());
                let ds = if clamped {
                    0.0
                } else {
                    dy.iter().zip(node.value.data()).map(|(g, y)| g * y).sum()
                };
                send(s, vec![ds]);
            }
            &Op::Transpose { a, rows, cols } => {
                let mut g = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        g[i * cols + j] = dy[j * rows + i];
                    }
                }
                send(a, g);
            }
            &Op::Reshape { a } => send(a, dy.to_vec()),
            &Op::ConcatRows { a, b } => {
                let split = self.nodes[a.0].value.numel();
                send(a, dy[..split].to_vec());
                send(b, dy[split..].to_vec());
            }
            Op::GatherRows { table, ids } => {
                let t = &self.nodes[table.0].value;
                let d = t.cols();
                let mut g = vec![0.0; t.numel()];
                for (r, &i) in ids.iter().enumerate() {
                    g[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&dy[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                send(*table, g);
            }
            Op::MaskedMeanPool { x, mask, len } => {
                let d = node.value.cols();
                let batch = mask.len() / len;
                let mut g = vec![0.0; mask.len() * d];
                for b in 0..batch {
                    let seq = &mask[b * len..(b + 1) * len];
                    let inv = 1.0 / seq.iter().filter(|&&m| m).count() as f64;
                    for (l, _) in seq.iter().enumerate().filter(|(_, &m)| m) {
                        g[(b * len + l) * d..][..d]
                            .iter_mut()
                            .zip(&dy[b * d..(b + 1) * d])
                            .for_each(|(a, v)| *a = v * inv);
                    }
                }
                send(*x, g);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let d = node.value.cols();
                let mut g = vec![0.0; y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &dy[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        g[r * d + c] = (gr[c] - yr[c] * dot) / norm;
                    }
                }
                send(*x, g);
            }
            &Op::LogSumExpRows { x } => {
                let src = val(x);
                let n = self.nodes[x.0].value.cols();
                let lse = node.value.data();
                let g = src
                    .iter()
                    .enumerate()
                    .map(|(i, v)| dy[i / n] * (v - lse[i / n]).exp())
                    .collect();
                send(x, g);
            }
            &Op::Diagonal { x, cols } => {
                let mut g = vec![0.0; self.nodes[x.0].value.numel()];
                for (r, gv) in dy.iter().enumerate() {
                    g[r * cols + r] = *gv;
                }
                send(x, g);
            }
            &Op::Sum { x } => send(x, vec![dy[0]; self.nodes[x.0].value.numel()]),
            &Op::Mean { x } => {
                let n = self.nodes[x.0].value.numel();
                send(x, vec![dy[0] / n as f64; n]);
            }
            Op::Attention {
                qkv,
                batch,
                len,
                heads,
                probs,
            } => {
                send(*qkv, attention_backward(val(*qkv), dy, probs, *batch, *len, *heads));
            }
            Op::Patchify { x, geom } => {
                let mut g = vec![0.0; self.nodes[x.0].value.numel()];
                for (slot, src) in geom.gather_index().into_iter().enumerate() {
                    g[src] += dy[slot];
                }
                send(*x, g);
            }
        }
    }
}

/// `max + ln Σ exp(x − max)` over a slice.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn attention_backward(qkv: &[f64], dout: &[f64], probs: &[f64], batch: usize, len: usize, heads: usize) -> Vec<f64> {
    let width = qkv.len() / (batch * len);
    let d = width / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut g = vec![0.0; qkv.len()];
    let mut dp = vec![0.0; len];
    for b in 0..batch {
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for i in 0..len {
                let p = &probs[((b * heads + h) * len + i) * len..][..len];
                let go = &dout[(b * len + i) * d + qo..][..dh];
                let mut weighted = 0.0;
                for j in 0..len {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let v = &qkv[(b * len + j) * width + vo..][..dh];
                    dp[j] = go.iter().zip(v).map(|(x, y)| x * y).sum();
                    weighted += p[j] * dp[j];
                    let gv = &mut g[(b * len + j) * width + vo..][..dh];
                    gv.iter_mut().zip(go).for_each(|(a, o)| *a += p[j] * o);
                }
                for j in 0..len {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let (qi, kj) = ((b * len + i) * width, (b * len + j) * width);
                    for c in 0..dh {
                        let kv = qkv[kj + ko + c];
                        let qv = qkv[qi + qo + c];
                        g[qi + qo + c] += ds * kv;
                        g[kj + ko + c] += ds * qv;
                    }
                }
            }
        }
    }
    g
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its backward rule. Nodes only ever reference earlier nodes,
//! so reverse insertion order is a valid topological order. Gradients
//! accumulate: a value consumed twice receives the sum of both contributions.
//!
//! Each matmul also bumps a multiply-accumulate counter attributed to the
//! tape's current [`Component`], which the FLOP accountant reads back.

use std::collections::BTreeMap;

use crate::error::{HiveError, Result};
use crate::tensor::{Precision, Tensor};

/// Sentinel target for positions excluded from the loss.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Attribution bucket for instrumented multiply-accumulates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    /// Patch embedding of the vision encoder.
    Embed,
    /// Vision encoder transformer blocks.
    Encoder,
    /// Per-tap projectors (and the concat-mode connector).
    Projector,
    /// LLM self-attention score products.
    Qk,
    /// LLM self-attention weighted value sums.
    Av,
    /// LLM self-attention q/k/v/out projections.
    Proj,
    /// LLM feed-forward layers.
    Mlp,
    /// Every matmul inside an injected cross-attention block.
    Xattn,
    /// LM output head.
    Head,
    /// Linear classifier probe.
    Classifier,
}

impl Component {
    pub const ALL: [Component; 10] = [
        Component::Embed,
        Component::Encoder,
        Component::Projector,
        Component::Qk,
        Component::Av,
        Component::Proj,
        Component::Mlp,
        Component::Xattn,
        Component::Head,
        Component::Classifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Embed => "embed",
            Component::Encoder => "encoder",
            Component::Projector => "projector",
            Component::Qk => "qk",
            Component::Av => "av",
            Component::Proj => "proj",
            Component::Mlp => "mlp",
            Component::Xattn => "xattn",
            Component::Head => "head",
            Component::Classifier => "classifier",
        }
    }

    /// Components computed by the language model on its own token stream.
    pub fn is_llm_internal(self) -> bool {
        matches!(
            self,
            Component::Qk | Component::Av | Component::Proj | Component::Mlp | Component::Head
        )
    }
}

enum Op {
    Leaf,
    Detach,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulT {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
        cols: usize,
    },
    Scale {
        x: Var,
        c: f64,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        d: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
        count: usize,
        vocab: usize,
    },
    SliceCols {
        x: Var,
        cols: usize,
        start: usize,
        width: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
    },
    SliceRows {
        x: Var,
        cols: usize,
        start: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        cols: usize,
    },
    Sum {
        x: Var,
    },
    MeanRows {
        x: Var,
        rows: usize,
        cols: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    precision: Precision,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    component: Component,
    macs: BTreeMap<Component, u64>,
}

// ── matmul kernels ───────────────────────────────────────────────────

/// c[m×n] += a[m×k] · b[k×n]
fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ
fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// c[m×n] += a[r×m]ᵀ · b[r×n]
fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], r: usize, m: usize, n: usize) {
    for row in 0..r {
        let brow = &b[row * n..(row + 1) * n];
        for p in 0..m {
            let av = a[row * m + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            precision,
            nodes: Vec::new(),
            grads: Vec::new(),
            component: Component::Encoder,
            macs: BTreeMap::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the attribution bucket for subsequent matmuls; returns the previous one.
    pub fn set_component(&mut self, c: Component) -> Component {
        std::mem::replace(&mut self.component, c)
    }

    pub fn macs(&self) -> &BTreeMap<Component, u64> {
        &self.macs
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    fn push(&mut self, shape: Vec<usize>, mut value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.precision.round_slice(&mut value);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("valid node")
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(HiveError::Shape {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Records a leaf. Its gradient is tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let value = t.data().to_vec();
        self.push(t.shape().to_vec(), value, t.requires_grad, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    /// Copies `x` with the gradient path cut.
    pub fn detach(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).to_vec();
        self.push(shape, value, false, Op::Detach)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(HiveError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        mm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        *self.macs.entry(self.component).or_insert(0) += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_t")?;
        let (n, k2) = self.dims2(b, "matmul_t")?;
        if k != k2 {
            return Err(HiveError::Shape {
                op: "matmul_t",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        mm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        *self.macs.entry(self.component).or_insert(0) += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMulT { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "transpose")?;
        let v = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = v[i * cols + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![cols, rows], out, rg, Op::Transpose { x, rows, cols }))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(HiveError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul { a, b }))
    }

    /// Adds a `[n]` bias to every row of an `[m×n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.dims2(x, "add_bias")?;
        if self.shape(bias) != [cols] {
            return Err(HiveError::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out: Vec<f64> = self.value(x).iter().enumerate().map(|(i, v)| v + b[i % cols]).collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::AddBias { x, bias, cols }))
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Scale { x, c })
    }

    /// Multiplies by a learnable one-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1] {
            return Err(HiveError::Shape {
                op: "scale_by",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * sv).collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::ScaleBy { x, s }))
    }

    /// Row-wise layer normalization over the trailing dimension.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(HiveError::Shape {
                op: "layernorm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        if !(eps > 0.0) {
            return Err(HiveError::Config(format!("layernorm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * normal_cdf(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Gelu { x })
    }

    /// Softmax over the last dimension. `allowed`, when given, has one flag per
    /// element; disallowed entries come out exactly zero.
    pub fn softmax_rows(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap();
        let xv = self.value(x);
        if let Some(mask) = allowed {
            if mask.len() != xv.len() {
                return Err(HiveError::Shape {
                    op: "softmax_rows",
                    lhs: self.shape(x).to_vec(),
                    rhs: vec![mask.len()],
                });
            }
        }
        let rows = xv.len() / cols;
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let keep = |j: usize| allowed.is_none_or(|m| m[r * cols + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(HiveError::DegenerateRow { row: r });
            }
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    out[r * cols + j] = e;
                    sum += e;
                }
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o /= sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::Softmax { x, cols }))
    }

    /// Mean next-token cross entropy over positions whose target is not `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(HiveError::Shape {
                op: "cross_entropy",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len()],
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        let mut count = 0;
        let mut norm_targets = Vec::with_capacity(rows);
        for (t, &target) in targets.iter().enumerate() {
            if target == ignore_index {
                norm_targets.push(IGNORE_INDEX);
                continue;
            }
            if target >= vocab {
                return Err(HiveError::TargetOutOfRange {
                    position: t,
                    target,
                    vocab,
                });
            }
            let row = &lv[t * vocab..(t + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..vocab {
                probs[t * vocab + j] = (row[j] - lse).exp();
            }
            total += lse - row[target];
            count += 1;
            norm_targets.push(target);
        }
        if count == 0 {
            return Err(HiveError::EmptyLoss);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![total / count as f64],
            rg,
            Op::CrossEntropy {
                logits,
                targets: norm_targets,
                probs,
                count,
                vocab,
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if start >= end || end > cols {
            return Err(HiveError::Shape {
                op: "slice_cols",
                lhs: vec![rows, cols],
                rhs: vec![start, end],
            });
        }
        let width = end - start;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, width], out, rg, Op::SliceCols { x, cols, start, width }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(HiveError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(vec![rows, total], out, rg, Op::ConcatCols { parts }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_rows")?;
        if start >= end || end > rows {
            return Err(HiveError::Shape {
                op: "slice_rows",
                lhs: vec![rows, cols],
                rhs: vec![start, end],
            });
        }
        let out = self.value(x)[start * cols..end * cols].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![end - start, cols], out, rg, Op::SliceRows { x, cols, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims2(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(HiveError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: vec![r, c],
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, cols], out, rg, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Row lookup into a `[V×d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, cols) = self.dims2(table, "gather_rows")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(HiveError::TargetOutOfRange {
                    position: pos,
                    target: id,
                    vocab,
                });
            }
            out.extend_from_slice(&tv[id * cols..(id + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                cols,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Sum { x })
    }

    /// `[n×d] → [1×d]` column means.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "mean_rows")?;
        let xv = self.value(x);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            add_into(&mut out, &xv[r * cols..(r + 1) * cols]);
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        let rg = self.rg(x);
        Ok(self.push(vec![1, cols], out, rg, Op::MeanRows { x, rows, cols }))
    }

    /// Gradient of the last backward root with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds this tape's gradient for `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            let mut g = g.to_vec();
            self.precision.round_slice(&mut g);
            t.accumulate_grad(&g);
        }
    }

    fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Back-propagates from a scalar root. Repeated calls accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != [1] {
            return Err(HiveError::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.grads.resize_with(self.nodes.len(), || None);
        let mut grads = std::mem::take(&mut self.grads);
        // Upstream seeds live only for this pass; leaf gradients accumulate across passes.
        let mut pass: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        pass[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(gout) = pass[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => match &mut grads[i] {
                    Some(g) => add_into(g, &gout),
                    None => grads[i] = Some(gout.clone()),
                },
                Op::Detach => {}
                &Op::MatMul { a, b, m, k, n } => {
                    if self.rg(a) {
                        let ga = Self::acc(&mut pass, a, m * k);
                        mm_nt(&gout, self.value(b), ga, m, n, k);
                    }
                    if self.rg(b) {
                        let gb = Self::acc(&mut pass, b, k * n);
                        mm_tn(self.value(a), &gout, gb, m, k, n);
                    }
                }
                &Op::MatMulT { a, b, m, k, n } => {
                    if self.rg(a) {
                        let ga = Self::acc(&mut pass, a, m * k);
                        mm_nn(&gout, self.value(b), ga, m, n, k);
                    }
                    if self.rg(b) {
                        let gb = Self::acc(&mut pass, b, n * k);
                        mm_tn(&gout, self.value(a), gb, m, n, k);
                    }
                }
                &Op::Transpose { x, rows, cols } => {
                    let gx = Self::acc(&mut pass, x, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += gout[c * rows + r];
                        }
                    }
                }
                &Op::Add { a, b } => {
                    for v in [a, b] {
                        if self.rg(v) {
                            add_into(Self::acc(&mut pass, v, gout.len()), &gout);
                        }
                    }
                }
                &Op::Mul { a, b } => {
                    if self.rg(a) {
                        let bv = self.value(b);
                        let ga = Self::acc(&mut pass, a, gout.len());
                        for j in 0..gout.len() {
                            ga[j] += gout[j] * bv[j];
                        }
                    }
                    if self.rg(b) {
                        let av = self.value(a);
                        let gb = Self::acc(&mut pass, b, gout.len());
                        for j in 0..gout.len() {
                            gb[j] += gout[j] * av[j];
                        }
                    }
                }
                &Op::AddBias { x, bias, cols } => {
                    if self.rg(x) {
                        add_into(Self::acc(&mut pass, x, gout.len()), &gout);
                    }
                    if self.rg(bias) {
                        let gb = Self::acc(&mut pass, bias, cols);
                        for row in gout.chunks_exact(cols) {
                            add_into(gb, row);
                        }
                    }
                }
                &Op::Scale { x, c } => {
                    let gx = Self::acc(&mut pass, x, gout.len());
                    for j in 0..gout.len() {
                        gx[j] += gout[j] * c;
                    }
                }
                &Op::ScaleBy { x, s } => {
                    let sv = self.value(s)[0];
                    if self.rg(x) {
                        let gx = Self::acc(&mut pass, x, gout.len());
                        for j in 0..gout.len() {
                            gx[j] += gout[j] * sv;
                        }
                    }
                    if self.rg(s) {
                        let ds = dot(&gout, self.value(x));
                        Self::acc(&mut pass, s, 1)[0] += ds;
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    d,
                    mean,
                    rstd,
                } => {
                    let (x, gamma, beta, d) = (*x, *gamma, *beta, *d);
                    let xv = self.value(x);
                    let g = self.value(gamma);
                    let rows = xv.len() / d;
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    let mut dx = vec![0.0; xv.len()];
                    let mut xhat = vec![0.0; d];
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let off = r * d;
                        for j in 0..d {
                            xhat[j] = (xv[off + j] - mean[r]) * rstd[r];
                            dxhat[j] = gout[off + j] * g[j];
                            dgamma[j] += gout[off + j] * xhat[j];
                            dbeta[j] += gout[off + j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dxhat, &xhat) / d as f64;
                        for j in 0..d {
                            dx[off + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                    if self.rg(x) {
                        add_into(Self::acc(&mut pass, x, dx.len()), &dx);
                    }
                    if self.rg(gamma) {
                        add_into(Self::acc(&mut pass, gamma, d), &dgamma);
                    }
                    if self.rg(beta) {
                        add_into(Self::acc(&mut pass, beta, d), &dbeta);
                    }
                }
                &Op::Gelu { x } => {
                    let xv = self.value(x);
                    let gx = Self::acc(&mut pass, x, gout.len());
                    for j in 0..gout.len() {
                        let v = xv[j];
                        gx[j] += gout[j] * (normal_cdf(v) + v * normal_pdf(v));
                    }
                }
                &Op::Softmax { x, cols } => {
                    let y = &node.value;
                    let gx = Self::acc(&mut pass, x, gout.len());
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &gout[r * cols..(r + 1) * cols];
                        let s = dot(yr, gr);
                        for j in 0..cols {
                            gx[r * cols + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                    vocab,
                } => {
                    let (logits, count, vocab) = (*logits, *count, *vocab);
                    let scale = gout[0] / count as f64;
                    let gl = Self::acc(&mut pass, logits, targets.len() * vocab);
                    for (t, &target) in targets.iter().enumerate() {
                        if target == IGNORE_INDEX {
                            continue;
                        }
                        for j in 0..vocab {
                            let onehot = if j == target { 1.0 } else { 0.0 };
                            gl[t * vocab + j] += (probs[t * vocab + j] - onehot) * scale;
                        }
                    }
                }
                &Op::SliceCols { x, cols, start, width } => {
                    let rows = gout.len() / width;
                    let gx = Self::acc(&mut pass, x, rows * cols);
                    for r in 0..rows {
                        add_into(
                            &mut gx[r * cols + start..r * cols + start + width],
                            &gout[r * width..(r + 1) * width],
                        );
                    }
                }
                Op::ConcatCols { parts } => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let rows = gout.len() / total;
                    let mut off = 0;
                    for &(p, w) in parts {
                        if self.rg(p) {
                            let gp = Self::acc(&mut pass, p, rows * w);
                            for r in 0..rows {
                                add_into(&mut gp[r * w..(r + 1) * w], &gout[r * total + off..r * total + off + w]);
                            }
                        }
                        off += w;
                    }
                }
                &Op::SliceRows { x, cols, start } => {
                    let total = self.nodes[x.0].value.len();
                    let gx = Self::acc(&mut pass, x, total);
                    add_into(&mut gx[start * cols..start * cols + gout.len()], &gout);
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        if self.rg(p) {
                            add_into(Self::acc(&mut pass, p, len), &gout[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::Gather { table, ids, cols } => {
                    let (table, cols) = (*table, *cols);
                    let len = self.nodes[table.0].value.len();
                    let gt = Self::acc(&mut pass, table, len);
                    for (pos, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * cols..(id + 1) * cols], &gout[pos * cols..(pos + 1) * cols]);
                    }
                }
                &Op::Sum { x } => {
                    let len = self.nodes[x.0].value.len();
                    let gx = Self::acc(&mut pass, x, len);
                    gx.iter_mut().for_each(|v| *v += gout[0]);
                }
                &Op::MeanRows { x, rows, cols } => {
                    let gx = Self::acc(&mut pass, x, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += gout[c] / rows as f64;
                        }
                    }
                }
            }
            // Non-leaf intermediate gradients are kept for introspection.
            if !matches!(self.nodes[i].op, Op::Leaf) {
                match &mut grads[i] {
                    Some(g) => add_into(g, &gout),
                    None => grads[i] = Some(gout),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new(Precision::High);
        let a = tape.constant(&t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(&t2(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_by_col() {
        let mut tape = Tape::new(Precision::High);
        let a = tape.constant(&t2(&[&[1.0, 2.0]]));
        let b = tape.constant(&t2(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
        assert_eq!(tape.macs()[&Component::Encoder], 2);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new(Precision::High);
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn mac_count_definition() {
        let mut tape = Tape::new(Precision::High);
        tape.set_component(Component::Mlp);
        let a = tape.constant(&Tensor::zeros(&[2, 4]));
        let b = tape.constant(&Tensor::zeros(&[4, 3]));
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.macs()[&Component::Mlp], 24);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new(Precision::High);
        let x = tape.constant(&t2(&[&[0.0, 0.0, 0.0], &[1000.0, 0.0, -1000.0]]));
        let y = tape.softmax_rows(x, None).unwrap();
        let v = tape.value(y);
        assert!(v[..3].iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert!((v[3] - 1.0).abs() < 1e-15 && v[4] < 1e-300 && v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn softmax_mask_zero_and_degenerate() {
        let mut tape = Tape::new(Precision::High);
        let x = tape.constant(&t2(&[&[1.0, 2.0, 3.0]]));
        let y = tape.softmax_rows(x, Some(&[true, false, true])).unwrap();
        assert_eq!(tape.value(y)[1], 0.0);
        let s: f64 = tape.value(y).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let err = tape.softmax_rows(x, Some(&[false, false, false])).unwrap_err();
        assert!(matches!(err, HiveError::DegenerateRow { row: 0 }));
    }

    #[test]
    fn layernorm_constant_row_and_zero_gamma() {
        let mut tape = Tape::new(Precision::High);
        let x = tape.constant(&t2(&[&[5.0, 5.0, 5.0]]));
        let ones = tape.constant(&Tensor::filled(&[3], 1.0));
        let zeros = tape.constant(&Tensor::zeros(&[3]));
        let y = tape.layernorm(x, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);

        let x = tape.constant(&t2(&[&[1.0, -2.0, 7.0]]));
        let beta = tape.constant(&Tensor::new(vec![3], vec![0.5, 1.5, -2.0]).unwrap());
        let y = tape.layernorm(x, zeros, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.5, 1.5, -2.0]);
    }

    #[test]
    fn gelu_values() {
        let mut tape = Tape::new(Precision::High);
        let x = tape.constant(&Tensor::new(vec![3], vec![0.0, 10.0, 1.0]).unwrap());
        let y = tape.gelu(x);
        let v = tape.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-12);
        // 1·Φ(1) with Φ(1) = 0.8413447460685429485852325456320379...
        assert!((v[2] - 0.841_344_746_068_542_9).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_uniform_and_perfect() {
        let mut tape = Tape::new(Precision::High);
        let l = tape.constant(&Tensor::zeros(&[3, 4]));
        let loss = tape.cross_entropy(l, &[0, 1, 3], IGNORE_INDEX).unwrap();
        assert!((tape.value(loss)[0] - 4f64.ln()).abs() < 1e-15);

        let l = tape.constant(&t2(&[&[800.0, 0.0, 0.0]]));
        let loss = tape.cross_entropy(l, &[0], IGNORE_INDEX).unwrap();
        assert_eq!(tape.value(loss)[0], 0.0);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut tape = Tape::new(Precision::High);
        let l = tape.constant(&Tensor::zeros(&[2, 4]));
        assert!(matches!(
            tape.cross_entropy(l, &[IGNORE_INDEX, IGNORE_INDEX], IGNORE_INDEX),
            Err(HiveError::EmptyLoss)
        ));
        assert!(matches!(
            tape.cross_entropy(l, &[0, 4], IGNORE_INDEX),
            Err(HiveError::TargetOutOfRange { position: 1, .. })
        ));
    }

    #[test]
    fn ignored_position_gets_zero_gradient() {
        let mut tape = Tape::new(Precision::High);
        let l = tape.leaf(&t2(&[&[0.3, -1.0, 2.0], &[1.0, 0.5, 0.1]]).with_grad());
        let loss = tape.cross_entropy(l, &[2, IGNORE_INDEX], IGNORE_INDEX).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(l).unwrap();
        assert!(g[3..].iter().all(|&v| v == 0.0));
        assert!(g[..3].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_identity_and_square() {
        let mut tape = Tape::new(Precision::High);
        let x = tape.leaf(&Tensor::scalar(3.0).with_grad());
        let y = tape.sum(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);

        let mut tape = Tape::new(Precision::High);
        let x = tape.leaf(&Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum(sq);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new(Precision::High);
        let x = tape.leaf(&Tensor::zeros(&[2, 2]).with_grad());
        assert!(matches!(tape.backward(x), Err(HiveError::NonScalarRoot(_))));
    }

    #[test]
    fn reuse_sums_single_use_gradients() {
        let w = t2(&[&[0.5, -1.5], &[2.0, 0.25]]).with_grad();
        let single = {
            let mut tape = Tape::new(Precision::High);
            let x = tape.leaf(&w);
            let y = tape.gelu(x);
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let mut tape = Tape::new(Precision::High);
        let x = tape.leaf(&w);
        let y1 = tape.gelu(x);
        let y2 = tape.gelu(x);
        let y = tape.add(y1, y2).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let twice: Vec<f64> = single.iter().map(|g| g + g).collect();
        assert_eq!(tape.grad(x).unwrap(), twice.as_slice());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new(Precision::High);
        let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let y = tape.sum(x);
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new(Precision::High);
        let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let d = tape.detach(x);
        let y = tape.mul(d, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn standard_precision_rounds_to_f32() {
        let mut tape = Tape::new(Precision::Standard);
        let x = tape.constant(&Tensor::scalar(0.1));
        let y = tape.scale(x, 1.0);
        assert_eq!(tape.value(y)[0], 0.1f32 as f64);
    }

    #[test]
    fn frozen_inputs_skip_backward() {
        let mut tape = Tape::new(Precision::High);
        let frozen = tape.constant(&Tensor::filled(&[2, 2], 1.0));
        let w = tape.leaf(&Tensor::filled(&[2, 2], 0.5).with_grad());
        let h = tape.gelu(frozen);
        let y = tape.matmul(h, w).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert!(tape.grad(h).is_none());
        assert!(tape.grad(w).is_some());
    }
}

//! Reverse-mode autodiff over a linear tape.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation reads nodes
//! that already exist and pushes exactly one result node, so the recording is
//! topologically ordered by construction and [`Tape::backward`] is a single
//! reverse sweep that visits each node once.

use super::{matmul_accumulate, transpose2, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node<S> {
    value: Tensor<S>,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Leaf,
    Add(usize, usize),
    AddRow { a: usize, bias: usize },
    Sub(usize, usize),
    Mul(usize, usize),
    MulCol { a: usize, w: usize },
    MulScalar { a: usize, c: f64 },
    Relu(usize),
    Abs(usize),
    Matmul(usize, usize),
    Conv2d { input: usize, weight: usize, bias: usize, padding: usize },
    Softmax { input: usize, axis: usize },
    Unfold { input: usize, k: usize },
    AvgDown { input: usize, s: usize },
    SumAll(usize),
    MeanAll(usize),
    GatherRows { input: usize, indices: Vec<usize> },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows { input: usize, start: usize },
    SliceCols { input: usize, start: usize },
    Reshape(usize),
    Transpose2(usize),
    RowsDot(usize, usize),
    NchwToRows(usize),
    RowsToNchw(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddRow { .. } => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulCol { .. } => "mul_col",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Matmul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Softmax { .. } => "softmax",
            Op::Unfold { .. } => "unfold",
            Op::AvgDown { .. } => "avg_downsample",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::Transpose2(..) => "transpose2",
            Op::RowsDot(..) => "rows_dot",
            Op::NchwToRows(..) => "nchw_to_rows",
            Op::RowsToNchw(..) => "rows_to_nchw",
        }
    }

}

/// Per-node gradient buffers produced by [`Tape::backward`]. A `None` entry
/// means no gradient reached that node.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&[S]> {
        self.grads[var.0].as_deref()
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<S>> {
        self.grads[var.0].take()
    }
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a value as a leaf node. Gradients are only tracked through
    /// subgraphs that reach a leaf with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op, needs_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        {
            if !value.is_finite() {
                panic!("non-finite value produced by op `{}`", op.name());
            }
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ── Elementwise ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(&[a.0, b.0]);
        self.push(value, Op::Add(a.0, b.0), ng)
    }

    /// `[M×D] + [D]` (or `[1×D]`): adds one bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert_eq!(ta.shape().len(), 2, "add_row: lhs must be 2-D");
        let d = ta.shape()[1];
        assert_eq!(tb.numel(), d, "add_row: bias length {} != row width {d}", tb.numel());
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v = *v + b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(&[a.0, bias.0]);
        self.push(value, Op::AddRow { a: a.0, bias: bias.0 }, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "sub: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(&[a.0, b.0]);
        self.push(value, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        let ng = self.needs(&[a.0, b.0]);
        self.push(value, Op::Mul(a.0, b.0), ng)
    }

    /// `[M×D] ⊙ [M×1]`: scales each row of `a` by the matching weight.
    pub fn mul_col(&mut self, a: Var, w: Var) -> Var {
        let (ta, tw) = (&self.nodes[a.0].value, &self.nodes[w.0].value);
        assert_eq!(ta.shape().len(), 2, "mul_col: lhs must be 2-D");
        let (m, d) = (ta.shape()[0], ta.shape()[1]);
        assert_eq!(tw.shape(), &[m, 1], "mul_col: weight must be [M×1]");
        let mut data = ta.data().to_vec();
        for (row, &wv) in data.chunks_mut(d).zip(tw.data()) {
            for v in row.iter_mut() {
                *v = *v * wv;
            }
        }
        let value = Tensor::new(vec![m, d], data);
        let ng = self.needs(&[a.0, w.0]);
        self.push(value, Op::MulCol { a: a.0, w: w.0 }, ng)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let cs = S::of(c);
        let value = self.nodes[a.0].value.map(|x| x * cs);
        let ng = self.needs(&[a.0]);
        self.push(value, Op::MulScalar { a: a.0, c }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| if x > S::zero() { x } else { S::zero() });
        let ng = self.needs(&[a.0]);
        self.push(value, Op::Relu(a.0), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.abs());
        let ng = self.needs(&[a.0]);
        self.push(value, Op::Abs(a.0), ng)
    }

    // ── Linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape().len(), 2, "matmul: lhs must be 2-D");
        assert_eq!(tb.shape().len(), 2, "matmul: rhs must be 2-D");
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, k2, "matmul: inner dimensions {k} and {k2} disagree");
        let mut out = vec![S::zero(); m * n];
        matmul_accumulate(ta.data(), tb.data(), m, k, n, &mut out);
        let ng = self.needs(&[a.0, b.0]);
        self.push(Tensor::new(vec![m, n], out), Op::Matmul(a.0, b.0), ng)
    }

    /// Row-wise dot product of two `[M×D]` matrices, producing `[M×1]`.
    pub fn rows_dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "rows_dot: shape mismatch");
        assert_eq!(ta.shape().len(), 2, "rows_dot: operands must be 2-D");
        let d = ta.shape()[1];
        let data: Vec<S> = ta
            .data()
            .chunks(d)
            .zip(tb.data().chunks(d))
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| x * y).sum())
            .collect();
        let m = ta.shape()[0];
        let ng = self.needs(&[a.0, b.0]);
        self.push(Tensor::new(vec![m, 1], data), Op::RowsDot(a.0, b.0), ng)
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.shape().len(), 2, "transpose2: operand must be 2-D");
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let data = transpose2(ta.data(), r, c);
        let ng = self.needs(&[a.0]);
        self.push(Tensor::new(vec![c, r], data), Op::Transpose2(a.0), ng)
    }

    // ── Convolution and spatial ops ──────────────────────────────────────

    /// 2-D cross-correlation, stride 1, zero padding, odd square kernel.
    /// `input` is N×C×H×W, `weight` O×C×k×k, `bias` O.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize) -> Var {
        let (ti, tw, tb) =
            (&self.nodes[input.0].value, &self.nodes[weight.0].value, &self.nodes[bias.0].value);
        assert_eq!(ti.shape().len(), 4, "conv2d: input must be N×C×H×W");
        assert_eq!(tw.shape().len(), 4, "conv2d: weight must be O×C×k×k");
        let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        let (o, cw, k, k2) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        assert_eq!(k, k2, "conv2d: kernel must be square");
        assert_eq!(k % 2, 1, "conv2d: kernel size must be odd");
        assert_eq!(c, cw, "conv2d: input has {c} channels, weight expects {cw}");
        assert_eq!(tb.numel(), o, "conv2d: bias length {} != {o} output channels", tb.numel());
        let ho = h + 2 * padding + 1 - k;
        let wo = w + 2 * padding + 1 - k;
        assert!(ho >= 1 && wo >= 1, "conv2d: kernel larger than padded input");

        let mut out = vec![S::zero(); n * o * ho * wo];
        let mut cols = vec![S::zero(); c * k * k * ho * wo];
        for s in 0..n {
            im2col(ti, s, k, padding, ho, wo, &mut cols);
            let out_s = &mut out[s * o * ho * wo..(s + 1) * o * ho * wo];
            matmul_accumulate(tw.data(), &cols, o, c * k * k, ho * wo, out_s);
            for oc in 0..o {
                let bv = tb.data()[oc];
                for v in &mut out_s[oc * ho * wo..(oc + 1) * ho * wo] {
                    *v = *v + bv;
                }
            }
        }
        let value = Tensor::new(vec![n, o, ho, wo], out);
        let ng = self.needs(&[input.0, weight.0, bias.0]);
        self.push(value, Op::Conv2d { input: input.0, weight: weight.0, bias: bias.0, padding }, ng)
    }

    /// Concatenate the k×k neighborhood of every pixel into the channel
    /// dimension (edge pixels replicate), N×C×H×W → N×(C·k²)×H×W. The output
    /// channel `c·k² + dy·k + dx` holds the neighbor at offset (dy, dx)
    /// relative to the top-left of the window.
    pub fn unfold(&mut self, input: Var, k: usize) -> Var {
        let ti = &self.nodes[input.0].value;
        assert_eq!(ti.shape().len(), 4, "unfold: input must be N×C×H×W");
        assert_eq!(k % 2, 1, "unfold: k must be odd");
        let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        let r = (k / 2) as isize;
        let mut out = vec![S::zero(); n * c * k * k * h * w];
        let out_t = |s: usize, ch: usize, y: usize, x: usize| ((s * c * k * k + ch) * h + y) * w + x;
        for s in 0..n {
            for ch in 0..c {
                for (p, (dy, dx)) in
                    (0..k).flat_map(|dy| (0..k).map(move |dx| (dy as isize - r, dx as isize - r))).enumerate()
                {
                    let oc = ch * k * k + p;
                    for y in 0..h {
                        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        for x in 0..w {
                            let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                            out[out_t(s, oc, y, x)] = ti.at4(s, ch, sy, sx);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c * k * k, h, w], out);
        let ng = self.needs(&[input.0]);
        self.push(value, Op::Unfold { input: input.0, k }, ng)
    }

    /// Non-overlapping s×s mean pooling; trailing rows/cols that do not fill
    /// a block are dropped.
    pub fn avg_downsample(&mut self, input: Var, s: usize) -> Var {
        let ti = &self.nodes[input.0].value;
        assert_eq!(ti.shape().len(), 4, "avg_downsample: input must be N×C×H×W");
        assert!(s >= 1, "avg_downsample: scale must be >= 1");
        let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        let (ho, wo) = (h / s, w / s);
        assert!(ho >= 1 && wo >= 1, "avg_downsample: input smaller than pooling block");
        let inv = S::of(1.0 / (s * s) as f64);
        let mut out = vec![S::zero(); n * c * ho * wo];
        let mut idx = 0;
        for sn in 0..n {
            for ch in 0..c {
                for by in 0..ho {
                    for bx in 0..wo {
                        let mut acc = S::zero();
                        for dy in 0..s {
                            for dx in 0..s {
                                acc = acc + ti.at4(sn, ch, by * s + dy, bx * s + dx);
                            }
                        }
                        out[idx] = acc * inv;
                        idx += 1;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out);
        let ng = self.needs(&[input.0]);
        self.push(value, Op::AvgDown { input: input.0, s }, ng)
    }

    // ── Softmax and reductions ───────────────────────────────────────────

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Var {
        let ti = &self.nodes[input.0].value;
        let shape = ti.shape().to_vec();
        assert!(axis < shape.len(), "softmax: axis {axis} out of range for {shape:?}");
        let lanes = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = ti.data();
        let mut out = vec![S::zero(); src.len()];
        for od in 0..outer {
            for id in 0..inner {
                let base = od * lanes * inner + id;
                let mut hi = S::neg_infinity();
                for l in 0..lanes {
                    hi = hi.max(src[base + l * inner]);
                }
                let mut total = S::zero();
                for l in 0..lanes {
                    let e = (src[base + l * inner] - hi).exp();
                    out[base + l * inner] = e;
                    total = total + e;
                }
                for l in 0..lanes {
                    out[base + l * inner] = out[base + l * inner] / total;
                }
            }
        }
        let ng = self.needs(&[input.0]);
        self.push(Tensor::new(shape, out), Op::Softmax { input: input.0, axis }, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: S = self.nodes[a.0].value.data().iter().copied().sum();
        let ng = self.needs(&[a.0]);
        self.push(Tensor::scalar(total), Op::SumAll(a.0), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let total: S = t.data().iter().copied().sum();
        let mean = total / S::of(t.numel() as f64);
        let ng = self.needs(&[a.0]);
        self.push(Tensor::scalar(mean), Op::MeanAll(a.0), ng)
    }

    // ── Shape and indexing ───────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self.nodes[a.0].value.clone().reshaped(shape);
        let ng = self.needs(&[a.0]);
        self.push(value, Op::Reshape(a.0), ng)
    }

    /// Pick rows of a `[M×D]` matrix by index (repeats allowed); the backward
    /// pass scatter-adds into the source rows.
    pub fn gather_rows(&mut self, input: Var, indices: &[usize]) -> Var {
        let ti = &self.nodes[input.0].value;
        assert_eq!(ti.shape().len(), 2, "gather_rows: input must be 2-D");
        let (m, d) = (ti.shape()[0], ti.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &r in indices {
            assert!(r < m, "gather_rows: row {r} out of range {m}");
            data.extend_from_slice(&ti.data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], data);
        let ng = self.needs(&[input.0]);
        self.push(value, Op::GatherRows { input: input.0, indices: indices.to_vec() }, ng)
    }

    /// Concatenate 2-D matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let m = self.nodes[parts[0].0].value.shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|v| {
                let t = &self.nodes[v.0].value;
                assert_eq!(t.shape().len(), 2, "concat_cols: inputs must be 2-D");
                assert_eq!(t.shape()[0], m, "concat_cols: row count mismatch");
                t.shape()[1]
            })
            .collect();
        let d: usize = widths.iter().sum();
        let mut data = vec![S::zero(); m * d];
        let mut col = 0;
        for (v, &wd) in parts.iter().zip(&widths) {
            let src = self.nodes[v.0].value.data();
            for r in 0..m {
                data[r * d + col..r * d + col + wd].copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            col += wd;
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let ng = self.needs(&ids);
        self.push(Tensor::new(vec![m, d], data), Op::ConcatCols(ids), ng)
    }

    /// Concatenate 2-D matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let d = self.nodes[parts[0].0].value.shape()[1];
        let mut data = Vec::new();
        let mut m = 0;
        for v in parts {
            let t = &self.nodes[v.0].value;
            assert_eq!(t.shape().len(), 2, "concat_rows: inputs must be 2-D");
            assert_eq!(t.shape()[1], d, "concat_rows: column count mismatch");
            m += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let ng = self.needs(&ids);
        self.push(Tensor::new(vec![m, d], data), Op::ConcatRows(ids), ng)
    }

    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Var {
        let ti = &self.nodes[input.0].value;
        assert_eq!(ti.shape().len(), 2, "slice_rows: input must be 2-D");
        let (m, d) = (ti.shape()[0], ti.shape()[1]);
        assert!(start + len <= m, "slice_rows: range out of bounds");
        let data = ti.data()[start * d..(start + len) * d].to_vec();
        let ng = self.needs(&[input.0]);
        self.push(Tensor::new(vec![len, d], data), Op::SliceRows { input: input.0, start }, ng)
    }

    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Var {
        let ti = &self.nodes[input.0].value;
        assert_eq!(ti.shape().len(), 2, "slice_cols: input must be 2-D");
        let (m, d) = (ti.shape()[0], ti.shape()[1]);
        assert!(start + len <= d, "slice_cols: range out of bounds");
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&ti.data()[r * d + start..r * d + start + len]);
        }
        let ng = self.needs(&[input.0]);
        self.push(Tensor::new(vec![m, len], data), Op::SliceCols { input: input.0, start }, ng)
    }

    /// N×C×H×W → (N·H·W)×C token rows; row index is (n·H + y)·W + x.
    pub fn nchw_to_rows(&mut self, input: Var) -> Var {
        let ti = &self.nodes[input.0].value;
        assert_eq!(ti.shape().len(), 4, "nchw_to_rows: input must be 4-D");
        let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        let mut data = vec![S::zero(); n * h * w * c];
        for s in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data[((s * h + y) * w + x) * c + ch] = ti.at4(s, ch, y, x);
                    }
                }
            }
        }
        let ng = self.needs(&[input.0]);
        self.push(Tensor::new(vec![n * h * w, c], data), Op::NchwToRows(input.0), ng)
    }

    /// Inverse of [`Tape::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, input: Var, n: usize, c: usize, h: usize, w: usize) -> Var {
        let ti = &self.nodes[input.0].value;
        assert_eq!(ti.shape(), &[n * h * w, c], "rows_to_nchw: shape mismatch");
        let mut data = vec![S::zero(); n * c * h * w];
        for s in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let row = &ti.data()[((s * h + y) * w + x) * c..((s * h + y) * w + x + 1) * c];
                    for (ch, &v) in row.iter().enumerate() {
                        data[((s * c + ch) * h + y) * w + x] = v;
                    }
                }
            }
        }
        let ng = self.needs(&[input.0]);
        self.push(Tensor::new(vec![n, c, h, w], data), Op::RowsToNchw(input.0), ng)
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape and returns the
    /// gradient buffers; the recording is dropped afterwards.
    pub fn backward(mut self, loss: Var) -> Gradients<S> {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward: loss must be scalar");
        assert!(
            self.nodes[loss.0].needs_grad,
            "backward: loss is not connected to any leaf that requires gradients"
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Vec<S>>], node: usize, delta: impl Fn(&mut [S])) {
        if !self.nodes[node].needs_grad {
            return;
        }
        let buf = grads[node].get_or_insert_with(|| vec![S::zero(); self.nodes[node].value.numel()]);
        delta(buf);
    }

    fn propagate(&self, i: usize, op: &Op, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match op {
            Op::Leaf => {}

            Op::Add(a, b) => {
                for &t in &[*a, *b] {
                    self.accum(grads, t, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o = *o + gv;
                        }
                    });
                }
            }

            Op::AddRow { a, bias } => {
                self.accum(grads, *a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o = *o + gv;
                    }
                });
                let d = self.nodes[*bias].value.numel();
                self.accum(grads, *bias, |buf| {
                    for row in g.chunks(d) {
                        for (o, &gv) in buf.iter_mut().zip(row) {
                            *o = *o + gv;
                        }
                    }
                });
            }

            Op::Sub(a, b) => {
                self.accum(grads, *a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o = *o + gv;
                    }
                });
                self.accum(grads, *b, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o = *o - gv;
                    }
                });
            }

            Op::Mul(a, b) => {
                let (da, db) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.accum(grads, *a, |buf| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(db) {
                        *o = *o + gv * bv;
                    }
                });
                self.accum(grads, *b, |buf| {
                    for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(da) {
                        *o = *o + gv * av;
                    }
                });
            }

            Op::MulCol { a, w } => {
                let ta = &self.nodes[*a].value;
                let d = ta.shape()[1];
                let wv = self.nodes[*w].value.data();
                self.accum(grads, *a, |buf| {
                    for ((orow, grow), &ws) in buf.chunks_mut(d).zip(g.chunks(d)).zip(wv) {
                        for (o, &gv) in orow.iter_mut().zip(grow) {
                            *o = *o + gv * ws;
                        }
                    }
                });
                let av = ta.data();
                self.accum(grads, *w, |buf| {
                    for ((o, grow), arow) in buf.iter_mut().zip(g.chunks(d)).zip(av.chunks(d)) {
                        let dot: S = grow.iter().zip(arow).map(|(&gv, &xv)| gv * xv).sum();
                        *o = *o + dot;
                    }
                });
            }

            Op::MulScalar { a, c } => {
                let cs = S::of(*c);
                self.accum(grads, *a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o = *o + gv * cs;
                    }
                });
            }

            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                self.accum(grads, *a, |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        if xv > S::zero() {
                            *o = *o + gv;
                        }
                    }
                });
            }

            Op::Abs(a) => {
                let x = self.nodes[*a].value.data();
                self.accum(grads, *a, |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        if xv > S::zero() {
                            *o = *o + gv;
                        } else if xv < S::zero() {
                            *o = *o - gv;
                        }
                    }
                });
            }

            Op::Matmul(a, b) => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.nodes[*a].needs_grad {
                    let bt = transpose2(tb.data(), k, n);
                    let mut da = vec![S::zero(); m * k];
                    matmul_accumulate(g, &bt, m, n, k, &mut da);
                    self.accum(grads, *a, |buf| {
                        for (o, &v) in buf.iter_mut().zip(&da) {
                            *o = *o + v;
                        }
                    });
                }
                if self.nodes[*b].needs_grad {
                    let at = transpose2(ta.data(), m, k);
                    let mut db = vec![S::zero(); k * n];
                    matmul_accumulate(&at, g, k, m, n, &mut db);
                    self.accum(grads, *b, |buf| {
                        for (o, &v) in buf.iter_mut().zip(&db) {
                            *o = *o + v;
                        }
                    });
                }
            }

            Op::RowsDot(a, b) => {
                let d = self.nodes[*a].value.shape()[1];
                let (da, db) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.accum(grads, *a, |buf| {
                    for ((orow, brow), &gv) in buf.chunks_mut(d).zip(db.chunks(d)).zip(g) {
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o = *o + gv * bv;
                        }
                    }
                });
                self.accum(grads, *b, |buf| {
                    for ((orow, arow), &gv) in buf.chunks_mut(d).zip(da.chunks(d)).zip(g) {
                        for (o, &av) in orow.iter_mut().zip(arow) {
                            *o = *o + gv * av;
                        }
                    }
                });
            }

            Op::Transpose2(a) => {
                let out_shape = self.nodes[i].value.shape();
                let (r, c) = (out_shape[0], out_shape[1]);
                let gt = transpose2(g, r, c);
                self.accum(grads, *a, |buf| {
                    for (o, &v) in buf.iter_mut().zip(&gt) {
                        *o = *o + v;
                    }
                });
            }

            Op::Conv2d { input, weight, bias, padding } => {
                self.conv2d_backward(i, *input, *weight, *bias, *padding, g, grads);
            }

            Op::Softmax { input, axis } => {
                let out = &self.nodes[i].value;
                let shape = out.shape();
                let lanes = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let s = out.data();
                let mut dx = vec![S::zero(); s.len()];
                for od in 0..outer {
                    for id in 0..inner {
                        let base = od * lanes * inner + id;
                        let mut dot = S::zero();
                        for l in 0..lanes {
                            let f = base + l * inner;
                            dot = dot + g[f] * s[f];
                        }
                        for l in 0..lanes {
                            let f = base + l * inner;
                            dx[f] = s[f] * (g[f] - dot);
                        }
                    }
                }
                self.accum(grads, *input, |buf| {
                    for (o, &v) in buf.iter_mut().zip(&dx) {
                        *o = *o + v;
                    }
                });
            }

            Op::Unfold { input, k } => {
                let ti = &self.nodes[*input].value;
                let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
                let k = *k;
                let r = (k / 2) as isize;
                let mut dx = vec![S::zero(); ti.numel()];
                for s in 0..n {
                    for ch in 0..c {
                        for (p, (dy, dxo)) in (0..k)
                            .flat_map(|dy| (0..k).map(move |dx| (dy as isize - r, dx as isize - r)))
                            .enumerate()
                        {
                            let oc = ch * k * k + p;
                            for y in 0..h {
                                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                                for x in 0..w {
                                    let sx = (x as isize + dxo).clamp(0, w as isize - 1) as usize;
                                    let gi = ((s * c * k * k + oc) * h + y) * w + x;
                                    dx[((s * c + ch) * h + sy) * w + sx] =
                                        dx[((s * c + ch) * h + sy) * w + sx] + g[gi];
                                }
                            }
                        }
                    }
                }
                self.accum(grads, *input, |buf| {
                    for (o, &v) in buf.iter_mut().zip(&dx) {
                        *o = *o + v;
                    }
                });
            }

            Op::AvgDown { input, s } => {
                let ti = &self.nodes[*input].value;
                let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
                let s = *s;
                let (ho, wo) = (h / s, w / s);
                let inv = S::of(1.0 / (s * s) as f64);
                let mut dx = vec![S::zero(); ti.numel()];
                let mut idx = 0;
                for sn in 0..n {
                    for ch in 0..c {
                        for by in 0..ho {
                            for bx in 0..wo {
                                let gv = g[idx] * inv;
                                idx += 1;
                                for dy in 0..s {
                                    for dxo in 0..s {
                                        let f = ((sn * c + ch) * h + by * s + dy) * w + bx * s + dxo;
                                        dx[f] = dx[f] + gv;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accum(grads, *input, |buf| {
                    for (o, &v) in buf.iter_mut().zip(&dx) {
                        *o = *o + v;
                    }
                });
            }

            Op::SumAll(a) => {
                let gv = g[0];
                self.accum(grads, *a, |buf| {
                    for o in buf.iter_mut() {
                        *o = *o + gv;
                    }
                });
            }

            Op::MeanAll(a) => {
                let n = self.nodes[*a].value.numel();
                let gv = g[0] / S::of(n as f64);
                self.accum(grads, *a, |buf| {
                    for o in buf.iter_mut() {
                        *o = *o + gv;
                    }
                });
            }

            Op::Reshape(a) => {
                self.accum(grads, *a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o = *o + gv;
                    }
                });
            }

            Op::GatherRows { input, indices } => {
                let d = self.nodes[*input].value.shape()[1];
                self.accum(grads, *input, |buf| {
                    for (&r, grow) in indices.iter().zip(g.chunks(d)) {
                        for (o, &gv) in buf[r * d..(r + 1) * d].iter_mut().zip(grow) {
                            *o = *o + gv;
                        }
                    }
                });
            }

            Op::ConcatCols(parts) => {
                let m = self.nodes[i].value.shape()[0];
                let d = self.nodes[i].value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let wd = self.nodes[p].value.shape()[1];
                    self.accum(grads, p, |buf| {
                        for r in 0..m {
                            for j in 0..wd {
                                buf[r * wd + j] = buf[r * wd + j] + g[r * d + col + j];
                            }
                        }
                    });
                    col += wd;
                }
            }

            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let t = &self.nodes[p].value;
                    let cnt = t.numel();
                    self.accum(grads, p, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(&g[row..row + cnt]) {
                            *o = *o + gv;
                        }
                    });
                    row += cnt;
                }
            }

            Op::SliceRows { input, start } => {
                let d = self.nodes[*input].value.shape()[1];
                self.accum(grads, *input, |buf| {
                    for (o, &gv) in buf[start * d..start * d + g.len()].iter_mut().zip(g) {
                        *o = *o + gv;
                    }
                });
            }

            Op::SliceCols { input, start } => {
                let d = self.nodes[*input].value.shape()[1];
                let len = self.nodes[i].value.shape()[1];
                let m = self.nodes[i].value.shape()[0];
                self.accum(grads, *input, |buf| {
                    for r in 0..m {
                        for j in 0..len {
                            buf[r * d + start + j] = buf[r * d + start + j] + g[r * len + j];
                        }
                    }
                });
            }

            Op::NchwToRows(a) => {
                let ti = &self.nodes[*a].value;
                let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
                self.accum(grads, *a, |buf| {
                    for s in 0..n {
                        for ch in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    let f = ((s * c + ch) * h + y) * w + x;
                                    buf[f] = buf[f] + g[((s * h + y) * w + x) * c + ch];
                                }
                            }
                        }
                    }
                });
            }

            Op::RowsToNchw(a) => {
                let to = &self.nodes[i].value;
                let (n, c, h, w) = (to.shape()[0], to.shape()[1], to.shape()[2], to.shape()[3]);
                self.accum(grads, *a, |buf| {
                    for s in 0..n {
                        for ch in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    let f = ((s * h + y) * w + x) * c + ch;
                                    buf[f] = buf[f] + g[((s * c + ch) * h + y) * w + x];
                                }
                            }
                        }
                    }
                });
            }
        }
    }

    fn conv2d_backward(
        &self,
        node: usize,
        input: usize,
        weight: usize,
        bias: usize,
        padding: usize,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let ti = &self.nodes[input].value;
        let tw = &self.nodes[weight].value;
        let out = &self.nodes[node].value;
        let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        let (o, k) = (tw.shape()[0], tw.shape()[2]);
        let (ho, wo) = (out.shape()[2], out.shape()[3]);
        let plane = ho * wo;

        if self.nodes[bias].needs_grad {
            self.accum(grads, bias, |buf| {
                for s in 0..n {
                    for oc in 0..o {
                        let base = (s * o + oc) * plane;
                        let mut acc = S::zero();
                        for &gv in &g[base..base + plane] {
                            acc = acc + gv;
                        }
                        buf[oc] = buf[oc] + acc;
                    }
                }
            });
        }

        let need_w = self.nodes[weight].needs_grad;
        let need_x = self.nodes[input].needs_grad;
        if !need_w && !need_x {
            return;
        }

        let ck2 = c * k * k;
        let mut cols = vec![S::zero(); ck2 * plane];
        let mut dw = if need_w { vec![S::zero(); o * ck2] } else { Vec::new() };
        let mut dx = if need_x { vec![S::zero(); ti.numel()] } else { Vec::new() };
        let wt = if need_x { transpose2(tw.data(), o, ck2) } else { Vec::new() };

        for s in 0..n {
            let g_s = &g[s * o * plane..(s + 1) * o * plane];
            if need_w {
                im2col(ti, s, k, padding, ho, wo, &mut cols);
                let colst = transpose2(&cols, ck2, plane);
                matmul_accumulate(g_s, &colst, o, plane, ck2, &mut dw);
            }
            if need_x {
                let mut dcols = vec![S::zero(); ck2 * plane];
                matmul_accumulate(&wt, g_s, ck2, o, plane, &mut dcols);
                col2im_accumulate(&dcols, s, c, h, w, k, padding, ho, wo, &mut dx);
            }
        }

        if need_w {
            self.accum(grads, weight, |buf| {
                for (ov, &v) in buf.iter_mut().zip(&dw) {
                    *ov = *ov + v;
                }
            });
        }
        if need_x {
            self.accum(grads, input, |buf| {
                for (ov, &v) in buf.iter_mut().zip(&dx) {
                    *ov = *ov + v;
                }
            });
        }
    }
}

/// Lay out the k×k patches of sample `s` as a (C·k²)×(H'·W') matrix.
fn im2col<S: Scalar>(
    input: &Tensor<S>,
    s: usize,
    k: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    cols: &mut [S],
) {
    let (c, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let plane = ho * wo;
    cols.fill(S::zero());
    for ch in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let row = (ch * k + dy) * k + dx;
                for y in 0..ho {
                    let sy = y + dy;
                    if sy < padding || sy >= h + padding {
                        continue;
                    }
                    let sy = sy - padding;
                    for x in 0..wo {
                        let sx = x + dx;
                        if sx < padding || sx >= w + padding {
                            continue;
                        }
                        cols[row * plane + y * wo + x] = input.at4(s, ch, sy, sx - padding);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_accumulate<S: Scalar>(
    dcols: &[S],
    s: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    dx: &mut [S],
) {
    let plane = ho * wo;
    for ch in 0..c {
        for dy in 0..k {
            for dxo in 0..k {
                let row = (ch * k + dy) * k + dxo;
                for y in 0..ho {
                    let sy = y + dy;
                    if sy < padding || sy >= h + padding {
                        continue;
                    }
                    let sy = sy - padding;
                    for x in 0..wo {
                        let sx = x + dxo;
                        if sx < padding || sx >= w + padding {
                            continue;
                        }
                        let f = ((s * c + ch) * h + sy) * w + sx - padding;
                        dx[f] = dx[f] + dcols[row * plane + y * wo + x];
                    }
                }
            }
        }
    }
}

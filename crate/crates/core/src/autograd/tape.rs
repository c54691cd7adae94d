//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because inputs always precede outputs.

use std::cell::RefCell;
use std::rc::Rc;

use super::gemm::{gemm, MatRef};
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Im2Col1d { x: Var, kernel: usize, stride: usize, pad: usize },
    Im2Col2d { x: Var, geom: Conv2dGeometry },
    Upsample { x: Var, factor: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    SumAll(Var),
    Bce { prob: Var, target: Rc<Tensor>, clamp: f64 },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Spatial layout for a 2-D convolution over a `[(h * w) x channels]`
/// feature map stored row-major by pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Output length of a 1-D convolution.
pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Trainable input.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let am = MatRef::new(av.data(), av.rows(), av.cols(), ta);
        let bm = MatRef::new(bv.data(), bv.rows(), bv.cols(), tb);
        let (m, k) = am.dims();
        let (k2, n) = bm.dims();
        assert_eq!(k, k2, "matmul: {m}x{k} by {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(am, bm, 0.0, &mut out);
        let rg = self.needs(&[a, b]);
        self.push(Tensor::new(m, n, out), Op::MatMul { a, b, ta, tb }, rg)
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "elementwise op shape mismatch");
        Tensor::new(
            av.rows(),
            av.cols(),
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.zip_same(a, b, |x, y| x + y);
        let rg = self.needs(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.zip_same(a, b, |x, y| x - y);
        let rg = self.needs(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.zip_same(a, b, |x, y| x * y);
        let rg = self.needs(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    fn row_broadcast(&self, x: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let xv = self.value(x);
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1, "row broadcast operand must have one row");
        assert_eq!(rv.cols(), xv.cols(), "row broadcast width mismatch");
        let cols = xv.cols();
        let r = rv.data();
        Tensor::new(
            xv.rows(),
            cols,
            xv.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| f(v, r[i % cols]))
                .collect(),
        )
    }

    /// `x + row` with `row` of shape `1 x cols` broadcast over rows.
    pub fn add_row(&self, x: Var, row: Var) -> Var {
        let v = self.row_broadcast(x, row, |a, b| a + b);
        let rg = self.needs(&[x, row]);
        self.push(v, Op::AddRow(x, row), rg)
    }

    pub fn mul_row(&self, x: Var, row: Var) -> Var {
        let v = self.row_broadcast(x, row, |a, b| a * b);
        let rg = self.needs(&[x, row]);
        self.push(v, Op::MulRow(x, row), rg)
    }

    /// `x * col` with `col` of shape `rows x 1` broadcast over columns.
    pub fn mul_col(&self, x: Var, col: Var) -> Var {
        let xv = self.value(x);
        let cv = self.value(col);
        assert_eq!(cv.cols(), 1, "column broadcast operand must have one column");
        assert_eq!(cv.rows(), xv.rows(), "column broadcast height mismatch");
        let cols = xv.cols();
        let c = cv.data();
        let v = Tensor::new(
            xv.rows(),
            cols,
            xv.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v * c[i / cols])
                .collect(),
        );
        let rg = self.needs(&[x, col]);
        self.push(v, Op::MulCol(x, col), rg)
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a * s);
        let rg = self.needs(&[x]);
        self.push(v, Op::Scale(x, s), rg)
    }

    pub fn silu(&self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        let rg = self.needs(&[x]);
        self.push(v, Op::Silu(x), rg)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.needs(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    /// Row-wise softmax. Columns where `key_mask` is false get weight zero;
    /// every row must keep at least one unmasked column.
    pub fn softmax_rows(&self, x: Var, key_mask: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        if let Some(m) = key_mask {
            assert_eq!(m.len(), cols, "softmax mask width mismatch");
            assert!(m.iter().any(|&k| k), "softmax row with every key masked");
        }
        let keep = |c: usize| key_mask.map_or(true, |m| m[c]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = xv.row_slice(r);
            let max = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for c in 0..cols {
                if keep(c) {
                    let e = (row[c] - max).exp();
                    o[c] = e;
                    sum += e;
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.needs(&[x]);
        self.push(Tensor::new(rows, cols, out), Op::Softmax(x), rg)
    }

    /// Row-wise normalization to zero mean, unit variance; no learned gain.
    pub fn layer_norm(&self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = vec![0.0; rows * cols];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * rs;
            }
        }
        let rg = self.needs(&[x]);
        self.push(Tensor::new(rows, cols, out), Op::LayerNorm { x, rstd }, rg)
    }

    /// Unfolds `[len x ch]` into `[out_len x (kernel * ch)]`; column
    /// `j * ch + c` of output row `o` reads input row `o * stride + j - pad`
    /// (zero outside the sequence).
    pub fn im2col_1d(&self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let (len, ch) = xv.shape();
        let out_len = conv1d_out_len(len, kernel, stride, pad);
        let width = kernel * ch;
        let mut out = vec![0.0; out_len * width];
        for o in 0..out_len {
            for j in 0..kernel {
                let src = (o * stride + j) as isize - pad as isize;
                if src < 0 || src as usize >= len {
                    continue;
                }
                let dst = o * width + j * ch;
                out[dst..dst + ch].copy_from_slice(xv.row_slice(src as usize));
            }
        }
        let rg = self.needs(&[x]);
        self.push(
            Tensor::new(out_len, width, out),
            Op::Im2Col1d {
                x,
                kernel,
                stride,
                pad,
            },
            rg,
        )
    }

    /// 2-D analogue of [`Tape::im2col_1d`]; column order is
    /// `(ky * kernel + kx) * ch + c`.
    pub fn im2col_2d(&self, x: Var, geom: Conv2dGeometry) -> Var {
        let xv = self.value(x);
        let ch = xv.cols();
        assert_eq!(xv.rows(), geom.height * geom.width, "im2col_2d geometry");
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let k = geom.kernel;
        let width = k * k * ch;
        let mut out = vec![0.0; oh * ow * width];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * width;
                for ky in 0..k {
                    let sy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if sy < 0 || sy as usize >= geom.height {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if sx < 0 || sx as usize >= geom.width {
                            continue;
                        }
                        let src = sy as usize * geom.width + sx as usize;
                        let dst = base + (ky * k + kx) * ch;
                        out[dst..dst + ch].copy_from_slice(xv.row_slice(src));
                    }
                }
            }
        }
        let rg = self.needs(&[x]);
        self.push(
            Tensor::new(oh * ow, width, out),
            Op::Im2Col2d { x, geom },
            rg,
        )
    }

    /// Nearest-neighbour upsampling along rows: output row `i` copies input
    /// row `min(i / factor, rows - 1)`.
    pub fn upsample_rows(&self, x: Var, factor: usize, out_len: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Vec::with_capacity(out_len * cols);
        for i in 0..out_len {
            out.extend_from_slice(xv.row_slice((i / factor).min(rows - 1)));
        }
        let rg = self.needs(&[x]);
        self.push(Tensor::new(out_len, cols, out), Op::Upsample { x, factor }, rg)
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert!(start + len <= cols, "slice_cols out of range");
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row_slice(r)[start..start + len]);
        }
        let rg = self.needs(&[x]);
        self.push(Tensor::new(rows, len, out), Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = values[0].rows();
        assert!(values.iter().all(|v| v.rows() == rows), "concat_cols rows");
        let cols: usize = values.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row_slice(r));
            }
        }
        let rg = self.needs(parts);
        self.push(Tensor::new(rows, cols, out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let cols = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(tv.row_slice(i));
        }
        let rg = self.needs(&[table]);
        self.push(
            Tensor::new(ids.len(), cols, out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Sum over elements of `-t log p - (1 - t) log(1 - p)`, with `p`
    /// clamped to `[clamp, 1 - clamp]`. The clamp has zero gradient where it
    /// is active.
    pub fn bce_sum(&self, prob: Var, target: Rc<Tensor>, clamp: f64) -> Var {
        let pv = self.value(prob);
        assert_eq!(pv.shape(), target.shape(), "bce shape mismatch");
        let s = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(clamp, 1.0 - clamp);
                -t * p.ln() - (1.0 - t) * (1.0 - p).ln()
            })
            .sum();
        let rg = self.needs(&[prob]);
        self.push(Tensor::scalar(s), Op::Bce { prob, target, clamp }, rg)
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs = |v: &Var| nodes[v.0].requires_grad;
            let val = |v: &Var| nodes[v.0].value.clone();
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul { a, b, ta, tb } => {
                    let av = val(a);
                    let bv = val(b);
                    let gm = MatRef::new(g.data(), g.rows(), g.cols(), false);
                    let gt = MatRef::new(g.data(), g.rows(), g.cols(), true);
                    let am = |t| MatRef::new(av.data(), av.rows(), av.cols(), t);
                    let bm = |t| MatRef::new(bv.data(), bv.rows(), bv.cols(), t);
                    if needs(a) {
                        let ga = slot(&mut grads, *a, av.shape());
                        if !ta {
                            gemm(gm, bm(!tb), 1.0, ga.data_mut());
                        } else {
                            gemm(bm(*tb), gt, 1.0, ga.data_mut());
                        }
                    }
                    if needs(b) {
                        let gb = slot(&mut grads, *b, bv.shape());
                        if !tb {
                            gemm(am(!ta), gm, 1.0, gb.data_mut());
                        } else {
                            gemm(gt, am(*ta), 1.0, gb.data_mut());
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if needs(v) {
                            slot(&mut grads, *v, g.shape()).add_assign(&g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if needs(a) {
                        slot(&mut grads, *a, g.shape()).add_assign(&g);
                    }
                    if needs(b) {
                        let gb = slot(&mut grads, *b, g.shape());
                        for (d, s) in gb.data_mut().iter_mut().zip(g.data()) {
                            *d -= s;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let av = val(a);
                    let bv = val(b);
                    if needs(a) {
                        let ga = slot(&mut grads, *a, g.shape());
                        for ((d, s), o) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                            *d += s * o;
                        }
                    }
                    if needs(b) {
                        let gb = slot(&mut grads, *b, g.shape());
                        for ((d, s), o) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                            *d += s * o;
                        }
                    }
                }
                Op::AddRow(x, row) => {
                    if needs(x) {
                        slot(&mut grads, *x, g.shape()).add_assign(&g);
                    }
                    if needs(row) {
                        let cols = g.cols();
                        let gr = slot(&mut grads, *row, (1, cols));
                        let d = gr.data_mut();
                        for (k, s) in g.data().iter().enumerate() {
                            d[k % cols] += s;
                        }
                    }
                }
                Op::MulRow(x, row) => {
                    let xv = val(x);
                    let rv = val(row);
                    let cols = g.cols();
                    if needs(x) {
                        let gx = slot(&mut grads, *x, g.shape());
                        let r = rv.data();
                        for (k, (d, s)) in gx.data_mut().iter_mut().zip(g.data()).enumerate() {
                            *d += s * r[k % cols];
                        }
                    }
                    if needs(row) {
                        let gr = slot(&mut grads, *row, (1, cols));
                        let d = gr.data_mut();
                        for (k, (s, xk)) in g.data().iter().zip(xv.data()).enumerate() {
                            d[k % cols] += s * xk;
                        }
                    }
                }
                Op::MulCol(x, col) => {
                    let xv = val(x);
                    let cv = val(col);
                    let cols = g.cols();
                    if needs(x) {
                        let gx = slot(&mut grads, *x, g.shape());
                        let c = cv.data();
                        for (k, (d, s)) in gx.data_mut().iter_mut().zip(g.data()).enumerate() {
                            *d += s * c[k / cols];
                        }
                    }
                    if needs(col) {
                        let gc = slot(&mut grads, *col, (g.rows(), 1));
                        let d = gc.data_mut();
                        for (k, (s, xk)) in g.data().iter().zip(xv.data()).enumerate() {
                            d[k / cols] += s * xk;
                        }
                    }
                }
                Op::Scale(x, s) => {
                    if needs(x) {
                        let gx = slot(&mut grads, *x, g.shape());
                        for (d, v) in gx.data_mut().iter_mut().zip(g.data()) {
                            *d += s * v;
                        }
                    }
                }
                Op::Silu(x) => {
                    if needs(x) {
                        let xv = val(x);
                        let gx = slot(&mut grads, *x, g.shape());
                        for ((d, s), &a) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                            let sg = sigmoid(a);
                            *d += s * sg * (1.0 + a * (1.0 - sg));
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if needs(x) {
                        let y = &node.value;
                        let gx = slot(&mut grads, *x, g.shape());
                        for ((d, s), &yv) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                            *d += s * yv * (1.0 - yv);
                        }
                    }
                }
                Op::Softmax(x) => {
                    if needs(x) {
                        let y = &node.value;
                        let cols = y.cols();
                        let gx = slot(&mut grads, *x, g.shape());
                        for r in 0..y.rows() {
                            let yr = y.row_slice(r);
                            let gr = g.row_slice(r);
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            let d = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                            for c in 0..cols {
                                d[c] += yr[c] * (gr[c] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, rstd } => {
                    if needs(x) {
                        let y = &node.value;
                        let cols = y.cols();
                        let n = cols as f64;
                        let gx = slot(&mut grads, *x, g.shape());
                        for r in 0..y.rows() {
                            let yr = y.row_slice(r);
                            let gr = g.row_slice(r);
                            let sum_g: f64 = gr.iter().sum();
                            let sum_gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            let d = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                            for c in 0..cols {
                                d[c] += rstd[r] / n * (n * gr[c] - sum_g - yr[c] * sum_gy);
                            }
                        }
                    }
                }
                Op::Im2Col1d {
                    x,
                    kernel,
                    stride,
                    pad,
                } => {
                    if needs(x) {
                        let (len, ch) = nodes[x.0].value.shape();
                        let gx = slot(&mut grads, *x, (len, ch));
                        let width = kernel * ch;
                        let d = gx.data_mut();
                        for o in 0..g.rows() {
                            for j in 0..*kernel {
                                let src = (o * stride + j) as isize - *pad as isize;
                                if src < 0 || src as usize >= len {
                                    continue;
                                }
                                let s = src as usize * ch;
                                let from = &g.data()[o * width + j * ch..o * width + (j + 1) * ch];
                                for (dd, v) in d[s..s + ch].iter_mut().zip(from) {
                                    *dd += v;
                                }
                            }
                        }
                    }
                }
                Op::Im2Col2d { x, geom } => {
                    if needs(x) {
                        let (n, ch) = nodes[x.0].value.shape();
                        let gx = slot(&mut grads, *x, (n, ch));
                        let d = gx.data_mut();
                        let (oh, ow) = (geom.out_height(), geom.out_width());
                        let k = geom.kernel;
                        let width = k * k * ch;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let base = (oy * ow + ox) * width;
                                for ky in 0..k {
                                    let sy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                    if sy < 0 || sy as usize >= geom.height {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let sx =
                                            (ox * geom.stride + kx) as isize - geom.pad as isize;
                                        if sx < 0 || sx as usize >= geom.width {
                                            continue;
                                        }
                                        let s = (sy as usize * geom.width + sx as usize) * ch;
                                        let f = base + (ky * k + kx) * ch;
                                        for (dd, v) in
                                            d[s..s + ch].iter_mut().zip(&g.data()[f..f + ch])
                                        {
                                            *dd += v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Upsample { x, factor } => {
                    if needs(x) {
                        let (rows, cols) = nodes[x.0].value.shape();
                        let gx = slot(&mut grads, *x, (rows, cols));
                        let d = gx.data_mut();
                        for i in 0..g.rows() {
                            let src = (i / factor).min(rows - 1);
                            for (dd, v) in d[src * cols..(src + 1) * cols]
                                .iter_mut()
                                .zip(g.row_slice(i))
                            {
                                *dd += v;
                            }
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    if needs(x) {
                        let (rows, cols) = nodes[x.0].value.shape();
                        let len = g.cols();
                        let gx = slot(&mut grads, *x, (rows, cols));
                        let d = gx.data_mut();
                        for r in 0..rows {
                            for (dd, v) in d[r * cols + start..r * cols + start + len]
                                .iter_mut()
                                .zip(g.row_slice(r))
                            {
                                *dd += v;
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = nodes[p.0].value.shape();
                        if needs(p) {
                            let gp = slot(&mut grads, *p, (rows, cols));
                            let d = gp.data_mut();
                            for r in 0..rows {
                                for (dd, v) in d[r * cols..(r + 1) * cols]
                                    .iter_mut()
                                    .zip(&g.row_slice(r)[offset..offset + cols])
                                {
                                    *dd += v;
                                }
                            }
                        }
                        offset += cols;
                    }
                }
                Op::GatherRows { table, ids } => {
                    if needs(table) {
                        let shape = nodes[table.0].value.shape();
                        let cols = shape.1;
                        let gt = slot(&mut grads, *table, shape);
                        let d = gt.data_mut();
                        for (r, &id) in ids.iter().enumerate() {
                            for (dd, v) in d[id * cols..(id + 1) * cols]
                                .iter_mut()
                                .zip(g.row_slice(r))
                            {
                                *dd += v;
                            }
                        }
                    }
                }
                Op::SumAll(x) => {
                    if needs(x) {
                        let shape = nodes[x.0].value.shape();
                        let s = g.item();
                        let gx = slot(&mut grads, *x, shape);
                        gx.data_mut().iter_mut().for_each(|d| *d += s);
                    }
                }
                Op::Bce {
                    prob,
                    target,
                    clamp,
                } => {
                    if needs(prob) {
                        let pv = val(prob);
                        let s = g.item();
                        let gp = slot(&mut grads, *prob, pv.shape());
                        for ((d, &p), &t) in gp.data_mut().iter_mut().zip(pv.data()).zip(target.data())
                        {
                            if p <= *clamp || p >= 1.0 - clamp {
                                continue;
                            }
                            *d += s * (-t / p + (1.0 - t) / (1.0 - p));
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn slot(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(w * f(inputs)))/d(inputs).
    fn check(inputs: Vec<Tensor>, f: impl Fn(&Tape, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe_shape = {
            let tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
            tape.shape(f(&tape, &vars))
        };
        let w = rand_tensor(&mut rng, probe_shape.0, probe_shape.1);
        let eval = |inputs: &[Tensor]| -> (f64, Vec<Tensor>) {
            let tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
            let out = f(&tape, &vars);
            let wv = tape.constant(w.clone());
            let loss = tape.sum_all(tape.mul(out, wv));
            let mut g = tape.backward(loss);
            let grads = vars
                .iter()
                .zip(inputs)
                .map(|(v, t)| g.take(*v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
                .collect();
            (tape.value(loss).item(), grads)
        };
        let (_, analytic) = eval(&inputs);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = analytic[k].data()[i];
                let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} elem {i}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn matmul_all_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rand_tensor(&mut rng, 4, 3) } else { rand_tensor(&mut rng, 3, 4) };
            let b = if tb { rand_tensor(&mut rng, 5, 4) } else { rand_tensor(&mut rng, 4, 5) };
            check(vec![a, b], move |t, v| t.matmul_t(v[0], ta, v[1], tb));
        }
    }

    #[test]
    fn matmul_values() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(Tensor::new(2, 1, vec![5.0, 6.0]));
        assert_eq!(tape.value(tape.matmul(a, b)).data(), &[17.0, 39.0]);
        let c = tape.matmul_t(a, true, a, false);
        assert_eq!(tape.value(c).data(), &[10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    fn elementwise_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, 3, 4);
        let y = rand_tensor(&mut rng, 3, 4);
        let r = rand_tensor(&mut rng, 1, 4);
        let c = rand_tensor(&mut rng, 3, 1);
        check(vec![x.clone(), y.clone()], |t, v| t.add(v[0], v[1]));
        check(vec![x.clone(), y.clone()], |t, v| t.sub(v[0], v[1]));
        check(vec![x.clone(), y], |t, v| t.mul(v[0], v[1]));
        check(vec![x.clone(), r.clone()], |t, v| t.add_row(v[0], v[1]));
        check(vec![x.clone(), r], |t, v| t.mul_row(v[0], v[1]));
        check(vec![x.clone(), c], |t, v| t.mul_col(v[0], v[1]));
        check(vec![x], |t, v| t.scale(v[0], -2.5));
    }

    #[test]
    fn nonlinearities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 3, 5).map(|v| 3.0 * v);
        check(vec![x.clone()], |t, v| t.silu(v[0]));
        check(vec![x.clone()], |t, v| t.sigmoid(v[0]));
        check(vec![x.clone()], |t, v| t.softmax_rows(v[0], None));
        let mask = [true, false, true, true, false];
        check(vec![x.clone()], move |t, v| t.softmax_rows(v[0], Some(&mask)));
        check(vec![x], |t, v| t.layer_norm(v[0], 1e-5));
    }

    #[test]
    fn softmax_mask_and_normalization() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(2, 3, vec![1.0, 5.0, -2.0, 0.0, 0.0, 0.0]));
        let y = tape.value(tape.softmax_rows(x, Some(&[true, false, true])));
        assert_eq!(y.get(0, 1), 0.0);
        for r in 0..2 {
            let s: f64 = y.row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((y.get(1, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reshaping_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 7, 3);
        check(vec![x.clone()], |t, v| t.im2col_1d(v[0], 3, 1, 1));
        check(vec![x.clone()], |t, v| t.im2col_1d(v[0], 3, 2, 1));
        check(vec![x.clone()], |t, v| t.upsample_rows(v[0], 2, 13));
        check(vec![x.clone()], |t, v| t.slice_cols(v[0], 1, 2));
        let y = rand_tensor(&mut rng, 7, 2);
        check(vec![x.clone(), y], |t, v| t.concat_cols(&[v[0], v[1], v[0]]));
        check(vec![x.clone()], |t, v| t.gather_rows(v[0], &[2, 0, 2, 6]));
        let img = rand_tensor(&mut rng, 5 * 6, 2);
        let geom = Conv2dGeometry {
            height: 5,
            width: 6,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        check(vec![img], move |t, v| t.im2col_2d(v[0], geom));
    }

    #[test]
    fn bce_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Tensor::from_fn(4, 1, |_, _| rng.gen_range(0.1..0.9));
        let target = Rc::new(Tensor::new(4, 1, vec![0.0, 1.0, 1.0, 0.0]));
        check(vec![p], move |t, v| t.bce_sum(v[0], target.clone(), 1e-7));
    }

    #[test]
    fn im2col_layout() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(3, 1, vec![1.0, 2.0, 3.0]));
        let cols = tape.value(tape.im2col_1d(x, 3, 1, 1));
        assert_eq!(cols.data(), &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let a = tape.param(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(3.0));
        let y = tape.mul(a, b);
        let g = tape.backward(y);
        assert_eq!(g.get(a).unwrap().item(), 3.0);
        assert!(g.get(b).is_none());
    }
}

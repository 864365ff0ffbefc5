//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are computed
//! eagerly; [`Tape::backward`] then walks the records in reverse, so every
//! node's gradient is complete before it is propagated further.

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a * b`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let av = a.data[i * a.cols + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a * b^T`.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimension");
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * b`.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dimension");
    let mut out = Mat::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let brow = b.row(k);
        for i in 0..a.cols {
            let av = a.data[k * a.cols + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub type Var = usize;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// Adds a `1 x c` row to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Elementwise product with a constant (dropout masks).
    MulConst(Var, Vec<f64>),
    Relu(Var),
    SoftmaxRows(Var),
    /// Row-wise normalization with gain and bias; caches normalized rows and inverse stds.
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v].value
    }

    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_nt(self.value(a), self.value(b));
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shapes");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let v = Mat::from_vec(x.rows, x.cols, data);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "add_row shapes");
        let mut v = x.clone();
        for chunk in v.data.chunks_exact_mut(x.cols) {
            for (o, b) in chunk.iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.data.len(), c.len(), "mul_const length");
        v.data.iter_mut().zip(&c).for_each(|(x, m)| *x *= m);
        self.push(v, Op::MulConst(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for row in v.data.chunks_exact_mut(v.cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!((g.rows, g.cols), (1, xv.cols), "layer_norm gain shape");
        let c = xv.cols;
        let mut xhat = Vec::with_capacity(xv.data.len());
        let mut inv_std = Vec::with_capacity(xv.rows);
        let mut out = Mat::zeros(xv.rows, c);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(s);
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat.push(h);
                out.data[r * c + j] = h * g.data[j] + b.data[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, &val) in v.data.iter_mut().zip(x.row(r)) {
                *o += val;
            }
        }
        let n = x.rows as f64;
        v.data.iter_mut().for_each(|o| *o /= n);
        self.push(v, Op::MeanRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows, rows, "concat_cols rows");
                v.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
                off += m.cols;
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols range");
        let mut v = Mat::zeros(x.rows, len);
        for r in 0..x.rows {
            v.data[r * len..(r + 1) * len].copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    /// Backpropagates from the given seeds and returns one gradient slot per
    /// node; nodes that do not influence any seed get `None`.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = matmul_nt(&g, self.value(*b));
                    let gb = matmul_tn(self.value(*a), &g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    // out = a b^T: d a = g b, d b = g^T a
                    let ga = matmul(&g, self.value(*b));
                    let gb = matmul_tn(&g, self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let mut gr = Mat::zeros(1, g.cols);
                    for chunk in g.data.chunks_exact(g.cols) {
                        for (o, v) in gr.data.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, gr);
                }
                Op::Scale(a, s) => {
                    let mut ga = g.clone();
                    ga.data.iter_mut().for_each(|x| *x *= s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::MulConst(a, c) => {
                    let mut ga = g.clone();
                    ga.data.iter_mut().zip(c).for_each(|(x, m)| *x *= m);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    ga.data
                        .iter_mut()
                        .zip(&node.value.data)
                        .for_each(|(x, &y)| if y <= 0.0 { *x = 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let mut ga = Mat::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for j in 0..p.cols {
                            ga.data[r * p.cols + j] = pr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma);
                    let (rows, c) = (g.rows, g.cols);
                    let mut gx = Mat::zeros(rows, c);
                    let mut gg = Mat::zeros(1, c);
                    let mut gb = Mat::zeros(1, c);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gam.data[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                            gg.data[j] += gr[j] * hr[j];
                            gb.data[j] += gr[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let d = gr[j] * gam.data[j];
                            gx.data[r * c + j] = inv_std[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Op::MeanRows(a) => {
                    let n = self.value(*a).rows;
                    let mut ga = Mat::zeros(n, g.cols);
                    for r in 0..n {
                        for j in 0..g.cols {
                            ga.data[r * g.cols + j] = g.data[j] / n as f64;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols;
                        let mut gp = Mat::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            gp.data[r * pc..(r + 1) * pc].copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        off += pc;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for r in 0..g.rows {
                        ga.data[r * x.cols + start..r * x.cols + start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

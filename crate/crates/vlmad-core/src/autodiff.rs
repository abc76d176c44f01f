//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] records matrix-level operations during a forward pass and
//! replays them in reverse to accumulate gradients. All values are `f64`;
//! double precision is the reference numeric mode for every gradient-checked
//! path in this crate.
//!
//! The op set is deliberately small: just what the attention heads, the loss
//! stack, and the toy planner need.

/// Epsilon added inside every log for numerical stability.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Elementwise a + b, same shape.
    Add(Var, Var),
    /// Elementwise a - b.
    Sub(Var, Var),
    /// Elementwise a * b (Hadamard).
    Mul(Var, Var),
    /// Matrix plus a broadcast 1 x cols row vector.
    AddRow(Var, Var),
    /// a * c + d elementwise; only the scale matters for the backward pass.
    Affine(Var, f64),
    /// a @ b.
    MatMul(Var, Var),
    /// a @ b^T.
    MatMulBT(Var, Var),
    /// Row-wise softmax with max subtraction.
    SoftmaxRows(Var),
    /// ln(1 + e^x), the smooth rectifier used by all MLPs here.
    Softplus(Var),
    /// ln(x + LOG_EPS).
    Log(Var),
    /// sqrt(x).
    Sqrt(Var),
    /// 1 / x.
    Recip(Var),
    /// [a | b] column-wise.
    ConcatCols(Var, Var),
    /// [a; b] row-wise.
    ConcatRows(Var, Var),
    /// Columns start..start+cols of the source.
    SliceCols(Var, usize),
    /// Mean over rows: L x D -> 1 x D.
    MeanRows(Var),
    /// Sum of all entries -> 1 x 1.
    SumAll(Var),
    /// Same data, new shape.
    Reshape(Var),
    /// Transpose.
    Transpose(Var),
    /// Row-wise L2 normalization.
    NormalizeRows(Var),
    /// Per-row layer normalization (no learnable affine).
    LayerNormRows(Var),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Gradient tape. Build a fresh one per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            rows,
            cols,
            value,
            grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols, "leaf shape mismatch");
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(1, 1, vec![value])
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.nodes[v.0].value[0]
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let (r, c) = self.shape(a);
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(r, c, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let (r, c) = self.shape(a);
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        self.push(r, c, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let (r, c) = self.shape(a);
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        self.push(r, c, v, Op::Mul(a, b))
    }

    /// Matrix + broadcast row vector (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        assert_eq!((rr, rc), (1, c), "add_row: bias shape mismatch");
        let mut v = self.nodes[a.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                v[i * c + j] += self.nodes[row.0].value[j];
            }
        }
        self.push(r, c, v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn add_const(&mut self, a: Var, d: f64) -> Var {
        self.affine(a, 1.0, d)
    }

    pub fn affine(&mut self, a: Var, s: f64, d: f64) -> Var {
        let (r, c) = self.shape(a);
        let v = self.nodes[a.0].value.iter().map(|x| x * s + d).collect();
        self.push(r, c, v, Op::Affine(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul: inner dimension mismatch");
        let mut v = vec![0.0; ar * bc];
        for i in 0..ar {
            for k in 0..ac {
                let aik = self.nodes[a.0].value[i * ac + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..bc {
                    v[i * bc + j] += aik * self.nodes[b.0].value[k * bc + j];
                }
            }
        }
        self.push(ar, bc, v, Op::MatMul(a, b))
    }

    /// a @ b^T.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, bc, "matmul_bt: inner dimension mismatch");
        let mut v = vec![0.0; ar * br];
        for i in 0..ar {
            for j in 0..br {
                let mut s = 0.0;
                for k in 0..ac {
                    s += self.nodes[a.0].value[i * ac + k] * self.nodes[b.0].value[j * bc + k];
                }
                v[i * br + j] = s;
            }
        }
        self.push(ar, br, v, Op::MatMulBT(a, b))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[a.0].value[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                v[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                v[i * c + j] /= z;
            }
        }
        self.push(r, c, v, Op::SoftmaxRows(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.nodes[a.0].value.iter().map(|&x| softplus(x)).collect();
        self.push(r, c, v, Op::Softplus(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self
            .nodes[a.0]
            .value
            .iter()
            .map(|&x| (x + LOG_EPS).ln())
            .collect();
        self.push(r, c, v, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.nodes[a.0].value.iter().map(|&x| x.sqrt()).collect();
        self.push(r, c, v, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.nodes[a.0].value.iter().map(|&x| 1.0 / x).collect();
        self.push(r, c, v, Op::Recip(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ar, br, "concat_cols: row count mismatch");
        let cols = ac + bc;
        let mut v = vec![0.0; ar * cols];
        for i in 0..ar {
            v[i * cols..i * cols + ac]
                .copy_from_slice(&self.nodes[a.0].value[i * ac..(i + 1) * ac]);
            v[i * cols + ac..(i + 1) * cols]
                .copy_from_slice(&self.nodes[b.0].value[i * bc..(i + 1) * bc]);
        }
        self.push(ar, cols, v, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, bc, "concat_rows: column count mismatch");
        let mut v = self.nodes[a.0].value.clone();
        v.extend_from_slice(&self.nodes[b.0].value);
        self.push(ar + br, ac, v, Op::ConcatRows(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols: out of range");
        let mut v = vec![0.0; r * len];
        for i in 0..r {
            v[i * len..(i + 1) * len]
                .copy_from_slice(&self.nodes[a.0].value[i * c + start..i * c + start + len]);
        }
        self.push(r, len, v, Op::SliceCols(a, start))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut v = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                v[j] += self.nodes[a.0].value[i * c + j];
            }
        }
        for x in &mut v {
            *x /= r as f64;
        }
        self.push(1, c, v, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        self.push(1, 1, vec![s], Op::SumAll(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r * c, rows * cols, "reshape: element count mismatch");
        let v = self.nodes[a.0].value.clone();
        self.push(rows, cols, v, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = self.nodes[a.0].value[i * c + j];
            }
        }
        self.push(c, r, v, Op::Transpose(a))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[a.0].value[i * c..(i + 1) * c];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for j in 0..c {
                v[i * c + j] = row[j] / norm;
            }
        }
        self.push(r, c, v, Op::NormalizeRows(a))
    }

    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-6;
        let (r, c) = self.shape(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[a.0].value[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for j in 0..c {
                v[i * c + j] = (row[j] - mean) * inv;
            }
        }
        self.push(r, c, v, Op::LayerNormRows(a))
    }

    /// Backpropagate from a scalar node, accumulating gradients on every
    /// node reachable from it.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.shape(root), (1, 1), "backward: root must be scalar");
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[root.0].grad[0] = 1.0;
        for idx in (0..=root.0).rev() {
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = self.nodes[idx].grad.clone();
                    add_assign(&mut self.nodes[a.0].grad, &g);
                    add_assign(&mut self.nodes[b.0].grad, &g);
                }
                Op::Sub(a, b) => {
                    let g = self.nodes[idx].grad.clone();
                    add_assign(&mut self.nodes[a.0].grad, &g);
                    sub_assign(&mut self.nodes[b.0].grad, &g);
                }
                Op::Mul(a, b) => {
                    let g = self.nodes[idx].grad.clone();
                    let bv = self.nodes[b.0].value.clone();
                    for (ga, (gi, bi)) in
                        self.nodes[a.0].grad.iter_mut().zip(g.iter().zip(&bv))
                    {
                        *ga += gi * bi;
                    }
                    let av = self.nodes[a.0].value.clone();
                    for (gb, (gi, ai)) in
                        self.nodes[b.0].grad.iter_mut().zip(g.iter().zip(&av))
                    {
                        *gb += gi * ai;
                    }
                }
                Op::AddRow(a, row) => {
                    let g = self.nodes[idx].grad.clone();
                    add_assign(&mut self.nodes[a.0].grad, &g);
                    let (r, c) = self.shape(a);
                    for i in 0..r {
                        for j in 0..c {
                            self.nodes[row.0].grad[j] += g[i * c + j];
                        }
                    }
                }
                Op::Affine(a, s) => {
                    let g = self.nodes[idx].grad.clone();
                    for (ga, gi) in self.nodes[a.0].grad.iter_mut().zip(&g) {
                        *ga += gi * s;
                    }
                }
                Op::MatMul(a, b) => {
                    let g = self.nodes[idx].grad.clone();
                    let (ar, ac) = self.shape(a);
                    let (_, bc) = self.shape(b);
                    // dA = G @ B^T
                    for i in 0..ar {
                        for k in 0..ac {
                            let mut s = 0.0;
                            for j in 0..bc {
                                s += g[i * bc + j] * self.nodes[b.0].value[k * bc + j];
                            }
                            self.nodes[a.0].grad[i * ac + k] += s;
                        }
                    }
                    // dB = A^T @ G
                    for k in 0..ac {
                        for j in 0..bc {
                            let mut s = 0.0;
                            for i in 0..ar {
                                s += self.nodes[a.0].value[i * ac + k] * g[i * bc + j];
                            }
                            self.nodes[b.0].grad[k * bc + j] += s;
                        }
                    }
                }
                Op::MatMulBT(a, b) => {
                    let g = self.nodes[idx].grad.clone();
                    let (ar, ac) = self.shape(a);
                    let (br, _) = self.shape(b);
                    // out = A @ B^T, out is ar x br
                    // dA = G @ B
                    for i in 0..ar {
                        for k in 0..ac {
                            let mut s = 0.0;
                            for j in 0..br {
                                s += g[i * br + j] * self.nodes[b.0].value[j * ac + k];
                            }
                            self.nodes[a.0].grad[i * ac + k] += s;
                        }
                    }
                    // dB = G^T @ A
                    for j in 0..br {
                        for k in 0..ac {
                            let mut s = 0.0;
                            for i in 0..ar {
                                s += g[i * br + j] * self.nodes[a.0].value[i * ac + k];
                            }
                            self.nodes[b.0].grad[j * ac + k] += s;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (r, c) = self.shape(a);
                    let g = self.nodes[idx].grad.clone();
                    let y = self.nodes[idx].value.clone();
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g[i * c + j] * y[i * c + j]).sum();
                        for j in 0..c {
                            self.nodes[a.0].grad[i * c + j] +=
                                y[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                }
                Op::Softplus(a) => {
                    let g = self.nodes[idx].grad.clone();
                    let av = self.nodes[a.0].value.clone();
                    for (ga, (gi, x)) in
                        self.nodes[a.0].grad.iter_mut().zip(g.iter().zip(&av))
                    {
                        *ga += gi * sigmoid(*x);
                    }
                }
                Op::Log(a) => {
                    let g = self.nodes[idx].grad.clone();
                    let av = self.nodes[a.0].value.clone();
                    for (ga, (gi, x)) in
                        self.nodes[a.0].grad.iter_mut().zip(g.iter().zip(&av))
                    {
                        *ga += gi / (x + LOG_EPS);
                    }
                }
                Op::Sqrt(a) => {
                    let g = self.nodes[idx].grad.clone();
                    let y = self.nodes[idx].value.clone();
                    for (ga, (gi, yi)) in
                        self.nodes[a.0].grad.iter_mut().zip(g.iter().zip(&y))
                    {
                        *ga += gi * 0.5 / yi;
                    }
                }
                Op::Recip(a) => {
                    let g = self.nodes[idx].grad.clone();
                    let y = self.nodes[idx].value.clone();
                    for (ga, (gi, yi)) in
                        self.nodes[a.0].grad.iter_mut().zip(g.iter().zip(&y))
                    {
                        *ga -= gi * yi * yi;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let g = self.nodes[idx].grad.clone();
                    let (r, ac) = self.shape(a);
                    let (_, bc) = self.shape(b);
                    let cols = ac + bc;
                    for i in 0..r {
                        for j in 0..ac {
                            self.nodes[a.0].grad[i * ac + j] += g[i * cols + j];
                        }
                        for j in 0..bc {
                            self.nodes[b.0].grad[i * bc + j] += g[i * cols + ac + j];
                        }
                    }
                }
                Op::ConcatRows(a, b) => {
                    let g = self.nodes[idx].grad.clone();
                    let an = self.nodes[a.0].grad.len();
                    add_assign(&mut self.nodes[a.0].grad, &g[..an]);
                    add_assign(&mut self.nodes[b.0].grad, &g[an..]);
                }
                Op::SliceCols(a, start) => {
                    let g = self.nodes[idx].grad.clone();
                    let (r, len) = self.shape(Var(idx));
                    let (_, c) = self.shape(a);
                    for i in 0..r {
                        for j in 0..len {
                            self.nodes[a.0].grad[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let g = self.nodes[idx].grad.clone();
                    let (r, c) = self.shape(a);
                    let inv = 1.0 / r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            self.nodes[a.0].grad[i * c + j] += g[j] * inv;
                        }
                    }
                }
                Op::SumAll(a) => {
                    let g = self.nodes[idx].grad[0];
                    for ga in self.nodes[a.0].grad.iter_mut() {
                        *ga += g;
                    }
                }
                Op::Reshape(a) => {
                    let g = self.nodes[idx].grad.clone();
                    add_assign(&mut self.nodes[a.0].grad, &g);
                }
                Op::Transpose(a) => {
                    let g = self.nodes[idx].grad.clone();
                    let (r, c) = self.shape(a);
                    for i in 0..r {
                        for j in 0..c {
                            self.nodes[a.0].grad[i * c + j] += g[j * r + i];
                        }
                    }
                }
                Op::NormalizeRows(a) => {
                    let g = self.nodes[idx].grad.clone();
                    let (r, c) = self.shape(a);
                    for i in 0..r {
                        let row = self.nodes[a.0].value[i * c..(i + 1) * c].to_vec();
                        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let gi = &g[i * c..(i + 1) * c];
                        let dot: f64 = (0..c).map(|j| gi[j] * row[j]).sum();
                        for j in 0..c {
                            self.nodes[a.0].grad[i * c + j] +=
                                gi[j] / norm - row[j] * dot / norm.powi(3);
                        }
                    }
                }
                Op::LayerNormRows(a) => {
                    const EPS: f64 = 1e-6;
                    let g = self.nodes[idx].grad.clone();
                    let y = self.nodes[idx].value.clone();
                    let (r, c) = self.shape(a);
                    let n = c as f64;
                    for i in 0..r {
                        let row = self.nodes[a.0].value[i * c..(i + 1) * c].to_vec();
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                        let inv = 1.0 / (var + EPS).sqrt();
                        let gi = &g[i * c..(i + 1) * c];
                        let yi = &y[i * c..(i + 1) * c];
                        let gsum: f64 = gi.iter().sum();
                        let gydot: f64 = (0..c).map(|j| gi[j] * yi[j]).sum();
                        for j in 0..c {
                            self.nodes[a.0].grad[i * c + j] +=
                                inv * (gi[j] - gsum / n - yi[j] * gydot / n);
                        }
                    }
                }
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    // numerically stable: for large x, ln(1+e^x) = x + ln(1+e^-x)
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Central finite differences of a scalar-valued function of one leaf.
    fn finite_diff(
        build: impl Fn(&mut Tape, Var) -> Var,
        x0: &[f64],
        rows: usize,
        cols: usize,
    ) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.len())
            .map(|i| {
                let mut xp = x0.to_vec();
                xp[i] += h;
                let mut xm = x0.to_vec();
                xm[i] -= h;
                let mut tp = Tape::new();
                let lp = tp.leaf(rows, cols, xp);
                let fp = build(&mut tp, lp);
                let mut tm = Tape::new();
                let lm = tm.leaf(rows, cols, xm);
                let fm = build(&mut tm, lm);
                (tp.scalar_value(fp) - tm.scalar_value(fm)) / (2.0 * h)
            })
            .collect()
    }

    fn check_op(build: impl Fn(&mut Tape, Var) -> Var + Copy, x0: Vec<f64>, rows: usize, cols: usize) {
        let mut tape = Tape::new();
        let x = tape.leaf(rows, cols, x0.clone());
        let out = build(&mut tape, x);
        tape.backward(out);
        let analytic = tape.grad(x).to_vec();
        let numeric = finite_diff(build, &x0, rows, cols);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert_abs_diff_eq!(a, n, epsilon = 1e-5);
        }
    }

    #[test]
    fn grad_softmax_rows() {
        check_op(
            |t, x| {
                let s = t.softmax_rows(x);
                let l = t.log(s);
                let w = t.leaf(2, 3, vec![0.3, -0.2, 0.5, 1.0, 0.1, -0.4]);
                let p = t.mul(l, w);
                t.sum_all(p)
            },
            vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3],
            2,
            3,
        );
    }

    #[test]
    fn grad_matmul_chain() {
        check_op(
            |t, x| {
                let w = t.leaf(3, 2, vec![0.1, -0.5, 0.7, 0.2, -0.3, 0.9]);
                let y = t.matmul(x, w);
                let s = t.softplus(y);
                t.sum_all(s)
            },
            vec![1.0, -2.0, 0.5, 0.3, 0.8, -0.1],
            2,
            3,
        );
    }

    #[test]
    fn grad_matmul_bt_and_transpose() {
        check_op(
            |t, x| {
                let w = t.leaf(2, 3, vec![0.4, 0.1, -0.2, 0.6, -0.7, 0.3]);
                let y = t.matmul_bt(x, w);
                let yt = t.transpose(y);
                let sq = t.mul(yt, yt);
                t.sum_all(sq)
            },
            vec![1.0, 2.0, -1.0, 0.5, 0.0, 0.25],
            2,
            3,
        );
    }

    #[test]
    fn grad_normalize_and_slice() {
        check_op(
            |t, x| {
                let n = t.normalize_rows(x);
                let s = t.slice_cols(n, 1, 2);
                let sq = t.mul(s, s);
                t.sum_all(sq)
            },
            vec![1.0, 2.0, -1.5, 0.5, -0.3, 0.8],
            2,
            3,
        );
    }

    #[test]
    fn grad_layer_norm() {
        check_op(
            |t, x| {
                let n = t.layer_norm_rows(x);
                let w = t.leaf(2, 3, vec![0.2, -0.4, 0.6, 0.1, 0.3, -0.5]);
                let p = t.mul(n, w);
                t.sum_all(p)
            },
            vec![1.0, 2.0, -1.5, 0.5, -0.3, 0.8],
            2,
            3,
        );
    }

    #[test]
    fn grad_concat_mean_recip_sqrt() {
        check_op(
            |t, x| {
                let m = t.mean_rows(x);
                let c = t.concat_cols(m, m);
                let sq = t.mul(c, c);
                let s = t.sum_all(sq);
                let s1 = t.add_const(s, 1.0);
                let r = t.sqrt(s1);
                let i = t.recip(r);
                t.sum_all(i)
            },
            vec![0.9, -0.2, 0.4, 1.1, 0.6, -0.8],
            2,
            3,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.leaf(3, 4, (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect());
        let s = t.softmax_rows(x);
        for i in 0..3 {
            let sum: f64 = t.value(s)[i * 4..(i + 1) * 4].iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }
}

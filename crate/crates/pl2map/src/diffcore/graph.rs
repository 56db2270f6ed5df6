//! The tape: eager forward evaluation, recorded ops, reverse sweep.

use super::{shape_err, DiffError, Scalar, Tensor};

/// Handle to a node on the tape. Cheap to copy; only valid for the graph
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Down the rows (axis 0). `concat(.., Rows)` stacks vertically.
    Rows,
    /// Across the columns (axis 1). `softmax(.., Cols)` normalizes each row.
    Cols,
}

enum Op<T> {
    Input,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddRow { m: Var, row: Var },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    Relu { x: Var },
    Tanh { x: Var },
    Abs { x: Var },
    Recip { x: Var },
    SoftmaxCols { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    MeanRows { x: Var },
    RowSums { x: Var },
    SumAll { x: Var },
    RobustNormRows { x: Var, delta: T },
}

/// Gradients of one scalar output with respect to every tape node.
/// Nodes the loss does not depend on have no entry.
pub struct Gradients<T> {
    inner: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.inner[v.0].as_ref()
    }
}

/// Epsilon inside the layer-norm standard deviation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    /// Smallest |input| seen at any relu/abs during forward evaluation;
    /// finite-difference checks use it to flag derivative kinks.
    kink_proximity: f64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { values: Vec::with_capacity(256), ops: Vec::with_capacity(256), kink_proximity: f64::INFINITY }
    }

    /// Registers a leaf value (parameter or constant input).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, t)
    }

    /// Convenience leaf of zeros.
    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.input(Tensor::zeros(rows, cols))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    /// Distance from the nearest relu/abs kink encountered so far
    /// (infinity if none was evaluated).
    pub fn nearest_kink(&self) -> f64 {
        self.kink_proximity
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        self.values[v.0].shape()
    }

    // ---- arithmetic -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.shape2(a);
        let (k2, n) = self.shape2(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{}x{} * {}x{}", m, k, k2, n)));
        }
        let mut out = Tensor::zeros(m, n);
        matmul_acc(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        Ok(self.push(Op::MatMul { a, b }, out))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, c) = self.shape2(x);
        let xv = self.value(x);
        let mut out = Tensor::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.set(j, i, xv.get(i, j));
            }
        }
        Ok(self.push(Op::Transpose { x }, out))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, DiffError> {
        if self.shape2(a) != self.shape2(b) {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", self.shape2(a), self.shape2(b)),
            ));
        }
        let (r, c) = self.shape2(a);
        let data = self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(r, c, data)?;
        Ok(self.push(op, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    /// Adds a 1xC row vector to every row of an RxC matrix (bias add).
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var, DiffError> {
        let (r, c) = self.shape2(m);
        let (rr, rc) = self.shape2(row);
        if rr != 1 || rc != c {
            return Err(shape_err("add_row", format!("{}x{} + {}x{}", r, c, rr, rc)));
        }
        let mv = self.value(m);
        let rv = self.value(row);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                out.set(i, j, mv.get(i, j) + rv.get(0, j));
            }
        }
        Ok(self.push(Op::AddRow { m, row }, out))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, DiffError> {
        let t = self.value(x).clone();
        let out = Tensor::new(t.rows(), t.cols(), t.data().iter().map(|&v| v * c).collect())?;
        Ok(self.push(Op::Scale { x, c }, out))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var, DiffError> {
        let t = self.value(x).clone();
        let out = Tensor::new(t.rows(), t.cols(), t.data().iter().map(|&v| v + c).collect())?;
        Ok(self.push(Op::AddScalar { x }, out))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.rows(), t.cols(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        self.push(op, out)
    }

    fn track_kinks(&mut self, x: Var) {
        let mut near = self.kink_proximity;
        for &v in self.values[x.0].data() {
            near = near.min(v.to_f64_lossy().abs());
        }
        self.kink_proximity = near;
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.track_kinks(x);
        Ok(self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { x }))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, DiffError> {
        Ok(self.unary(x, |v| v.tanh(), Op::Tanh { x }))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, DiffError> {
        self.track_kinks(x);
        Ok(self.unary(x, |v| v.abs(), Op::Abs { x }))
    }

    /// Elementwise reciprocal. The caller guarantees inputs bounded away
    /// from zero (the reliability map feeds 1 + |beta z| >= 1).
    pub fn recip(&mut self, x: Var) -> Result<Var, DiffError> {
        Ok(self.unary(x, |v| T::one() / v, Op::Recip { x }))
    }

    // ---- row-structured ops --------------------------------------------

    /// Softmax along `axis`. `Axis::Cols` normalizes each row (the
    /// attention case); `Axis::Rows` is provided via transposition.
    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var, DiffError> {
        match axis {
            Axis::Cols => self.softmax_cols(x),
            Axis::Rows => {
                let xt = self.transpose(x)?;
                let s = self.softmax_cols(xt)?;
                self.transpose(s)
            }
        }
    }

    fn softmax_cols(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, c) = self.shape2(x);
        if c == 0 {
            return Err(shape_err("softmax", format!("{}x{} has empty rows", r, c)));
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            // max subtraction keeps exp in range for large scores
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = 0.0f64;
            for j in 0..c {
                let e = (row[j] - mx).softmax_exp();
                out.set(i, j, e);
                sum += e.to_f64_lossy();
            }
            let inv = 1.0 / sum;
            for j in 0..c {
                let v = T::lit(out.get(i, j).to_f64_lossy() * inv);
                out.set(i, j, v);
            }
        }
        Ok(self.push(Op::SoftmaxCols { x }, out))
    }

    /// Per-row normalization to zero mean / unit variance followed by a
    /// learned gain and bias (both 1xC).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, DiffError> {
        let (r, c) = self.shape2(x);
        if c < 2 {
            return Err(DiffError::Domain {
                op: "layer_norm",
                detail: format!("normalized axis length {} < 2", c),
            });
        }
        if self.shape2(gain) != (1, c) || self.shape2(bias) != (1, c) {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain {:?} bias {:?} for input {}x{}",
                    self.shape2(gain),
                    self.shape2(bias),
                    r,
                    c
                ),
            ));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let (mean, inv_sd) = row_moments(xv.row(i), eps);
            for j in 0..c {
                let y = (xv.get(i, j) - mean) * inv_sd;
                out.set(i, j, gv.get(0, j) * y + bv.get(0, j));
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias }, out))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no parts".into()));
        }
        match axis {
            Axis::Rows => {
                let cols = self.shape2(parts[0]).1;
                let mut rows = 0;
                for &p in parts {
                    let (r, c) = self.shape2(p);
                    if c != cols {
                        return Err(shape_err("concat", format!("column counts {} vs {}", cols, c)));
                    }
                    rows += r;
                }
                let mut data = Vec::with_capacity(rows * cols);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                let out = Tensor::new(rows, cols, data)?;
                Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, out))
            }
            Axis::Cols => {
                let rows = self.shape2(parts[0]).0;
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.shape2(p);
                    if r != rows {
                        return Err(shape_err("concat", format!("row counts {} vs {}", rows, r)));
                    }
                    cols += c;
                }
                let mut out = Tensor::zeros(rows, cols);
                let mut at = 0;
                for &p in parts {
                    let pv = &self.values[p.0];
                    for i in 0..rows {
                        for j in 0..pv.cols() {
                            out.set(i, at + j, pv.get(i, j));
                        }
                    }
                    at += pv.cols();
                }
                Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, out))
            }
        }
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let (r, c) = self.shape2(x);
        if start >= end || end > c {
            return Err(shape_err("slice_cols", format!("range {}..{} of {} cols", start, end, c)));
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(r, end - start);
        for i in 0..r {
            for j in start..end {
                out.set(i, j - start, xv.get(i, j));
            }
        }
        Ok(self.push(Op::SliceCols { x, start }, out))
    }

    /// Column means: RxC -> 1xC. Mean pooling over set elements.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, c) = self.shape2(x);
        if r == 0 {
            return Err(shape_err("mean_rows", "empty input".into()));
        }
        let xv = self.value(x);
        let mut acc = vec![0.0f64; c];
        for i in 0..r {
            for (j, a) in acc.iter_mut().enumerate() {
                *a += xv.get(i, j).to_f64_lossy();
            }
        }
        let inv = 1.0 / r as f64;
        let mut out = Tensor::zeros(1, c);
        for (j, a) in acc.iter().enumerate() {
            out.set(0, j, T::lit(a * inv));
        }
        Ok(self.push(Op::MeanRows { x }, out))
    }

    /// Row sums: RxC -> Rx1.
    pub fn row_sums(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, _c) = self.shape2(x);
        let xv = self.value(x);
        let mut out = Tensor::zeros(r, 1);
        for i in 0..r {
            let mut s = 0.0f64;
            for &v in xv.row(i) {
                s += v.to_f64_lossy();
            }
            out.set(i, 0, T::lit(s));
        }
        Ok(self.push(Op::RowSums { x }, out))
    }

    /// Sum of all elements -> 1x1.
    pub fn sum_all(&mut self, x: Var) -> Result<Var, DiffError> {
        let mut s = 0.0f64;
        for &v in self.value(x).data() {
            s += v.to_f64_lossy();
        }
        Ok(self.push(Op::SumAll { x }, Tensor::scalar(T::lit(s))))
    }

    /// Per-row Huber of the Euclidean row norm: RxC -> Rx1.
    /// n <= delta gives n^2/2, else delta*(n - delta/2); the gradient is
    /// continuous at both zero and the transition.
    pub fn robust_norm_rows(&mut self, x: Var, delta: T) -> Result<Var, DiffError> {
        if delta <= T::zero() {
            return Err(DiffError::Domain { op: "robust_norm_rows", detail: format!("delta {} <= 0", delta) });
        }
        let (r, _c) = self.shape2(x);
        let xv = self.value(x);
        let mut out = Tensor::zeros(r, 1);
        let d64 = delta.to_f64_lossy();
        for i in 0..r {
            let mut sq = 0.0f64;
            for &v in xv.row(i) {
                let v = v.to_f64_lossy();
                sq += v * v;
            }
            let n = sq.sqrt();
            let h = if n <= d64 { 0.5 * sq } else { d64 * (n - 0.5 * d64) };
            out.set(i, 0, T::lit(h));
        }
        Ok(self.push(Op::RobustNormRows { x, delta }, out))
    }

    // ---- composites -----------------------------------------------------

    /// x*W + b with b broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Chain of affine layers with relu between (none after the last).
    pub fn mlp_forward(&mut self, x: Var, layers: &[(Var, Var)]) -> Result<Var, DiffError> {
        if layers.is_empty() {
            return Err(shape_err("mlp_forward", "no layers".into()));
        }
        let mut h = x;
        for (i, &(w, b)) in layers.iter().enumerate() {
            h = self.affine(h, w, b)?;
            if i + 1 < layers.len() {
                h = self.relu(h)?;
            }
        }
        Ok(h)
    }

    // ---- reverse sweep --------------------------------------------------

    /// Gradient of the scalar `loss` with respect to every node it
    /// depends on. Deterministic: one fixed reverse traversal.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, DiffError> {
        let (lr, lc) = self.shape2(loss);
        if (lr, lc) != (1, 1) {
            return Err(DiffError::NotScalar { rows: lr, cols: lc });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..self.ops.len()).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            self.backward_op(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { inner: grads })
    }

    fn backward_op(&self, idx: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.ops[idx] {
            Op::Input => {}
            Op::MatMul { a, b } => {
                let av = &self.values[a.0];
                let bv = &self.values[b.0];
                let (m, k) = av.shape();
                let n = bv.cols();
                {
                    let ga = grad_slot(grads, *a, m, k);
                    matmul_abt_acc(gout.data(), bv.data(), ga.data_mut(), m, n, k);
                }
                let gb = grad_slot(grads, *b, k, n);
                matmul_atb_acc(av.data(), gout.data(), gb.data_mut(), m, k, n);
            }
            Op::Transpose { x } => {
                let (r, c) = self.shape2(*x);
                let gx = grad_slot(grads, *x, r, c);
                for i in 0..r {
                    for j in 0..c {
                        let v = gx.get(i, j) + gout.get(j, i);
                        gx.set(i, j, v);
                    }
                }
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, gout.shape(), gout.data(), |g, &d| g + d);
                accumulate(grads, *b, gout.shape(), gout.data(), |g, &d| g + d);
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, gout.shape(), gout.data(), |g, &d| g + d);
                accumulate(grads, *b, gout.shape(), gout.data(), |g, &d| g - d);
            }
            Op::Mul { a, b } => {
                let (bv, av) = (self.values[b.0].clone(), self.values[a.0].clone());
                accumulate_zip(grads, *a, gout.shape(), gout.data(), bv.data(), |g, d, o| g + d * o);
                accumulate_zip(grads, *b, gout.shape(), gout.data(), av.data(), |g, d, o| g + d * o);
            }
            Op::Div { a, b } => {
                // out = a/b: d_a = g/b ; d_b = -g*out/b
                let bv = self.values[b.0].clone();
                let ov = self.values[idx].clone();
                accumulate_zip(grads, *a, gout.shape(), gout.data(), bv.data(), |g, d, den| g + d / den);
                let (r, c) = bv.shape();
                let gb = grad_slot(grads, *b, r, c);
                for (i, g) in gb.data_mut().iter_mut().enumerate() {
                    *g = *g - gout.data()[i] * ov.data()[i] / bv.data()[i];
                }
            }
            Op::AddRow { m, row } => {
                accumulate(grads, *m, gout.shape(), gout.data(), |g, &d| g + d);
                let (r, c) = gout.shape();
                let gr = grad_slot(grads, *row, 1, c);
                for i in 0..r {
                    for j in 0..c {
                        let v = gr.get(0, j) + gout.get(i, j);
                        gr.set(0, j, v);
                    }
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                accumulate(grads, *x, gout.shape(), gout.data(), |g, &d| g + d * c);
            }
            Op::AddScalar { x } => {
                accumulate(grads, *x, gout.shape(), gout.data(), |g, &d| g + d);
            }
            Op::Relu { x } => {
                let xv = self.values[x.0].clone();
                accumulate_zip(grads, *x, gout.shape(), gout.data(), xv.data(), |g, d, xi| {
                    if xi > T::zero() {
                        g + d
                    } else {
                        g
                    }
                });
            }
            Op::Tanh { x } => {
                let ov = self.values[idx].clone();
                accumulate_zip(grads, *x, gout.shape(), gout.data(), ov.data(), |g, d, y| {
                    g + d * (T::one() - y * y)
                });
            }
            Op::Abs { x } => {
                let xv = self.values[x.0].clone();
                accumulate_zip(grads, *x, gout.shape(), gout.data(), xv.data(), |g, d, xi| {
                    if xi > T::zero() {
                        g + d
                    } else if xi < T::zero() {
                        g - d
                    } else {
                        g
                    }
                });
            }
            Op::Recip { x } => {
                let ov = self.values[idx].clone();
                accumulate_zip(grads, *x, gout.shape(), gout.data(), ov.data(), |g, d, y| g - d * y * y);
            }
            Op::SoftmaxCols { x } => {
                let ov = &self.values[idx];
                let (r, c) = ov.shape();
                let gx = grad_slot(grads, *x, r, c);
                for i in 0..r {
                    let mut dot = 0.0f64;
                    for j in 0..c {
                        dot += (gout.get(i, j) * ov.get(i, j)).to_f64_lossy();
                    }
                    let dot = T::lit(dot);
                    for j in 0..c {
                        let y = ov.get(i, j);
                        let v = gx.get(i, j) + y * (gout.get(i, j) - dot);
                        gx.set(i, j, v);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = self.values[x.0].clone();
                let gv = self.values[gain.0].clone();
                let (r, c) = xv.shape();
                let eps = T::lit(LAYER_NORM_EPS);
                let inv_c = T::one() / T::lit(c as f64);
                {
                    let gx = grad_slot(grads, *x, r, c);
                    for i in 0..r {
                        let (mean, inv_sd) = row_moments(xv.row(i), eps);
                        // dy = gain .* gout ; dx = (dy - mean(dy) - y*mean(dy.*y))*inv_sd
                        let mut mdy = 0.0f64;
                        let mut mdyy = 0.0f64;
                        for j in 0..c {
                            let y = (xv.get(i, j) - mean) * inv_sd;
                            let dy = gv.get(0, j) * gout.get(i, j);
                            mdy += dy.to_f64_lossy();
                            mdyy += (dy * y).to_f64_lossy();
                        }
                        let mean_dy = T::lit(mdy) * inv_c;
                        let mean_dyy = T::lit(mdyy) * inv_c;
                        for j in 0..c {
                            let y = (xv.get(i, j) - mean) * inv_sd;
                            let dy = gv.get(0, j) * gout.get(i, j);
                            let v = gx.get(i, j) + (dy - mean_dy - y * mean_dyy) * inv_sd;
                            gx.set(i, j, v);
                        }
                    }
                }
                {
                    let gg = grad_slot(grads, *gain, 1, c);
                    for i in 0..r {
                        let (mean, inv_sd) = row_moments(xv.row(i), eps);
                        for j in 0..c {
                            let y = (xv.get(i, j) - mean) * inv_sd;
                            let v = gg.get(0, j) + gout.get(i, j) * y;
                            gg.set(0, j, v);
                        }
                    }
                }
                let gb = grad_slot(grads, *bias, 1, c);
                for i in 0..r {
                    for j in 0..c {
                        let v = gb.get(0, j) + gout.get(i, j);
                        gb.set(0, j, v);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for &p in parts {
                    let (r, c) = self.shape2(p);
                    let gp = grad_slot(grads, p, r, c);
                    for i in 0..r {
                        for j in 0..c {
                            let v = gp.get(i, j) + gout.get(at + i, j);
                            gp.set(i, j, v);
                        }
                    }
                    at += r;
                }
            }
            Op::ConcatCols { parts } => {
                let mut at = 0;
                for &p in parts {
                    let (r, c) = self.shape2(p);
                    let gp = grad_slot(grads, p, r, c);
                    for i in 0..r {
                        for j in 0..c {
                            let v = gp.get(i, j) + gout.get(i, at + j);
                            gp.set(i, j, v);
                        }
                    }
                    at += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape2(*x);
                let width = gout.cols();
                let gx = grad_slot(grads, *x, r, c);
                for i in 0..r {
                    for j in 0..width {
                        let v = gx.get(i, start + j) + gout.get(i, j);
                        gx.set(i, start + j, v);
                    }
                }
            }
            Op::MeanRows { x } => {
                let (r, c) = self.shape2(*x);
                let inv = T::one() / T::lit(r as f64);
                let gx = grad_slot(grads, *x, r, c);
                for i in 0..r {
                    for j in 0..c {
                        let v = gx.get(i, j) + gout.get(0, j) * inv;
                        gx.set(i, j, v);
                    }
                }
            }
            Op::RowSums { x } => {
                let (r, c) = self.shape2(*x);
                let gx = grad_slot(grads, *x, r, c);
                for i in 0..r {
                    let d = gout.get(i, 0);
                    for j in 0..c {
                        let v = gx.get(i, j) + d;
                        gx.set(i, j, v);
                    }
                }
            }
            Op::SumAll { x } => {
                let d = gout.item();
                accumulate_filled(grads, *x, self.shape2(*x), d);
            }
            Op::RobustNormRows { x, delta } => {
                let delta = *delta;
                let xv = self.values[x.0].clone();
                let (r, c) = xv.shape();
                let gx = grad_slot(grads, *x, r, c);
                let d64 = delta.to_f64_lossy();
                for i in 0..r {
                    let mut sq = 0.0f64;
                    for &v in xv.row(i) {
                        let v = v.to_f64_lossy();
                        sq += v * v;
                    }
                    let n = sq.sqrt();
                    // d huber(||v||)/dv = v inside the quadratic zone, delta*v/||v|| outside
                    let coef = if n <= d64 { T::one() } else { T::lit(d64 / n) };
                    let d = gout.get(i, 0) * coef;
                    for j in 0..c {
                        let v = gx.get(i, j) + d * xv.get(i, j);
                        gx.set(i, j, v);
                    }
                }
            }
        }
    }
}

fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = row.len() as f64;
    let mut mean = 0.0f64;
    for &v in row {
        mean += v.to_f64_lossy();
    }
    mean /= n;
    let mut var = 0.0f64;
    for &v in row {
        let d = v.to_f64_lossy() - mean;
        var += d * d;
    }
    var /= n;
    let inv_sd = 1.0 / (var + eps.to_f64_lossy()).sqrt();
    (T::lit(mean), T::lit(inv_sd))
}

fn grad_slot<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, rows: usize, cols: usize) -> &mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    shape: (usize, usize),
    d: &[T],
    f: impl Fn(T, &T) -> T,
) {
    let g = grad_slot(grads, v, shape.0, shape.1);
    debug_assert_eq!(g.len(), d.len());
    for (gi, di) in g.data_mut().iter_mut().zip(d) {
        *gi = f(*gi, di);
    }
}

fn accumulate_zip<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    shape: (usize, usize),
    d: &[T],
    other: &[T],
    f: impl Fn(T, T, T) -> T,
) {
    let g = grad_slot(grads, v, shape.0, shape.1);
    debug_assert_eq!(g.len(), d.len());
    for ((gi, &di), &oi) in g.data_mut().iter_mut().zip(d).zip(other) {
        *gi = f(*gi, di, oi);
    }
}

fn accumulate_filled<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: (usize, usize), d: T) {
    let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
    for gi in g.data_mut() {
        *gi = *gi + d;
    }
}

// The matmul kernels accumulate in f64 regardless of element type. This
// keeps f32 outputs insensitive to summation order, which the permutation
// equivariance guarantees rely on: reordering set elements reorders the
// reduction, and f64 accumulation keeps that reorder below f32 resolution.

/// out += a * b for row-major a (m x k), b (k x n).
fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        for v in acc.iter_mut() {
            *v = 0.0;
        }
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                acc[j] += (aik * brow[j]).to_f64_lossy();
            }
        }
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] = orow[j] + T::lit(acc[j]);
        }
    }
}

/// out (m x k) += a (m x n) * b^T where b is (k x n).
fn matmul_abt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0f64;
            for j in 0..n {
                acc += (arow[j] * brow[j]).to_f64_lossy();
            }
            out[i * k + kk] = out[i * k + kk] + T::lit(acc);
        }
    }
}

/// out (k x n) += a^T * b where a is (m x k), b is (m x n).
fn matmul_atb_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let arow = &mut acc[kk * n..(kk + 1) * n];
            for j in 0..n {
                arow[j] += (aik * brow[j]).to_f64_lossy();
            }
        }
    }
    for (o, &v) in out.iter_mut().zip(acc.iter()) {
        *o = *o + T::lit(v);
    }
}

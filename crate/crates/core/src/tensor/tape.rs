use super::{softmax_rows, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConstRow(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    Sum(Var),
    CosineDistance(Var, Var),
    Relu(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for a single backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> TensorError {
    TensorError::Shape { op, left, right }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A constant input: no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::new(ta.rows(), ta.cols(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Adds the `1 x cols` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(shape_err("add_row", tx.shape(), tb.shape()));
        }
        let cols = tx.cols();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + tb.data()[i % cols]).collect();
        let value = Tensor::new(tx.rows(), cols, data);
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::AddRow(x, b), ng))
    }

    /// Adds a constant row to every row of `x`.
    pub fn add_const_row(&mut self, x: Var, row: &[T]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if row.len() != tx.cols() {
            return Err(shape_err("add_const_row", tx.shape(), (1, row.len())));
        }
        let cols = tx.cols();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + row[i % cols]).collect();
        let value = Tensor::new(tx.rows(), cols, data);
        let ng = self.needs(x);
        Ok(self.push(value, Op::AddConstRow(x), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let tx = self.value(x);
        let value = Tensor::new(tx.rows(), tx.cols(), tx.data().iter().map(|&v| v * c).collect());
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, c), ng)
    }

    /// Row-wise softmax over columns with `mask[c] == true`.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        if let Some(m) = mask {
            if m.len() != self.value(x).cols() {
                return Err(shape_err("softmax mask", self.shape(x), (1, m.len())));
            }
        }
        let value = softmax_rows(self.value(x), mask)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Softmax(x), ng))
    }

    /// Per-row normalisation to zero mean and unit variance followed by the
    /// affine map `gain * x + bias` (both `1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (rows, cols) = tx.shape();
        for p in [gain, bias] {
            if self.shape(p) != (1, cols) {
                return Err(shape_err("layer_norm", (rows, cols), self.shape(p)));
            }
        }
        let n = T::of(cols as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let data = xhat.iter().enumerate().map(|(i, &h)| g[i % cols] * h + b[i % cols]).collect();
        let value = Tensor::new(rows, cols, data);
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if start >= end || end > tx.cols() {
            return Err(shape_err("slice_cols", tx.shape(), (start, end)));
        }
        let mut data = Vec::with_capacity(tx.rows() * (end - start));
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..end]);
        }
        let value = Tensor::new(tx.rows(), end - start, data);
        let ng = self.needs(x);
        Ok(self.push(value, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.shape(parts[0]).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(bad)));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(rows, cols, data), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let cols = self.shape(parts[0]).1;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).1 != cols) {
            return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(bad)));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if r >= tx.rows() {
            return Err(shape_err("row", tx.shape(), (r, 0)));
        }
        let value = Tensor::row_vector(tx.row(r).to_vec());
        let ng = self.needs(x);
        Ok(self.push(value, Op::Row(x, r), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        let ng = self.needs(x);
        self.push(value, Op::Sum(x), ng)
    }

    /// `1 - cos(a, b)` over the flattened tensors, as a 1x1 value.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(shape_err("cosine_distance", ta.shape(), tb.shape()));
        }
        let dot: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).sum();
        let na = ta.data().iter().map(|&x| x * x).sum::<T>().sqrt();
        let nb = tb.data().iter().map(|&x| x * x).sum::<T>().sqrt();
        if na == T::zero() || nb == T::zero() {
            return Err(TensorError::ZeroNorm);
        }
        let value = Tensor::scalar(T::one() - dot / (na * nb));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::CosineDistance(a, b), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let value = Tensor::new(tx.rows(), tx.cols(), tx.data().iter().map(|&v| v.max(T::zero())).collect());
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng)
    }

    /// Reverse pass from a 1x1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, t: Tensor<T>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        acc(*a, g.matmul(&self.value(*b).transpose())?);
                    }
                    if self.needs(*b) {
                        acc(*b, self.value(*a).transpose().matmul(&g)?);
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::AddRow(x, b) => {
                    let cols = g.cols();
                    let mut db = vec![T::zero(); cols];
                    for (j, &v) in g.data().iter().enumerate() {
                        db[j % cols] = db[j % cols] + v;
                    }
                    acc(*b, Tensor::row_vector(db));
                    acc(*x, g.clone());
                }
                Op::AddConstRow(x) => acc(*x, g.clone()),
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(tb.data()).map(|(&d, &y)| d * y).collect();
                    let db = g.data().iter().zip(ta.data()).map(|(&d, &x)| d * x).collect();
                    acc(*a, Tensor::new(g.rows(), g.cols(), da));
                    acc(*b, Tensor::new(g.rows(), g.cols(), db));
                }
                Op::Scale(x, c) => {
                    acc(*x, Tensor::new(g.rows(), g.cols(), g.data().iter().map(|&d| d * *c).collect()));
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut dx = Vec::with_capacity(y.len());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - inner)));
                    }
                    acc(*x, Tensor::new(y.rows(), cols, dx));
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let cols = g.cols();
                    let n = T::of(cols as f64);
                    let gv = self.value(*gain).data();
                    let mut dgain = vec![T::zero(); cols];
                    let mut dbias = vec![T::zero(); cols];
                    let mut dx = Vec::with_capacity(g.len());
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..cols {
                            dgain[c] = dgain[c] + gr[c] * hr[c];
                            dbias[c] = dbias[c] + gr[c];
                            let dh = gr[c] * gv[c];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[c];
                        }
                        mean_dh = mean_dh / n;
                        mean_dh_h = mean_dh_h / n;
                        for c in 0..cols {
                            let dh = gr[c] * gv[c];
                            dx.push(inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h));
                        }
                    }
                    acc(*gain, Tensor::row_vector(dgain));
                    acc(*bias, Tensor::row_vector(dbias));
                    acc(*x, Tensor::new(g.rows(), cols, dx));
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let mut dx = Tensor::zeros(rows, cols);
                    let w = g.cols();
                    for r in 0..rows {
                        dx.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                    }
                    acc(*x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, w) = self.shape(p);
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        acc(p, Tensor::new(rows, w, data));
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let n = rows * cols;
                        acc(p, Tensor::new(rows, cols, g.data()[offset..offset + n].to_vec()));
                        offset += n;
                    }
                }
                Op::Row(x, r) => {
                    let (rows, cols) = self.shape(*x);
                    let mut dx = Tensor::zeros(rows, cols);
                    dx.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(g.data());
                    acc(*x, dx);
                }
                Op::Sum(x) => {
                    let (rows, cols) = self.shape(*x);
                    acc(*x, Tensor::full(rows, cols, g.item()));
                }
                Op::CosineDistance(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let dot: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).sum();
                    let na2: T = ta.data().iter().map(|&x| x * x).sum();
                    let nb2: T = tb.data().iter().map(|&x| x * x).sum();
                    let (na, nb) = (na2.sqrt(), nb2.sqrt());
                    let d = g.item();
                    // d(1 - cos)/da = -(b / (|a||b|) - cos * a / |a|^2)
                    let cos = dot / (na * nb);
                    let grad = |u: &Tensor<T>, v: &Tensor<T>, nu2: T| {
                        let data = u
                            .data()
                            .iter()
                            .zip(v.data())
                            .map(|(&x, &y)| -d * (y / (na * nb) - cos * x / nu2))
                            .collect();
                        Tensor::new(u.rows(), u.cols(), data)
                    };
                    acc(*a, grad(ta, tb, na2));
                    acc(*b, grad(tb, ta, nb2));
                }
                Op::Relu(x) => {
                    let tx = self.value(*x);
                    let data =
                        g.data().iter().zip(tx.data()).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect();
                    acc(*x, Tensor::new(g.rows(), g.cols(), data));
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// influence the loss or is a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but with zeros of the right shape when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

/// Scaled dot-product attention for one head.
///
/// `scores = softmax(Q K^T / sqrt(d_h) + bias)` over keys with
/// `key_mask == true`; returns `(scores V, scores)`. `bias`, when given, is a
/// constant per-key offset added before the softmax.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
    bias: Option<&[T]>,
) -> Result<(Var, Var), TensorError> {
    let (qs, ks, vs) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if qs.1 != ks.1 {
        return Err(shape_err("attention q/k", qs, ks));
    }
    if ks.0 != vs.0 {
        return Err(shape_err("attention k/v", ks, vs));
    }
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, T::one() / T::of(qs.1 as f64).sqrt());
    if let Some(b) = bias {
        logits = tape.add_const_row(logits, b)?;
    }
    let scores = tape.softmax_rows(logits, key_mask)?;
    let out = tape.matmul(scores, v)?;
    Ok((out, scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::from_f64(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn squared_norm_gradient_is_2x() {
        let mut t = Tape::<f64>::new();
        let vals = [1.0, -2.0, 0.25];
        let x = t.param(Tensor::from_f64(1, 3, &vals));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        for (gv, v) in g.get(x).unwrap().data().iter().zip(vals) {
            assert_eq!(*gv, 2.0 * v);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::zeros(2, 2));
        assert_eq!(t.backward(x).unwrap_err(), TensorError::NonScalarLoss((2, 2)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Tensor::from_f64(1, 2, &[1.0, 2.0]));
        let p = t.param(Tensor::from_f64(2, 1, &[3.0, 4.0]));
        let y = t.matmul(c, p).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_f64(2, 4, &[3.0, 3.0, 3.0, 3.0, 1.0, -1.0, 1.0, -1.0]));
        let g = t.constant(Tensor::full(1, 4, 1.0));
        let b = t.constant(Tensor::from_f64(1, 4, &[0.1, 0.2, 0.3, 0.4]));
        let y = t.layer_norm(x, g, b).unwrap();
        let y = t.value(y);
        assert_eq!(y.row(0), &[0.1, 0.2, 0.3, 0.4]);
        let scale = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
        for (c, v) in y.row(1).iter().enumerate() {
            let x = if c % 2 == 0 { 1.0 } else { -1.0 };
            assert!((v - (x * scale + 0.1 * (c + 1) as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_matches_scalar_oracle() {
        let row = [0.3, -1.1, 2.0, 0.7, -0.2];
        let gain = [1.0, 0.5, -2.0, 1.5, 0.9];
        let bias = [0.0, 0.1, 0.2, -0.3, 0.4];
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_f64(1, 5, &row));
        let g = t.constant(Tensor::from_f64(1, 5, &gain));
        let b = t.constant(Tensor::from_f64(1, 5, &bias));
        let y = t.layer_norm(x, g, b).unwrap();
        let mean = row.iter().sum::<f64>() / 5.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        for c in 0..5 {
            let want = (row[c] - mean) / (var + 1e-5).sqrt() * gain[c] + bias[c];
            assert!((t.value(y).at(0, c) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_examples() {
        let mut t = Tape::<f64>::new();
        let q = t.constant(Tensor::from_f64(2, 2, &[1.0, 0.0, -3.0, 2.0]));
        let k = t.constant(Tensor::from_f64(1, 2, &[0.4, 0.4]));
        let v = t.constant(Tensor::from_f64(1, 2, &[7.0, -1.0]));
        let (out, scores) = attention(&mut t, q, k, v, None, None).unwrap();
        assert_eq!(t.value(out).data(), &[7.0, -1.0, 7.0, -1.0]);
        assert_eq!(t.value(scores).data(), &[1.0, 1.0]);

        let k2 = t.constant(Tensor::from_f64(2, 2, &[0.4, 0.4, 0.4, 0.4]));
        let v2 = t.constant(Tensor::from_f64(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let (_, scores) = attention(&mut t, q, k2, v2, None, None).unwrap();
        assert_eq!(t.value(scores).data(), &[0.5; 4]);
    }

    #[test]
    fn attention_matches_scalar_oracle() {
        let qv: Vec<f64> = (0..12).map(|i| ((i * 5 % 7) as f64 - 3.0) / 2.0).collect();
        let kv: Vec<f64> = (0..16).map(|i| ((i * 3 % 11) as f64 - 5.0) / 4.0).collect();
        let vv: Vec<f64> = (0..16).map(|i| ((i * 7 % 13) as f64 - 6.0) / 3.0).collect();
        let mut t = Tape::<f64>::new();
        let q = t.constant(Tensor::from_f64(3, 4, &qv));
        let k = t.constant(Tensor::from_f64(4, 4, &kv));
        let v = t.constant(Tensor::from_f64(4, 4, &vv));
        let (out, scores) = attention(&mut t, q, k, v, None, None).unwrap();
        for i in 0..3 {
            let logits: Vec<f64> =
                (0..4).map(|j| (0..4).map(|c| qv[i * 4 + c] * kv[j * 4 + c]).sum::<f64>() / 2.0).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let p: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, pj) in p.iter().enumerate() {
                assert!((t.value(scores).at(i, j) - pj).abs() < 1e-6);
            }
            for c in 0..4 {
                let want: f64 = (0..4).map(|j| p[j] * vv[j * 4 + c]).sum();
                assert!((t.value(out).at(i, c) - want).abs() < 1e-6);
            }
        }
    }
}

//! Dense row-major `f64` tensors.
//!
//! The model only needs matrices, so every operation here works on rank-2
//! tensors; vectors are `1 x n` rows. There is no implicit broadcasting:
//! the one exception is [`Tensor::add_row_bias`], which adds a `1 x n` row
//! to every row of an `m x n` matrix.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: axis {axis} out of range")]
    BadAxis { op: &'static str, axis: usize },
    #[error("{op}: empty tensor")]
    Empty { op: &'static str },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Ok(Tensor::matrix(rows.len(), cols, rows.concat()))
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::matrix(1, n, data)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::matrix(1, 1, vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::filled(shape, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// `(rows, cols)`; panics on non-matrices.
    pub fn dims(&self) -> (usize, usize) {
        assert!(self.is_matrix(), "expected a matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        same_shape(op, self, other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// `self += other`, shapes must match.
    pub fn accumulate(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "accumulate shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = matrix_dims("matmul", self)?;
        let (k2, n) = matrix_dims("matmul", other)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::matrix(m, n, out))
    }

    /// `self^T * other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = matrix_dims("t_matmul", self)?;
        let (k2, n) = matrix_dims("t_matmul", other)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "t_matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::matrix(m, n, out))
    }

    /// `self * other^T` without materialising the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = matrix_dims("matmul_t", self)?;
        let (n, k2) = matrix_dims("matmul_t", other)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Tensor::matrix(m, n, out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = matrix_dims("transpose", self)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::matrix(c, r, out))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    /// Adds the `1 x n` row `bias` to each row of this `m x n` matrix.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (r, c) = matrix_dims("add_row_bias", self)?;
        if bias.shape != [1, c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(Tensor::matrix(r, c, out))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let (r0, c0) = matrix_dims("concat", first)?;
        match axis {
            0 => {
                let mut rows = 0;
                let mut data = Vec::new();
                for p in parts {
                    let (r, c) = matrix_dims("concat", p)?;
                    if c != c0 {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            left: first.shape.clone(),
                            right: p.shape.clone(),
                        });
                    }
                    rows += r;
                    data.extend_from_slice(&p.data);
                }
                Ok(Tensor::matrix(rows, c0, data))
            }
            1 => {
                let mut cols = 0;
                for p in parts {
                    let (r, c) = matrix_dims("concat", p)?;
                    if r != r0 {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            left: first.shape.clone(),
                            right: p.shape.clone(),
                        });
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for p in parts {
                        data.extend_from_slice(p.row(i));
                    }
                }
                Ok(Tensor::matrix(r0, cols, data))
            }
            _ => Err(TensorError::BadAxis { op: "concat", axis }),
        }
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = matrix_dims("slice", self)?;
        match axis {
            0 if start + len <= r => Ok(Tensor::matrix(
                len,
                c,
                self.data[start * c..(start + len) * c].to_vec(),
            )),
            1 if start + len <= c => {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
                }
                Ok(Tensor::matrix(r, len, data))
            }
            0 | 1 => Err(TensorError::Invalid {
                op: "slice",
                message: format!("range {start}..{} exceeds {:?}", start + len, self.shape),
            }),
            _ => Err(TensorError::BadAxis { op: "slice", axis }),
        }
    }

    /// Picks rows by index.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (r, c) = matrix_dims("select_rows", self)?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(TensorError::Invalid {
                    op: "select_rows",
                    message: format!("row {i} of {r}"),
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Tensor::matrix(rows.len(), c, data))
    }
}

pub(crate) fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(TensorError::NotMatrix {
            op,
            shape: t.shape.clone(),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

/// Strided view of the 1-D lines of a matrix along `axis`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Lines {
    pub count: usize,
    pub len: usize,
    line_step: usize,
    pub stride: usize,
}

impl Lines {
    pub fn new(op: &'static str, t: &Tensor, axis: usize) -> Result<Lines> {
        let (r, c) = matrix_dims(op, t)?;
        match axis {
            0 => Ok(Lines {
                count: c,
                len: r,
                line_step: 1,
                stride: c,
            }),
            1 => Ok(Lines {
                count: r,
                len: c,
                line_step: c,
                stride: 1,
            }),
            _ => Err(TensorError::BadAxis { op, axis }),
        }
    }

    #[inline]
    pub fn index(&self, line: usize, k: usize) -> usize {
        line * self.line_step + k * self.stride
    }
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let lines = Lines::new("softmax", x, axis)?;
    let mut out = x.clone();
    for l in 0..lines.count {
        let max = (0..lines.len)
            .map(|k| x.data[lines.index(l, k)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for k in 0..lines.len {
            let i = lines.index(l, k);
            let e = (x.data[i] - max).exp();
            out.data[i] = e;
            total += e;
        }
        for k in 0..lines.len {
            out.data[lines.index(l, k)] /= total;
        }
    }
    Ok(out)
}

/// Per-line standardisation `(x - mean) / sqrt(var + eps)` along `axis`
/// (population variance). Returns the standardised values and `1/std` per line.
pub fn standardize(x: &Tensor, axis: usize, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let lines = Lines::new("layer_norm", x, axis)?;
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(lines.count);
    let n = lines.len as f64;
    for l in 0..lines.count {
        let mean = (0..lines.len)
            .map(|k| x.data[lines.index(l, k)])
            .sum::<f64>()
            / n;
        let var = (0..lines.len)
            .map(|k| (x.data[lines.index(l, k)] - mean).powi(2))
            .sum::<f64>()
            / n;
        let inv = 1.0 / (var + eps).sqrt();
        for k in 0..lines.len {
            let i = lines.index(l, k);
            out.data[i] = (x.data[i] - mean) * inv;
        }
        inv_std.push(inv);
    }
    Ok((out, inv_std))
}

/// Layer normalisation along `axis` with a learned gain and bias. For
/// `axis = 1` the gain/bias are `1 x cols`; for `axis = 0`, `rows x 1`.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    axis: usize,
    eps: f64,
) -> Result<Tensor> {
    let (xhat, _) = standardize(x, axis, eps)?;
    apply_affine(&xhat, gain, bias, axis)
}

pub(crate) fn affine_shape(x: &Tensor, axis: usize) -> Vec<usize> {
    if axis == 1 {
        vec![1, x.cols()]
    } else {
        vec![x.rows(), 1]
    }
}

pub(crate) fn apply_affine(
    xhat: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    axis: usize,
) -> Result<Tensor> {
    let lines = Lines::new("layer_norm", xhat, axis)?;
    let expected = affine_shape(xhat, axis);
    for p in [gain, bias] {
        if p.shape != expected {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: expected.clone(),
                right: p.shape.clone(),
            });
        }
    }
    let mut out = xhat.clone();
    for l in 0..lines.count {
        for k in 0..lines.len {
            let i = lines.index(l, k);
            out.data[i] = xhat.data[i] * gain.data[k] + bias.data[k];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = softmax(&Tensor::zeros(&[1, 3]), 1).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_columns() {
        let x = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn two_wide_layer_norm_collapses() {
        let g = Tensor::ones(&[1, 2]);
        let b = Tensor::zeros(&[1, 2]);
        let x = Tensor::matrix(3, 2, vec![4.0, 4.0, 9.0, -3.0, 0.1, 0.2]);
        let y = layer_norm(&x, &g, &b, 1, 1e-12).unwrap();
        let expect = [0.0, 0.0, 1.0, -1.0, -1.0, 1.0];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-9, "{a} vs {e}");
        }
    }

    #[test]
    fn transposed_products_agree() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]);
        assert_eq!(
            a.t_matmul(&b).unwrap(),
            a.transpose().unwrap().matmul(&b).unwrap()
        );
        let c = Tensor::matrix(4, 3, (0..12).map(|v| v as f64).collect());
        assert_eq!(
            a.matmul_t(&c).unwrap(),
            a.matmul(&c.transpose().unwrap()).unwrap()
        );
    }

    #[test]
    fn shape_errors() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            a.matmul(&a),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            a.add(&Tensor::zeros(&[3, 2])),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            Tensor::zeros(&[2]).transpose(),
            Err(TensorError::NotMatrix { .. })
        ));
        assert!(a.slice(1, 2, 2).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::matrix(2, 1, vec![5.0, 6.0]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.slice(1, 0, 2).unwrap(), a);
        assert_eq!(c.slice(1, 2, 1).unwrap(), b);
    }
}

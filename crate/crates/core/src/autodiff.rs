//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes only refer
//! to earlier nodes, so the record is acyclic by construction and a single
//! reverse sweep accumulates gradients.

use crate::fft::{transform_axis, Direction};
use crate::tensor::{
    affine_shape, apply_affine, matrix_dims, softmax, standardize, Lines, Result, Tensor,
    TensorError,
};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which component of a complex transform a node holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Re,
    Im,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>, usize),
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Softmax {
        src: Var,
        axis: usize,
    },
    LayerNorm {
        src: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    MeanPool {
        src: Var,
        axis: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Tensor,
        classes: Vec<usize>,
        row_weights: Vec<f64>,
    },
    Dft {
        re: Var,
        im: Option<Var>,
        axis: usize,
        inverse: bool,
        part: Part,
    },
    SelectRows {
        src: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        src: Var,
        rows: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        check_finite(op_name, &value)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push("param", t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        self.push("matmul", v, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        self.push("add", v, Op::Add(a, b), g)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let g = self.needs(a) || self.needs(b);
        self.push("mul", v, Op::Mul(a, b), g)
    }

    /// `x + bias` with the `1 x n` bias added to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.value(x).add_row_bias(self.value(bias))?;
        let g = self.needs(x) || self.needs(bias);
        self.push("add_row_bias", v, Op::AddRowBias(x, bias), g)
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.value(x).map(|e| e * s);
        let g = self.needs(x);
        self.push("scale", v, Op::Scale(x, s), g)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat(&values, axis)?;
        let g = parts.iter().any(|p| self.needs(*p));
        self.push("concat", v, Op::Concat(parts.to_vec(), axis), g)
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(src).slice(axis, start, len)?;
        let g = self.needs(src);
        self.push("slice", v, Op::Slice { src, axis, start }, g)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        let g = self.needs(x);
        self.push("transpose", v, Op::Transpose(x), g)
    }

    pub fn softmax(&mut self, src: Var, axis: usize) -> Result<Var> {
        let v = softmax(self.value(src), axis)?;
        let g = self.needs(src);
        self.push("softmax", v, Op::Softmax { src, axis }, g)
    }

    pub fn layer_norm(
        &mut self,
        src: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        eps: f64,
    ) -> Result<Var> {
        let (xhat, inv_std) = standardize(self.value(src), axis, eps)?;
        let v = apply_affine(&xhat, self.value(gain), self.value(bias), axis)?;
        let g = self.needs(src) || self.needs(gain) || self.needs(bias);
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                src,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            },
            g,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e.max(0.0));
        let g = self.needs(x);
        self.push("relu", v, Op::Relu(x), g)
    }

    /// Mean over `axis` (axis 0 gives a `1 x cols` row).
    pub fn mean_pool(&mut self, src: Var, axis: usize) -> Result<Var> {
        let x = self.value(src);
        let lines = Lines::new("mean_pool", x, axis)?;
        if lines.len == 0 {
            return Err(TensorError::Empty { op: "mean_pool" });
        }
        let data: Vec<f64> = (0..lines.count)
            .map(|l| {
                (0..lines.len)
                    .map(|k| x.data()[lines.index(l, k)])
                    .sum::<f64>()
                    / lines.len as f64
            })
            .collect();
        let v = if axis == 0 {
            Tensor::matrix(1, lines.count, data)
        } else {
            Tensor::matrix(lines.count, 1, data)
        };
        let g = self.needs(src);
        self.push("mean_pool", v, Op::MeanPool { src, axis }, g)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        let g = self.needs(x);
        self.push("sum", v, Op::Sum(x), g)
    }

    /// Class-weighted mean negative log-likelihood of `classes` under the
    /// row-wise softmax of `logits`:
    /// `sum_i w[c_i] * nll_i / sum_i w[c_i]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        classes: &[usize],
        class_weights: &[f64],
    ) -> Result<Var> {
        let x = self.value(logits);
        let (n, c) = matrix_dims("cross_entropy", x)?;
        if classes.len() != n || n == 0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                message: format!("{n} rows but {} targets", classes.len()),
            });
        }
        if class_weights.len() != c {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                message: format!("{c} classes but {} weights", class_weights.len()),
            });
        }
        if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                message: format!("class {bad} out of range"),
            });
        }
        let probs = softmax(x, 1)?;
        let row_weights: Vec<f64> = classes.iter().map(|&k| class_weights[k]).collect();
        let total_w: f64 = row_weights.iter().sum();
        if total_w <= 0.0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                message: "weights sum to zero".into(),
            });
        }
        let mut loss = 0.0;
        for (i, &k) in classes.iter().enumerate() {
            // log-softmax computed directly for stability.
            let row = x.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += row_weights[i] * (lse - row[k]);
        }
        let v = Tensor::scalar(loss / total_w);
        let g = self.needs(logits);
        let row_weights = row_weights.iter().map(|w| w / total_w).collect();
        self.push(
            "cross_entropy",
            v,
            Op::CrossEntropy {
                logits,
                probs,
                classes: classes.to_vec(),
                row_weights,
            },
            g,
        )
    }

    /// One component of the 1-D DFT of the complex matrix `(re, im)` along
    /// `axis`. `im = None` treats the input as real.
    pub fn dft(
        &mut self,
        re: Var,
        im: Option<Var>,
        axis: usize,
        inverse: bool,
        part: Part,
    ) -> Result<Var> {
        let len = Lines::new("dft", self.value(re), axis)?.len;
        let scale = if inverse { 1.0 / len as f64 } else { 1.0 };
        let (r, i) = transform_axis(
            self.value(re),
            im.map(|v| self.value(v)),
            axis,
            Direction::from_inverse(inverse),
            scale,
        )?;
        let v = match part {
            Part::Re => r,
            Part::Im => i,
        };
        let g = self.needs(re) || im.is_some_and(|v| self.needs(v));
        self.push(
            "dft",
            v,
            Op::Dft {
                re,
                im,
                axis,
                inverse,
                part,
            },
            g,
        )
    }

    /// Both components of the DFT along `axis`.
    pub fn dft_pair(
        &mut self,
        re: Var,
        im: Option<Var>,
        axis: usize,
        inverse: bool,
    ) -> Result<(Var, Var)> {
        Ok((
            self.dft(re, im, axis, inverse, Part::Re)?,
            self.dft(re, im, axis, inverse, Part::Im)?,
        ))
    }

    pub fn select_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(src).select_rows(rows)?;
        let g = self.needs(src);
        self.push(
            "select_rows",
            v,
            Op::SelectRows {
                src,
                rows: rows.to_vec(),
            },
            g,
        )
    }

    /// Places the rows of `src` at `rows` in a zero matrix with `total` rows.
    pub fn scatter_rows(&mut self, src: Var, rows: &[usize], total: usize) -> Result<Var> {
        let x = self.value(src);
        let (r, c) = matrix_dims("scatter_rows", x)?;
        if rows.len() != r || rows.iter().any(|&i| i >= total) {
            return Err(TensorError::Invalid {
                op: "scatter_rows",
                message: "row indices do not fit".into(),
            });
        }
        let mut out = Tensor::zeros(&[total, c]);
        for (k, &i) in rows.iter().enumerate() {
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(x.row(k));
        }
        let g = self.needs(src);
        self.push(
            "scatter_rows",
            out,
            Op::ScatterRows {
                src,
                rows: rows.to_vec(),
            },
            g,
        )
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Reverse sweep seeded with `d loss = seed`.
    pub fn backward_scaled(&self, loss: Var, seed: f64) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), seed));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b))?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), "mul", |x, y| x * y)?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), "mul", |x, y| x * y)?);
                }
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let (r, c) = g.dims();
                    let mut gb = vec![0.0; c];
                    for i in 0..r {
                        for (acc, v) in gb.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::matrix(1, c, gb));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.value(*p).dims();
                    let len = if *axis == 0 { r } else { c };
                    if self.needs(*p) {
                        self.accumulate(grads, *p, g.slice(*axis, offset, len)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let (r, c) = self.value(*src).dims();
                let mut out = Tensor::zeros(&[r, c]);
                let (gr, gc) = g.dims();
                for i in 0..gr {
                    for j in 0..gc {
                        let (si, sj) = if *axis == 0 {
                            (i + start, j)
                        } else {
                            (i, j + start)
                        };
                        out.set(si, sj, g.get(i, j));
                    }
                }
                self.accumulate(grads, *src, out);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()?),
            Op::Softmax { src, axis } => {
                let y = &node.value;
                let lines = Lines::new("softmax", y, *axis)?;
                let mut out = Tensor::zeros(y.shape());
                for l in 0..lines.count {
                    let dot: f64 = (0..lines.len)
                        .map(|k| {
                            let i = lines.index(l, k);
                            g.data()[i] * y.data()[i]
                        })
                        .sum();
                    for k in 0..lines.len {
                        let i = lines.index(l, k);
                        out.data_mut()[i] = y.data()[i] * (g.data()[i] - dot);
                    }
                }
                self.accumulate(grads, *src, out);
            }
            Op::LayerNorm {
                src,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            } => {
                let lines = Lines::new("layer_norm", xhat, *axis)?;
                let gamma = self.value(*gain);
                let shape = affine_shape(xhat, *axis);
                let mut g_gain = Tensor::zeros(&shape);
                let mut g_bias = Tensor::zeros(&shape);
                let mut g_x = Tensor::zeros(xhat.shape());
                let n = lines.len as f64;
                for l in 0..lines.count {
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for k in 0..lines.len {
                        let i = lines.index(l, k);
                        let gi = g.data()[i];
                        g_gain.data_mut()[k] += gi * xhat.data()[i];
                        g_bias.data_mut()[k] += gi;
                        let gh = gi * gamma.data()[k];
                        mean_g += gh;
                        mean_gx += gh * xhat.data()[i];
                    }
                    mean_g /= n;
                    mean_gx /= n;
                    for k in 0..lines.len {
                        let i = lines.index(l, k);
                        let gh = g.data()[i] * gamma.data()[k];
                        g_x.data_mut()[i] = inv_std[l] * (gh - mean_g - xhat.data()[i] * mean_gx);
                    }
                }
                self.accumulate(grads, *src, g_x);
                self.accumulate(grads, *gain, g_gain);
                self.accumulate(grads, *bias, g_bias);
            }
            Op::Relu(x) => {
                let out = g.zip_map(
                    self.value(*x),
                    "relu",
                    |gv, xv| if xv > 0.0 { gv } else { 0.0 },
                )?;
                self.accumulate(grads, *x, out);
            }
            Op::MeanPool { src, axis } => {
                let x = self.value(*src);
                let lines = Lines::new("mean_pool", x, *axis)?;
                let mut out = Tensor::zeros(x.shape());
                let inv = 1.0 / lines.len as f64;
                for l in 0..lines.count {
                    for k in 0..lines.len {
                        out.data_mut()[lines.index(l, k)] = g.data()[l] * inv;
                    }
                }
                self.accumulate(grads, *src, out);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::filled(self.value(*x).shape(), gv));
            }
            Op::CrossEntropy {
                logits,
                probs,
                classes,
                row_weights,
            } => {
                let gv = g.item();
                let mut out = probs.clone();
                let c = out.cols();
                for (i, &k) in classes.iter().enumerate() {
                    out.data_mut()[i * c + k] -= 1.0;
                    for v in &mut out.data_mut()[i * c..(i + 1) * c] {
                        *v *= row_weights[i] * gv;
                    }
                }
                self.accumulate(grads, *logits, out);
            }
            Op::Dft {
                re,
                im,
                axis,
                inverse,
                part,
            } => {
                // Adjoint of the DFT matrix F is its conjugate transpose: the
                // opposite-sign kernel, scaled by 1/n when F is the inverse.
                let len = Lines::new("dft", g, *axis)?.len;
                let (seed_re, seed_im) = match part {
                    Part::Re => (g.clone(), None),
                    Part::Im => (Tensor::zeros(g.shape()), Some(g)),
                };
                let (dir, scale) = if *inverse {
                    (Direction::Forward, 1.0 / len as f64)
                } else {
                    (Direction::Inverse, 1.0)
                };
                let (gr, gi) = transform_axis(&seed_re, seed_im, *axis, dir, scale)?;
                self.accumulate(grads, *re, gr);
                if let Some(im) = im {
                    self.accumulate(grads, *im, gi);
                }
            }
            Op::SelectRows { src, rows } => {
                let x = self.value(*src);
                let c = x.cols();
                let mut out = Tensor::zeros(x.shape());
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        out.data_mut()[i * c + j] += g.data()[k * c + j];
                    }
                }
                self.accumulate(grads, *src, out);
            }
            Op::ScatterRows { src, rows } => {
                self.accumulate(grads, *src, g.select_rows(rows)?);
            }
        }
        Ok(())
    }
}

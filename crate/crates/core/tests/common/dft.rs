//! Direct O(n^2) transforms and a triple-loop matrix product.

use std::f64::consts::PI;

use earlyflow_core::fft::Complex64;
use earlyflow_core::tensor::Tensor;

pub fn naive_dft(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = x.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let scale = if inverse { 1.0 / n as f64 } else { 1.0 };
    (0..n)
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, v) in x.iter().enumerate() {
                // Reduce j*k mod n before converting so the angle stays accurate.
                let jk = (j * k % n) as f64;
                acc += v * Complex64::from_polar(1.0, sign * 2.0 * PI * jk / n as f64);
            }
            acc * scale
        })
        .collect()
}

/// Direct 2-D transform: every output sums over every input entry.
pub fn naive_dft2(re: &Tensor, im: Option<&Tensor>, inverse: bool) -> (Tensor, Tensor) {
    let (r, c) = re.dims();
    let sign = if inverse { 1.0 } else { -1.0 };
    let scale = if inverse { 1.0 / (r * c) as f64 } else { 1.0 };
    let mut out_re = Tensor::zeros(&[r, c]);
    let mut out_im = Tensor::zeros(&[r, c]);
    for u in 0..r {
        for v in 0..c {
            let mut acc = Complex64::new(0.0, 0.0);
            for a in 0..r {
                for b in 0..c {
                    let x = Complex64::new(re.get(a, b), im.map_or(0.0, |t| t.get(a, b)));
                    let phase = (a * u % r) as f64 / r as f64 + (b * v % c) as f64 / c as f64;
                    acc += x * Complex64::from_polar(1.0, sign * 2.0 * PI * phase);
                }
            }
            out_re.set(u, v, acc.re * scale);
            out_im.set(u, v, acc.im * scale);
        }
    }
    (out_re, out_im)
}

pub fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// `||a - b|| / max(||b||, tiny)` over complex vectors.
pub fn relative_complex(a: &[Complex64], b: &[Complex64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|y| y.norm_sqr()).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

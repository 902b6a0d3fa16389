//! Fast Fourier transforms for arbitrary lengths.
//!
//! Power-of-two lengths use an iterative radix-2 transform; every other
//! length goes through Bluestein's chirp-z algorithm, so sequences are never
//! padded. Forward transforms use `exp(-2πi jk/n)` and are unnormalised; the
//! inverse uses `exp(+2πi jk/n)` and scales by `1/n`.

use std::f64::consts::PI;

pub use num_complex::Complex64;
use thiserror::Error;

use crate::tensor::{Lines, Tensor, TensorError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FftError {
    #[error("cannot transform an empty sequence")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    pub fn from_inverse(inverse: bool) -> Self {
        if inverse {
            Direction::Inverse
        } else {
            Direction::Forward
        }
    }

    fn sign(self) -> f64 {
        match self {
            Direction::Forward => -1.0,
            Direction::Inverse => 1.0,
        }
    }
}

/// Unnormalised transform in place.
fn transform_unscaled(buf: &mut [Complex64], dir: Direction) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, dir);
    } else {
        bluestein(buf, dir);
    }
}

fn radix2(buf: &mut [Complex64], dir: Direction) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    // Twiddles computed directly rather than by repeated multiplication.
    let sign = dir.sign();
    let twiddles: Vec<Complex64> = (0..n / 2)
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
        .collect();
    let mut size = 2;
    while size <= n {
        let half = size / 2;
        let step = n / size;
        for start in (0..n).step_by(size) {
            for k in 0..half {
                let w = twiddles[k * step];
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        size *= 2;
    }
}

fn bluestein(buf: &mut [Complex64], dir: Direction) {
    let n = buf.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = dir.sign();
    // chirp_k = exp(sign * πi k²/n); k² is reduced mod 2n to keep the angle small.
    let chirp: Vec<Complex64> = (0..n)
        .map(|k| {
            let k2 = (k as u128 * k as u128 % (2 * n as u128)) as f64;
            Complex64::from_polar(1.0, sign * PI * k2 / n as f64)
        })
        .collect();

    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for k in 0..n {
        a[k] = buf[k] * chirp[k];
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = chirp[0].conj();
    for k in 1..n {
        let c = chirp[k].conj();
        b[k] = c;
        b[m - k] = c;
    }
    radix2(&mut a, Direction::Forward);
    radix2(&mut b, Direction::Forward);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    radix2(&mut a, Direction::Inverse);
    let scale = 1.0 / m as f64;
    for k in 0..n {
        buf[k] = a[k] * scale * chirp[k];
    }
}

/// Transforms `buf` in place.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) -> Result<(), FftError> {
    if buf.is_empty() {
        return Err(FftError::Empty);
    }
    let dir = Direction::from_inverse(inverse);
    transform_unscaled(buf, dir);
    if inverse {
        let s = 1.0 / buf.len() as f64;
        for v in buf.iter_mut() {
            *v *= s;
        }
    }
    Ok(())
}

pub fn fft_1d(x: &[Complex64], inverse: bool) -> Result<Vec<Complex64>, FftError> {
    let mut out = x.to_vec();
    fft_in_place(&mut out, inverse)?;
    Ok(out)
}

/// Transform of every line of the complex matrix `(re, im)` along `axis`,
/// scaled by `scale` afterwards. `im = None` means a zero imaginary part.
pub(crate) fn transform_axis(
    re: &Tensor,
    im: Option<&Tensor>,
    axis: usize,
    dir: Direction,
    scale: f64,
) -> Result<(Tensor, Tensor), TensorError> {
    let lines = Lines::new("fft", re, axis)?;
    if let Some(im) = im {
        if im.shape() != re.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "fft",
                left: re.shape().to_vec(),
                right: im.shape().to_vec(),
            });
        }
    }
    if re.numel() == 0 {
        return Err(TensorError::Empty { op: "fft" });
    }
    let mut out_re = re.clone();
    let mut out_im = Tensor::zeros(re.shape());
    let mut buf = vec![Complex64::new(0.0, 0.0); lines.len];
    for l in 0..lines.count {
        for (k, slot) in buf.iter_mut().enumerate() {
            let i = lines.index(l, k);
            *slot = Complex64::new(re.data()[i], im.map_or(0.0, |t| t.data()[i]));
        }
        transform_unscaled(&mut buf, dir);
        for (k, v) in buf.iter().enumerate() {
            let i = lines.index(l, k);
            out_re.data_mut()[i] = v.re * scale;
            out_im.data_mut()[i] = v.im * scale;
        }
    }
    Ok((out_re, out_im))
}

/// 1-D transform of every line along `axis` (0 = down columns, 1 = along rows).
pub fn fft_axis(
    re: &Tensor,
    im: Option<&Tensor>,
    axis: usize,
    inverse: bool,
) -> Result<(Tensor, Tensor), TensorError> {
    let len = Lines::new("fft", re, axis)?.len;
    let scale = if inverse { 1.0 / len as f64 } else { 1.0 };
    transform_axis(re, im, axis, Direction::from_inverse(inverse), scale)
}

/// 2-D transform: rows first, then columns. The inverse is scaled by
/// `1/(rows*cols)`.
pub fn fft_2d(
    re: &Tensor,
    im: Option<&Tensor>,
    inverse: bool,
) -> Result<(Tensor, Tensor), TensorError> {
    let (r1, i1) = fft_axis(re, im, 1, inverse)?;
    fft_axis(&r1, Some(&i1), 0, inverse)
}

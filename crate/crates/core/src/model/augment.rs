use crate::fft::fft_2d;
use crate::tensor::{Result, Tensor};

/// `[x | Re(ifft2(x)) | Im(ifft2(x))]` along the feature axis.
pub fn ifft_augment(x: &Tensor) -> Result<Tensor> {
    let (re, im) = fft_2d(x, None, true)?;
    Tensor::concat(&[x, &re, &im], 1)
}

/// Fixed sinusoidal position table, `len x width`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, width]);
    for pos in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / width as f64);
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

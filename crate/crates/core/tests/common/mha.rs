//! Straight-line multi-domain attention written with explicit loops.

use earlyflow_core::fft::Complex64;
use earlyflow_core::model::MdMhaParams;

use super::dft::{naive_dft, naive_matmul, to_rows};

fn softmax_rows(s: &mut [Vec<f64>]) {
    for row in s {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Column-wise transform of a real `l x w` block.
fn spectrum(block: &[Vec<f64>]) -> Vec<Vec<Complex64>> {
    let l = block.len();
    let w = block[0].len();
    let mut out = vec![vec![Complex64::new(0.0, 0.0); w]; l];
    for c in 0..w {
        let col: Vec<Complex64> = block.iter().map(|r| Complex64::new(r[c], 0.0)).collect();
        for (r, v) in naive_dft(&col, false).into_iter().enumerate() {
            out[r][c] = v;
        }
    }
    out
}

/// Output rows for the unmasked input `z`.
pub fn md_mha_oracle(z: &[Vec<f64>], p: &MdMhaParams) -> Vec<Vec<f64>> {
    let l = z.len();
    let d = p.w_q.rows();
    let dv = d / p.h;
    let q = naive_matmul(z, &to_rows(&p.w_q));
    let k = naive_matmul(z, &to_rows(&p.w_k));
    let v = naive_matmul(z, &to_rows(&p.w_v));
    let scale = 1.0 / (d as f64).sqrt();
    let cut = |m: &[Vec<f64>], i: usize| -> Vec<Vec<f64>> {
        m.iter().map(|r| r[i * dv..(i + 1) * dv].to_vec()).collect()
    };

    let mut time_heads = Vec::new();
    let mut freq_heads = Vec::new();
    for i in 0..p.h {
        let (qi, ki, vi) = (cut(&q, i), cut(&k, i), cut(&v, i));
        let mut s = vec![vec![0.0; l]; l];
        for a in 0..l {
            for b in 0..l {
                s[a][b] = (0..dv).map(|c| qi[a][c] * ki[b][c]).sum::<f64>() * scale;
            }
        }
        softmax_rows(&mut s);
        time_heads.push(naive_matmul(&s, &vi));

        if p.use_frequency_heads() {
            let (qf, kf, vf) = (spectrum(&qi), spectrum(&ki), spectrum(&vi));
            let mut s = vec![vec![0.0; l]; l];
            for a in 0..l {
                for b in 0..l {
                    // Re(q * conj(k)) summed over the head's columns.
                    s[a][b] = (0..dv)
                        .map(|c| (qf[a][c] * kf[b][c].conj()).re)
                        .sum::<f64>()
                        * scale;
                }
            }
            softmax_rows(&mut s);
            let vre: Vec<Vec<f64>> = vf
                .iter()
                .map(|r| r.iter().map(|x| x.re).collect())
                .collect();
            freq_heads.push(naive_matmul(&s, &vre));
        }
    }
    let cat: Vec<Vec<f64>> = (0..l)
        .map(|r| {
            time_heads
                .iter()
                .chain(&freq_heads)
                .flat_map(|h| h[r].iter().copied())
                .collect()
        })
        .collect();
    naive_matmul(&cat, &to_rows(&p.w_o))
}

//! Synthetic multivariate series with known class structure.

use std::f64::consts::TAU;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::features::MtsSample;

const STEP_SECS: f64 = 0.01;

fn timestamps(len: usize) -> Vec<f64> {
    (0..len).map(|t| t as f64 * STEP_SECS).collect()
}

/// Three classes told apart by the oscillation frequency of every channel.
///
/// Channel `j` of class `c` oscillates at `base[c] * (1 + 0.05 j)` cycles per
/// step with random amplitude and phase, plus Gaussian-ish noise. Sample `i`
/// has class `i % 3`, so the suite is balanced.
pub fn frequency_suite(n_samples: usize, len: usize, d: usize, seed: u64) -> Vec<MtsSample> {
    const BASE: [f64; 3] = [0.05, 0.15, 0.3];
    const NAMES: [&str; 3] = ["slow", "medium", "fast"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|i| {
            let c = i % 3;
            let chans: Vec<(f64, f64, f64)> = (0..d)
                .map(|j| {
                    let f = BASE[c] * (1.0 + 0.05 * j as f64) * rng.gen_range(0.95..1.05);
                    (f, rng.gen_range(0.8..1.2), rng.gen_range(0.0..TAU))
                })
                .collect();
            let mut values = Vec::with_capacity(len * d);
            for t in 0..len {
                for &(f, a, phi) in &chans {
                    values.push(a * (TAU * f * t as f64 + phi).sin() + noise(&mut rng, 0.1));
                }
            }
            MtsSample::new(format!("freq-{i}"), d, values, timestamps(len), NAMES[c])
        })
        .collect()
}

/// Two classes with `d = 2` that differ only in signal amplitude.
///
/// Rows are `[A s_t + c, c]` where `s_t` is a random sinusoid shared in
/// distribution by both classes, `c` is a constant offset and `A` is 1 for
/// class `low` and 2.5 for class `high`. The sign of `s_t` is all that
/// survives a per-row layer norm of the raw input.
pub fn amplitude_suite(n_samples: usize, len: usize, seed: u64) -> Vec<MtsSample> {
    const AMPLITUDE: [f64; 2] = [1.0, 2.5];
    const NAMES: [&str; 2] = ["low", "high"];
    const OFFSET: f64 = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|i| {
            let c = i % 2;
            let f = rng.gen_range(0.05..0.2);
            let phi = rng.gen_range(0.0..TAU);
            let jitter = rng.gen_range(0.9..1.1);
            let mut values = Vec::with_capacity(2 * len);
            for t in 0..len {
                let s = jitter * (TAU * f * t as f64 + phi).sin() + noise(&mut rng, 0.05);
                values.push(AMPLITUDE[c] * s + OFFSET);
                values.push(OFFSET);
            }
            MtsSample::new(format!("amp-{i}"), 2, values, timestamps(len), NAMES[c])
        })
        .collect()
}

/// Two classes separated by the sign of a constant shift on every feature.
pub fn separable_suite(n_samples: usize, len: usize, d: usize, seed: u64) -> Vec<MtsSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|i| {
            let c = i % 2;
            let shift = if c == 0 { -1.0 } else { 1.0 };
            let values = (0..len * d).map(|_| shift + noise(&mut rng, 0.3)).collect();
            MtsSample::new(
                format!("sep-{i}"),
                d,
                values,
                timestamps(len),
                ["neg", "pos"][c],
            )
        })
        .collect()
}

/// Sum of four uniforms, rescaled to standard deviation `sd`.
fn noise<R: Rng>(rng: &mut R, sd: f64) -> f64 {
    let s: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum();
    s * sd * (3.0f64 / 4.0).sqrt()
}

//! Central finite-difference checks against the tape's gradients.

use earlyflow_core::autodiff::{Graph, Part, Var};
use earlyflow_core::model::{MdtConfig, MdtModel};
use earlyflow_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Builds `op` over parameter leaves made from `inputs` and reduces its
/// output to a scalar with fixed random weights.
pub type Op<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

fn scalar_loss(
    op: &Op,
    inputs: &[Tensor],
    probe: &mut Option<Tensor>,
    rng: &mut ChaCha8Rng,
) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = op(&mut g, &vars);
    let value = g.value(out).clone();
    let loss = if value.numel() == 1 {
        out
    } else {
        let w = probe
            .get_or_insert_with(|| Tensor::uniform(value.shape(), 1.0, rng))
            .clone();
        let wv = g.constant(w).unwrap();
        let m = g.mul(out, wv).unwrap();
        g.sum(m).unwrap()
    };
    (g, loss, vars)
}

/// Worst relative error over all inputs of `op`.
pub fn check_op(op: &Op, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> f64 {
    let mut probe = None;
    let (g, loss, vars) = scalar_loss(op, inputs, &mut probe, rng);
    let grads = g.backward(loss).unwrap();
    let eval = |perturbed: &[Tensor], probe: &mut Option<Tensor>, rng: &mut ChaCha8Rng| {
        let (g, loss, _) = scalar_loss(op, perturbed, probe, rng);
        g.value(loss).item()
    };
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= STEP;
            let d = eval(&plus, &mut probe, rng) - eval(&minus, &mut probe, rng);
            numeric.push(d / (2.0 * STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Cross-entropy of the model on one sample.
pub fn model_loss(model: &MdtModel, x: &Tensor, class: usize, weights: &[f64]) -> f64 {
    let mut g = Graph::new();
    let f = model
        .build(&mut g, x, None, None::<&mut ChaCha8Rng>)
        .unwrap();
    let l = g.cross_entropy(f.logits, &[class], weights).unwrap();
    g.value(l).item()
}

/// Worst per-parameter relative error of the full model's loss gradient.
pub fn check_model(model: &MdtModel, x: &Tensor, class: usize, weights: &[f64]) -> (f64, String) {
    let mut g = Graph::new();
    let f = model
        .build(&mut g, x, None, None::<&mut ChaCha8Rng>)
        .unwrap();
    let l = g.cross_entropy(f.logits, &[class], weights).unwrap();
    let grads = g.backward(l).unwrap();
    let mut worst = (0.0, String::new());
    for (k, name) in model.param_names().iter().enumerate() {
        let analytic = grads.get(f.params[k]).unwrap().data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let mut m = model.clone();
            m.params_mut()[k].data_mut()[j] += STEP;
            let up = model_loss(&m, x, class, weights);
            m.params_mut()[k].data_mut()[j] -= 2.0 * STEP;
            let down = model_loss(&m, x, class, weights);
            numeric.push((up - down) / (2.0 * STEP));
        }
        let e = relative_error(&analytic, &numeric);
        if e > worst.0 {
            worst = (e, name.clone());
        }
    }
    worst
}

/// Matrix with entries in `±bound`, kept at least `gap` away from zero.
pub fn away_from_zero(
    rows: usize,
    cols: usize,
    bound: f64,
    gap: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.gen_range(gap..bound);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<[usize; 2]>,
    pub op: Build,
}

fn case(
    name: &'static str,
    shapes: &[[usize; 2]],
    op: impl Fn(&mut Graph, &[Var]) -> Var + 'static,
) -> Case {
    Case {
        name,
        shapes: shapes.to_vec(),
        op: Box::new(op),
    }
}

/// Every differentiable op, each on small random shapes.
pub fn cases() -> Vec<Case> {
    vec![
        case("matmul", &[[3, 4], [4, 2]], |g, v| {
            g.matmul(v[0], v[1]).unwrap()
        }),
        case("add", &[[3, 4], [3, 4]], |g, v| g.add(v[0], v[1]).unwrap()),
        case("mul", &[[3, 4], [3, 4]], |g, v| g.mul(v[0], v[1]).unwrap()),
        case("add_row_bias", &[[3, 4], [1, 4]], |g, v| {
            g.add_row_bias(v[0], v[1]).unwrap()
        }),
        case("linear", &[[3, 4], [4, 5], [1, 5]], |g, v| {
            g.linear(v[0], v[1], v[2]).unwrap()
        }),
        case("scale", &[[2, 3]], |g, v| g.scale(v[0], -1.7).unwrap()),
        case("concat_rows", &[[2, 3], [4, 3]], |g, v| {
            g.concat(&[v[0], v[1]], 0).unwrap()
        }),
        case("concat_cols", &[[3, 2], [3, 1], [3, 4]], |g, v| {
            g.concat(&[v[0], v[1], v[2]], 1).unwrap()
        }),
        case("slice_rows", &[[5, 3]], |g, v| {
            g.slice(v[0], 0, 1, 3).unwrap()
        }),
        case("slice_cols", &[[3, 6]], |g, v| {
            g.slice(v[0], 1, 2, 2).unwrap()
        }),
        case("transpose", &[[3, 5]], |g, v| g.transpose(v[0]).unwrap()),
        case("softmax_rows", &[[3, 5]], |g, v| {
            g.softmax(v[0], 1).unwrap()
        }),
        case("softmax_cols", &[[4, 2]], |g, v| {
            g.softmax(v[0], 0).unwrap()
        }),
        case("layer_norm_rows", &[[3, 5], [1, 5], [1, 5]], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1, 1e-6).unwrap()
        }),
        case("layer_norm_cols", &[[4, 3], [4, 1], [4, 1]], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 0, 1e-6).unwrap()
        }),
        case("relu", &[[4, 4]], |g, v| g.relu(v[0]).unwrap()),
        case("mean_pool_rows", &[[4, 3]], |g, v| {
            g.mean_pool(v[0], 0).unwrap()
        }),
        case("mean_pool_cols", &[[4, 3]], |g, v| {
            g.mean_pool(v[0], 1).unwrap()
        }),
        case("sum", &[[3, 3]], |g, v| g.sum(v[0]).unwrap()),
        case("cross_entropy", &[[4, 3]], |g, v| {
            g.cross_entropy(v[0], &[0, 2, 1, 2], &[0.5, 1.0, 2.0])
                .unwrap()
        }),
        case("dft_real_re", &[[5, 3]], |g, v| {
            g.dft(v[0], None, 0, false, Part::Re).unwrap()
        }),
        case("dft_real_im", &[[5, 3]], |g, v| {
            g.dft(v[0], None, 0, false, Part::Im).unwrap()
        }),
        case("dft_complex_cols", &[[4, 3], [4, 3]], |g, v| {
            g.dft(v[0], Some(v[1]), 1, false, Part::Im).unwrap()
        }),
        case("idft_complex_re", &[[6, 2], [6, 2]], |g, v| {
            g.dft(v[0], Some(v[1]), 0, true, Part::Re).unwrap()
        }),
        case("idft_real_im", &[[3, 7]], |g, v| {
            g.dft(v[0], None, 1, true, Part::Im).unwrap()
        }),
        case("select_rows", &[[5, 2]], |g, v| {
            g.select_rows(v[0], &[4, 0, 4, 2]).unwrap()
        }),
        case("scatter_rows", &[[3, 2]], |g, v| {
            g.scatter_rows(v[0], &[1, 4, 0], 6).unwrap()
        }),
        case("attention_chain", &[[4, 6], [6, 6], [6, 6]], |g, v| {
            let q = g.matmul(v[0], v[1]).unwrap();
            let k = g.matmul(v[0], v[2]).unwrap();
            let kt = g.transpose(k).unwrap();
            let s = g.matmul(q, kt).unwrap();
            let w = g.softmax(s, 1).unwrap();
            g.matmul(w, v[0]).unwrap()
        }),
    ]
}

/// Largest relative error over every op for one seed, with the op's name.
pub fn worst_op_error(seed: u64) -> (f64, &'static str) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, "");
    for c in cases() {
        // Keep entries off relu's kink.
        let inputs: Vec<Tensor> = c
            .shapes
            .iter()
            .map(|&[r, k]| away_from_zero(r, k, 1.5, 0.05, &mut rng))
            .collect();
        let err = check_op(&*c.op, &inputs, &mut rng);
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, c.name);
        }
    }
    worst
}

/// The toy configuration used for whole-model gradient checks.
pub fn toy_config() -> MdtConfig {
    MdtConfig {
        d_in: 13,
        d_model: 8,
        h: 2,
        n_blocks: 1,
        d_ff: 16,
        n_classes: 3,
        max_len: 8,
        dropout: 0.0,
        ..MdtConfig::default()
    }
}

/// Worst parameter error of the toy model on a 5-row input for one seed.
pub fn toy_model_error(seed: u64) -> (f64, String) {
    let model = MdtModel::new(toy_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let x = Tensor::uniform(&[5, 13], 2.0, &mut rng);
    check_model(&model, &x, (seed % 3) as usize, &[1.0, 0.5, 2.0])
}

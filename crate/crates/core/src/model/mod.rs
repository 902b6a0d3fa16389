//! The multi-domain transformer classifier.

mod attention;
mod augment;
mod checkpoint;
mod config;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use attention::{md_mha_forward, AttentionTrace, FreqTrace, HeadTrace, MdMhaParams};
pub use augment::{ifft_augment, sinusoidal_positions};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, ParamEntry,
};
pub use config::MdtConfig;

use crate::autodiff::{Graph, Var};
use crate::dataset::fmt_real;
use crate::earliness::{take_prefix_capped, PrefixSpec};
use crate::features::MtsSample;
use crate::tensor::{Tensor, TensorError};
use attention::{md_mha_graph, valid_rows, AttnVars};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("every position is masked")]
    AllMasked,
    #[error("mask has {mask} entries for {rows} rows")]
    MaskLength { mask: usize, rows: usize },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("expected {expected} input features, got {got}")]
    Width { expected: usize, got: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, rng)
}

enum Init {
    Glorot,
    Zeros,
    Ones,
}

/// Names, shapes and initialisers of every parameter, in storage order.
fn param_layout(c: &MdtConfig) -> Vec<(String, [usize; 2], Init)> {
    let (w, d, f) = (c.input_width(), c.d_model, c.d_ff);
    let mut out = vec![
        ("input_norm.gain".to_string(), [1, w], Init::Ones),
        ("input_norm.bias".to_string(), [1, w], Init::Zeros),
        ("embed.weight".to_string(), [w, d], Init::Glorot),
        ("embed.bias".to_string(), [1, d], Init::Zeros),
        ("cls_token".to_string(), [1, d], Init::Glorot),
    ];
    for b in 0..c.n_blocks {
        let p = |s: &str| format!("blocks.{b}.{s}");
        out.extend([
            (p("attn.w_q"), [d, d], Init::Glorot),
            (p("attn.w_k"), [d, d], Init::Glorot),
            (p("attn.w_v"), [d, d], Init::Glorot),
            (p("attn.w_o"), [c.attention_concat_width(), d], Init::Glorot),
            (p("norm1.gain"), [1, d], Init::Ones),
            (p("norm1.bias"), [1, d], Init::Zeros),
            (p("ff.w1"), [d, f], Init::Glorot),
            (p("ff.b1"), [1, f], Init::Zeros),
            (p("ff.w2"), [f, d], Init::Glorot),
            (p("ff.b2"), [1, d], Init::Zeros),
            (p("norm2.gain"), [1, d], Init::Ones),
            (p("norm2.bias"), [1, d], Init::Zeros),
        ]);
    }
    out.push(("head.weight".to_string(), [d, c.n_classes], Init::Glorot));
    out.push(("head.bias".to_string(), [1, c.n_classes], Init::Zeros));
    out
}

struct BlockVars {
    attn: AttnVars,
    norm1: (Var, Var),
    ff_w1: Var,
    ff_b1: Var,
    ff_w2: Var,
    ff_b2: Var,
    norm2: (Var, Var),
}

struct ModelVars {
    input_norm: (Var, Var),
    embed: (Var, Var),
    cls: Var,
    blocks: Vec<BlockVars>,
    head: (Var, Var),
}

impl ModelVars {
    /// Binds leaves created in [`param_layout`] order.
    fn bind(vars: &[Var], n_blocks: usize) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("parameter count matches layout");
        let input_norm = (next(), next());
        let embed = (next(), next());
        let cls = next();
        let blocks = (0..n_blocks)
            .map(|_| BlockVars {
                attn: AttnVars {
                    w_q: next(),
                    w_k: next(),
                    w_v: next(),
                    w_o: next(),
                },
                norm1: (next(), next()),
                ff_w1: next(),
                ff_b1: next(),
                ff_w2: next(),
                ff_b2: next(),
                norm2: (next(), next()),
            })
            .collect();
        let head = (next(), next());
        ModelVars {
            input_norm,
            embed,
            cls,
            blocks,
            head,
        }
    }
}

/// Handles into a recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// One leaf per parameter, in [`MdtModel::param_names`] order.
    pub params: Vec<Var>,
    /// `1 x d_model`.
    pub latent: Var,
    /// `1 x n_classes`.
    pub logits: Var,
}

fn dropout<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    p: f64,
    rng: Option<&mut R>,
) -> Result<Var, ModelError> {
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).numel();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = g.constant(Tensor::new(&shape, mask)?)?;
    Ok(g.mul(x, m)?)
}

/// Parameters and configuration of a multi-domain transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct MdtModel {
    config: MdtConfig,
    seed: u64,
    names: Vec<String>,
    params: Vec<Tensor>,
    positions: Tensor,
}

impl MdtModel {
    /// Fresh model with weights drawn from `ChaCha8Rng::seed_from_u64(seed)`.
    pub fn new(config: MdtConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, [r, c], init) in param_layout(&config) {
            params.push(match init {
                Init::Glorot => glorot(r, c, &mut rng),
                Init::Zeros => Tensor::zeros(&[r, c]),
                Init::Ones => Tensor::ones(&[r, c]),
            });
            names.push(name);
        }
        let positions = sinusoidal_positions(config.max_len, config.d_model);
        Ok(MdtModel {
            config,
            seed,
            names,
            params,
            positions,
        })
    }

    /// Rebuilds a model from stored tensors, checking every shape.
    pub fn from_params(
        config: MdtConfig,
        seed: u64,
        params: Vec<Tensor>,
    ) -> Result<Self, ModelError> {
        let mut model = MdtModel::new(config, seed)?;
        if params.len() != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((name, old), new) in model.names.iter().zip(&model.params).zip(&params) {
            if old.shape() != new.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "{name}: expected shape {:?}, got {:?}",
                    old.shape(),
                    new.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &MdtConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    /// Records the forward pass for an `l x d_in` input on `g`.
    ///
    /// Rows with `mask[i] == false` are padding and are dropped before
    /// anything else happens. Passing `Some(rng)` switches dropout on.
    pub fn build<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: &Tensor,
        mask: Option<&[bool]>,
        mut rng: Option<&mut R>,
    ) -> Result<ForwardVars, ModelError> {
        let c = &self.config;
        if x.cols() != c.d_in {
            return Err(ModelError::Width {
                expected: c.d_in,
                got: x.cols(),
            });
        }
        let rows = valid_rows(mask, x.rows())?;
        let l = rows.len();
        if l > c.max_len {
            return Err(ModelError::TooLong {
                len: l,
                max_len: c.max_len,
            });
        }
        let x = if l == x.rows() {
            x.clone()
        } else {
            x.select_rows(&rows)?
        };
        let x = if c.use_ifft_augment {
            ifft_augment(&x)?
        } else {
            x
        };

        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.param(p.clone()))
            .collect::<Result<_, _>>()?;
        let v = ModelVars::bind(&params, c.n_blocks);

        let xv = g.constant(x)?;
        let xn = g.layer_norm(xv, v.input_norm.0, v.input_norm.1, 1, c.ln_eps)?;
        let e = g.linear(xn, v.embed.0, v.embed.1)?;
        let pe = g.constant(self.positions.slice(0, 0, l)?)?;
        let e = g.add(e, pe)?;
        let mut z = g.concat(&[v.cls, e], 0)?;

        for b in &v.blocks {
            let a = md_mha_graph(g, z, b.attn, c.h, c.use_frequency_heads, None)?.out;
            let a = dropout(g, a, c.dropout, rng.as_deref_mut())?;
            let r = g.add(z, a)?;
            let z1 = g.layer_norm(r, b.norm1.0, b.norm1.1, 1, c.ln_eps)?;
            let hdn = g.linear(z1, b.ff_w1, b.ff_b1)?;
            let hdn = g.relu(hdn)?;
            let f = g.linear(hdn, b.ff_w2, b.ff_b2)?;
            let f = dropout(g, f, c.dropout, rng.as_deref_mut())?;
            let r = g.add(z1, f)?;
            z = g.layer_norm(r, b.norm2.0, b.norm2.1, 1, c.ln_eps)?;
        }
        let latent = g.slice(z, 0, 0, 1)?;
        let logits = g.linear(latent, v.head.0, v.head.1)?;
        Ok(ForwardVars {
            params,
            latent,
            logits,
        })
    }

    /// Inference pass returning `(logits, latent)` as flat vectors.
    pub fn forward(
        &self,
        x: &Tensor,
        mask: Option<&[bool]>,
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let mut g = Graph::new();
        let f = self.build(&mut g, x, mask, None::<&mut ChaCha8Rng>)?;
        Ok((
            g.value(f.logits).data().to_vec(),
            g.value(f.latent).data().to_vec(),
        ))
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize, ModelError> {
        let (logits, _) = self.forward(x, None)?;
        Ok(argmax(&logits))
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// The `l x d` matrix of a sample.
pub fn sample_tensor(s: &MtsSample) -> Tensor {
    Tensor::matrix(s.len(), s.d, s.values.clone())
}

/// Writes the classification-token state of every sample's prefix as CSV.
pub fn export_latents(
    model: &MdtModel,
    samples: &[MtsSample],
    spec: PrefixSpec,
    out_path: impl AsRef<Path>,
) -> Result<(), ModelError> {
    let latents: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| {
            let (p, _) = take_prefix_capped(s, spec, model.config.max_len);
            model.forward(&sample_tensor(&p), None).map(|(_, lat)| lat)
        })
        .collect::<Result<_, _>>()?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(out_path)?;
    let mut header = vec!["flow_id".to_string(), "label".to_string()];
    header.extend((0..model.config.d_model).map(|i| format!("latent_{i}")));
    w.write_record(&header)?;
    for (s, lat) in samples.iter().zip(&latents) {
        let mut rec = vec![s.flow_id.clone(), s.label.clone()];
        rec.extend(lat.iter().map(|&v| fmt_real(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

//! Multi-domain multi-head attention.
//!
//! Every head attends twice over the same projections: once over the rows
//! as they are, and once over their spectra along the sequence axis. The
//! frequency heads score with the real part of the cross-power spectrum,
//! `Re(Q' conj(K')^T) = Qr Kr^T + Qi Ki^T`, and mix the real part of `V'`.

use rand::Rng;

use super::{glorot, ModelError};
use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

/// Projection weights of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MdMhaParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `(2 h d_v) x d_model` with frequency heads, `(h d_v) x d_model` without.
    pub w_o: Tensor,
    pub h: usize,
}

impl MdMhaParams {
    pub fn init<R: Rng + ?Sized>(
        d_model: usize,
        h: usize,
        use_frequency_heads: bool,
        rng: &mut R,
    ) -> Self {
        let concat = if use_frequency_heads {
            2 * d_model
        } else {
            d_model
        };
        MdMhaParams {
            w_q: glorot(d_model, d_model, rng),
            w_k: glorot(d_model, d_model, rng),
            w_v: glorot(d_model, d_model, rng),
            w_o: glorot(concat, d_model, rng),
            h,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn use_frequency_heads(&self) -> bool {
        self.w_o.rows() == 2 * self.d_model()
    }

    fn validate(&self) -> Result<(), ModelError> {
        let d = self.d_model();
        let square = [&self.w_q, &self.w_k, &self.w_v]
            .iter()
            .all(|w| w.shape() == [d, d]);
        let o_ok = self.w_o.cols() == d && (self.w_o.rows() == d || self.w_o.rows() == 2 * d);
        if self.h == 0 || d % self.h != 0 || !square || !o_ok {
            return Err(ModelError::Config(format!(
                "attention weights do not form a valid layer (d_model {d}, h {}, W_o {:?})",
                self.h,
                self.w_o.shape()
            )));
        }
        Ok(())
    }
}

/// Graph handles of one attention layer's weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FreqHeadVars {
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub weights: Var,
    pub out: Var,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub weights: Var,
    pub out: Var,
    pub freq: Option<FreqHeadVars>,
}

pub(crate) struct AttnOutput {
    pub out: Var,
    pub heads: Vec<HeadVars>,
    pub rows: Vec<usize>,
}

pub(crate) fn valid_rows(mask: Option<&[bool]>, len: usize) -> Result<Vec<usize>, ModelError> {
    let rows: Vec<usize> = match mask {
        None => (0..len).collect(),
        Some(m) => {
            if m.len() != len {
                return Err(ModelError::MaskLength {
                    mask: m.len(),
                    rows: len,
                });
            }
            (0..len).filter(|&i| m[i]).collect()
        }
    };
    if rows.is_empty() {
        return Err(ModelError::AllMasked);
    }
    Ok(rows)
}

/// Records one attention layer on `g`. Masked rows take no part in either
/// domain and come out as zero rows.
pub(crate) fn md_mha_graph(
    g: &mut Graph,
    z: Var,
    w: AttnVars,
    h: usize,
    use_frequency_heads: bool,
    mask: Option<&[bool]>,
) -> Result<AttnOutput, ModelError> {
    let (total, d_model) = g.value(z).dims();
    let rows = valid_rows(mask, total)?;
    let full = rows.len() == total;
    let zv = if full { z } else { g.select_rows(z, &rows)? };

    let q = g.matmul(zv, w.w_q)?;
    let k = g.matmul(zv, w.w_k)?;
    let v = g.matmul(zv, w.w_v)?;
    let d_v = d_model / h;
    let inv_sqrt = 1.0 / (d_model as f64).sqrt();

    let mut heads = Vec::with_capacity(h);
    for i in 0..h {
        let qi = g.slice(q, 1, i * d_v, d_v)?;
        let ki = g.slice(k, 1, i * d_v, d_v)?;
        let vi = g.slice(v, 1, i * d_v, d_v)?;

        let kt = g.transpose(ki)?;
        let s = g.matmul(qi, kt)?;
        let s = g.scale(s, inv_sqrt)?;
        let weights = g.softmax(s, 1)?;
        let out = g.matmul(weights, vi)?;

        let freq = if use_frequency_heads {
            let qf = g.dft_pair(qi, None, 0, false)?;
            let kf = g.dft_pair(ki, None, 0, false)?;
            let vf = g.dft_pair(vi, None, 0, false)?;
            let krt = g.transpose(kf.0)?;
            let kit = g.transpose(kf.1)?;
            let rr = g.matmul(qf.0, krt)?;
            let ii = g.matmul(qf.1, kit)?;
            let s = g.add(rr, ii)?;
            let s = g.scale(s, inv_sqrt)?;
            let weights = g.softmax(s, 1)?;
            let out = g.matmul(weights, vf.0)?;
            Some(FreqHeadVars {
                q: qf,
                k: kf,
                v: vf,
                weights,
                out,
            })
        } else {
            None
        };
        heads.push(HeadVars {
            q: qi,
            k: ki,
            v: vi,
            weights,
            out,
            freq,
        });
    }

    let mut parts: Vec<Var> = heads.iter().map(|hd| hd.out).collect();
    parts.extend(heads.iter().filter_map(|hd| hd.freq.map(|f| f.out)));
    let cat = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat(&parts, 1)?
    };
    let mixed = g.matmul(cat, w.w_o)?;
    let out = if full {
        mixed
    } else {
        g.scatter_rows(mixed, &rows, total)?
    };
    Ok(AttnOutput { out, heads, rows })
}

/// Intermediate values of a single head, over the valid rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Row-stochastic time-domain attention weights.
    pub time_scores: Tensor,
    pub time_out: Tensor,
    pub freq: Option<FreqTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreqTrace {
    /// `(re, im)` spectra along the sequence axis.
    pub q: (Tensor, Tensor),
    pub k: (Tensor, Tensor),
    pub v: (Tensor, Tensor),
    pub scores: Tensor,
    pub out: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// Indices of the rows that took part in attention.
    pub rows: Vec<usize>,
    pub heads: Vec<HeadTrace>,
}

impl AttentionTrace {
    pub(crate) fn from_graph(g: &Graph, out: &AttnOutput) -> Self {
        let val = |v: Var| g.value(v).clone();
        let pair = |p: (Var, Var)| (val(p.0), val(p.1));
        let heads = out
            .heads
            .iter()
            .map(|hd| HeadTrace {
                q: val(hd.q),
                k: val(hd.k),
                v: val(hd.v),
                time_scores: val(hd.weights),
                time_out: val(hd.out),
                freq: hd.freq.map(|f| FreqTrace {
                    q: pair(f.q),
                    k: pair(f.k),
                    v: pair(f.v),
                    scores: val(f.weights),
                    out: val(f.out),
                }),
            })
            .collect();
        AttentionTrace {
            rows: out.rows.clone(),
            heads,
        }
    }
}

/// Evaluates one attention layer outside of any model.
///
/// `mask[i] == false` marks row `i` as padding.
pub fn md_mha_forward(
    z: &Tensor,
    params: &MdMhaParams,
    mask: Option<&[bool]>,
) -> Result<(Tensor, AttentionTrace), ModelError> {
    params.validate()?;
    if z.cols() != params.d_model() {
        return Err(ModelError::Width {
            expected: params.d_model(),
            got: z.cols(),
        });
    }
    let mut g = Graph::new();
    let zv = g.constant(z.clone())?;
    let w = AttnVars {
        w_q: g.constant(params.w_q.clone())?,
        w_k: g.constant(params.w_k.clone())?,
        w_v: g.constant(params.w_v.clone())?,
        w_o: g.constant(params.w_o.clone())?,
    };
    let out = md_mha_graph(&mut g, zv, w, params.h, params.use_frequency_heads(), mask)?;
    let trace = AttentionTrace::from_graph(&g, &out);
    Ok((g.value(out.out).clone(), trace))
}

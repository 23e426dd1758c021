//! Cross-attention with Hadamard-weighted logits,
//! `softmax(W ⊙ QKᵀ/√d_k)·V`, and the encoder block built around it.
//! There is no positional encoding anywhere: spatial correspondence between
//! BEV queries and image features enters only through `W`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::field::VisibilityMode;
use crate::math;
use crate::tensor::{Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub visibility_mode: VisibilityMode,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize, visibility_mode: VisibilityMode) -> Result<Self> {
        let cfg = Self { d_model, n_heads, visibility_mode };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }
}

fn matrix_dims(tape: &Tape, v: Var, what: &str) -> Result<(usize, usize)> {
    match tape.shape(v) {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what} must be a matrix, got {s:?}"))),
    }
}

/// Multi-head `softmax(W ⊙ QKᵀ/√d_k)·V`. Every head uses the same `W`.
///
/// `excluded`, when given, is an `n_q × n_k` mask of keys removed from each
/// query's softmax.
pub fn weighted_attention(
    tape: &mut Tape,
    w: Var,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    excluded: Option<&[bool]>,
) -> Result<Var> {
    let (n_q, d) = matrix_dims(tape, q, "Q")?;
    let (n_k, dk_) = matrix_dims(tape, k, "K")?;
    let (n_v, dv) = matrix_dims(tape, v, "V")?;
    let (wr, wc) = matrix_dims(tape, w, "W")?;
    if dk_ != d || dv != d || n_v != n_k || wr != n_q || wc != n_k {
        return Err(Error::Shape(format!(
            "attention with W {wr}x{wc}, Q {n_q}x{d}, K {n_k}x{dk_}, V {n_v}x{dv}"
        )));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::InvalidConfig(format!("{n_heads} heads for width {d}")));
    }
    if tape.value(w).iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::InvalidConfig("attention weights must lie in [0, 1]".into()));
    }
    let d_k = d / n_heads;
    let inv_sqrt = 1.0 / math::sqrt(d_k as f64);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * d_k, d_k)?,
                tape.slice_cols(k, h * d_k, d_k)?,
                tape.slice_cols(v, h * d_k, d_k)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, inv_sqrt)?;
        let weighted = tape.mul(w, logits)?;
        let probs = match excluded {
            Some(mask) => tape.masked_softmax_rows(weighted, mask.to_vec())?,
            None => tape.softmax_rows(weighted)?,
        };
        heads.push(tape.matmul(probs, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        tape.concat_cols(&heads)
    }
}

/// Plain multi-head scaled dot-product attention, for reference.
pub fn scaled_dot_product_attention(tape: &mut Tape, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
    let (_, d) = matrix_dims(tape, q, "Q")?;
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Shape(format!("{d} columns do not split into {n_heads} heads")));
    }
    let d_k = d / n_heads;
    let inv_sqrt = 1.0 / math::sqrt(d_k as f64);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = if n_heads == 1 { q } else { tape.slice_cols(q, h * d_k, d_k)? };
        let kh = if n_heads == 1 { k } else { tape.slice_cols(k, h * d_k, d_k)? };
        let vh = if n_heads == 1 { v } else { tape.slice_cols(v, h * d_k, d_k)? };
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, inv_sqrt)?;
        let probs = tape.softmax_rows(logits)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        tape.concat_cols(&heads)
    }
}

/// Tape handles of one encoder block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ff1_weight: Var,
    pub ff1_bias: Var,
    pub ff2_weight: Var,
    pub ff2_bias: Var,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn affine_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(x, LAYER_NORM_EPS)?;
    let g = tape.mul_col_gain(n, gain)?;
    tape.add_row_bias(g, bias)
}

/// Keys excluded per query: all keys of a view whose field row is all zero.
fn zero_row_mask(tape: &Tape, fields: &[Var]) -> Vec<bool> {
    let n_q = tape.shape(fields[0])[0];
    let widths: Vec<usize> = fields.iter().map(|f| tape.shape(*f)[1]).collect();
    let total: usize = widths.iter().sum();
    let mut mask = vec![false; n_q * total];
    for q in 0..n_q {
        let mut offset = 0;
        for (f, &w) in fields.iter().zip(&widths) {
            let row = &tape.value(*f)[q * w..(q + 1) * w];
            if row.iter().all(|x| *x == 0.0) {
                mask[q * total + offset..q * total + offset + w].iter_mut().for_each(|m| *m = true);
            }
            offset += w;
        }
    }
    mask
}

/// One pre-norm encoder block: BEV queries attend jointly to the features of
/// every camera (keys concatenated, field blocks placed side by side so one
/// softmax spans all views), then a residual two-layer feed-forward.
pub fn cross_attention_block(
    tape: &mut Tape,
    queries: Var,
    features: &[Var],
    fields: &[Var],
    params: &BlockVars,
    cfg: &AttentionConfig,
) -> Result<Var> {
    if features.is_empty() || features.len() != fields.len() {
        return Err(Error::Shape(format!("{} feature maps for {} fields", features.len(), fields.len())));
    }
    let (n_q, _) = matrix_dims(tape, queries, "queries")?;
    for (f, w) in features.iter().zip(fields) {
        let (nk, _) = matrix_dims(tape, *f, "features")?;
        let (wr, wc) = matrix_dims(tape, *w, "field")?;
        if wr != n_q || wc != nk {
            return Err(Error::Shape(format!("field {wr}x{wc} for {n_q} queries and {nk} keys")));
        }
    }
    let xn = affine_norm(tape, queries, params.ln1_gain, params.ln1_bias)?;
    let q = tape.matmul(xn, params.wq)?;
    let feats = if features.len() == 1 { features[0] } else { tape.concat_rows(features)? };
    let k = tape.matmul(feats, params.wk)?;
    let v = tape.matmul(feats, params.wv)?;
    let w = if fields.len() == 1 { fields[0] } else { tape.concat_cols(fields)? };
    let mask = match cfg.visibility_mode {
        VisibilityMode::Literal => None,
        VisibilityMode::Masked => Some(zero_row_mask(tape, fields)),
    };
    let attn = weighted_attention(tape, w, q, k, v, cfg.n_heads, mask.as_deref())?;
    let proj = tape.matmul(attn, params.wo)?;
    let x1 = tape.add(queries, proj)?;

    let x1n = affine_norm(tape, x1, params.ln2_gain, params.ln2_bias)?;
    let h = tape.matmul(x1n, params.ff1_weight)?;
    let h = tape.add_row_bias(h, params.ff1_bias)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, params.ff2_weight)?;
    let h = tape.add_row_bias(h, params.ff2_bias)?;
    tape.add(x1, h)
}

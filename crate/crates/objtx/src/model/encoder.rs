//! Post-norm transformer encoder stack.
//!
//! Each block: multi-head self-attention (scaled dot product, additive key
//! masking, attention dropout, output projection, output dropout), residual
//! + layer norm, then a gelu feed-forward with output dropout, residual +
//! layer norm.

use crate::error::{Error, Result};
use crate::model::params::{LayerIds, ModelParams};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::ops::Mode;
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::rng::SubRng;

/// Additive bias for masked attention keys.
pub const MASK_BIAS: f64 = -1e9;
/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-12;

/// One encoder block over an n x hidden node.
#[allow(clippy::too_many_arguments)]
fn encoder_block<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    mask_bias: NodeId,
    layer: &LayerIds,
    params: &ModelParams<S>,
    mode: Mode,
    rng: &mut SubRng,
) -> Result<NodeId> {
    let cfg = &params.config;
    let reg = &params.registry;
    let dh = cfg.head_dim;

    let w_q = g.param(reg, layer.w_q);
    let b_q = g.param(reg, layer.b_q);
    let w_k = g.param(reg, layer.w_k);
    let b_k = g.param(reg, layer.b_k);
    let w_v = g.param(reg, layer.w_v);
    let b_v = g.param(reg, layer.b_v);

    let q = g.matmul(x, w_q)?;
    let q = g.add_row(q, b_q)?;
    let k = g.matmul(x, w_k)?;
    let k = g.add_row(k, b_k)?;
    let v = g.matmul(x, w_v)?;
    let v = g.add_row(v, b_v)?;

    let mut head_outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kht = g.transpose(kh)?;
        let scores = g.matmul(qh, kht)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = g.add(scores, mask_bias)?;
        let attn = g.softmax_rows(scores)?;
        let attn = g.dropout(attn, cfg.dropout, mode, rng)?;
        head_outs.push(g.matmul(attn, vh)?);
    }
    let concat = g.concat_cols(&head_outs)?;
    let w_out = g.param(reg, layer.w_out);
    let b_out = g.param(reg, layer.b_out);
    let attn_out = g.matmul(concat, w_out)?;
    let attn_out = g.add_row(attn_out, b_out)?;
    let attn_out = g.dropout(attn_out, cfg.dropout, mode, rng)?;

    let res1 = g.add(x, attn_out)?;
    let g1 = g.param(reg, layer.ln1_gamma);
    let be1 = g.param(reg, layer.ln1_beta);
    let x1 = g.layer_norm_rows(res1, g1, be1, LN_EPS)?;

    let w1 = g.param(reg, layer.w_ff1);
    let b1 = g.param(reg, layer.b_ff1);
    let w2 = g.param(reg, layer.w_ff2);
    let b2 = g.param(reg, layer.b_ff2);
    let ff = g.matmul(x1, w1)?;
    let ff = g.add_row(ff, b1)?;
    let ff = g.gelu(ff);
    let ff = g.matmul(ff, w2)?;
    let ff = g.add_row(ff, b2)?;
    let ff = g.dropout(ff, cfg.dropout, mode, rng)?;

    let res2 = g.add(x1, ff)?;
    let g2 = g.param(reg, layer.ln2_gamma);
    let be2 = g.param(reg, layer.ln2_beta);
    g.layer_norm_rows(res2, g2, be2, LN_EPS)
}

/// Run the full encoder over embedded tokens. `mask[j]` false hides token
/// `j` from every query (its own row output is then meaningless).
pub fn encode<S: Scalar>(
    g: &mut Graph<S>,
    tokens: NodeId,
    mask: &[bool],
    params: &ModelParams<S>,
    mode: Mode,
    rng: &mut SubRng,
) -> Result<NodeId> {
    let n = g.value(tokens).rows();
    if mask.len() != n {
        return Err(Error::Shape(format!(
            "attention mask covers {} tokens, sequence has {n}",
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Usage("attention mask hides every token".into()));
    }
    // additive n x n bias: column j = MASK_BIAS where token j is hidden
    let mut bias = Tensor::<S>::zeros(&[n, n])?;
    for i in 0..n {
        for j in 0..n {
            if !mask[j] {
                bias.set2(i, j, S::from_f64(MASK_BIAS));
            }
        }
    }
    let bias = g.constant(bias);
    let mut x = tokens;
    for layer in &params.layers {
        x = encoder_block(g, x, bias, layer, params, mode, rng)?;
    }
    Ok(x)
}

//! Task heads and their losses.
//!
//! The masked-instance head is a two-layer gelu MLP whose penultimate state
//! doubles as the context feature for late fusion. The compatibility and
//! fine-tuning heads are dropout + linear on the `[CLS]` state. Losses:
//! soft-target cross entropy against pseudo-label distributions, a
//! contrastive loss over span pairs, one-hot cross entropy, squared error,
//! and per-class logistic loss for fusion.

use crate::error::{Error, Result};
use crate::model::params::ModelParams;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::ops::Mode;
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::rng::SubRng;

/// Log floor for the reference masked loss.
pub const LOG_FLOOR: f64 = 1e-12;

// ── Heads ──────────────────────────────────────────────────────────────

/// Masked-instance prediction head over selected token rows (k x hidden).
/// Returns (logits k x d_label, penultimate k x hidden).
pub fn mask_head<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    rows: NodeId,
) -> Result<(NodeId, NodeId)> {
    let reg = &params.registry;
    let w1 = g.param(reg, params.heads.mask_w1);
    let b1 = g.param(reg, params.heads.mask_b1);
    let w2 = g.param(reg, params.heads.mask_w2);
    let b2 = g.param(reg, params.heads.mask_b2);
    let h = g.matmul(rows, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let logits = g.matmul(h, w2)?;
    let logits = g.add_row(logits, b2)?;
    Ok((logits, h))
}

/// Span-compatibility projection of `[CLS]` states (m x hidden -> m x hidden).
pub fn compat_head<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    v: NodeId,
    mode: Mode,
    rng: &mut SubRng,
) -> Result<NodeId> {
    let reg = &params.registry;
    let v = g.dropout(v, params.config.dropout, mode, rng)?;
    let w = g.param(reg, params.heads.compat_w);
    let b = g.param(reg, params.heads.compat_b);
    let out = g.matmul(v, w)?;
    g.add_row(out, b)
}

/// Fine-tuning head on the `[CLS]` state (1 x hidden -> 1 x n_out).
pub fn task_head<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    v: NodeId,
    mode: Mode,
    rng: &mut SubRng,
) -> Result<NodeId> {
    let th = params
        .task_head
        .as_ref()
        .ok_or_else(|| Error::Usage("model has no task head".into()))?;
    let v = g.dropout(v, params.config.dropout, mode, rng)?;
    let w = g.param(&params.registry, th.w);
    let b = g.param(&params.registry, th.b);
    let out = g.matmul(v, w)?;
    g.add_row(out, b)
}

/// Late-fusion head: concat(context 1 x hidden, short-term 1 x d_label)
/// through a single linear layer to per-class scores.
pub fn fusion_head<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    context: NodeId,
    short_term: NodeId,
) -> Result<NodeId> {
    let joined = g.concat_cols(&[context, short_term])?;
    let w = g.param(&params.registry, params.heads.fusion_w);
    let b = g.param(&params.registry, params.heads.fusion_b);
    let out = g.matmul(joined, w)?;
    g.add_row(out, b)
}

// ── Reference losses (plain f64) ───────────────────────────────────────

/// Cross entropy between a target distribution `p` and a predicted
/// distribution `p_hat`: `-sum p ln(max(p_hat, 1e-12))`. Both arguments
/// must already be distributions of equal length.
pub fn masked_loss(p: &[f64], p_hat: &[f64]) -> Result<f64> {
    if p.len() != p_hat.len() || p.is_empty() {
        return Err(Error::Shape(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            p_hat.len()
        )));
    }
    Ok(p
        .iter()
        .zip(p_hat)
        .map(|(&pi, &qi)| -pi * qi.max(LOG_FLOOR).ln())
        .sum())
}

/// Contrastive loss of an anchor against one positive and `negatives`:
/// `-ln( exp(s+) / (exp(s+) + sum_j exp(s-_j)) )` over dot-product scores,
/// computed with max subtraction.
pub fn infonce_loss(v: &[f64], v_pos: &[f64], negatives: &[Vec<f64>]) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Usage("contrastive loss needs a negative".into()));
    }
    let dot = |a: &[f64], b: &[f64]| -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::Shape(format!(
                "vector lengths differ: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
    };
    let s_pos = dot(v, v_pos)?;
    let mut scores = vec![s_pos];
    for n in negatives {
        scores.push(dot(v, n)?);
    }
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
    Ok(-((s_pos - mx).exp() / denom).ln())
}

// ── Graph losses ───────────────────────────────────────────────────────

/// Soft-target cross entropy of logit rows against target distributions,
/// averaged over rows: mean_i [ lse(logits_i) - sum_k p_ik logits_ik ].
/// Identical to `masked_loss(p, softmax(logits))` but expressed through
/// log-sum-exp so no explicit floor is needed.
pub fn masked_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    targets: &[Vec<f64>],
) -> Result<NodeId> {
    let (k, d) = {
        let t = g.value(logits);
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "logits must be rank-2, got {:?}",
                t.shape()
            )));
        }
        (t.rows(), t.cols())
    };
    if targets.len() != k {
        return Err(Error::Shape(format!(
            "{} target rows for {k} logit rows",
            targets.len()
        )));
    }
    let mut p_flat = Vec::with_capacity(k * d);
    for p in targets {
        crate::data::validate_distribution(p, "masked target")?;
        if p.len() != d {
            return Err(Error::Shape(format!(
                "target has {} classes, logits have {d}",
                p.len()
            )));
        }
        p_flat.extend(p.iter().map(|&x| S::from_f64(x)));
    }
    let p = g.constant(Tensor::from_vec(&[k, d], p_flat)?);
    let lse = g.logsumexp_rows(logits)?; // k x 1
    let weighted = g.mul(logits, p)?;
    let ones = g.constant(Tensor::filled(&[d, 1], S::ONE)?);
    let row_dot = g.matmul(weighted, ones)?; // k x 1
    let per_row = g.sub(lse, row_dot)?;
    let total = g.sum_all(per_row);
    Ok(g.scale(total, 1.0 / k as f64))
}

/// One-hot cross entropy for a single logit row (1 x c).
pub fn cross_entropy_node<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    target: usize,
) -> Result<NodeId> {
    let lse = g.logsumexp_rows(logits)?;
    let s = g.pick(logits, 0, target)?;
    g.sub(lse, s)
}

/// Squared error of a 1 x 1 prediction against a constant target.
pub fn squared_error_node<S: Scalar>(
    g: &mut Graph<S>,
    pred: NodeId,
    target: f64,
) -> Result<NodeId> {
    let t = g.constant(Tensor::scalar(S::from_f64(target)));
    let d = g.sub(pred, t)?;
    g.mul(d, d)
}

/// Contrastive batch loss over projected span vectors (n x hidden, n even,
/// consecutive rows are positive pairs). Every row serves as an anchor;
/// candidates are the other n-1 rows; loss is averaged over the n anchors.
pub fn compat_batch_loss<S: Scalar>(g: &mut Graph<S>, vecs: NodeId) -> Result<NodeId> {
    let n = g.value(vecs).rows();
    if n < 4 || n % 2 != 0 {
        return Err(Error::Usage(format!(
            "contrastive batch needs an even size of at least 4, got {n}"
        )));
    }
    let vt = g.transpose(vecs)?;
    let scores = g.matmul(vecs, vt)?; // n x n similarity
    let mut anchor_losses = Vec::with_capacity(n);
    for i in 0..n {
        let partner = if i % 2 == 0 { i + 1 } else { i - 1 };
        let row = g.gather_rows(scores, &[i])?; // 1 x n
        // drop the self column
        let mut parts = Vec::new();
        if i > 0 {
            parts.push(g.slice_cols(row, 0, i)?);
        }
        if i + 1 < n {
            parts.push(g.slice_cols(row, i + 1, n - i - 1)?);
        }
        let others = g.concat_cols(&parts)?; // 1 x (n-1)
        let pos_col = if partner < i { partner } else { partner - 1 };
        let lse = g.logsumexp_rows(others)?;
        let pos = g.pick(others, 0, pos_col)?;
        anchor_losses.push(g.sub(lse, pos)?);
    }
    g.mean_scalars(&anchor_losses)
}

/// Per-class logistic loss of fused scores (1 x c) against a one-hot
/// target, averaged over classes.
pub fn logistic_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    scores: NodeId,
    target: usize,
) -> Result<NodeId> {
    let c = g.value(scores).cols();
    if target >= c {
        return Err(Error::Shape(format!(
            "target class {target} out of range for {c} classes"
        )));
    }
    // y * softplus(-s) + (1 - y) * softplus(s), summed then averaged
    let mut y = Tensor::<S>::zeros(&[1, c])?;
    y.set2(0, target, S::ONE);
    let mut y_inv = Tensor::<S>::filled(&[1, c], S::ONE)?;
    y_inv.set2(0, target, S::ZERO);
    let y = g.constant(y);
    let y_inv = g.constant(y_inv);
    let neg = g.scale(scores, -1.0);
    let sp_neg = g.softplus(neg);
    let sp_pos = g.softplus(scores);
    let pos_term = g.mul(y, sp_neg)?;
    let neg_term = g.mul(y_inv, sp_pos)?;
    let total = g.add(pos_term, neg_term)?;
    let sum = g.sum_all(total);
    Ok(g.scale(sum, 1.0 / c as f64))
}

//! Detection tokens: appearance + geometry + time + identity + shot.
//!
//! Each detection token is the sum of five projections:
//! appearance `z * W_feat`, geometry `s * W_spatial` (box center and size),
//! time `tau * W_pos` with `tau` the span-normalized distances from span
//! start, span end, and span center, an instance-slot embedding shared by
//! all detections of one track, and a shot-slot embedding shared by all
//! tracks of one shot, plus a bias. Token 0 is the learned `[CLS]` state.
//!
//! Instance slots are assigned by a fresh random injection every training
//! forward (identity must carry no stable appearance information) and by
//! first-appearance order in eval mode. Shot slots follow the relative
//! order of shots inside the span.

use std::collections::BTreeMap;

use crate::data::Span;
use crate::error::{Error, Result};
use crate::model::params::ModelParams;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::ops::Mode;
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::rng::{sample_distinct, SubRng};

/// Replacement for a token's appearance feature during masked training.
#[derive(Clone, Debug, PartialEq)]
pub enum ZOverride {
    /// Use the learned mask feature (gradients flow into it).
    Learned,
    /// Use this fixed vector (drawn from another detection).
    Replace(Vec<f64>),
}

/// Where a token came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenProvenance {
    pub track_id: u64,
    /// Index into the track's detection list.
    pub det_index: usize,
}

/// Embedded span: an n x hidden node plus per-token bookkeeping.
#[derive(Debug)]
pub struct TokenSequence {
    pub node: NodeId,
    /// True for real tokens. `embed_tokens` emits no padding; tests build
    /// padded sequences by hand to exercise the encoder mask.
    pub mask: Vec<bool>,
    /// `None` for `[CLS]`.
    pub provenance: Vec<Option<TokenProvenance>>,
    /// Track id -> instance slot used this forward.
    pub instance_slot: BTreeMap<u64, usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Token indexes whose provenance matches `track_id`.
    pub fn tokens_of_track(&self, track_id: u64) -> Vec<usize> {
        self.provenance
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                p.as_ref()
                    .filter(|p| p.track_id == track_id)
                    .map(|_| i)
            })
            .collect()
    }
}

/// Tracks in first-appearance order (earliest detection, ties by id).
fn appearance_order(span: &Span) -> Vec<u64> {
    let mut firsts: Vec<(f64, u64)> = span
        .tracks
        .iter()
        .map(|t| (t.start(), t.track_id))
        .collect();
    firsts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite times").then(a.1.cmp(&b.1)));
    firsts.into_iter().map(|(_, id)| id).collect()
}

/// Embed a span into the graph. `overrides` substitutes appearance features
/// per track (masked-instance corruption) before projection.
pub fn embed_tokens<S: Scalar>(
    g: &mut Graph<S>,
    span: &Span,
    params: &ModelParams<S>,
    overrides: &BTreeMap<u64, ZOverride>,
    mode: Mode,
    rng: &mut SubRng,
) -> Result<TokenSequence> {
    let cfg = &params.config;
    let n_det = span.n_detections();
    if 1 + n_det > cfg.token_cap {
        return Err(Error::Capacity(format!(
            "span has {} tokens, cap is {} (truncate first)",
            1 + n_det,
            cfg.token_cap
        )));
    }
    for t in &span.tracks {
        for d in &t.detections {
            if d.z.len() != cfg.d_z {
                return Err(Error::Shape(format!(
                    "track {} has a {}-dim feature, model expects {}",
                    t.track_id,
                    d.z.len(),
                    cfg.d_z
                )));
            }
        }
    }
    for id in overrides.keys() {
        if !span.tracks.iter().any(|t| t.track_id == *id) {
            return Err(Error::Usage(format!(
                "override references track {id} not in the span"
            )));
        }
    }

    // instance slots
    let order = appearance_order(span);
    if order.len() > cfg.instance_slots {
        return Err(Error::Capacity(format!(
            "{} instances exceed the {} instance slots",
            order.len(),
            cfg.instance_slots
        )));
    }
    let slots: Vec<usize> = match mode {
        Mode::Train => sample_distinct(rng, cfg.instance_slots, order.len()),
        Mode::Eval => (0..order.len()).collect(),
    };
    let instance_slot: BTreeMap<u64, usize> = order
        .iter()
        .copied()
        .zip(slots.iter().copied())
        .collect();

    // shot slots by relative order
    let shot_order = span.shot_order();
    if shot_order.len() > cfg.shot_slots {
        return Err(Error::Capacity(format!(
            "{} shots exceed the {} shot slots",
            shot_order.len(),
            cfg.shot_slots
        )));
    }
    let shot_slot: BTreeMap<usize, usize> = shot_order
        .iter()
        .copied()
        .enumerate()
        .map(|(rank, shot)| (shot, rank))
        .collect();

    let cls = g.param(&params.registry, params.embed.cls);
    if n_det == 0 {
        return Ok(TokenSequence {
            node: cls,
            mask: vec![true],
            provenance: vec![None],
            instance_slot,
        });
    }

    // detection tokens ordered by (time, track id, detection index)
    let mut det_order: Vec<(f64, u64, usize)> = Vec::with_capacity(n_det);
    for t in &span.tracks {
        for (i, d) in t.detections.iter().enumerate() {
            det_order.push((d.t, t.track_id, i));
        }
    }
    det_order.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite times")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let len = span.length;
    let center = span.start + 0.5 * len;
    let mut z_flat = Vec::with_capacity(n_det * cfg.d_z);
    let mut masked_col = Vec::with_capacity(n_det);
    let mut s_flat = Vec::with_capacity(n_det * 4);
    let mut tau_flat = Vec::with_capacity(n_det * 3);
    let mut inst_rows = Vec::with_capacity(n_det);
    let mut shot_rows = Vec::with_capacity(n_det);
    let mut provenance: Vec<Option<TokenProvenance>> = Vec::with_capacity(n_det + 1);
    provenance.push(None);

    for &(t, track_id, det_index) in &det_order {
        let track = span
            .tracks
            .iter()
            .find(|tr| tr.track_id == track_id)
            .expect("ordered from span");
        let d = &track.detections[det_index];
        match overrides.get(&track_id) {
            Some(ZOverride::Learned) => {
                z_flat.extend(std::iter::repeat(S::ZERO).take(cfg.d_z));
                masked_col.push(S::ONE);
            }
            Some(ZOverride::Replace(v)) => {
                if v.len() != cfg.d_z {
                    return Err(Error::Shape(format!(
                        "replacement feature has {} dims, model expects {}",
                        v.len(),
                        cfg.d_z
                    )));
                }
                z_flat.extend(v.iter().map(|&x| S::from_f64(x)));
                masked_col.push(S::ZERO);
            }
            None => {
                z_flat.extend(d.z.iter().map(|&x| S::from_f64(x)));
                masked_col.push(S::ZERO);
            }
        }
        s_flat.extend(d.bbox.spatial_features().iter().map(|&x| S::from_f64(x)));
        tau_flat.extend(
            [
                (t - span.start) / len,
                (span.end() - t) / len,
                (t - center) / len,
            ]
            .iter()
            .map(|&x| S::from_f64(x)),
        );
        inst_rows.push(instance_slot[&track_id]);
        shot_rows.push(shot_slot[&track.shot_index]);
        provenance.push(Some(TokenProvenance {
            track_id,
            det_index,
        }));
    }

    let z_const = g.constant(Tensor::from_vec(&[n_det, cfg.d_z], z_flat)?);
    let z = if masked_col.iter().any(|&m| m == S::ONE) {
        // add the learned mask feature on selected rows: Z + sel * z_mask
        let sel = g.constant(Tensor::from_vec(&[n_det, 1], masked_col)?);
        let zm = g.param(&params.registry, params.embed.z_mask);
        let learned = g.matmul(sel, zm)?;
        g.add(z_const, learned)?
    } else {
        z_const
    };

    let w_feat = g.param(&params.registry, params.embed.w_feat);
    let mut sum = g.matmul(z, w_feat)?;

    let s_const = g.constant(Tensor::from_vec(&[n_det, 4], s_flat)?);
    let w_spatial = g.param(&params.registry, params.embed.w_spatial);
    let s_term = g.matmul(s_const, w_spatial)?;
    sum = g.add(sum, s_term)?;

    let tau_const = g.constant(Tensor::from_vec(&[n_det, 3], tau_flat)?);
    let w_pos = g.param(&params.registry, params.embed.w_pos);
    let tau_term = g.matmul(tau_const, w_pos)?;
    sum = g.add(sum, tau_term)?;

    let inst_table = g.param(&params.registry, params.embed.instance_table);
    let inst_term = g.gather_rows(inst_table, &inst_rows)?;
    sum = g.add(sum, inst_term)?;

    let shot_table = g.param(&params.registry, params.embed.shot_table);
    let shot_term = g.gather_rows(shot_table, &shot_rows)?;
    sum = g.add(sum, shot_term)?;

    let bias = g.param(&params.registry, params.embed.bias);
    sum = g.add_row(sum, bias)?;

    let node = g.concat_rows(&[cls, sum])?;
    Ok(TokenSequence {
        node,
        mask: vec![true; n_det + 1],
        provenance,
        instance_slot,
    })
}

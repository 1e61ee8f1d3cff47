//! Self-supervised pretraining: masked-instance distillation and span
//! compatibility, with their batch construction and the training loop.
//!
//! Masking selects whole instances: every token of a selected track gets the
//! same corruption, drawn 0.8 / 0.1 / 0.1 over learned-replace, random
//! foreign feature, and keep. Corruption only touches the feature vector;
//! time, geometry, and slot embeddings always survive. Targets are the
//! detections' pseudo-labels. Compatibility batches hold n/2 pairs of spans
//! from the same segment; every other example in the batch is a negative.

use rand::Rng;

use crate::data::Span;
use crate::error::{Error, Result};
use crate::model::embed::{embed_tokens, TokenSequence, ZOverride};
use crate::model::encoder::encode;
use crate::model::heads::{compat_batch_loss, compat_head, mask_head, masked_loss_node};
use crate::model::params::ModelParams;
use crate::numerics::adam::AdamState;
use crate::numerics::graph::Graph;
use crate::numerics::ops::Mode;
use crate::numerics::scalar::Scalar;
use crate::numerics::schedule::lr_schedule;
use crate::rng::{sample_distinct, substream, SubRng};

/// Fraction of a span's instances selected for masking.
pub const MASK_FRACTION: f64 = 0.15;
const P_LEARNED: f64 = 0.8;
const P_RANDOM: f64 = 0.1;

/// How one selected instance's features are corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptionMode {
    /// Substitute the learned mask embedding.
    LearnedReplace,
    /// Substitute a feature from another instance in the batch.
    RandomFeature,
    /// Leave the feature; the pseudo-label is still predicted.
    Keep,
}

/// Which instances of one span are masked, and how. All tokens of a selected
/// track receive the track's mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub modes: Vec<(u64, CorruptionMode)>,
}

/// Select `ceil(mask_fraction * |U|)` instances (at least 1) uniformly from
/// the tracks whose detections all carry pseudo-labels, and draw each one's
/// corruption mode.
pub fn plan_mask(span: &Span, rng: &mut SubRng, mask_fraction: f64) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&mask_fraction) {
        return Err(Error::Config(format!(
            "mask fraction {mask_fraction} not in [0, 1]"
        )));
    }
    let eligible: Vec<u64> = span
        .tracks
        .iter()
        .filter(|t| t.detections.iter().all(|d| d.pseudo_label.is_some()))
        .map(|t| t.track_id)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Data(format!(
            "span of {:?} has no instance with pseudo-labels to mask",
            span.video_id
        )));
    }
    let k = ((mask_fraction * eligible.len() as f64).ceil() as usize).max(1);
    let mut picks = sample_distinct(rng, eligible.len(), k);
    picks.sort_unstable();
    let modes = picks
        .into_iter()
        .map(|i| {
            let u: f64 = rng.gen();
            let mode = if u < P_LEARNED {
                CorruptionMode::LearnedReplace
            } else if u < P_LEARNED + P_RANDOM {
                CorruptionMode::RandomFeature
            } else {
                CorruptionMode::Keep
            };
            (eligible[i], mode)
        })
        .collect();
    Ok(MaskPlan { modes })
}

/// Detection features available for random-feature corruption. Entries carry
/// their owner (position of the span in the batch, track id) so a corrupted
/// instance never receives one of its own features.
#[derive(Clone, Debug, Default)]
pub struct FeaturePool {
    entries: Vec<(usize, u64, Vec<f64>)>,
}

impl FeaturePool {
    pub fn from_spans(spans: &[&Span]) -> Self {
        let mut entries = Vec::new();
        for (i, span) in spans.iter().enumerate() {
            for track in &span.tracks {
                for det in &track.detections {
                    entries.push((i, track.track_id, det.z.clone()));
                }
            }
        }
        FeaturePool { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A feature from any detection not owned by (span_index, track_id).
    fn sample_foreign(
        &self,
        rng: &mut SubRng,
        span_index: usize,
        track_id: u64,
    ) -> Result<Vec<f64>> {
        let own = |e: &(usize, u64, Vec<f64>)| e.0 == span_index && e.1 == track_id;
        if self.entries.iter().all(own) {
            return Err(Error::Data(
                "feature pool has no detection outside the corrupted instance".into(),
            ));
        }
        loop {
            let e = &self.entries[rng.gen_range(0..self.entries.len())];
            if !own(e) {
                return Ok(e.2.clone());
            }
        }
    }
}

/// One span ready for the masked objective.
#[derive(Debug)]
pub struct MaskedSpan {
    pub tokens: TokenSequence,
    pub plan: MaskPlan,
    /// Token rows carrying a loss, ascending.
    pub positions: Vec<usize>,
    /// Pseudo-label target per position.
    pub targets: Vec<Vec<f64>>,
}

/// Plan a masking, corrupt the span's features accordingly, and embed it.
/// `mask_rng` drives the plan and foreign-feature draws; `model_rng` drives
/// the embedding's own randomness (slot injection under train mode).
#[allow(clippy::too_many_arguments)]
pub fn select_and_corrupt<S: Scalar>(
    g: &mut Graph<S>,
    span: &Span,
    span_index: usize,
    pool: &FeaturePool,
    params: &ModelParams<S>,
    mode: Mode,
    mask_rng: &mut SubRng,
    model_rng: &mut SubRng,
    mask_fraction: f64,
) -> Result<MaskedSpan> {
    let plan = plan_mask(span, mask_rng, mask_fraction)?;
    let mut overrides = std::collections::BTreeMap::new();
    for &(track_id, mode) in &plan.modes {
        match mode {
            CorruptionMode::LearnedReplace => {
                overrides.insert(track_id, ZOverride::Learned);
            }
            CorruptionMode::RandomFeature => {
                let z = pool.sample_foreign(mask_rng, span_index, track_id)?;
                overrides.insert(track_id, ZOverride::Replace(z));
            }
            CorruptionMode::Keep => {}
        }
    }
    let tokens = embed_tokens(g, span, params, &overrides, mode, model_rng)?;

    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (row, prov) in tokens.provenance.iter().enumerate() {
        let Some(p) = prov else { continue };
        if !plan.modes.iter().any(|&(id, _)| id == p.track_id) {
            continue;
        }
        let track = span
            .tracks
            .iter()
            .find(|t| t.track_id == p.track_id)
            .expect("provenance refers to a span track");
        let label = track.detections[p.det_index]
            .pseudo_label
            .clone()
            .expect("masked instances were filtered for pseudo-labels");
        positions.push(row);
        targets.push(label);
    }
    Ok(MaskedSpan {
        tokens,
        plan,
        positions,
        targets,
    })
}

/// A contrastive batch: indices into the span pool, arranged so examples
/// (2i, 2i+1) come from the same segment and all pairs use distinct segments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompatBatch {
    pub examples: Vec<usize>,
}

impl CompatBatch {
    pub fn pair_of(&self, position: usize) -> usize {
        position ^ 1
    }
}

/// Sample n/2 positive pairs from segments holding at least two spans.
/// Segment identity is the video id.
pub fn build_compat_batch(spans: &[Span], n: usize, rng: &mut SubRng) -> Result<CompatBatch> {
    if n < 4 || n % 2 != 0 {
        return Err(Error::Config(format!(
            "contrastive batch needs an even size of at least 4, got {n}"
        )));
    }
    let mut by_segment: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for (i, s) in spans.iter().enumerate() {
        by_segment.entry(&s.video_id).or_default().push(i);
    }
    let pairable: Vec<&Vec<usize>> = by_segment.values().filter(|v| v.len() >= 2).collect();
    if pairable.len() < n / 2 {
        return Err(Error::Data(format!(
            "need {} segments with at least 2 spans, pool has {}",
            n / 2,
            pairable.len()
        )));
    }
    let segs = sample_distinct(rng, pairable.len(), n / 2);
    let mut examples = Vec::with_capacity(n);
    for si in segs {
        let members = pairable[si];
        let two = sample_distinct(rng, members.len(), 2);
        examples.push(members[two[0]]);
        examples.push(members[two[1]]);
    }
    Ok(CompatBatch { examples })
}

/// Which objectives a pretraining run applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Mask,
    MaskCompat,
}

/// Pretraining hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub iterations: u64,
    pub batch: usize,
    pub objective: Objective,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub mask_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iterations: 2000,
            batch: 16,
            objective: Objective::MaskCompat,
            base_lr: 1e-4,
            weight_decay: 0.01,
            warmup_frac: 0.05,
            mask_fraction: MASK_FRACTION,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.objective == Objective::MaskCompat && (self.batch < 4 || self.batch % 2 != 0) {
            return Err(Error::Config(format!(
                "compatibility training needs an even batch of at least 4, got {}",
                self.batch
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr {} invalid", self.base_lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay {} must be >= 0",
                self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup_frac {} not in [0, 1]",
                self.warmup_frac
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(Error::Config(format!(
                "mask_fraction {} not in [0, 1]",
                self.mask_fraction
            )));
        }
        Ok(())
    }
}

/// One loss-trace entry.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

fn record(trace: &mut Vec<TraceRecord>, step: u64, metric: &str, value: f64) {
    trace.push(TraceRecord {
        step,
        metric: metric.into(),
        value,
    });
}

/// Run pretraining over a span pool. Deterministic given (seed, config,
/// spans): batching, masking, and model randomness each draw from their own
/// substream of the config seed.
pub fn pretrain_loop<S: Scalar>(
    spans: &[Span],
    params: &mut ModelParams<S>,
    cfg: &PretrainConfig,
) -> Result<Vec<TraceRecord>> {
    cfg.validate()?;
    if spans.is_empty() {
        return Err(Error::Data("empty span pool".into()));
    }
    let mut batch_rng = substream(cfg.seed, "pretrain.batch");
    let mut mask_rng = substream(cfg.seed, "pretrain.mask");
    let mut model_rng = substream(cfg.seed, "pretrain.model");
    let mut adam = AdamState::new(&params.registry, cfg.weight_decay)?;
    let mut trace = Vec::new();

    for step in 0..cfg.iterations {
        let indices: Vec<usize> = match cfg.objective {
            Objective::Mask => (0..cfg.batch)
                .map(|_| batch_rng.gen_range(0..spans.len()))
                .collect(),
            Objective::MaskCompat => {
                build_compat_batch(spans, cfg.batch, &mut batch_rng)?.examples
            }
        };
        let batch: Vec<&Span> = indices.iter().map(|&i| &spans[i]).collect();
        let pool = FeaturePool::from_spans(&batch);

        let mut g = Graph::new();
        let mut picked = Vec::with_capacity(batch.len());
        let mut targets: Vec<Vec<f64>> = Vec::new();
        let mut cls_rows = Vec::with_capacity(batch.len());
        for (i, span) in batch.iter().enumerate() {
            let masked = select_and_corrupt(
                &mut g,
                span,
                i,
                &pool,
                params,
                Mode::Train,
                &mut mask_rng,
                &mut model_rng,
                cfg.mask_fraction,
            )?;
            let enc = encode(
                &mut g,
                masked.tokens.node,
                &masked.tokens.mask,
                params,
                Mode::Train,
                &mut model_rng,
            )?;
            picked.push(g.gather_rows(enc, &masked.positions)?);
            targets.extend(masked.targets);
            cls_rows.push(g.gather_rows(enc, &[0])?);
        }

        let all_picked = g.concat_rows(&picked)?;
        let (logits, _) = mask_head(&mut g, params, all_picked)?;
        let mask_loss = masked_loss_node(&mut g, logits, &targets)?;
        record(&mut trace, step, "mask_loss", g.scalar_value(mask_loss));

        let total = match cfg.objective {
            Objective::Mask => mask_loss,
            Objective::MaskCompat => {
                let stacked = g.concat_rows(&cls_rows)?;
                let proj = compat_head(&mut g, params, stacked, Mode::Train, &mut model_rng)?;
                let compat_loss = compat_batch_loss(&mut g, proj)?;
                record(&mut trace, step, "compat_loss", g.scalar_value(compat_loss));
                g.add(mask_loss, compat_loss)?
            }
        };
        record(&mut trace, step, "loss", g.scalar_value(total));

        let grads = g.backward(total, &params.registry)?;
        let lr = lr_schedule(step, cfg.iterations, cfg.base_lr, cfg.warmup_frac)?;
        adam.step(&mut params.registry, &grads, lr)?;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BBox, Detection, Track};
    use crate::model::config::ModelConfig;
    use crate::numerics::tensor::Tensor;
    use crate::synth::{generate_corpus, GenConfig};

    fn bbox() -> BBox {
        BBox::new(0.1, 0.1, 0.3, 0.3).unwrap()
    }

    fn det(t: f64, z: Vec<f64>, pseudo: Option<Vec<f64>>) -> Detection {
        Detection {
            t,
            bbox: bbox(),
            z,
            pseudo_label: pseudo,
        }
    }

    fn toy_span(n_tracks: usize, d_z: usize, d_label: usize) -> Span {
        let tracks = (0..n_tracks)
            .map(|i| Track {
                track_id: i as u64,
                shot_index: 0,
                source_class: crate::data::SourceClass::Person,
                detections: (0..2)
                    .map(|j| {
                        let mut z = vec![0.0; d_z];
                        z[i % d_z] = 1.0 + i as f64 + 0.1 * j as f64;
                        let mut p = vec![0.0; d_label];
                        p[i % d_label] = 1.0;
                        det(1.0 + i as f64 + 0.4 * j as f64, z, Some(p))
                    })
                    .collect(),
            })
            .collect();
        Span {
            video_id: "v0".into(),
            movie_id: "m0".into(),
            start: 0.0,
            length: 10.0,
            tracks,
        }
    }

    fn toy_model(d_z: usize, d_label: usize) -> ModelParams<f64> {
        let cfg = ModelConfig {
            hidden: 16,
            layers: 2,
            heads: 2,
            head_dim: 8,
            ffn_dim: 24,
            dropout: 0.1,
            d_z,
            d_label,
            instance_slots: 16,
            shot_slots: 8,
            token_cap: 64,
        };
        ModelParams::new(&cfg, &mut substream(11, "init")).unwrap()
    }

    #[test]
    fn full_fraction_masks_every_instance_and_one_is_minimum() {
        let span = toy_span(1, 4, 3);
        let mut rng = substream(0, "t");
        let plan = plan_mask(&span, &mut rng, 1.0).unwrap();
        assert_eq!(plan.modes.len(), 1);
        assert_eq!(plan.modes[0].0, 0);

        let span = toy_span(8, 4, 3);
        let plan = plan_mask(&span, &mut rng, 1.0).unwrap();
        let mut ids: Vec<u64> = plan.modes.iter().map(|m| m.0).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..8).collect::<Vec<u64>>());

        // 0.15 of 8 rounds up to 2
        let plan = plan_mask(&span, &mut rng, 0.15).unwrap();
        assert_eq!(plan.modes.len(), 2);
    }

    #[test]
    fn corruption_mode_frequencies_match_eighty_ten_ten() {
        let span = toy_span(4, 4, 3);
        let mut rng = substream(5, "freq");
        let mut counts = [0usize; 3];
        let mut total = 0usize;
        for _ in 0..100_000 {
            let plan = plan_mask(&span, &mut rng, 0.5).unwrap();
            assert_eq!(plan.modes.len(), 2);
            for &(_, mode) in &plan.modes {
                counts[match mode {
                    CorruptionMode::LearnedReplace => 0,
                    CorruptionMode::RandomFeature => 1,
                    CorruptionMode::Keep => 2,
                }] += 1;
                total += 1;
            }
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        assert!((freq[0] - 0.8).abs() < 0.01, "learned-replace {}", freq[0]);
        assert!((freq[1] - 0.1).abs() < 0.01, "random-feature {}", freq[1]);
        assert!((freq[2] - 0.1).abs() < 0.01, "keep {}", freq[2]);
    }

    #[test]
    fn span_without_pseudo_labels_is_rejected() {
        let mut span = toy_span(2, 4, 3);
        for t in &mut span.tracks {
            for d in &mut t.detections {
                d.pseudo_label = None;
            }
        }
        let mut rng = substream(0, "t");
        assert!(matches!(
            plan_mask(&span, &mut rng, 0.15),
            Err(Error::Data(_))
        ));
    }

    // Corruption must reach the encoder only through the feature term: with
    // identical slot assignment, unmasked token rows are bit-identical to an
    // uncorrupted embedding and masked rows differ by exactly
    // (z_override - z) * W_feat.
    #[test]
    fn corruption_retains_time_geometry_and_slots() {
        let d_z = 5;
        let d_label = 3;
        let params = toy_model(d_z, d_label);
        let span = toy_span(3, d_z, d_label);
        let replacement: Vec<f64> = (0..d_z).map(|i| 0.3 * i as f64 - 0.7).collect();

        let mut g = Graph::new();
        let mut rng_a = substream(3, "emb");
        let plain = embed_tokens(
            &mut g,
            &span,
            &params,
            &Default::default(),
            Mode::Eval,
            &mut rng_a,
        )
        .unwrap();
        let mut overrides = std::collections::BTreeMap::new();
        overrides.insert(0u64, ZOverride::Learned);
        overrides.insert(2u64, ZOverride::Replace(replacement.clone()));
        let mut rng_b = substream(3, "emb");
        let masked =
            embed_tokens(&mut g, &span, &params, &overrides, Mode::Eval, &mut rng_b).unwrap();

        assert_eq!(plain.provenance, masked.provenance);
        assert_eq!(plain.instance_slot, masked.instance_slot);

        let w_feat = params.registry.value(params.embed.w_feat);
        let z_mask = params.registry.value(params.embed.z_mask);
        let a = g.value(plain.node).clone();
        let b = g.value(masked.node).clone();
        for (row, prov) in plain.provenance.iter().enumerate() {
            let track = prov.as_ref().map(|p| p.track_id);
            match track {
                Some(id @ (0 | 2)) => {
                    let p = prov.as_ref().unwrap();
                    let z_orig = &span.tracks[id as usize].detections[p.det_index].z;
                    let z_new: Vec<f64> = if id == 0 {
                        z_mask.data().to_vec()
                    } else {
                        replacement.clone()
                    };
                    let dz: Vec<f64> =
                        z_new.iter().zip(z_orig).map(|(n, o)| n - o).collect();
                    let dz_t = Tensor::from_vec(&[1, d_z], dz).unwrap();
                    let want = crate::numerics::ops::matmul(&dz_t, w_feat).unwrap();
                    for c in 0..b.cols() {
                        let got = b.at2(row, c) - a.at2(row, c);
                        assert!(
                            (got - want.at2(0, c)).abs() < 1e-12,
                            "row {row} col {c}"
                        );
                    }
                }
                _ => {
                    for c in 0..b.cols() {
                        assert_eq!(a.at2(row, c), b.at2(row, c), "row {row} col {c}");
                    }
                }
            }
        }
    }

    #[test]
    fn random_feature_corruption_draws_foreign_features_only() {
        let d_z = 4;
        let span_a = toy_span(2, d_z, 3);
        let mut span_b = toy_span(1, d_z, 3);
        span_b.video_id = "v1".into();
        span_b.tracks[0].detections[0].z = vec![7.0; d_z];
        span_b.tracks[0].detections[1].z = vec![8.0; d_z];
        let pool = FeaturePool::from_spans(&[&span_a, &span_b]);
        assert_eq!(pool.len(), 6);

        let mut rng = substream(1, "pool");
        for _ in 0..200 {
            let z = pool.sample_foreign(&mut rng, 0, 0).unwrap();
            let own_a0: Vec<Vec<f64>> = span_a.tracks[0]
                .detections
                .iter()
                .map(|d| d.z.clone())
                .collect();
            assert!(!own_a0.contains(&z));
        }

        let solo = FeaturePool::from_spans(&[&span_b]);
        assert!(solo.sample_foreign(&mut rng, 0, 0).is_err());
    }

    #[test]
    fn compat_batches_pair_spans_from_one_segment() {
        // 5 segments with 2 spans each, 1 singleton
        let mut spans = Vec::new();
        for v in 0..5 {
            for _ in 0..2 {
                let mut s = toy_span(2, 4, 3);
                s.video_id = format!("v{v}");
                spans.push(s);
            }
        }
        let mut singleton = toy_span(2, 4, 3);
        singleton.video_id = "lonely".into();
        spans.push(singleton);

        let mut rng = substream(2, "cb");
        for _ in 0..1000 {
            let batch = build_compat_batch(&spans, 8, &mut rng).unwrap();
            assert_eq!(batch.examples.len(), 8);
            let mut segs = Vec::new();
            for p in 0..4 {
                let a = &spans[batch.examples[2 * p]];
                let b = &spans[batch.examples[2 * p + 1]];
                assert_eq!(a.video_id, b.video_id);
                assert_ne!(batch.examples[2 * p], batch.examples[2 * p + 1]);
                segs.push(a.video_id.clone());
            }
            segs.sort();
            segs.dedup();
            assert_eq!(segs.len(), 4, "pairs must use distinct segments");
            assert!(!segs.contains(&"lonely".to_string()));
        }
        assert_eq!(
            build_compat_batch(&spans, 8, &mut rng).unwrap().pair_of(3),
            2
        );

        // 12 spans from 5 usable segments cannot fill 6 pairs
        assert!(matches!(
            build_compat_batch(&spans, 12, &mut rng),
            Err(Error::Data(_))
        ));
        assert!(build_compat_batch(&spans, 3, &mut rng).is_err());
    }

    fn synth_spans(d_z: usize, d_label: usize) -> Vec<Span> {
        let corpus = generate_corpus(&GenConfig {
            n_movies: 4,
            segments_per_movie: 2,
            segment_length_s: 30.0,
            instances_per_segment: 3,
            detections_per_instance: 2,
            d_z,
            d_label,
            theme_dim: 4,
            noise_scale: 0.25,
            seed: 3,
        })
        .unwrap();
        let mut spans = Vec::new();
        for v in &corpus.dataset.videos {
            // two overlapping windows per segment so compat pairing works
            spans.push(crate::preprocess::clip_span(v, 0.0, 22.0).unwrap());
            spans.push(crate::preprocess::clip_span(v, 8.0, 22.0).unwrap());
        }
        spans
    }

    #[test]
    fn fresh_init_losses_sit_at_their_uniform_values() {
        let d_z = 16;
        let d_label = 6;
        let spans = synth_spans(d_z, d_label);
        let mut params = toy_model(d_z, d_label);
        let cfg = PretrainConfig {
            iterations: 1,
            batch: 8,
            objective: Objective::MaskCompat,
            seed: 4,
            ..PretrainConfig::default()
        };
        let trace = pretrain_loop(&spans, &mut params, &cfg).unwrap();
        let get = |m: &str| {
            trace
                .iter()
                .find(|r| r.step == 0 && r.metric == m)
                .unwrap()
                .value
        };
        let mask0 = get("mask_loss");
        let want_mask = (d_label as f64).ln();
        assert!(
            (mask0 - want_mask).abs() < 0.1 * want_mask,
            "mask loss {mask0} vs ln(d_label) {want_mask}"
        );
        let compat0 = get("compat_loss");
        let want_compat = (cfg.batch as f64 - 1.0).ln();
        assert!(
            (compat0 - want_compat).abs() < 0.15 * want_compat,
            "compat loss {compat0} vs ln(batch-1) {want_compat}"
        );
        assert!((get("loss") - mask0 - compat0).abs() < 1e-12);
    }

    #[test]
    fn training_decreases_the_masked_loss() {
        let d_z = 16;
        let d_label = 6;
        let spans = synth_spans(d_z, d_label);
        let mut params = toy_model(d_z, d_label);
        let cfg = PretrainConfig {
            iterations: 300,
            batch: 4,
            objective: Objective::Mask,
            base_lr: 1e-3,
            seed: 8,
            ..PretrainConfig::default()
        };
        let trace = pretrain_loop(&spans, &mut params, &cfg).unwrap();
        let losses: Vec<f64> = trace
            .iter()
            .filter(|r| r.metric == "loss")
            .map(|r| r.value)
            .collect();
        assert_eq!(losses.len(), 300);
        let head: f64 = losses[..75].iter().sum::<f64>() / 75.0;
        let tail: f64 = losses[225..].iter().sum::<f64>() / 75.0;
        assert!(
            tail < head - 0.1,
            "no progress: first-60 avg {head}, last-60 avg {tail}"
        );
    }

    #[test]
    fn pretraining_is_bit_reproducible_from_the_seed() {
        let d_z = 16;
        let d_label = 6;
        let spans = synth_spans(d_z, d_label);
        let cfg = PretrainConfig {
            iterations: 6,
            batch: 4,
            objective: Objective::MaskCompat,
            seed: 12,
            ..PretrainConfig::default()
        };
        let mut p1 = toy_model(d_z, d_label);
        let mut p2 = p1.clone();
        let t1 = pretrain_loop(&spans, &mut p1, &cfg).unwrap();
        let t2 = pretrain_loop(&spans, &mut p2, &cfg).unwrap();
        assert_eq!(t1, t2);
        for i in 0..p1.registry.len() {
            let id = crate::numerics::registry::ParamId(i);
            assert_eq!(
                p1.registry.value(id).data(),
                p2.registry.value(id).data(),
                "parameter {i} diverged"
            );
        }
        // a different seed takes a different path
        let mut p3 = toy_model(d_z, d_label);
        let t3 = pretrain_loop(
            &spans,
            &mut p3,
            &PretrainConfig {
                seed: 13,
                ..cfg
            },
        )
        .unwrap();
        assert_ne!(t1, t3);
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let ok = PretrainConfig::default();
        ok.validate().unwrap();
        assert!(PretrainConfig {
            iterations: 0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(PretrainConfig {
            batch: 5,
            objective: Objective::MaskCompat,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(PretrainConfig {
            batch: 5,
            objective: Objective::Mask,
            ..ok.clone()
        }
        .validate()
        .is_ok());
        assert!(PretrainConfig {
            base_lr: 0.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(PretrainConfig {
            mask_fraction: 1.5,
            ..ok
        }
        .validate()
        .is_err());
    }
}

//! Late fusion of long-range context with per-track short-term predictions.
//!
//! The trunk stays frozen. For each fusion target the track's features are
//! replaced by the learned mask embedding and the mask head's penultimate
//! activations at that track's token positions are averaged into a context
//! vector. A single linear layer over [context | short-term scores] is the
//! only thing trained. The short-term-only baseline runs the identical
//! protocol with the context input zeroed, so any gap is attributable to
//! context alone.

use std::collections::BTreeMap;

use rand::Rng;

use crate::data::{Dataset, Span};
use crate::error::{Error, Result};
use crate::finetune::{argmax, video_span, Splits};
use crate::model::embed::{embed_tokens, ZOverride};
use crate::model::encoder::encode;
use crate::model::heads::{fusion_head, logistic_loss_node, mask_head};
use crate::model::params::ModelParams;
use crate::numerics::adam::AdamState;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::ops::Mode;
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::pretrain::TraceRecord;
use crate::rng::substream;

/// One training or evaluation item: a frozen context feature, the short-term
/// model's scores, and the role label.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionExample {
    pub context: Vec<f64>,
    pub short_term: Vec<f64>,
    pub role: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub iterations: u64,
    pub batch: usize,
    pub base_lr: f64,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            iterations: 2000,
            batch: 32,
            base_lr: 1e-4,
            seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!(
                "base_lr must be positive and finite, got {}",
                self.base_lr
            )));
        }
        Ok(())
    }
}

/// Frozen-trunk context for one track: forward pass with the track's features
/// swapped for the learned mask embedding, then the mean of the mask head's
/// penultimate rows at the track's token positions.
pub fn fusion_context<S: Scalar>(
    params: &ModelParams<S>,
    span: &Span,
    track_id: u64,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    // Eval mode draws nothing from the stream; the name just keeps the call honest.
    let mut rng = substream(0, "fusion.context");
    let mut overrides = BTreeMap::new();
    overrides.insert(track_id, ZOverride::Learned);
    let seq = embed_tokens(&mut g, span, params, &overrides, Mode::Eval, &mut rng)?;
    let rows = seq.tokens_of_track(track_id);
    if rows.is_empty() {
        return Err(Error::Usage(format!(
            "track {track_id} has no tokens in the span of {}",
            span.video_id
        )));
    }
    let states = encode(&mut g, seq.node, &seq.mask, params, Mode::Eval, &mut rng)?;
    let (_, penult) = mask_head(&mut g, params, states)?;
    let picked = g.gather_rows(penult, &rows)?;
    let t = g.value(picked);
    let (k, h) = (t.rows(), t.cols());
    let mut out = vec![0.0; h];
    for i in 0..k {
        for j in 0..h {
            out[j] += t.at2(i, j).to_f64();
        }
    }
    for v in &mut out {
        *v /= k as f64;
    }
    Ok(out)
}

/// Build one example per fusion target of the selected videos. Contexts come
/// from a single frozen forward pass per target, so training afterwards only
/// ever touches the linear head.
pub fn collect_fusion_examples<S: Scalar>(
    params: &ModelParams<S>,
    dataset: &Dataset,
    videos: &[usize],
    token_cap: usize,
) -> Result<Vec<FusionExample>> {
    let d = params.config.d_label;
    let mut out = Vec::new();
    for &vi in videos {
        let video = dataset
            .videos
            .get(vi)
            .ok_or_else(|| Error::Usage(format!("video index {vi} out of range")))?;
        let span = video_span(video, token_cap)?;
        for target in &video.ava_targets {
            if target.short_term.len() != d {
                return Err(Error::Data(format!(
                    "{}: short-term scores have {} entries, expected {d}",
                    video.video_id,
                    target.short_term.len()
                )));
            }
            if target.role >= d {
                return Err(Error::Data(format!(
                    "{}: fusion target role {} out of range for {d} classes",
                    video.video_id, target.role
                )));
            }
            let context = fusion_context(params, &span, target.track_id)?;
            out.push(FusionExample {
                context,
                short_term: target.short_term.clone(),
                role: target.role,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Data(
            "no fusion targets in the selected videos".into(),
        ));
    }
    Ok(out)
}

fn check_example<S: Scalar>(params: &ModelParams<S>, ex: &FusionExample) -> Result<()> {
    let (h, d) = (params.config.hidden, params.config.d_label);
    if ex.context.len() != h || ex.short_term.len() != d || ex.role >= d {
        return Err(Error::Data(format!(
            "fusion example has context {} / short-term {} / role {}, expected {h} / {d} / < {d}",
            ex.context.len(),
            ex.short_term.len(),
            ex.role
        )));
    }
    Ok(())
}

fn scores_node<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    ex: &FusionExample,
    short_term_only: bool,
) -> Result<NodeId> {
    let h = params.config.hidden;
    let ctx_data: Vec<S> = if short_term_only {
        vec![S::from_f64(0.0); h]
    } else {
        ex.context.iter().map(|&v| S::from_f64(v)).collect()
    };
    let st_data: Vec<S> = ex.short_term.iter().map(|&v| S::from_f64(v)).collect();
    let ctx = g.constant(Tensor::from_vec(&[1, h], ctx_data)?);
    let st = g.constant(Tensor::from_vec(&[1, ex.short_term.len()], st_data)?);
    fusion_head(g, params, ctx, st)
}

/// Train the fusion layer on cached examples. Everything except
/// `head.fusion.w` / `head.fusion.b` is kept frozen; the loss is the
/// per-class logistic loss against the role label. With `short_term_only`
/// the context input is zeroed, which is the baseline the fused model must
/// beat.
pub fn train_fusion<S: Scalar>(
    params: &mut ModelParams<S>,
    examples: &[FusionExample],
    cfg: &FusionConfig,
    short_term_only: bool,
) -> Result<Vec<TraceRecord>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("no fusion examples to train on".into()));
    }
    for ex in examples {
        check_example(params, ex)?;
    }
    let trainable = params.only_trainable(&["head.fusion.w", "head.fusion.b"])?;
    let mut adam = AdamState::new(&params.registry, 0.0)?;
    let mut batch_rng = substream(cfg.seed, "fusion.batch");
    let mut trace = Vec::with_capacity(cfg.iterations as usize);
    for step in 0..cfg.iterations {
        let mut g = Graph::new();
        let mut losses = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let ex = &examples[batch_rng.gen_range(0..examples.len())];
            let scores = scores_node(&mut g, params, ex, short_term_only)?;
            losses.push(logistic_loss_node(&mut g, scores, ex.role)?);
        }
        let loss = g.mean_scalars(&losses)?;
        let grads = g.backward(loss, &params.registry)?;
        adam.step_filtered(&mut params.registry, &grads, cfg.base_lr, Some(&trainable))?;
        trace.push(TraceRecord {
            step,
            metric: "fusion_loss".into(),
            value: g.scalar_value(loss),
        });
    }
    Ok(trace)
}

/// Per-class scores for one example under the current fusion layer.
pub fn fusion_scores<S: Scalar>(
    params: &ModelParams<S>,
    ex: &FusionExample,
    short_term_only: bool,
) -> Result<Vec<f64>> {
    check_example(params, ex)?;
    let mut g = Graph::new();
    let node = scores_node(&mut g, params, ex, short_term_only)?;
    let t = g.value(node);
    Ok((0..t.cols()).map(|j| t.at2(0, j).to_f64()).collect())
}

/// Top-1 role accuracy over a set of examples.
pub fn fusion_accuracy<S: Scalar>(
    params: &ModelParams<S>,
    examples: &[FusionExample],
    short_term_only: bool,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("no fusion examples to score".into()));
    }
    let mut hits = 0usize;
    for ex in examples {
        let scores = fusion_scores(params, ex, short_term_only)?;
        if argmax(&scores) == ex.role {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutcome {
    pub trace: Vec<TraceRecord>,
    /// Test accuracy of the fused head.
    pub fused: f64,
    /// Test accuracy of the short-term-only baseline trained the same way.
    pub short_term: f64,
}

/// Full late-fusion protocol: cache frozen contexts for the train and test
/// videos, train the fused head and the short-term-only baseline under
/// identical settings, and score both on the test split. Fusion has no
/// model-selection step, so the validation split goes unused here.
pub fn ava_late_fusion<S: Scalar>(
    dataset: &Dataset,
    splits: &Splits,
    init: &ModelParams<S>,
    cfg: &FusionConfig,
) -> Result<(FusionOutcome, ModelParams<S>)> {
    cfg.validate()?;
    let cap = init.config.token_cap;
    let train = collect_fusion_examples(init, dataset, &splits.train, cap)?;
    let test = collect_fusion_examples(init, dataset, &splits.test, cap)?;

    let mut fused_params = init.clone();
    let trace = train_fusion(&mut fused_params, &train, cfg, false)?;
    let fused = fusion_accuracy(&fused_params, &test, false)?;

    let mut st_params = init.clone();
    train_fusion(&mut st_params, &train, cfg, true)?;
    let short_term = fusion_accuracy(&st_params, &test, true)?;

    Ok((
        FusionOutcome {
            trace,
            fused,
            short_term,
        },
        fused_params,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::split_dataset;
    use crate::model::config::ModelConfig;
    use crate::rng::SubRng;
    use crate::synth::{generate_corpus, GenConfig};

    fn tiny_model_config(d_z: usize, d_label: usize) -> ModelConfig {
        ModelConfig {
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
        }
    }

    fn tiny_corpus() -> (crate::data::Dataset, ModelParams<f64>) {
        let gen = GenConfig {
            n_movies: 6,
            segments_per_movie: 2,
            segment_length_s: 30.0,
            instances_per_segment: 3,
            detections_per_instance: 2,
            d_z: 16,
            d_label: 6,
            theme_dim: 4,
            noise_scale: 0.25,
            seed: 33,
            ..GenConfig::default()
        };
        let corpus = generate_corpus(&gen).unwrap();
        let params = ModelParams::<f64>::new(
            &tiny_model_config(gen.d_z, gen.d_label),
            &mut substream(7, "model"),
        )
        .unwrap();
        (corpus.dataset, params)
    }

    /// Crafted examples where the context carries the label and the
    /// short-term scores carry nothing.
    fn context_determined(params: &ModelParams<f64>, n: usize, rng: &mut SubRng) -> Vec<FusionExample> {
        let (h, d) = (params.config.hidden, params.config.d_label);
        (0..n)
            .map(|_| {
                let role = rng.gen_range(0..d);
                let mut context = vec![0.0; h];
                context[role] = 2.0;
                FusionExample {
                    context,
                    short_term: vec![1.0 / d as f64; d],
                    role,
                }
            })
            .collect()
    }

    #[test]
    fn context_is_the_mean_penultimate_row_over_the_tracks_tokens() {
        let (dataset, params) = tiny_corpus();
        let video = &dataset.videos[0];
        let span = video_span(video, params.config.token_cap).unwrap();
        let track_id = span.tracks[0].track_id;
        // hand-build the identical forward and average the picked rows
        let got = fusion_context(&params, &span, track_id).unwrap();

        let mut g = Graph::new();
        let mut rng = substream(0, "fusion.context");
        let mut overrides = BTreeMap::new();
        overrides.insert(track_id, ZOverride::Learned);
        let seq = embed_tokens(&mut g, &span, &params, &overrides, Mode::Eval, &mut rng).unwrap();
        let rows = seq.tokens_of_track(track_id);
        let states = encode(&mut g, seq.node, &seq.mask, &params, Mode::Eval, &mut rng).unwrap();
        let (_, penult) = mask_head(&mut g, &params, states).unwrap();
        let t = g.value(penult);
        let h = t.cols();
        let mut want = vec![0.0; h];
        for &r in &rows {
            for j in 0..h {
                want[j] += t.at2(r, j);
            }
        }
        for v in &mut want {
            *v /= rows.len() as f64;
        }
        assert_eq!(got, want);

        // the learned-mask override must actually be in effect
        let mut g2 = Graph::new();
        let mut rng2 = substream(0, "fusion.context");
        let seq2 = embed_tokens(
            &mut g2,
            &span,
            &params,
            &BTreeMap::new(),
            Mode::Eval,
            &mut rng2,
        )
        .unwrap();
        let states2 = encode(&mut g2, seq2.node, &seq2.mask, &params, Mode::Eval, &mut rng2).unwrap();
        let (_, penult2) = mask_head(&mut g2, &params, states2).unwrap();
        let t2 = g2.value(penult2);
        let differs = rows
            .iter()
            .any(|&r| (0..h).any(|j| t2.at2(r, j) != t.at2(r, j)));
        assert!(differs, "override left the track's activations unchanged");
    }

    #[test]
    fn unknown_track_is_a_usage_error() {
        let (dataset, params) = tiny_corpus();
        let span = video_span(&dataset.videos[0], params.config.token_cap).unwrap();
        let err = fusion_context(&params, &span, 999_999).unwrap_err();
        assert!(matches!(err, Error::Usage(_)), "got {err:?}");
    }

    #[test]
    fn zeroed_context_columns_make_scores_depend_only_on_short_term() {
        let mut params = tiny_model();
        let h = params.config.hidden;
        let d = params.config.d_label;
        {
            let entry = params.registry.get_mut(params.heads.fusion_w);
            let data = entry.value.data_mut();
            // rows 0..h of the (h + d) x d matrix feed from the context block
            for v in &mut data[..h * d] {
                *v = 0.0;
            }
        }
        let mut rng = substream(4, "ex");
        let mut a = context_determined(&params, 1, &mut rng).remove(0);
        let mut b = a.clone();
        b.context = a.context.iter().map(|v| v + 3.5).collect();
        assert_eq!(
            fusion_scores(&params, &a, false).unwrap(),
            fusion_scores(&params, &b, false).unwrap(),
            "context still reaches the scores through zeroed rows"
        );
        b = a.clone();
        b.short_term[0] += 1.0;
        a.short_term[1] += 0.5;
        assert_ne!(
            fusion_scores(&params, &a, false).unwrap(),
            fusion_scores(&params, &b, false).unwrap()
        );
    }

    fn tiny_model() -> ModelParams<f64> {
        let cfg = tiny_model_config(16, 6);
        ModelParams::<f64>::new(&cfg, &mut substream(11, "model")).unwrap()
    }

    #[test]
    fn training_touches_only_the_fusion_layer() {
        let mut params = tiny_model();
        let before: Vec<(String, Vec<f64>)> = params
            .registry
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.data().to_vec()))
            .collect();
        let mut rng = substream(5, "ex");
        let examples = context_determined(&params, 40, &mut rng);
        let cfg = FusionConfig {
            iterations: 30,
            batch: 8,
            base_lr: 1e-3,
            seed: 0,
        };
        let trace = train_fusion(&mut params, &examples, &cfg, false).unwrap();
        assert_eq!(trace.len(), 30);
        for ((_, entry), (name, old)) in params.registry.iter().zip(&before) {
            assert_eq!(&entry.name, name);
            let changed = entry.value.data().iter().zip(old).any(|(a, b)| a != b);
            if name == "head.fusion.w" {
                assert!(changed, "fusion weights never moved");
            } else if name != "head.fusion.b" {
                assert!(!changed, "frozen parameter {name} moved");
            }
        }
    }

    #[test]
    fn context_determined_labels_favor_the_fused_head() {
        let params = tiny_model();
        let mut rng = substream(6, "ex");
        let train = context_determined(&params, 240, &mut rng);
        let eval = context_determined(&params, 240, &mut rng);
        let cfg = FusionConfig {
            iterations: 600,
            batch: 16,
            base_lr: 1e-2,
            seed: 1,
        };
        let mut fused = params.clone();
        train_fusion(&mut fused, &train, &cfg, false).unwrap();
        let fused_acc = fusion_accuracy(&fused, &eval, false).unwrap();

        let mut st = params.clone();
        train_fusion(&mut st, &train, &cfg, true).unwrap();
        let st_acc = fusion_accuracy(&st, &eval, true).unwrap();

        assert!(fused_acc >= 0.95, "fused accuracy {fused_acc}");
        assert!(
            st_acc <= 0.40,
            "short-term-only baseline {st_acc} saw the context"
        );
    }

    #[test]
    fn collected_examples_cover_every_target() {
        let (dataset, params) = tiny_corpus();
        let all: Vec<usize> = (0..dataset.videos.len()).collect();
        let examples =
            collect_fusion_examples(&params, &dataset, &all, params.config.token_cap).unwrap();
        let want: usize = dataset.videos.iter().map(|v| v.ava_targets.len()).sum();
        assert_eq!(examples.len(), want);
        assert!(want > 0);
        for ex in &examples {
            assert_eq!(ex.context.len(), params.config.hidden);
            assert_eq!(ex.short_term.len(), params.config.d_label);
            assert!(ex.role < params.config.d_label);
            assert!(ex.context.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn late_fusion_protocol_is_deterministic_end_to_end() {
        let (dataset, params) = tiny_corpus();
        let splits = split_dataset(&dataset, (0.7, 0.15, 0.15), true, 0).unwrap();
        let cfg = FusionConfig {
            iterations: 40,
            batch: 8,
            base_lr: 1e-3,
            seed: 2,
        };
        let (out_a, params_a) = ava_late_fusion(&dataset, &splits, &params, &cfg).unwrap();
        let (out_b, params_b) = ava_late_fusion(&dataset, &splits, &params, &cfg).unwrap();
        assert_eq!(out_a, out_b);
        assert_eq!(out_a.trace.len(), 40);
        assert!((0.0..=1.0).contains(&out_a.fused));
        assert!((0.0..=1.0).contains(&out_a.short_term));
        for ((_, ea), (_, eb)) in params_a.registry.iter().zip(params_b.registry.iter()) {
            assert_eq!(ea.value.data(), eb.value.data());
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let mut params = tiny_model();
        let cfg = FusionConfig::default();
        assert!(matches!(
            train_fusion(&mut params, &[], &cfg, false),
            Err(Error::Data(_))
        ));
        let bad = FusionExample {
            context: vec![0.0; 3],
            short_term: vec![0.0; params.config.d_label],
            role: 0,
        };
        assert!(matches!(
            train_fusion(&mut params, &[bad], &cfg, false),
            Err(Error::Data(_))
        ));
        let zero_iter = FusionConfig {
            iterations: 0,
            ..FusionConfig::default()
        };
        assert!(matches!(zero_iter.validate(), Err(Error::Config(_))));
        assert!(matches!(
            fusion_accuracy(&params, &[], false),
            Err(Error::Data(_))
        ));
    }
}

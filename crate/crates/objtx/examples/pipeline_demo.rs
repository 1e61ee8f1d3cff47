//! End-to-end pipeline drive at demo scale: generate a corpus, pretrain
//! briefly, fine-tune the theme task, then run late fusion. Prints the
//! numbers a full experiment would log.

use objtx::data::Span;
use objtx::finetune::{finetune, split_dataset, FinetuneConfig, TaskSpec};
use objtx::fusion::{ava_late_fusion, FusionConfig};
use objtx::model::config::ModelConfig;
use objtx::model::params::ModelParams;
use objtx::preprocess::{clip_span, truncate_span};
use objtx::pretrain::{pretrain_loop, Objective, PretrainConfig};
use objtx::rng::substream;
use objtx::synth::{generate_corpus, GenConfig};

fn main() {
    let gen = GenConfig {
        n_movies: 40,
        segments_per_movie: 2,
        segment_length_s: 60.0,
        instances_per_segment: 6,
        detections_per_instance: 3,
        d_z: 16,
        d_label: 6,
        theme_dim: 4,
        noise_scale: 0.25,
        seed: 33,
        ..GenConfig::default()
    };
    let corpus = generate_corpus(&gen).expect("corpus");
    let dataset = corpus.dataset;
    println!(
        "corpus: {} videos, {} tracks",
        dataset.videos.len(),
        dataset.videos.iter().map(|v| v.tracks.len()).sum::<usize>()
    );

    let model_cfg = ModelConfig {
        hidden: 64,
        layers: 3,
        heads: 4,
        head_dim: 16,
        ffn_dim: 96,
        dropout: 0.1,
        d_z: gen.d_z,
        d_label: gen.d_label,
        instance_slots: 48,
        shot_slots: 12,
        token_cap: 128,
    };
    let mut params = ModelParams::<f64>::new(&model_cfg, &mut substream(7, "model")).expect("init");

    // two overlapping windows per video so compatibility batches have pairs
    let mut spans: Vec<Span> = Vec::new();
    for v in &dataset.videos {
        for (start, len) in [(0.0, 45.0), (15.0, 45.0), (0.0, 30.0), (30.0, 30.0)] {
            let s = clip_span(v, start, len).expect("clip");
            spans.push(truncate_span(&s, model_cfg.token_cap).expect("truncate"));
        }
    }
    let pre_cfg = PretrainConfig {
        iterations: 8000,
        batch: 8,
        objective: Objective::MaskCompat,
        base_lr: 1e-3,
        weight_decay: 0.01,
        warmup_frac: 0.05,
        mask_fraction: 0.15,
        seed: 3,
    };
    let trace = pretrain_loop(&spans, &mut params, &pre_cfg).expect("pretrain");
    let mask_first: f64 = trace
        .iter()
        .filter(|r| r.metric == "mask_loss")
        .take(10)
        .map(|r| r.value)
        .sum::<f64>()
        / 10.0;
    let mask_last: f64 = trace
        .iter()
        .filter(|r| r.metric == "mask_loss")
        .rev()
        .take(10)
        .map(|r| r.value)
        .sum::<f64>()
        / 10.0;
    println!("pretrain: mask loss first10 {mask_first:.4} last10 {mask_last:.4}");

    let splits = split_dataset(&dataset, (0.7, 0.15, 0.15), true, 0).expect("split");
    let ft_cfg = FinetuneConfig {
        epoch_grid: vec![30],
        batch_grid: vec![8],
        base_lr: 1e-3,
        weight_decay: 0.01,
        warmup_frac: 0.05,
        seed: 5,
    };
    let (grid, _tuned) = finetune(
        &dataset,
        &splits,
        &params,
        &TaskSpec::classification("theme", 4),
        &ft_cfg,
    )
    .expect("finetune");
    println!(
        "finetune theme: chosen {}x{}, val {:.3} test {:.3}",
        grid.chosen_epochs, grid.chosen_batch, grid.val_score, grid.test_score
    );

    let fu_cfg = FusionConfig::default();
    let (outcome, _) = ava_late_fusion(&dataset, &splits, &params, &fu_cfg).expect("fusion");
    println!(
        "fusion: fused {:.3} short-term-only {:.3}",
        outcome.fused, outcome.short_term
    );
}

//! Overfit a single corrupted span: the masked-instance loss should fall
//! well below its uniform-prediction level within a few dozen Adam steps.
//!
//!     cargo run --release -p objtx --example overfit

use std::collections::BTreeMap;

use objtx::data::{BBox, Detection, SourceClass, Span, Track};
use objtx::model::config::ModelConfig;
use objtx::model::embed::{embed_tokens, ZOverride};
use objtx::model::encoder::encode;
use objtx::model::heads;
use objtx::model::params::ModelParams;
use objtx::numerics::adam::AdamState;
use objtx::numerics::graph::Graph;
use objtx::numerics::ops::Mode;
use objtx::rng::substream;

fn main() -> objtx::Result<()> {
    let cfg = ModelConfig {
        hidden: 32,
        layers: 2,
        heads: 4,
        head_dim: 8,
        ffn_dim: 64,
        dropout: 0.0,
        d_z: 8,
        d_label: 4,
        instance_slots: 8,
        shot_slots: 4,
        token_cap: 32,
    };
    let mut params = ModelParams::<f64>::new(&cfg, &mut substream(0, "init"))?;

    let det = |t: f64, seed: f64| Detection {
        t,
        bbox: BBox::new(0.3, 0.3, 0.5, 0.6).unwrap(),
        z: (0..8).map(|i| ((i as f64) * 0.37 + seed).sin()).collect(),
        pseudo_label: None,
    };
    let span = Span {
        video_id: "demo".into(),
        movie_id: "demo".into(),
        start: 0.0,
        length: 60.0,
        tracks: vec![
            Track {
                track_id: 1,
                shot_index: 0,
                source_class: SourceClass::Person,
                detections: vec![det(5.0, 0.1), det(25.0, 0.15), det(45.0, 0.2)],
            },
            Track {
                track_id: 2,
                shot_index: 1,
                source_class: SourceClass::Person,
                detections: vec![det(33.0, 1.3), det(55.0, 1.35)],
            },
        ],
    };
    let mut overrides = BTreeMap::new();
    overrides.insert(1u64, ZOverride::Learned);
    let targets = vec![vec![0.7, 0.1, 0.1, 0.1]; 3];

    let mut adam = AdamState::new(&params.registry, 0.01)?;
    println!("uniform-prediction loss would be ln {} = {:.4}", cfg.d_label, (cfg.d_label as f64).ln());
    for step in 0..60 {
        let mut g = Graph::new();
        let mut rng_embed = substream(1 + step, "embed");
        let mut rng_drop = substream(1 + step, "dropout");
        let seq = embed_tokens(&mut g, &span, &params, &overrides, Mode::Train, &mut rng_embed)?;
        let enc = encode(&mut g, seq.node, &seq.mask, &params, Mode::Train, &mut rng_drop)?;
        let rows = seq.tokens_of_track(1);
        let picked = g.gather_rows(enc, &rows)?;
        let (logits, _) = heads::mask_head(&mut g, &params, picked)?;
        let loss = heads::masked_loss_node(&mut g, logits, &targets)?;
        let grads = g.backward(loss, &params.registry)?;
        adam.step(&mut params.registry, &grads, 3e-3)?;
        if step % 10 == 0 || step == 59 {
            println!("step {step:>3}  masked loss {:.6}", g.scalar_value(loss));
        }
    }
    Ok(())
}

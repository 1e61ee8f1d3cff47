//! Generates the default synthetic corpus and prints structural stats.

use objtx::data::LabelValue;
use objtx::synth::{generate_corpus, GenConfig};

fn main() {
    let cfg = GenConfig::default();
    let corpus = generate_corpus(&cfg).expect("default config generates a valid corpus");
    let videos = &corpus.dataset.videos;
    let n_tracks: usize = videos.iter().map(|v| v.tracks.len()).sum();
    let n_dets: usize = videos
        .iter()
        .flat_map(|v| &v.tracks)
        .map(|t| t.detections.len())
        .sum();
    println!(
        "{} movies, {} videos, {} tracks, {} detections",
        corpus.dataset.movie_ids().len(),
        videos.len(),
        n_tracks,
        n_dets
    );

    for task in ["role_match", "scene_match"] {
        let pos = videos
            .iter()
            .filter(|v| matches!(v.labels[task], LabelValue::Class { index: 1 }))
            .count();
        println!(
            "{task}: {pos}/{} positive ({:.2})",
            videos.len(),
            pos as f64 / videos.len() as f64
        );
    }

    let mut hits = 0usize;
    let mut total = 0usize;
    for v in videos {
        for t in &v.ava_targets {
            total += 1;
            let argmax = t
                .short_term
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            hits += usize::from(argmax == t.role);
        }
    }
    println!(
        "short-term top-1: {:.3} over {} fusion targets",
        hits as f64 / total as f64,
        total
    );
}

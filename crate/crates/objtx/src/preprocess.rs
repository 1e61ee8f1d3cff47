//! From raw per-frame detections to model-ready spans.
//!
//! Pipeline: greedy IoU linking of consecutive-frame detections into tracks,
//! shot-cut detection from frame signatures, splitting tracks at shot
//! boundaries, sliding-window span enumeration, and token-cap truncation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{iou, BBox, Detection, Shot, SourceClass, Span, Track, Video};
use crate::error::{Error, Result};

/// Default IoU needed to continue a track across consecutive frames.
pub const LINK_IOU_THRESHOLD: f64 = 0.5;
/// Default half-L1 histogram distance that marks a shot cut.
pub const SHOT_CUT_THRESHOLD: f64 = 0.3;
/// Default span window in seconds.
pub const SPAN_LENGTH_S: f64 = 60.0;
/// Default span stride in seconds.
pub const SPAN_STRIDE_S: f64 = 1.0;

/// One detector output before tracking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub z: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_label: Option<Vec<f64>>,
    pub source_class: SourceClass,
}

/// All detections of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawFrame {
    pub t: f64,
    pub detections: Vec<RawDetection>,
}

/// Per-frame appearance histogram used for cut detection. `hist` is a
/// distribution (non-negative, sums to 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSignature {
    pub t: f64,
    pub hist: Vec<f64>,
}

/// A video before preprocessing: frames of raw detections plus signatures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawVideo {
    pub video_id: String,
    pub movie_id: String,
    pub length_s: f64,
    pub frames: Vec<RawFrame>,
    pub signatures: Vec<FrameSignature>,
    /// Whole-video labels carried through to the preprocessed video.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, crate::data::LabelValue>,
}

/// Half the L1 distance between two histograms; 0 for identical
/// distributions, 1 for disjoint support.
pub fn hist_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "histogram lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// Greedy IoU linking of consecutive-frame detections into tracks.
///
/// For each frame pair, candidate links are (track active in the previous
/// frame, detection in this frame) with matching source class. Candidates
/// are taken in decreasing IoU order (ties: earlier track, then earlier
/// detection) and accepted while IoU >= `threshold`; leftover detections
/// open new tracks. A track that misses a frame is closed. Returned tracks
/// have `shot_index` 0; run [`assign_shots`] afterwards.
pub fn link_tracks(frames: &[RawFrame], threshold: f64) -> Result<Vec<Track>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "link threshold {threshold} not in [0, 1]"
        )));
    }
    for w in frames.windows(2) {
        if w[1].t <= w[0].t {
            return Err(Error::Data(format!(
                "frames not strictly increasing ({} then {})",
                w[0].t, w[1].t
            )));
        }
    }
    let mut tracks: Vec<Track> = Vec::new();
    // indices into `tracks` whose last detection is in the previous frame
    let mut active: Vec<usize> = Vec::new();

    for frame in frames {
        for d in &frame.detections {
            d.bbox.validate()?;
        }
        // score all (active track, detection) pairs
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new(); // (iou, active pos, det idx)
        for (ai, &ti) in active.iter().enumerate() {
            let last = &tracks[ti].detections.last().expect("tracks never empty").bbox;
            for (di, d) in frame.detections.iter().enumerate() {
                if d.source_class != tracks[ti].source_class {
                    continue;
                }
                let ov = iou(last, &d.bbox);
                if ov >= threshold {
                    candidates.push((ov, ai, di));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("IoU is finite")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut track_used = vec![false; active.len()];
        let mut det_used = vec![false; frame.detections.len()];
        let mut next_active: Vec<usize> = Vec::new();
        for (_, ai, di) in candidates {
            if track_used[ai] || det_used[di] {
                continue;
            }
            track_used[ai] = true;
            det_used[di] = true;
            let ti = active[ai];
            let d = &frame.detections[di];
            tracks[ti].detections.push(Detection {
                t: frame.t,
                bbox: d.bbox,
                z: d.z.clone(),
                pseudo_label: d.pseudo_label.clone(),
            });
            next_active.push(ti);
        }
        for (di, d) in frame.detections.iter().enumerate() {
            if det_used[di] {
                continue;
            }
            tracks.push(Track {
                track_id: tracks.len() as u64,
                shot_index: 0,
                source_class: d.source_class,
                detections: vec![Detection {
                    t: frame.t,
                    bbox: d.bbox,
                    z: d.z.clone(),
                    pseudo_label: d.pseudo_label.clone(),
                }],
            });
            next_active.push(tracks.len() - 1);
        }
        next_active.sort_unstable();
        active = next_active;
    }
    Ok(tracks)
}

/// Detect shot cuts from frame signatures and return the half-open shot
/// cover of `[0, length_s)`. A cut falls at the timestamp of the first
/// frame whose histogram is farther than `threshold` from its predecessor.
pub fn detect_shots(
    signatures: &[FrameSignature],
    length_s: f64,
    threshold: f64,
) -> Result<Vec<Shot>> {
    if length_s <= 0.0 {
        return Err(Error::Data(format!("non-positive video length {length_s}")));
    }
    if signatures.is_empty() {
        return Err(Error::Data("no frame signatures".into()));
    }
    for s in signatures {
        let sum: f64 = s.hist.iter().sum();
        if s.hist.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!(
                "signature at t={} is not a distribution (sum {sum})",
                s.t
            )));
        }
    }
    for w in signatures.windows(2) {
        if w[1].t <= w[0].t {
            return Err(Error::Data(format!(
                "signatures not strictly increasing ({} then {})",
                w[0].t, w[1].t
            )));
        }
    }
    let mut boundaries = Vec::new();
    for w in signatures.windows(2) {
        if hist_distance(&w[0].hist, &w[1].hist)? > threshold {
            let t = w[1].t;
            if t > 0.0 && t < length_s {
                boundaries.push(t);
            }
        }
    }
    let mut shots = Vec::with_capacity(boundaries.len() + 1);
    let mut at = 0.0;
    for b in boundaries {
        shots.push(Shot { start: at, end: b });
        at = b;
    }
    shots.push(Shot {
        start: at,
        end: length_s,
    });
    Ok(shots)
}

/// Index of the shot containing time `t`. The final shot's end is treated
/// as inclusive so the video endpoint maps to the last shot.
pub fn shot_of(shots: &[Shot], t: f64) -> Option<usize> {
    shots
        .iter()
        .position(|s| s.contains(t))
        .or_else(|| {
            let last = shots.len().checked_sub(1)?;
            ((t - shots[last].end).abs() < 1e-9).then_some(last)
        })
}

/// Split tracks at shot boundaries so each output track lies inside one
/// shot, and stamp `shot_index`. Ids are reassigned sequentially in input
/// order (then by time within an input track).
pub fn assign_shots(tracks: &[Track], shots: &[Shot]) -> Result<Vec<Track>> {
    if shots.is_empty() {
        return Err(Error::Data("empty shot list".into()));
    }
    let mut out: Vec<Track> = Vec::new();
    for tr in tracks {
        let mut current: Option<(usize, Vec<Detection>)> = None;
        for d in &tr.detections {
            let si = shot_of(shots, d.t).ok_or_else(|| {
                Error::Data(format!(
                    "detection at {} outside the shot cover (track {})",
                    d.t, tr.track_id
                ))
            })?;
            match &mut current {
                Some((cs, ds)) if *cs == si => ds.push(d.clone()),
                _ => {
                    if let Some((cs, ds)) = current.take() {
                        out.push(Track {
                            track_id: out.len() as u64,
                            shot_index: cs,
                            source_class: tr.source_class,
                            detections: ds,
                        });
                    }
                    current = Some((si, vec![d.clone()]));
                }
            }
        }
        if let Some((cs, ds)) = current {
            out.push(Track {
                track_id: out.len() as u64,
                shot_index: cs,
                source_class: tr.source_class,
                detections: ds,
            });
        }
    }
    Ok(out)
}

/// Full preprocessing of one raw video.
pub fn preprocess_video(raw: &RawVideo) -> Result<Video> {
    let shots = detect_shots(&raw.signatures, raw.length_s, SHOT_CUT_THRESHOLD)?;
    let linked = link_tracks(&raw.frames, LINK_IOU_THRESHOLD)?;
    let tracks = assign_shots(&linked, &shots)?;
    let video = Video {
        video_id: raw.video_id.clone(),
        movie_id: raw.movie_id.clone(),
        length_s: raw.length_s,
        shots,
        tracks,
        labels: raw.labels.clone(),
        ava_targets: vec![],
    };
    video.validate()?;
    Ok(video)
}

/// Sliding-window spans plus a flag set when the video was shorter than the
/// window (in which case the single span covers the whole video).
#[derive(Clone, Debug, PartialEq)]
pub struct SpanSet {
    pub spans: Vec<Span>,
    pub short_video: bool,
}

/// Clip a video's tracks into the window `[start, start + length)`; the
/// interval end is inclusive when it reaches the video end. Tracks with no
/// detection inside are dropped.
pub fn clip_span(video: &Video, start: f64, length: f64) -> Result<Span> {
    if length <= 0.0 {
        return Err(Error::Usage(format!("span length {length} must be > 0")));
    }
    let end = start + length;
    let end_inclusive = end >= video.length_s - 1e-9;
    let mut tracks = Vec::new();
    for tr in &video.tracks {
        let kept: Vec<Detection> = tr
            .detections
            .iter()
            .filter(|d| d.t >= start && (d.t < end || (end_inclusive && (d.t - end).abs() < 1e-9)))
            .cloned()
            .collect();
        if !kept.is_empty() {
            tracks.push(Track {
                track_id: tr.track_id,
                shot_index: tr.shot_index,
                source_class: tr.source_class,
                detections: kept,
            });
        }
    }
    Ok(Span {
        video_id: video.video_id.clone(),
        movie_id: video.movie_id.clone(),
        start,
        length,
        tracks,
    })
}

/// Enumerate spans of `length` seconds every `stride` seconds. Starts run
/// from 0 to `video.length_s - length` inclusive. A video shorter than the
/// window yields one whole-video span with `short_video` set.
pub fn enumerate_spans(video: &Video, length: f64, stride: f64) -> Result<SpanSet> {
    if length <= 0.0 || stride <= 0.0 {
        return Err(Error::Config(format!(
            "span length {length} and stride {stride} must be > 0"
        )));
    }
    if video.length_s < length {
        return Ok(SpanSet {
            spans: vec![clip_span(video, 0.0, video.length_s)?],
            short_video: true,
        });
    }
    let last_start = video.length_s - length;
    let n = (last_start / stride + 1e-9).floor() as usize + 1;
    let mut spans = Vec::with_capacity(n);
    for i in 0..n {
        spans.push(clip_span(video, i as f64 * stride, length)?);
    }
    Ok(SpanSet {
        spans,
        short_video: false,
    })
}

/// Drop object tracks unless they are requested.
pub fn filter_sources(span: &Span, include_objects: bool) -> Span {
    if include_objects {
        return span.clone();
    }
    Span {
        tracks: span
            .tracks
            .iter()
            .filter(|t| t.source_class == SourceClass::Person)
            .cloned()
            .collect(),
        ..span.clone()
    }
}

/// Tokens the model would see for this span: one `[CLS]` plus one per
/// detection.
pub fn count_tokens(span: &Span, include_objects: bool) -> usize {
    1 + span
        .tracks
        .iter()
        .filter(|t| include_objects || t.source_class == SourceClass::Person)
        .map(|t| t.detections.len())
        .sum::<usize>()
}

/// Reduce a span to at most `cap` tokens (`[CLS]` included). Detection
/// budget is split across tracks proportionally by size with
/// largest-remainder rounding; each surviving track keeps its first and
/// last detections with the interior sampled uniformly. Spans already
/// under the cap come back unchanged, so the operation is idempotent.
pub fn truncate_span(span: &Span, cap: usize) -> Result<Span> {
    if cap < 2 {
        return Err(Error::Config(format!(
            "token cap {cap} leaves no room for detections"
        )));
    }
    let total: usize = span.tracks.iter().map(|t| t.detections.len()).sum();
    let budget = cap - 1;
    if total <= budget {
        return Ok(span.clone());
    }
    let sizes: Vec<usize> = span.tracks.iter().map(|t| t.detections.len()).collect();
    let alloc = largest_remainder(&sizes, budget);
    let mut tracks = Vec::new();
    for (tr, &keep) in span.tracks.iter().zip(&alloc) {
        if keep == 0 {
            continue;
        }
        let n = tr.detections.len();
        let idx = uniform_keep_indices(n, keep);
        tracks.push(Track {
            track_id: tr.track_id,
            shot_index: tr.shot_index,
            source_class: tr.source_class,
            detections: idx.into_iter().map(|i| tr.detections[i].clone()).collect(),
        });
    }
    Ok(Span {
        video_id: span.video_id.clone(),
        movie_id: span.movie_id.clone(),
        start: span.start,
        length: span.length,
        tracks,
    })
}

/// Apportion `budget` among weights by the largest-remainder method.
/// Each share is capped by its weight; ties go to the earlier index.
pub fn largest_remainder(weights: &[usize], budget: usize) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    if total == 0 {
        return vec![0; weights.len()];
    }
    if budget >= total {
        return weights.to_vec();
    }
    let mut alloc: Vec<usize> = Vec::with_capacity(weights.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        let quota = budget as f64 * w as f64 / total as f64;
        let base = quota.floor() as usize;
        alloc.push(base);
        assigned += base;
        remainders.push((quota - base as f64, i));
    }
    // stable sort: descending remainder, ties by original order
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite remainders"));
    let mut left = budget - assigned;
    for (_, i) in remainders {
        if left == 0 {
            break;
        }
        if alloc[i] < weights[i] {
            alloc[i] += 1;
            left -= 1;
        }
    }
    alloc
}

/// Indices keeping `k` of `n` items: always the first, always the last when
/// `k >= 2`, interior uniformly spaced. Requires `1 <= k <= n`.
pub fn uniform_keep_indices(n: usize, k: usize) -> Vec<usize> {
    debug_assert!(k >= 1 && k <= n);
    if k == 1 {
        return vec![0];
    }
    if k == n {
        return (0..n).collect();
    }
    let step = (n - 1) as f64 / (k - 1) as f64;
    (0..k)
        .map(|j| (j as f64 * step).round() as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(l: f64, t: f64, r: f64, b: f64) -> BBox {
        BBox::new(l, t, r, b).unwrap()
    }

    fn raw(bbox: BBox) -> RawDetection {
        RawDetection {
            bbox,
            z: vec![1.0],
            pseudo_label: None,
            source_class: SourceClass::Person,
        }
    }

    fn walk_frames(n: usize, step: f64) -> Vec<RawFrame> {
        // two well-separated boxes drifting right
        (0..n)
            .map(|i| {
                let dx = i as f64 * step;
                RawFrame {
                    t: i as f64 * 0.5,
                    detections: vec![
                        raw(bx(0.05 + dx, 0.1, 0.2 + dx, 0.3)),
                        raw(bx(0.6 + dx, 0.5, 0.75 + dx, 0.8)),
                    ],
                }
            })
            .collect()
    }

    #[test]
    fn linking_keeps_two_separate_walkers_in_two_tracks() {
        let frames = walk_frames(6, 0.01);
        let tracks = link_tracks(&frames, 0.5).unwrap();
        assert_eq!(tracks.len(), 2);
        for tr in &tracks {
            assert_eq!(tr.detections.len(), 6);
            tr.validate("linked").unwrap();
        }
    }

    #[test]
    fn linking_starts_new_track_when_overlap_is_too_small() {
        let frames = vec![
            RawFrame {
                t: 0.0,
                detections: vec![raw(bx(0.1, 0.1, 0.2, 0.2))],
            },
            RawFrame {
                t: 0.5,
                detections: vec![raw(bx(0.5, 0.5, 0.6, 0.6))], // jumped away
            },
        ];
        let tracks = link_tracks(&frames, 0.5).unwrap();
        assert_eq!(tracks.len(), 2);
        assert_eq!(tracks[0].detections.len(), 1);
        assert_eq!(tracks[1].detections.len(), 1);
    }

    #[test]
    fn linking_is_greedy_by_descending_iou() {
        // One previous box, two candidates that both clear the threshold;
        // the closer one must win and the other opens a new track.
        let frames = vec![
            RawFrame {
                t: 0.0,
                detections: vec![raw(bx(0.10, 0.1, 0.30, 0.3))],
            },
            RawFrame {
                t: 0.5,
                detections: vec![
                    raw(bx(0.13, 0.1, 0.33, 0.3)), // IoU ~ 0.74
                    raw(bx(0.11, 0.1, 0.31, 0.3)), // IoU ~ 0.9
                ],
            },
        ];
        let tracks = link_tracks(&frames, 0.5).unwrap();
        assert_eq!(tracks.len(), 2);
        // track 0 continued with the higher-IoU detection (index 1)
        assert_eq!(tracks[0].detections.len(), 2);
        assert!((tracks[0].detections[1].bbox.left - 0.11).abs() < 1e-12);
    }

    #[test]
    fn linking_does_not_bridge_a_missed_frame() {
        let a = bx(0.1, 0.1, 0.2, 0.2);
        let frames = vec![
            RawFrame {
                t: 0.0,
                detections: vec![raw(a)],
            },
            RawFrame {
                t: 0.5,
                detections: vec![],
            },
            RawFrame {
                t: 1.0,
                detections: vec![raw(a)],
            },
        ];
        let tracks = link_tracks(&frames, 0.5).unwrap();
        assert_eq!(tracks.len(), 2, "gap must close the track");
    }

    #[test]
    fn linking_never_joins_different_source_classes() {
        let a = bx(0.1, 0.1, 0.2, 0.2);
        let mut obj = raw(a);
        obj.source_class = SourceClass::Object;
        let frames = vec![
            RawFrame {
                t: 0.0,
                detections: vec![raw(a)],
            },
            RawFrame {
                t: 0.5,
                detections: vec![obj],
            },
        ];
        let tracks = link_tracks(&frames, 0.5).unwrap();
        assert_eq!(tracks.len(), 2);
    }

    fn sig(t: f64, which: usize) -> FrameSignature {
        let mut hist = vec![0.0; 4];
        hist[which] = 1.0;
        FrameSignature { t, hist }
    }

    #[test]
    fn shot_detection_recovers_known_cuts_exactly() {
        // 3 scenes: cuts at 4.0 and 8.0, frames every 0.5 s
        let mut sigs = Vec::new();
        let mut t = 0.0;
        while t < 12.0 {
            let which = if t < 4.0 {
                0
            } else if t < 8.0 {
                1
            } else {
                2
            };
            sigs.push(sig(t, which));
            t += 0.5;
        }
        let shots = detect_shots(&sigs, 12.0, 0.3).unwrap();
        assert_eq!(
            shots,
            vec![
                Shot { start: 0.0, end: 4.0 },
                Shot { start: 4.0, end: 8.0 },
                Shot { start: 8.0, end: 12.0 },
            ]
        );
    }

    #[test]
    fn identical_signatures_give_a_single_shot() {
        let sigs: Vec<FrameSignature> = (0..10).map(|i| sig(i as f64, 2)).collect();
        let shots = detect_shots(&sigs, 10.0, 0.3).unwrap();
        assert_eq!(shots, vec![Shot { start: 0.0, end: 10.0 }]);
    }

    #[test]
    fn sub_threshold_drift_does_not_cut() {
        // distance between [0.7, 0.3] and [0.5, 0.5] is 0.2 < 0.3
        let sigs = vec![
            FrameSignature { t: 0.0, hist: vec![0.7, 0.3] },
            FrameSignature { t: 1.0, hist: vec![0.5, 0.5] },
        ];
        let shots = detect_shots(&sigs, 2.0, 0.3).unwrap();
        assert_eq!(shots.len(), 1);
    }

    #[test]
    fn hist_distance_known_value() {
        // 0.5 * (|0.7-0.5| + |0.3-0.5|) = 0.2
        assert!((hist_distance(&[0.7, 0.3], &[0.5, 0.5]).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(hist_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(hist_distance(&[0.5], &[0.5, 0.0]).is_err());
    }

    #[test]
    fn assign_shots_splits_a_boundary_crossing_track() {
        let shots = vec![Shot { start: 0.0, end: 2.0 }, Shot { start: 2.0, end: 4.0 }];
        let d = |t: f64| Detection {
            t,
            bbox: bx(0.1, 0.1, 0.2, 0.2),
            z: vec![0.0],
            pseudo_label: None,
        };
        let crossing = Track {
            track_id: 40,
            shot_index: 0,
            source_class: SourceClass::Person,
            detections: vec![d(0.5), d(1.5), d(2.0), d(3.5)], // 2.0 belongs to shot 1
        };
        let out = assign_shots(&[crossing], &shots).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].shot_index, 0);
        assert_eq!(out[0].detections.len(), 2);
        assert_eq!(out[1].shot_index, 1);
        assert_eq!(out[1].detections.len(), 2);
        assert_eq!(out[0].track_id, 0);
        assert_eq!(out[1].track_id, 1);
    }

    #[test]
    fn assign_shots_keeps_single_shot_tracks_whole() {
        let shots = vec![Shot { start: 0.0, end: 5.0 }];
        let d = |t: f64| Detection {
            t,
            bbox: bx(0.1, 0.1, 0.2, 0.2),
            z: vec![0.0],
            pseudo_label: None,
        };
        let tr = Track {
            track_id: 3,
            shot_index: 0,
            source_class: SourceClass::Object,
            detections: vec![d(1.0), d(2.0), d(3.0)],
        };
        let out = assign_shots(&[tr.clone()], &shots).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].detections, tr.detections);
        assert_eq!(out[0].source_class, SourceClass::Object);
    }

    fn empty_video(length: f64) -> Video {
        Video {
            video_id: "v".into(),
            movie_id: "m".into(),
            length_s: length,
            shots: vec![Shot { start: 0.0, end: length }],
            tracks: vec![],
            labels: BTreeMap::new(),
            ava_targets: vec![],
        }
    }

    #[test]
    fn span_count_matches_arithmetic() {
        // 180 s video, 60 s window, 1 s stride: starts 0..=120, so 121 spans
        let v = empty_video(180.0);
        let set = enumerate_spans(&v, 60.0, 1.0).unwrap();
        assert_eq!(set.spans.len(), 121);
        assert!(!set.short_video);
        assert_eq!(set.spans[0].start, 0.0);
        assert_eq!(set.spans[120].start, 120.0);
        // exact fit: one span
        let v = empty_video(60.0);
        let set = enumerate_spans(&v, 60.0, 1.0).unwrap();
        assert_eq!(set.spans.len(), 1);
        assert!(!set.short_video);
    }

    #[test]
    fn short_video_yields_single_flagged_truncated_span() {
        let v = empty_video(45.0);
        let set = enumerate_spans(&v, 60.0, 1.0).unwrap();
        assert!(set.short_video);
        assert_eq!(set.spans.len(), 1);
        assert_eq!(set.spans[0].length, 45.0);
    }

    #[test]
    fn clip_span_takes_half_open_window_and_drops_empty_tracks() {
        let mut v = empty_video(10.0);
        let d = |t: f64| Detection {
            t,
            bbox: bx(0.1, 0.1, 0.2, 0.2),
            z: vec![0.0],
            pseudo_label: None,
        };
        v.tracks = vec![
            Track {
                track_id: 0,
                shot_index: 0,
                source_class: SourceClass::Person,
                detections: vec![d(1.0), d(4.0), d(5.0), d(7.0)],
            },
            Track {
                track_id: 1,
                shot_index: 0,
                source_class: SourceClass::Person,
                detections: vec![d(9.0)],
            },
        ];
        let span = clip_span(&v, 1.0, 4.0).unwrap(); // [1, 5)
        assert_eq!(span.tracks.len(), 1);
        assert_eq!(span.tracks[0].detections.len(), 2); // t = 1.0, 4.0
        // window reaching the video end includes the endpoint
        let span = clip_span(&v, 6.0, 4.0).unwrap(); // [6, 10]
        assert_eq!(span.tracks.len(), 2);
    }

    #[test]
    fn count_tokens_includes_cls_and_respects_object_flag() {
        let mut v = empty_video(10.0);
        let d = |t: f64| Detection {
            t,
            bbox: bx(0.1, 0.1, 0.2, 0.2),
            z: vec![0.0],
            pseudo_label: None,
        };
        v.tracks = vec![
            Track {
                track_id: 0,
                shot_index: 0,
                source_class: SourceClass::Person,
                detections: vec![d(1.0), d(2.0)],
            },
            Track {
                track_id: 1,
                shot_index: 0,
                source_class: SourceClass::Object,
                detections: vec![d(3.0)],
            },
        ];
        let span = clip_span(&v, 0.0, 10.0).unwrap();
        assert_eq!(count_tokens(&span, false), 3);
        assert_eq!(count_tokens(&span, true), 4);
        let filtered = filter_sources(&span, false);
        assert_eq!(filtered.tracks.len(), 1);
    }

    #[test]
    fn largest_remainder_apportions_exactly_and_caps_at_weight() {
        assert_eq!(largest_remainder(&[10, 10, 10], 15), vec![5, 5, 5]);
        // quotas 6.67, 3.33: floors 6, 3 leave 1 for the biggest remainder
        assert_eq!(largest_remainder(&[10, 5], 10), vec![7, 3]);
        // capped by weight: second track only has 1 detection
        assert_eq!(largest_remainder(&[20, 1], 21), vec![20, 1]);
        assert_eq!(largest_remainder(&[3, 3], 7), vec![3, 3]);
        let alloc = largest_remainder(&[7, 3, 11, 2], 13);
        assert_eq!(alloc.iter().sum::<usize>(), 13);
        for (a, w) in alloc.iter().zip([7, 3, 11, 2]) {
            assert!(*a <= w);
        }
    }

    #[test]
    fn uniform_keep_indices_hold_both_endpoints() {
        assert_eq!(uniform_keep_indices(10, 2), vec![0, 9]);
        assert_eq!(uniform_keep_indices(10, 10), (0..10).collect::<Vec<_>>());
        assert_eq!(uniform_keep_indices(5, 1), vec![0]);
        let idx = uniform_keep_indices(101, 11);
        assert_eq!(idx[0], 0);
        assert_eq!(*idx.last().unwrap(), 100);
        assert!(idx.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(idx.len(), 11);
    }

    fn big_span() -> Span {
        let d = |t: f64| Detection {
            t,
            bbox: bx(0.1, 0.1, 0.2, 0.2),
            z: vec![0.0],
            pseudo_label: None,
        };
        let mk = |id: u64, n: usize| Track {
            track_id: id,
            shot_index: 0,
            source_class: SourceClass::Person,
            detections: (0..n).map(|i| d(i as f64 * 0.1)).collect(),
        };
        Span {
            video_id: "v".into(),
            movie_id: "m".into(),
            start: 0.0,
            length: 60.0,
            tracks: vec![mk(0, 40), mk(1, 20), mk(2, 10)],
        }
    }

    #[test]
    fn truncation_is_proportional_keeps_endpoints_and_is_idempotent() {
        let span = big_span(); // 70 detections
        let out = truncate_span(&span, 36).unwrap(); // budget 35 = half
        assert_eq!(count_tokens(&out, true), 36);
        assert_eq!(out.tracks[0].detections.len(), 20);
        assert_eq!(out.tracks[1].detections.len(), 10);
        assert_eq!(out.tracks[2].detections.len(), 5);
        for (tr, orig) in out.tracks.iter().zip(&span.tracks) {
            assert_eq!(tr.detections[0].t, orig.detections[0].t);
            assert_eq!(
                tr.detections.last().unwrap().t,
                orig.detections.last().unwrap().t
            );
        }
        let again = truncate_span(&out, 36).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn truncation_under_cap_is_identity() {
        let span = big_span();
        let out = truncate_span(&span, 256).unwrap();
        assert_eq!(out, span);
    }

    #[test]
    fn full_preprocess_pipeline_produces_a_valid_video() {
        // two scenes of 3 s each, one walker per scene region
        let mut frames = Vec::new();
        let mut sigs = Vec::new();
        let mut t = 0.0;
        while t < 6.0 {
            let dx = t * 0.004;
            frames.push(RawFrame {
                t,
                detections: vec![raw(bx(0.1 + dx, 0.1, 0.25 + dx, 0.35))],
            });
            sigs.push(sig(t, usize::from(t >= 3.0)));
            t += 0.5;
        }
        let rv = RawVideo {
            video_id: "demo".into(),
            movie_id: "m".into(),
            length_s: 6.0,
            frames,
            signatures: sigs,
            labels: BTreeMap::new(),
        };
        let video = preprocess_video(&rv).unwrap();
        assert_eq!(video.shots.len(), 2);
        // the single walker crosses the cut, so it must be split in two
        assert_eq!(video.tracks.len(), 2);
        assert_eq!(video.tracks[0].shot_index, 0);
        assert_eq!(video.tracks[1].shot_index, 1);
        video.validate().unwrap();
    }
}

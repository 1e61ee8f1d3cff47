//! Video data model: detection tracks grouped into shots and videos, plus
//! the span windows the model consumes.
//!
//! A video here is one contiguous segment of a movie. Tracks never cross
//! shot boundaries (tracking is per shot); a latent person appearing in
//! several shots shows up as several tracks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates.
/// Invariants: `0 <= left < right <= 1`, `0 <= top < bottom <= 1`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl BBox {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Result<Self> {
        let b = BBox {
            left,
            top,
            right,
            bottom,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.left >= 0.0
            && self.left < self.right
            && self.right <= 1.0
            && self.top >= 0.0
            && self.top < self.bottom
            && self.bottom <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("invalid box {self:?}")))
        }
    }

    pub fn area(&self) -> f64 {
        (self.right - self.left) * (self.bottom - self.top)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.left + self.right),
            0.5 * (self.top + self.bottom),
        )
    }

    /// Geometry feature fed to the spatial projection:
    /// (center x, center y, width, height).
    pub fn spatial_features(&self) -> [f64; 4] {
        let (cx, cy) = self.center();
        [cx, cy, self.right - self.left, self.bottom - self.top]
    }
}

/// Intersection-over-union of two boxes. 0 when disjoint, 1 when identical.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right.min(b.right) - a.left.max(b.left)).max(0.0);
    let ih = (a.bottom.min(b.bottom) - a.top.max(b.top)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// What kind of thing a track follows.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceClass {
    Person,
    Object,
}

/// One detection of a tracked instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Seconds from the start of the video.
    pub t: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Appearance feature vector.
    pub z: Vec<f64>,
    /// Optional pseudo-label distribution over the label vocabulary
    /// (non-negative, sums to 1). Targets for masked-instance training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_label: Option<Vec<f64>>,
}

/// A tracked instance within a single shot.
/// Invariants: at least one detection; timestamps strictly increasing; every
/// detection timestamp lies inside the track's shot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u64,
    /// Index into the owning video's shot list.
    pub shot_index: usize,
    pub source_class: SourceClass,
    pub detections: Vec<Detection>,
}

impl Track {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.detections.is_empty() {
            return Err(Error::Data(format!("{what}: track has no detections")));
        }
        for w in self.detections.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::Data(format!(
                    "{what}: timestamps not strictly increasing ({} then {})",
                    w[0].t, w[1].t
                )));
            }
        }
        for d in &self.detections {
            d.bbox.validate()?;
            if let Some(p) = &d.pseudo_label {
                validate_distribution(p, what)?;
            }
        }
        Ok(())
    }

    pub fn start(&self) -> f64 {
        self.detections[0].t
    }

    pub fn end(&self) -> f64 {
        self.detections[self.detections.len() - 1].t
    }
}

/// Non-negative entries summing to 1 within 1e-6.
pub fn validate_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Data(format!("{what}: empty distribution")));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Data(format!("{what}: negative or non-finite mass")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::Data(format!("{what}: distribution sums to {s}")));
    }
    Ok(())
}

/// Half-open time interval `[start, end)` of uniform footage.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shot {
    pub start: f64,
    pub end: f64,
}

impl Shot {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }
}

/// Ground-truth label of a whole-video task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LabelValue {
    Class { index: usize },
    Score { value: f64 },
}

/// A short-term/long-term fusion target: one track whose role is to be
/// recognized, along with the (noisy) per-class probabilities an external
/// short-term model produced for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvaTarget {
    pub track_id: u64,
    pub role: usize,
    pub short_term: Vec<f64>,
}

/// One segment-length video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Video {
    pub video_id: String,
    pub movie_id: String,
    pub length_s: f64,
    /// Consecutive half-open intervals covering `[0, length_s)`.
    pub shots: Vec<Shot>,
    pub tracks: Vec<Track>,
    /// Task name -> label (task vocabulary is corpus-defined).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, LabelValue>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ava_targets: Vec<AvaTarget>,
}

impl Video {
    /// Check shot cover, track/shot containment, id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let what = &self.video_id;
        if self.length_s <= 0.0 {
            return Err(Error::Data(format!("{what}: non-positive length")));
        }
        if self.shots.is_empty() {
            return Err(Error::Data(format!("{what}: no shots")));
        }
        let mut at = 0.0;
        for (i, s) in self.shots.iter().enumerate() {
            if (s.start - at).abs() > 1e-9 || s.end <= s.start {
                return Err(Error::Data(format!(
                    "{what}: shot {i} [{}, {}) breaks the cover at {at}",
                    s.start, s.end
                )));
            }
            at = s.end;
        }
        if (at - self.length_s).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "{what}: shots end at {at}, video length is {}",
                self.length_s
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for tr in &self.tracks {
            if !seen.insert(tr.track_id) {
                return Err(Error::Data(format!(
                    "{what}: duplicate track id {}",
                    tr.track_id
                )));
            }
            tr.validate(&format!("{what} track {}", tr.track_id))?;
            let Some(shot) = self.shots.get(tr.shot_index) else {
                return Err(Error::Data(format!(
                    "{what}: track {} references shot {} of {}",
                    tr.track_id,
                    tr.shot_index,
                    self.shots.len()
                )));
            };
            for d in &tr.detections {
                // end of the last shot is inclusive (video endpoint)
                let inside = shot.contains(d.t)
                    || (tr.shot_index + 1 == self.shots.len() && (d.t - shot.end).abs() < 1e-9);
                if !inside {
                    return Err(Error::Data(format!(
                        "{what}: track {} detection at {} outside shot [{}, {})",
                        tr.track_id, d.t, shot.start, shot.end
                    )));
                }
            }
        }
        for t in &self.ava_targets {
            if !self.tracks.iter().any(|tr| tr.track_id == t.track_id) {
                return Err(Error::Data(format!(
                    "{what}: fusion target references missing track {}",
                    t.track_id
                )));
            }
            validate_distribution(&t.short_term, &format!("{what} short_term"))?;
        }
        Ok(())
    }

    pub fn track(&self, id: u64) -> Option<&Track> {
        self.tracks.iter().find(|t| t.track_id == id)
    }
}

/// A whole corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for v in &self.videos {
            if !seen.insert(v.video_id.clone()) {
                return Err(Error::Data(format!("duplicate video id {}", v.video_id)));
            }
            v.validate()?;
        }
        Ok(())
    }

    pub fn video(&self, id: &str) -> Option<&Video> {
        self.videos.iter().find(|v| v.video_id == id)
    }

    /// Distinct movie ids in first-appearance order.
    pub fn movie_ids(&self) -> Vec<String> {
        let mut out = Vec::new();
        for v in &self.videos {
            if !out.contains(&v.movie_id) {
                out.push(v.movie_id.clone());
            }
        }
        out
    }
}

/// A contiguous time window of one video with the track pieces that fall
/// inside it. Spans own clipped copies of their tracks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub video_id: String,
    pub movie_id: String,
    pub start: f64,
    pub length: f64,
    pub tracks: Vec<Track>,
}

impl Span {
    pub fn end(&self) -> f64 {
        self.start + self.length
    }

    pub fn n_detections(&self) -> usize {
        self.tracks.iter().map(|t| t.detections.len()).sum()
    }

    /// Shot indexes present, ascending; a track's relative shot order is its
    /// position in this list.
    pub fn shot_order(&self) -> Vec<usize> {
        let mut shots: Vec<usize> = self.tracks.iter().map(|t| t.shot_index).collect();
        shots.sort_unstable();
        shots.dedup();
        shots
    }

    pub fn validate(&self) -> Result<()> {
        if self.length <= 0.0 {
            return Err(Error::Data(format!(
                "span of {} has non-positive length",
                self.video_id
            )));
        }
        for t in &self.tracks {
            t.validate(&format!("span of {} track {}", self.video_id, t.track_id))?;
            for d in &t.detections {
                if d.t < self.start - 1e-9 || d.t > self.end() + 1e-9 {
                    return Err(Error::Data(format!(
                        "span [{}, {}) of {} holds a detection at {}",
                        self.start,
                        self.end(),
                        self.video_id,
                        d.t
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(l: f64, t: f64, r: f64, b: f64) -> BBox {
        BBox::new(l, t, r, b).unwrap()
    }

    #[test]
    fn iou_identical_boxes_is_one() {
        let a = bx(0.1, 0.1, 0.5, 0.5);
        assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_disjoint_boxes_is_zero() {
        let a = bx(0.0, 0.0, 0.2, 0.2);
        let b = bx(0.5, 0.5, 0.9, 0.9);
        assert_eq!(iou(&a, &b), 0.0);
        // touching edges count as disjoint (zero-width intersection)
        let c = bx(0.2, 0.0, 0.4, 0.2);
        assert_eq!(iou(&a, &c), 0.0);
    }

    #[test]
    fn iou_unit_square_shifted_by_half_is_one_third() {
        // Two equal squares offset by half their width: intersection is
        // half a square, union is 1.5 squares, IoU = 1/3.
        let a = bx(0.0, 0.0, 0.4, 0.4);
        let b = bx(0.2, 0.0, 0.6, 0.4);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_bounded() {
        let a = bx(0.05, 0.1, 0.45, 0.8);
        let b = bx(0.3, 0.05, 0.7, 0.6);
        let ab = iou(&a, &b);
        assert_eq!(ab, iou(&b, &a));
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn bbox_rejects_inverted_or_out_of_range() {
        assert!(BBox::new(0.5, 0.1, 0.4, 0.9).is_err());
        assert!(BBox::new(0.1, 0.9, 0.4, 0.8).is_err());
        assert!(BBox::new(-0.1, 0.1, 0.4, 0.9).is_err());
        assert!(BBox::new(0.1, 0.1, 1.1, 0.9).is_err());
        assert!(BBox::new(0.1, 0.2, 0.3, 0.4).is_ok());
    }

    #[test]
    fn track_validation_catches_time_order() {
        let d = |t: f64| Detection {
            t,
            bbox: bx(0.1, 0.1, 0.2, 0.2),
            z: vec![0.0],
            pseudo_label: None,
        };
        let tr = Track {
            track_id: 1,
            shot_index: 0,
            source_class: SourceClass::Person,
            detections: vec![d(1.0), d(1.0)],
        };
        assert!(tr.validate("t").is_err());
        let tr = Track {
            detections: vec![d(1.0), d(2.0)],
            ..tr
        };
        assert!(tr.validate("t").is_ok());
        let tr = Track {
            detections: vec![],
            ..tr
        };
        assert!(tr.validate("t").is_err());
    }

    #[test]
    fn video_validation_requires_shot_cover() {
        let mut v = Video {
            video_id: "v0".into(),
            movie_id: "m0".into(),
            length_s: 10.0,
            shots: vec![Shot { start: 0.0, end: 4.0 }, Shot { start: 4.0, end: 10.0 }],
            tracks: vec![],
            labels: BTreeMap::new(),
            ava_targets: vec![],
        };
        assert!(v.validate().is_ok());
        v.shots[1].start = 5.0; // gap
        assert!(v.validate().is_err());
        v.shots[1].start = 4.0;
        v.shots[1].end = 9.0; // does not reach video end
        assert!(v.validate().is_err());
    }

    #[test]
    fn video_validation_checks_track_shot_containment() {
        let v = Video {
            video_id: "v0".into(),
            movie_id: "m0".into(),
            length_s: 10.0,
            shots: vec![Shot { start: 0.0, end: 4.0 }, Shot { start: 4.0, end: 10.0 }],
            tracks: vec![Track {
                track_id: 7,
                shot_index: 0,
                source_class: SourceClass::Person,
                detections: vec![Detection {
                    t: 5.0, // inside shot 1, not shot 0
                    bbox: bx(0.1, 0.1, 0.2, 0.2),
                    z: vec![0.0],
                    pseudo_label: None,
                }],
            }],
            labels: BTreeMap::new(),
            ava_targets: vec![],
        };
        assert!(v.validate().is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(validate_distribution(&[0.25; 4], "d").is_ok());
        assert!(validate_distribution(&[0.5, 0.6], "d").is_err());
        assert!(validate_distribution(&[-0.1, 1.1], "d").is_err());
        assert!(validate_distribution(&[], "d").is_err());
    }

    #[test]
    fn span_shot_order_is_sorted_distinct() {
        let d = Detection {
            t: 1.0,
            bbox: bx(0.1, 0.1, 0.2, 0.2),
            z: vec![0.0],
            pseudo_label: None,
        };
        let mk = |id: u64, shot: usize| Track {
            track_id: id,
            shot_index: shot,
            source_class: SourceClass::Person,
            detections: vec![d.clone()],
        };
        let span = Span {
            video_id: "v".into(),
            movie_id: "m".into(),
            start: 0.0,
            length: 5.0,
            tracks: vec![mk(1, 4), mk(2, 2), mk(3, 4), mk(4, 9)],
        };
        assert_eq!(span.shot_order(), vec![2, 4, 9]);
    }
}

//! Persistence: key=value config text, the line-delimited corpus and
//! raw-stream formats, line-delimited metrics, and the binary checkpoint.
//!
//! Text formats are diffable on purpose; checkpoints are binary because
//! training state must survive a round trip bit-exactly. Every loader
//! reports failures with the 1-based line (or byte-level cause) so a broken
//! file can be fixed by hand.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AvaTarget, BBox, Dataset, Detection, LabelValue, SourceClass, Track, Video};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ModelParams;
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::preprocess::RawVideo;
use crate::pretrain::TraceRecord;
use crate::rng::{fnv1a, substream};

// ---------------------------------------------------------------------------
// key = value config text

/// Render a key set as sorted `key = value` lines.
pub fn kv_to_string(kv: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in kv {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// Parse `key = value` lines. Blank lines and `#` comments are allowed;
/// duplicate or malformed keys are not. `path` only labels errors.
pub fn kv_from_str(text: &str, path: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |message: String| Error::Load {
            path: path.into(),
            line: i + 1,
            message,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(at("empty key".into()));
        }
        if kv.insert(k.to_string(), v.to_string()).is_some() {
            return Err(at(format!("duplicate key {k:?}")));
        }
    }
    Ok(kv)
}

pub fn load_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    kv_from_str(&text, &path.display().to_string())
}

pub fn save_kv(path: &Path, kv: &BTreeMap<String, String>) -> Result<()> {
    Ok(fs::write(path, kv_to_string(kv))?)
}

// ---------------------------------------------------------------------------
// corpus files: one JSON record per line

/// One corpus line. `kind` discriminates; wide records (detections) carry
/// their own video and track references so a file is resolvable in one pass.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Video {
        video_id: String,
        movie_id: String,
        length_s: f64,
    },
    Shot {
        video_id: String,
        start: f64,
        end: f64,
    },
    Track {
        video_id: String,
        track_id: u64,
        shot_index: usize,
        source_class: SourceClass,
    },
    Detection {
        video_id: String,
        track_id: u64,
        t: f64,
        #[serde(rename = "box")]
        bbox: BBox,
        z: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pseudo_label: Option<Vec<f64>>,
    },
    Label(LabelRecord),
}

/// Whole-video task labels and per-track fusion targets share the `label`
/// kind; the field set tells them apart.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LabelRecord {
    Task {
        video_id: String,
        name: String,
        value: LabelValue,
    },
    Fusion {
        video_id: String,
        track_id: u64,
        role: usize,
        short_term: Vec<f64>,
    },
}

/// Serialize a dataset in canonical order: per video its header, shots,
/// tracks, detections (grouped by track), task labels, then fusion targets.
pub fn corpus_to_string(dataset: &Dataset) -> Result<String> {
    let mut out = String::new();
    let mut push = |r: &Record| -> Result<()> {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Data(format!("unserializable corpus record: {e}")))?;
        out.push_str(&line);
        out.push('\n');
        Ok(())
    };
    for v in &dataset.videos {
        push(&Record::Video {
            video_id: v.video_id.clone(),
            movie_id: v.movie_id.clone(),
            length_s: v.length_s,
        })?;
        for s in &v.shots {
            push(&Record::Shot {
                video_id: v.video_id.clone(),
                start: s.start,
                end: s.end,
            })?;
        }
        for t in &v.tracks {
            push(&Record::Track {
                video_id: v.video_id.clone(),
                track_id: t.track_id,
                shot_index: t.shot_index,
                source_class: t.source_class,
            })?;
        }
        for t in &v.tracks {
            for d in &t.detections {
                push(&Record::Detection {
                    video_id: v.video_id.clone(),
                    track_id: t.track_id,
                    t: d.t,
                    bbox: d.bbox,
                    z: d.z.clone(),
                    pseudo_label: d.pseudo_label.clone(),
                })?;
            }
        }
        for (name, value) in &v.labels {
            push(&Record::Label(LabelRecord::Task {
                video_id: v.video_id.clone(),
                name: name.clone(),
                value: value.clone(),
            }))?;
        }
        for a in &v.ava_targets {
            push(&Record::Label(LabelRecord::Fusion {
                video_id: v.video_id.clone(),
                track_id: a.track_id,
                role: a.role,
                short_term: a.short_term.clone(),
            }))?;
        }
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, dataset: &Dataset) -> Result<()> {
    Ok(fs::write(path, corpus_to_string(dataset)?)?)
}

/// Parse and validate a corpus. Single pass: a record may only reference a
/// video (and for detections, a track) introduced on an earlier line.
pub fn corpus_from_str(text: &str, path: &str) -> Result<Dataset> {
    let mut videos: Vec<Video> = Vec::new();
    let mut video_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut video_line: Vec<usize> = Vec::new();
    let mut track_index: Vec<BTreeMap<u64, usize>> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let at = |message: String| Error::Load {
            path: path.into(),
            line: i + 1,
            message,
        };
        if raw.trim().is_empty() {
            return Err(at("blank line in record stream".into()));
        }
        let rec: Record = serde_json::from_str(raw).map_err(|e| at(e.to_string()))?;
        let resolve = |id: &str| -> Result<usize> {
            video_index
                .get(id)
                .copied()
                .ok_or_else(|| at(format!("record references unknown video {id:?}")))
        };
        match rec {
            Record::Video {
                video_id,
                movie_id,
                length_s,
            } => {
                if video_index.contains_key(&video_id) {
                    return Err(at(format!("duplicate video {video_id:?}")));
                }
                video_index.insert(video_id.clone(), videos.len());
                video_line.push(i + 1);
                track_index.push(BTreeMap::new());
                videos.push(Video {
                    video_id,
                    movie_id,
                    length_s,
                    shots: Vec::new(),
                    tracks: Vec::new(),
                    labels: BTreeMap::new(),
                    ava_targets: Vec::new(),
                });
            }
            Record::Shot {
                video_id,
                start,
                end,
            } => {
                let vi = resolve(&video_id)?;
                videos[vi].shots.push(crate::data::Shot { start, end });
            }
            Record::Track {
                video_id,
                track_id,
                shot_index,
                source_class,
            } => {
                let vi = resolve(&video_id)?;
                if track_index[vi].contains_key(&track_id) {
                    return Err(at(format!(
                        "duplicate track {track_id} in video {video_id:?}"
                    )));
                }
                track_index[vi].insert(track_id, videos[vi].tracks.len());
                videos[vi].tracks.push(Track {
                    track_id,
                    shot_index,
                    source_class,
                    detections: Vec::new(),
                });
            }
            Record::Detection {
                video_id,
                track_id,
                t,
                bbox,
                z,
                pseudo_label,
            } => {
                let vi = resolve(&video_id)?;
                let ti = *track_index[vi].get(&track_id).ok_or_else(|| {
                    at(format!(
                        "detection references unknown track {track_id} in video {video_id:?}"
                    ))
                })?;
                videos[vi].tracks[ti].detections.push(Detection {
                    t,
                    bbox,
                    z,
                    pseudo_label,
                });
            }
            Record::Label(LabelRecord::Task {
                video_id,
                name,
                value,
            }) => {
                let vi = resolve(&video_id)?;
                if videos[vi].labels.insert(name.clone(), value).is_some() {
                    return Err(at(format!(
                        "duplicate label {name:?} for video {video_id:?}"
                    )));
                }
            }
            Record::Label(LabelRecord::Fusion {
                video_id,
                track_id,
                role,
                short_term,
            }) => {
                let vi = resolve(&video_id)?;
                videos[vi].ava_targets.push(AvaTarget {
                    track_id,
                    role,
                    short_term,
                });
            }
        }
    }

    for (vi, v) in videos.iter().enumerate() {
        v.validate().map_err(|e| Error::Load {
            path: path.into(),
            line: video_line[vi],
            message: e.to_string(),
        })?;
    }
    let dataset = Dataset { videos };
    dataset.validate()?;
    Ok(dataset)
}

pub fn load_corpus(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    corpus_from_str(&text, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// raw detection streams: one JSON video per line

pub fn raw_streams_to_string(videos: &[RawVideo]) -> Result<String> {
    let mut out = String::new();
    for v in videos {
        let line = serde_json::to_string(v)
            .map_err(|e| Error::Data(format!("unserializable raw video: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_raw_streams(path: &Path, videos: &[RawVideo]) -> Result<()> {
    Ok(fs::write(path, raw_streams_to_string(videos)?)?)
}

pub fn raw_streams_from_str(text: &str, path: &str) -> Result<Vec<RawVideo>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let at = |message: String| Error::Load {
            path: path.into(),
            line: i + 1,
            message,
        };
        if raw.trim().is_empty() {
            return Err(at("blank line in record stream".into()));
        }
        let v: RawVideo = serde_json::from_str(raw).map_err(|e| at(e.to_string()))?;
        out.push(v);
    }
    Ok(out)
}

pub fn load_raw_streams(path: &Path) -> Result<Vec<RawVideo>> {
    let text = fs::read_to_string(path)?;
    raw_streams_from_str(&text, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// metrics: one JSON record per line

/// One logged measurement: either a training step or an evaluation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricRecord {
    Step {
        step: u64,
        metric: String,
        value: f64,
    },
    Split {
        split: String,
        metric: String,
        value: f64,
    },
}

impl From<&TraceRecord> for MetricRecord {
    fn from(r: &TraceRecord) -> Self {
        MetricRecord::Step {
            step: r.step,
            metric: r.metric.clone(),
            value: r.value,
        }
    }
}

pub fn metrics_to_string(records: &[MetricRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Data(format!("unserializable metric: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    Ok(fs::write(path, metrics_to_string(records)?)?)
}

pub fn metrics_from_str(text: &str, path: &str) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let at = |message: String| Error::Load {
            path: path.into(),
            line: i + 1,
            message,
        };
        if raw.trim().is_empty() {
            return Err(at("blank line in record stream".into()));
        }
        let r: MetricRecord = serde_json::from_str(raw).map_err(|e| at(e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path)?;
    metrics_from_str(&text, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// binary checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"OBJTX1";

fn scalar_width(dtype: &str) -> usize {
    if dtype == "f32" {
        4
    } else {
        8
    }
}

/// Layout: magic, length-prefixed config text (model keys plus `precision`),
/// entry count, then per parameter its name, shape, and raw little-endian
/// scalars, and finally an FNV-1a checksum of every preceding byte.
pub fn checkpoint_bytes<S: Scalar>(params: &ModelParams<S>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);

    let mut kv = params.config.to_kv();
    kv.insert("precision".into(), S::DTYPE.into());
    let config = kv_to_string(&kv);
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());

    out.extend_from_slice(&(params.registry.len() as u64).to_le_bytes());
    for (_, e) in params.registry.iter() {
        out.extend_from_slice(&(e.name.len() as u64).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.rank() as u64).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.value.data() {
            if S::DTYPE == "f32" {
                out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
    }

    let sum = fnv1a(0, &out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint<S: Scalar>(path: &Path, params: &ModelParams<S>) -> Result<()> {
    Ok(fs::write(path, checkpoint_bytes(params)?)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn checkpoint_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<ModelParams<S>> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 {
        return Err(Error::Data(format!(
            "checkpoint too short ({} bytes)",
            bytes.len()
        )));
    }
    let (head, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = fnv1a(0, head);
    if stored != computed {
        return Err(Error::Data(format!(
            "checkpoint checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
        )));
    }

    let mut c = Cursor {
        bytes: head,
        pos: 0,
    };
    if c.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }

    let config_len = c.u64()? as usize;
    let config_text = std::str::from_utf8(c.take(config_len)?)
        .map_err(|_| Error::Data("checkpoint config block is not UTF-8".into()))?;
    let mut kv = kv_from_str(config_text, "<checkpoint config>")?;
    let precision = kv
        .remove("precision")
        .ok_or_else(|| Error::Data("checkpoint config lacks a precision key".into()))?;
    if precision != S::DTYPE {
        return Err(Error::Data(format!(
            "checkpoint stores {precision} parameters, expected {}",
            S::DTYPE
        )));
    }
    let config = ModelConfig::from_kv(&kv)?;

    let n_entries = c.u64()? as usize;
    let width = scalar_width(S::DTYPE);
    let mut entries: Vec<(String, Vec<usize>, Vec<S>)> = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = c.u64()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Data("checkpoint entry name is not UTF-8".into()))?
            .to_string();
        let rank = c.u64()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64()? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = c.take(numel * width)?;
        let data: Vec<S> = raw
            .chunks_exact(width)
            .map(|ch| {
                if width == 4 {
                    S::from_f64(f32::from_le_bytes(ch.try_into().expect("4 bytes")) as f64)
                } else {
                    S::from_f64(f64::from_le_bytes(ch.try_into().expect("8 bytes")))
                }
            })
            .collect();
        entries.push((name, dims, data));
    }
    if c.pos != head.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} trailing bytes after the last entry",
            head.len() - c.pos
        )));
    }

    // rebuild the parameter structure, then overwrite every value by name
    let mut rng = substream(0, "checkpoint");
    let mut params = ModelParams::<S>::new(&config, &mut rng)?;
    if let Some((_, dims, _)) = entries.iter().find(|(n, _, _)| n == "head.task.w") {
        if dims.len() != 2 {
            return Err(Error::Data("head.task.w must be a matrix".into()));
        }
        params.add_task_head(dims[1], &mut rng)?;
    }
    if entries.len() != params.registry.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} parameters, model wants {}",
            entries.len(),
            params.registry.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for (name, dims, data) in entries {
        if !seen.insert(name.clone()) {
            return Err(Error::Data(format!("duplicate checkpoint entry {name:?}")));
        }
        let id = params
            .registry
            .find(&name)
            .ok_or_else(|| Error::Data(format!("unexpected checkpoint entry {name:?}")))?;
        if params.registry.value(id).shape() != dims.as_slice() {
            return Err(Error::Data(format!(
                "checkpoint entry {name:?} has shape {dims:?}, model wants {:?}",
                params.registry.value(id).shape()
            )));
        }
        params.registry.get_mut(id).value = Tensor::from_vec(&dims, data)?;
    }
    Ok(params)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ModelParams<S>> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

/// Read the `precision` key out of a checkpoint header so a caller can pick
/// the scalar type before loading. Checksum verification stays with the
/// actual load.
pub fn checkpoint_precision(bytes: &[u8]) -> Result<String> {
    let m = CHECKPOINT_MAGIC.len();
    if bytes.len() < m + 8 {
        return Err(Error::Data(format!(
            "checkpoint too short ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..m] != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let config_len =
        u64::from_le_bytes(bytes[m..m + 8].try_into().expect("8 bytes")) as usize;
    let end = m + 8 + config_len;
    if bytes.len() < end {
        return Err(Error::Data("checkpoint truncated inside config block".into()));
    }
    let text = std::str::from_utf8(&bytes[m + 8..end])
        .map_err(|_| Error::Data("checkpoint config block is not UTF-8".into()))?;
    kv_from_str(text, "<checkpoint config>")?
        .remove("precision")
        .ok_or_else(|| Error::Data("checkpoint config lacks a precision key".into()))
}

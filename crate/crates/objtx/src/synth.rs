//! Synthetic corpus generator with controllable long-range structure.
//!
//! Every video is one segment of a movie. The generator plants four kinds of
//! latent structure and emits whole-video labels keyed to them:
//!
//! - `theme`: a per-segment class written into a dedicated block of every
//!   feature vector, so any single detection reveals it.
//! - `role_match`: each segment has two lead instances (marked by a feature
//!   dim) whose roles are drawn from {0, 1}; the label says whether they
//!   match. One detection shows one lead's role at most, so the label needs
//!   two instances to be combined.
//! - `scene_match`: shots carry a latent scene state following a Markov
//!   chain; background instances take the scene's role most of the time.
//!   The label compares the first and last shot's states, so it needs
//!   cross-shot aggregation. First/last agreement is forced to a fair coin
//!   so the label is balanced.
//! - `scene_share`: regression, the fraction of shots in scene state 0.
//!
//! Pseudo-labels are smoothed role one-hots. Fusion targets are background
//! tracks with noisy short-term role distributions, so the surrounding shot
//! carries information the short-term prediction lacks. Compatibility
//! ground truth is segment (= video) identity.
//!
//! Generation is a pure function of the config; each movie draws from its
//! own substream.

use std::collections::BTreeMap;

use rand::Rng;

use crate::data::{
    AvaTarget, BBox, Dataset, Detection, LabelValue, Shot, SourceClass, Track, Video,
};
use crate::error::{Error, Result};
use crate::preprocess::{FrameSignature, RawDetection, RawFrame, RawVideo};
use crate::rng::{sample_distinct, standard_normal, substream_indexed, SubRng};

/// Theme classes (the single-detection task vocabulary).
pub const N_THEMES: usize = 4;
/// Latent scene states for the shot Markov chain.
pub const N_SCENES: usize = 3;
/// Roles 0 and 1 belong to leads; background roles start here.
pub const LEAD_ROLE_COUNT: usize = 2;
/// Weight of a role's one-hot inside the feature vector.
pub const ROLE_SCALE: f64 = 2.0;
/// Weight of the theme one-hot block.
pub const THEME_SCALE: f64 = 2.0;
/// Value of the lead-marker dimension for lead instances.
pub const LEAD_MARKER_SCALE: f64 = 3.0;
/// Probability a background instance takes its shot's scene role.
pub const SCENE_ROLE_FIDELITY: f64 = 0.85;
/// Label smoothing of pseudo-label distributions.
pub const PSEUDO_SMOOTHING: f64 = 0.05;
/// Probability the scene state repeats from shot to shot.
pub const SCENE_STAY_PROB: f64 = 0.5;
/// Short-term logit strength on the true role.
pub const SHORT_TERM_SIGNAL: f64 = 1.0;
/// Short-term logit noise; 0.5 puts top-1 accuracy near 0.64 for 12 roles.
pub const SHORT_TERM_NOISE: f64 = 0.5;
/// Fusion targets sampled per video.
pub const FUSION_TARGETS_PER_VIDEO: usize = 4;
const SHOT_MIN_S: f64 = 8.0;
const SHOT_MAX_S: f64 = 14.0;

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub n_movies: usize,
    pub segments_per_movie: usize,
    pub segment_length_s: f64,
    /// Instances alive in each shot (2 leads + background).
    pub instances_per_segment: usize,
    /// Detections per track.
    pub detections_per_instance: usize,
    pub d_z: usize,
    pub d_label: usize,
    /// Width of the theme block inside the feature vector.
    pub theme_dim: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_movies: 40,
            segments_per_movie: 4,
            segment_length_s: 120.0,
            instances_per_segment: 6,
            detections_per_instance: 3,
            d_z: 64,
            d_label: 12,
            theme_dim: 8,
            noise_scale: 0.25,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_movies == 0
            || self.segments_per_movie == 0
            || self.instances_per_segment == 0
            || self.detections_per_instance == 0
            || self.d_z == 0
            || self.d_label == 0
            || self.theme_dim == 0
        {
            return Err(Error::Config("generator counts must be positive".into()));
        }
        if !(self.segment_length_s > 0.0) {
            return Err(Error::Config(format!(
                "segment length {} must be positive",
                self.segment_length_s
            )));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::Config(format!(
                "noise scale {} must be finite and non-negative",
                self.noise_scale
            )));
        }
        if self.instances_per_segment < 3 {
            return Err(Error::Config(
                "need at least 3 instances per segment (2 leads + background)".into(),
            ));
        }
        if self.d_label < LEAD_ROLE_COUNT + N_SCENES {
            return Err(Error::Config(format!(
                "d_label {} too small for {} lead roles + {} scene roles",
                self.d_label,
                LEAD_ROLE_COUNT,
                N_SCENES
            )));
        }
        if self.theme_dim < N_THEMES {
            return Err(Error::Config(format!(
                "theme_dim {} cannot hold {N_THEMES} theme classes",
                self.theme_dim
            )));
        }
        if self.d_z < self.d_label + self.theme_dim + 1 {
            return Err(Error::Config(format!(
                "d_z {} cannot hold role block {} + theme block {} + marker",
                self.d_z, self.d_label, self.theme_dim
            )));
        }
        Ok(())
    }

    /// Canonical key=value form (sorted keys).
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        kv.insert("n_movies".into(), self.n_movies.to_string());
        kv.insert(
            "segments_per_movie".into(),
            self.segments_per_movie.to_string(),
        );
        kv.insert(
            "segment_length_s".into(),
            format!("{:?}", self.segment_length_s),
        );
        kv.insert(
            "instances_per_segment".into(),
            self.instances_per_segment.to_string(),
        );
        kv.insert(
            "detections_per_instance".into(),
            self.detections_per_instance.to_string(),
        );
        kv.insert("d_z".into(), self.d_z.to_string());
        kv.insert("d_label".into(), self.d_label.to_string());
        kv.insert("theme_dim".into(), self.theme_dim.to_string());
        kv.insert("noise_scale".into(), format!("{:?}", self.noise_scale));
        kv.insert("seed".into(), self.seed.to_string());
        kv
    }

    /// Parse the canonical form. Unknown keys are rejected.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = GenConfig::default();
        for (k, v) in kv {
            let bad = || Error::Config(format!("bad value {v:?} for generator key {k:?}"));
            match k.as_str() {
                "n_movies" => cfg.n_movies = v.parse().map_err(|_| bad())?,
                "segments_per_movie" => cfg.segments_per_movie = v.parse().map_err(|_| bad())?,
                "segment_length_s" => cfg.segment_length_s = v.parse().map_err(|_| bad())?,
                "instances_per_segment" => {
                    cfg.instances_per_segment = v.parse().map_err(|_| bad())?
                }
                "detections_per_instance" => {
                    cfg.detections_per_instance = v.parse().map_err(|_| bad())?
                }
                "d_z" => cfg.d_z = v.parse().map_err(|_| bad())?,
                "d_label" => cfg.d_label = v.parse().map_err(|_| bad())?,
                "theme_dim" => cfg.theme_dim = v.parse().map_err(|_| bad())?,
                "noise_scale" => cfg.noise_scale = v.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                other => {
                    return Err(Error::Config(format!("unknown generator key {other:?}")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One track's latent assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackScript {
    pub track_id: u64,
    pub role: usize,
    pub lead: bool,
}

/// One shot's latent state and cast.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotScript {
    pub shot: Shot,
    pub scene: usize,
    pub tracks: Vec<TrackScript>,
}

/// The latent structure behind one generated video, kept outside the corpus
/// so tests can consult ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentScript {
    pub video_id: String,
    pub theme: usize,
    /// Theme one-hot block as written into every feature vector.
    pub theme_vector: Vec<f64>,
    pub shots: Vec<ShotScript>,
}

/// Generated corpus plus its scripts.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub config: GenConfig,
    pub dataset: Dataset,
    pub scripts: BTreeMap<String, LatentScript>,
}

/// Pseudo-label for a role: one-hot smoothed by `PSEUDO_SMOOTHING`.
pub fn smoothed_role_distribution(role: usize, d_label: usize) -> Vec<f64> {
    let mut p = vec![PSEUDO_SMOOTHING / d_label as f64; d_label];
    p[role] += 1.0 - PSEUDO_SMOOTHING;
    p
}

/// The noiseless feature vector for a track's latent assignment: role one-hot
/// block, theme one-hot block, lead marker, zeros elsewhere.
pub fn base_feature(cfg: &GenConfig, role: usize, theme: usize, lead: bool) -> Vec<f64> {
    let mut z = vec![0.0; cfg.d_z];
    z[role] = ROLE_SCALE;
    z[cfg.d_label + theme] = THEME_SCALE;
    if lead {
        z[cfg.d_label + cfg.theme_dim] = LEAD_MARKER_SCALE;
    }
    z
}

fn softmax_inplace(v: &mut [f64]) {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

fn shot_schedule(length_s: f64, rng: &mut SubRng) -> Vec<Shot> {
    let mut shots = Vec::new();
    let mut at = 0.0;
    loop {
        let len = rng.gen_range(SHOT_MIN_S..SHOT_MAX_S);
        if at + len + SHOT_MIN_S >= length_s {
            shots.push(Shot {
                start: at,
                end: length_s,
            });
            return shots;
        }
        shots.push(Shot {
            start: at,
            end: at + len,
        });
        at += len;
    }
}

fn scene_chain(n_shots: usize, rng: &mut SubRng) -> Vec<usize> {
    let mut scenes = Vec::with_capacity(n_shots);
    let mut cur = rng.gen_range(0..N_SCENES);
    scenes.push(cur);
    for _ in 1..n_shots {
        if !rng.gen_bool(SCENE_STAY_PROB) {
            cur = (cur + rng.gen_range(1..N_SCENES)) % N_SCENES;
        }
        scenes.push(cur);
    }
    // force first/last agreement to a fair coin so scene_match is balanced
    if n_shots >= 2 {
        if rng.gen_bool(0.5) {
            scenes[n_shots - 1] = scenes[0];
        } else if scenes[n_shots - 1] == scenes[0] {
            scenes[n_shots - 1] = (scenes[0] + rng.gen_range(1..N_SCENES)) % N_SCENES;
        }
    }
    scenes
}

fn background_role(scene: usize, d_label: usize, rng: &mut SubRng) -> usize {
    if rng.gen_bool(SCENE_ROLE_FIDELITY) {
        return LEAD_ROLE_COUNT + scene;
    }
    // uniform over the other background roles
    let n_bg = d_label - LEAD_ROLE_COUNT;
    let mut pick = rng.gen_range(0..n_bg - 1);
    if pick >= scene {
        pick += 1;
    }
    LEAD_ROLE_COUNT + pick
}

/// A jittered box inside grid cell `index` (cells tile the unit square).
fn cell_box(index: usize, grid: usize, rng: &mut SubRng) -> BBox {
    let g = grid as f64;
    let cx0 = (index % grid) as f64 / g;
    let cy0 = (index / grid) as f64 / g;
    // center jitters inside the middle of the cell; box stays well inside
    let half = 0.22 / g;
    let cx = cx0 + 0.5 / g + rng.gen_range(-0.15..0.15) / g;
    let cy = cy0 + 0.5 / g + rng.gen_range(-0.15..0.15) / g;
    BBox::new(cx - half, cy - half, cx + half, cy + half).expect("cell geometry keeps boxes valid")
}

fn generate_video(
    cfg: &GenConfig,
    video_id: &str,
    movie_id: &str,
    rng: &mut SubRng,
) -> (Video, LatentScript) {
    let shots = shot_schedule(cfg.segment_length_s, rng);
    let scenes = scene_chain(shots.len(), rng);
    let theme = rng.gen_range(0..N_THEMES);
    let mut theme_vector = vec![0.0; cfg.theme_dim];
    theme_vector[theme] = THEME_SCALE;

    let lead_roles = {
        let r0 = rng.gen_range(0..LEAD_ROLE_COUNT);
        let r1 = if rng.gen_bool(0.5) {
            r0
        } else {
            LEAD_ROLE_COUNT - 1 - r0
        };
        [r0, r1]
    };

    let grid = (cfg.instances_per_segment as f64).sqrt().ceil() as usize;
    let mut tracks = Vec::new();
    let mut shot_scripts = Vec::new();
    let mut background_ids = Vec::new();
    let mut next_id = 0u64;

    for (shot_index, (&shot, &scene)) in shots.iter().zip(&scenes).enumerate() {
        let mut cast = Vec::with_capacity(cfg.instances_per_segment);
        for i in 0..cfg.instances_per_segment {
            let lead = i < 2;
            let role = if lead {
                lead_roles[i]
            } else {
                background_role(scene, cfg.d_label, rng)
            };
            let source_class = if lead || rng.gen_bool(0.5) {
                SourceClass::Person
            } else {
                SourceClass::Object
            };
            let track_id = next_id;
            next_id += 1;
            if !lead {
                background_ids.push(track_id);
            }

            let base = base_feature(cfg, role, theme, lead);
            let pseudo = smoothed_role_distribution(role, cfg.d_label);
            let n = cfg.detections_per_instance;
            let spacing = (shot.end - shot.start) / n as f64;
            let mut detections = Vec::with_capacity(n);
            for j in 0..n {
                let t = shot.start
                    + (j as f64 + 0.5) * spacing
                    + rng.gen_range(-0.2..0.2) * spacing;
                let z: Vec<f64> = base
                    .iter()
                    .map(|&b| b + cfg.noise_scale * standard_normal(rng))
                    .collect();
                detections.push(Detection {
                    t,
                    bbox: cell_box(i, grid, rng),
                    z,
                    pseudo_label: Some(pseudo.clone()),
                });
            }
            tracks.push(Track {
                track_id,
                shot_index,
                source_class,
                detections,
            });
            cast.push(TrackScript {
                track_id,
                role,
                lead,
            });
        }
        shot_scripts.push(ShotScript {
            shot,
            scene,
            tracks: cast,
        });
    }

    // fusion targets: background tracks with noisy short-term predictions
    let n_targets = FUSION_TARGETS_PER_VIDEO.min(background_ids.len());
    let picks = sample_distinct(rng, background_ids.len(), n_targets);
    let mut ava_targets = Vec::with_capacity(n_targets);
    for p in picks {
        let track_id = background_ids[p];
        let role = shot_scripts
            .iter()
            .flat_map(|s| &s.tracks)
            .find(|t| t.track_id == track_id)
            .expect("picked from this video")
            .role;
        let mut logits = vec![0.0; cfg.d_label];
        for (k, l) in logits.iter_mut().enumerate() {
            *l = SHORT_TERM_SIGNAL * f64::from(u8::from(k == role))
                + SHORT_TERM_NOISE * standard_normal(rng);
        }
        softmax_inplace(&mut logits);
        ava_targets.push(AvaTarget {
            track_id,
            role,
            short_term: logits,
        });
    }

    let n_shots = scenes.len();
    let scene_share = scenes.iter().filter(|&&s| s == 0).count() as f64 / n_shots as f64;
    let mut labels = BTreeMap::new();
    labels.insert("theme".into(), LabelValue::Class { index: theme });
    labels.insert(
        "role_match".into(),
        LabelValue::Class {
            index: usize::from(lead_roles[0] == lead_roles[1]),
        },
    );
    labels.insert(
        "scene_match".into(),
        LabelValue::Class {
            index: usize::from(scenes[0] == scenes[n_shots - 1]),
        },
    );
    labels.insert(
        "scene_share".into(),
        LabelValue::Score { value: scene_share },
    );

    let video = Video {
        video_id: video_id.into(),
        movie_id: movie_id.into(),
        length_s: cfg.segment_length_s,
        shots,
        tracks,
        labels,
        ava_targets,
    };
    let script = LatentScript {
        video_id: video_id.into(),
        theme,
        theme_vector,
        shots: shot_scripts,
    };
    (video, script)
}

/// Generate the full corpus. Pure: the same config yields the same corpus.
pub fn generate_corpus(cfg: &GenConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut videos = Vec::new();
    let mut scripts = BTreeMap::new();
    for movie in 0..cfg.n_movies {
        let mut rng = substream_indexed(cfg.seed, "corpus", movie as u64);
        let movie_id = format!("m{movie:03}");
        for seg in 0..cfg.segments_per_movie {
            let video_id = format!("{movie_id}v{seg}");
            let (video, script) = generate_video(cfg, &video_id, &movie_id, &mut rng);
            videos.push(video);
            scripts.insert(video_id.clone(), script);
        }
    }
    let dataset = Dataset { videos };
    dataset.validate()?;
    Ok(SynthCorpus {
        config: cfg.clone(),
        dataset,
        scripts,
    })
}

/// Ground-truth question about a generated corpus.
#[derive(Clone, Debug)]
pub enum OracleQuery<'a> {
    /// True pseudo-label distribution of one track.
    MaskedRole { video_id: &'a str, track_id: u64 },
    /// Whether two spans drawn from these videos are compatible.
    Compatible {
        video_a: &'a str,
        video_b: &'a str,
    },
    /// A whole-video task label.
    TaskLabel { video_id: &'a str, task: &'a str },
}

#[derive(Clone, Debug, PartialEq)]
pub enum OracleAnswer {
    Distribution(Vec<f64>),
    Compatible(bool),
    Label(LabelValue),
}

/// Answer a query from the latent script alone. Task labels are recomputed
/// from the script by rules independent of the generator's bookkeeping, so
/// a corpus whose stored labels disagree with its script fails loudly in
/// tests.
pub fn oracle_predict(corpus: &SynthCorpus, query: OracleQuery) -> Result<OracleAnswer> {
    let script_of = |id: &str| {
        corpus
            .scripts
            .get(id)
            .ok_or_else(|| Error::Usage(format!("no generated video {id:?}")))
    };
    match query {
        OracleQuery::MaskedRole { video_id, track_id } => {
            let script = script_of(video_id)?;
            let role = script
                .shots
                .iter()
                .flat_map(|s| &s.tracks)
                .find(|t| t.track_id == track_id)
                .ok_or_else(|| {
                    Error::Usage(format!("no track {track_id} in video {video_id:?}"))
                })?
                .role;
            // independent smoothing arithmetic
            let d = corpus.config.d_label;
            let off = PSEUDO_SMOOTHING / d as f64;
            let p: Vec<f64> = (0..d)
                .map(|k| if k == role { 1.0 - PSEUDO_SMOOTHING + off } else { off })
                .collect();
            Ok(OracleAnswer::Distribution(p))
        }
        OracleQuery::Compatible { video_a, video_b } => {
            script_of(video_a)?;
            script_of(video_b)?;
            Ok(OracleAnswer::Compatible(video_a == video_b))
        }
        OracleQuery::TaskLabel { video_id, task } => {
            let script = script_of(video_id)?;
            let label = match task {
                "theme" => LabelValue::Class {
                    index: script.theme,
                },
                "role_match" => {
                    let leads: Vec<usize> = script.shots[0]
                        .tracks
                        .iter()
                        .filter(|t| t.lead)
                        .map(|t| t.role)
                        .collect();
                    if leads.len() != 2 {
                        return Err(Error::Data(format!(
                            "video {video_id:?} script has {} leads",
                            leads.len()
                        )));
                    }
                    LabelValue::Class {
                        index: usize::from(leads[0] == leads[1]),
                    }
                }
                "scene_match" => {
                    let first = script.shots.first().map(|s| s.scene);
                    let last = script.shots.last().map(|s| s.scene);
                    LabelValue::Class {
                        index: usize::from(first.is_some() && first == last),
                    }
                }
                "scene_share" => {
                    let n = script.shots.len();
                    let zero = script.shots.iter().filter(|s| s.scene == 0).count();
                    LabelValue::Score {
                        value: zero as f64 / n as f64,
                    }
                }
                other => {
                    return Err(Error::Usage(format!("unknown task {other:?}")));
                }
            };
            Ok(OracleAnswer::Label(label))
        }
    }
}

// ── Raw detection streams for preprocessing tests ──────────────────────

/// Settings for the frame-level generator.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGenConfig {
    pub n_shots: usize,
    pub shot_len_s: f64,
    /// Frames per second; `shot_len_s * fps` must be an integer.
    pub fps: f64,
    pub tracks_per_shot: usize,
    pub d_z: usize,
    pub seed: u64,
}

impl Default for RawGenConfig {
    fn default() -> Self {
        RawGenConfig {
            n_shots: 3,
            shot_len_s: 6.0,
            fps: 2.0,
            tracks_per_shot: 3,
            d_z: 4,
            seed: 0,
        }
    }
}

/// Ground truth accompanying a raw stream.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTruth {
    pub shots: Vec<Shot>,
    /// Times of true cuts (start of each shot after the first).
    pub cut_times: Vec<f64>,
    /// True track partition: each inner list is one track's detections as
    /// `(frame index, detection index within frame)`, in time order.
    pub partition: Vec<Vec<(usize, usize)>>,
}

/// Generate a dense raw detection stream whose links and cuts are knowable:
/// boxes sit in disjoint grid cells and drift slowly (within-track IoU stays
/// high, cross-track IoU is zero), consecutive shots use disjoint cells, and
/// frame signatures step at every cut.
pub fn generate_raw_video(cfg: &RawGenConfig) -> Result<(RawVideo, RawTruth)> {
    if cfg.n_shots == 0 || cfg.tracks_per_shot == 0 || cfg.d_z == 0 {
        return Err(Error::Config("raw generator counts must be positive".into()));
    }
    if !(cfg.shot_len_s > 0.0) || !(cfg.fps > 0.0) {
        return Err(Error::Config("shot length and fps must be positive".into()));
    }
    let frames_per_shot = cfg.shot_len_s * cfg.fps;
    if (frames_per_shot - frames_per_shot.round()).abs() > 1e-9 || frames_per_shot < 2.0 {
        return Err(Error::Config(format!(
            "shot_len_s * fps = {frames_per_shot} must be an integer of at least 2"
        )));
    }
    let frames_per_shot = frames_per_shot.round() as usize;
    if cfg.tracks_per_shot > 3 {
        return Err(Error::Config(
            "at most 3 tracks per shot (consecutive shots need disjoint cells)".into(),
        ));
    }

    let mut rng = substream_indexed(cfg.seed, "corpus", u64::MAX);
    let length_s = cfg.shot_len_s * cfg.n_shots as f64;
    let grid = 3usize; // 9 cells; shots cycle through disjoint triples
    let g = grid as f64;
    let half = 0.10 / g; // box half-extent well inside a cell
    // worst-case per-frame IoU with drift d on a box of width 2h is
    // ((1-d/2h)^2) / (2-(1-d/2h)^2); 0.015/g keeps it near 0.75, safely
    // above the 0.5 link threshold
    let walk = 0.015 / g;

    let mut frames = Vec::new();
    let mut signatures = Vec::new();
    let mut partition = Vec::new();
    let mut cut_times = Vec::new();
    let mut shots = Vec::new();

    for s in 0..cfg.n_shots {
        let start = s as f64 * cfg.shot_len_s;
        shots.push(Shot {
            start,
            end: start + cfg.shot_len_s,
        });
        if s > 0 {
            cut_times.push(start);
        }
        let mut hist = vec![0.3 / 8.0; 8];
        hist[s % 8] += 0.7;

        // centers start mid-cell and random-walk inside a safe margin
        let mut centers: Vec<(f64, f64)> = (0..cfg.tracks_per_shot)
            .map(|i| {
                let cell = (s * cfg.tracks_per_shot + i) % (grid * grid);
                (
                    (cell % grid) as f64 / g + 0.5 / g,
                    (cell / grid) as f64 / g + 0.5 / g,
                )
            })
            .collect();
        let cell_origin: Vec<(f64, f64)> = (0..cfg.tracks_per_shot)
            .map(|i| {
                let cell = (s * cfg.tracks_per_shot + i) % (grid * grid);
                ((cell % grid) as f64 / g, (cell / grid) as f64 / g)
            })
            .collect();
        let mut shot_tracks: Vec<Vec<(usize, usize)>> =
            vec![Vec::with_capacity(frames_per_shot); cfg.tracks_per_shot];

        for f in 0..frames_per_shot {
            let frame_index = frames.len();
            let t = start + f as f64 / cfg.fps;
            let mut detections = Vec::with_capacity(cfg.tracks_per_shot);
            for (i, c) in centers.iter_mut().enumerate() {
                if f > 0 {
                    let (ox, oy) = cell_origin[i];
                    c.0 = (c.0 + rng.gen_range(-walk..walk))
                        .clamp(ox + half + 0.02 / g, ox + 1.0 / g - half - 0.02 / g);
                    c.1 = (c.1 + rng.gen_range(-walk..walk))
                        .clamp(oy + half + 0.02 / g, oy + 1.0 / g - half - 0.02 / g);
                }
                detections.push(RawDetection {
                    bbox: BBox::new(c.0 - half, c.1 - half, c.0 + half, c.1 + half)
                        .expect("walk stays inside the cell"),
                    z: (0..cfg.d_z).map(|_| standard_normal(&mut rng)).collect(),
                    pseudo_label: None,
                    source_class: SourceClass::Person,
                });
                shot_tracks[i].push((frame_index, i));
            }
            frames.push(RawFrame { t, detections });
            signatures.push(FrameSignature {
                t,
                hist: hist.clone(),
            });
        }
        partition.extend(shot_tracks);
    }

    let raw = RawVideo {
        video_id: "raw0".into(),
        movie_id: "rawm".into(),
        length_s,
        frames,
        signatures,
        labels: BTreeMap::new(),
    };
    Ok((
        raw,
        RawTruth {
            shots,
            cut_times,
            partition,
        },
    ))
}

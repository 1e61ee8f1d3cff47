//! End-task fine-tuning: dataset splitting, the epoch/batch grid search,
//! evaluation metrics, and pooling baselines trained under the same
//! protocol.
//!
//! Fine-tuning trains the whole model plus a task head on the [CLS]
//! representation. Grid cells are independent runs from the same
//! initialization with per-cell derived seeds; the chosen cell maximizes
//! validation accuracy (classification) or minimizes validation MSE
//! (regression), ties resolved toward smaller epochs, then smaller batch.
//! The test score is computed only for the chosen cell.

use crate::data::{Dataset, LabelValue, Span, Video};
use crate::error::{Error, Result};
use crate::model::embed::embed_tokens;
use crate::model::encoder::encode;
use crate::model::heads::{cross_entropy_node, squared_error_node, task_head};
use crate::model::params::ModelParams;
use crate::numerics::adam::AdamState;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::ops::Mode;
use crate::numerics::registry::{ParamId, ParamRegistry};
use crate::numerics::scalar::Scalar;
use crate::numerics::schedule::lr_schedule;
use crate::numerics::tensor::Tensor;
use crate::preprocess::{clip_span, truncate_span};
use crate::rng::{sample_distinct, substream, substream_indexed, truncated_normal, SubRng};

/// What a task predicts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classification { n_classes: usize },
    Regression,
}

/// A whole-video prediction task, keyed to a label name in the dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
}

impl TaskSpec {
    pub fn classification(name: &str, n_classes: usize) -> Self {
        TaskSpec {
            name: name.into(),
            kind: TaskKind::Classification { n_classes },
        }
    }

    pub fn regression(name: &str) -> Self {
        TaskSpec {
            name: name.into(),
            kind: TaskKind::Regression,
        }
    }

    pub fn n_out(&self) -> usize {
        match self.kind {
            TaskKind::Classification { n_classes } => n_classes,
            TaskKind::Regression => 1,
        }
    }
}

/// A video's target under a task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TaskTarget {
    Class(usize),
    Value(f64),
}

/// Read and validate a video's label for this task.
pub fn task_target(video: &Video, task: &TaskSpec) -> Result<TaskTarget> {
    let label = video.labels.get(&task.name).ok_or_else(|| {
        Error::Data(format!(
            "video {:?} has no label {:?}",
            video.video_id, task.name
        ))
    })?;
    match (&task.kind, label) {
        (TaskKind::Classification { n_classes }, LabelValue::Class { index }) => {
            if index >= n_classes {
                return Err(Error::Data(format!(
                    "label {:?} of {:?} is class {index}, task has {n_classes} classes",
                    task.name, video.video_id
                )));
            }
            Ok(TaskTarget::Class(*index))
        }
        (TaskKind::Regression, LabelValue::Score { value }) => {
            if !value.is_finite() {
                return Err(Error::Data(format!(
                    "label {:?} of {:?} is not finite",
                    task.name, video.video_id
                )));
            }
            Ok(TaskTarget::Value(*value))
        }
        _ => Err(Error::Data(format!(
            "label {:?} of {:?} does not match the task kind",
            task.name, video.video_id
        ))),
    }
}

// ── Dataset splitting ───────────────────────────────────────────────────

/// Video indices per split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder apportionment of n units to the three ratios. Quotas
/// within 1e-9 of an integer are snapped first so 0.15 * 20 lands on 3.
fn split_counts(n: usize, ratios: (f64, f64, f64)) -> [usize; 3] {
    let rs = [ratios.0, ratios.1, ratios.2];
    let quotas: Vec<f64> = rs
        .iter()
        .map(|r| {
            let q = r * n as f64;
            if (q - q.round()).abs() < 1e-9 {
                q.round()
            } else {
                q
            }
        })
        .collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Partition a dataset 70/15/15 (or as given) into train/val/test, by video
/// or by movie when `movie_disjoint`. Deterministic per seed.
pub fn split_dataset(
    dataset: &Dataset,
    ratios: (f64, f64, f64),
    movie_disjoint: bool,
    seed: u64,
) -> Result<Splits> {
    let (a, b, c) = ratios;
    if !(a >= 0.0 && b >= 0.0 && c >= 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios ({a}, {b}, {c}) must be non-negative and sum to 1"
        )));
    }
    let mut rng = substream(seed, "split");
    let groups: Vec<Vec<usize>> = if movie_disjoint {
        let movies = dataset.movie_ids();
        if movies.len() < 3 {
            return Err(Error::Data(format!(
                "movie-disjoint split needs at least 3 movies, got {}",
                movies.len()
            )));
        }
        movies
            .iter()
            .map(|m| {
                dataset
                    .videos
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| &v.movie_id == m)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect()
    } else {
        (0..dataset.videos.len()).map(|i| vec![i]).collect()
    };

    let perm = sample_distinct(&mut rng, groups.len(), groups.len());
    let counts = split_counts(groups.len(), ratios);
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut at = 0;
    for (part, &take) in parts.iter_mut().zip(&counts) {
        for &gi in &perm[at..at + take] {
            part.extend(groups[gi].iter().copied());
        }
        part.sort_unstable();
        at += take;
    }
    let [train, val, test] = parts;
    Ok(Splits { train, val, test })
}

// ── Metrics ─────────────────────────────────────────────────────────────

/// Aligned predictions and ground truth for one split.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalPairs {
    Classification {
        scores: Vec<Vec<f64>>,
        labels: Vec<usize>,
    },
    Regression {
        predictions: Vec<f64>,
        targets: Vec<f64>,
    },
}

/// Argmax with ties resolved to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy or mean squared error.
pub fn eval_metrics(pairs: &EvalPairs) -> Result<f64> {
    match pairs {
        EvalPairs::Classification { scores, labels } => {
            if scores.len() != labels.len() {
                return Err(Error::Usage(format!(
                    "{} score rows against {} labels",
                    scores.len(),
                    labels.len()
                )));
            }
            if scores.is_empty() {
                return Err(Error::Usage("no examples to score".into()));
            }
            let hits = scores
                .iter()
                .zip(labels)
                .filter(|(s, &l)| argmax(s) == l)
                .count();
            Ok(hits as f64 / scores.len() as f64)
        }
        EvalPairs::Regression {
            predictions,
            targets,
        } => {
            if predictions.len() != targets.len() {
                return Err(Error::Usage(format!(
                    "{} predictions against {} targets",
                    predictions.len(),
                    targets.len()
                )));
            }
            if predictions.is_empty() {
                return Err(Error::Usage("no examples to score".into()));
            }
            let sum: f64 = predictions
                .iter()
                .zip(targets)
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            Ok(sum / predictions.len() as f64)
        }
    }
}

// ── Pooling baselines ───────────────────────────────────────────────────

/// How a baseline collapses a span into one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
    /// The single detection nearest the span's center time.
    ShortTerm,
}

/// Collapse all detection features of a span into one vector.
pub fn pool_baseline(span: &Span, mode: PoolMode) -> Result<Vec<f64>> {
    let mut dets: Vec<&crate::data::Detection> = Vec::new();
    for t in &span.tracks {
        dets.extend(t.detections.iter());
    }
    if dets.is_empty() {
        return Err(Error::Data(format!(
            "span of {:?} has no detections to pool",
            span.video_id
        )));
    }
    let d = dets[0].z.len();
    match mode {
        PoolMode::Avg => {
            let mut out = vec![0.0; d];
            for det in &dets {
                for (o, &z) in out.iter_mut().zip(&det.z) {
                    *o += z;
                }
            }
            for o in &mut out {
                *o /= dets.len() as f64;
            }
            Ok(out)
        }
        PoolMode::Max => {
            let mut out = vec![f64::NEG_INFINITY; d];
            for det in &dets {
                for (o, &z) in out.iter_mut().zip(&det.z) {
                    *o = o.max(z);
                }
            }
            Ok(out)
        }
        PoolMode::ShortTerm => {
            let center = span.start + span.length / 2.0;
            let nearest = dets
                .iter()
                .min_by(|a, b| {
                    (a.t - center)
                        .abs()
                        .partial_cmp(&(b.t - center).abs())
                        .unwrap()
                })
                .unwrap();
            Ok(nearest.z.clone())
        }
    }
}

// ── Grid search ─────────────────────────────────────────────────────────

/// Fine-tuning hyperparameters. Grids are sorted and deduplicated before
/// use, so cell enumeration (and tie-breaking) is order-independent.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epoch_grid: Vec<u64>,
    pub batch_grid: Vec<usize>,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epoch_grid: vec![3, 5, 10, 20, 30, 50],
            batch_grid: vec![16, 32],
            base_lr: 2e-5,
            weight_decay: 0.01,
            warmup_frac: 0.05,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epoch_grid.is_empty() || self.batch_grid.is_empty() {
            return Err(Error::Config("grids must be non-empty".into()));
        }
        if self.batch_grid.contains(&0) {
            return Err(Error::Config("batch size 0 is invalid".into()));
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
        Ok(())
    }

    /// Cells in canonical (epochs asc, batch asc) order.
    fn cells(&self) -> Vec<(u64, usize)> {
        let mut es = self.epoch_grid.clone();
        es.sort_unstable();
        es.dedup();
        let mut bs = self.batch_grid.clone();
        bs.sort_unstable();
        bs.dedup();
        es.iter()
            .flat_map(|&e| bs.iter().map(move |&b| (e, b)))
            .collect()
    }
}

/// One grid cell's validation outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCellScore {
    pub epochs: u64,
    pub batch: usize,
    pub val_score: f64,
}

/// Grid-search outcome. `cells` is in canonical cell order.
#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub cells: Vec<GridCellScore>,
    pub chosen_epochs: u64,
    pub chosen_batch: usize,
    pub val_score: f64,
    pub test_score: f64,
}

/// Index of the winning cell: best validation score, ties toward smaller
/// epochs, then smaller batch.
pub fn select_best(cells: &[GridCellScore], kind: &TaskKind) -> Result<usize> {
    if cells.is_empty() {
        return Err(Error::Usage("no grid cells to select from".into()));
    }
    let higher_is_better = matches!(kind, TaskKind::Classification { .. });
    let mut best = 0;
    for (i, c) in cells.iter().enumerate().skip(1) {
        let b = &cells[best];
        let improves = if higher_is_better {
            c.val_score > b.val_score
        } else {
            c.val_score < b.val_score
        };
        let tie = c.val_score == b.val_score
            && (c.epochs, c.batch) < (b.epochs, b.batch);
        if improves || tie {
            best = i;
        }
    }
    Ok(best)
}

/// A video as one span, truncated to the token cap.
pub fn video_span(video: &Video, token_cap: usize) -> Result<Span> {
    let span = clip_span(video, 0.0, video.length_s)?;
    truncate_span(&span, token_cap)
}

/// Task scores for one span under eval mode (deterministic).
pub fn predict_video<S: Scalar>(params: &ModelParams<S>, span: &Span) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mut rng = substream(0, "eval");
    let seq = embed_tokens(&mut g, span, params, &Default::default(), Mode::Eval, &mut rng)?;
    let enc = encode(&mut g, seq.node, &seq.mask, params, Mode::Eval, &mut rng)?;
    let cls = g.gather_rows(enc, &[0])?;
    let scores = task_head(&mut g, params, cls, Mode::Eval, &mut rng)?;
    let row = g.value(scores);
    Ok(row.data().iter().map(|s| s.to_f64()).collect())
}

fn eval_split<S: Scalar>(
    params: &ModelParams<S>,
    examples: &[(Span, TaskTarget)],
) -> Result<f64> {
    let mut scores = Vec::new();
    let mut class_labels = Vec::new();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for (span, target) in examples {
        let out = predict_video(params, span)?;
        match *target {
            TaskTarget::Class(c) => {
                scores.push(out);
                class_labels.push(c);
            }
            TaskTarget::Value(v) => {
                preds.push(out[0]);
                targets.push(v);
            }
        }
    }
    if !scores.is_empty() {
        eval_metrics(&EvalPairs::Classification {
            scores,
            labels: class_labels,
        })
    } else {
        eval_metrics(&EvalPairs::Regression {
            predictions: preds,
            targets,
        })
    }
}

fn gather_examples(
    dataset: &Dataset,
    indices: &[usize],
    task: &TaskSpec,
    token_cap: usize,
    what: &str,
) -> Result<Vec<(Span, TaskTarget)>> {
    if indices.is_empty() {
        return Err(Error::Data(format!("{what} split is empty")));
    }
    indices
        .iter()
        .map(|&i| {
            let v = &dataset.videos[i];
            Ok((video_span(v, token_cap)?, task_target(v, task)?))
        })
        .collect()
}

fn train_cell<S: Scalar>(
    params: &mut ModelParams<S>,
    train: &[(Span, TaskTarget)],
    epochs: u64,
    batch: usize,
    cfg: &FinetuneConfig,
    rng: &mut SubRng,
) -> Result<()> {
    let n = train.len();
    let steps_per_epoch = n.div_ceil(batch) as u64;
    let total_steps = epochs * steps_per_epoch;
    if total_steps == 0 {
        return Ok(());
    }
    let mut adam = AdamState::new(&params.registry, cfg.weight_decay)?;
    let mut step = 0u64;
    for _ in 0..epochs {
        let perm = sample_distinct(rng, n, n);
        for chunk in perm.chunks(batch) {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (span, target) = &train[i];
                let seq = embed_tokens(
                    &mut g,
                    span,
                    params,
                    &Default::default(),
                    Mode::Train,
                    rng,
                )?;
                let enc = encode(&mut g, seq.node, &seq.mask, params, Mode::Train, rng)?;
                let cls = g.gather_rows(enc, &[0])?;
                let scores = task_head(&mut g, params, cls, Mode::Train, rng)?;
                let loss = match *target {
                    TaskTarget::Class(c) => cross_entropy_node(&mut g, scores, c)?,
                    TaskTarget::Value(v) => squared_error_node(&mut g, scores, v)?,
                };
                losses.push(loss);
            }
            let total = g.mean_scalars(&losses)?;
            let grads = g.backward(total, &params.registry)?;
            let lr = lr_schedule(step, total_steps, cfg.base_lr, cfg.warmup_frac)?;
            adam.step(&mut params.registry, &grads, lr)?;
            step += 1;
        }
    }
    Ok(())
}

/// Grid-search fine-tuning from `init` (pretrained or fresh). Every cell
/// clones `init`, adds a task head, and trains end to end; returns the grid
/// outcome and the chosen cell's model.
pub fn finetune<S: Scalar>(
    dataset: &Dataset,
    splits: &Splits,
    init: &ModelParams<S>,
    task: &TaskSpec,
    cfg: &FinetuneConfig,
) -> Result<(GridResult, ModelParams<S>)> {
    cfg.validate()?;
    let cap = init.config.token_cap;
    let train = gather_examples(dataset, &splits.train, task, cap, "train")?;
    let val = gather_examples(dataset, &splits.val, task, cap, "validation")?;
    let test = gather_examples(dataset, &splits.test, task, cap, "test")?;

    let mut cells = Vec::new();
    let mut models = Vec::new();
    for (cell_index, (epochs, batch)) in cfg.cells().into_iter().enumerate() {
        let mut rng = substream_indexed(cfg.seed, "finetune.cell", cell_index as u64);
        let mut params = init.clone();
        params.add_task_head(task.n_out(), &mut rng)?;
        train_cell(&mut params, &train, epochs, batch, cfg, &mut rng)?;
        let val_score = eval_split(&params, &val)?;
        cells.push(GridCellScore {
            epochs,
            batch,
            val_score,
        });
        models.push(params);
    }
    let best = select_best(&cells, &task.kind)?;
    let chosen = models.swap_remove(best);
    let test_score = eval_split(&chosen, &test)?;
    let result = GridResult {
        chosen_epochs: cells[best].epochs,
        chosen_batch: cells[best].batch,
        val_score: cells[best].val_score,
        test_score,
        cells,
    };
    Ok((result, chosen))
}

// ── Linear probe over pooled features ───────────────────────────────────

/// A bare linear model scores = x W + b over pooled features, trained under
/// the same grid protocol as the transformer so baseline comparisons hold
/// the head and selection rule fixed.
pub struct LinearProbe<S: Scalar> {
    pub registry: ParamRegistry<S>,
    w: ParamId,
    b: ParamId,
}

impl<S: Scalar> LinearProbe<S> {
    pub fn new(d_in: usize, n_out: usize, rng: &mut SubRng) -> Result<Self> {
        if d_in == 0 || n_out == 0 {
            return Err(Error::Config("probe dimensions must be positive".into()));
        }
        let mut registry = ParamRegistry::new();
        let data: Vec<S> = (0..d_in * n_out)
            .map(|_| S::from_f64(truncated_normal(rng, 0.02, 2.0)))
            .collect();
        let w = registry.register("probe.w", Tensor::from_vec(&[d_in, n_out], data)?, true)?;
        let b = registry.register("probe.b", Tensor::zeros(&[n_out])?, false)?;
        Ok(LinearProbe { registry, w, b })
    }

    fn scores(&self, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.registry, self.w);
        let b = g.param(&self.registry, self.b);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(
            &[1, features.len()],
            features.iter().map(|&f| S::from_f64(f)).collect(),
        )?);
        let s = self.scores(&mut g, x)?;
        Ok(g.value(s).data().iter().map(|v| v.to_f64()).collect())
    }
}

fn probe_eval<S: Scalar>(
    probe: &LinearProbe<S>,
    examples: &[(Vec<f64>, TaskTarget)],
) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for (x, target) in examples {
        let out = probe.predict(x)?;
        match *target {
            TaskTarget::Class(c) => {
                scores.push(out);
                labels.push(c);
            }
            TaskTarget::Value(v) => {
                preds.push(out[0]);
                targets.push(v);
            }
        }
    }
    if !scores.is_empty() {
        eval_metrics(&EvalPairs::Classification { scores, labels })
    } else {
        eval_metrics(&EvalPairs::Regression {
            predictions: preds,
            targets,
        })
    }
}

/// Grid-search a pooling baseline: pool every video's span to one vector,
/// then train the linear probe per grid cell. Same splits, selection rule,
/// and seeding scheme as [`finetune`].
pub fn pool_baseline_grid<S: Scalar>(
    dataset: &Dataset,
    splits: &Splits,
    task: &TaskSpec,
    mode: PoolMode,
    token_cap: usize,
    cfg: &FinetuneConfig,
) -> Result<GridResult> {
    cfg.validate()?;
    let pool_examples = |indices: &[usize], what: &str| -> Result<Vec<(Vec<f64>, TaskTarget)>> {
        if indices.is_empty() {
            return Err(Error::Data(format!("{what} split is empty")));
        }
        indices
            .iter()
            .map(|&i| {
                let v = &dataset.videos[i];
                let span = video_span(v, token_cap)?;
                Ok((pool_baseline(&span, mode)?, task_target(v, task)?))
            })
            .collect()
    };
    let train = pool_examples(&splits.train, "train")?;
    let val = pool_examples(&splits.val, "validation")?;
    let test = pool_examples(&splits.test, "test")?;
    let d_in = train[0].0.len();

    let mut cells = Vec::new();
    let mut probes = Vec::new();
    for (cell_index, (epochs, batch)) in cfg.cells().into_iter().enumerate() {
        let mut rng = substream_indexed(cfg.seed, "finetune.cell", cell_index as u64);
        let mut probe = LinearProbe::<S>::new(d_in, task.n_out(), &mut rng)?;
        let n = train.len();
        let total_steps = epochs * n.div_ceil(batch) as u64;
        if total_steps > 0 {
            let mut adam = AdamState::new(&probe.registry, cfg.weight_decay)?;
            let mut step = 0u64;
            for _ in 0..epochs {
                let perm = sample_distinct(&mut rng, n, n);
                for chunk in perm.chunks(batch) {
                    let mut g = Graph::new();
                    let mut losses = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        let (x, target) = &train[i];
                        let xn = g.constant(Tensor::from_vec(
                            &[1, d_in],
                            x.iter().map(|&f| S::from_f64(f)).collect(),
                        )?);
                        let s = probe.scores(&mut g, xn)?;
                        let loss = match *target {
                            TaskTarget::Class(c) => cross_entropy_node(&mut g, s, c)?,
                            TaskTarget::Value(v) => squared_error_node(&mut g, s, v)?,
                        };
                        losses.push(loss);
                    }
                    let total = g.mean_scalars(&losses)?;
                    let grads = g.backward(total, &probe.registry)?;
                    let lr = lr_schedule(step, total_steps, cfg.base_lr, cfg.warmup_frac)?;
                    adam.step(&mut probe.registry, &grads, lr)?;
                    step += 1;
                }
            }
        }
        let val_score = probe_eval(&probe, &val)?;
        cells.push(GridCellScore {
            epochs,
            batch,
            val_score,
        });
        probes.push(probe);
    }
    let best = select_best(&cells, &task.kind)?;
    let chosen = probes.swap_remove(best);
    let test_score = probe_eval(&chosen, &test)?;
    Ok(GridResult {
        chosen_epochs: cells[best].epochs,
        chosen_batch: cells[best].batch,
        val_score: cells[best].val_score,
        test_score,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BBox, Detection, SourceClass, Track};
    use crate::model::config::ModelConfig;
    use crate::synth::{generate_corpus, GenConfig};
    use std::collections::BTreeSet;

    fn synth_dataset() -> (Dataset, GenConfig) {
        let cfg = GenConfig {
            n_movies: 10,
            segments_per_movie: 2,
            segment_length_s: 30.0,
            instances_per_segment: 3,
            detections_per_instance: 2,
            d_z: 16,
            d_label: 6,
            theme_dim: 4,
            noise_scale: 0.25,
            seed: 21,
        };
        (generate_corpus(&cfg).unwrap().dataset, cfg)
    }

    fn tiny_model(d_z: usize, d_label: usize) -> ModelParams<f64> {
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
        ModelParams::new(&cfg, &mut substream(31, "init")).unwrap()
    }

    #[test]
    fn split_counts_follow_largest_remainder() {
        assert_eq!(split_counts(100, (0.7, 0.15, 0.15)), [70, 15, 15]);
        assert_eq!(split_counts(20, (0.7, 0.15, 0.15)), [14, 3, 3]);
        assert_eq!(split_counts(10, (0.7, 0.15, 0.15)), [7, 2, 1]);
        assert_eq!(split_counts(1, (0.7, 0.15, 0.15)), [1, 0, 0]);
    }

    #[test]
    fn movie_disjoint_split_never_shares_a_movie() {
        let corpus = generate_corpus(&GenConfig {
            n_movies: 20,
            segments_per_movie: 5,
            segment_length_s: 20.0,
            instances_per_segment: 3,
            detections_per_instance: 1,
            d_z: 12,
            d_label: 5,
            theme_dim: 4,
            noise_scale: 0.1,
            seed: 2,
        })
        .unwrap();
        let ds = &corpus.dataset;
        let splits = split_dataset(ds, (0.7, 0.15, 0.15), true, 7).unwrap();
        let movie_set = |idx: &[usize]| -> BTreeSet<String> {
            idx.iter().map(|&i| ds.videos[i].movie_id.clone()).collect()
        };
        let (tr, va, te) = (
            movie_set(&splits.train),
            movie_set(&splits.val),
            movie_set(&splits.test),
        );
        assert_eq!(tr.len(), 14);
        assert_eq!(va.len(), 3);
        assert_eq!(te.len(), 3);
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        assert_eq!(
            splits.train.len() + splits.val.len() + splits.test.len(),
            ds.videos.len()
        );

        // deterministic per seed, different across seeds
        assert_eq!(splits, split_dataset(ds, (0.7, 0.15, 0.15), true, 7).unwrap());
        assert_ne!(splits, split_dataset(ds, (0.7, 0.15, 0.15), true, 8).unwrap());
    }

    #[test]
    fn video_split_matches_ratios_and_validates_them() {
        let (ds, _) = synth_dataset();
        let splits = split_dataset(&ds, (0.5, 0.25, 0.25), false, 0).unwrap();
        assert_eq!(splits.train.len(), 10);
        assert_eq!(splits.val.len(), 5);
        assert_eq!(splits.test.len(), 5);
        assert!(split_dataset(&ds, (0.7, 0.2, 0.2), false, 0).is_err());
        assert!(split_dataset(&ds, (1.2, -0.1, -0.1), false, 0).is_err());
    }

    #[test]
    fn metrics_match_hand_arithmetic() {
        let acc = eval_metrics(&EvalPairs::Classification {
            scores: vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            labels: vec![0, 1],
        })
        .unwrap();
        assert_eq!(acc, 1.0);
        let acc = eval_metrics(&EvalPairs::Classification {
            scores: vec![vec![0.9, 0.1], vec![0.9, 0.1]],
            labels: vec![0, 1],
        })
        .unwrap();
        assert_eq!(acc, 0.5);
        // tie goes to the lowest class index
        let acc = eval_metrics(&EvalPairs::Classification {
            scores: vec![vec![0.5, 0.5]],
            labels: vec![0],
        })
        .unwrap();
        assert_eq!(acc, 1.0);
        let acc = eval_metrics(&EvalPairs::Classification {
            scores: vec![vec![0.5, 0.5]],
            labels: vec![1],
        })
        .unwrap();
        assert_eq!(acc, 0.0);

        let mse = eval_metrics(&EvalPairs::Regression {
            predictions: vec![1.0, 2.0, 5.0],
            targets: vec![1.0, 2.0, 3.0],
        })
        .unwrap();
        assert!((mse - 4.0 / 3.0).abs() < 1e-15);
        let zero = eval_metrics(&EvalPairs::Regression {
            predictions: vec![1.0, 2.0],
            targets: vec![1.0, 2.0],
        })
        .unwrap();
        assert_eq!(zero, 0.0);
        assert!(eval_metrics(&EvalPairs::Regression {
            predictions: vec![1.0],
            targets: vec![1.0, 2.0],
        })
        .is_err());
    }

    fn one_det_span(zs: Vec<Vec<f64>>, ts: Vec<f64>) -> Span {
        let tracks = zs
            .into_iter()
            .zip(ts)
            .enumerate()
            .map(|(i, (z, t))| Track {
                track_id: i as u64,
                shot_index: 0,
                source_class: SourceClass::Person,
                detections: vec![Detection {
                    t,
                    bbox: BBox::new(0.1, 0.1, 0.2, 0.2).unwrap(),
                    z,
                    pseudo_label: None,
                }],
            })
            .collect();
        Span {
            video_id: "v".into(),
            movie_id: "m".into(),
            start: 0.0,
            length: 10.0,
            tracks,
        }
    }

    #[test]
    fn pooling_matches_elementwise_definitions() {
        let span = one_det_span(vec![vec![1.0, 0.0]], vec![3.0]);
        assert_eq!(pool_baseline(&span, PoolMode::Avg).unwrap(), vec![1.0, 0.0]);
        assert_eq!(pool_baseline(&span, PoolMode::Max).unwrap(), vec![1.0, 0.0]);
        assert_eq!(
            pool_baseline(&span, PoolMode::ShortTerm).unwrap(),
            vec![1.0, 0.0]
        );

        let span = one_det_span(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 4.9]);
        assert_eq!(pool_baseline(&span, PoolMode::Avg).unwrap(), vec![0.5, 0.5]);
        assert_eq!(pool_baseline(&span, PoolMode::Max).unwrap(), vec![1.0, 1.0]);
        // center is t=5; the t=4.9 detection wins
        assert_eq!(
            pool_baseline(&span, PoolMode::ShortTerm).unwrap(),
            vec![0.0, 1.0]
        );

        let empty = Span {
            video_id: "v".into(),
            movie_id: "m".into(),
            start: 0.0,
            length: 10.0,
            tracks: vec![],
        };
        assert!(pool_baseline(&empty, PoolMode::Avg).is_err());
    }

    #[test]
    fn selection_prefers_score_then_smaller_epochs_then_smaller_batch() {
        let mk = |epochs, batch, val_score| GridCellScore {
            epochs,
            batch,
            val_score,
        };
        let kind = TaskKind::Classification { n_classes: 2 };
        let cells = vec![mk(3, 16, 0.5), mk(3, 32, 0.8), mk(10, 16, 0.8)];
        assert_eq!(select_best(&cells, &kind).unwrap(), 1);
        // tie on (score): smaller epochs wins even when listed later
        let cells = vec![mk(10, 16, 0.8), mk(3, 32, 0.8)];
        assert_eq!(select_best(&cells, &kind).unwrap(), 1);
        // tie on (score, epochs): smaller batch wins
        let cells = vec![mk(3, 32, 0.8), mk(3, 16, 0.8)];
        assert_eq!(select_best(&cells, &kind).unwrap(), 1);
        // regression: lower is better
        let cells = vec![mk(3, 16, 0.4), mk(5, 16, 0.2)];
        assert_eq!(select_best(&cells, &TaskKind::Regression).unwrap(), 1);
    }

    #[test]
    fn zero_epoch_cell_scores_the_untrained_init() {
        let (ds, gen) = synth_dataset();
        let splits = split_dataset(&ds, (0.7, 0.15, 0.15), true, 3).unwrap();
        let init = tiny_model(gen.d_z, gen.d_label);
        let task = TaskSpec::classification("theme", 4);
        let cfg = FinetuneConfig {
            epoch_grid: vec![0],
            batch_grid: vec![4],
            seed: 9,
            ..FinetuneConfig::default()
        };
        let (result, model) = finetune(&ds, &splits, &init, &task, &cfg).unwrap();

        // reproduce the cell by hand: clone init, add the head from the same
        // substream, no training
        let mut rng = substream_indexed(cfg.seed, "finetune.cell", 0);
        let mut reference = init.clone();
        reference.add_task_head(task.n_out(), &mut rng).unwrap();
        let val = gather_examples(&ds, &splits.val, &task, 64, "validation").unwrap();
        let want = eval_split(&reference, &val).unwrap();
        assert_eq!(result.val_score, want);
        for i in 0..reference.registry.len() {
            let id = ParamId(i);
            assert_eq!(
                model.registry.value(id).data(),
                reference.registry.value(id).data(),
                "parameter {i} changed in a zero-epoch cell"
            );
        }
    }

    #[test]
    fn finetuning_solves_the_single_detection_task() {
        let (ds, gen) = synth_dataset();
        let splits = split_dataset(&ds, (0.7, 0.15, 0.15), true, 0).unwrap();
        let init = tiny_model(gen.d_z, gen.d_label);
        let task = TaskSpec::classification("theme", 4);
        let cfg = FinetuneConfig {
            epoch_grid: vec![40],
            batch_grid: vec![4],
            base_lr: 1e-3,
            seed: 5,
            ..FinetuneConfig::default()
        };
        let (result, _) = finetune(&ds, &splits, &init, &task, &cfg).unwrap();
        assert_eq!(result.chosen_epochs, 40);
        assert_eq!(result.chosen_batch, 4);
        assert_eq!(
            result.val_score, 1.0,
            "theme is readable from any detection; val acc {}",
            result.val_score
        );
        assert_eq!(result.test_score, 1.0, "test acc {}", result.test_score);
    }

    #[test]
    fn grid_search_is_deterministic_per_seed() {
        let (ds, gen) = synth_dataset();
        let splits = split_dataset(&ds, (0.7, 0.15, 0.15), true, 3).unwrap();
        let init = tiny_model(gen.d_z, gen.d_label);
        let task = TaskSpec::classification("role_match", 2);
        let cfg = FinetuneConfig {
            epoch_grid: vec![1],
            batch_grid: vec![4],
            base_lr: 1e-4,
            seed: 17,
            ..FinetuneConfig::default()
        };
        let (r1, m1) = finetune(&ds, &splits, &init, &task, &cfg).unwrap();
        let (r2, m2) = finetune(&ds, &splits, &init, &task, &cfg).unwrap();
        assert_eq!(r1, r2);
        for i in 0..m1.registry.len() {
            let id = ParamId(i);
            assert_eq!(m1.registry.value(id).data(), m2.registry.value(id).data());
        }
    }

    #[test]
    fn avg_pool_probe_solves_the_single_detection_task() {
        let (ds, _) = synth_dataset();
        let splits = split_dataset(&ds, (0.7, 0.15, 0.15), true, 3).unwrap();
        let task = TaskSpec::classification("theme", 4);
        let cfg = FinetuneConfig {
            epoch_grid: vec![40],
            batch_grid: vec![4],
            base_lr: 1e-2,
            seed: 1,
            ..FinetuneConfig::default()
        };
        let result =
            pool_baseline_grid::<f64>(&ds, &splits, &task, PoolMode::Avg, 64, &cfg).unwrap();
        assert_eq!(result.val_score, 1.0, "avg-pool theme val {}", result.val_score);
    }

    #[test]
    fn regression_grid_prefers_the_trained_cell() {
        let (ds, _) = synth_dataset();
        let splits = split_dataset(&ds, (0.7, 0.15, 0.15), true, 3).unwrap();
        let task = TaskSpec::regression("scene_share");
        let cfg = FinetuneConfig {
            epoch_grid: vec![0, 40],
            batch_grid: vec![4],
            base_lr: 1e-2,
            seed: 2,
            ..FinetuneConfig::default()
        };
        let result =
            pool_baseline_grid::<f64>(&ds, &splits, &task, PoolMode::Avg, 64, &cfg).unwrap();
        assert_eq!(result.cells.len(), 2);
        let untrained = &result.cells[0];
        let trained = &result.cells[1];
        assert!(
            trained.val_score < untrained.val_score,
            "training should cut MSE: {} vs {}",
            trained.val_score,
            untrained.val_score
        );
        assert_eq!(result.chosen_epochs, 40);
        assert!(result.test_score.is_finite() && result.test_score >= 0.0);
    }

    #[test]
    fn task_targets_are_validated_against_the_spec() {
        let (ds, _) = synth_dataset();
        let v = &ds.videos[0];
        assert!(task_target(v, &TaskSpec::classification("theme", 4)).is_ok());
        // too few classes for the stored label eventually fails on some video
        let narrow = TaskSpec::classification("theme", 1);
        assert!(ds.videos.iter().any(|v| task_target(v, &narrow).is_err()));
        assert!(task_target(v, &TaskSpec::classification("scene_share", 4)).is_err());
        assert!(task_target(v, &TaskSpec::regression("theme")).is_err());
        assert!(task_target(v, &TaskSpec::regression("nope")).is_err());
        assert!(task_target(v, &TaskSpec::regression("scene_share")).is_ok());
    }
}

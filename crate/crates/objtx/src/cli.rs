//! Command-line surface. One binary, seven subcommands, hand-rolled flag
//! parsing: the grammar is five flags and not worth a dependency.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Every
//! subcommand reads inputs immutably and writes only under `--out`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;

use crate::data::{BBox, Dataset, Detection, LabelValue, SourceClass, Span, Track};
use crate::error::{Error, Result};
use crate::finetune::{
    finetune, pool_baseline_grid, split_dataset, task_target, video_span, eval_metrics,
    predict_video, EvalPairs, FinetuneConfig, GridResult, PoolMode, Splits, TaskKind, TaskSpec,
    TaskTarget,
};
use crate::fusion::{ava_late_fusion, FusionConfig};
use crate::io;
use crate::io::MetricRecord;
use crate::model::config::ModelConfig;
use crate::model::embed::{embed_tokens, ZOverride};
use crate::model::encoder::encode;
use crate::model::heads;
use crate::model::params::ModelParams;
use crate::numerics::gradcheck::{check_against_fd, GradCheckReport};
use crate::numerics::graph::{Gradients, Graph};
use crate::numerics::ops::Mode;
use crate::numerics::registry::ParamRegistry;
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::preprocess::{enumerate_spans, preprocess_video, truncate_span};
use crate::pretrain::{pretrain_loop, Objective, PretrainConfig};
use crate::rng::{substream, substream_indexed, SubRng};
use crate::synth::{generate_corpus, generate_raw_video, GenConfig, RawGenConfig};

pub const USAGE: &str = "\
usage: objtx SUBCOMMAND [--flag value | --flag=value]...

  gen-synth   --config FILE --out DIR [--seed N]
              write a synthetic corpus (config key `kind`: corpus | raw)
  preprocess  --input RAW.jsonl --out DIR
              link detections into tracks, detect shots, write a corpus
  pretrain    --input CORPUS --config FILE --out DIR [--seed N]
              masked-instance/compatibility pretraining; writes
              checkpoint.bin and metrics.jsonl
  finetune    --input CORPUS --checkpoint CKPT --config FILE --out DIR [--seed N]
              grid-search fine-tuning of a whole-video task (config key
              `task` names the label)
  eval        --input CORPUS --checkpoint CKPT --config FILE --out DIR [--seed N]
              score a task head per split, or with `fusion = true` run the
              late-fusion protocol against the short-term-only baseline
  baseline    --input CORPUS --config FILE --out DIR [--seed N]
              pooling baseline (config key `pool`: avg | max | short_term)
              under the same grid protocol
  gradcheck   [--config FILE] [--seed N] [--out DIR]
              finite-difference check of the full model; nonzero exit on
              failure

Config files are `key = value` lines mirroring the corresponding struct
fields; `--seed` overrides the config's seed key.";

// ── argument parsing ────────────────────────────────────────────────────

/// Parsed command line. Which flags are required depends on the subcommand.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CliArgs {
    pub subcommand: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

pub fn parse_args(argv: &[String]) -> Result<CliArgs> {
    let mut it = argv.iter();
    let subcommand = it
        .next()
        .ok_or_else(|| Error::Usage("missing subcommand".into()))?
        .clone();
    let mut args = CliArgs {
        subcommand,
        ..CliArgs::default()
    };
    while let Some(a) = it.next() {
        let (flag, inline) = match a.split_once('=') {
            Some((f, v)) => (f, Some(v.to_string())),
            None => (a.as_str(), None),
        };
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Usage(format!("flag {flag} needs a value")))?
                .clone(),
        };
        let slot = match flag {
            "--config" => &mut args.config,
            "--out" => &mut args.out,
            "--input" => &mut args.input,
            "--checkpoint" => &mut args.checkpoint,
            "--seed" => {
                if args.seed.is_some() {
                    return Err(Error::Usage("duplicate flag --seed".into()));
                }
                args.seed = Some(
                    value
                        .parse()
                        .map_err(|_| Error::Usage(format!("bad seed {value:?}")))?,
                );
                continue;
            }
            other => return Err(Error::Usage(format!("unknown flag {other:?}"))),
        };
        if slot.is_some() {
            return Err(Error::Usage(format!("duplicate flag {flag}")));
        }
        *slot = Some(PathBuf::from(value));
    }
    Ok(args)
}

pub fn run_cli(argv: &[String]) -> i32 {
    if matches!(argv.first().map(String::as_str), Some("--help" | "-h" | "help")) {
        println!("{USAGE}");
        return 0;
    }
    match dispatch(argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Usage(_)) {
                eprintln!("{USAGE}");
            }
            e.exit_code()
        }
    }
}

fn dispatch(argv: &[String]) -> Result<()> {
    let args = parse_args(argv)?;
    match args.subcommand.as_str() {
        "gen-synth" => cmd_gen_synth(&args),
        "preprocess" => cmd_preprocess(&args),
        "pretrain" => cmd_pretrain(&args),
        "finetune" => cmd_finetune(&args),
        "eval" => cmd_eval(&args),
        "baseline" => cmd_baseline(&args),
        "gradcheck" => cmd_gradcheck(&args),
        other => Err(Error::Usage(format!("unknown subcommand {other:?}"))),
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Usage(format!("{flag} is required")))
}

fn out_dir(args: &CliArgs) -> Result<&Path> {
    let p = require(&args.out, "--out")?;
    fs::create_dir_all(p)?;
    Ok(p)
}

// ── config readers ──────────────────────────────────────────────────────

/// Key consumer over one flat config file. Each reader takes the keys it
/// knows; whatever remains at the end is a typo and rejected.
struct KvReader {
    kv: BTreeMap<String, String>,
}

impl KvReader {
    fn from_file(path: Option<&Path>) -> Result<Self> {
        let kv = match path {
            Some(p) => io::load_kv(p)?,
            None => BTreeMap::new(),
        };
        Ok(KvReader { kv })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.kv.remove(key)
    }

    fn parse<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.kv.remove(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for key {key:?}"))),
        }
    }

    fn parse_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.kv.remove(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        Error::Config(format!("bad list value {v:?} for key {key:?}"))
                    })
                })
                .collect(),
        }
    }

    /// Claim the model keys so [`ModelConfig::from_kv`] sees only its own.
    fn split_model(&mut self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for k in ModelConfig::default().to_kv().keys() {
            if let Some(v) = self.kv.remove(k) {
                out.insert(k.clone(), v);
            }
        }
        out
    }

    fn finish(self) -> Result<()> {
        if let Some(k) = self.kv.keys().next() {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        Ok(())
    }
}

/// Train/val/test partition settings shared by finetune, eval, baseline.
struct SplitSpec {
    ratios: (f64, f64, f64),
    movie_disjoint: bool,
    seed: u64,
}

fn split_spec(r: &mut KvReader) -> Result<SplitSpec> {
    let ratios = r.parse_list("split_ratios", vec![0.7, 0.15, 0.15])?;
    if ratios.len() != 3 {
        return Err(Error::Config(format!(
            "split_ratios needs 3 values, got {}",
            ratios.len()
        )));
    }
    Ok(SplitSpec {
        ratios: (ratios[0], ratios[1], ratios[2]),
        movie_disjoint: r.parse("movie_disjoint", true)?,
        seed: r.parse("split_seed", 0)?,
    })
}

fn finetune_config(r: &mut KvReader) -> Result<FinetuneConfig> {
    let d = FinetuneConfig::default();
    Ok(FinetuneConfig {
        epoch_grid: r.parse_list("epoch_grid", d.epoch_grid)?,
        batch_grid: r.parse_list("batch_grid", d.batch_grid)?,
        base_lr: r.parse("base_lr", d.base_lr)?,
        weight_decay: r.parse("weight_decay", d.weight_decay)?,
        warmup_frac: r.parse("warmup_frac", d.warmup_frac)?,
        seed: r.parse("seed", d.seed)?,
    })
}

/// Infer a task from the labels actually present in the corpus: class
/// labels give a classification task sized to the largest index, score
/// labels a regression task.
pub fn task_from_dataset(dataset: &Dataset, name: &str) -> Result<TaskSpec> {
    let mut n_classes: Option<usize> = None;
    let mut scored = false;
    for v in &dataset.videos {
        match v.labels.get(name) {
            Some(LabelValue::Class { index }) => {
                n_classes = Some(n_classes.unwrap_or(0).max(index + 1));
            }
            Some(LabelValue::Score { .. }) => scored = true,
            None => {}
        }
    }
    match (n_classes, scored) {
        (Some(_), true) => Err(Error::Data(format!(
            "label {name:?} mixes class and score values"
        ))),
        (Some(n), false) => Ok(TaskSpec::classification(name, n)),
        (None, true) => Ok(TaskSpec::regression(name)),
        (None, false) => Err(Error::Data(format!("no video carries label {name:?}"))),
    }
}

fn metric_name(kind: &TaskKind) -> &'static str {
    match kind {
        TaskKind::Classification { .. } => "accuracy",
        TaskKind::Regression => "mse",
    }
}

fn grid_records(result: &GridResult, metric: &str) -> Vec<MetricRecord> {
    let mut out = Vec::new();
    for c in &result.cells {
        out.push(MetricRecord::Split {
            split: format!("cell.{}x{}", c.epochs, c.batch),
            metric: format!("val_{metric}"),
            value: c.val_score,
        });
    }
    out.push(MetricRecord::Split {
        split: "grid".into(),
        metric: "chosen_epochs".into(),
        value: result.chosen_epochs as f64,
    });
    out.push(MetricRecord::Split {
        split: "grid".into(),
        metric: "chosen_batch".into(),
        value: result.chosen_batch as f64,
    });
    out.push(MetricRecord::Split {
        split: "val".into(),
        metric: metric.into(),
        value: result.val_score,
    });
    out.push(MetricRecord::Split {
        split: "test".into(),
        metric: metric.into(),
        value: result.test_score,
    });
    out
}

// ── subcommands ─────────────────────────────────────────────────────────

fn cmd_gen_synth(args: &CliArgs) -> Result<()> {
    let out = out_dir(args)?;
    let mut r = KvReader::from_file(args.config.as_deref())?;
    let kind = r.take("kind").unwrap_or_else(|| "corpus".into());
    match kind.as_str() {
        "corpus" => {
            let d = GenConfig::default();
            let mut cfg = GenConfig {
                n_movies: r.parse("n_movies", d.n_movies)?,
                segments_per_movie: r.parse("segments_per_movie", d.segments_per_movie)?,
                segment_length_s: r.parse("segment_length_s", d.segment_length_s)?,
                instances_per_segment: r
                    .parse("instances_per_segment", d.instances_per_segment)?,
                detections_per_instance: r
                    .parse("detections_per_instance", d.detections_per_instance)?,
                d_z: r.parse("d_z", d.d_z)?,
                d_label: r.parse("d_label", d.d_label)?,
                theme_dim: r.parse("theme_dim", d.theme_dim)?,
                noise_scale: r.parse("noise_scale", d.noise_scale)?,
                seed: r.parse("seed", d.seed)?,
            };
            r.finish()?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            let corpus = generate_corpus(&cfg)?;
            let path = out.join("corpus.jsonl");
            io::save_corpus(&path, &corpus.dataset)?;
            println!(
                "wrote {} videos ({} movies) to {}",
                corpus.dataset.videos.len(),
                cfg.n_movies,
                path.display()
            );
        }
        "raw" => {
            let d = RawGenConfig::default();
            let mut cfg = RawGenConfig {
                n_shots: r.parse("n_shots", d.n_shots)?,
                shot_len_s: r.parse("shot_len_s", d.shot_len_s)?,
                fps: r.parse("fps", d.fps)?,
                tracks_per_shot: r.parse("tracks_per_shot", d.tracks_per_shot)?,
                d_z: r.parse("d_z", d.d_z)?,
                seed: r.parse("seed", d.seed)?,
            };
            r.finish()?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            let (video, _) = generate_raw_video(&cfg)?;
            let path = out.join("raw.jsonl");
            io::save_raw_streams(&path, &[video])?;
            println!("wrote 1 raw detection stream to {}", path.display());
        }
        other => {
            return Err(Error::Config(format!(
                "kind must be corpus or raw, got {other:?}"
            )))
        }
    }
    Ok(())
}

fn cmd_preprocess(args: &CliArgs) -> Result<()> {
    let input = require(&args.input, "--input")?;
    let out = out_dir(args)?;
    KvReader::from_file(args.config.as_deref())?.finish()?;
    let raws = io::load_raw_streams(input)?;
    let videos = raws
        .iter()
        .map(preprocess_video)
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset { videos };
    dataset.validate()?;
    let path = out.join("corpus.jsonl");
    io::save_corpus(&path, &dataset)?;
    println!(
        "preprocessed {} videos to {}",
        dataset.videos.len(),
        path.display()
    );
    Ok(())
}

fn cmd_pretrain(args: &CliArgs) -> Result<()> {
    let input = require(&args.input, "--input")?;
    let out = out_dir(args)?;
    let mut r = KvReader::from_file(args.config.as_deref())?;
    let model_cfg = ModelConfig::from_kv(&r.split_model())?;
    let precision = r.take("precision").unwrap_or_else(|| "f64".into());
    let span_length: f64 = r.parse("span_length", 60.0)?;
    let span_stride: f64 = r.parse("span_stride", 30.0)?;
    let d = PretrainConfig::default();
    let objective = match r.take("objective").as_deref() {
        None | Some("mask_compat") => Objective::MaskCompat,
        Some("mask") => Objective::Mask,
        Some(other) => {
            return Err(Error::Config(format!(
                "objective must be mask or mask_compat, got {other:?}"
            )))
        }
    };
    let mut cfg = PretrainConfig {
        iterations: r.parse("iterations", d.iterations)?,
        batch: r.parse("batch", d.batch)?,
        objective,
        base_lr: r.parse("base_lr", d.base_lr)?,
        weight_decay: r.parse("weight_decay", d.weight_decay)?,
        warmup_frac: r.parse("warmup_frac", d.warmup_frac)?,
        mask_fraction: r.parse("mask_fraction", d.mask_fraction)?,
        seed: r.parse("seed", d.seed)?,
    };
    r.finish()?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let dataset = io::load_corpus(input)?;
    match precision.as_str() {
        "f64" => pretrain_with::<f64>(&dataset, &model_cfg, &cfg, span_length, span_stride, out),
        "f32" => pretrain_with::<f32>(&dataset, &model_cfg, &cfg, span_length, span_stride, out),
        other => Err(Error::Config(format!(
            "precision must be f64 or f32, got {other:?}"
        ))),
    }
}

fn span_pool(dataset: &Dataset, length: f64, stride: f64, cap: usize) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    for v in &dataset.videos {
        for sp in enumerate_spans(v, length, stride)?.spans {
            spans.push(truncate_span(&sp, cap)?);
        }
    }
    Ok(spans)
}

fn pretrain_with<S: Scalar>(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    span_length: f64,
    span_stride: f64,
    out: &Path,
) -> Result<()> {
    let spans = span_pool(dataset, span_length, span_stride, model_cfg.token_cap)?;
    let mut params = ModelParams::<S>::new(model_cfg, &mut substream(cfg.seed, "init"))?;
    let trace = pretrain_loop(&spans, &mut params, cfg)?;
    let ckpt = out.join("checkpoint.bin");
    io::save_checkpoint(&ckpt, &params)?;
    let records: Vec<MetricRecord> = trace.iter().map(MetricRecord::from).collect();
    io::save_metrics(&out.join("metrics.jsonl"), &records)?;
    let last = trace.last().expect("pretrain_loop traces every step");
    println!(
        "pretrained {} iterations on {} spans; final {} {:.4}; wrote {}",
        cfg.iterations,
        spans.len(),
        last.metric,
        last.value,
        ckpt.display()
    );
    Ok(())
}

fn cmd_finetune(args: &CliArgs) -> Result<()> {
    let input = require(&args.input, "--input")?;
    let ckpt = require(&args.checkpoint, "--checkpoint")?;
    let out = out_dir(args)?;
    let mut r = KvReader::from_file(args.config.as_deref())?;
    let task_name = r
        .take("task")
        .ok_or_else(|| Error::Config("finetune needs a `task` key".into()))?;
    let split = split_spec(&mut r)?;
    let mut cfg = finetune_config(&mut r)?;
    r.finish()?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let dataset = io::load_corpus(input)?;
    let task = task_from_dataset(&dataset, &task_name)?;
    let splits = split_dataset(&dataset, split.ratios, split.movie_disjoint, split.seed)?;
    let bytes = fs::read(ckpt)?;
    match io::checkpoint_precision(&bytes)?.as_str() {
        "f64" => finetune_with::<f64>(&bytes, &dataset, &splits, &task, &cfg, out),
        _ => finetune_with::<f32>(&bytes, &dataset, &splits, &task, &cfg, out),
    }
}

fn finetune_with<S: Scalar>(
    ckpt_bytes: &[u8],
    dataset: &Dataset,
    splits: &Splits,
    task: &TaskSpec,
    cfg: &FinetuneConfig,
    out: &Path,
) -> Result<()> {
    let init = io::checkpoint_from_bytes::<S>(ckpt_bytes)?;
    let (result, model) = finetune(dataset, splits, &init, task, cfg)?;
    io::save_checkpoint(&out.join("checkpoint.bin"), &model)?;
    let metric = metric_name(&task.kind);
    io::save_metrics(&out.join("metrics.jsonl"), &grid_records(&result, metric))?;
    println!(
        "chosen cell: epochs={} batch={}; val {metric} {:.4}; test {metric} {:.4}",
        result.chosen_epochs, result.chosen_batch, result.val_score, result.test_score
    );
    Ok(())
}

fn cmd_eval(args: &CliArgs) -> Result<()> {
    let input = require(&args.input, "--input")?;
    let ckpt = require(&args.checkpoint, "--checkpoint")?;
    let out = out_dir(args)?;
    let mut r = KvReader::from_file(args.config.as_deref())?;
    let fusion: bool = r.parse("fusion", false)?;
    let task_name = r.take("task");
    let split = split_spec(&mut r)?;
    let dataset = io::load_corpus(input)?;
    let splits = split_dataset(&dataset, split.ratios, split.movie_disjoint, split.seed)?;
    let bytes = fs::read(ckpt)?;
    let precision = io::checkpoint_precision(&bytes)?;
    if fusion {
        if task_name.is_some() {
            return Err(Error::Config(
                "eval takes either `task` or `fusion = true`, not both".into(),
            ));
        }
        let d = FusionConfig::default();
        let mut cfg = FusionConfig {
            iterations: r.parse("iterations", d.iterations)?,
            batch: r.parse("batch", d.batch)?,
            base_lr: r.parse("base_lr", d.base_lr)?,
            seed: r.parse("seed", d.seed)?,
        };
        r.finish()?;
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        return match precision.as_str() {
            "f64" => fusion_eval_with::<f64>(&bytes, &dataset, &splits, &cfg, out),
            _ => fusion_eval_with::<f32>(&bytes, &dataset, &splits, &cfg, out),
        };
    }
    let task_name =
        task_name.ok_or_else(|| Error::Config("eval needs `task` or `fusion = true`".into()))?;
    r.finish()?;
    let task = task_from_dataset(&dataset, &task_name)?;
    match precision.as_str() {
        "f64" => task_eval_with::<f64>(&bytes, &dataset, &splits, &task, out),
        _ => task_eval_with::<f32>(&bytes, &dataset, &splits, &task, out),
    }
}

fn task_eval_with<S: Scalar>(
    ckpt_bytes: &[u8],
    dataset: &Dataset,
    splits: &Splits,
    task: &TaskSpec,
    out: &Path,
) -> Result<()> {
    let params = io::checkpoint_from_bytes::<S>(ckpt_bytes)?;
    let head = params
        .registry
        .find("head.task.w")
        .ok_or_else(|| Error::Usage("checkpoint has no task head; finetune first".into()))?;
    let n_out = params.registry.value(head).shape()[1];
    if n_out != task.n_out() {
        return Err(Error::Usage(format!(
            "checkpoint task head has {} outputs, task {:?} wants {}",
            n_out,
            task.name,
            task.n_out()
        )));
    }
    let metric = metric_name(&task.kind);
    let mut records = Vec::new();
    for (name, indices) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut predictions = Vec::new();
        let mut targets = Vec::new();
        for &vi in indices {
            let video = &dataset.videos[vi];
            let span = video_span(video, params.config.token_cap)?;
            let row = predict_video(&params, &span)?;
            match task_target(video, task)? {
                TaskTarget::Class(c) => {
                    scores.push(row);
                    labels.push(c);
                }
                TaskTarget::Value(t) => {
                    predictions.push(row[0]);
                    targets.push(t);
                }
            }
        }
        let pairs = if matches!(task.kind, TaskKind::Classification { .. }) {
            EvalPairs::Classification { scores, labels }
        } else {
            EvalPairs::Regression {
                predictions,
                targets,
            }
        };
        let value = eval_metrics(&pairs)?;
        println!("{name} {metric} {value:.4}");
        records.push(MetricRecord::Split {
            split: name.into(),
            metric: metric.into(),
            value,
        });
    }
    io::save_metrics(&out.join("metrics.jsonl"), &records)?;
    Ok(())
}

fn fusion_eval_with<S: Scalar>(
    ckpt_bytes: &[u8],
    dataset: &Dataset,
    splits: &Splits,
    cfg: &FusionConfig,
    out: &Path,
) -> Result<()> {
    let init = io::checkpoint_from_bytes::<S>(ckpt_bytes)?;
    let (outcome, fused_model) = ava_late_fusion(dataset, splits, &init, cfg)?;
    io::save_checkpoint(&out.join("checkpoint.bin"), &fused_model)?;
    let mut records: Vec<MetricRecord> = outcome.trace.iter().map(MetricRecord::from).collect();
    records.push(MetricRecord::Split {
        split: "test".into(),
        metric: "fused_accuracy".into(),
        value: outcome.fused,
    });
    records.push(MetricRecord::Split {
        split: "test".into(),
        metric: "short_term_accuracy".into(),
        value: outcome.short_term,
    });
    io::save_metrics(&out.join("metrics.jsonl"), &records)?;
    println!(
        "fused accuracy {:.4} vs short-term-only {:.4}",
        outcome.fused, outcome.short_term
    );
    Ok(())
}

fn cmd_baseline(args: &CliArgs) -> Result<()> {
    let input = require(&args.input, "--input")?;
    let out = out_dir(args)?;
    let mut r = KvReader::from_file(args.config.as_deref())?;
    let task_name = r
        .take("task")
        .ok_or_else(|| Error::Config("baseline needs a `task` key".into()))?;
    let pool = match r.take("pool").as_deref() {
        None | Some("avg") => PoolMode::Avg,
        Some("max") => PoolMode::Max,
        Some("short_term") => PoolMode::ShortTerm,
        Some(other) => {
            return Err(Error::Config(format!(
                "pool must be avg, max, or short_term, got {other:?}"
            )))
        }
    };
    let token_cap: usize = r.parse("token_cap", ModelConfig::default().token_cap)?;
    let split = split_spec(&mut r)?;
    let mut cfg = finetune_config(&mut r)?;
    r.finish()?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let dataset = io::load_corpus(input)?;
    let task = task_from_dataset(&dataset, &task_name)?;
    let splits = split_dataset(&dataset, split.ratios, split.movie_disjoint, split.seed)?;
    let result = pool_baseline_grid::<f64>(&dataset, &splits, &task, pool, token_cap, &cfg)?;
    let metric = metric_name(&task.kind);
    io::save_metrics(&out.join("metrics.jsonl"), &grid_records(&result, metric))?;
    println!(
        "pool baseline {:?}: epochs={} batch={}; val {metric} {:.4}; test {metric} {:.4}",
        pool, result.chosen_epochs, result.chosen_batch, result.val_score, result.test_score
    );
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────────

/// Built-in model for `gradcheck` without `--config`: small enough that a
/// full finite-difference sweep finishes in seconds.
fn gradcheck_default_config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        layers: 2,
        heads: 2,
        head_dim: 4,
        ffn_dim: 12,
        dropout: 0.1,
        d_z: 3,
        d_label: 3,
        instance_slots: 5,
        shot_slots: 3,
        token_cap: 16,
    }
}

/// A deterministic two-shot span with three tracks, features drawn from the
/// given substream.
fn gradcheck_span(cfg: &ModelConfig, rng: &mut SubRng) -> Result<Span> {
    let zvec = |rng: &mut SubRng| -> Vec<f64> {
        (0..cfg.d_z).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let det = |t: f64, rng: &mut SubRng| -> Result<Detection> {
        let left = rng.gen_range(0.05..0.5);
        let top = rng.gen_range(0.05..0.5);
        Ok(Detection {
            t,
            bbox: BBox::new(left, top, left + 0.3, top + 0.3)?,
            z: zvec(rng),
            pseudo_label: None,
        })
    };
    Ok(Span {
        video_id: "gradcheck".into(),
        movie_id: "gradcheck".into(),
        start: 0.0,
        length: 60.0,
        tracks: vec![
            Track {
                track_id: 1,
                shot_index: 0,
                source_class: SourceClass::Person,
                detections: vec![det(3.0, rng)?, det(22.0, rng)?],
            },
            Track {
                track_id: 2,
                shot_index: 0,
                source_class: SourceClass::Object,
                detections: vec![det(10.0, rng)?],
            },
            Track {
                track_id: 3,
                shot_index: 1,
                source_class: SourceClass::Person,
                detections: vec![det(31.0, rng)?, det(50.0, rng)?],
            },
        ],
    })
}

/// One combined loss that mounts every parameter: masked prediction and
/// fused logistic loss on span 0, task cross entropy on its `[CLS]`, and
/// the contrastive compatibility loss across four spans.
fn gradcheck_loss<S: Scalar>(
    params: &ModelParams<S>,
    reg: &ParamRegistry<S>,
    spans: &[Span],
) -> Result<(f64, Gradients<S>)> {
    let mut params = params.clone();
    params.registry = reg.clone();
    let d = params.config.d_label;

    let mut g = Graph::new();
    let mut cls_rows = Vec::new();
    let mut partial = None;
    for (i, sp) in spans.iter().enumerate() {
        let mut overrides = BTreeMap::new();
        overrides.insert(1u64, ZOverride::Learned);
        let mut rng_embed = substream(80 + i as u64, "embed");
        let mut rng_drop = substream(80 + i as u64, "dropout");
        let seq = embed_tokens(&mut g, sp, &params, &overrides, Mode::Eval, &mut rng_embed)?;
        let enc = encode(&mut g, seq.node, &seq.mask, &params, Mode::Eval, &mut rng_drop)?;
        let cls = g.gather_rows(enc, &[0])?;
        cls_rows.push(cls);
        if i == 0 {
            let rows = seq.tokens_of_track(1);
            let picked = g.gather_rows(enc, &rows)?;
            let (logits, penultimate) = heads::mask_head(&mut g, &params, picked)?;
            let targets: Vec<Vec<f64>> = (0..rows.len())
                .map(|k| {
                    let mut p = vec![0.3 / (d as f64 - 1.0); d];
                    p[k % d] = 0.7;
                    p
                })
                .collect();
            let masked = heads::masked_loss_node(&mut g, logits, &targets)?;

            let first = g.gather_rows(penultimate, &[0])?;
            let st: Vec<S> = (0..d)
                .map(|k| S::from_f64(0.1 * (k as f64 + 1.0)))
                .collect();
            let st = g.constant(Tensor::from_vec(&[1, d], st)?);
            let fused = heads::fusion_head(&mut g, &params, first, st)?;
            let fusion = heads::logistic_loss_node(&mut g, fused, 0)?;

            let tl = heads::task_head(&mut g, &params, cls, Mode::Eval, &mut rng_drop)?;
            let task = heads::cross_entropy_node(&mut g, tl, 0)?;

            let mf = g.add(masked, fusion)?;
            partial = Some(g.add(mf, task)?);
        }
    }
    let stacked = g.concat_rows(&cls_rows)?;
    let mut rng_head = substream(80, "dropout");
    let projected = heads::compat_head(&mut g, &params, stacked, Mode::Eval, &mut rng_head)?;
    let compat = heads::compat_batch_loss(&mut g, projected)?;
    let total = g.add(partial.expect("span 0 builds the per-span losses"), compat)?;
    let grads = g.backward(total, &params.registry)?;
    Ok((g.scalar_value(total), grads))
}

/// Finite-difference sweep over every parameter of the combined loss.
pub fn gradcheck_suite<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    if cfg.d_label < 2 {
        return Err(Error::Config("gradcheck needs d_label >= 2".into()));
    }
    let mut params = ModelParams::<S>::new(cfg, &mut substream(seed, "init"))?;
    params.add_task_head(cfg.d_label, &mut substream(seed, "init.task"))?;
    let spans = (0..4)
        .map(|i| gradcheck_span(cfg, &mut substream_indexed(seed, "gradcheck.span", i)))
        .collect::<Result<Vec<_>>>()?;
    let (_, analytic) = gradcheck_loss(&params, &params.registry.clone(), &spans)?;
    let mut reg = params.registry.clone();
    let (h, floor) = if S::DTYPE == "f32" {
        (1e-2, 1e-2)
    } else {
        (1e-5, 1e-4)
    };
    check_against_fd(
        &mut reg,
        |r| gradcheck_loss(&params, r, &spans).map(|(l, _)| l),
        &analytic,
        h,
        floor,
    )
}

fn cmd_gradcheck(args: &CliArgs) -> Result<()> {
    let mut r = KvReader::from_file(args.config.as_deref())?;
    let model_kv = r.split_model();
    let cfg = if model_kv.is_empty() {
        gradcheck_default_config()
    } else {
        ModelConfig::from_kv(&model_kv)?
    };
    let precision = r.take("precision").unwrap_or_else(|| "f64".into());
    r.finish()?;
    let seed = args.seed.unwrap_or(11);
    let (report, tol) = match precision.as_str() {
        "f64" => (gradcheck_suite::<f64>(&cfg, seed)?, 1e-4),
        "f32" => (gradcheck_suite::<f32>(&cfg, seed)?, 5e-2),
        other => {
            return Err(Error::Config(format!(
                "precision must be f64 or f32, got {other:?}"
            )))
        }
    };
    let pass = report.passes(tol);
    println!(
        "gradcheck: checked {} elements, max rel err {:.3e} at {:?}[{}] (tol {tol:.0e}): {}",
        report.checked,
        report.max_rel_err,
        report.worst_param,
        report.worst_index,
        if pass { "PASS" } else { "FAIL" }
    );
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        let records = vec![
            MetricRecord::Split {
                split: "gradcheck".into(),
                metric: "checked".into(),
                value: report.checked as f64,
            },
            MetricRecord::Split {
                split: "gradcheck".into(),
                metric: "max_rel_err".into(),
                value: report.max_rel_err,
            },
        ];
        io::save_metrics(&out.join("metrics.jsonl"), &records)?;
    }
    if !pass {
        return Err(Error::Data(format!(
            "gradient check failed: {:?}[{}] analytic {} vs numeric {}",
            report.worst_param,
            report.worst_index,
            report.analytic_at_worst,
            report.numeric_at_worst
        )));
    }
    Ok(())
}

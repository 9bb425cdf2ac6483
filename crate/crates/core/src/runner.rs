//! End-to-end run orchestration shared by the CLI and the test suites:
//! dataset preparation, training runs with on-disk artifacts, evaluation,
//! inference, and visualization files.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::netpbm::{write_pgm, write_ppm, LabelMap, NetpbmError, RgbImage};
use crate::data::{generate_synthetic, load_split, DataError, Dataset, Sample};
use crate::eval::{evaluate, eval_sample, visualize_sample, EvalReport};
use crate::metrics::UeVariant;
use crate::model::{ModelError, SegModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{train, Checkpoint, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Netpbm(#[from] NetpbmError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path, source: std::io::Error) -> RunnerError {
    RunnerError::Io { path: path.display().to_string(), source }
}

fn epoch_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Generate (or reuse) the synthetic dataset for a config and load both
/// splits into memory.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<(Dataset, Dataset), RunnerError> {
    let dir = cfg.dataset_dir();
    let mut spec = cfg.dataset.synthetic.clone();
    // the dataset derives its content seed from the run seed unless pinned
    if spec.seed == 0 {
        spec.seed = cfg.seed.wrapping_add(0x646174);
    }
    let manifest = generate_synthetic(&spec, cfg.dataset.val_count, &dir)?;
    let train_set = load_split(&manifest, &dir, "train")?;
    let val_set = load_split(&manifest, &dir, "val")?;
    Ok((train_set, val_set))
}

/// Artifacts of a completed training run.
pub struct TrainRun {
    pub report: TrainReport,
    pub final_eval: EvalReport,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Full training run: dataset, loop, final evaluation, artifacts on disk
/// (`effective_config.json`, `metrics.jsonl`, `checkpoint.json`,
/// `eval.json`).
pub fn train_run(cfg: &RunConfig) -> Result<TrainRun, RunnerError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    cfg.persist(&cfg.out_dir)?;
    let (train_set, val_set) = prepare_dataset(cfg)?;
    if train_set.is_empty() {
        return Err(RunnerError::Invalid("training split is empty".into()));
    }

    let val_for_eval = (!val_set.is_empty()).then_some(&val_set);
    let report = train(cfg, &train_set, val_for_eval)?;

    let model = rebuild_model(cfg, &report.store)?;
    let eval_set = if val_set.is_empty() { &train_set } else { &val_set };
    let final_eval = evaluate(&model, &report.store, cfg, eval_set, UeVariant::Min)?;

    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let mut lines: Vec<String> =
        report.records.iter().map(|r| serde_json::to_string(r).expect("record serializes")).collect();
    lines.push(
        serde_json::to_string(&json!({
            "step": report.steps_run,
            "final_eval": final_eval.to_json(),
        }))
        .expect("record serializes"),
    );
    std::fs::write(&metrics_path, lines.join("\n") + "\n").map_err(|e| io_err(&metrics_path, e))?;

    let checkpoint_path = cfg.out_dir.join("checkpoint.json");
    Checkpoint::capture(&report.store, Some(&report.optimizer), cfg, report.steps_run as u64)
        .save(&checkpoint_path)?;

    let eval_path = cfg.out_dir.join("eval.json");
    let eval_doc = json!({ "timestamp": epoch_seconds(), "report": final_eval.to_json() });
    std::fs::write(&eval_path, serde_json::to_string_pretty(&eval_doc).expect("serializes"))
        .map_err(|e| io_err(&eval_path, e))?;

    Ok(TrainRun { report, final_eval, checkpoint_path, metrics_path })
}

/// Rebuild the model skeleton for an existing store (must have been built
/// with the same config).
fn rebuild_model(cfg: &RunConfig, store: &ParamStore) -> Result<SegModel, RunnerError> {
    let mut check = ParamStore::new(store.seed());
    let model = SegModel::build(cfg, &mut check)?;
    if check.len() != store.len() {
        return Err(RunnerError::Invalid("store does not match model".into()));
    }
    Ok(model)
}

/// Build a model and load checkpoint weights into it.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(SegModel, ParamStore), RunnerError> {
    cfg.validate()?;
    let mut store = ParamStore::new(cfg.seed);
    let model = SegModel::build(cfg, &mut store)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.restore_into(&mut store, Some(&cfg.model_hash()))?;
    Ok((model, store))
}

/// Evaluate a checkpoint on the validation split; writes `eval.json` under
/// `out_dir` and returns the JSON document.
pub fn eval_run(cfg: &RunConfig, checkpoint: &Path) -> Result<serde_json::Value, RunnerError> {
    let (model, store) = load_model(cfg, checkpoint)?;
    let (_, val_set) = prepare_dataset(cfg)?;
    if val_set.is_empty() {
        return Err(RunnerError::Invalid("validation split is empty".into()));
    }
    let report = evaluate(&model, &store, cfg, &val_set, UeVariant::Min)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let doc = json!({ "timestamp": epoch_seconds(), "report": report.to_json() });
    let path = cfg.out_dir.join("eval.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).expect("serializes"))
        .map_err(|e| io_err(&path, e))?;
    Ok(doc)
}

fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width, img.height);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[c * h * w + y * w + x] = img.pixels[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image values are finite")
}

/// Run one external image through a checkpoint; writes the predicted
/// semantic map (and instance map for the mask-query head) as PGM files.
pub fn infer_run(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
) -> Result<Vec<PathBuf>, RunnerError> {
    let (model, store) = load_model(cfg, checkpoint)?;
    let img = crate::data::netpbm::read_ppm(input)?;
    let sample = Sample {
        image: image_to_tensor(&img),
        semantic: vec![0; img.width * img.height],
        instance: vec![0; img.width * img.height],
        height: img.height,
        width: img.width,
    };
    let ev = eval_sample(&model, &store, &sample)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let mut written = Vec::new();
    let sem_path = cfg.out_dir.join("pred_semantic.pgm");
    write_pgm(
        &sem_path,
        &LabelMap {
            width: img.width,
            height: img.height,
            labels: ev.pred_labels.iter().map(|&v| v as u16).collect(),
        },
    )?;
    written.push(sem_path);
    if let Some(instances) = &ev.pred_instances {
        let inst_path = cfg.out_dir.join("pred_instance.pgm");
        write_pgm(
            &inst_path,
            &LabelMap {
                width: img.width,
                height: img.height,
                labels: instances.iter().map(|&v| v as u16).collect(),
            },
        )?;
        written.push(inst_path);
    }
    Ok(written)
}

// display colors per class id (background, disk, rectangle, triangle, void)
const PALETTE: [[u8; 3]; 5] =
    [[125, 125, 125], [210, 60, 60], [60, 200, 70], [70, 80, 215], [0, 0, 0]];

fn label_image(labels: &[u32], w: usize, h: usize) -> RgbImage {
    let mut pixels = vec![0u8; w * h * 3];
    for (i, &l) in labels.iter().enumerate() {
        let color = PALETTE[(l as usize).min(PALETTE.len() - 1)];
        pixels[i * 3..i * 3 + 3].copy_from_slice(&color);
    }
    RgbImage { width: w, height: h, pixels }
}

fn boundary_overlay(base: &RgbImage, boundaries: &[bool]) -> RgbImage {
    let mut out = base.clone();
    for (i, &b) in boundaries.iter().enumerate() {
        if b {
            out.pixels[i * 3..i * 3 + 3].copy_from_slice(&[0, 0, 0]);
        }
    }
    out
}

fn leakage_overlay(base: &RgbImage, leakage: &[bool]) -> RgbImage {
    let mut out = base.clone();
    for (i, &l) in leakage.iter().enumerate() {
        if l {
            out.pixels[i * 3] = 255;
            out.pixels[i * 3 + 1] /= 4;
            out.pixels[i * 3 + 2] /= 4;
        }
    }
    out
}

fn tensor_to_image(t: &Tensor) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut pixels = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                pixels[(y * w + x) * 3 + c] =
                    (t.data()[c * h * w + y * w + x] * 255.0).clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage { width: w, height: h, pixels }
}


/// Per-level cluster-boundary and leakage overlays plus one prediction image
/// for a validation sample.
pub fn visualize_run(
    cfg: &RunConfig,
    checkpoint: &Path,
    sample_index: usize,
    levels: Option<&[usize]>,
) -> Result<Vec<PathBuf>, RunnerError> {
    let (model, store) = load_model(cfg, checkpoint)?;
    let (_, val_set) = prepare_dataset(cfg)?;
    let sample = val_set
        .samples
        .get(sample_index)
        .ok_or_else(|| RunnerError::Invalid(format!("sample index {sample_index} out of range")))?;
    let viz = visualize_sample(&model, &store, sample, UeVariant::Min)?;
    let base = tensor_to_image(&sample.image);
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let mut written = Vec::new();
    for (level, (boundaries, leakage)) in viz.per_level.iter().enumerate() {
        if let Some(filter) = levels {
            if !filter.contains(&level) {
                continue;
            }
        }
        let bpath = cfg.out_dir.join(format!("level{level}_boundaries.ppm"));
        write_ppm(&bpath, &boundary_overlay(&base, boundaries))?;
        written.push(bpath);
        let lpath = cfg.out_dir.join(format!("level{level}_leakage.ppm"));
        write_ppm(&lpath, &leakage_overlay(&base, leakage))?;
        written.push(lpath);
    }
    let ppath = cfg.out_dir.join("prediction.ppm");
    write_ppm(&ppath, &label_image(&viz.pred_labels, viz.width, viz.height))?;
    written.push(ppath);
    Ok(written)
}

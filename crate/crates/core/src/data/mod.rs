//! Dataset files on disk, their manifest, and the in-memory form consumed by
//! training and evaluation.

pub mod netpbm;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;
use netpbm::{LabelMap, NetpbmError, RgbImage};
use synth::{SyntheticSpec, NUM_CLASSES};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Netpbm(#[from] NetpbmError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Manifest { path: String, detail: String },
    #[error("{path}: image {image:?} and labels {labels:?} disagree in size")]
    SizeMismatch { path: String, image: (usize, usize), labels: (usize, usize) },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestItem {
    pub image: String,
    pub semantic: String,
    pub instance: String,
    pub split: String,
}

/// Dataset manifest written next to the generated files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub class_table: BTreeMap<u32, String>,
    pub items: Vec<ManifestItem>,
    /// Echo of the generating spec, when synthesized.
    pub synthetic_spec: Option<SyntheticSpec>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<PathBuf, DataError> {
        let path = dir.join(MANIFEST_NAME);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| DataError::Manifest {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

/// One sample held in memory.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[3, h, w]` in [0, 1].
    pub image: Tensor,
    pub semantic: Vec<u16>,
    pub instance: Vec<u16>,
    pub height: usize,
    pub width: usize,
}

impl Sample {
    fn from_parts(image: &RgbImage, semantic: &LabelMap, instance: &LabelMap) -> Sample {
        let (w, h) = (image.width, image.height);
        let mut data = vec![0.0f64; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[c * h * w + y * w + x] = image.pixels[(y * w + x) * 3 + c] as f64 / 255.0;
                }
            }
        }
        Sample {
            image: Tensor::new(vec![3, h, w], data).expect("image values are finite"),
            semantic: semantic.labels.clone(),
            instance: instance.labels.clone(),
            height: h,
            width: w,
        }
    }

    /// Ground-truth segments from the instance map (background included).
    pub fn segments(&self) -> Vec<GtSegment> {
        let mut by_id: BTreeMap<u16, GtSegment> = BTreeMap::new();
        for (i, (&inst, &sem)) in self.instance.iter().zip(&self.semantic).enumerate() {
            let seg = by_id.entry(inst).or_insert_with(|| GtSegment {
                instance_id: inst as u32,
                class: sem as usize,
                mask: vec![0.0; self.instance.len()],
            });
            seg.mask[i] = 1.0;
        }
        by_id.into_values().collect()
    }
}

/// Binary mask plus class of one ground-truth segment.
#[derive(Debug, Clone)]
pub struct GtSegment {
    pub instance_id: u32,
    pub class: usize,
    pub mask: Vec<f64>,
}

/// In-memory dataset split.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Generate `spec.count` samples under `dir` (images + label maps +
/// manifest), tagging the last `val_count` as the validation split. Files
/// already present with a matching spec are reused.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    val_count: usize,
    dir: &Path,
) -> Result<DatasetManifest, DataError> {
    assert!(val_count <= spec.count, "validation split exceeds dataset size");
    let manifest_path = dir.join(MANIFEST_NAME);
    if manifest_path.exists() {
        let existing = DatasetManifest::load(&manifest_path)?;
        if existing.synthetic_spec.as_ref() == Some(spec)
            && existing.items.iter().filter(|i| i.split == "val").count() == val_count
        {
            return Ok(existing);
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut items = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let sample = synth::render_sample(spec, i);
        let image = format!("img_{i:05}.ppm");
        let semantic = format!("sem_{i:05}.pgm");
        let instance = format!("inst_{i:05}.pgm");
        netpbm::write_ppm(&dir.join(&image), &sample.image)?;
        netpbm::write_pgm(&dir.join(&semantic), &sample.semantic)?;
        netpbm::write_pgm(&dir.join(&instance), &sample.instance)?;
        let split = if i + val_count >= spec.count { "val" } else { "train" };
        items.push(ManifestItem { image, semantic, instance, split: split.into() });
    }
    let manifest = DatasetManifest {
        schema_version: 1,
        class_table: (0..NUM_CLASSES as u32)
            .map(|i| (i, synth::CLASS_NAMES[i as usize].to_string()))
            .collect(),
        items,
        synthetic_spec: Some(spec.clone()),
    };
    manifest.save(dir)?;
    Ok(manifest)
}

/// Load one split ("train" or "val") of a manifest into memory.
pub fn load_split(manifest: &DatasetManifest, dir: &Path, split: &str) -> Result<Dataset, DataError> {
    let mut samples = Vec::new();
    for item in manifest.items.iter().filter(|i| i.split == split) {
        let image = netpbm::read_ppm(&dir.join(&item.image))?;
        let semantic = netpbm::read_pgm(&dir.join(&item.semantic))?;
        let instance = netpbm::read_pgm(&dir.join(&item.instance))?;
        if semantic.width != image.width
            || semantic.height != image.height
            || instance.width != image.width
            || instance.height != image.height
        {
            return Err(DataError::SizeMismatch {
                path: item.image.clone(),
                image: (image.width, image.height),
                labels: (semantic.width, semantic.height),
            });
        }
        samples.push(Sample::from_parts(&image, &semantic, &instance));
    }
    Ok(Dataset { samples, num_classes: manifest.class_table.len() })
}

//! Planted-structure classification task for smoke tests and examples.
//!
//! Each class owns a unit direction in the CLIP space and a few concepts
//! whose text embeddings sit near that direction. Image embeddings are the
//! class direction plus noise, and backbone features are a fixed random
//! linear map of the image embeddings, so a linear projector can recover
//! the CLIP-derived concept values exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FcbmError, Result};
use crate::io::{default_embeddings_path, write_concept_set, write_labels, write_matrix, ConceptSet, Dataset, DatasetManifest};
use crate::numeric::{column_mean_std, matmul, Matrix, Rng};
use crate::trainer::{AblationMode, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub concepts_per_class: usize,
    pub clip_dim: usize,
    pub backbone_dim: usize,
    /// Training samples; labels are balanced round-robin.
    pub samples: usize,
    /// Std of the isotropic noise added to image embeddings.
    pub image_noise: f64,
    /// Std of the noise separating a concept from its class direction.
    pub concept_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 4,
            concepts_per_class: 3,
            clip_dim: 16,
            backbone_dim: 32,
            samples: 400,
            image_noise: 0.15,
            concept_noise: 0.12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub config: SyntheticConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub concepts: ConceptSet,
    /// Class owning each concept.
    pub concept_class: Vec<usize>,
}

fn unit_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Orthonormal rows by Gram-Schmidt on Gaussian draws (`rows ≤ dim`).
fn orthonormal(rows: usize, dim: usize, rng: &mut Rng) -> Matrix {
    let mut out = Matrix::zeros(rows, dim);
    let mut i = 0;
    while i < rows {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for k in 0..i {
            let u = out.row(k);
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.row_mut(i).iter_mut().zip(&v).for_each(|(o, x)| *o = x / norm);
            i += 1;
        }
    }
    out
}

fn split(
    cfg: &SyntheticConfig,
    directions: &Matrix,
    mixing: &Matrix,
    samples: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    let labels: Vec<usize> = (0..samples).map(|i| i % cfg.classes).collect();
    let mut clip = Matrix::zeros(samples, cfg.clip_dim);
    for (i, &y) in labels.iter().enumerate() {
        for (k, v) in clip.row_mut(i).iter_mut().enumerate() {
            *v = directions.get(y, k) + cfg.image_noise * rng.normal();
        }
    }
    unit_rows(&mut clip);
    let clip = clip.round_to_f32();
    let backbone = matmul(&clip, mixing)?.round_to_f32();
    Dataset::new(backbone, clip, labels, cfg.classes)
}

impl SyntheticTask {
    pub fn generate(cfg: SyntheticConfig) -> Result<Self> {
        let mut rng = Rng::derive(cfg.seed, "synthetic");
        let directions = orthonormal(cfg.classes, cfg.clip_dim, &mut rng);
        let m = cfg.classes * cfg.concepts_per_class;
        let mut emb = Matrix::zeros(m, cfg.clip_dim);
        let mut names = Vec::with_capacity(m);
        let mut concept_class = Vec::with_capacity(m);
        for c in 0..cfg.classes {
            for k in 0..cfg.concepts_per_class {
                let row = c * cfg.concepts_per_class + k;
                for (j, v) in emb.row_mut(row).iter_mut().enumerate() {
                    *v = directions.get(c, j) + cfg.concept_noise * rng.normal();
                }
                names.push(format!("class {c} trait {k}"));
                concept_class.push(c);
            }
        }
        unit_rows(&mut emb);
        let mixing = rng.normal_matrix(cfg.clip_dim, cfg.backbone_dim, 1.0 / (cfg.clip_dim as f64).sqrt());
        let train = split(&cfg, &directions, &mixing, cfg.samples, &mut rng)?;
        let test = split(&cfg, &directions, &mixing, cfg.samples, &mut rng)?;
        let emb = emb.round_to_f32();
        Ok(SyntheticTask {
            config: cfg,
            train,
            test,
            concepts: ConceptSet::new(names, emb)?,
            concept_class,
        })
    }
}

/// Head-training settings for the synthetic task: decay 0.998 down to an NEC
/// threshold of 6 (half the pool), a 32-wide hypernetwork and 1000 epochs.
///
/// Longer budgets keep growing the learned temperature after decay stops,
/// and NEC grows with it.
pub fn suite_config(seed: u64, mode: AblationMode) -> TrainConfig {
    TrainConfig {
        epochs: 1000,
        nec_threshold: 6.0,
        decay_rate: 0.998,
        hidden: 32,
        hard_k: 3,
        seed,
        mode,
        ..TrainConfig::default()
    }
}

/// File paths written by [`SyntheticTask::write`].
#[derive(Debug, Clone)]
pub struct SyntheticFiles {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub concepts: PathBuf,
}

/// Writes `<split>.json` plus its tensors and labels.
pub fn write_split(data: &Dataset, split: &str, dir: &Path) -> Result<PathBuf> {
    let file = |suffix: &str| PathBuf::from(format!("{split}_{suffix}"));
    let manifest = DatasetManifest {
        split: split.into(),
        backbone_features: file("backbone.fcbt"),
        clip_features: file("clip.fcbt"),
        labels: file("labels.txt"),
        num_classes: data.num_classes,
    };
    write_matrix(&data.backbone, dir.join(&manifest.backbone_features))?;
    write_matrix(&data.clip, dir.join(&manifest.clip_features))?;
    write_labels(&data.labels, dir.join(&manifest.labels))?;
    let path = dir.join(format!("{split}.json"));
    manifest.save(&path)?;
    Ok(path)
}

impl SyntheticTask {
    /// Writes both splits and `concepts.txt`/`concepts.fcbt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<SyntheticFiles> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| FcbmError::io(dir, e))?;
        let concepts = dir.join("concepts.txt");
        write_concept_set(&self.concepts, &concepts, default_embeddings_path(&concepts))?;
        Ok(SyntheticFiles {
            train_manifest: write_split(&self.train, "train", dir)?,
            test_manifest: write_split(&self.test, "test", dir)?,
            concepts,
        })
    }
}

/// Perturbs every embedding coordinate by Gaussian noise with std
/// `relative_std ×` that dimension's std across the pool, and renames the
/// concepts so the pool fingerprint changes.
pub fn paraphrase(concepts: &ConceptSet, relative_std: f64, seed: u64) -> Result<ConceptSet> {
    let mut rng = Rng::derive(seed, "paraphrase");
    let t = concepts.embeddings();
    let (_, std) = column_mean_std(t, 0.0);
    let noisy = Matrix::from_fn(t.rows(), t.cols(), |i, j| t.get(i, j) + relative_std * std[j] * rng.normal());
    let names = concepts.names().iter().map(|n| format!("{n} (reworded)")).collect();
    ConceptSet::new(names, noisy.round_to_f32())
}

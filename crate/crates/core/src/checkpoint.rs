//! Trained head checkpoints (FCBM container, kind `head`).
//!
//! Values are held at `f32` precision in memory too, so saving and loading
//! is lossless.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, FcbmError, Result};
use crate::hypernet::{
    generate_weights, AlignmentStats, GeneratedWeights, HypernetParams, Linear, Selector, WeightMode,
};
use crate::io::{fingerprint, ConceptSet, Container};
use crate::numeric::{AdamConfig, Matrix};
use crate::projector::{
    projector_blobs, projector_from_blobs, stats_blobs, stats_from_blobs, ConceptValueStats,
    ProjectorWeights,
};
use crate::trainer::{AblationMode, TrainConfig};

pub(crate) const HEAD_KIND: &str = "head";

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCheckpoint {
    pub hypernet: HypernetParams,
    pub tau: f64,
    pub alignment: AlignmentStats,
    pub value_stats: ConceptValueStats,
    /// Sparse weights generated for `concepts`, `m × n`.
    pub weights: Matrix,
    pub concepts: Vec<String>,
    pub fingerprint: String,
    pub config: TrainConfig,
    pub adam: AdamConfig,
    pub decay_active: bool,
    /// Set once the head has been fine-tuned on an aligned (swapped) pool.
    pub finetuned: bool,
    pub projector: Option<ProjectorWeights>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectorMeta {
    fingerprint: String,
    trained: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    tau: f64,
    fingerprint: String,
    concepts: Vec<String>,
    embed_dim: usize,
    hidden: usize,
    classes: usize,
    config: TrainConfig,
    adam: AdamConfig,
    decay_active: bool,
    finetuned: bool,
    projector: Option<ProjectorMeta>,
}

impl HeadCheckpoint {
    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn num_classes(&self) -> usize {
        self.hypernet.classes()
    }

    pub fn selector(&self) -> Selector {
        match self.config.mode {
            AblationMode::Hard => Selector::TopK {
                k: self.config.hard_k,
            },
            _ => Selector::Sparsemax { tau: self.tau },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(FcbmError::Invariant(format!(
                "temperature must be positive, found {}",
                self.tau
            )));
        }
        self.hypernet.validate()?;
        let a = &self.alignment;
        for (name, v) in [("input", &a.input_std), ("output", &a.output_std), ("value", &self.value_stats.std)] {
            if let Some(s) = v.iter().find(|s| !(**s > 0.0)) {
                return Err(FcbmError::Invariant(format!("{name} std must be positive, found {s}")));
            }
        }
        let (d, n, m) = (self.hypernet.embed_dim(), self.num_classes(), self.num_concepts());
        if a.input_mean.len() != d || a.input_std.len() != d {
            return Err(dim_err!("input alignment stats cover {} dims, hypernetwork has d = {d}", a.input_mean.len()));
        }
        if a.output_mean.len() != n || a.output_std.len() != n {
            return Err(dim_err!("output alignment stats cover {} classes, hypernetwork has n = {n}", a.output_mean.len()));
        }
        if self.value_stats.len() != m || self.value_stats.std.len() != m {
            return Err(dim_err!("value stats cover {} concepts, checkpoint has m = {m}", self.value_stats.len()));
        }
        if self.weights.shape() != (m, n) {
            return Err(dim_err!("weights are {:?}, expected ({m}, {n})", self.weights.shape()));
        }
        if let Some(p) = &self.projector {
            if p.bias.len() != p.weights.cols() {
                return Err(dim_err!("projector bias/weights disagree"));
            }
        }
        Ok(())
    }

    /// Warning text when `pool` is not the pool this head was trained on.
    pub fn pool_warning(&self, pool: &ConceptSet) -> Option<String> {
        if pool.fingerprint() == self.fingerprint {
            None
        } else {
            Some(format!(
                "concept pool fingerprint {} differs from checkpoint {}; treating it as a swapped pool",
                &pool.fingerprint()[..12],
                &self.fingerprint[..self.fingerprint.len().min(12)]
            ))
        }
    }

    /// Trained mode only for the exact pool a non-fine-tuned head was trained on.
    pub fn natural_mode(&self, pool: &ConceptSet) -> WeightMode {
        if !self.finetuned && pool.fingerprint() == self.fingerprint {
            WeightMode::Trained
        } else {
            WeightMode::Swap
        }
    }

    pub fn weights_for(&self, pool: &ConceptSet, mode: WeightMode) -> Result<GeneratedWeights> {
        generate_weights(
            &self.hypernet,
            Some(&self.alignment),
            pool.embeddings(),
            mode,
            self.selector(),
        )
    }

    fn to_container(&self) -> Container {
        let meta = HeadMeta {
            tau: self.tau,
            fingerprint: self.fingerprint.clone(),
            concepts: self.concepts.clone(),
            embed_dim: self.hypernet.embed_dim(),
            hidden: self.hypernet.hidden(),
            classes: self.num_classes(),
            config: self.config.clone(),
            adam: self.adam,
            decay_active: self.decay_active,
            finetuned: self.finetuned,
            projector: self.projector.as_ref().map(|p| ProjectorMeta {
                fingerprint: p.fingerprint.clone(),
                trained: p.trained,
            }),
        };
        let mut blobs = Vec::new();
        for (i, l) in self.hypernet.layers.iter().enumerate() {
            blobs.push((format!("hypernet.{i}.weight"), l.weight.clone()));
            blobs.push((format!("hypernet.{i}.bias"), Matrix::row_vector(&l.bias)));
        }
        let a = &self.alignment;
        blobs.push(("align.input_mean".into(), Matrix::row_vector(&a.input_mean)));
        blobs.push(("align.input_std".into(), Matrix::row_vector(&a.input_std)));
        blobs.push(("align.output_mean".into(), Matrix::row_vector(&a.output_mean)));
        blobs.push(("align.output_std".into(), Matrix::row_vector(&a.output_std)));
        blobs.extend(stats_blobs("value", &self.value_stats));
        blobs.push(("head.weights".into(), self.weights.clone()));
        if let Some(p) = &self.projector {
            blobs.extend(projector_blobs(p));
        }
        Container {
            kind: HEAD_KIND.into(),
            meta: serde_json::to_value(meta).expect("meta serializes"),
            blobs,
        }
    }

    fn from_container(c: &Container) -> Result<Self> {
        if c.kind != HEAD_KIND {
            return Err(FcbmError::Format(format!(
                "expected a head checkpoint, found kind {:?}",
                c.kind
            )));
        }
        let meta: HeadMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| FcbmError::Format(format!("checkpoint header: {e}")))?;
        if !(meta.tau > 0.0) {
            return Err(FcbmError::Invariant(format!(
                "temperature must be positive, found {}",
                meta.tau
            )));
        }
        let layer = |i: usize| -> Result<Linear> {
            Ok(Linear {
                weight: c.blob(&format!("hypernet.{i}.weight"))?.clone(),
                bias: c.blob(&format!("hypernet.{i}.bias"))?.data().to_vec(),
            })
        };
        let hypernet = HypernetParams::from_layers([layer(0)?, layer(1)?, layer(2)?])?;
        if (hypernet.embed_dim(), hypernet.hidden(), hypernet.classes())
            != (meta.embed_dim, meta.hidden, meta.classes)
        {
            return Err(FcbmError::Format("header shapes disagree with hypernetwork blobs".into()));
        }
        let vec_blob = |name: &str| -> Result<Vec<f64>> { Ok(c.blob(name)?.data().to_vec()) };
        let alignment = AlignmentStats {
            input_mean: vec_blob("align.input_mean")?,
            input_std: vec_blob("align.input_std")?,
            output_mean: vec_blob("align.output_mean")?,
            output_std: vec_blob("align.output_std")?,
        };
        let value_stats = stats_from_blobs(c, "value")?;
        let projector = match meta.projector {
            Some(p) => Some(projector_from_blobs(c, p.fingerprint, p.trained)?),
            None => None,
        };
        let ckpt = HeadCheckpoint {
            hypernet,
            tau: meta.tau,
            alignment,
            value_stats,
            weights: c.blob("head.weights")?.clone(),
            concepts: meta.concepts,
            fingerprint: meta.fingerprint,
            config: meta.config,
            adam: meta.adam,
            decay_active: meta.decay_active,
            finetuned: meta.finetuned,
            projector,
        };
        if fingerprint(&ckpt.concepts) != ckpt.fingerprint {
            return Err(FcbmError::Format(
                "stored fingerprint does not match stored concept names".into(),
            ));
        }
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        Ok(self.to_container().to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        HeadCheckpoint::from_container(&Container::from_bytes(bytes)?)
    }
}

pub fn save_checkpoint(ckpt: &HeadCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.validate()?;
    ckpt.to_container().write(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<HeadCheckpoint> {
    let path = path.as_ref();
    let c = Container::read(path)?;
    HeadCheckpoint::from_container(&c).map_err(|e| match e {
        FcbmError::Format(m) => FcbmError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a checkpoint for use with `pool`; a fingerprint mismatch is reported, not rejected.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    pool: &ConceptSet,
) -> Result<(HeadCheckpoint, Option<String>)> {
    let ckpt = load_checkpoint(path)?;
    let warning = ckpt.pool_warning(pool);
    Ok((ckpt, warning))
}

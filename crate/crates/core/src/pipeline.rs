//! Glue between the stages: choosing concept values for a pool and
//! evaluating a head on a split.
//!
//! Concept values come from one of three sources:
//!
//! | pool vs checkpoint                         | values                                   |
//! |--------------------------------------------|------------------------------------------|
//! | same pool, projector trained on it         | projector output, stored stats           |
//! | same pool, no matching projector           | `z·tᵀ`, stored stats                     |
//! | different pool                             | `z·t′ᵀ`, stats fitted on the given split |

use serde::Serialize;

use crate::checkpoint::HeadCheckpoint;
use crate::error::Result;
use crate::hypernet::{head_logits, WeightMode};
use crate::io::{ConceptSet, Dataset};
use crate::metrics::{accuracy, nec};
use crate::numeric::Matrix;
use crate::projector::{clip_concept_features, project_concepts, ConceptValueStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueSource {
    Projector,
    ClipStored,
    ClipFresh,
}

#[derive(Debug, Clone)]
pub struct ConceptValues {
    /// Standardized values, `N × m`.
    pub values: Matrix,
    /// Values before standardization.
    pub raw: Matrix,
    pub stats: ConceptValueStats,
    pub source: ValueSource,
}

/// Standardized CLIP-derived values with statistics fitted on `clip` itself.
pub fn fresh_clip_values(pool: &ConceptSet, clip: &Matrix) -> Result<ConceptValues> {
    let raw = clip_concept_features(clip, pool.embeddings())?;
    let stats = ConceptValueStats::fit(&raw).round_to_f32();
    Ok(ConceptValues {
        values: stats.standardize(&raw)?,
        raw,
        stats,
        source: ValueSource::ClipFresh,
    })
}

pub fn concept_values(ckpt: &HeadCheckpoint, pool: &ConceptSet, data: &Dataset) -> Result<ConceptValues> {
    let fp = pool.fingerprint();
    if fp != ckpt.fingerprint {
        return fresh_clip_values(pool, &data.clip);
    }
    let stats = ckpt.value_stats.clone();
    match &ckpt.projector {
        Some(p) if p.fingerprint == fp => {
            let raw = p.predict(&data.backbone)?;
            Ok(ConceptValues {
                values: project_concepts(p, &stats, &data.backbone)?,
                raw,
                stats,
                source: ValueSource::Projector,
            })
        }
        _ => {
            let raw = clip_concept_features(&data.clip, pool.embeddings())?;
            Ok(ConceptValues {
                values: stats.standardize(&raw)?,
                raw,
                stats,
                source: ValueSource::ClipStored,
            })
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub nec: f64,
    #[serde(serialize_with = "mode_name")]
    pub mode: WeightMode,
    pub values: ValueSource,
    pub samples: usize,
    /// Floored alignment dimensions plus degenerate hypernetwork rows.
    pub diagnostics: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn mode_name<S: serde::Serializer>(mode: &WeightMode, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(match mode {
        WeightMode::Trained => "trained",
        WeightMode::Swap => "swap",
    })
}

/// Generates weights for `pool` in `mode` and scores them on `data`.
pub fn evaluate_pool(
    ckpt: &HeadCheckpoint,
    pool: &ConceptSet,
    data: &Dataset,
    mode: WeightMode,
) -> Result<(EvalReport, Matrix)> {
    let generated = ckpt.weights_for(pool, mode)?;
    let values = concept_values(ckpt, pool, data)?;
    let logits = head_logits(&values.values, &generated.weights)?;
    let report = EvalReport {
        accuracy: accuracy(&logits, &data.labels),
        nec: nec(&generated.weights),
        mode,
        values: values.source,
        samples: data.len(),
        diagnostics: generated.diagnostics,
        warning: ckpt.pool_warning(pool),
    };
    Ok((report, generated.weights))
}

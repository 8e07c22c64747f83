//! Stage 1: a linear concept predictor trained against CLIP-derived concept features.
//!
//! The similarity between a predicted concept column `q` and its target `c`
//! is the cosine of the two columns after centering over samples; the loss
//! is `−Σⱼ ρⱼ³`. Centering makes the loss blind to per-column shifts and
//! positive rescaling of the targets, so only activation patterns matter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, FcbmError, Result};
use crate::io::Container;
use crate::numeric::{column_mean_std, matmul, matmul_nt, matmul_tn, AdamConfig, AdamState, Matrix, Rng};

/// Floor on every stored standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// Full batch up to this many samples, mini-batches of this size above it.
pub const DEFAULT_BATCH: usize = 50_000;

/// `c = z · tᵀ`: image/concept inner products in the shared embedding space.
pub fn clip_concept_features(z: &Matrix, t: &Matrix) -> Result<Matrix> {
    if z.cols() != t.cols() {
        return Err(dim_err!(
            "image features have d = {}, concept embeddings d = {}",
            z.cols(),
            t.cols()
        ));
    }
    matmul_nt(z, t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorWeights {
    /// `D_b × m`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub trained: bool,
    pub fingerprint: String,
}

impl ProjectorWeights {
    /// Uniform in `±1/√D_b`, zero bias.
    pub fn init(backbone_dim: usize, concepts: usize, fingerprint: &str, rng: &mut Rng) -> Self {
        let bound = 1.0 / (backbone_dim.max(1) as f64).sqrt();
        ProjectorWeights {
            weights: rng.uniform_matrix(backbone_dim, concepts, bound),
            bias: vec![0.0; concepts],
            trained: false,
            fingerprint: fingerprint.to_string(),
        }
    }

    pub fn backbone_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn concepts(&self) -> usize {
        self.weights.cols()
    }

    /// Raw concept predictions `features · W + bias`.
    pub fn predict(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.backbone_dim() {
            return Err(dim_err!(
                "features have D_b = {}, projector expects {}",
                features.cols(),
                self.backbone_dim()
            ));
        }
        let mut q = matmul(features, &self.weights)?;
        q.add_row_broadcast(&self.bias)?;
        Ok(q)
    }

    pub fn round_to_f32(&self) -> Self {
        ProjectorWeights {
            weights: self.weights.round_to_f32(),
            bias: self.bias.iter().map(|&b| b as f32 as f64).collect(),
            trained: self.trained,
            fingerprint: self.fingerprint.clone(),
        }
    }
}

/// Per-concept standardization applied before the head.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptValueStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ConceptValueStats {
    pub fn fit(values: &Matrix) -> Self {
        let (mean, std) = column_mean_std(values, STD_FLOOR);
        ConceptValueStats { mean, std }
    }

    pub fn identity(m: usize) -> Self {
        ConceptValueStats {
            mean: vec![0.0; m],
            std: vec![1.0; m],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn standardize(&self, values: &Matrix) -> Result<Matrix> {
        if values.cols() != self.len() {
            return Err(dim_err!(
                "{} concept columns, stats cover {}",
                values.cols(),
                self.len()
            ));
        }
        let mut out = values.clone();
        for i in 0..out.rows() {
            for ((x, mu), sd) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - mu) / sd;
            }
        }
        Ok(out)
    }

    pub fn round_to_f32(&self) -> Self {
        let r = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect();
        ConceptValueStats {
            mean: r(&self.mean),
            std: r(&self.std),
        }
    }
}

/// Cosine-cubed loss and its gradient with respect to `q`.
pub fn cos3_loss(q: &Matrix, c: &Matrix) -> Result<(f64, Matrix)> {
    if q.shape() != c.shape() {
        return Err(dim_err!(
            "prediction {:?} and target {:?} shapes differ",
            q.shape(),
            c.shape()
        ));
    }
    let n = q.rows();
    if n < 2 {
        return Err(FcbmError::Invariant(format!(
            "cosine similarity over samples needs N >= 2, got {n}"
        )));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, q.cols());
    for j in 0..q.cols() {
        let qc = centered(&q.column(j));
        let cc = centered(&c.column(j));
        let a = norm(&qc);
        let b = norm(&cc);
        if a < 1e-12 || b < 1e-12 {
            return Err(FcbmError::Numeric(format!(
                "concept {j}: constant column has no centered signal"
            )));
        }
        let rho = dot(&qc, &cc) / (a * b);
        loss -= rho.powi(3);
        // dρ/dq̂ = ĉ/(ab) − ρ·q̂/a², then the centering projection
        let coeff = -3.0 * rho * rho;
        let d: Vec<f64> = qc
            .iter()
            .zip(&cc)
            .map(|(qi, ci)| ci / (a * b) - rho * qi / (a * a))
            .collect();
        let d = centered(&d);
        for (i, di) in d.iter().enumerate() {
            grad.set(i, j, coeff * di);
        }
    }
    Ok((loss, grad))
}

/// Per-column centered cosine, without the cube.
pub fn column_cosines(q: &Matrix, c: &Matrix) -> Result<Vec<f64>> {
    if q.shape() != c.shape() {
        return Err(dim_err!("shapes {:?} and {:?} differ", q.shape(), c.shape()));
    }
    Ok((0..q.cols())
        .map(|j| {
            let qc = centered(&q.column(j));
            let cc = centered(&c.column(j));
            dot(&qc, &cc) / (norm(&qc) * norm(&cc)).max(1e-300)
        })
        .collect())
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            epochs: 1000,
            lr: 1e-3,
            seed: 0,
            batch_size: DEFAULT_BATCH,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProjectorFit {
    pub weights: ProjectorWeights,
    pub stats: ConceptValueStats,
    /// Mean loss per epoch.
    pub losses: Vec<f64>,
}

/// Adam on `cos3_loss(features·W + b, c)`.
pub fn train_projector(
    features: &Matrix,
    c: &Matrix,
    fingerprint: &str,
    config: &ProjectorConfig,
) -> Result<ProjectorFit> {
    if features.rows() != c.rows() {
        return Err(dim_err!(
            "{} feature rows vs {} concept-target rows",
            features.rows(),
            c.rows()
        ));
    }
    let mut rng = Rng::derive(config.seed, "projector");
    let mut weights = ProjectorWeights::init(features.cols(), c.cols(), fingerprint, &mut rng);
    let adam = AdamConfig::with_lr(config.lr);
    let mut w_state = AdamState::new(weights.weights.data().len(), adam);
    let mut b_state = AdamState::new(weights.bias.len(), adam);

    let n = features.rows();
    let batch = config.batch_size.max(2);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let batches: Vec<Vec<usize>> = if n <= batch {
            vec![order.clone()]
        } else {
            rng.shuffle(&mut order);
            order
                .chunks(batch)
                .filter(|b| b.len() >= 2)
                .map(|b| b.to_vec())
                .collect()
        };
        let mut epoch_loss = 0.0;
        for idx in &batches {
            let (x, target) = if batches.len() == 1 {
                (features.clone(), c.clone())
            } else {
                (features.select_rows(idx), c.select_rows(idx))
            };
            let q = weights.predict(&x)?;
            let (loss, d_q) = cos3_loss(&q, &target)?;
            if !loss.is_finite() {
                return Err(FcbmError::Numeric(format!(
                    "projector loss became non-finite at epoch {epoch}"
                )));
            }
            epoch_loss += loss;
            let d_w = matmul_tn(&x, &d_q)?;
            let d_b = d_q.column_sums();
            w_state.step(weights.weights.data_mut(), d_w.data())?;
            b_state.step(&mut weights.bias, &d_b)?;
        }
        losses.push(epoch_loss / batches.len() as f64);
    }
    weights.trained = config.epochs > 0;
    let stats = ConceptValueStats::fit(&weights.predict(features)?);
    Ok(ProjectorFit {
        weights,
        stats,
        losses,
    })
}

/// Standardized concept values `(features·W + b − mean) / std`.
pub fn project_concepts(
    weights: &ProjectorWeights,
    stats: &ConceptValueStats,
    features: &Matrix,
) -> Result<Matrix> {
    stats.standardize(&weights.predict(features)?)
}

pub(crate) const PROJECTOR_KIND: &str = "projector";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectorMeta {
    fingerprint: String,
    trained: bool,
}

pub(crate) fn projector_blobs(w: &ProjectorWeights) -> Vec<(String, Matrix)> {
    vec![
        ("projector.weights".into(), w.weights.clone()),
        ("projector.bias".into(), Matrix::row_vector(&w.bias)),
    ]
}

pub(crate) fn projector_from_blobs(
    c: &Container,
    fingerprint: String,
    trained: bool,
) -> Result<ProjectorWeights> {
    let weights = c.blob("projector.weights")?.clone();
    let bias = c.blob("projector.bias")?.data().to_vec();
    if bias.len() != weights.cols() {
        return Err(FcbmError::Format(format!(
            "projector bias has {} entries for {} concepts",
            bias.len(),
            weights.cols()
        )));
    }
    Ok(ProjectorWeights {
        weights,
        bias,
        trained,
        fingerprint,
    })
}

pub(crate) fn stats_blobs(prefix: &str, s: &ConceptValueStats) -> Vec<(String, Matrix)> {
    vec![
        (format!("{prefix}.mean"), Matrix::row_vector(&s.mean)),
        (format!("{prefix}.std"), Matrix::row_vector(&s.std)),
    ]
}

pub(crate) fn stats_from_blobs(c: &Container, prefix: &str) -> Result<ConceptValueStats> {
    let mean = c.blob(&format!("{prefix}.mean"))?.data().to_vec();
    let std = c.blob(&format!("{prefix}.std"))?.data().to_vec();
    if mean.len() != std.len() {
        return Err(FcbmError::Format(format!("{prefix} mean/std lengths differ")));
    }
    if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
        return Err(FcbmError::Invariant(format!(
            "{prefix} std must be positive, found {s}"
        )));
    }
    Ok(ConceptValueStats { mean, std })
}

/// Writes a standalone projector file (FCBM container, kind `projector`).
pub fn save_projector(
    weights: &ProjectorWeights,
    stats: &ConceptValueStats,
    path: impl AsRef<Path>,
) -> Result<()> {
    let meta = ProjectorMeta {
        fingerprint: weights.fingerprint.clone(),
        trained: weights.trained,
    };
    let mut blobs = projector_blobs(weights);
    blobs.extend(stats_blobs("value", stats));
    Container {
        kind: PROJECTOR_KIND.into(),
        meta: serde_json::to_value(meta).expect("meta serializes"),
        blobs,
    }
    .write(path)
}

pub fn load_projector(path: impl AsRef<Path>) -> Result<(ProjectorWeights, ConceptValueStats)> {
    let c = Container::read(path.as_ref())?;
    if c.kind != PROJECTOR_KIND {
        return Err(FcbmError::Format(format!(
            "{}: expected a projector file, found kind {:?}",
            path.as_ref().display(),
            c.kind
        )));
    }
    let meta: ProjectorMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| FcbmError::Format(format!("projector meta: {e}")))?;
    let weights = projector_from_blobs(&c, meta.fingerprint, meta.trained)?;
    let stats = stats_from_blobs(&c, "value")?;
    if stats.len() != weights.concepts() {
        return Err(dim_err!(
            "value stats cover {} concepts, projector has {}",
            stats.len(),
            weights.concepts()
        ));
    }
    Ok((weights, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, max_rel_error};

    #[test]
    fn self_similarity_and_orthogonality() {
        let z = Matrix::from_rows(&[[0.6, 0.8]]);
        assert!((clip_concept_features(&z, &z).unwrap().get(0, 0) - 1.0).abs() < 1e-12);
        let t = Matrix::from_rows(&[[0.8, -0.6]]);
        assert_eq!(clip_concept_features(&z, &t).unwrap().get(0, 0), 0.0);
        assert!(clip_concept_features(&z, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn clip_features_match_naive_loop() {
        let mut rng = Rng::new(2);
        let z = rng.uniform_matrix(4, 8, 1.0);
        let t = rng.uniform_matrix(3, 8, 1.0);
        let c = clip_concept_features(&z, &t).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let naive: f64 = (0..8).map(|k| z.get(i, k) * t.get(j, k)).sum();
                assert!((c.get(i, j) - naive).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn perfect_match_gives_minus_m() {
        let mut rng = Rng::new(4);
        let q = rng.uniform_matrix(6, 3, 1.0);
        let (loss, _) = cos3_loss(&q, &q).unwrap();
        assert!((loss + 3.0).abs() < 1e-12);
    }

    #[test]
    fn centered_orthogonal_contributes_zero() {
        let q = Matrix::from_rows(&[[1.0], [-1.0], [1.0], [-1.0]]);
        let c = Matrix::from_rows(&[[1.0], [1.0], [-1.0], [-1.0]]);
        let (loss, _) = cos3_loss(&q, &c).unwrap();
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn scalar_worked_example() {
        // q̂ = [-1, 0, 1], ĉ = [-4/3, -1/3, 5/3]: ρ = 3 / (√2 · √42/3)
        let q = Matrix::from_rows(&[[1.0], [2.0], [3.0]]);
        let c = Matrix::from_rows(&[[1.0], [2.0], [4.0]]);
        let rho = 3.0 / (2f64.sqrt() * 42f64.sqrt() / 3.0);
        assert!((rho - 0.98198).abs() < 1e-5);
        let (loss, _) = cos3_loss(&q, &c).unwrap();
        assert!((loss + rho.powi(3)).abs() < 1e-12);
        assert!((loss + 0.9469).abs() < 1e-4);
    }

    #[test]
    fn constant_column_is_numeric_error() {
        let q = Matrix::from_rows(&[[1.0, 2.0], [1.0, 3.0]]);
        let c = Matrix::from_rows(&[[0.0, 1.0], [1.0, 2.0]]);
        match cos3_loss(&q, &c) {
            Err(FcbmError::Numeric(msg)) => assert!(msg.contains("concept 0")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            cos3_loss(&Matrix::zeros(1, 2), &Matrix::zeros(1, 2)),
            Err(FcbmError::Invariant(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let q = rng.uniform_matrix(5, 3, 1.0);
        let c = rng.uniform_matrix(5, 3, 1.0);
        let (_, grad) = cos3_loss(&q, &c).unwrap();
        let fd = finite_diff_grad(
            |x| cos3_loss(&Matrix::new(5, 3, x.to_vec()).unwrap(), &c).unwrap().0,
            q.data(),
            1e-6,
        )
        .unwrap();
        assert!(max_rel_error(grad.data(), &fd, 1e-6) <= 1e-3);
    }

    #[test]
    fn invariant_to_target_shift_and_scale() {
        let mut rng = Rng::new(10);
        let q = rng.uniform_matrix(7, 2, 1.0);
        let c = rng.uniform_matrix(7, 2, 1.0);
        let c2 = Matrix::from_fn(7, 2, |i, j| c.get(i, j) * [3.0, 0.2][j] + [5.0, -1.0][j]);
        let (l1, _) = cos3_loss(&q, &c).unwrap();
        let (l2, _) = cos3_loss(&q, &c2).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let mut rng = Rng::new(1);
        let x = rng.uniform_matrix(10, 4, 1.0);
        let c = rng.uniform_matrix(10, 3, 1.0);
        let cfg = ProjectorConfig {
            epochs: 0,
            seed: 5,
            ..Default::default()
        };
        let fit = train_projector(&x, &c, "fp", &cfg).unwrap();
        let init = ProjectorWeights::init(4, 3, "fp", &mut Rng::derive(5, "projector"));
        assert_eq!(fit.weights, init);
        assert!(!fit.weights.trained);
        assert!(fit.losses.is_empty());
    }

    #[test]
    fn identity_stats_give_raw_projection() {
        let mut rng = Rng::new(6);
        let w = ProjectorWeights::init(4, 3, "fp", &mut rng);
        let x = rng.uniform_matrix(5, 4, 1.0);
        let raw = w.predict(&x).unwrap();
        let out = project_concepts(&w, &ConceptValueStats::identity(3), &x).unwrap();
        assert_eq!(raw, out);
    }

    #[test]
    fn projection_matches_recomputation() {
        let mut rng = Rng::new(8);
        let mut w = ProjectorWeights::init(4, 3, "fp", &mut rng);
        w.bias = vec![0.1, -0.2, 0.3];
        let stats = ConceptValueStats {
            mean: vec![0.5, -0.5, 1.0],
            std: vec![2.0, 0.5, 1.5],
        };
        let x = rng.uniform_matrix(6, 4, 1.0);
        let out = project_concepts(&w, &stats, &x).unwrap();
        for i in 0..6 {
            for j in 0..3 {
                let raw: f64 =
                    (0..4).map(|k| x.get(i, k) * w.weights.get(k, j)).sum::<f64>() + w.bias[j];
                let expected = (raw - stats.mean[j]) / stats.std[j];
                assert!((out.get(i, j) - expected).abs() <= 1e-5);
            }
        }
    }
}

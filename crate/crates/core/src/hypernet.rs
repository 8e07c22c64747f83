//! Hypernetwork head.
//!
//! `h: ℝᵈ → ℝⁿ` maps each concept embedding to a row of class weights:
//! linear → ReLU → linear → ReLU → linear, then each output row is
//! l2-normalized. A column-wise sparsifier (sparsemax with temperature, or
//! top-K truncation for the ablation) turns `h(t)` into the sparse `m × n`
//! weight matrix `W`, and logits are `Q_norm · W`.
//!
//! For an unseen concept pool `t′` the embeddings and the generated weights
//! are both moved onto the training pool's per-dimension distribution:
//!
//! ```text
//! t̃′   = σ_t / σ_{t′} · (t′ − mean(t′)) + mean(t)
//! h̃(t′) = σ_{h(t)} / σ_{h(t̃′)} · (h(t̃′) − mean(h(t̃′))) + mean(h(t))
//! ```
//!
//! Statistics are population (divide by m) with a `1e-6` floor on every std.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, FcbmError, Result};
use crate::numeric::{column_mean_std, matmul, matmul_nt, matmul_tn, Matrix, Rng};
use crate::projector::STD_FLOOR;
use crate::sparsemax::{sparsemax_columns, sparsemax_columns_backward, SparsemaxResult};

/// Guard on the l2-normalization denominator.
pub const NORM_EPS: f64 = 1e-12;

pub const DEFAULT_HIDDEN: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `fan_in × fan_out`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Uniform in `±1/√fan_in` for both weight and bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weight = rng.uniform_matrix(fan_in, fan_out, bound);
        let bias = (0..fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        Linear { weight, bias }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = matmul(x, &self.weight)?;
        out.add_row_broadcast(&self.bias)?;
        Ok(out)
    }
}

/// Gradients of `y = x·W + b`: returns `(dW, db, dx)`.
pub fn linear_backward(x: &Matrix, weight: &Matrix, d_out: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let d_w = matmul_tn(x, d_out)?;
    let d_b = d_out.column_sums();
    let d_x = matmul_nt(d_out, weight)?;
    Ok((d_w, d_b, d_x))
}

/// Three linear layers `d → hidden → hidden → n`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypernetParams {
    pub layers: [Linear; 3],
}

impl HypernetParams {
    pub fn init(embed_dim: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Self {
        HypernetParams {
            layers: [
                Linear::init(embed_dim, hidden, rng),
                Linear::init(hidden, hidden, rng),
                Linear::init(hidden, classes, rng),
            ],
        }
    }

    pub fn from_layers(layers: [Linear; 3]) -> Result<Self> {
        let p = HypernetParams { layers };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.weight.cols() {
                return Err(dim_err!("layer {i}: bias length {} for {} outputs", l.bias.len(), l.weight.cols()));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(FcbmError::Numeric(format!("layer {i} has non-finite parameters")));
            }
        }
        for i in 0..2 {
            if self.layers[i].weight.cols() != self.layers[i + 1].weight.rows() {
                return Err(dim_err!(
                    "layer {i} emits {} features, layer {} expects {}",
                    self.layers[i].weight.cols(),
                    i + 1,
                    self.layers[i + 1].weight.rows()
                ));
            }
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn classes(&self) -> usize {
        self.layers[2].weight.cols()
    }

    pub fn zeros_like(&self) -> Self {
        HypernetParams {
            layers: [
                self.layers[0].zeros_like(),
                self.layers[1].zeros_like(),
                self.layers[2].zeros_like(),
            ],
        }
    }

    /// Parameter slices in a fixed order: `w1, b1, w2, b2, w3, b3`.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(6);
        for l in self.layers.iter_mut() {
            out.push(l.weight.data_mut());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(6);
        for l in &self.layers {
            out.push(l.weight.data());
            out.push(l.bias.as_slice());
        }
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    /// Same shapes as `self`, values taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        let total: usize = self.slices().iter().map(|s| s.len()).sum();
        if flat.len() != total {
            return Err(dim_err!("{} flat values for {total} parameters", flat.len()));
        }
        let mut offset = 0;
        for s in out.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(out)
    }

    pub fn round_to_f32(&self) -> Self {
        let mut out = self.clone();
        for s in out.slices_mut() {
            s.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        out
    }
}

/// Intermediates of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HypernetForward {
    pub input: Matrix,
    pre1: Matrix,
    act1: Matrix,
    pre2: Matrix,
    act2: Matrix,
    norms: Vec<f64>,
    /// `m × n`, rows of unit norm.
    pub output: Matrix,
    /// Rows whose pre-normalization norm fell under [`NORM_EPS`].
    pub degenerate_rows: usize,
}

impl HypernetForward {
    /// Smallest `|pre-activation|` over both ReLU layers.
    pub fn relu_margin(&self) -> f64 {
        self.pre1
            .data()
            .iter()
            .chain(self.pre2.data())
            .map(|x| x.abs())
            .fold(f64::INFINITY, f64::min)
    }
}

fn relu(m: &Matrix) -> Matrix {
    m.map(|x| x.max(0.0))
}

pub fn hypernet_forward(params: &HypernetParams, t: &Matrix) -> Result<HypernetForward> {
    if t.cols() != params.embed_dim() {
        return Err(dim_err!(
            "concept embeddings have d = {}, hypernetwork expects {}",
            t.cols(),
            params.embed_dim()
        ));
    }
    let [l1, l2, l3] = &params.layers;
    let pre1 = l1.forward(t)?;
    let act1 = relu(&pre1);
    let pre2 = l2.forward(&act1)?;
    let act2 = relu(&pre2);
    let raw = l3.forward(&act2)?;

    let mut output = raw;
    let mut norms = Vec::with_capacity(output.rows());
    let mut degenerate_rows = 0;
    for i in 0..output.rows() {
        let row = output.row_mut(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < NORM_EPS {
            degenerate_rows += 1;
        }
        let denom = norm.max(NORM_EPS);
        row.iter_mut().for_each(|x| *x /= denom);
        norms.push(norm);
    }
    if !output.is_finite() {
        return Err(FcbmError::Numeric("hypernetwork output is non-finite".into()));
    }
    Ok(HypernetForward {
        input: t.clone(),
        pre1,
        act1,
        pre2,
        act2,
        norms,
        output,
        degenerate_rows,
    })
}

#[derive(Debug, Clone)]
pub struct HypernetGrads {
    pub params: HypernetParams,
    pub input: Option<Matrix>,
}

/// Backpropagates `dH` (gradient w.r.t. the normalized output).
pub fn hypernet_backward(
    params: &HypernetParams,
    fwd: &HypernetForward,
    d_h: &Matrix,
    want_input_grad: bool,
) -> Result<HypernetGrads> {
    if d_h.shape() != fwd.output.shape() {
        return Err(dim_err!(
            "output gradient {:?} vs hypernetwork output {:?}",
            d_h.shape(),
            fwd.output.shape()
        ));
    }
    // l2 normalization: for ‖x‖ ≥ eps, dx = (dy − y·⟨y, dy⟩) / ‖x‖
    let mut d_raw = d_h.clone();
    for i in 0..d_raw.rows() {
        let y = fwd.output.row(i);
        let norm = fwd.norms[i];
        let row = d_raw.row_mut(i);
        if norm >= NORM_EPS {
            let proj: f64 = y.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            for (d, yi) in row.iter_mut().zip(y) {
                *d = (*d - yi * proj) / norm;
            }
        } else {
            row.iter_mut().for_each(|d| *d /= NORM_EPS);
        }
    }

    let [l1, l2, l3] = &params.layers;
    let (dw3, db3, d_act2) = linear_backward(&fwd.act2, &l3.weight, &d_raw)?;
    let d_pre2 = mask_relu(&d_act2, &fwd.pre2);
    let (dw2, db2, d_act1) = linear_backward(&fwd.act1, &l2.weight, &d_pre2)?;
    let d_pre1 = mask_relu(&d_act1, &fwd.pre1);
    let d_w1 = matmul_tn(&fwd.input, &d_pre1)?;
    let d_b1 = d_pre1.column_sums();
    let input = if want_input_grad {
        Some(matmul_nt(&d_pre1, &l1.weight)?)
    } else {
        None
    };

    let grads = HypernetParams {
        layers: [
            Linear { weight: d_w1, bias: d_b1 },
            Linear { weight: dw2, bias: db2 },
            Linear { weight: dw3, bias: db3 },
        ],
    };
    if grads.slices().iter().any(|s| s.iter().any(|x| !x.is_finite())) {
        return Err(FcbmError::Numeric("non-finite hypernetwork gradient".into()));
    }
    Ok(HypernetGrads {
        params: grads,
        input,
    })
}

fn mask_relu(d: &Matrix, pre: &Matrix) -> Matrix {
    let data = d
        .data()
        .iter()
        .zip(pre.data())
        .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
        .collect();
    Matrix::new(d.rows(), d.cols(), data).expect("same shape")
}

/// Training-pool statistics used to align unseen pools.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentStats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
}

impl AlignmentStats {
    pub fn embed_dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn classes(&self) -> usize {
        self.output_mean.len()
    }

    pub fn round_to_f32(&self) -> Self {
        let r = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect();
        AlignmentStats {
            input_mean: r(&self.input_mean),
            input_std: r(&self.input_std),
            output_mean: r(&self.output_mean),
            output_std: r(&self.output_std),
        }
    }
}

pub fn compute_alignment_stats(t: &Matrix, h: &Matrix) -> Result<AlignmentStats> {
    if t.rows() < 2 || h.rows() != t.rows() {
        return Err(FcbmError::Invariant(format!(
            "alignment statistics need at least 2 concepts with matching rows, got T {} rows and H {} rows",
            t.rows(),
            h.rows()
        )));
    }
    let (input_mean, input_std) = column_mean_std(t, STD_FLOOR);
    let (output_mean, output_std) = column_mean_std(h, STD_FLOOR);
    Ok(AlignmentStats {
        input_mean,
        input_std,
        output_mean,
        output_std,
    })
}

/// Per-column affine map `x ↦ scale·x + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnAffine {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    /// Columns of the source whose spread was below the std floor.
    pub floored: usize,
}

impl ColumnAffine {
    /// Maps the column distribution of `source` onto `(mean, std)`.
    pub fn matching(source: &Matrix, mean: &[f64], std: &[f64]) -> Result<Self> {
        if source.cols() != mean.len() || mean.len() != std.len() {
            return Err(dim_err!(
                "aligning {} columns to stats of length {}/{}",
                source.cols(),
                mean.len(),
                std.len()
            ));
        }
        if source.rows() < 2 {
            return Err(FcbmError::Invariant(format!(
                "alignment needs at least 2 concepts, got {}",
                source.rows()
            )));
        }
        let (src_mean, src_std) = column_mean_std(source, 0.0);
        let mut floored = 0;
        let mut scale = Vec::with_capacity(mean.len());
        let mut shift = Vec::with_capacity(mean.len());
        for j in 0..mean.len() {
            let s = if src_std[j] < STD_FLOOR {
                floored += 1;
                STD_FLOOR
            } else {
                src_std[j]
            };
            let a = std[j] / s;
            scale.push(a);
            shift.push(mean[j] - a * src_mean[j]);
        }
        Ok(ColumnAffine {
            scale,
            shift,
            floored,
        })
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.scale.len() {
            return Err(dim_err!("{} columns for a {}-column affine map", x.cols(), self.scale.len()));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for ((v, a), b) in out.row_mut(i).iter_mut().zip(&self.scale).zip(&self.shift) {
                *v = a * *v + b;
            }
        }
        Ok(out)
    }

    /// Chain rule through [`ColumnAffine::apply`].
    pub fn backward(&self, d_out: &Matrix) -> Matrix {
        let mut out = d_out.clone();
        for i in 0..out.rows() {
            for (v, a) in out.row_mut(i).iter_mut().zip(&self.scale) {
                *v *= a;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aligned {
    pub values: Matrix,
    /// Dimensions that were constant in the new pool and hit the std floor.
    pub floored_dims: usize,
}

/// Moves a new pool's embeddings onto the training pool's per-dimension mean and std.
pub fn align_inputs(t_new: &Matrix, stats: &AlignmentStats) -> Result<Aligned> {
    let map = ColumnAffine::matching(t_new, &stats.input_mean, &stats.input_std)?;
    Ok(Aligned {
        values: map.apply(t_new)?,
        floored_dims: map.floored,
    })
}

/// Moves hypernetwork outputs for a new pool onto the training pool's class-weight distribution.
pub fn align_outputs(h_new: &Matrix, stats: &AlignmentStats) -> Result<Aligned> {
    let map = output_alignment(h_new, stats)?;
    Ok(Aligned {
        values: map.apply(h_new)?,
        floored_dims: map.floored,
    })
}

pub fn output_alignment(h_new: &Matrix, stats: &AlignmentStats) -> Result<ColumnAffine> {
    ColumnAffine::matching(h_new, &stats.output_mean, &stats.output_std)
}

/// How the dense `h(t)` columns are made sparse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Selector {
    Sparsemax { tau: f64 },
    /// Keep the `k` largest-magnitude entries per column.
    TopK { k: usize },
}

#[derive(Debug, Clone)]
pub enum SelectionContext {
    Sparsemax(Vec<SparsemaxResult>),
    /// Kept row indices per column, ascending.
    TopK(Vec<Vec<usize>>),
}

impl SelectionContext {
    /// Support size of every column.
    pub fn support_sizes(&self) -> Vec<usize> {
        match self {
            SelectionContext::Sparsemax(ctx) => ctx.iter().map(|c| c.k()).collect(),
            SelectionContext::TopK(kept) => kept.iter().map(|k| k.len()).collect(),
        }
    }
}

/// Keeps the `k` largest `|H_ij|` in each column (ties to the lower row index).
pub fn hard_truncate_columns(h: &Matrix, k: usize) -> (Matrix, Vec<Vec<usize>>) {
    let mut w = Matrix::zeros(h.rows(), h.cols());
    let mut kept_all = Vec::with_capacity(h.cols());
    for j in 0..h.cols() {
        let col = h.column(j);
        let mut order: Vec<usize> = (0..col.len()).collect();
        order.sort_by(|&a, &b| col[b].abs().total_cmp(&col[a].abs()).then(a.cmp(&b)));
        let mut kept: Vec<usize> = order.into_iter().take(k).collect();
        kept.sort_unstable();
        for &i in &kept {
            w.set(i, j, col[i]);
        }
        kept_all.push(kept);
    }
    (w, kept_all)
}

pub fn select(h: &Matrix, selector: Selector) -> Result<(Matrix, SelectionContext)> {
    match selector {
        Selector::Sparsemax { tau } => {
            let (w, ctx) = sparsemax_columns(h, tau)?;
            Ok((w, SelectionContext::Sparsemax(ctx)))
        }
        Selector::TopK { k } => {
            let (w, kept) = hard_truncate_columns(h, k);
            Ok((w, SelectionContext::TopK(kept)))
        }
    }
}

/// Returns `(∂L/∂H, ∂L/∂τ)`; top-K passes gradients straight through kept entries.
pub fn select_backward(ctx: &SelectionContext, d_w: &Matrix) -> Result<(Matrix, f64)> {
    match ctx {
        SelectionContext::Sparsemax(c) => sparsemax_columns_backward(c, d_w),
        SelectionContext::TopK(kept) => {
            let mut d_h = Matrix::zeros(d_w.rows(), d_w.cols());
            for (j, rows) in kept.iter().enumerate() {
                for &i in rows {
                    d_h.set(i, j, d_w.get(i, j));
                }
            }
            Ok((d_h, 0.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// The pool the head was trained on.
    Trained,
    /// An unseen pool, aligned to the stored statistics.
    Swap,
}

#[derive(Debug, Clone)]
pub struct GeneratedWeights {
    /// Sparse `m × n` weights.
    pub weights: Matrix,
    /// Dense `h(t)` (after output alignment in swap mode).
    pub dense: Matrix,
    pub context: SelectionContext,
    /// Floored dimensions plus degenerate hypernetwork rows.
    pub diagnostics: usize,
}

pub fn generate_weights(
    params: &HypernetParams,
    stats: Option<&AlignmentStats>,
    t: &Matrix,
    mode: WeightMode,
    selector: Selector,
) -> Result<GeneratedWeights> {
    let (dense, diagnostics) = match mode {
        WeightMode::Trained => {
            let fwd = hypernet_forward(params, t)?;
            (fwd.output, fwd.degenerate_rows)
        }
        WeightMode::Swap => {
            let stats = stats.ok_or_else(|| {
                FcbmError::Invariant("swap mode needs alignment statistics".into())
            })?;
            let t_aligned = align_inputs(t, stats)?;
            let fwd = hypernet_forward(params, &t_aligned.values)?;
            let h_aligned = align_outputs(&fwd.output, stats)?;
            (
                h_aligned.values,
                t_aligned.floored_dims + fwd.degenerate_rows + h_aligned.floored_dims,
            )
        }
    };
    let (weights, context) = select(&dense, selector)?;
    Ok(GeneratedWeights {
        weights,
        dense,
        context,
        diagnostics,
    })
}

/// `Q_norm · W`.
pub fn head_logits(q_norm: &Matrix, w: &Matrix) -> Result<Matrix> {
    if q_norm.cols() != w.rows() {
        return Err(dim_err!(
            "{} concept values per sample but weights cover {} concepts",
            q_norm.cols(),
            w.rows()
        ));
    }
    matmul(q_norm, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, max_rel_error};

    fn tiny(seed: u64) -> HypernetParams {
        HypernetParams::init(3, 4, 2, &mut Rng::new(seed))
    }

    #[test]
    fn output_rows_are_unit_norm() {
        let p = HypernetParams::init(4, 8, 3, &mut Rng::new(1));
        let t = Rng::new(2).uniform_matrix(1, 4, 1.0);
        let out = hypernet_forward(&p, &t).unwrap().output;
        let norm: f64 = out.row(0).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rows_are_processed_independently() {
        let p = HypernetParams::init(4, 8, 3, &mut Rng::new(1));
        let t = Rng::new(3).uniform_matrix(5, 4, 1.0);
        let perm = [3, 0, 4, 1, 2];
        let a = hypernet_forward(&p, &t.select_rows(&perm)).unwrap().output;
        let b = hypernet_forward(&p, &t).unwrap().output.select_rows(&perm);
        assert_eq!(a, b);
    }

    #[test]
    fn forward_matches_layer_by_layer_recomputation() {
        let p = HypernetParams::init(4, 6, 3, &mut Rng::new(5));
        let t = Rng::new(6).uniform_matrix(3, 4, 1.0);
        let out = hypernet_forward(&p, &t).unwrap().output;
        for i in 0..3 {
            let mut x: Vec<f64> = t.row(i).to_vec();
            for (li, l) in p.layers.iter().enumerate() {
                let mut y = l.bias.clone();
                for (k, xk) in x.iter().enumerate() {
                    for (j, yj) in y.iter_mut().enumerate() {
                        *yj += xk * l.weight.get(k, j);
                    }
                }
                if li < 2 {
                    y.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                x = y;
            }
            let n: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, v) in x.iter().enumerate() {
                assert!((out.get(i, j) - v / n).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn zero_row_stays_zero_and_is_counted() {
        let mut p = tiny(1);
        p.layers[2].weight = Matrix::zeros(4, 2);
        p.layers[2].bias = vec![0.0, 0.0];
        let fwd = hypernet_forward(&p, &Matrix::zeros(2, 3)).unwrap();
        assert_eq!(fwd.degenerate_rows, 2);
        assert!(fwd.output.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = tiny(2);
        let t = Rng::new(1).uniform_matrix(2, 3, 1.0);
        let fwd = hypernet_forward(&p, &t).unwrap();
        let g = hypernet_backward(&p, &fwd, &Matrix::zeros(2, 2), true).unwrap();
        assert!(g.params.to_flat().iter().all(|&x| x == 0.0));
        assert!(g.input.unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_backward_hand_case() {
        // y = x·W, x = [[1,2],[3,4]], dy = [[1,0],[0,1]] ⇒ dW = xᵀ·dy = [[1,3],[2,4]]
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let w = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.0]]);
        let dy = Matrix::identity(2);
        let (dw, db, dx) = linear_backward(&x, &w, &dy).unwrap();
        assert_eq!(dw, Matrix::from_rows(&[[1.0, 3.0], [2.0, 4.0]]));
        assert_eq!(db, vec![1.0, 1.0]);
        // dx = dy·Wᵀ = Wᵀ
        assert_eq!(dx, w.transpose());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = tiny(7);
        let t = Rng::new(8).uniform_matrix(2, 3, 1.0);
        let g_up = Rng::new(9).uniform_matrix(2, 2, 1.0);
        let loss = |params: &HypernetParams, t: &Matrix| {
            let out = hypernet_forward(params, t).unwrap().output;
            out.data().iter().zip(g_up.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let fwd = hypernet_forward(&p, &t).unwrap();
        assert!(fwd.relu_margin() > 1e-4);
        let grads = hypernet_backward(&p, &fwd, &g_up, true).unwrap();
        let fd = finite_diff_grad(|x| loss(&p.with_flat(x).unwrap(), &t), &p.to_flat(), 1e-6).unwrap();
        assert!(max_rel_error(&grads.params.to_flat(), &fd, 1e-6) <= 1e-3);
        let fd_t = finite_diff_grad(
            |x| loss(&p, &Matrix::new(2, 3, x.to_vec()).unwrap()),
            t.data(),
            1e-6,
        )
        .unwrap();
        assert!(max_rel_error(grads.input.unwrap().data(), &fd_t, 1e-6) <= 1e-3);
    }

    #[test]
    fn alignment_stats_cases() {
        let t = Matrix::from_rows(&[[0.0], [2.0]]);
        let s = compute_alignment_stats(&t, &t).unwrap();
        assert_eq!(s.input_mean, vec![1.0]);
        assert_eq!(s.input_std, vec![1.0]);

        let same = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0]]);
        let s = compute_alignment_stats(&same, &same).unwrap();
        assert_eq!(s.input_std, vec![STD_FLOOR, STD_FLOOR]);

        assert!(matches!(
            compute_alignment_stats(&Matrix::zeros(1, 2), &Matrix::zeros(1, 2)),
            Err(FcbmError::Invariant(_))
        ));
    }

    #[test]
    fn alignment_stats_match_recomputation() {
        let t = Rng::new(4).uniform_matrix(10, 4, 1.0);
        let s = compute_alignment_stats(&t, &t).unwrap();
        for j in 0..4 {
            let col = t.column(j);
            let mean = col.iter().sum::<f64>() / 10.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 10.0;
            assert!((s.input_mean[j] - mean).abs() <= 1e-6);
            assert!((s.input_std[j] - var.sqrt()).abs() <= 1e-6);
        }
    }

    #[test]
    fn self_alignment_is_identity() {
        let t = Rng::new(5).uniform_matrix(6, 3, 1.0);
        let h = Rng::new(6).uniform_matrix(6, 2, 1.0);
        let s = compute_alignment_stats(&t, &h).unwrap();
        assert!(align_inputs(&t, &s).unwrap().values.max_abs_diff(&t) < 1e-12);
        assert!(align_outputs(&h, &s).unwrap().values.max_abs_diff(&h) < 1e-12);
    }

    #[test]
    fn affine_perturbation_is_undone() {
        let t = Rng::new(5).uniform_matrix(6, 3, 1.0);
        let s = compute_alignment_stats(&t, &t).unwrap();
        let moved = Matrix::from_fn(6, 3, |i, j| [2.0, 0.5, 7.0][j] * t.get(i, j) + [1.0, -3.0, 0.2][j]);
        assert!(align_inputs(&moved, &s).unwrap().values.max_abs_diff(&t) < 1e-12);
        assert!(align_outputs(&moved, &s).unwrap().values.max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn scalar_alignment_arithmetic() {
        // train mean 0 / std 1, new pool mean 5 / std 2: 7 ↦ (7 − 5)/2 = 1
        let stats = AlignmentStats {
            input_mean: vec![0.0],
            input_std: vec![1.0],
            output_mean: vec![0.0],
            output_std: vec![1.0],
        };
        let new_pool = Matrix::from_rows(&[[3.0], [7.0]]);
        let aligned = align_inputs(&new_pool, &stats).unwrap().values;
        assert!((aligned.get(1, 0) - 1.0).abs() < 1e-12);
        let aligned = align_outputs(&new_pool, &stats).unwrap().values;
        assert!((aligned.get(1, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_dimension_is_floored_and_counted() {
        let stats = compute_alignment_stats(
            &Matrix::from_rows(&[[0.0, 1.0], [2.0, 3.0]]),
            &Matrix::from_rows(&[[0.0], [1.0]]),
        )
        .unwrap();
        let new_pool = Matrix::from_rows(&[[5.0, 1.0], [5.0, 2.0]]);
        let out = align_inputs(&new_pool, &stats).unwrap();
        assert_eq!(out.floored_dims, 1);
        assert_eq!(out.values.column(0), vec![1.0, 1.0]);
    }

    #[test]
    fn swap_with_training_pool_reproduces_trained_weights() {
        let p = HypernetParams::init(4, 8, 3, &mut Rng::new(11));
        let t = Rng::new(12).uniform_matrix(7, 4, 1.0);
        let h = hypernet_forward(&p, &t).unwrap().output;
        let stats = compute_alignment_stats(&t, &h).unwrap();
        let sel = Selector::Sparsemax { tau: 0.5 };
        let trained = generate_weights(&p, None, &t, WeightMode::Trained, sel).unwrap();
        let swapped = generate_weights(&p, Some(&stats), &t, WeightMode::Swap, sel).unwrap();
        assert!(trained.weights.max_abs_diff(&swapped.weights) <= 1e-5);
        for j in 0..3 {
            let col = trained.weights.column(j);
            assert!((col.iter().sum::<f64>() - 0.5).abs() < 1e-12);
            assert!(col.iter().all(|&x| x >= 0.0));
        }
        assert!(matches!(
            generate_weights(&p, None, &t, WeightMode::Swap, sel),
            Err(FcbmError::Invariant(_))
        ));
    }

    #[test]
    fn generate_matches_stepwise_recomputation() {
        let p = HypernetParams::init(4, 8, 3, &mut Rng::new(13));
        let t = Rng::new(14).uniform_matrix(6, 4, 1.0);
        let h = hypernet_forward(&p, &t).unwrap().output;
        let stats = compute_alignment_stats(&t, &h).unwrap();
        let t_new = Rng::new(15).uniform_matrix(5, 4, 2.0);
        let got = generate_weights(&p, Some(&stats), &t_new, WeightMode::Swap, Selector::Sparsemax { tau: 0.7 })
            .unwrap();

        let ta = align_inputs(&t_new, &stats).unwrap().values;
        let hn = hypernet_forward(&p, &ta).unwrap().output;
        let ha = align_outputs(&hn, &stats).unwrap().values;
        let (w, _) = sparsemax_columns(&ha, 0.7).unwrap();
        assert!(got.weights.max_abs_diff(&w) <= 1e-5);
    }

    #[test]
    fn hard_truncation_keeps_k_per_column() {
        let h = Matrix::from_rows(&[[0.1, -0.9], [-0.5, 0.2], [0.3, 0.2], [0.0, 0.05]]);
        let (w, kept) = hard_truncate_columns(&h, 2);
        assert_eq!(kept, vec![vec![1, 2], vec![0, 1]]);
        assert_eq!(w.column(0), vec![0.0, -0.5, 0.3, 0.0]);
        let d_w = Matrix::from_fn(4, 2, |_, _| 1.0);
        let (d_h, d_tau) = select_backward(&SelectionContext::TopK(kept), &d_w).unwrap();
        assert_eq!(d_h.column(1), vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(d_tau, 0.0);
    }

    #[test]
    fn logits_cases() {
        let q = Rng::new(3).uniform_matrix(4, 3, 1.0);
        assert!(head_logits(&q, &Matrix::zeros(3, 2)).unwrap().data().iter().all(|&x| x == 0.0));
        let tau = 0.8;
        let sel = Matrix::from_fn(3, 3, |i, j| if i == j { tau } else { 0.0 });
        let l = head_logits(&q, &sel).unwrap();
        assert!(l.max_abs_diff(&q.map(|x| tau * x)) < 1e-15);
        let w = Rng::new(4).uniform_matrix(3, 2, 1.0);
        let l = head_logits(&q, &w).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let naive: f64 = (0..3).map(|k| q.get(i, k) * w.get(k, j)).sum();
                assert!((l.get(i, j) - naive).abs() <= 1e-5);
            }
        }
        assert!(head_logits(&q, &Matrix::zeros(2, 2)).is_err());
    }
}

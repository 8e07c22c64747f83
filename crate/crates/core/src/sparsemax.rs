//! Sparsemax with a temperature budget.
//!
//! `sparsemax_forward(s, τ)` is the Euclidean projection of `s` onto the
//! scaled simplex `{x ≥ 0, Σx = τ}`. The forward pass sorts once, finds the
//! support size
//!
//! ```text
//! k(s) = max { k : τ + k·s₍ₖ₎ > Σ_{j≤k} s₍ⱼ₎ }
//! ```
//!
//! and subtracts the threshold `ξ = (Σ_{j≤k} s₍ⱼ₎ − τ) / k`. The returned
//! [`SparsemaxResult`] keeps the support so the backward rules cost `O(|P|)`:
//!
//! * Jacobian-vector product: `e ⊙ (v − v̂·1)` with `v̂` the mean of `v` over the support.
//!   The Jacobian is symmetric, so the same routine is the vector-Jacobian product.
//! * Temperature gradient: `∂L/∂τ = Σ_{i∈P} (∂L/∂s̃ᵢ) / |P|`.
//!
//! At an exact support change the Jacobian is discontinuous; the backward
//! pass uses the support the forward pass computed (a one-sided subgradient).
//!
//! Larger τ never shrinks the support, so decaying τ sparsifies.

use crate::error::{dim_err, FcbmError, Result};
use crate::numeric::Matrix;

/// Output of [`sparsemax_forward`] plus the context its backward rules need.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsemaxResult {
    pub output: Vec<f64>,
    /// Indices with strictly positive output, ascending.
    pub support: Vec<usize>,
    pub threshold: f64,
    pub tau: f64,
}

impl SparsemaxResult {
    pub fn len(&self) -> usize {
        self.output.len()
    }

    pub fn is_empty(&self) -> bool {
        self.output.is_empty()
    }

    /// Support size `k = |P(s)|`.
    pub fn k(&self) -> usize {
        self.support.len()
    }

    /// Distance from the nearest support change: the smallest `|sᵢ − ξ|`.
    ///
    /// Finite-difference checks skip instances where this is tiny.
    pub fn boundary_margin(&self, s: &[f64]) -> f64 {
        s.iter()
            .map(|x| (x - self.threshold).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn sparsemax_forward(s: &[f64], tau: f64) -> Result<SparsemaxResult> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(FcbmError::Invariant(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    if s.is_empty() {
        return Err(dim_err!("sparsemax of an empty vector"));
    }
    if let Some(i) = s.iter().position(|x| !x.is_finite()) {
        return Err(FcbmError::Numeric(format!(
            "sparsemax input is non-finite at index {i}"
        )));
    }

    let mut sorted = s.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));

    let mut k = 1;
    let mut cumsum = 0.0;
    let mut support_sum = sorted[0];
    for (idx, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let kk = (idx + 1) as f64;
        // strict inequality: a value tied exactly at the threshold stays out
        if tau + kk * v > cumsum {
            k = idx + 1;
            support_sum = cumsum;
        }
    }
    let threshold = (support_sum - tau) / k as f64;

    let mut output = Vec::with_capacity(s.len());
    let mut support = Vec::with_capacity(k);
    for (i, &v) in s.iter().enumerate() {
        let o = v - threshold;
        if o > 0.0 {
            output.push(o);
            support.push(i);
        } else {
            output.push(0.0);
        }
    }
    debug_assert!(!support.is_empty());

    Ok(SparsemaxResult {
        output,
        support,
        threshold,
        tau,
    })
}

/// `J(s)·v`; entries outside the support are exactly zero.
pub fn sparsemax_jvp(result: &SparsemaxResult, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != result.len() {
        return Err(dim_err!(
            "jvp vector has length {}, sparsemax has {}",
            v.len(),
            result.len()
        ));
    }
    let mut out = vec![0.0; v.len()];
    if result.support.is_empty() {
        return Ok(out);
    }
    let mean = result.support.iter().map(|&i| v[i]).sum::<f64>() / result.k() as f64;
    for &i in &result.support {
        out[i] = v[i] - mean;
    }
    Ok(out)
}

/// `∂L/∂τ` given the upstream gradient `∂L/∂s̃`.
pub fn sparsemax_tau_grad(result: &SparsemaxResult, upstream: &[f64]) -> Result<f64> {
    if upstream.len() != result.len() {
        return Err(dim_err!(
            "upstream gradient has length {}, sparsemax has {}",
            upstream.len(),
            result.len()
        ));
    }
    if result.support.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = result.support.iter().map(|&i| upstream[i]).sum();
    Ok(sum / result.k() as f64)
}

/// Applies sparsemax independently to every column of `h` (concepts × classes).
pub fn sparsemax_columns(h: &Matrix, tau: f64) -> Result<(Matrix, Vec<SparsemaxResult>)> {
    let mut w = Matrix::zeros(h.rows(), h.cols());
    let mut contexts = Vec::with_capacity(h.cols());
    for j in 0..h.cols() {
        let res = sparsemax_forward(&h.column(j), tau)?;
        w.set_column(j, &res.output);
        contexts.push(res);
    }
    Ok((w, contexts))
}

/// Backward through [`sparsemax_columns`]: returns `(∂L/∂H, ∂L/∂τ)`.
///
/// The temperature is shared by every column, so its gradient is the sum of the
/// per-column contributions.
pub fn sparsemax_columns_backward(
    contexts: &[SparsemaxResult],
    d_w: &Matrix,
) -> Result<(Matrix, f64)> {
    if contexts.len() != d_w.cols() {
        return Err(dim_err!(
            "{} sparsemax contexts for a gradient with {} columns",
            contexts.len(),
            d_w.cols()
        ));
    }
    let mut d_h = Matrix::zeros(d_w.rows(), d_w.cols());
    let mut d_tau = 0.0;
    for (j, ctx) in contexts.iter().enumerate() {
        let upstream = d_w.column(j);
        d_h.set_column(j, &sparsemax_jvp(ctx, &upstream)?);
        d_tau += sparsemax_tau_grad(ctx, &upstream)?;
    }
    Ok((d_h, d_tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, Rng};

    /// Projection onto the τ-simplex by enumerating every nonempty support set
    /// and keeping the one satisfying the KKT conditions.
    fn brute_force(s: &[f64], tau: f64) -> Vec<f64> {
        let m = s.len();
        for mask in 1u32..(1 << m) {
            let members: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            let xi = (members.iter().map(|&i| s[i]).sum::<f64>() - tau) / members.len() as f64;
            let kkt = (0..m).all(|i| {
                if mask & (1 << i) != 0 {
                    s[i] - xi > 0.0
                } else {
                    s[i] - xi <= 1e-12
                }
            });
            if kkt {
                return s.iter().map(|x| (x - xi).max(0.0)).collect();
            }
        }
        panic!("no KKT support found");
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn single_support() {
        let r = sparsemax_forward(&[1.0, 0.0], 1.0).unwrap();
        assert_eq!(r.output, vec![1.0, 0.0]);
        assert_eq!(r.k(), 1);
        assert_eq!(r.threshold, 0.0);
    }

    #[test]
    fn symmetric_inputs() {
        let r = sparsemax_forward(&[0.5, 0.5], 1.0).unwrap();
        assert!(close(&r.output, &[0.5, 0.5], 1e-12));
    }

    #[test]
    fn worked_examples_match_brute_force() {
        let r = sparsemax_forward(&[2.0, 1.5, 0.0], 1.0).unwrap();
        assert!(close(&r.output, &[0.75, 0.25, 0.0], 1e-12));
        assert_eq!(r.support, vec![0, 1]);
        assert!((r.threshold - 1.25).abs() < 1e-12);
        assert!(close(&r.output, &brute_force(&[2.0, 1.5, 0.0], 1.0), 1e-12));

        let r = sparsemax_forward(&[3.0, 1.0, 0.5], 1.0).unwrap();
        assert!(close(&r.output, &[1.0, 0.0, 0.0], 1e-12));
        assert!(close(&r.output, &brute_force(&[3.0, 1.0, 0.5], 1.0), 1e-12));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            sparsemax_forward(&[1.0], 0.0),
            Err(FcbmError::Invariant(_))
        ));
        assert!(matches!(
            sparsemax_forward(&[1.0], -2.0),
            Err(FcbmError::Invariant(_))
        ));
        assert!(matches!(
            sparsemax_forward(&[1.0, f64::NAN], 1.0),
            Err(FcbmError::Numeric(_))
        ));
        assert!(sparsemax_forward(&[], 1.0).is_err());
    }

    #[test]
    fn jvp_examples() {
        let r = sparsemax_forward(&[2.0, 1.5, 0.0], 1.0).unwrap();
        assert_eq!(sparsemax_jvp(&r, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        let jv = sparsemax_jvp(&r, &[1.0, 0.0, 0.0]).unwrap();
        assert!(close(&jv, &[0.5, -0.5, 0.0], 1e-12));

        // oracle: central differences of the forward map along v
        let s = [2.0, 1.5, 0.0];
        let h = 1e-5;
        let plus: Vec<f64> = s.iter().zip([1.0, 0.0, 0.0]).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = s.iter().zip([1.0, 0.0, 0.0]).map(|(a, b)| a - h * b).collect();
        let fp = sparsemax_forward(&plus, 1.0).unwrap().output;
        let fm = sparsemax_forward(&minus, 1.0).unwrap().output;
        let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        assert!(close(&jv, &fd, 1e-6));

        let single = sparsemax_forward(&[3.0, 1.0, 0.5], 1.0).unwrap();
        assert_eq!(sparsemax_jvp(&single, &[4.0, -1.0, 7.0]).unwrap(), vec![0.0; 3]);
        assert!(sparsemax_jvp(&single, &[1.0]).is_err());
    }

    #[test]
    fn tau_grad_examples() {
        let r = sparsemax_forward(&[2.0, 1.5, 0.0], 1.0).unwrap();
        assert_eq!(sparsemax_tau_grad(&r, &[0.0; 3]).unwrap(), 0.0);
        assert!((sparsemax_tau_grad(&r, &[1.0, 2.0, 3.0]).unwrap() - 1.5).abs() < 1e-12);

        let upstream = [1.0, 2.0, 3.0];
        let loss = |t: &[f64]| {
            let o = sparsemax_forward(&[2.0, 1.5, 0.0], t[0]).unwrap().output;
            o.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = finite_diff_grad(loss, &[1.0], 1e-6).unwrap();
        assert!((fd[0] - 1.5).abs() < 1e-6);

        let single = sparsemax_forward(&[3.0, 1.0, 0.5], 1.0).unwrap();
        assert_eq!(sparsemax_tau_grad(&single, &[2.5, 9.0, 9.0]).unwrap(), 2.5);
        assert!(sparsemax_tau_grad(&single, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn columns_are_independent() {
        let h = Matrix::from_rows(&[[2.0, 2.0], [1.5, 1.5], [0.0, 0.0]]);
        let (w, ctx) = sparsemax_columns(&h, 1.0).unwrap();
        assert_eq!(w.column(0), w.column(1));
        assert_eq!(ctx.len(), 2);

        let single = Matrix::from_rows(&[[2.0], [1.5], [0.0]]);
        let (w, _) = sparsemax_columns(&single, 1.0).unwrap();
        assert_eq!(w.column(0), sparsemax_forward(&[2.0, 1.5, 0.0], 1.0).unwrap().output);

        let mut rng = Rng::new(17);
        let h = rng.uniform_matrix(6, 3, 1.0);
        let (w, _) = sparsemax_columns(&h, 1.0).unwrap();
        for j in 0..3 {
            assert!(close(&w.column(j), &brute_force(&h.column(j), 1.0), 1e-10));
            assert!((w.column(j).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.column(j).iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn strict_tie_rule() {
        // s = [1, 0], τ = 1: candidate k = 2 gives 1 + 2·0 > 1, false, so the tie at ξ = 0 is excluded.
        let r = sparsemax_forward(&[1.0, 0.0], 1.0).unwrap();
        assert_eq!(r.support, vec![0]);
    }

    #[test]
    fn columns_backward_sums_tau_contributions() {
        let h = Matrix::from_rows(&[[2.0, 0.1], [1.5, 0.3], [0.0, 0.2]]);
        let (_, ctx) = sparsemax_columns(&h, 1.0).unwrap();
        let d_w = Matrix::from_rows(&[[1.0, 1.0], [2.0, 0.0], [3.0, -1.0]]);
        let (d_h, d_tau) = sparsemax_columns_backward(&ctx, &d_w).unwrap();
        let expected_tau = sparsemax_tau_grad(&ctx[0], &d_w.column(0)).unwrap()
            + sparsemax_tau_grad(&ctx[1], &d_w.column(1)).unwrap();
        assert!((d_tau - expected_tau).abs() < 1e-12);
        assert_eq!(d_h.column(0), sparsemax_jvp(&ctx[0], &d_w.column(0)).unwrap());
    }
}

//! Finite-difference checks for every hand-written backward rule.
//!
//! Each check draws seeded random instances, compares the analytic gradient
//! with a central difference, and reports the worst coordinate-wise relative
//! error. Instances whose sparsemax support or ReLU pattern sits within
//! [`MIN_MARGIN`] of a kink are redrawn, since the derivative is not defined
//! there.

use serde::Serialize;

use crate::error::Result;
use crate::hypernet::{hypernet_backward, hypernet_forward, HypernetParams};
use crate::numeric::{finite_diff_grad, matmul, matmul_tn, max_rel_error, Matrix, Rng};
use crate::projector::cos3_loss;
use crate::sparsemax::{
    sparsemax_columns, sparsemax_columns_backward, sparsemax_forward, sparsemax_jvp, sparsemax_tau_grad,
};
use crate::trainer::cross_entropy;

pub const DEFAULT_INSTANCES: usize = 100;
pub const TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-5;
pub const MIN_MARGIN: f64 = 1e-3;
/// Denominator floor in the relative error.
pub const REL_FLOOR: f64 = 1e-6;

const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    /// Draws rejected for sitting too close to a kink.
    pub redrawn: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub checks: Vec<CheckReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// One drawn instance: `None` means "too close to a kink, draw again",
/// otherwise `(analytic, numeric)` gradients.
type Draw = Option<(Vec<f64>, Vec<f64>)>;

fn run_check(name: &str, seed: u64, instances: usize, mut draw: impl FnMut(&mut Rng) -> Result<Draw>) -> Result<CheckReport> {
    let mut rng = Rng::derive(seed, name);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut redrawn = 0;
    while done < instances && redrawn < MAX_REDRAWS {
        match draw(&mut rng)? {
            Some((analytic, numeric)) => {
                worst = worst.max(max_rel_error(&analytic, &numeric, REL_FLOOR));
                done += 1;
            }
            None => redrawn += 1,
        }
    }
    Ok(CheckReport {
        name: name.into(),
        instances: done,
        redrawn,
        max_rel_error: worst,
        passed: done == instances && worst <= TOLERANCE,
    })
}

fn between(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn normal_vec(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.normal()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `∂⟨v, sparsemax(s)⟩/∂s` against the Jacobian-vector product.
pub fn check_sparsemax_jvp(seed: u64, instances: usize) -> Result<CheckReport> {
    run_check("sparsemax-jvp", seed, instances, |rng| {
        let m = between(rng, 2, 64);
        let tau = rng.uniform(0.1, 10.0);
        let s = normal_vec(rng, m);
        let v = normal_vec(rng, m);
        let fwd = sparsemax_forward(&s, tau)?;
        if fwd.boundary_margin(&s) < MIN_MARGIN {
            return Ok(None);
        }
        let analytic = sparsemax_jvp(&fwd, &v)?;
        let numeric = finite_diff_grad(|x| dot(&v, &sparsemax_forward(x, tau).unwrap().output), &s, STEP)?;
        Ok(Some((analytic, numeric)))
    })
}

/// `∂⟨u, sparsemax(s, τ)⟩/∂τ`.
pub fn check_sparsemax_tau(seed: u64, instances: usize) -> Result<CheckReport> {
    run_check("sparsemax-tau", seed, instances, |rng| {
        let m = between(rng, 2, 64);
        let tau = rng.uniform(0.1, 10.0);
        let s = normal_vec(rng, m);
        let u = normal_vec(rng, m);
        let fwd = sparsemax_forward(&s, tau)?;
        if fwd.boundary_margin(&s) < MIN_MARGIN {
            return Ok(None);
        }
        let analytic = vec![sparsemax_tau_grad(&fwd, &u)?];
        let numeric = finite_diff_grad(|t| dot(&u, &sparsemax_forward(&s, t[0]).unwrap().output), &[tau], STEP)?;
        Ok(Some((analytic, numeric)))
    })
}

pub fn check_cos3(seed: u64, instances: usize) -> Result<CheckReport> {
    run_check("cos3-loss", seed, instances, |rng| {
        let n = between(rng, 3, 20);
        let m = between(rng, 1, 8);
        let q = rng.normal_matrix(n, m, 1.0);
        let c = rng.normal_matrix(n, m, 1.0);
        let (_, grad) = cos3_loss(&q, &c)?;
        let numeric = finite_diff_grad(
            |x| cos3_loss(&Matrix::new(n, m, x.to_vec()).unwrap(), &c).unwrap().0,
            q.data(),
            STEP,
        )?;
        Ok(Some((grad.into_data(), numeric)))
    })
}

fn small_net(rng: &mut Rng) -> (HypernetParams, Matrix) {
    let d = between(rng, 2, 6);
    let hidden = between(rng, 2, 8);
    let n = between(rng, 2, 5);
    let m = between(rng, 2, 6);
    let params = HypernetParams::init(d, hidden, n, rng);
    let t = rng.normal_matrix(m, d, 1.0);
    (params, t)
}

/// `⟨G, h(T)⟩` for a random `G`, differentiated w.r.t. every parameter and `T`.
pub fn check_hypernet(seed: u64, instances: usize) -> Result<CheckReport> {
    run_check("hypernet-backward", seed, instances, |rng| {
        let (params, t) = small_net(rng);
        let fwd = hypernet_forward(&params, &t)?;
        if fwd.relu_margin() < MIN_MARGIN {
            return Ok(None);
        }
        let g = rng.normal_matrix(fwd.output.rows(), fwd.output.cols(), 1.0);
        let grads = hypernet_backward(&params, &fwd, &g, true)?;
        let objective = |p: &HypernetParams, t: &Matrix| dot(g.data(), hypernet_forward(p, t).unwrap().output.data());

        let mut analytic = grads.params.to_flat();
        analytic.extend_from_slice(grads.input.as_ref().expect("requested").data());
        let mut numeric = finite_diff_grad(|x| objective(&params.with_flat(x).unwrap(), &t), &params.to_flat(), STEP)?;
        numeric.extend(finite_diff_grad(
            |x| objective(&params, &Matrix::new(t.rows(), t.cols(), x.to_vec()).unwrap()),
            t.data(),
            STEP,
        )?);
        Ok(Some((analytic, numeric)))
    })
}

pub fn check_cross_entropy(seed: u64, instances: usize) -> Result<CheckReport> {
    run_check("cross-entropy", seed, instances, |rng| {
        let rows = between(rng, 1, 8);
        let n = between(rng, 2, 6);
        let logits = rng.normal_matrix(rows, n, 2.0);
        let labels: Vec<usize> = (0..rows).map(|_| rng.below(n)).collect();
        let (_, grad) = cross_entropy(&logits, &labels)?;
        let numeric = finite_diff_grad(
            |x| cross_entropy(&Matrix::new(rows, n, x.to_vec()).unwrap(), &labels).unwrap().0,
            logits.data(),
            STEP,
        )?;
        Ok(Some((grad.into_data(), numeric)))
    })
}

fn head_loss(params: &HypernetParams, t: &Matrix, tau: f64, q: &Matrix, labels: &[usize]) -> Result<f64> {
    let h = hypernet_forward(params, t)?.output;
    let (w, _) = sparsemax_columns(&h, tau)?;
    Ok(cross_entropy(&matmul(q, &w)?, labels)?.0)
}

/// Full stage-2 objective: cross-entropy of `Q · sparsemax(h(T), τ)`,
/// differentiated w.r.t. the hypernetwork parameters and τ.
pub fn check_head_loss(seed: u64, instances: usize) -> Result<CheckReport> {
    run_check("head-loss", seed, instances, |rng| {
        let (params, t) = small_net(rng);
        let fwd = hypernet_forward(&params, &t)?;
        let (m, n) = fwd.output.shape();
        let tau = rng.uniform(0.1, 3.0);
        let (w, ctx) = sparsemax_columns(&fwd.output, tau)?;
        let kink = (0..n)
            .map(|j| ctx[j].boundary_margin(&fwd.output.column(j)))
            .fold(fwd.relu_margin(), f64::min);
        if kink < MIN_MARGIN {
            return Ok(None);
        }
        let rows = between(rng, 2, 8);
        let q = rng.normal_matrix(rows, m, 1.0);
        let labels: Vec<usize> = (0..rows).map(|_| rng.below(n)).collect();

        let (_, d_logits) = cross_entropy(&matmul(&q, &w)?, &labels)?;
        let d_w = matmul_tn(&q, &d_logits)?;
        let (d_h, d_tau) = sparsemax_columns_backward(&ctx, &d_w)?;
        let grads = hypernet_backward(&params, &fwd, &d_h, false)?;
        let mut analytic = grads.params.to_flat();
        analytic.push(d_tau);

        let flat = params.to_flat();
        let mut numeric = finite_diff_grad(
            |x| head_loss(&params.with_flat(x).unwrap(), &t, tau, &q, &labels).unwrap(),
            &flat,
            STEP,
        )?;
        numeric.extend(finite_diff_grad(
            |x| head_loss(&params, &t, x[0], &q, &labels).unwrap(),
            &[tau],
            STEP,
        )?);
        Ok(Some((analytic, numeric)))
    })
}

/// Runs every check with `instances` draws each.
pub fn run_gradcheck(seed: u64, instances: usize) -> Result<GradcheckReport> {
    let checks = vec![
        check_sparsemax_jvp(seed, instances)?,
        check_sparsemax_tau(seed, instances)?,
        check_cos3(seed, instances)?,
        check_hypernet(seed, instances)?,
        check_cross_entropy(seed, instances)?,
        check_head_loss(seed, instances)?,
    ];
    Ok(GradcheckReport {
        seed,
        tolerance: TOLERANCE,
        checks,
    })
}

//! Cycling discrepancy learning: an orthogonal split of the reconstructed
//! space into components that stay stationary across the cycles of a stage
//! and components that carry the degradation.
//!
//! With per-cycle mean `u_i` and covariance `Σ_i`, a whitening matrix `W`
//! and an orthogonal `Π`, the consistency block of cycle `i` has mean
//! `I_s Π W u_i` and covariance `I_s Π W Σ_i (I_s Π W)ᵀ`. The objective is
//! the sum over cycles of the Gaussian KL divergence of that block to
//! `N(0, I)`, minimized over the orthogonal group by Riemannian conjugate
//! gradient.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    column_covariance, inner, inv_sqrt_spd, qf, random_orthogonal, row_means, serde_matrix,
    serde_vector, skew,
};
use crate::psr::EmbeddedCycle;

pub const SUBSPACE_SCHEMA: u32 = 1;

/// Name recorded in serialized models for the whitening construction in use.
pub const WHITENING_CONSTRUCTION: &str = "inverse_sqrt_mean_cycle_covariance";

/// Relative eigenvalue floor below which the averaged covariance is treated
/// as rank deficient.
const RANK_TOL: f64 = 1e-10;
/// Ridge added (times `tr(Σ)/J`) to a rank-deficient averaged covariance.
pub const RIDGE_SCALE: f64 = 1e-8;

/// Mean and covariance of the columns of one reconstructed cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleStats {
    #[serde(with = "serde_vector")]
    pub mean: DVector<f64>,
    #[serde(with = "serde_matrix")]
    pub cov: DMatrix<f64>,
}

impl CycleStats {
    pub fn from_matrix(x: &DMatrix<f64>) -> Result<Self> {
        if x.ncols() < 2 {
            return Err(Error::validation(
                "cycle statistics need at least 2 reconstructed samples",
            ));
        }
        let mean = row_means(x);
        let cov = column_covariance(x, &mean);
        Ok(Self { mean, cov })
    }

    pub fn from_cycle(cycle: &EmbeddedCycle) -> Result<Self> {
        Self::from_matrix(&cycle.matrix)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn whitened(&self, w: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (w * &self.mean, w * &self.cov * w.transpose())
    }
}

fn check_stats(stats: &[CycleStats]) -> Result<usize> {
    let j = stats
        .first()
        .ok_or_else(|| Error::validation("no cycles supplied"))?
        .dim();
    if stats
        .iter()
        .any(|s| s.dim() != j || s.cov.shape() != (j, j))
    {
        return Err(Error::shape(
            "cycles have different reconstructed dimensions",
        ));
    }
    Ok(j)
}

/// Whitening matrix of a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitening {
    pub matrix: DMatrix<f64>,
    /// Ridge added to the averaged covariance, zero when it was full rank.
    pub ridge: f64,
}

/// Average of the per-cycle covariances.
pub fn mean_covariance(stats: &[CycleStats]) -> Result<DMatrix<f64>> {
    let j = check_stats(stats)?;
    let mut acc = DMatrix::zeros(j, j);
    for s in stats {
        acc += &s.cov;
    }
    Ok(acc / stats.len() as f64)
}

/// Inverse principal square root of an averaged covariance. A rank-deficient
/// input gets a small ridge when `allow_ridge` is set and is an error
/// otherwise.
pub fn whitening_from_covariance(sigma_bar: &DMatrix<f64>, allow_ridge: bool) -> Result<Whitening> {
    let j = sigma_bar.nrows();
    let (w, eig) = inv_sqrt_spd(sigma_bar);
    let max_eig = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let null: Vec<usize> = (0..j)
        .filter(|&i| eig.eigenvalues[i] <= RANK_TOL * max_eig.max(f64::MIN_POSITIVE))
        .collect();
    if null.is_empty() {
        return Ok(Whitening {
            matrix: w,
            ridge: 0.0,
        });
    }
    if !allow_ridge {
        let dirs: Vec<String> = null
            .iter()
            .map(|&i| {
                let v: Vec<String> = eig
                    .eigenvectors
                    .column(i)
                    .iter()
                    .map(|x| format!("{x:.4}"))
                    .collect();
                format!("[{}]", v.join(", "))
            })
            .collect();
        return Err(Error::numerical(format!(
            "averaged covariance is rank deficient; null directions: {}",
            dirs.join(" ")
        )));
    }
    let ridge = RIDGE_SCALE * sigma_bar.trace().max(f64::MIN_POSITIVE) / j as f64;
    let regularized = sigma_bar + DMatrix::identity(j, j) * ridge;
    let (w, _) = inv_sqrt_spd(&regularized);
    log::warn!("averaged covariance is rank deficient; added ridge {ridge:e} before whitening");
    Ok(Whitening { matrix: w, ridge })
}

/// `W_c = Σ̄^{-1/2}` for the cycles of one stage.
pub fn fit_whitening(stage: &[EmbeddedCycle], allow_ridge: bool) -> Result<Whitening> {
    if stage.len() < 2 {
        return Err(Error::validation("whitening needs at least 2 cycles"));
    }
    let stats = stage
        .iter()
        .map(CycleStats::from_cycle)
        .collect::<Result<Vec<_>>>()?;
    whitening_from_covariance(&mean_covariance(&stats)?, allow_ridge)
}

/// `KL(N(u, Σ) || N(0, I)) = ½ (tr Σ − ln det Σ + uᵀu − S)`.
pub fn kld_gaussian(u: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let s = u.len();
    if sigma.shape() != (s, s) {
        return Err(Error::shape(format!(
            "KL divergence: mean has length {s} but covariance is {:?}",
            sigma.shape()
        )));
    }
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("KL divergence: covariance is not positive definite"))?;
    let ln_det: f64 = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let kl = 0.5 * (sigma.trace() - ln_det + u.norm_squared() - s as f64);
    Ok(kl.max(0.0))
}

/// Objective over whitened per-cycle moments.
struct Problem {
    whitened: Vec<(DVector<f64>, DMatrix<f64>)>,
    s: usize,
    j: usize,
}

impl Problem {
    fn new(stats: &[CycleStats], w: &DMatrix<f64>, s: usize) -> Result<Self> {
        let j = check_stats(stats)?;
        if w.shape() != (j, j) {
            return Err(Error::shape(format!(
                "whitening is {:?} but cycles have dimension {j}",
                w.shape()
            )));
        }
        if s == 0 || s > j {
            return Err(Error::validation(format!(
                "consistency dimension S = {s} must lie in 1..={j}"
            )));
        }
        Ok(Self {
            whitened: stats.iter().map(|st| st.whitened(w)).collect(),
            s,
            j,
        })
    }

    /// Per-cycle KL values, or `None` if a projected covariance is not SPD.
    fn per_cycle(&self, pi: &DMatrix<f64>) -> Option<Vec<f64>> {
        let a = pi.rows(0, self.s);
        self.whitened
            .iter()
            .map(|(u, cov)| {
                let mu = &a * u;
                let sig = &a * cov * a.transpose();
                kld_gaussian(&mu, &sig).ok()
            })
            .collect()
    }

    fn value(&self, pi: &DMatrix<f64>) -> Option<f64> {
        self.per_cycle(pi).map(|v| v.iter().sum())
    }

    /// Objective and Euclidean gradient with respect to `Π`.
    fn value_grad(&self, pi: &DMatrix<f64>) -> Option<(f64, DMatrix<f64>)> {
        let a = pi.rows(0, self.s).into_owned();
        let mut grad_a = DMatrix::zeros(self.s, self.j);
        let mut total = 0.0;
        let eye = DMatrix::<f64>::identity(self.s, self.s);
        for (u, cov) in &self.whitened {
            let mu = &a * u;
            let a_cov = &a * cov;
            let sig = &a_cov * a.transpose();
            let chol = sig.clone().cholesky()?;
            let ln_det: f64 = 2.0
                * chol
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .map(|d| d.ln())
                    .sum::<f64>();
            total += 0.5 * (sig.trace() - ln_det + mu.norm_squared() - self.s as f64);
            let sig_inv = chol.inverse();
            grad_a += (&eye - sig_inv) * &a_cov + &mu * u.transpose();
        }
        let mut grad = DMatrix::zeros(self.j, self.j);
        grad.rows_mut(0, self.s).copy_from(&grad_a);
        Some((total, grad))
    }
}

/// Tangent projection at an orthogonal `Π`: `Π skew(Πᵀ G)`.
fn project_tangent(pi: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    pi * skew(&(pi.transpose() * g))
}

/// Sum over cycles of the consistency-block KL divergence.
pub fn cdl_objective(
    pi: &DMatrix<f64>,
    stats: &[CycleStats],
    w: &DMatrix<f64>,
    s: usize,
) -> Result<f64> {
    let problem = Problem::new(stats, w, s)?;
    check_square(pi, problem.j)?;
    problem
        .value(pi)
        .ok_or_else(|| Error::numerical("projected covariance is not positive definite"))
}

/// Euclidean gradient of [`cdl_objective`] with respect to every entry of `Π`.
pub fn cdl_euclidean_gradient(
    pi: &DMatrix<f64>,
    stats: &[CycleStats],
    w: &DMatrix<f64>,
    s: usize,
) -> Result<DMatrix<f64>> {
    let problem = Problem::new(stats, w, s)?;
    check_square(pi, problem.j)?;
    problem
        .value_grad(pi)
        .map(|(_, g)| g)
        .ok_or_else(|| Error::numerical("projected covariance is not positive definite"))
}

/// Riemannian gradient of [`cdl_objective`] on the orthogonal group.
pub fn cdl_gradient(
    pi: &DMatrix<f64>,
    stats: &[CycleStats],
    w: &DMatrix<f64>,
    s: usize,
) -> Result<DMatrix<f64>> {
    let g = cdl_euclidean_gradient(pi, stats, w, s)?;
    Ok(project_tangent(pi, &g))
}

fn check_square(pi: &DMatrix<f64>, j: usize) -> Result<()> {
    if pi.shape() != (j, j) {
        return Err(Error::shape(format!(
            "projection is {:?}, expected {j}x{j}",
            pi.shape()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdlOptions {
    pub n_restarts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub armijo_c: f64,
    pub seed: u64,
    pub allow_ridge: bool,
}

impl Default for CdlOptions {
    fn default() -> Self {
        Self {
            n_restarts: 5,
            max_iters: 500,
            grad_tol: 1e-6,
            armijo_c: 1e-4,
            seed: 0,
            allow_ridge: true,
        }
    }
}

/// Result of one conjugate-gradient run.
#[derive(Debug, Clone)]
pub struct CgRun {
    pub pi: DMatrix<f64>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Objective after initialization and after every accepted step.
    pub trace: Vec<f64>,
    /// `‖ΠΠᵀ − I‖_max` at every accepted iterate.
    pub orthogonality: Vec<f64>,
}

/// Riemannian conjugate gradient on O(J): QR retraction, projection
/// transport, Polak-Ribière+ and Armijo backtracking.
fn conjugate_gradient(problem: &Problem, init: DMatrix<f64>, opts: &CdlOptions) -> Result<CgRun> {
    let mut x = init;
    let (mut f, egrad) = problem
        .value_grad(&x)
        .ok_or_else(|| Error::numerical("objective undefined at the initial projection"))?;
    let mut g = project_tangent(&x, &egrad);
    let mut d = -&g;
    let mut trace = vec![f];
    let mut orthogonality = vec![crate::linalg::orthogonality_error(&x)];
    let mut step = 1.0_f64;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        let gnorm2 = g.norm_squared();
        if gnorm2.sqrt() < opts.grad_tol {
            converged = true;
            break;
        }
        let mut slope = inner(&g, &d);
        if slope >= 0.0 {
            d = -&g;
            slope = -gnorm2;
        }
        let accepted = armijo(problem, &x, f, &d, slope, step, opts.armijo_c).or_else(|| {
            // conjugate direction failed; retry along steepest descent
            let sd = -&g;
            armijo(problem, &x, f, &sd, -gnorm2, step, opts.armijo_c).map(|r| {
                d = sd;
                r
            })
        });
        let Some((x_new, f_new, t)) = accepted else {
            break;
        };
        iterations += 1;
        let (_, egrad) = problem
            .value_grad(&x_new)
            .ok_or_else(|| Error::numerical("objective undefined at an accepted iterate"))?;
        let g_new = project_tangent(&x_new, &egrad);
        let g_old = project_tangent(&x_new, &g);
        let d_old = project_tangent(&x_new, &d);
        let beta = (inner(&g_new, &(&g_new - &g_old)) / gnorm2).max(0.0);
        d = -&g_new + d_old * beta;
        x = x_new;
        f = f_new;
        g = g_new;
        step = (2.0 * t).min(1e3);
        trace.push(f);
        orthogonality.push(crate::linalg::orthogonality_error(&x));
    }
    if !converged && g.norm() < opts.grad_tol {
        converged = true;
    }
    Ok(CgRun {
        pi: x,
        objective: f,
        converged,
        iterations,
        trace,
        orthogonality,
    })
}

fn armijo(
    problem: &Problem,
    x: &DMatrix<f64>,
    f: f64,
    d: &DMatrix<f64>,
    slope: f64,
    step: f64,
    c: f64,
) -> Option<(DMatrix<f64>, f64, f64)> {
    let dnorm = d.norm();
    if dnorm == 0.0 {
        return None;
    }
    let accepts = |t: f64| -> Option<(DMatrix<f64>, f64)> {
        let candidate = qf(&(x + d * t));
        let fc = problem.value(&candidate)?;
        (fc <= f + c * t * slope).then_some((candidate, fc))
    };
    // Keep the first trial step within one radian of rotation.
    let mut t = step.min(1.0 / dnorm);
    let mut found = None;
    for _ in 0..80 {
        if let Some(hit) = accepts(t) {
            found = Some(hit);
            break;
        }
        t *= 0.5;
    }
    let (mut xt, mut ft) = found?;
    // Refine along the curve with a quadratic through f, the slope and f(t);
    // conjugate directions degrade badly under a pure backtracking search.
    for _ in 0..4 {
        let curvature = ft - f - slope * t;
        let trial = if curvature > 0.0 {
            (-slope * t * t / (2.0 * curvature)).clamp(0.1 * t, 10.0 * t)
        } else {
            4.0 * t
        };
        if (trial - t).abs() <= 1e-3 * t {
            break;
        }
        match accepts(trial) {
            Some((xq, fq)) if fq < ft => {
                t = trial;
                xt = xq;
                ft = fq;
            }
            _ => break,
        }
    }
    Some((xt, ft, t))
}

/// Learned split of the reconstructed space for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceModel {
    pub schema_version: u32,
    pub stage_id: u32,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "W_c", with = "serde_matrix")]
    pub w_c: DMatrix<f64>,
    #[serde(rename = "Pi", with = "serde_matrix")]
    pub pi: DMatrix<f64>,
    pub objective: f64,
    pub converged: bool,
    pub seed: u64,
    pub whitening: String,
    pub ridge: f64,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
}

impl SubspaceModel {
    pub fn dim(&self) -> usize {
        self.pi.nrows()
    }

    /// First `S` rows of `Π`.
    pub fn pi_s(&self) -> DMatrix<f64> {
        self.pi.rows(0, self.s).into_owned()
    }

    /// Remaining `J - S` rows of `Π`.
    pub fn pi_d(&self) -> DMatrix<f64> {
        self.pi.rows(self.s, self.dim() - self.s).into_owned()
    }

    /// Consistency extraction directions `Π_s W_c` (one per row).
    pub fn consistency_projection(&self) -> DMatrix<f64> {
        self.pi_s() * &self.w_c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = crate::read_json(path)?;
        if m.schema_version != SUBSPACE_SCHEMA {
            return Err(Error::validation(format!(
                "subspace model schema {} is not supported",
                m.schema_version
            )));
        }
        Ok(m)
    }

    /// Consistency-block KL divergence of each given cycle under this model.
    pub fn consistency_kl(&self, cycles: &[EmbeddedCycle]) -> Result<Vec<f64>> {
        let stats = cycles
            .iter()
            .map(CycleStats::from_cycle)
            .collect::<Result<Vec<_>>>()?;
        let problem = Problem::new(&stats, &self.w_c, self.s)?;
        problem
            .per_cycle(&self.pi)
            .ok_or_else(|| Error::numerical("projected covariance is not positive definite"))
    }
}

/// Fits the consistency/discrepancy split of one stage from `n_restarts`
/// seeded random orthogonal starts, keeping the lowest objective.
pub fn fit_cdl(stage: &[EmbeddedCycle], s: usize, opts: &CdlOptions) -> Result<SubspaceModel> {
    if stage.len() < 2 {
        return Err(Error::validation(
            "subspace learning needs at least 2 cycles",
        ));
    }
    let stage_id = stage[0].stage_id;
    let stats = stage
        .iter()
        .map(CycleStats::from_cycle)
        .collect::<Result<Vec<_>>>()?;
    let j = check_stats(&stats)?;
    if s == 0 || s >= j {
        return Err(Error::validation(format!(
            "consistency dimension S = {s} must lie in 1..{j}"
        )));
    }
    let whitening = whitening_from_covariance(&mean_covariance(&stats)?, opts.allow_ridge)?;
    let problem = Problem::new(&stats, &whitening.matrix, s)?;
    let mut best: Option<CgRun> = None;
    for restart in 0..opts.n_restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(restart as u64));
        let init = random_orthogonal(j, &mut rng);
        let run = conjugate_gradient(&problem, init, opts)?;
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    if !best.converged {
        log::warn!(
            "stage {stage_id}: subspace learning stopped after {} iterations without reaching \
             gradient tolerance {}",
            best.iterations,
            opts.grad_tol
        );
    }
    Ok(SubspaceModel {
        schema_version: SUBSPACE_SCHEMA,
        stage_id,
        s,
        w_c: whitening.matrix,
        pi: best.pi,
        objective: best.objective,
        converged: best.converged,
        seed: opts.seed,
        whitening: WHITENING_CONSTRUCTION.to_string(),
        ridge: whitening.ridge,
        iterations: best.iterations,
        objective_trace: best.trace,
    })
}

/// Runs the optimizer once from `init` on precomputed statistics. Exposed
/// for convergence diagnostics.
pub fn run_conjugate_gradient(
    stats: &[CycleStats],
    w: &DMatrix<f64>,
    s: usize,
    init: DMatrix<f64>,
    opts: &CdlOptions,
) -> Result<CgRun> {
    let problem = Problem::new(stats, w, s)?;
    check_square(&init, problem.j)?;
    conjugate_gradient(&problem, init, opts)
}

/// Consistency (`S × K'`) and discrepancy (`(J-S) × K'`) components of one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSplit {
    pub battery_id: String,
    pub cycle_index: u32,
    #[serde(with = "serde_matrix")]
    pub consistency: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub discrepancy: DMatrix<f64>,
}

impl ComponentSplit {
    /// Time average of each consistency row.
    pub fn consistency_mean(&self) -> DVector<f64> {
        row_means(&self.consistency)
    }

    pub fn discrepancy_mean(&self) -> DVector<f64> {
        row_means(&self.discrepancy)
    }

    pub fn stacked(&self) -> DMatrix<f64> {
        let (s, f) = (self.consistency.nrows(), self.discrepancy.nrows());
        let mut out = DMatrix::zeros(s + f, self.consistency.ncols());
        out.rows_mut(0, s).copy_from(&self.consistency);
        out.rows_mut(s, f).copy_from(&self.discrepancy);
        out
    }
}

/// Projects a reconstructed cycle: `[S_s; S_d] = Π W_c X`.
pub fn transform(model: &SubspaceModel, cycle: &EmbeddedCycle) -> Result<ComponentSplit> {
    if cycle.dim() != model.dim() {
        return Err(Error::shape(format!(
            "cycle has dimension {} but the stage {} model expects {}",
            cycle.dim(),
            model.stage_id,
            model.dim()
        )));
    }
    let y = &model.pi * (&model.w_c * &cycle.matrix);
    let j = model.dim();
    Ok(ComponentSplit {
        battery_id: cycle.battery_id.clone(),
        cycle_index: cycle.cycle_index,
        consistency: y.rows(0, model.s).into_owned(),
        discrepancy: y.rows(model.s, j - model.s).into_owned(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "S")]
    pub s: usize,
    pub objective: f64,
    pub converged: bool,
    pub per_cycle_kl: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Every candidate reached the same objective (e.g. nothing drifts).
    pub tie: bool,
}

/// Fits each candidate consistency dimension and reports its objective.
pub fn sweep_s(
    stage: &[EmbeddedCycle],
    candidates: &[usize],
    opts: &CdlOptions,
) -> Result<SweepReport> {
    let mut rows = Vec::with_capacity(candidates.len());
    for &s in candidates {
        let model = fit_cdl(stage, s, opts)?;
        rows.push(SweepRow {
            s,
            objective: model.objective,
            converged: model.converged,
            per_cycle_kl: model.consistency_kl(stage)?,
        });
    }
    let lo = rows
        .iter()
        .map(|r| r.objective)
        .fold(f64::INFINITY, f64::min);
    let hi = rows
        .iter()
        .map(|r| r.objective)
        .fold(f64::NEG_INFINITY, f64::max);
    let tie = !rows.is_empty() && hi - lo <= 1e-6 * (1.0 + hi.abs());
    Ok(SweepReport { rows, tie })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synthetic::{generate_synthetic, SyntheticConfig};
    use crate::linalg::{orthogonality_error, principal_angles};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn random_stats(j: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<CycleStats> {
        (0..n)
            .map(|_| CycleStats {
                mean: DVector::from_fn(j, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5),
                cov: random_spd(j, rng),
            })
            .collect()
    }

    #[test]
    fn whitening_identity_and_diagonal() {
        let w = whitening_from_covariance(&DMatrix::identity(4, 4), true).unwrap();
        assert!((w.matrix - DMatrix::identity(4, 4)).abs().max() < 1e-14);
        assert_eq!(w.ridge, 0.0);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let w = whitening_from_covariance(&d, true).unwrap().matrix;
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0]));
        assert!((w - expected).abs().max() < 1e-14);
    }

    #[test]
    fn whitening_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let sigma = random_spd(9, &mut rng);
            let w = whitening_from_covariance(&sigma, true).unwrap().matrix;
            // independent route: eigendecomposition, V Λ^{-1/2} Vᵀ
            let eig = sigma.clone().symmetric_eigen();
            let mut oracle = DMatrix::zeros(9, 9);
            for k in 0..9 {
                let v = eig.eigenvectors.column(k);
                oracle += v * v.transpose() / eig.eigenvalues[k].sqrt();
            }
            assert!((&w - &oracle).abs().max() < 1e-10);
            let white = &w * &sigma * w.transpose();
            assert!((white - DMatrix::identity(9, 9)).abs().max() < 1e-8);
        }
    }

    #[test]
    fn whitening_rank_deficient() {
        let v = DVector::from_vec(vec![1.0, 1.0, 0.0]);
        let sigma =
            &v * v.transpose() + DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 1.0]));
        let err = whitening_from_covariance(&sigma, false).unwrap_err();
        assert!(err.to_string().contains("null directions"), "{err}");
        let w = whitening_from_covariance(&sigma, true).unwrap();
        assert!(w.ridge > 0.0);
        assert!(w.matrix.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn kl_closed_form_examples() {
        let zero = DVector::zeros(2);
        assert_eq!(kld_gaussian(&zero, &DMatrix::identity(2, 2)).unwrap(), 0.0);
        let u = DVector::from_vec(vec![1.0, 0.0]);
        assert!((kld_gaussian(&u, &DMatrix::identity(2, 2)).unwrap() - 0.5).abs() < 1e-15);
        let two = DMatrix::from_element(1, 1, 2.0);
        let kl = kld_gaussian(&DVector::zeros(1), &two).unwrap();
        assert!((kl - 0.153_426_409_720_027_3).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_bad_inputs() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            kld_gaussian(&DVector::zeros(2), &bad),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            kld_gaussian(&DVector::zeros(3), &DMatrix::identity(2, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn stationary_stats_give_zero_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stats: Vec<CycleStats> = (0..5)
            .map(|_| CycleStats {
                mean: DVector::zeros(6),
                cov: DMatrix::identity(6, 6),
            })
            .collect();
        let w = DMatrix::identity(6, 6);
        for _ in 0..5 {
            let pi = random_orthogonal(6, &mut rng);
            assert!(cdl_objective(&pi, &stats, &w, 3).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn full_dimension_objective_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stats = random_stats(5, 4, &mut rng);
        let w = whitening_from_covariance(&mean_covariance(&stats).unwrap(), true)
            .unwrap()
            .matrix;
        let reference: f64 = stats
            .iter()
            .map(|st| {
                let (u, c) = st.whitened(&w);
                kld_gaussian(&u, &c).unwrap()
            })
            .sum();
        for _ in 0..5 {
            let pi = random_orthogonal(5, &mut rng);
            let v = cdl_objective(&pi, &stats, &w, 5).unwrap();
            assert!((v - reference).abs() < 1e-9 * reference.max(1.0));
        }
    }

    #[test]
    fn objective_invariant_to_rotation_within_consistency_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stats = random_stats(6, 7, &mut rng);
        let w = whitening_from_covariance(&mean_covariance(&stats).unwrap(), true)
            .unwrap()
            .matrix;
        let pi = random_orthogonal(6, &mut rng);
        let base = cdl_objective(&pi, &stats, &w, 3).unwrap();
        let r = random_orthogonal(3, &mut rng);
        let mut rotated = pi.clone();
        let block = &r * pi.rows(0, 3);
        rotated.rows_mut(0, 3).copy_from(&block);
        assert!((cdl_objective(&rotated, &stats, &w, 3).unwrap() - base).abs() < 1e-8);
    }

    #[test]
    fn euclidean_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..5 {
            let stats = random_stats(5, 6, &mut rng);
            let w = whitening_from_covariance(&mean_covariance(&stats).unwrap(), true)
                .unwrap()
                .matrix;
            let pi = random_orthogonal(5, &mut rng);
            let s = 1 + trial % 4;
            let g = cdl_euclidean_gradient(&pi, &stats, &w, s).unwrap();
            let h = 1e-6;
            let mut fd = DMatrix::zeros(5, 5);
            for i in 0..5 {
                for j in 0..5 {
                    let mut p = pi.clone();
                    p[(i, j)] += h;
                    let up = cdl_objective(&p, &stats, &w, s).unwrap();
                    p[(i, j)] -= 2.0 * h;
                    let dn = cdl_objective(&p, &stats, &w, s).unwrap();
                    fd[(i, j)] = (up - dn) / (2.0 * h);
                }
            }
            let rel = (&g - &fd).norm() / g.norm().max(1e-12);
            assert!(rel < 1e-5, "trial {trial}: relative error {rel}");
        }
    }

    #[test]
    fn riemannian_gradient_is_tangent_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stats = random_stats(6, 5, &mut rng);
        let w = whitening_from_covariance(&mean_covariance(&stats).unwrap(), true)
            .unwrap()
            .matrix;
        let pi = random_orthogonal(6, &mut rng);
        let rg = cdl_gradient(&pi, &stats, &w, 2).unwrap();
        // tangent: Πᵀ rg is skew
        let m = pi.transpose() * &rg;
        assert!((&m + m.transpose()).abs().max() < 1e-12);
        for _ in 0..3 {
            let omega = skew(&DMatrix::from_fn(6, 6, |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            }));
            let xi = &pi * omega;
            let h = 1e-6;
            let up = cdl_objective(&qf(&(&pi + &xi * h)), &stats, &w, 2).unwrap();
            let dn = cdl_objective(&qf(&(&pi - &xi * h)), &stats, &w, 2).unwrap();
            let fd = (up - dn) / (2.0 * h);
            let an = inner(&rg, &xi);
            assert!(
                (fd - an).abs() / an.abs().max(1e-12) < 1e-5,
                "fd {fd} analytic {an}"
            );
        }
    }

    #[test]
    fn cg_is_monotone_and_stays_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let stats = random_stats(6, 12, &mut rng);
        let w = whitening_from_covariance(&mean_covariance(&stats).unwrap(), true)
            .unwrap()
            .matrix;
        let run = run_conjugate_gradient(
            &stats,
            &w,
            3,
            random_orthogonal(6, &mut rng),
            &CdlOptions::default(),
        )
        .unwrap();
        assert!(run.trace.windows(2).all(|p| p[1] <= p[0]));
        assert!(run.orthogonality.iter().all(|&e| e < 1e-8));
        assert!(run.iterations > 0);
    }

    fn small_synthetic(amplitude: f64, seed: u64) -> Vec<EmbeddedCycle> {
        let cfg = SyntheticConfig {
            n_cycles: 40,
            k: 64,
            drift_amplitude: amplitude,
            ..Default::default()
        };
        generate_synthetic(&cfg, seed).unwrap().cycles
    }

    #[test]
    fn zero_drift_objective_vanishes() {
        let cycles = small_synthetic(0.0, 1);
        let model = fit_cdl(
            &cycles,
            4,
            &CdlOptions {
                n_restarts: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(model.objective < 1e-3, "objective {}", model.objective);
        let sweep = sweep_s(
            &cycles,
            &[2, 4, 6],
            &CdlOptions {
                n_restarts: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(sweep.tie);
        assert!(sweep.rows.iter().all(|r| r.objective < 1e-3));
    }

    #[test]
    fn recovers_planted_subspace() {
        let cfg = SyntheticConfig {
            n_cycles: 60,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg, 21).unwrap();
        let model = fit_cdl(
            &data.cycles,
            4,
            &CdlOptions {
                n_restarts: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(orthogonality_error(&model.pi) < 1e-8);
        let recovered = model.consistency_projection().transpose();
        let angles = principal_angles(&recovered, &data.truth.stationary_basis());
        let worst = angles.iter().copied().fold(0.0, f64::max).to_degrees();
        assert!(worst < 5.0, "largest principal angle {worst} deg");
    }

    #[test]
    fn sweep_has_elbow_at_planted_dimension() {
        let cfg = SyntheticConfig {
            n_cycles: 60,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg, 5).unwrap();
        let report = sweep_s(
            &data.cycles,
            &[3, 4, 5],
            &CdlOptions {
                n_restarts: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!report.tie);
        let obj = |s: usize| report.rows.iter().find(|r| r.s == s).unwrap().objective;
        assert!(
            obj(4) / obj(5) < 0.5,
            "objective(4) {} objective(5) {}",
            obj(4),
            obj(5)
        );
        assert!(report.rows.iter().all(|r| r.converged));
        assert_eq!(report.rows[0].per_cycle_kl.len(), 60);
    }

    #[test]
    fn transform_identity_and_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(6, 10, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cycle = EmbeddedCycle {
            battery_id: "B".into(),
            cycle_index: 1,
            stage_id: 1,
            matrix: x.clone(),
        };
        let mut model = SubspaceModel {
            schema_version: SUBSPACE_SCHEMA,
            stage_id: 1,
            s: 2,
            w_c: DMatrix::identity(6, 6),
            pi: DMatrix::identity(6, 6),
            objective: 0.0,
            converged: true,
            seed: 0,
            whitening: WHITENING_CONSTRUCTION.into(),
            ridge: 0.0,
            iterations: 0,
            objective_trace: vec![],
        };
        let split = transform(&model, &cycle).unwrap();
        assert_eq!(split.consistency, x.rows(0, 2).into_owned());
        assert_eq!(split.discrepancy, x.rows(2, 4).into_owned());

        model.pi = random_orthogonal(6, &mut rng);
        model.w_c = random_spd(6, &mut rng);
        let split = transform(&model, &cycle).unwrap();
        let back = model.pi.transpose() * split.stacked();
        assert!((back - &model.w_c * &x).abs().max() < 1e-10);

        let wrong = EmbeddedCycle {
            matrix: DMatrix::zeros(5, 10),
            ..cycle
        };
        assert!(matches!(transform(&model, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn consistency_rows_are_stationary_discrepancy_rows_drift() {
        let cfg = SyntheticConfig {
            n_cycles: 60,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg, 33).unwrap();
        let (train, test) = data.cycles.split_at(42);
        let model = fit_cdl(
            train,
            4,
            &CdlOptions {
                n_restarts: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let splits: Vec<ComponentSplit> = data
            .cycles
            .iter()
            .map(|c| transform(&model, c).unwrap())
            .collect();
        assert_eq!(splits.len(), train.len() + test.len());
        // drift statistic: range over cycles of each row's time average
        let drift = |rows: Vec<DVector<f64>>, r: usize| {
            let v: Vec<f64> = rows.iter().map(|m| m[r]).collect();
            v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
        };
        let s_means: Vec<DVector<f64>> = splits.iter().map(|s| s.consistency_mean()).collect();
        let d_means: Vec<DVector<f64>> = splits.iter().map(|s| s.discrepancy_mean()).collect();
        for r in 0..4 {
            assert!(
                drift(s_means.clone(), r) < 0.1,
                "consistency row {r} drifts"
            );
        }
        assert!((0..5).any(|r| drift(d_means.clone(), r) >= 0.1));
    }

    #[test]
    fn model_json_round_trip_reproduces_transform() {
        let cycles = small_synthetic(1.0, 4);
        let model = fit_cdl(
            &cycles,
            4,
            &CdlOptions {
                n_restarts: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        model.save(&p).unwrap();
        let back = SubspaceModel::load(&p).unwrap();
        assert_eq!(back, model);
        assert_eq!(
            transform(&back, &cycles[3]).unwrap(),
            transform(&model, &cycles[3]).unwrap()
        );
    }

    #[test]
    fn fit_rejects_bad_arguments() {
        let cycles = small_synthetic(1.0, 4);
        assert!(fit_cdl(&cycles[..1], 2, &CdlOptions::default()).is_err());
        assert!(fit_cdl(&cycles, 9, &CdlOptions::default()).is_err());
        assert!(fit_cdl(&cycles, 0, &CdlOptions::default()).is_err());
    }
}

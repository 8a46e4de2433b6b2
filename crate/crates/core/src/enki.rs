//! Tempered ensemble Kalman inversion over the policy weights `θ`.
//!
//! Each iteration rolls every particle over the horizon, picks a tempering
//! step `λ` from the spread of data misfits, and moves the particles with a
//! perturbed-observation Kalman update whose noise is inflated by `1/λ`.
//! The steps sum to one, so the final ensemble approximates the posterior
//! `p(θ | Y = 0)`.
//!
//! The gain is never formed in observation space. With anomaly factors
//! `A = (G − Ḡ)/√(M−1)` and `Θ = (θ − θ̄)/√(M−1)` and diagonal noise `D`,
//!
//! ```text
//! Σ^θy (Σ^y + D)⁻¹ r = Θ (I + AᵀD⁻¹A)⁻¹ AᵀD⁻¹ r
//! ```
//!
//! which costs `O(d·M²)` instead of `O(d³)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::PackState;
use crate::error::{Error, Result};
use crate::policy::Theta;
use crate::problem::{DemandForecast, OpmProblem};

/// Observation value substituted for non-finite rollout outputs.
pub const FAILED_OBSERVATION: f64 = 1e6;

/// Stream index reserved for drawing the initial ensemble.
const INIT_STREAM: u64 = u32::MAX as u64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum LambdaMode {
    /// Bisection on the effective sample size of the misfit weights.
    Adaptive,
    /// `λ_ℓ ∝ ratio^ℓ`, normalized to sum to one over `max_iters` steps.
    Geometric { ratio: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnkiConfig {
    pub particles: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub lambda_mode: LambdaMode,
    pub ess_target: f64,
    /// Project particles back onto the simplex after each update.
    pub project: bool,
    /// Shift the initial ensemble so its sample mean equals the prior mean.
    pub recenter: bool,
}

impl Default for EnkiConfig {
    fn default() -> Self {
        Self {
            particles: 50,
            max_iters: 20,
            seed: 0,
            lambda_mode: LambdaMode::Adaptive,
            ess_target: 0.5,
            project: true,
            recenter: true,
        }
    }
}

impl EnkiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::config("enki.particles", "need at least 2 particles"));
        }
        if self.max_iters < 1 {
            return Err(Error::config("enki.max_iters", "need at least 1 iteration"));
        }
        if !(self.ess_target > 0.0 && self.ess_target <= 1.0) {
            return Err(Error::config(
                "enki.ess_target",
                format!("must lie in (0, 1], got {}", self.ess_target),
            ));
        }
        if let LambdaMode::Geometric { ratio } = self.lambda_mode {
            if !(ratio.is_finite() && ratio > 0.0) {
                return Err(Error::config("enki.lambda_mode.ratio", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub thetas: Vec<[f64; 3]>,
    /// `d × M`; column `i` is particle `i`'s stacked rollout. Empty until
    /// the particles have been rolled out at the current iteration.
    pub observations: DMatrix<f64>,
    pub iteration: usize,
    pub lambda_used: f64,
}

impl Ensemble {
    pub fn size(&self) -> usize {
        self.thetas.len()
    }

    fn theta_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(3, self.size(), |k, i| self.thetas[i][k])
    }
}

/// Sample moments of an ensemble, with the observation covariance kept in
/// factored form.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub theta_mean: [f64; 3],
    pub obs_mean: DVector<f64>,
    pub cov_theta: Matrix3<f64>,
    /// `Σ^θy`, `3 × d`.
    pub cov_cross: DMatrix<f64>,
    /// `A = (G − Ḡ)/√(M−1)`, so that `Σ^y = AAᵀ`.
    pub obs_anomalies: DMatrix<f64>,
}

impl EnsembleStats {
    /// `Σ^y v` without forming `Σ^y`.
    pub fn cov_obs_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.obs_anomalies * (self.obs_anomalies.transpose() * v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub mean: Theta,
    pub covariance: [[f64; 3]; 3],
    pub iterations_run: usize,
    pub lambdas: Vec<f64>,
    /// Median per-particle misfit entering each iteration.
    pub misfit_history: Vec<f64>,
    /// Particle rollouts that failed or produced non-finite values.
    pub failed_particles: usize,
    pub warnings: Vec<String>,
}

fn particle_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn noise_stream(iteration: usize, particle: usize) -> u64 {
    ((iteration as u64) << 32) | particle as u64
}

/// `M` draws from `N(θ̄, prior_cov)` projected onto the simplex.
pub fn init_ensemble(config: &EnkiConfig, theta_nominal: &[f64; 3], prior_cov: &Matrix3<f64>) -> Result<Ensemble> {
    config.validate()?;
    let chol = prior_cov
        .cholesky()
        .ok_or_else(|| Error::config("opm.prior_weight", "prior covariance is not positive definite"))?;
    let l = chol.l();
    let m = config.particles;
    let mut raw: Vec<[f64; 3]> = (0..m)
        .map(|i| {
            let mut rng = particle_rng(config.seed, noise_stream(INIT_STREAM as usize, i));
            let z = nalgebra::Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            let x = nalgebra::Vector3::from(*theta_nominal) + l * z;
            [x[0], x[1], x[2]]
        })
        .collect();
    if config.project {
        raw.iter_mut().for_each(|t| *t = Theta::project(*t).as_array());
    }
    if config.recenter {
        let target = if config.project {
            Theta::project(*theta_nominal).as_array()
        } else {
            *theta_nominal
        };
        let mean = mean3(&raw);
        for t in raw.iter_mut() {
            for k in 0..3 {
                t[k] += target[k] - mean[k];
            }
            if config.project {
                *t = Theta::project(*t).as_array();
            }
        }
    }
    Ok(Ensemble {
        thetas: raw,
        observations: DMatrix::zeros(0, 0),
        iteration: 0,
        lambda_used: 0.0,
    })
}

fn mean3(thetas: &[[f64; 3]]) -> [f64; 3] {
    let m = thetas.len() as f64;
    let mut acc = [0.0; 3];
    for t in thetas {
        for k in 0..3 {
            acc[k] += t[k];
        }
    }
    acc.map(|v| v / m)
}

/// Columns minus their row mean, scaled by `1/√(M−1)`.
fn anomalies(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let m = x.ncols();
    let mean = x.column_mean();
    let scale = 1.0 / ((m - 1) as f64).sqrt();
    let mut a = x.clone();
    for mut col in a.column_iter_mut() {
        col -= &mean;
        col *= scale;
    }
    (mean, a)
}

pub fn ensemble_stats(ensemble: &Ensemble) -> EnsembleStats {
    let (theta_mean, theta_anom) = anomalies(&ensemble.theta_matrix());
    let (obs_mean, obs_anomalies) = if ensemble.observations.ncols() == ensemble.size() {
        anomalies(&ensemble.observations)
    } else {
        (DVector::zeros(0), DMatrix::zeros(0, ensemble.size()))
    };
    let cov = &theta_anom * theta_anom.transpose();
    EnsembleStats {
        theta_mean: [theta_mean[0], theta_mean[1], theta_mean[2]],
        obs_mean,
        cov_theta: Matrix3::from_fn(|i, j| cov[(i, j)]),
        cov_cross: &theta_anom * obs_anomalies.transpose(),
        obs_anomalies,
    }
}

/// `Φ_i = ½ G_iᵀ Q G_i` for each column of `observations`.
pub fn misfits(observations: &DMatrix<f64>, precision: &[f64]) -> Vec<f64> {
    observations
        .column_iter()
        .map(|g| 0.5 * g.iter().zip(precision).map(|(gi, qi)| qi * gi * gi).sum::<f64>())
        .collect()
}

/// Effective sample size of `w_i ∝ exp(−λ Φ_i)`; non-finite misfits get zero weight.
pub fn effective_sample_size(misfits: &[f64], lambda: f64) -> f64 {
    let min = misfits
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    let (mut s1, mut s2) = (0.0, 0.0);
    for &phi in misfits {
        if phi.is_finite() {
            let w = (-lambda * (phi - min)).exp();
            s1 += w;
            s2 += w * w;
        }
    }
    s1 * s1 / s2
}

/// Largest tempering step in `(0, remaining]` whose weights keep the
/// effective sample size at `ess_target·M`. Bisection runs well past the 1%
/// acceptance band so the step is reproducible to round-off.
pub fn select_lambda(misfits: &[f64], remaining: f64, ess_target: f64) -> Result<f64> {
    if !(remaining > 0.0 && remaining <= 1.0 + 1e-12) {
        return Err(Error::Solver(format!("tempering budget {remaining} outside (0, 1]")));
    }
    if !misfits.iter().any(|v| v.is_finite()) {
        return Err(Error::Solver(format!(
            "all {} particle misfits are non-finite",
            misfits.len()
        )));
    }
    let target = ess_target * misfits.len() as f64;
    if effective_sample_size(misfits, remaining) >= target {
        return Ok(remaining);
    }
    let (mut lo, mut hi) = (0.0, remaining);
    let mut mid = 0.5 * remaining;
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let ess = effective_sample_size(misfits, mid);
        if (ess - target).abs() <= 1e-9 * target || hi - lo <= 1e-15 {
            break;
        }
        if ess > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

/// Per-particle perturbations `v^i ~ N(0, diag(noise_var))`, keyed by
/// `(seed, iteration, particle)`.
pub fn draw_perturbations(seed: u64, iteration: usize, noise_var: &DVector<f64>, particles: usize) -> DMatrix<f64> {
    let d = noise_var.len();
    let mut v = DMatrix::zeros(d, particles);
    v.as_mut_slice()
        .par_chunks_mut(d.max(1))
        .enumerate()
        .for_each(|(i, col)| {
            let mut rng = particle_rng(seed, noise_stream(iteration, i));
            for (x, var) in col.iter_mut().zip(noise_var.iter()) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = z * var.sqrt();
            }
        });
    v
}

/// Particle increments `Σ^θy (Σ^y + D)⁻¹ (y_obs − G^i − v^i)` through the
/// `M × M` inner system, or the `d × d` one when `d ≤ M`. `thetas` is `p × M`, `predictions` and
/// `perturbations` are `d × M`, `noise_var` is the diagonal of `D`.
/// Returns the increments and whether a ridge had to be added.
pub fn ensemble_space_increments(
    thetas: &DMatrix<f64>,
    predictions: &DMatrix<f64>,
    y_obs: &DVector<f64>,
    noise_var: &DVector<f64>,
    perturbations: &DMatrix<f64>,
) -> (DMatrix<f64>, bool) {
    let m = thetas.ncols();
    let (_, theta_anom) = anomalies(thetas);
    let (_, a) = anomalies(predictions);
    let mut residual = -(predictions + perturbations);
    for mut col in residual.column_iter_mut() {
        col += y_obs;
    }
    if a.nrows() <= m {
        // Fewer observations than particles: the d × d system is the smaller one.
        let mut cov_y = &a * a.transpose();
        for k in 0..a.nrows() {
            cov_y[(k, k)] += noise_var[k];
        }
        let (chol, ridged) = cholesky_with_ridge(cov_y);
        return (theta_anom * a.transpose() * chol.solve(&residual), ridged);
    }
    let d_inv = noise_var.map(|v| 1.0 / v);
    // D⁻¹A, then S = Aᵀ D⁻¹ A.
    let mut dinv_a = a.clone();
    for mut col in dinv_a.column_iter_mut() {
        col.component_mul_assign(&d_inv);
    }
    let mut inner = a.transpose() * &dinv_a;
    for k in 0..m {
        inner[(k, k)] += 1.0;
    }
    let rhs = dinv_a.transpose() * residual;
    let (chol, ridged) = cholesky_with_ridge(inner);
    (theta_anom * chol.solve(&rhs), ridged)
}

fn cholesky_with_ridge(mut m: DMatrix<f64>) -> (Cholesky<f64, Dyn>, bool) {
    if let Some(c) = m.clone().cholesky() {
        return (c, false);
    }
    let mut ridge = 1e-10;
    loop {
        for k in 0..m.nrows() {
            m[(k, k)] += ridge;
        }
        if let Some(c) = m.clone().cholesky() {
            return (c, true);
        }
        ridge *= 10.0;
    }
}

/// Same increments as [`ensemble_space_increments`] from the explicit
/// `d × d` system. Only for small `d`.
pub fn direct_increments(
    thetas: &DMatrix<f64>,
    predictions: &DMatrix<f64>,
    y_obs: &DVector<f64>,
    noise_var: &DVector<f64>,
    perturbations: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (_, theta_anom) = anomalies(thetas);
    let (_, a) = anomalies(predictions);
    let cross = &theta_anom * a.transpose();
    let cov_y = &a * a.transpose() + DMatrix::from_diagonal(noise_var);
    let mut residual = -(predictions + perturbations);
    for mut col in residual.column_iter_mut() {
        col += y_obs;
    }
    let lu = cov_y.lu();
    let solved = lu
        .solve(&residual)
        .ok_or_else(|| Error::Solver("observation covariance is singular".into()))?;
    Ok(cross * solved)
}

/// One tempered update with step `lambda`; `precision` is the diagonal of `Q`.
/// The returned ensemble has no observations yet.
pub fn kalman_update(
    ensemble: &Ensemble,
    lambda: f64,
    precision: &[f64],
    config: &EnkiConfig,
) -> Result<(Ensemble, bool)> {
    let m = ensemble.size();
    if ensemble.observations.ncols() != m || ensemble.observations.nrows() != precision.len() {
        return Err(Error::Solver("ensemble observations are missing or mis-sized".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::Solver(format!("tempering step {lambda} must be positive")));
    }
    let noise_var = DVector::from_iterator(precision.len(), precision.iter().map(|q| 1.0 / (lambda * q)));
    let v = draw_perturbations(config.seed, ensemble.iteration, &noise_var, m);
    let y_obs = DVector::zeros(precision.len());
    let (delta, ridged) =
        ensemble_space_increments(&ensemble.theta_matrix(), &ensemble.observations, &y_obs, &noise_var, &v);
    let thetas = ensemble
        .thetas
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let moved = [t[0] + delta[(0, i)], t[1] + delta[(1, i)], t[2] + delta[(2, i)]];
            if config.project {
                Theta::project(moved).as_array()
            } else {
                moved
            }
        })
        .collect();
    Ok((
        Ensemble {
            thetas,
            observations: DMatrix::zeros(0, 0),
            iteration: ensemble.iteration + 1,
            lambda_used: ensemble.lambda_used + lambda,
        },
        ridged,
    ))
}

/// Rolls every particle out in parallel, filling `ensemble.observations`.
/// Returns the number of particles whose rollout failed.
pub fn rollout_ensemble(
    ensemble: &mut Ensemble,
    problem: &OpmProblem,
    x0: &PackState,
    forecast: &DemandForecast,
) -> usize {
    let d = problem.layout().len();
    let mut obs = DMatrix::zeros(d, ensemble.size());
    let failed: usize = obs
        .as_mut_slice()
        .par_chunks_mut(d)
        .zip(ensemble.thetas.par_iter())
        .map(|(col, theta)| {
            let ok = problem.rollout_into(x0, theta, forecast, col).is_ok();
            let mut bad = !ok;
            for v in col.iter_mut() {
                if !ok || !v.is_finite() {
                    *v = FAILED_OBSERVATION;
                    bad = true;
                }
            }
            usize::from(bad)
        })
        .sum();
    ensemble.observations = obs;
    failed
}

fn geometric_schedule(ratio: f64, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|l| ratio.powi(l as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Estimates `θ` with the prior centered on the problem's nominal weights.
pub fn solve(
    problem: &OpmProblem,
    x0: &PackState,
    forecast: &DemandForecast,
    config: &EnkiConfig,
) -> Result<ThetaEstimate> {
    solve_about(problem, x0, forecast, config, &problem.opm.theta_nominal)
}

/// Estimates `θ` with the prior centered on `prior_mean` (a warm start).
pub fn solve_about(
    problem: &OpmProblem,
    x0: &PackState,
    forecast: &DemandForecast,
    config: &EnkiConfig,
    prior_mean: &[f64; 3],
) -> Result<ThetaEstimate> {
    config.validate()?;
    problem.check_forecast(forecast)?;
    x0.validate()?;
    if x0.len() != problem.n_cells() {
        return Err(Error::config(
            "state",
            format!("state has {} cells, pack has {}", x0.len(), problem.n_cells()),
        ));
    }
    let prior_cov = problem
        .prior_matrix()
        .try_inverse()
        .ok_or_else(|| Error::config("opm.prior_weight", "prior weight is singular"))?;
    let precision = problem.obs_precision(forecast);
    let schedule = match config.lambda_mode {
        LambdaMode::Geometric { ratio } => Some(geometric_schedule(ratio, config.max_iters)),
        LambdaMode::Adaptive => None,
    };

    let mut ensemble = init_ensemble(config, prior_mean, &prior_cov)?;
    let mut lambdas = Vec::new();
    let mut misfit_history = Vec::new();
    let mut failed_particles = 0;
    let mut warnings = Vec::new();
    for l in 0..config.max_iters {
        failed_particles += rollout_ensemble(&mut ensemble, problem, x0, forecast);
        let phi = misfits(&ensemble.observations, &precision);
        misfit_history.push(median(&phi));
        let remaining = 1.0 - ensemble.lambda_used;
        let lambda = if l + 1 == config.max_iters {
            remaining
        } else if let Some(s) = &schedule {
            s[l].min(remaining)
        } else {
            select_lambda(&phi, remaining, config.ess_target)?
        };
        let (next, ridged) = kalman_update(&ensemble, lambda, &precision, config)?;
        if ridged {
            warnings.push(format!("iteration {l}: ridge added to the inner system"));
        }
        ensemble = next;
        lambdas.push(lambda);
        if ensemble.lambda_used >= 1.0 - 1e-12 {
            break;
        }
    }

    let stats = ensemble_stats(&ensemble);
    let mean = Theta::project(stats.theta_mean);
    let c = stats.cov_theta;
    Ok(ThetaEstimate {
        mean,
        covariance: [
            [c[(0, 0)], c[(0, 1)], c[(0, 2)]],
            [c[(1, 0)], c[(1, 1)], c[(1, 2)]],
            [c[(2, 0)], c[(2, 1)], c[(2, 2)]],
        ],
        iterations_run: lambdas.len(),
        lambdas,
        misfit_history,
        failed_particles,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::CellParameters;
    use crate::policy::{features, PolicyConfig};
    use crate::problem::OpmConfig;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn small_problem(n: usize, horizon: usize) -> OpmProblem {
        OpmProblem::new(
            vec![CellParameters::inr18650_25r(); n],
            OpmConfig {
                horizon,
                ..OpmConfig::default()
            },
            PolicyConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn ess_two_point_root() {
        // (1 + e^{−2λ})² / (1 + e^{−4λ}) = 1.5
        let lambda = select_lambda(&[0.0, 2.0], 1.0, 0.75).unwrap();
        assert_relative_eq!(lambda, 0.658479, epsilon = 1e-5);
        let ess = effective_sample_size(&[0.0, 2.0], lambda);
        assert!((ess - 1.5).abs() <= 0.015);
    }

    #[test]
    fn lambda_budget_and_degenerate_weights() {
        assert_eq!(select_lambda(&[3.0; 10], 0.4, 0.5).unwrap(), 0.4);
        assert_eq!(select_lambda(&[0.0, 2.0], 0.05, 0.75).unwrap(), 0.05);
        assert!(select_lambda(&[f64::NAN, f64::INFINITY], 1.0, 0.5).is_err());
        let l = select_lambda(&[0.0, f64::INFINITY, 2.0], 1.0, 0.5).unwrap();
        assert!(l > 0.0 && l <= 1.0);
    }

    #[test]
    fn two_point_sample_covariance() {
        let e = Ensemble {
            thetas: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            observations: DMatrix::zeros(0, 0),
            iteration: 0,
            lambda_used: 0.0,
        };
        let s = ensemble_stats(&e);
        assert_eq!(s.theta_mean, [0.5, 0.5, 0.0]);
        assert_relative_eq!(s.cov_theta[(0, 0)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(s.cov_theta[(0, 1)], -0.5, epsilon = 1e-15);
    }

    #[test]
    fn identical_particles_have_zero_covariance_and_do_not_move() {
        let e = Ensemble {
            thetas: vec![[0.2, 0.3, 0.5]; 5],
            observations: DMatrix::from_fn(4, 5, |r, _| r as f64),
            iteration: 0,
            lambda_used: 0.0,
        };
        let s = ensemble_stats(&e);
        assert!(s.cov_theta.amax() < 1e-15);
        assert!(s.cov_cross.amax() < 1e-15);
        let (next, _) = kalman_update(&e, 0.5, &[1.0; 4], &EnkiConfig::default()).unwrap();
        for t in &next.thetas {
            for k in 0..3 {
                assert_relative_eq!(t[k], [0.2, 0.3, 0.5][k], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn independent_streams_decorrelate() {
        let m = 20_000;
        let noise = DVector::from_element(2, 1.0);
        let a = draw_perturbations(1, 0, &noise, m);
        let b = draw_perturbations(2, 0, &noise, m);
        let e = Ensemble {
            thetas: (0..m).map(|i| [a[(0, i)], a[(1, i)], 0.0]).collect(),
            observations: b,
            iteration: 0,
            lambda_used: 0.0,
        };
        let s = ensemble_stats(&e);
        assert!(s.cov_cross.amax() < 4.0 / (m as f64).sqrt(), "{}", s.cov_cross);
    }

    #[test]
    fn vanishing_lambda_freezes_particles() {
        let e = Ensemble {
            thetas: vec![[0.2, 0.3, 0.5], [0.3, 0.3, 0.4], [0.25, 0.35, 0.4]],
            observations: DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.5, -1.0, 0.0, 1.0]),
            iteration: 0,
            lambda_used: 0.0,
        };
        let cfg = EnkiConfig::default();
        let (small, _) = kalman_update(&e, 1e-12, &[1.0; 2], &cfg).unwrap();
        for (a, b) in small.thetas.iter().zip(&e.thetas) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn init_ensemble_statistics() {
        let cfg = EnkiConfig {
            particles: 1000,
            recenter: false,
            project: false,
            ..EnkiConfig::default()
        };
        let cov = Matrix3::identity() * 0.04;
        let e = init_ensemble(&cfg, &[1.0 / 3.0; 3], &cov).unwrap();
        let s = ensemble_stats(&e);
        let se = (0.04f64 / 1000.0).sqrt();
        for k in 0..3 {
            assert!((s.theta_mean[k] - 1.0 / 3.0).abs() < 3.0 * se);
        }
        let again = init_ensemble(&cfg, &[1.0 / 3.0; 3], &cov).unwrap();
        assert_eq!(e, again);

        let tight = init_ensemble(&EnkiConfig::default(), &[0.2, 0.3, 0.5], &(Matrix3::identity() * 1e-30)).unwrap();
        for t in &tight.thetas {
            for k in 0..3 {
                assert_relative_eq!(t[k], [0.2, 0.3, 0.5][k], epsilon = 1e-12);
            }
        }
        assert!(init_ensemble(&cfg, &[1.0 / 3.0; 3], &(-Matrix3::identity())).is_err());
    }

    #[test]
    fn recentered_ensemble_matches_prior_mean() {
        let e = init_ensemble(&EnkiConfig::default(), &[1.0 / 3.0; 3], &(Matrix3::identity() * 0.04)).unwrap();
        let m = mean3(&e.thetas);
        for k in 0..3 {
            assert!((m[k] - 1.0 / 3.0).abs() < 0.01, "{m:?}");
        }
        for t in &e.thetas {
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conjugate_scalar_posterior() {
        // θ ~ N(0, 1), y = θ + v, v ~ N(0, 1), observed y = 1.
        let m = 10_000;
        let prior = draw_perturbations(11, 0, &DVector::from_element(1, 1.0), m);
        let noise = DVector::from_element(1, 1.0);
        let v = draw_perturbations(12, 0, &noise, m);
        let (delta, _) = ensemble_space_increments(&prior, &prior, &DVector::from_element(1, 1.0), &noise, &v);
        let post: Vec<f64> = (0..m).map(|i| prior[(0, i)] + delta[(0, i)]).collect();
        let mean = post.iter().sum::<f64>() / m as f64;
        let var = post.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
        assert!((var - 0.5).abs() < 0.05, "{var}");
    }

    #[test]
    fn ensemble_space_matches_direct_solve() {
        let (p, d, m) = (3, 40, 12);
        let noise = DVector::from_fn(d, |k, _| 0.1 + 0.05 * k as f64);
        let thetas = draw_perturbations(3, 0, &DVector::from_element(p, 1.0), m);
        let base = draw_perturbations(4, 0, &DVector::from_element(d, 1.0), m);
        let predictions = DMatrix::from_fn(d, m, |r, c| base[(r, c)] + (r as f64 * 0.1 + 1.0) * thetas[(r % p, c)]);
        let y = DVector::from_fn(d, |k, _| (k as f64).sin());
        let v = draw_perturbations(5, 0, &noise, m);
        let (fast, _) = ensemble_space_increments(&thetas, &predictions, &y, &noise, &v);
        let slow = direct_increments(&thetas, &predictions, &y, &noise, &v).unwrap();
        assert!((&fast - &slow).amax() <= 1e-8 * slow.amax().max(1.0));
    }

    #[test]
    fn solve_is_deterministic_and_budgeted() {
        let p = small_problem(3, 2);
        let s = PackState::new(vec![0.70, 0.72, 0.74], vec![298.0, 298.5, 299.0]).unwrap();
        let f = DemandForecast::constant(30.0, 2);
        let cfg = EnkiConfig {
            seed: 9,
            ..EnkiConfig::default()
        };
        let a = solve(&p, &s, &f, &cfg).unwrap();
        let b = solve(&p, &s, &f, &cfg).unwrap();
        assert_eq!(a, b);
        assert_relative_eq!(a.lambdas.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(a.iterations_run <= cfg.max_iters);
        assert_relative_eq!(a.mean.as_array().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let c = Matrix3::from_fn(|i, j| a.covariance[i][j]);
        assert!((c - c.transpose()).amax() < 1e-15);
        assert!(c.symmetric_eigenvalues().min() > -1e-14);
    }

    #[test]
    fn identical_cells_split_evenly() {
        let p = small_problem(2, 2);
        let s = PackState::uniform(2, 0.7, 298.0);
        let f = DemandForecast::constant(20.0, 2);
        let est = solve(&p, &s, &f, &EnkiConfig::default()).unwrap();
        let mu = features(&s, &p.cells, 20.0, &p.policy).unwrap().psr(&est.mean);
        for m in mu {
            assert!((m - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn geometric_schedule_sums_to_one() {
        let s = geometric_schedule(2.0, 5);
        assert_relative_eq!(s.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert!(s.windows(2).all(|w| w[1] > w[0]));
        let p = small_problem(2, 1);
        let st = PackState::new(vec![0.7, 0.71], vec![298.0, 298.0]).unwrap();
        let cfg = EnkiConfig {
            lambda_mode: LambdaMode::Geometric { ratio: 2.0 },
            max_iters: 5,
            ..EnkiConfig::default()
        };
        let est = solve(&p, &st, &DemandForecast::constant(20.0, 1), &cfg).unwrap();
        assert_eq!(est.iterations_run, 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn ess_decreases_with_lambda(
            phi in prop::collection::vec(0.0..50.0f64, 2..30),
            a in 0.0..1.0f64,
            b in 0.0..1.0f64,
        ) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(effective_sample_size(&phi, hi) <= effective_sample_size(&phi, lo) + 1e-9);
        }
    }
}

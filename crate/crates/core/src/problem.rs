//! The policy-parameterized OPM problem written as a virtual observation model.
//!
//! For a candidate weight vector `θ` the pack is rolled forward over the
//! horizon with `μ_t = Φ(x_t)θ`. At every step the virtual observation is
//!
//! ```text
//! y_t = [ √(ΦᵀBΦ)·θ ; ψ_g(g(x_t, θ)) ; ψ_e(e(x_t, θ)) ]
//! ```
//!
//! whose zero value encodes a lossless, feasible allocation. Inferring `θ`
//! from the pseudo-measurement `Y = 0` under Gaussian noise is equivalent to
//! minimizing [`OpmProblem::mhe_cost`].
//!
//! Inequality residuals (each `≤ 0` when satisfied) are stacked per step as
//! `[T_min, T_max, q_min, q_max, i_min, i_max, q_band+, q_band−, T_band+, T_band−]`
//! with the cell index inner-most; see [`ObsLayout`].

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::cell::{mean, CellParameters, PackState};
use crate::error::{Error, Result};
use crate::policy::{dot3, features, FeatureMatrix, PolicyConfig};

/// Softplus argument above which `ln(1 + e^z)` is replaced by `z`.
const SOFTPLUS_LINEAR_ABOVE: f64 = 36.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InequalityBarrier {
    pub alpha: f64,
    pub beta: f64,
    /// Use softplus on both sides of zero instead of the piecewise form.
    pub smooth: bool,
}

impl Default for InequalityBarrier {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 50.0,
            smooth: false,
        }
    }
}

impl InequalityBarrier {
    pub fn eval(&self, x: f64) -> f64 {
        if self.smooth {
            softplus(self.beta * x) / self.alpha
        } else {
            barrier_g(x, self.alpha, self.beta)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EqualityBarrier {
    pub alpha: f64,
    pub beta: u32,
}

impl Default for EqualityBarrier {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 2 }
    }
}

fn softplus(z: f64) -> f64 {
    if z > SOFTPLUS_LINEAR_ABOVE {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// Inequality barrier: zero on the feasible side, `ln(1 + e^(βx))/α` beyond it.
/// The value jumps from 0 to `ln 2/α` at the boundary.
pub fn barrier_g(x: f64, alpha: f64, beta: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        softplus(beta * x) / alpha
    }
}

/// Equality barrier `x^β/α`; `β` must be even.
pub fn barrier_e(x: f64, alpha: f64, beta: u32) -> f64 {
    x.powi(beta as i32) / alpha
}

/// A 3×3 weight, either as its diagonal or in full.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight3 {
    Diagonal([f64; 3]),
    Full([[f64; 3]; 3]),
}

impl Weight3 {
    pub fn matrix(&self) -> Matrix3<f64> {
        match self {
            Weight3::Diagonal(d) => Matrix3::from_diagonal(&Vector3::from(*d)),
            Weight3::Full(m) => Matrix3::from_fn(|i, j| m[i][j]),
        }
    }

    fn validate(&self, path: &str) -> Result<()> {
        let m = self.matrix();
        if (m - m.transpose()).abs().max() > 1e-12 * m.abs().max() {
            return Err(Error::config(path, "must be symmetric"));
        }
        if m.iter().any(|v| !v.is_finite()) || m.cholesky().is_none() {
            return Err(Error::config(path, "must be positive definite"));
        }
        Ok(())
    }
}

/// Diagonal observation precision `Q` applied to each step's block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObsWeight {
    /// Weight on the loss block. `None` means `1/max(|P_out,t|, p_floor)²`.
    pub loss: Option<f64>,
    /// Weight on every inequality and equality penalty entry.
    pub penalty: f64,
}

impl Default for ObsWeight {
    fn default() -> Self {
        Self {
            loss: None,
            penalty: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpmConfig {
    pub horizon: usize,
    /// Seconds.
    pub dt: f64,
    pub soc_band: f64,
    /// Kelvin.
    pub temp_band: f64,
    pub theta_nominal: [f64; 3],
    pub prior_weight: Weight3,
    pub obs_weight: ObsWeight,
    pub barrier_g: InequalityBarrier,
    pub barrier_e: EqualityBarrier,
    /// Watts. Demand magnitudes below this are not used as divisors.
    pub p_floor: f64,
}

impl Default for OpmConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            dt: 1.0,
            soc_band: 0.005,
            temp_band: 1.0,
            theta_nominal: [1.0 / 3.0; 3],
            prior_weight: Weight3::Diagonal([25.0; 3]),
            obs_weight: ObsWeight::default(),
            barrier_g: InequalityBarrier::default(),
            barrier_e: EqualityBarrier::default(),
            p_floor: 1.0,
        }
    }
}

impl OpmConfig {
    pub fn validate(&self) -> Result<()> {
        for (path, v) in [
            ("opm.dt", self.dt),
            ("opm.soc_band", self.soc_band),
            ("opm.temp_band", self.temp_band),
            ("opm.p_floor", self.p_floor),
            ("opm.obs_weight.penalty", self.obs_weight.penalty),
            ("opm.barrier_g.alpha", self.barrier_g.alpha),
            ("opm.barrier_g.beta", self.barrier_g.beta),
            ("opm.barrier_e.alpha", self.barrier_e.alpha),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(path, format!("must be positive, got {v}")));
            }
        }
        if let Some(w) = self.obs_weight.loss {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::config("opm.obs_weight.loss", "must be positive"));
            }
        }
        if self.barrier_e.beta == 0 || !self.barrier_e.beta.is_multiple_of(2) {
            return Err(Error::config(
                "opm.barrier_e.beta",
                format!("must be a positive even integer, got {}", self.barrier_e.beta),
            ));
        }
        if self.theta_nominal.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("opm.theta_nominal", "must be finite"));
        }
        self.prior_weight.validate("opm.prior_weight")
    }
}

/// Number of inequality residuals per cell and step.
pub const INEQ_PER_CELL: usize = 10;
pub const LOSS_BLOCK: usize = 3;
pub const EQ_BLOCK: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InequalityClass {
    TempMin,
    TempMax,
    SocMin,
    SocMax,
    CurrentMin,
    CurrentMax,
    SocBandAbove,
    SocBandBelow,
    TempBandAbove,
    TempBandBelow,
}

impl InequalityClass {
    pub const ALL: [InequalityClass; INEQ_PER_CELL] = [
        InequalityClass::TempMin,
        InequalityClass::TempMax,
        InequalityClass::SocMin,
        InequalityClass::SocMax,
        InequalityClass::CurrentMin,
        InequalityClass::CurrentMax,
        InequalityClass::SocBandAbove,
        InequalityClass::SocBandBelow,
        InequalityClass::TempBandAbove,
        InequalityClass::TempBandBelow,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).unwrap()
    }
}

/// What a single entry of the stacked observation vector measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObsEntry {
    Loss { component: usize },
    Inequality { class: InequalityClass, cell: usize },
    SimplexSum,
    SupplyDemand,
}

/// Offsets into the stacked observation `Y = [y_k; …; y_{k+H}]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObsLayout {
    pub n_cells: usize,
    pub steps: usize,
}

impl ObsLayout {
    pub fn new(n_cells: usize, horizon: usize) -> Self {
        Self {
            n_cells,
            steps: horizon + 1,
        }
    }

    pub fn per_step(&self) -> usize {
        LOSS_BLOCK + INEQ_PER_CELL * self.n_cells + EQ_BLOCK
    }

    pub fn len(&self) -> usize {
        self.steps * self.per_step()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn offset(&self, step: usize, entry: ObsEntry) -> usize {
        let base = step * self.per_step();
        let ineq_end = LOSS_BLOCK + INEQ_PER_CELL * self.n_cells;
        base + match entry {
            ObsEntry::Loss { component } => component,
            ObsEntry::Inequality { class, cell } => LOSS_BLOCK + class.index() * self.n_cells + cell,
            ObsEntry::SimplexSum => ineq_end,
            ObsEntry::SupplyDemand => ineq_end + 1,
        }
    }

    /// Inverse of [`offset`](Self::offset).
    pub fn locate(&self, offset: usize) -> Option<(usize, ObsEntry)> {
        if offset >= self.len() {
            return None;
        }
        let step = offset / self.per_step();
        let local = offset % self.per_step();
        let ineq_end = LOSS_BLOCK + INEQ_PER_CELL * self.n_cells;
        let entry = if local < LOSS_BLOCK {
            ObsEntry::Loss { component: local }
        } else if local < ineq_end {
            let k = local - LOSS_BLOCK;
            ObsEntry::Inequality {
                class: InequalityClass::ALL[k / self.n_cells],
                cell: k % self.n_cells,
            }
        } else if local == ineq_end {
            ObsEntry::SimplexSum
        } else {
            ObsEntry::SupplyDemand
        };
        Some((step, entry))
    }
}

/// Predicted output power over `[k, k + H]`, one value per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandForecast {
    pub p_out: Vec<f64>,
}

impl DemandForecast {
    pub fn constant(p: f64, horizon: usize) -> Self {
        Self {
            p_out: vec![p; horizon + 1],
        }
    }
}

/// One step's virtual observation.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualObservation {
    pub loss_block: [f64; 3],
    pub ineq_block: Vec<f64>,
    pub eq_block: [f64; 2],
}

impl VirtualObservation {
    pub fn write_into(&self, out: &mut [f64]) {
        let n = self.ineq_block.len();
        out[..LOSS_BLOCK].copy_from_slice(&self.loss_block);
        out[LOSS_BLOCK..LOSS_BLOCK + n].copy_from_slice(&self.ineq_block);
        out[LOSS_BLOCK + n..LOSS_BLOCK + n + EQ_BLOCK].copy_from_slice(&self.eq_block);
    }
}

/// Result of a deterministic horizon rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// States `x_k, …, x_{k+H}`.
    pub states: Vec<PackState>,
    /// Stacked noise-free observations.
    pub observations: Vec<f64>,
    /// Some SoC step had to be clamped to [0, 1].
    pub clamped: bool,
}

/// `B_jj = (R_j(q_j) + R_C)·P²/u_j(q_j)²`.
pub fn loss_diag(state: &PackState, cells: &[CellParameters], p_out: f64) -> Result<Vec<f64>> {
    cells
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let q = state.soc[j];
            let u = c.ocv(q)?;
            if u <= 0.0 {
                return Err(Error::Model(format!("cell {j}: open-circuit voltage {u} V")));
            }
            Ok((c.resistance(q)? + c.converter_res) * p_out * p_out / (u * u))
        })
        .collect()
}

/// `L = θᵀΦᵀBΦθ = Σ_j B_jj μ_j²`.
pub fn total_loss(theta: &[f64; 3], phi: &FeatureMatrix, b: &[f64]) -> f64 {
    phi.rows
        .iter()
        .zip(b)
        .map(|(row, bj)| {
            let mu = dot3(row, theta);
            bj * mu * mu
        })
        .sum()
}

/// The policy-parameterized problem: pack parameters plus configuration.
#[derive(Debug, Clone)]
pub struct OpmProblem {
    pub cells: Vec<CellParameters>,
    pub opm: OpmConfig,
    pub policy: PolicyConfig,
}

impl OpmProblem {
    pub fn new(cells: Vec<CellParameters>, opm: OpmConfig, policy: PolicyConfig) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::config("cells", "pack has no cells"));
        }
        for (j, c) in cells.iter().enumerate() {
            c.validate().map_err(|e| match e {
                Error::Config { path, reason } => Error::config(format!("cells[{j}].{path}"), reason),
                other => other,
            })?;
        }
        opm.validate()?;
        policy.validate()?;
        Ok(Self { cells, opm, policy })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn layout(&self) -> ObsLayout {
        ObsLayout::new(self.n_cells(), self.opm.horizon)
    }

    fn divisor(&self, p_out: f64) -> f64 {
        p_out.abs().max(self.opm.p_floor)
    }

    /// Stacked inequality residuals for shares `mu`; see the module docs for
    /// the ordering.
    pub fn inequality_residuals_for_shares(
        &self,
        state: &PackState,
        mu: &[f64],
        p_out: f64,
    ) -> Result<Vec<f64>> {
        let n = self.n_cells();
        let mut g = vec![0.0; INEQ_PER_CELL * n];
        let q_avg = mean(&state.soc);
        let t_avg = mean(&state.temp);
        let p_abs = self.divisor(p_out);
        let block = |class: InequalityClass| class.index() * n;
        for (j, c) in self.cells.iter().enumerate() {
            let (q, t) = (state.soc[j], state.temp[j]);
            let u = c.ocv(q)?;
            g[block(InequalityClass::TempMin) + j] = c.temp_limits[0] - t;
            g[block(InequalityClass::TempMax) + j] = t - c.temp_limits[1];
            g[block(InequalityClass::SocMin) + j] = c.soc_limits[0] - q;
            g[block(InequalityClass::SocMax) + j] = q - c.soc_limits[1];
            g[block(InequalityClass::CurrentMin) + j] = u * c.current_limits[0] / p_abs - mu[j];
            g[block(InequalityClass::CurrentMax) + j] = mu[j] - u * c.current_limits[1] / p_abs;
            g[block(InequalityClass::SocBandAbove) + j] = (q - q_avg) - self.opm.soc_band;
            g[block(InequalityClass::SocBandBelow) + j] = (q_avg - q) - self.opm.soc_band;
            g[block(InequalityClass::TempBandAbove) + j] = (t - t_avg) - self.opm.temp_band;
            g[block(InequalityClass::TempBandBelow) + j] = (t_avg - t) - self.opm.temp_band;
        }
        Ok(g)
    }

    pub fn inequality_residuals(
        &self,
        state: &PackState,
        theta: &[f64; 3],
        phi: &FeatureMatrix,
        p_out: f64,
    ) -> Result<Vec<f64>> {
        self.inequality_residuals_for_shares(state, &phi.apply(theta), p_out)
    }

    /// `[1ᵀθ − 1, 1ᵀΦθ − 1 − L/|P|]`; the second entry is zero when `|P|` is
    /// below the power floor.
    pub fn equality_residuals(
        &self,
        theta: &[f64; 3],
        phi: &FeatureMatrix,
        b: &[f64],
        p_out: f64,
    ) -> [f64; 2] {
        let simplex = theta.iter().sum::<f64>() - 1.0;
        let supply = if p_out.abs() < self.opm.p_floor {
            0.0
        } else {
            let mu_sum: f64 = phi.apply(theta).iter().sum();
            mu_sum - 1.0 - total_loss(theta, phi, b) / p_out.abs()
        };
        [simplex, supply]
    }

    /// Virtual observation `h(x, θ)` at one step.
    pub fn observe(&self, state: &PackState, theta: &[f64; 3], p_out: f64) -> Result<VirtualObservation> {
        let phi = features(state, &self.cells, p_out, &self.policy)?;
        self.observe_with(state, theta, &phi, p_out)
    }

    fn observe_with(
        &self,
        state: &PackState,
        theta: &[f64; 3],
        phi: &FeatureMatrix,
        p_out: f64,
    ) -> Result<VirtualObservation> {
        let b = loss_diag(state, &self.cells, p_out)?;
        let mut h = Matrix3::zeros();
        for (row, bj) in phi.rows.iter().zip(&b) {
            let r = Vector3::from(*row);
            h += r * r.transpose() * *bj;
        }
        let loss = matrix_sqrt_psd(&h) * Vector3::from(*theta);
        let ineq_block = self
            .inequality_residuals(state, theta, phi, p_out)?
            .into_iter()
            .map(|g| self.opm.barrier_g.eval(g))
            .collect();
        let e = self.equality_residuals(theta, phi, &b, p_out);
        let be = self.opm.barrier_e;
        Ok(VirtualObservation {
            loss_block: [loss[0], loss[1], loss[2]],
            ineq_block,
            eq_block: e.map(|x| barrier_e(x, be.alpha, be.beta)),
        })
    }

    /// Advances every cell one step under shares `mu` of `p_out`.
    pub fn step_state(&self, state: &PackState, mu: &[f64], p_out: f64) -> Result<(PackState, bool)> {
        let n = self.n_cells();
        let mut next = PackState {
            soc: Vec::with_capacity(n),
            temp: Vec::with_capacity(n),
        };
        let mut clamped = false;
        for (j, c) in self.cells.iter().enumerate() {
            let step = c.step_power(state.cell(j), mu[j] * p_out, self.opm.dt)?;
            next.soc.push(step.state.soc);
            next.temp.push(step.state.temp);
            clamped |= step.clamped;
        }
        Ok((next, clamped))
    }

    pub(crate) fn check_forecast(&self, forecast: &DemandForecast) -> Result<()> {
        let want = self.opm.horizon + 1;
        if forecast.p_out.len() != want {
            return Err(Error::config(
                "forecast",
                format!("expected {want} values (H + 1), got {}", forecast.p_out.len()),
            ));
        }
        if forecast.p_out.iter().any(|p| !p.is_finite()) {
            return Err(Error::config("forecast", "demand forecast must be finite"));
        }
        Ok(())
    }

    /// Deterministic rollout from `x0` with `μ_t = Φ(x_t)θ` recomputed each step.
    pub fn rollout(&self, x0: &PackState, theta: &[f64; 3], forecast: &DemandForecast) -> Result<Rollout> {
        let mut observations = vec![0.0; self.layout().len()];
        let (states, clamped) = self.rollout_impl(x0, theta, forecast, &mut observations, true)?;
        Ok(Rollout {
            states,
            observations,
            clamped,
        })
    }

    /// Rollout that only writes the stacked observation into `out`.
    pub fn rollout_into(
        &self,
        x0: &PackState,
        theta: &[f64; 3],
        forecast: &DemandForecast,
        out: &mut [f64],
    ) -> Result<bool> {
        Ok(self.rollout_impl(x0, theta, forecast, out, false)?.1)
    }

    fn rollout_impl(
        &self,
        x0: &PackState,
        theta: &[f64; 3],
        forecast: &DemandForecast,
        out: &mut [f64],
        keep_states: bool,
    ) -> Result<(Vec<PackState>, bool)> {
        self.check_forecast(forecast)?;
        let layout = self.layout();
        debug_assert_eq!(out.len(), layout.len());
        let per_step = layout.per_step();
        let mut states = Vec::new();
        let mut clamped = false;
        let mut x = x0.clone();
        for (t, &p) in forecast.p_out.iter().enumerate() {
            let phi = features(&x, &self.cells, p, &self.policy)?;
            self.observe_with(&x, theta, &phi, p)?
                .write_into(&mut out[t * per_step..(t + 1) * per_step]);
            let last = t == self.opm.horizon;
            let next = if last {
                None
            } else {
                let (next, c) = self.step_state(&x, &phi.apply(theta), p)?;
                clamped |= c;
                Some(next)
            };
            if keep_states {
                states.push(x.clone());
            }
            match next {
                Some(nx) => x = nx,
                None => break,
            }
        }
        Ok((states, clamped))
    }

    /// Diagonal of the per-step observation precision `Q`, stacked over the
    /// horizon.
    pub fn obs_precision(&self, forecast: &DemandForecast) -> Vec<f64> {
        let layout = self.layout();
        let per_step = layout.per_step();
        let mut w = vec![self.opm.obs_weight.penalty; layout.len()];
        for (t, &p) in forecast.p_out.iter().enumerate() {
            let loss_w = self
                .opm
                .obs_weight
                .loss
                .unwrap_or_else(|| 1.0 / self.divisor(p).powi(2));
            w[t * per_step..t * per_step + LOSS_BLOCK].fill(loss_w);
        }
        w
    }

    pub fn prior_matrix(&self) -> Matrix3<f64> {
        self.opm.prior_weight.matrix()
    }

    /// `(θ − θ̄)ᵀR(θ − θ̄)` about the given nominal.
    pub fn prior_cost(&self, theta: &[f64; 3], nominal: &[f64; 3]) -> f64 {
        let d = Vector3::from(*theta) - Vector3::from(*nominal);
        (d.transpose() * self.prior_matrix() * d)[0]
    }

    /// `Σ_t h_tᵀ Q h_t + (θ − θ̄)ᵀR(θ − θ̄)` with noise-free observations.
    pub fn mhe_cost(&self, theta: &[f64; 3], x0: &PackState, forecast: &DemandForecast) -> Result<f64> {
        self.mhe_cost_about(theta, x0, forecast, &self.opm.theta_nominal)
    }

    /// [`mhe_cost`](Self::mhe_cost) with an explicit prior mean.
    pub fn mhe_cost_about(
        &self,
        theta: &[f64; 3],
        x0: &PackState,
        forecast: &DemandForecast,
        nominal: &[f64; 3],
    ) -> Result<f64> {
        let mut y = vec![0.0; self.layout().len()];
        self.rollout_into(x0, theta, forecast, &mut y)?;
        let w = self.obs_precision(forecast);
        let misfit: f64 = y.iter().zip(&w).map(|(yi, wi)| wi * yi * yi).sum();
        Ok(misfit + self.prior_cost(theta, nominal))
    }

    /// Log posterior density `log p(θ | Y = 0)` (up to the evidence) for
    /// `y_t ~ N(h(x_t, θ), Q⁻¹)` and `θ ~ N(θ̄, R⁻¹)`, assembled from dense
    /// Gaussian densities.
    pub fn log_posterior(&self, theta: &[f64; 3], x0: &PackState, forecast: &DemandForecast) -> Result<f64> {
        let rollout = self.rollout(x0, theta, forecast)?;
        let layout = self.layout();
        let per_step = layout.per_step();
        let precision = self.obs_precision(forecast);
        let mut log_lik = 0.0;
        for t in 0..layout.steps {
            let block = t * per_step..(t + 1) * per_step;
            let q = DMatrix::from_diagonal(&DVector::from_column_slice(&precision[block.clone()]));
            let mean = DVector::from_column_slice(&rollout.observations[block]);
            log_lik += gaussian_log_density(&DVector::zeros(per_step), &mean, &q)?;
        }
        let r = DMatrix::from_fn(3, 3, |i, j| self.prior_matrix()[(i, j)]);
        let log_prior = gaussian_log_density(
            &DVector::from_column_slice(theta),
            &DVector::from_column_slice(&self.opm.theta_nominal),
            &r,
        )?;
        Ok(log_lik + log_prior)
    }
}

/// `log N(x; mean, precision⁻¹)`.
fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, precision: &DMatrix<f64>) -> Result<f64> {
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Solver("precision matrix is not positive definite".into()))?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let r = x - mean;
    let quad = (r.transpose() * precision * &r)[0];
    let k = x.len() as f64;
    Ok(-0.5 * (k * (2.0 * std::f64::consts::PI).ln() - log_det + quad))
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// from round-off are clamped to zero.
pub fn matrix_sqrt_psd(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(*m);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    eig.eigenvectors * Matrix3::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const BARY: [f64; 3] = [1.0 / 3.0; 3];

    fn lossless_cell() -> CellParameters {
        CellParameters {
            converter_res: 0.0,
            ..CellParameters::inr18650_25r()
        }
    }

    fn problem(n: usize, horizon: usize) -> OpmProblem {
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
    fn barrier_values() {
        assert_eq!(barrier_g(-1.0, 1.0, 50.0), 0.0);
        assert_eq!(barrier_g(0.0, 1.0, 50.0), 0.0);
        assert_relative_eq!(barrier_g(1e-12, 1.0, 50.0), std::f64::consts::LN_2, epsilon = 1e-9);
        assert_relative_eq!(barrier_g(1.0, 1.0, 50.0), 50.0, epsilon = 1e-12);
        // Large arguments follow the asymptote instead of overflowing.
        assert_relative_eq!(barrier_g(1e6, 2.0, 50.0), 2.5e7, max_relative = 1e-12);
        assert_eq!(barrier_e(0.0, 1.0, 2), 0.0);
        assert_relative_eq!(barrier_e(0.1, 1.0, 2), 0.01, epsilon = 1e-15);
        assert_relative_eq!(barrier_e(-0.1, 1.0, 2), 0.01, epsilon = 1e-15);
        let smooth = InequalityBarrier {
            smooth: true,
            ..InequalityBarrier::default()
        };
        assert!(smooth.eval(-0.01) > 0.0);
    }

    #[test]
    fn odd_equality_exponent_rejected() {
        let cfg = OpmConfig {
            barrier_e: EqualityBarrier { alpha: 1.0, beta: 3 },
            ..OpmConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn loss_diagonal() {
        let s = PackState::uniform(1, 0.5, 298.0);
        assert_eq!(loss_diag(&s, &[lossless_cell()], 0.0).unwrap(), vec![0.0]);
        let b = loss_diag(&s, &[lossless_cell()], 2000.0).unwrap();
        assert_relative_eq!(b[0], 8903.0, max_relative = 1e-4);
        let b3 = loss_diag(&s, &[lossless_cell()], 6000.0).unwrap();
        assert_relative_eq!(b3[0], 9.0 * b[0], max_relative = 1e-12);
    }

    #[test]
    fn total_loss_closed_forms() {
        let policy = PolicyConfig::default();
        // One cell carries everything: L = R·i² with i ≈ 532.5 A.
        let s = PackState::uniform(1, 0.5, 298.0);
        let cells = [lossless_cell()];
        let phi = features(&s, &cells, 2000.0, &policy).unwrap();
        let b = loss_diag(&s, &cells, 2000.0).unwrap();
        let l = total_loss(&[1.0 / 3.0; 3], &phi, &b);
        let i = 2000.0 / cells[0].ocv(0.5).unwrap();
        assert_relative_eq!(i, 532.5, max_relative = 1e-3);
        assert_relative_eq!(l, 0.0313922 * i * i, max_relative = 1e-5);
        // Two identical cells split evenly.
        let s = PackState::uniform(2, 0.5, 298.0);
        let cells = [lossless_cell(), lossless_cell()];
        let phi = features(&s, &cells, 2000.0, &policy).unwrap();
        let b = loss_diag(&s, &cells, 2000.0).unwrap();
        assert_relative_eq!(total_loss(&[0.2, 0.3, 0.5], &phi, &b), 4451.5, max_relative = 1e-4);
        let b0 = loss_diag(&s, &cells, 0.0).unwrap();
        assert_eq!(total_loss(&[0.2, 0.3, 0.5], &phi, &b0), 0.0);
    }

    #[test]
    fn interior_point_is_feasible() {
        let p = problem(4, 1);
        let s = PackState::new(vec![0.5, 0.501, 0.499, 0.5], vec![298.0, 298.2, 298.1, 298.0]).unwrap();
        let phi = features(&s, &p.cells, 40.0, &p.policy).unwrap();
        let g = p.inequality_residuals(&s, &BARY, &phi, 40.0).unwrap();
        assert_eq!(g.len(), 40);
        assert!(g.iter().all(|v| *v < 0.0), "{g:?}");
        let obs = p.observe(&s, &BARY, 40.0).unwrap();
        assert!(obs.ineq_block.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn active_soc_limit_gives_zero_residual() {
        let p = problem(2, 1);
        let s = PackState::new(vec![0.95, 0.95], vec![298.0, 298.0]).unwrap();
        let phi = features(&s, &p.cells, 20.0, &p.policy).unwrap();
        let g = p.inequality_residuals(&s, &BARY, &phi, 20.0).unwrap();
        let layout = p.layout();
        let at = |class, cell| g[layout.offset(0, ObsEntry::Inequality { class, cell }) - LOSS_BLOCK];
        assert_relative_eq!(at(InequalityClass::SocMax, 0), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn soc_band_residuals() {
        let p = problem(2, 1);
        let s = PackState::new(vec![0.8, 0.4], vec![298.0, 298.0]).unwrap();
        let phi = features(&s, &p.cells, 20.0, &p.policy).unwrap();
        let g = p.inequality_residuals(&s, &BARY, &phi, 20.0).unwrap();
        let above = InequalityClass::SocBandAbove.index() * 2;
        let below = InequalityClass::SocBandBelow.index() * 2;
        assert_relative_eq!(g[above], 0.195, epsilon = 1e-12);
        assert_relative_eq!(g[below + 1], 0.195, epsilon = 1e-12);
        assert!(g[above + 1] < 0.0 && g[below] < 0.0);
    }

    #[test]
    fn equality_residuals() {
        let p = problem(3, 1);
        let s = PackState::uniform(3, 0.6, 300.0);
        let phi = features(&s, &p.cells, 30.0, &p.policy).unwrap();
        let b = loss_diag(&s, &p.cells, 30.0).unwrap();
        let e = p.equality_residuals(&BARY, &phi, &b, 30.0);
        assert_relative_eq!(e[0], 0.0, epsilon = 1e-15);
        let l = total_loss(&BARY, &phi, &b);
        assert_relative_eq!(e[1], -l / 30.0, epsilon = 1e-14);
        let e = p.equality_residuals(&[0.5; 3], &phi, &b, 30.0);
        assert_relative_eq!(e[0], 0.5, epsilon = 1e-15);
        // Below the floor the supply-demand entry is skipped.
        let e = p.equality_residuals(&BARY, &phi, &b, 0.5);
        assert_eq!(e[1], 0.0);
    }

    #[test]
    fn zero_power_has_no_loss_block() {
        let p = problem(3, 2);
        let s = PackState::uniform(3, 0.6, 300.0);
        let obs = p.observe(&s, &BARY, 0.0).unwrap();
        assert_eq!(obs.loss_block, [0.0; 3]);
    }

    #[test]
    fn rollout_shapes_and_symmetry() {
        let p = problem(3, 4);
        let s = PackState::uniform(3, 0.7, 298.0);
        let r = p
            .rollout(&s, &[0.2, 0.5, 0.3], &DemandForecast::constant(60.0, 4))
            .unwrap();
        assert_eq!(r.states.len(), 5);
        assert_eq!(r.observations.len(), p.layout().len());
        for x in &r.states {
            assert!(x.soc.windows(2).all(|w| w[0] == w[1]));
            assert!(x.temp.windows(2).all(|w| w[0] == w[1]));
        }
        assert!(r.states[4].soc[0] < 0.7);
    }

    #[test]
    fn degenerate_horizon() {
        let p = problem(2, 0);
        let s = PackState::uniform(2, 0.7, 298.0);
        let r = p.rollout(&s, &BARY, &DemandForecast::constant(30.0, 0)).unwrap();
        assert_eq!(r.states, vec![s.clone()]);
        let mut single = vec![0.0; p.layout().per_step()];
        p.observe(&s, &BARY, 30.0).unwrap().write_into(&mut single);
        assert_eq!(r.observations, single);
    }

    #[test]
    fn zero_power_rollout_only_cools() {
        let p = problem(2, 3);
        let s = PackState::new(vec![0.6, 0.7], vec![299.0, 300.0]).unwrap();
        let r = p.rollout(&s, &BARY, &DemandForecast::constant(0.0, 3)).unwrap();
        let c = &p.cells[0];
        let decay = 1.0 - 1.0 / (c.heat_capacity * c.conv_resistance);
        for (t, x) in r.states.iter().enumerate() {
            assert_eq!(x.soc, s.soc);
            for j in 0..2 {
                let expect = c.env_temp + (s.temp[j] - c.env_temp) * decay.powi(t as i32);
                assert_relative_eq!(x.temp[j], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn forecast_length_checked() {
        let p = problem(2, 3);
        let s = PackState::uniform(2, 0.7, 298.0);
        assert!(p.rollout(&s, &BARY, &DemandForecast::constant(10.0, 2)).is_err());
    }

    #[test]
    fn mhe_cost_zero_at_nominal_without_power() {
        let p = problem(3, 2);
        let s = PackState::uniform(3, 0.6, 298.0);
        let c = p.mhe_cost(&BARY, &s, &DemandForecast::constant(0.0, 2)).unwrap();
        assert!(c.abs() < 1e-20, "{c}");
    }

    #[test]
    fn doubling_obs_weight_doubles_misfit() {
        let p = problem(3, 2);
        let s = PackState::new(vec![0.6, 0.7, 0.65], vec![298.0, 299.5, 298.3]).unwrap();
        let f = DemandForecast::constant(45.0, 2);
        let theta = [0.5, 0.2, 0.3];
        let prior = p.prior_cost(&theta, &p.opm.theta_nominal);
        let base = p.mhe_cost(&theta, &s, &f).unwrap() - prior;
        let mut doubled = p.clone();
        doubled.opm.obs_weight = ObsWeight {
            loss: Some(2.0 / 45.0f64.powi(2)),
            penalty: 2.0,
        };
        let twice = doubled.mhe_cost(&theta, &s, &f).unwrap() - prior;
        assert!(base > 0.0);
        assert_relative_eq!(twice, 2.0 * base, max_relative = 1e-12);
    }

    #[test]
    fn layout_is_bijective() {
        let layout = ObsLayout::new(7, 3);
        assert_eq!(layout.len(), 4 * (3 + 70 + 2));
        let mut seen = vec![false; layout.len()];
        for (off, slot) in seen.iter_mut().enumerate() {
            let (step, entry) = layout.locate(off).unwrap();
            assert_eq!(layout.offset(step, entry), off);
            assert!(!*slot);
            *slot = true;
        }
        assert!(layout.locate(layout.len()).is_none());
    }

    #[test]
    fn sign_flip_across_boundary() {
        let p = problem(2, 1);
        let layout = p.layout();
        let idx = layout.offset(0, ObsEntry::Inequality { class: InequalityClass::TempMax, cell: 1 }) - LOSS_BLOCK;
        let tmax = p.cells[1].temp_limits[1];
        for (t, sign) in [(tmax - 0.01, -1.0), (tmax + 0.01, 1.0)] {
            let s = PackState::new(vec![0.5, 0.5], vec![tmax, t]).unwrap();
            let phi = features(&s, &p.cells, 10.0, &p.policy).unwrap();
            let g = p.inequality_residuals(&s, &BARY, &phi, 10.0).unwrap();
            assert_eq!(g[idx].signum(), sign);
            let obs = p.observe(&s, &BARY, 10.0).unwrap();
            assert_eq!(obs.ineq_block[idx] == 0.0, sign < 0.0);
        }
    }

    fn arb_state(n: usize) -> impl Strategy<Value = PackState> {
        (
            prop::collection::vec(0.3..0.9f64, n),
            prop::collection::vec(290.0..320.0f64, n),
        )
            .prop_map(|(soc, temp)| PackState { soc, temp })
    }

    fn arb_theta() -> impl Strategy<Value = [f64; 3]> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b, c)| [a, b, c])
    }

    proptest! {
        #[test]
        fn loss_block_squares_to_total_loss(
            state in arb_state(5),
            theta in arb_theta(),
            p in -3000.0..3000.0f64,
        ) {
            let pr = problem(5, 1);
            let phi = features(&state, &pr.cells, p, &pr.policy).unwrap();
            let b = loss_diag(&state, &pr.cells, p).unwrap();
            let l = total_loss(&theta, &phi, &b);
            let obs = pr.observe(&state, &theta, p).unwrap();
            let sq: f64 = obs.loss_block.iter().map(|v| v * v).sum();
            prop_assert!((sq - l).abs() <= 1e-9 * l.max(1e-300));
            prop_assert!(obs.ineq_block.iter().all(|v| *v >= 0.0));
            prop_assert!(obs.eq_block.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn mhe_cost_differences_track_log_posterior(
            state in arb_state(3),
            a in arb_theta(),
            b in arb_theta(),
            p in 5.0..80.0f64,
        ) {
            let pr = problem(3, 2);
            let f = DemandForecast::constant(p, 2);
            let d_cost = pr.mhe_cost(&a, &state, &f).unwrap() - pr.mhe_cost(&b, &state, &f).unwrap();
            let d_logp = pr.log_posterior(&a, &state, &f).unwrap() - pr.log_posterior(&b, &state, &f).unwrap();
            let scale = pr.mhe_cost(&a, &state, &f).unwrap().abs().max(pr.mhe_cost(&b, &state, &f).unwrap().abs());
            prop_assert!((d_cost + 2.0 * d_logp).abs() <= 1e-8 * scale.max(1e-300));
        }
    }
}

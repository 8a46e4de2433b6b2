//! Direct cell-level solution of the OPM problem, without the policy
//! parameterization, plus an exhaustive grid search over `θ`.
//!
//! The decision variables are the shares `μ_{j,t}` for every cell `j` and
//! step `t = 0..=H`, i.e. `n(H+1)` unknowns. States are eliminated by single
//! shooting through the same forward-Euler model used everywhere else (raw
//! polynomials, no SoC clamping). Constraints go into an augmented
//! Lagrangian whose inner problems are solved by dense BFGS with gradients
//! from a backward adjoint sweep.
//!
//! Residuals are scaled before entering the Lagrangian: temperatures by the
//! temperature band, SoC by the SoC band, share bounds by `n`. State
//! constraints at the first step do not depend on the decision variables
//! and are left out.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::PackState;
use crate::error::{Error, Result};
use crate::policy::Theta;
use crate::problem::{DemandForecast, InequalityClass, OpmProblem, INEQ_PER_CELL};

/// Largest `n·H` accepted by [`solve_cell_level`].
pub const MAX_CELL_STEPS: usize = 10_000;

const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Inner stop: infinity norm of the Lagrangian gradient.
    pub grad_tol: f64,
    /// Outer stop: largest scaled constraint violation.
    pub feas_tol: f64,
    pub rho_init: f64,
    pub rho_growth: f64,
    pub rho_max: f64,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self {
            max_outer: 30,
            max_inner: 500,
            grad_tol: 1e-7,
            feas_tol: 1e-6,
            rho_init: 10.0,
            rho_growth: 10.0,
            rho_max: 1e8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    IterationCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellLevelSolution {
    /// `mu[t][j]`.
    pub mu: Vec<Vec<f64>>,
    /// Weighted loss `Σ_t w_t L_t` at the returned shares.
    pub cost: f64,
    pub max_violation: f64,
    pub runtime_s: f64,
    pub status: SolveStatus,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub n_vars: usize,
}

/// Augmented-Lagrangian multipliers and penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub ineq: Vec<f64>,
    pub eq: Vec<f64>,
    pub rho: f64,
}

/// Per-step, per-cell quantities cached by the forward sweep.
#[derive(Debug, Clone, Copy, Default)]
struct Node {
    q: f64,
    temp: f64,
    u: f64,
    du: f64,
    r: f64,
    dr: f64,
}

/// The shooting transcription for one starting state and forecast.
#[derive(Debug, Clone)]
pub struct CellLevelNlp<'a> {
    problem: &'a OpmProblem,
    x0: &'a PackState,
    forecast: &'a DemandForecast,
    loss_weight: Vec<f64>,
}

impl<'a> CellLevelNlp<'a> {
    pub fn new(problem: &'a OpmProblem, x0: &'a PackState, forecast: &'a DemandForecast) -> Result<Self> {
        problem.check_forecast(forecast)?;
        x0.validate()?;
        let n = problem.n_cells();
        if x0.len() != n {
            return Err(Error::config("state", format!("state has {} cells, pack has {n}", x0.len())));
        }
        if n * problem.opm.horizon > MAX_CELL_STEPS {
            return Err(Error::config(
                "opm.horizon",
                format!("n·H = {} exceeds the dense-solve limit {MAX_CELL_STEPS}", n * problem.opm.horizon),
            ));
        }
        let per_step = problem.layout().per_step();
        let precision = problem.obs_precision(forecast);
        let loss_weight = (0..=problem.opm.horizon).map(|t| precision[t * per_step]).collect();
        Ok(Self {
            problem,
            x0,
            forecast,
            loss_weight,
        })
    }

    fn n(&self) -> usize {
        self.problem.n_cells()
    }

    fn steps(&self) -> usize {
        self.problem.opm.horizon + 1
    }

    pub fn n_vars(&self) -> usize {
        self.n() * self.steps()
    }

    pub fn n_ineq(&self) -> usize {
        self.steps() * INEQ_PER_CELL * self.n()
    }

    pub fn n_eq(&self) -> usize {
        self.steps()
    }

    fn eq_active(&self, t: usize) -> bool {
        self.forecast.p_out[t].abs() >= self.problem.opm.p_floor
    }

    fn ineq_active(t: usize, class: InequalityClass) -> bool {
        t > 0 || matches!(class, InequalityClass::CurrentMin | InequalityClass::CurrentMax)
    }

    fn ineq_index(&self, t: usize, class: InequalityClass, j: usize) -> usize {
        (t * INEQ_PER_CELL + class.index()) * self.n() + j
    }

    fn forward(&self, z: &[f64]) -> Vec<Vec<Node>> {
        let (n, opm) = (self.n(), &self.problem.opm);
        let mut nodes = vec![vec![Node::default(); n]; self.steps()];
        let mut q: Vec<f64> = self.x0.soc.clone();
        let mut temp: Vec<f64> = self.x0.temp.clone();
        for t in 0..self.steps() {
            let p = self.forecast.p_out[t];
            for (j, c) in self.problem.cells.iter().enumerate() {
                let node = Node {
                    q: q[j],
                    temp: temp[j],
                    u: c.ocv_unchecked(q[j]),
                    du: c.ocv_slope(q[j]),
                    r: c.resistance_unchecked(q[j]),
                    dr: c.resistance_slope(q[j]),
                };
                nodes[t][j] = node;
                let mu = z[t * n + j];
                let a = p * opm.dt / (SECONDS_PER_HOUR * c.capacity_ah);
                q[j] = node.q - a * mu / node.u;
                let heat = node.r * (mu * p / node.u).powi(2);
                temp[j] = node.temp + opm.dt / c.heat_capacity * (heat - (node.temp - c.env_temp) / c.conv_resistance);
            }
        }
        nodes
    }

    fn step_loss(&self, t: usize, z: &[f64], nodes: &[Node]) -> f64 {
        let (n, p) = (self.n(), self.forecast.p_out[t]);
        nodes
            .iter()
            .zip(&self.problem.cells)
            .enumerate()
            .map(|(j, (x, c))| (x.r + c.converter_res) * (z[t * n + j] * p / x.u).powi(2))
            .sum()
    }

    /// Weighted loss `Σ_t w_t L_t`.
    pub fn objective(&self, z: &[f64]) -> f64 {
        let nodes = self.forward(z);
        (0..self.steps())
            .map(|t| self.loss_weight[t] * self.step_loss(t, z, &nodes[t]))
            .sum()
    }

    /// Scaled inequality (inactive entries are `−∞`) and equality residuals.
    pub fn constraints(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nodes = self.forward(z);
        let (n, opm) = (self.n(), &self.problem.opm);
        let (sq, st) = (opm.soc_band, opm.temp_band);
        let mut g = vec![f64::NEG_INFINITY; self.n_ineq()];
        let mut e = vec![0.0; self.n_eq()];
        for t in 0..self.steps() {
            let p = self.forecast.p_out[t];
            let p_abs = p.abs().max(opm.p_floor);
            let x = &nodes[t];
            let q_avg = x.iter().map(|v| v.q).sum::<f64>() / n as f64;
            let t_avg = x.iter().map(|v| v.temp).sum::<f64>() / n as f64;
            for (j, c) in self.problem.cells.iter().enumerate() {
                let mu = z[t * n + j];
                let xj = x[j];
                for class in InequalityClass::ALL {
                    if !Self::ineq_active(t, class) {
                        continue;
                    }
                    let v = match class {
                        InequalityClass::TempMin => (c.temp_limits[0] - xj.temp) / st,
                        InequalityClass::TempMax => (xj.temp - c.temp_limits[1]) / st,
                        InequalityClass::SocMin => (c.soc_limits[0] - xj.q) / sq,
                        InequalityClass::SocMax => (xj.q - c.soc_limits[1]) / sq,
                        InequalityClass::CurrentMin => n as f64 * (xj.u * c.current_limits[0] / p_abs - mu),
                        InequalityClass::CurrentMax => n as f64 * (mu - xj.u * c.current_limits[1] / p_abs),
                        InequalityClass::SocBandAbove => ((xj.q - q_avg) - sq) / sq,
                        InequalityClass::SocBandBelow => ((q_avg - xj.q) - sq) / sq,
                        InequalityClass::TempBandAbove => ((xj.temp - t_avg) - st) / st,
                        InequalityClass::TempBandBelow => ((t_avg - xj.temp) - st) / st,
                    };
                    g[self.ineq_index(t, class, j)] = v;
                }
            }
            if self.eq_active(t) {
                let mu_sum: f64 = z[t * n..(t + 1) * n].iter().sum();
                e[t] = mu_sum - 1.0 - self.step_loss(t, z, x) / p.abs();
            }
        }
        (g, e)
    }

    /// Largest scaled violation over active constraints.
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        let (g, e) = self.constraints(z);
        g.iter()
            .map(|v| v.max(0.0))
            .chain(e.iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
    }

    pub fn initial_multipliers(&self, rho: f64) -> Multipliers {
        Multipliers {
            ineq: vec![0.0; self.n_ineq()],
            eq: vec![0.0; self.n_eq()],
            rho,
        }
    }

    /// Augmented Lagrangian value; writes its gradient into `grad`.
    pub fn lagrangian(&self, z: &[f64], m: &Multipliers, grad: &mut [f64]) -> f64 {
        let nodes = self.forward(z);
        let (n, opm) = (self.n(), &self.problem.opm);
        let (sq, st, rho) = (opm.soc_band, opm.temp_band, m.rho);
        let nf = n as f64;
        let mut value = 0.0;
        // Adjoints of q and T at step t + 1.
        let mut adj_q = vec![0.0; n];
        let mut adj_t = vec![0.0; n];
        let mut gq = vec![0.0; n];
        let mut gt = vec![0.0; n];
        for t in (0..self.steps()).rev() {
            let p = self.forecast.p_out[t];
            let p_abs = p.abs().max(opm.p_floor);
            let x = &nodes[t];
            gq.fill(0.0);
            gt.fill(0.0);
            let gmu = &mut grad[t * n..(t + 1) * n];
            gmu.fill(0.0);

            // Loss and its partials, shared with the supply-demand residual.
            let w = self.loss_weight[t];
            let mut loss = 0.0;
            let mut dl_dmu = vec![0.0; n];
            let mut dl_dq = vec![0.0; n];
            for (j, c) in self.problem.cells.iter().enumerate() {
                let (mu, xj) = (z[t * n + j], x[j]);
                let rt = xj.r + c.converter_res;
                let s = (p / xj.u).powi(2);
                loss += rt * mu * mu * s;
                dl_dmu[j] = 2.0 * rt * mu * s;
                dl_dq[j] = mu * mu * p * p * (xj.dr / (xj.u * xj.u) - 2.0 * rt * xj.du / xj.u.powi(3));
            }
            value += w * loss;
            for j in 0..n {
                gmu[j] += w * dl_dmu[j];
                gq[j] += w * dl_dq[j];
            }
            if self.eq_active(t) {
                let mu_sum: f64 = z[t * n..(t + 1) * n].iter().sum();
                let e = mu_sum - 1.0 - loss / p.abs();
                let nu = m.eq[t];
                value += nu * e + 0.5 * rho * e * e;
                let c = nu + rho * e;
                for j in 0..n {
                    gmu[j] += c * (1.0 - dl_dmu[j] / p.abs());
                    gq[j] -= c * dl_dq[j] / p.abs();
                }
            }

            let q_avg = x.iter().map(|v| v.q).sum::<f64>() / nf;
            let t_avg = x.iter().map(|v| v.temp).sum::<f64>() / nf;
            let (mut band_q, mut band_t) = (0.0, 0.0);
            for (j, cell) in self.problem.cells.iter().enumerate() {
                let (mu, xj) = (z[t * n + j], x[j]);
                for class in InequalityClass::ALL {
                    if !Self::ineq_active(t, class) {
                        continue;
                    }
                    let g = match class {
                        InequalityClass::TempMin => (cell.temp_limits[0] - xj.temp) / st,
                        InequalityClass::TempMax => (xj.temp - cell.temp_limits[1]) / st,
                        InequalityClass::SocMin => (cell.soc_limits[0] - xj.q) / sq,
                        InequalityClass::SocMax => (xj.q - cell.soc_limits[1]) / sq,
                        InequalityClass::CurrentMin => nf * (xj.u * cell.current_limits[0] / p_abs - mu),
                        InequalityClass::CurrentMax => nf * (mu - xj.u * cell.current_limits[1] / p_abs),
                        InequalityClass::SocBandAbove => ((xj.q - q_avg) - sq) / sq,
                        InequalityClass::SocBandBelow => ((q_avg - xj.q) - sq) / sq,
                        InequalityClass::TempBandAbove => ((xj.temp - t_avg) - st) / st,
                        InequalityClass::TempBandBelow => ((t_avg - xj.temp) - st) / st,
                    };
                    let lambda = m.ineq[self.ineq_index(t, class, j)];
                    let c = (lambda + rho * g).max(0.0);
                    value += (c * c - lambda * lambda) / (2.0 * rho);
                    if c == 0.0 {
                        continue;
                    }
                    match class {
                        InequalityClass::TempMin => gt[j] -= c / st,
                        InequalityClass::TempMax => gt[j] += c / st,
                        InequalityClass::SocMin => gq[j] -= c / sq,
                        InequalityClass::SocMax => gq[j] += c / sq,
                        InequalityClass::CurrentMin => {
                            gmu[j] -= nf * c;
                            gq[j] += nf * c * xj.du * cell.current_limits[0] / p_abs;
                        }
                        InequalityClass::CurrentMax => {
                            gmu[j] += nf * c;
                            gq[j] -= nf * c * xj.du * cell.current_limits[1] / p_abs;
                        }
                        // Each band residual also moves the pack mean; the
                        // shared −1/n part is accumulated and spread below.
                        InequalityClass::SocBandAbove => {
                            gq[j] += c / sq;
                            band_q += c / sq;
                        }
                        InequalityClass::SocBandBelow => {
                            gq[j] -= c / sq;
                            band_q -= c / sq;
                        }
                        InequalityClass::TempBandAbove => {
                            gt[j] += c / st;
                            band_t += c / st;
                        }
                        InequalityClass::TempBandBelow => {
                            gt[j] -= c / st;
                            band_t -= c / st;
                        }
                    }
                }
            }
            for j in 0..n {
                gq[j] -= band_q / nf;
                gt[j] -= band_t / nf;
            }

            // Chain through the dynamics x_{t+1} = f(x_t, μ_t).
            if t + 1 < self.steps() {
                for (j, c) in self.problem.cells.iter().enumerate() {
                    let (mu, xj) = (z[t * n + j], x[j]);
                    let a = p * opm.dt / (SECONDS_PER_HOUR * c.capacity_ah);
                    let h = opm.dt / c.heat_capacity;
                    let dq_dmu = -a / xj.u;
                    let dq_dq = 1.0 + a * mu * xj.du / (xj.u * xj.u);
                    let dt_dmu = h * 2.0 * xj.r * mu * p * p / (xj.u * xj.u);
                    let dt_dq = h * mu * mu * p * p * (xj.dr / (xj.u * xj.u) - 2.0 * xj.r * xj.du / xj.u.powi(3));
                    let dt_dt = 1.0 - h / c.conv_resistance;
                    gmu[j] += adj_q[j] * dq_dmu + adj_t[j] * dt_dmu;
                    gq[j] += adj_q[j] * dq_dq + adj_t[j] * dt_dq;
                    gt[j] += adj_t[j] * dt_dt;
                }
            }
            adj_q.copy_from_slice(&gq);
            adj_t.copy_from_slice(&gt);
        }
        value
    }
}

/// Dense BFGS on `f`, stopping when the gradient's infinity norm drops below
/// `tol`. Returns the iterations used and whether the tolerance was met.
fn bfgs(
    mut f: impl FnMut(&[f64], &mut [f64]) -> f64,
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> (usize, bool) {
    let m = x.len();
    let mut g = vec![0.0; m];
    let mut fx = f(x, &mut g);
    let mut hinv = DMatrix::<f64>::identity(m, m);
    let mut fresh = true;
    let mut trial = vec![0.0; m];
    let mut g_trial = vec![0.0; m];
    for iter in 0..max_iter {
        let gnorm = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gnorm <= tol {
            return (iter, true);
        }
        let gv = DVector::from_column_slice(&g);
        let mut dir = -(&hinv * &gv);
        let mut slope = dir.dot(&gv);
        if !(slope < 0.0) {
            hinv.fill_with_identity();
            fresh = true;
            dir = -gv.clone();
            slope = dir.dot(&gv);
        }
        let mut step = 1.0;
        let mut accepted = false;
        let mut f_trial = fx;
        for _ in 0..60 {
            for k in 0..m {
                trial[k] = x[k] + step * dir[k];
            }
            f_trial = f(&trial, &mut g_trial);
            if f_trial.is_finite() && f_trial <= fx + 1e-4 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if fresh {
                return (iter, false);
            }
            hinv.fill_with_identity();
            fresh = true;
            continue;
        }
        let s = DVector::from_iterator(m, (0..m).map(|k| trial[k] - x[k]));
        let y = DVector::from_iterator(m, (0..m).map(|k| g_trial[k] - g[k]));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                hinv *= sy / y.dot(&y);
                fresh = false;
            }
            let hy = &hinv * &y;
            let coef = (sy + y.dot(&hy)) / (sy * sy);
            hinv.ger(coef, &s, &s, 1.0);
            hinv.ger(-1.0 / sy, &hy, &s, 1.0);
            hinv.ger(-1.0 / sy, &s, &hy, 1.0);
        }
        x.copy_from_slice(&trial);
        g.copy_from_slice(&g_trial);
        fx = f_trial;
    }
    (max_iter, false)
}

/// Locally optimal cell-level shares from an augmented-Lagrangian loop,
/// started from the even split `μ = 1/n`.
pub fn solve_cell_level(
    problem: &OpmProblem,
    x0: &PackState,
    forecast: &DemandForecast,
    options: &BaselineOptions,
) -> Result<CellLevelSolution> {
    let start = Instant::now();
    let nlp = CellLevelNlp::new(problem, x0, forecast)?;
    let n = problem.n_cells();
    let mut z = vec![1.0 / n as f64; nlp.n_vars()];
    let mut mult = nlp.initial_multipliers(options.rho_init);
    let mut inner_total = 0;
    let mut outer = 0;
    let mut status = SolveStatus::IterationCap;
    let mut violation = nlp.max_violation(&z);
    while outer < options.max_outer {
        outer += 1;
        let (iters, inner_ok) = bfgs(|x, g| nlp.lagrangian(x, &mult, g), &mut z, options.grad_tol, options.max_inner);
        inner_total += iters;
        let (g, e) = nlp.constraints(&z);
        let new_violation = g
            .iter()
            .map(|v| v.max(0.0))
            .chain(e.iter().map(|v| v.abs()))
            .fold(0.0, f64::max);
        if inner_ok && new_violation <= options.feas_tol {
            violation = new_violation;
            status = SolveStatus::Converged;
            break;
        }
        for (l, gi) in mult.ineq.iter_mut().zip(&g) {
            if gi.is_finite() {
                *l = (*l + mult.rho * gi).max(0.0);
            }
        }
        for (nu, ei) in mult.eq.iter_mut().zip(&e) {
            *nu += mult.rho * ei;
        }
        if new_violation > 0.25 * violation {
            mult.rho = (mult.rho * options.rho_growth).min(options.rho_max);
        }
        violation = new_violation;
    }
    let mu = z.chunks(n).map(|c| c.to_vec()).collect();
    Ok(CellLevelSolution {
        mu,
        cost: nlp.objective(&z),
        max_violation: violation,
        runtime_s: start.elapsed().as_secs_f64(),
        status,
        outer_iterations: outer,
        inner_iterations: inner_total,
        n_vars: nlp.n_vars(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub theta_best: Theta,
    pub cost_best: f64,
    pub evaluated: usize,
}

/// Points `(a/K, b/K, (K−a−b)/K)` of the simplex lattice with `K = divisions`.
pub fn simplex_grid(divisions: usize) -> Vec<[f64; 3]> {
    let k = divisions as f64;
    let mut pts = Vec::with_capacity((divisions + 1) * (divisions + 2) / 2);
    for a in 0..=divisions {
        for b in 0..=divisions - a {
            let c = divisions - a - b;
            pts.push([a as f64 / k, b as f64 / k, c as f64 / k]);
        }
    }
    pts
}

/// Exhaustive minimization of the MHE cost over the simplex lattice with
/// spacing `step`, which must divide one.
pub fn grid_oracle(problem: &OpmProblem, x0: &PackState, forecast: &DemandForecast, step: f64) -> Result<GridResult> {
    let divisions = (1.0 / step).round();
    if !(step > 0.0) || divisions < 1.0 || (divisions * step - 1.0).abs() > 1e-9 {
        return Err(Error::config("step", format!("{step} does not divide the simplex")));
    }
    let pts = simplex_grid(divisions as usize);
    let costs: Vec<f64> = pts
        .par_iter()
        .map(|p| problem.mhe_cost(p, x0, forecast))
        .collect::<Result<_>>()?;
    let (best, cost) = costs
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, c)| (pts[i], *c))
        .ok_or_else(|| Error::Solver("every grid point has a non-finite cost".into()))?;
    Ok(GridResult {
        theta_best: Theta::project(best),
        cost_best: cost,
        evaluated: pts.len(),
    })
}

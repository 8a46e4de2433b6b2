//! Feature functions and the parameterized power-sharing ratio `μ = Φθ`.
//!
//! Each cell gets three features: one driven by its SoC, one by its
//! temperature and one by its total series resistance. By default every
//! feature column is a normalized weight vector (sums to one across cells), so
//! any `θ` on the probability simplex yields shares that sum to one. The
//! per-term form with the exponent inside the sum is available through
//! [`PolicyConfig::literal_phi`].

use serde::{Deserialize, Serialize};

use crate::cell::{CellParameters, PackState};
use crate::error::{Error, Result};

/// Floor applied to θ components when projecting back onto the simplex.
pub const THETA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Charging,
    Discharging,
}

impl Direction {
    /// Zero demand counts as discharging.
    pub fn of(p_out: f64) -> Self {
        if p_out >= 0.0 {
            Direction::Discharging
        } else {
            Direction::Charging
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub xi_q: f64,
    pub xi_t: f64,
    pub literal_phi: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            xi_q: 8.0,
            xi_t: 12.0,
            literal_phi: false,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        for (path, v) in [("policy.xi_q", self.xi_q), ("policy.xi_t", self.xi_t)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(path, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Policy weights on the probability simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Theta([f64; 3]);

impl Theta {
    pub const BARYCENTER: Theta = Theta([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);

    /// Accepts `raw` only if it already lies on the simplex.
    pub fn new(raw: [f64; 3]) -> Result<Self> {
        let sum: f64 = raw.iter().sum();
        if raw.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "theta",
                format!("{raw:?} is not on the probability simplex"),
            ));
        }
        Ok(Self(raw))
    }

    /// Clamps components to [`THETA_FLOOR`] and renormalizes. Non-finite
    /// components are treated as negative.
    pub fn project(raw: [f64; 3]) -> Self {
        let clamped = raw.map(|v| if v.is_finite() { v.max(THETA_FLOOR) } else { THETA_FLOOR });
        let sum: f64 = clamped.iter().sum();
        Self(clamped.map(|v| v / sum))
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }
}

impl TryFrom<[f64; 3]> for Theta {
    type Error = Error;

    fn try_from(raw: [f64; 3]) -> Result<Self> {
        Theta::new(raw)
    }
}

impl From<Theta> for [f64; 3] {
    fn from(t: Theta) -> Self {
        t.0
    }
}

impl std::ops::Index<usize> for Theta {
    type Output = f64;

    fn index(&self, k: usize) -> &f64 {
        &self.0[k]
    }
}

/// Normalizes non-negative weights to sum to one.
fn normalize(mut w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

fn require_positive(what: &'static str, v: &[f64]) -> Result<()> {
    match v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        Some(&bad) => Err(Error::Domain {
            what,
            value: bad,
            domain: "(0, inf)",
        }),
        None => Ok(()),
    }
}

/// SoC feature. Discharging favors fuller cells, charging emptier ones.
pub fn phi_soc(soc: &[f64], xi_q: f64, direction: Direction) -> Result<Vec<f64>> {
    require_positive("soc", soc)?;
    // Ratios against the extreme cell keep every power in (0, 1].
    let w = match direction {
        Direction::Discharging => {
            let top = soc.iter().copied().fold(f64::MIN, f64::max);
            soc.iter().map(|q| (q / top).powf(xi_q)).collect()
        }
        Direction::Charging => {
            let bottom = soc.iter().copied().fold(f64::MAX, f64::min);
            soc.iter().map(|q| (bottom / q).powf(xi_q)).collect()
        }
    };
    Ok(normalize(w))
}

/// Temperature feature; cooler cells get larger entries.
pub fn phi_temp(temp: &[f64], xi_t: f64) -> Result<Vec<f64>> {
    require_positive("temperature", temp)?;
    let coolest = temp.iter().copied().fold(f64::MAX, f64::min);
    Ok(normalize(temp.iter().map(|t| (coolest / t).powf(xi_t)).collect()))
}

/// Resistance feature: harmonic weights of `R_j + R_C`.
pub fn phi_res(res: &[f64], converter_res: f64) -> Result<Vec<f64>> {
    let total: Vec<f64> = res.iter().map(|r| r + converter_res).collect();
    require_positive("total resistance", &total)?;
    Ok(normalize(total.iter().map(|r| 1.0 / r).collect()))
}

/// Per-term SoC feature `Σ_i (q_j/q_i)^(−ξ)` (discharging) or
/// `Σ_i (q_i/q_j)^(−ξ)` (charging), without normalization.
pub fn phi_soc_literal(soc: &[f64], xi_q: f64, direction: Direction) -> Result<Vec<f64>> {
    require_positive("soc", soc)?;
    Ok(soc
        .iter()
        .map(|qj| {
            soc.iter()
                .map(|qi| match direction {
                    Direction::Discharging => (qj / qi).powf(-xi_q),
                    Direction::Charging => (qi / qj).powf(-xi_q),
                })
                .sum()
        })
        .collect())
}

/// Per-term temperature feature `Σ_i (T_j/T_i)^(−ξT)`.
pub fn phi_temp_literal(temp: &[f64], xi_t: f64) -> Result<Vec<f64>> {
    require_positive("temperature", temp)?;
    Ok(temp
        .iter()
        .map(|tj| temp.iter().map(|ti| (tj / ti).powf(-xi_t)).sum())
        .collect())
}

/// The `n × 3` feature matrix Φ; row `j` is `[φ_q, φ_T, φ_R]` of cell `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Vec<[f64; 3]>,
    pub direction: Direction,
}

impl FeatureMatrix {
    pub fn n_cells(&self) -> usize {
        self.rows.len()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[k]).collect()
    }

    /// `μ = Φθ`.
    pub fn psr(&self, theta: &Theta) -> Vec<f64> {
        self.rows.iter().map(|r| dot3(r, &theta.0)).collect()
    }

    /// `μ = Φθ` for an arbitrary (possibly off-simplex) weight vector.
    pub fn apply(&self, weights: &[f64; 3]) -> Vec<f64> {
        self.rows.iter().map(|r| dot3(r, weights)).collect()
    }
}

pub(crate) fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Assembles Φ for the pack at `state` under demand `p_out`.
pub fn features(
    state: &PackState,
    cells: &[CellParameters],
    p_out: f64,
    config: &PolicyConfig,
) -> Result<FeatureMatrix> {
    if cells.len() != state.len() {
        return Err(Error::config(
            "cells",
            format!("{} cell parameter sets for {} cells", cells.len(), state.len()),
        ));
    }
    let direction = Direction::of(p_out);
    let total_res: Vec<f64> = cells
        .iter()
        .zip(&state.soc)
        .map(|(c, &q)| c.resistance(q).map(|r| r + c.converter_res))
        .collect::<Result<_>>()?;
    let (soc_col, temp_col) = if config.literal_phi {
        (
            phi_soc_literal(&state.soc, config.xi_q, direction)?,
            phi_temp_literal(&state.temp, config.xi_t)?,
        )
    } else {
        (
            phi_soc(&state.soc, config.xi_q, direction)?,
            phi_temp(&state.temp, config.xi_t)?,
        )
    };
    let res_col = phi_res(&total_res, 0.0)?;
    let rows = soc_col
        .into_iter()
        .zip(temp_col)
        .zip(res_col)
        .map(|((a, b), c)| [a, b, c])
        .collect();
    Ok(FeatureMatrix { rows, direction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn identical_cells_share_equally() {
        for n in [1, 2, 7, 200] {
            let w = phi_soc(&vec![0.6; n], 8.0, Direction::Discharging).unwrap();
            assert!(w.iter().all(|x| (x - 1.0 / n as f64).abs() < 1e-15));
            let w = phi_temp(&vec![301.0; n], 12.0).unwrap();
            assert!(w.iter().all(|x| (x - 1.0 / n as f64).abs() < 1e-15));
            let w = phi_res(&vec![0.03; n], 0.01).unwrap();
            assert!(w.iter().all(|x| (x - 1.0 / n as f64).abs() < 1e-15));
        }
    }

    #[test]
    fn soc_feature_two_cells() {
        let d = phi_soc(&[0.8, 0.4], 8.0, Direction::Discharging).unwrap();
        assert_relative_eq!(d[0], 0.99611, epsilon = 1e-5);
        assert_relative_eq!(d[1], 0.00389, epsilon = 1e-5);
        let c = phi_soc(&[0.8, 0.4], 8.0, Direction::Charging).unwrap();
        assert_relative_eq!(c[0], 0.00389, epsilon = 1e-5);
        assert_relative_eq!(c[1], 0.99611, epsilon = 1e-5);
    }

    #[test]
    fn temp_feature_two_cells() {
        let w = phi_temp(&[298.0, 308.0], 12.0).unwrap();
        assert_relative_eq!(w[0], 0.5978, epsilon = 1e-4);
        assert_relative_eq!(w[1], 0.4022, epsilon = 1e-4);
        assert!(w[1] < w[0]);
    }

    #[test]
    fn res_feature_harmonic() {
        let w = phi_res(&[0.04, 0.06], 0.0).unwrap();
        assert_relative_eq!(w[0], 0.6, epsilon = 1e-12);
        assert_relative_eq!(w[1], 0.4, epsilon = 1e-12);
        assert_eq!(phi_res(&[0.05], 0.01).unwrap(), vec![1.0]);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(phi_soc(&[0.5, 0.0], 8.0, Direction::Charging), Err(Error::Domain { .. })));
        assert!(phi_temp(&[298.0, -1.0], 12.0).is_err());
        assert!(phi_res(&[0.01, -0.02], 0.005).is_err());
    }

    #[test]
    fn literal_form_is_available() {
        // Identical cells give n, not 1/n, under the per-term form.
        let w = phi_soc_literal(&[0.5; 4], 8.0, Direction::Discharging).unwrap();
        assert!(w.iter().all(|x| (x - 4.0).abs() < 1e-12));
        let w = phi_temp_literal(&[300.0; 3], 12.0).unwrap();
        assert!(w.iter().all(|x| (x - 3.0).abs() < 1e-12));
    }

    fn two_cell_pack() -> (PackState, Vec<CellParameters>) {
        // Pick resistance curves so that R + R_C = [0.04, 0.06] at q = [0.8, 0.4].
        let mk = |target: f64, q: f64| {
            let mut c = CellParameters::inr18650_25r();
            c.converter_res = 0.0;
            c.res_base = target - c.res_exp_coeff * (-c.res_exp_rate * q).exp();
            c
        };
        let state = PackState::new(vec![0.8, 0.4], vec![298.0, 308.0]).unwrap();
        (state, vec![mk(0.04, 0.8), mk(0.06, 0.4)])
    }

    #[test]
    fn features_compose_columns() {
        let (state, cells) = two_cell_pack();
        let phi = features(&state, &cells, 2000.0, &PolicyConfig::default()).unwrap();
        assert_eq!(phi.direction, Direction::Discharging);
        assert_relative_eq!(phi.rows[0][0], 0.99611, epsilon = 1e-5);
        assert_relative_eq!(phi.rows[0][1], 0.5978, epsilon = 1e-4);
        assert_relative_eq!(phi.rows[0][2], 0.6, epsilon = 1e-12);
        let mu = phi.psr(&Theta::BARYCENTER);
        assert_relative_eq!(mu[0], 0.73130, epsilon = 1e-4);
        assert_relative_eq!(mu[0] + mu[1], 1.0, epsilon = 1e-12);
        let selector = phi.psr(&Theta::new([1.0, 0.0, 0.0]).unwrap());
        assert_eq!(selector, phi.column(0));
    }

    #[test]
    fn zero_power_counts_as_discharging() {
        let (state, cells) = two_cell_pack();
        let phi = features(&state, &cells, 0.0, &PolicyConfig::default()).unwrap();
        assert_eq!(phi.direction, Direction::Discharging);
        assert!(phi.rows[0][0] > phi.rows[1][0]);
    }

    #[test]
    fn identical_cells_rows_equal() {
        let cells = vec![CellParameters::inr18650_25r(); 5];
        let state = PackState::uniform(5, 0.6, 300.0);
        let phi = features(&state, &cells, -500.0, &PolicyConfig::default()).unwrap();
        for row in &phi.rows {
            for v in row {
                assert_relative_eq!(*v, 0.2, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn theta_projection() {
        let t = Theta::project([-0.2, 0.6, 0.8]);
        let a = t.as_array();
        assert_relative_eq!(a.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert!(a[0] > 0.0 && a[0] < 1e-5);
        assert!(Theta::new([0.5, 0.5, 0.5]).is_err());
        assert!(Theta::new([0.2, 0.3, 0.5]).is_ok());
        let t = Theta::project([f64::NAN, 1.0, 1.0]);
        assert!(t.as_array().iter().all(|v| v.is_finite()));
    }

    fn pack_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (2usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec(0.05..0.95f64, n),
                prop::collection::vec(280.0..330.0f64, n),
                prop::collection::vec(0.0313..0.0413f64, n),
            )
        })
    }

    fn theta_strategy() -> impl Strategy<Value = Theta> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64)
            .prop_map(|(a, b, c)| Theta::project([a + 1e-3, b + 1e-3, c + 1e-3]))
    }

    fn build(soc: &[f64], temp: &[f64], base: &[f64]) -> (PackState, Vec<CellParameters>) {
        let cells = base
            .iter()
            .map(|&r| CellParameters {
                res_base: r,
                ..CellParameters::inr18650_25r()
            })
            .collect();
        (PackState::new(soc.to_vec(), temp.to_vec()).unwrap(), cells)
    }

    proptest! {
        #[test]
        fn columns_are_stochastic(
            (soc, temp, base) in pack_strategy(),
            theta in theta_strategy(),
            p in -3000.0..3000.0f64,
        ) {
            let (state, cells) = build(&soc, &temp, &base);
            let phi = features(&state, &cells, p, &PolicyConfig::default()).unwrap();
            for k in 0..3 {
                let col = phi.column(k);
                prop_assert!(col.iter().all(|v| *v >= 0.0));
                prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let mu = phi.psr(&theta);
            prop_assert!(mu.iter().all(|v| *v >= 0.0));
            prop_assert!((mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn discharging_monotonicity(
            (soc, temp, base) in pack_strategy(),
            theta in theta_strategy(),
            j in 0usize..12,
            bump in 1e-3..0.05f64,
        ) {
            let j = j % soc.len();
            let cfg = PolicyConfig::default();
            let (state, cells) = build(&soc, &temp, &base);
            let mu0 = features(&state, &cells, 1000.0, &cfg).unwrap().psr(&theta)[j];

            let mut s = soc.clone();
            s[j] = (s[j] + bump).min(1.0);
            let (state, cells) = build(&s, &temp, &base);
            let mu = features(&state, &cells, 1000.0, &cfg).unwrap().psr(&theta)[j];
            prop_assert!(mu >= mu0 - 1e-15);

            let mut t = temp.clone();
            t[j] += 100.0 * bump;
            let (state, cells) = build(&soc, &t, &base);
            let mu = features(&state, &cells, 1000.0, &cfg).unwrap().psr(&theta)[j];
            prop_assert!(mu <= mu0 + 1e-15);

            let mut r = base.clone();
            r[j] += bump / 10.0;
            let (state, cells) = build(&soc, &temp, &r);
            let mu = features(&state, &cells, 1000.0, &cfg).unwrap().psr(&theta)[j];
            prop_assert!(mu <= mu0 + 1e-15);
        }

        #[test]
        fn scale_invariance(
            (soc, temp, _) in pack_strategy(),
            k in 0.5..1.0f64,
        ) {
            for dir in [Direction::Charging, Direction::Discharging] {
                let a = phi_soc(&soc, 8.0, dir).unwrap();
                let scaled: Vec<f64> = soc.iter().map(|q| q * k).collect();
                let b = phi_soc(&scaled, 8.0, dir).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
            let a = phi_temp(&temp, 12.0).unwrap();
            let scaled: Vec<f64> = temp.iter().map(|t| t * k).collect();
            let b = phi_temp(&scaled, 12.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn permutation_equivariance(
            (soc, temp, base) in pack_strategy(),
            theta in theta_strategy(),
            shift in 0usize..12,
        ) {
            let n = soc.len();
            let rot = |v: &[f64]| -> Vec<f64> { (0..n).map(|j| v[(j + shift) % n]).collect() };
            let cfg = PolicyConfig::default();
            let (state, cells) = build(&soc, &temp, &base);
            let mu = features(&state, &cells, -800.0, &cfg).unwrap().psr(&theta);
            let (state, cells) = build(&rot(&soc), &rot(&temp), &rot(&base));
            let mu_rot = features(&state, &cells, -800.0, &cfg).unwrap().psr(&theta);
            for (a, b) in rot(&mu).iter().zip(&mu_rot) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }
    }
}

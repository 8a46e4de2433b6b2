//! Predicted and actual output-power profiles.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::scenario::DemandProfile;

/// Demand as a function of time. The prediction is a square wave; the
/// actual demand adds slowly varying uniform noise and explicit events.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandSeries {
    profile: DemandProfile,
    /// Noise values at multiples of the correlation time.
    targets: Vec<f64>,
}

impl DemandSeries {
    pub fn new(profile: &DemandProfile, duration: f64, rng: &mut ChaCha8Rng) -> Self {
        let tau = profile.noise.correlation_time;
        let w = profile.noise.half_width;
        let count = (duration / tau).ceil() as usize + 2;
        let targets = (0..count)
            .map(|_| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 })
            .collect();
        Self {
            profile: profile.clone(),
            targets,
        }
    }

    pub fn predicted_at(&self, t: f64) -> f64 {
        let mut discharging = !self.profile.start_charging;
        if let Some(period) = self.profile.switch_period {
            if ((t / period + 1e-9).floor() as i64) % 2 == 1 {
                discharging = !discharging;
            }
        }
        if discharging {
            self.profile.nominal
        } else {
            -self.profile.nominal
        }
    }

    fn noise_at(&self, t: f64) -> f64 {
        let x = t.max(0.0) / self.profile.noise.correlation_time;
        let m = (x.floor() as usize).min(self.targets.len() - 2);
        let frac = (x - m as f64).clamp(0.0, 1.0);
        self.targets[m] * (1.0 - frac) + self.targets[m + 1] * frac
    }

    pub fn actual_at(&self, t: f64) -> f64 {
        let event = self
            .profile
            .events
            .iter()
            .rev()
            .find(|e| t >= e.at && e.until.is_none_or(|u| t < u));
        match event {
            Some(e) => e.power,
            None => self.predicted_at(t) + self.noise_at(t),
        }
    }
}

/// Predicted and actual demand sampled at `0, dt, …, duration`.
pub fn gen_demand(profile: &DemandProfile, duration: f64, dt: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let series = DemandSeries::new(profile, duration, rng);
    let k = (duration / dt).round() as usize;
    (0..=k)
        .map(|i| {
            let t = i as f64 * dt;
            (series.predicted_at(t), series.actual_at(t))
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scenario::{DemandEvent, NoiseSpec};
    use rand::SeedableRng;

    fn profile(w: f64) -> DemandProfile {
        DemandProfile {
            nominal: 2000.0,
            switch_period: Some(1200.0),
            start_charging: false,
            noise: NoiseSpec {
                half_width: w,
                correlation_time: 60.0,
            },
            events: vec![],
        }
    }

    #[test]
    fn noiseless_actual_matches_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, a) = gen_demand(&profile(0.0), 3600.0, 1.0, &mut rng);
        assert_eq!(p.len(), 3601);
        assert_eq!(p, a);
        assert_eq!(p[0], 2000.0);
        assert_eq!(p[1199], 2000.0);
        assert_eq!(p[1200], -2000.0);
        assert_eq!(p[2400], 2000.0);
    }

    #[test]
    fn noise_is_bounded_and_slow() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, a) = gen_demand(&profile(200.0), 3600.0, 1.0, &mut rng);
        let d: Vec<f64> = p.iter().zip(&a).map(|(x, y)| y - x).collect();
        assert!(d.iter().all(|v| v.abs() <= 200.0));
        assert!(d.iter().any(|v| v.abs() > 50.0));
        // Linear interpolation over 60 s limits the per-second change to 400/60 W.
        assert!(d.windows(2).all(|w| (w[1] - w[0]).abs() <= 400.0 / 60.0 + 1e-9));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(gen_demand(&profile(200.0), 3600.0, 1.0, &mut rng).1, a);
    }

    #[test]
    fn step_events_override_actual() {
        let prof = DemandProfile {
            nominal: 90.0,
            switch_period: None,
            events: vec![
                DemandEvent {
                    at: 300.0,
                    power: 120.0,
                    until: Some(600.0),
                },
                DemandEvent {
                    at: 1200.0,
                    power: 120.0,
                    until: None,
                },
            ],
            ..profile(0.0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, a) = gen_demand(&prof, 1500.0, 1.0, &mut rng);
        assert!(p.iter().all(|v| *v == 90.0));
        assert_eq!(a[299], 90.0);
        assert_eq!(a[300], 120.0);
        assert_eq!(a[599], 120.0);
        assert_eq!(a[600], 90.0);
        assert_eq!(a[1200], 120.0);
        assert_eq!(a[1500], 120.0);
    }
}

use std::f64::consts::FRAC_PI_2;

use crate::diffusion::LatentImage;
use crate::error::{Error, Result};

/// Variance-preserving cosine schedule: `αₜ = cos θₜ`, `σₜ = sin θₜ`.
///
/// `θₜ` grows linearly with the offset-cosine profile and stops short of
/// `π/2` so that `α` stays positive at the final step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

/// Largest angle reached at `t = T − 1`, as a fraction of `π/2`.
pub const TERMINAL_ANGLE_FRACTION: f64 = 0.99;
const OFFSET: f64 = 0.008;

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter("schedule needs at least one step".into()));
        }
        let mut alpha = Vec::with_capacity(steps);
        let mut sigma = Vec::with_capacity(steps);
        for t in 0..steps {
            let frac = ((t + 1) as f64 / steps as f64 + OFFSET) / (1.0 + OFFSET);
            let theta = frac * FRAC_PI_2 * TERMINAL_ANGLE_FRACTION;
            alpha.push(theta.cos());
            sigma.push(theta.sin());
        }
        Ok(Self { alpha, sigma })
    }

    /// Explicit coefficients; used by tests and for loading foreign schedules.
    pub fn from_coefficients(alpha: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.len() != sigma.len() {
            return Err(Error::InvalidParameter("alpha and sigma must be non-empty and equal length".into()));
        }
        Ok(Self { alpha, sigma })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }
}

/// `zₜ = αₜ·z₀ + σₜ·ε`.
pub fn forward_noising(
    z0: &LatentImage,
    t: usize,
    eps: &LatentImage,
    schedule: &NoiseSchedule,
) -> Result<LatentImage> {
    schedule.check_step(t)?;
    if z0.dims() != eps.dims() {
        return Err(Error::Shape(format!("z0 {:?} vs eps {:?}", z0.dims(), eps.dims())));
    }
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let data = z0
        .tokens()
        .data()
        .iter()
        .zip(eps.tokens().data())
        .map(|(z, e)| a * z + s * e)
        .collect();
    LatentImage::from_token_data(z0.height(), z0.width(), z0.channels(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_invariants() {
        for steps in [1, 2, 10, 1000] {
            let s = NoiseSchedule::cosine(steps).unwrap();
            for t in 0..steps {
                let a = s.alpha(t);
                let g = s.sigma(t);
                assert!((a * a + g * g - 1.0).abs() < 1e-9);
                assert!(a > 0.0);
                if t > 0 {
                    assert!(a < s.alpha(t - 1));
                    assert!(g > s.sigma(t - 1));
                }
            }
        }
        assert!(NoiseSchedule::cosine(0).is_err());
    }

    #[test]
    fn noising_edge_coefficients() {
        let z0 = LatentImage::filled(2, 2, 3, 1.0);
        let eps = LatentImage::filled(2, 2, 3, 1.0);
        let s = NoiseSchedule::from_coefficients(vec![1.0, 0.0, 0.8], vec![0.0, 1.0, 0.6]).unwrap();
        let zr = LatentImage::filled(2, 2, 3, 0.25);
        assert_eq!(forward_noising(&zr, 0, &eps, &s).unwrap(), zr);
        assert_eq!(forward_noising(&z0, 1, &zr, &s).unwrap(), zr);
        let mixed = forward_noising(&z0, 2, &eps, &s).unwrap();
        assert!(mixed.tokens().data().iter().all(|v| (v - 1.4).abs() < 1e-15));
        assert!(matches!(
            forward_noising(&z0, 3, &eps, &s),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }
}

//! DDPM noise schedule.

use super::DiffusionError;

/// Per-step diffusion coefficients.
///
/// Index convention: diffusion time `t` runs from 0 (clean) to `t_max`
/// (pure noise). `beta`, `alpha`, and `sigma` are defined for `t` in
/// `1..=t_max`; `alpha_bar` additionally at `t = 0` where it is exactly 1.
/// `sigma` is the DDPM posterior noise scale, which vanishes at `t = 1`, so
/// the final reverse step is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_start` to `beta_end` over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if t_max == 0 {
            return Err(DiffusionError::BadSchedule("t_max must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_end > 0.0 && beta_start < 1.0 && beta_end < 1.0) {
            return Err(DiffusionError::BadSchedule(
                "betas must lie strictly in (0, 1)".into(),
            ));
        }
        let mut beta = vec![0.0; t_max + 1];
        let mut alpha = vec![1.0; t_max + 1];
        let mut alpha_bar = vec![1.0; t_max + 1];
        let mut sigma = vec![0.0; t_max + 1];
        for t in 1..=t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                (t - 1) as f64 / (t_max - 1) as f64
            };
            beta[t] = beta_start + frac * (beta_end - beta_start);
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
            // Posterior variance: beta_t * (1 - abar_{t-1}) / (1 - abar_t).
            sigma[t] = (beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])).sqrt();
        }
        Ok(Self {
            t_max,
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    /// Default toy-scale schedule: 50 steps with the usual thousand-step
    /// linear range compressed 20x, so the chain still ends at near-pure
    /// noise (`alpha_bar(T) < 1e-4`).
    pub fn default_schedule() -> Self {
        Self::linear(50, 2e-3, 0.4).expect("default schedule is valid")
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "t={t} out of range");
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "t={t} out of range");
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "t={t} out of range");
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "t={t} out of range");
        self.sigma[t]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_strictly_decreasing_from_one() {
        let s = NoiseSchedule::default_schedule();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.t_max() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
    }

    #[test]
    fn default_ends_at_near_pure_noise() {
        let s = NoiseSchedule::default_schedule();
        assert!(s.alpha_bar(s.t_max()) < 1e-2);
        assert!(s.alpha_bar(s.t_max()) < 1e-4);
    }

    #[test]
    fn final_reverse_step_is_deterministic() {
        let s = NoiseSchedule::default_schedule();
        assert_eq!(s.sigma(1), 0.0);
        for t in 2..=s.t_max() {
            assert!(s.sigma(t) > 0.0);
        }
    }

    #[test]
    fn rejects_degenerate_parameters() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }
}

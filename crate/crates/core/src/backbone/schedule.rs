//! Cosine noise schedule, velocity targets and deterministic DDIM updates.
//!
//! The denoiser predicts the velocity `v = √ᾱ ε − √(1−ᾱ) x₀`, which stays
//! well conditioned at both ends of the schedule.

use compass_autograd::Tensor;

pub const TRAIN_TIMESTEPS: usize = 1000;

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::cosine(TRAIN_TIMESTEPS)
    }
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Self {
        let s = 0.008;
        let f = |t: f64| (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for t in 0..steps {
            let ab = f((t + 1) as f64) / f0;
            // cap each beta at 0.999 so the last steps stay invertible
            let beta = (1.0 - ab / prev).min(0.999);
            let cur = prev * (1.0 - beta);
            alpha_bar.push(cur);
            prev = cur;
        }
        Self { alpha_bar }
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `√ᾱ x₀ + √(1−ᾱ) ε`
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Tensor {
        let ab = self.alpha_bar[t];
        x0.zip_map(eps, |x, e| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
    }

    /// `√ᾱ ε − √(1−ᾱ) x₀`
    pub fn velocity(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Tensor {
        let ab = self.alpha_bar[t];
        eps.zip_map(x0, |e, x| ab.sqrt() * e - (1.0 - ab).sqrt() * x)
    }

    /// `steps` evenly spaced timesteps, descending, starting at the last one.
    pub fn sampling_timesteps(&self, steps: usize) -> Vec<usize> {
        let n = self.len();
        let steps = steps.clamp(1, n);
        (0..steps)
            .map(|i| ((n - 1) as f64 * (1.0 - i as f64 / steps as f64)).round() as usize)
            .collect()
    }

    /// One deterministic DDIM update from `t` to `t_prev` (`None` = clean
    /// sample) given the predicted velocity. The clean-latent estimate is
    /// clipped to `[-1, 1]`.
    pub fn ddim_step(&self, x_t: &Tensor, v: &Tensor, t: usize, t_prev: Option<usize>) -> Tensor {
        let ab = self.alpha_bar[t];
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0 = x_t.zip_map(v, |x, v| a * x - s * v).map(|v| v.clamp(-1.0, 1.0));
        let Some(tp) = t_prev else { return x0 };
        let eps = x_t.zip_map(&x0, |x, c| (x - a * c) / s);
        let abp = self.alpha_bar[tp];
        x0.zip_map(&eps, |c, e| abp.sqrt() * c + (1.0 - abp).sqrt() * e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_monotone_and_bounded() {
        let s = NoiseSchedule::default();
        assert_eq!(s.len(), 1000);
        assert!(s.alpha_bar(0) < 1.0 && s.alpha_bar(0) > 0.99);
        for t in 1..s.len() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(999) > 0.0 && s.alpha_bar(999) < 1e-3);
    }

    #[test]
    fn sampling_timesteps_descend() {
        let s = NoiseSchedule::default();
        let ts = s.sampling_timesteps(50);
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 999);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn ddim_with_true_velocity_recovers_clean_latent() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::from_rows(&[vec![0.5, -0.25], vec![0.9, -1.0]]);
        let eps = Tensor::from_rows(&[vec![0.3, 1.2], vec![-0.7, 0.1]]);
        let xt = s.add_noise(&x0, &eps, 600);
        let v = s.velocity(&x0, &eps, 600);
        let back = s.ddim_step(&xt, &v, 600, None);
        assert!(back.max_abs_diff(&x0) < 1e-9);
        let mid = s.ddim_step(&xt, &v, 600, Some(300));
        assert!(mid.max_abs_diff(&s.add_noise(&x0, &eps, 300)) < 1e-9);
    }
}

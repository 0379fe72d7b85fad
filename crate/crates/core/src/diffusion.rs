//! Noise schedules, the closed-form forward process, DDPM/DDIM reverse steps,
//! the noise-prediction loss and classifier-free guidance.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    /// `σ_t² = β_t`.
    Beta,
    /// `σ_t² = β_t (1−ᾱ_{t−1}) / (1−ᾱ_t)`.
    Posterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub variance: VarianceKind,
    /// Classifier-free guidance weight `w`.
    pub guidance: f64,
    /// Clamp the predicted clean latent to `[-1, 1]` while sampling.
    pub clip_x0: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            schedule: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.02,
            variance: VarianceKind::Beta,
            guidance: 3.0,
            clip_x0: true,
        }
    }
}

impl DiffusionConfig {
    /// Ten-step geometric schedule used with the surrogate denoiser.
    pub fn surrogate() -> Self {
        Self { steps: 10, schedule: ScheduleKind::Geometric, beta_start: 0.05, beta_end: 0.99, ..Self::default() }
    }
}

/// Per-step quantities, stored for `t = 1..=T` at index `t − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>, variance: VarianceKind) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let sigmas = (0..betas.len())
            .map(|i| {
                if i == 0 {
                    return 0.0;
                }
                match variance {
                    VarianceKind::Beta => betas[i].sqrt(),
                    VarianceKind::Posterior => (betas[i] * (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i])).sqrt(),
                }
            })
            .collect();
        Ok(Self { betas, alpha_bars, sigmas })
    }

    pub fn linear(steps: usize, start: f64, end: f64, variance: VarianceKind) -> Result<Self> {
        let betas = (0..steps)
            .map(|i| if steps == 1 { start } else { start + (end - start) * i as f64 / (steps - 1) as f64 })
            .collect();
        Self::from_betas(betas, variance)
    }

    pub fn geometric(steps: usize, start: f64, end: f64, variance: VarianceKind) -> Result<Self> {
        let betas = (0..steps)
            .map(|i| if steps == 1 { start } else { start * (end / start).powf(i as f64 / (steps - 1) as f64) })
            .collect();
        Self::from_betas(betas, variance)
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        match cfg.schedule {
            ScheduleKind::Linear => Self::linear(cfg.steps, cfg.beta_start, cfg.beta_end, cfg.variance),
            ScheduleKind::Geometric => Self::geometric(cfg.steps, cfg.beta_start, cfg.beta_end, cfg.variance),
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::OutOfRange(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// Tab-separated `t, α_t, ᾱ_t, σ_t` rows.
    pub fn to_table(&self) -> String {
        let mut s = String::from("t\talpha\talpha_bar\tsigma\n");
        for t in 1..=self.steps() {
            let _ = writeln!(s, "{t}\t{:.17e}\t{:.17e}\t{:.17e}", self.alpha(t), self.alpha_bar(t), self.sigma(t));
        }
        s
    }
}

fn same_shape(a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(shape_err(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

pub fn randn_like(x: &Mat, rng: &mut impl Rng) -> Mat {
    Mat::from_shape_simple_fn(x.raw_dim(), || rng.sample(StandardNormal))
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(x0: &Mat, t: usize, eps: &Mat, schedule: &NoiseSchedule) -> Result<Mat> {
    schedule.check(t)?;
    same_shape(x0, eps)?;
    Ok(mix(x0, eps, schedule.alpha_bar(t)))
}

fn mix(x0: &Mat, eps: &Mat, alpha_bar: f64) -> Mat {
    x0 * alpha_bar.sqrt() + eps * (1.0 - alpha_bar).sqrt()
}

/// Clean-sample estimate implied by a noise prediction.
pub fn predict_x0(x_t: &Mat, eps_hat: &Mat, t: usize, schedule: &NoiseSchedule) -> Mat {
    let ab = schedule.alpha_bar(t);
    (x_t - &(eps_hat * (1.0 - ab).sqrt())) / ab.sqrt()
}

/// Noise implied by a clean-sample prediction.
pub fn predict_eps(x_t: &Mat, x0_hat: &Mat, t: usize, schedule: &NoiseSchedule) -> Mat {
    let ab = schedule.alpha_bar(t);
    (x_t - &(x0_hat * ab.sqrt())) / (1.0 - ab).sqrt()
}

/// Ancestral step `x_{t−1} = μ̃(x̂0, x_t) + σ_t·z`; `z = None` means no noise.
pub fn ddpm_step(x_t: &Mat, eps_hat: &Mat, t: usize, schedule: &NoiseSchedule, z: Option<&Mat>) -> Result<Mat> {
    schedule.check(t)?;
    same_shape(x_t, eps_hat)?;
    let x0 = predict_x0(x_t, eps_hat, t, schedule);
    let (ab, ab_prev, beta) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1), schedule.beta(t));
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let mut out = x0 * c0 + x_t * ct;
    if let Some(z) = z {
        same_shape(x_t, z)?;
        out.scaled_add(schedule.sigma(t), z);
    }
    Ok(out)
}

/// Deterministic (η = 0) DDIM step from `t` to `t_prev < t`.
pub fn ddim_step(
    x_t: &Mat,
    eps_hat: &Mat,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    clip_x0: bool,
) -> Result<Mat> {
    schedule.check(t)?;
    same_shape(x_t, eps_hat)?;
    if t_prev >= t {
        return Err(Error::OutOfRange(format!("DDIM target {t_prev} is not before {t}")));
    }
    let mut x0 = predict_x0(x_t, eps_hat, t, schedule);
    let mut eps = eps_hat.clone();
    if clip_x0 {
        x0.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        eps = predict_eps(x_t, &x0, t, schedule);
    }
    if t_prev == 0 {
        return Ok(x0);
    }
    Ok(mix(&x0, &eps, schedule.alpha_bar(t_prev)))
}

/// Mean squared error over all elements.
pub fn training_loss(eps: &Mat, eps_hat: &Mat) -> Result<f64> {
    same_shape(eps, eps_hat)?;
    if eps.is_empty() {
        return Ok(0.0);
    }
    Ok((eps - eps_hat).mapv(|v| v * v).sum() / eps.len() as f64)
}

/// `w·ε_cond + (1−w)·ε_uncond`.
pub fn cfg_combine(eps_cond: &Mat, eps_uncond: &Mat, w: f64) -> Result<Mat> {
    same_shape(eps_cond, eps_uncond)?;
    Ok(eps_cond * w + eps_uncond * (1.0 - w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs_diff, randn};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn surrogate() -> NoiseSchedule {
        NoiseSchedule::from_config(&DiffusionConfig::surrogate()).unwrap()
    }

    #[test]
    fn default_schedule_ends_near_pure_noise() {
        let s = NoiseSchedule::from_config(&DiffusionConfig::default()).unwrap();
        assert_eq!(s.steps(), 1000);
        assert!(s.alpha_bar(1000) < 1e-3);
        assert!((1..1000).all(|t| s.alpha_bar(t + 1) < s.alpha_bar(t)));
        assert_eq!(s.sigma(1), 0.0);
        assert!((s.sigma(2) - s.beta(2).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn forward_limits() {
        let x0 = array![[1.0, -2.0]];
        let eps = array![[0.5, 0.25]];
        let tiny = NoiseSchedule::from_betas(vec![1e-300], VarianceKind::Beta).unwrap();
        assert_eq!(forward_diffuse(&x0, 1, &eps, &tiny).unwrap(), x0);
        assert_eq!(mix(&x0, &eps, 0.0), eps);
        assert!(forward_diffuse(&x0, 0, &eps, &tiny).is_err());
        assert!(forward_diffuse(&x0, 2, &eps, &tiny).is_err());
    }

    #[test]
    fn inversion_at_alpha_bar_0_64() {
        let s = NoiseSchedule::from_betas(vec![0.36], VarianceKind::Beta).unwrap();
        let x0 = array![[0.3, -1.2, 2.0]];
        let eps = array![[1.0, 0.1, -0.7]];
        let xt = forward_diffuse(&x0, 1, &eps, &s).unwrap();
        let back = (&xt - &(&eps * 0.6)) / 0.8;
        assert!(max_abs_diff(&back, &x0) < 1e-12);
    }

    #[test]
    fn one_step_round_trip_at_t1() {
        let s = surrogate();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = randn(4, 6, 1.0, &mut rng);
        let eps = randn(4, 6, 1.0, &mut rng);
        let x1 = forward_diffuse(&x0, 1, &eps, &s).unwrap();
        let z = randn(4, 6, 1.0, &mut rng);
        assert!(max_abs_diff(&ddpm_step(&x1, &eps, 1, &s, Some(&z)).unwrap(), &x0) < 1e-10);
    }

    #[test]
    fn zero_inputs_map_to_zero() {
        let s = surrogate();
        let zero = Mat::zeros((2, 3));
        assert!(ddpm_step(&zero, &zero, 5, &s, None).unwrap().iter().all(|&v| v == 0.0));
        assert!(ddpm_step(&zero, &zero, 0, &s, None).is_err());
    }

    #[test]
    fn loss_examples() {
        let ones = Mat::ones((1, 4));
        assert_eq!(training_loss(&ones, &ones).unwrap(), 0.0);
        assert_eq!(training_loss(&ones, &Mat::zeros((1, 4))).unwrap(), 1.0);
        assert!(training_loss(&ones, &Mat::zeros((2, 2))).is_err());
    }

    #[test]
    fn guidance_examples() {
        let c = array![[1.0, 2.0]];
        let u = array![[-1.0, 0.5]];
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &c, 7.5).unwrap(), c);
    }

    #[test]
    fn ddim_with_true_noise_reaches_x0() {
        let s = surrogate();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = randn(3, 3, 0.5, &mut rng);
        let mut x = forward_diffuse(&x0, 10, &randn(3, 3, 1.0, &mut rng), &s).unwrap();
        for t in (1..=10).rev() {
            let eps = predict_eps(&x, &x0, t, &s);
            x = ddim_step(&x, &eps, t, t - 1, &s, false).unwrap();
        }
        assert!(max_abs_diff(&x, &x0) < 1e-9);
    }

    #[test]
    fn table_has_one_row_per_step() {
        assert_eq!(surrogate().to_table().lines().count(), 11);
    }
}

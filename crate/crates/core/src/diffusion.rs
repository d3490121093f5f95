//! Noise schedule, forward noising, the DDIM update and guidance.
//!
//! Schedule coefficients are kept in `f64`; elementwise updates are
//! evaluated in `f64` per element and rounded once to `f32`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Linear-β variance schedule over `T` steps.
///
/// `alpha_bar[t] = ∏_{s ≤ t} (1 − β_s)` with `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::range("timesteps", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::range(
                "beta",
                alloc::format!("need 0 < {beta_start} <= {beta_end} < 1"),
            ));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(timesteps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0f64;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    /// β_t for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// ᾱ_t for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// DDIM σ for a jump `t → t_prev` at stochasticity `eta`.
    pub fn sigma(&self, t: usize, t_prev: usize, eta: f64) -> f64 {
        if eta == 0.0 || t == t_prev {
            return 0.0;
        }
        let (a, ap) = (self.alpha_bar[t], self.alpha_bar[t_prev]);
        eta * libm::sqrt((1.0 - ap) / (1.0 - a)) * libm::sqrt(1.0 - a / ap)
    }

    fn check_t(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.timesteps() || (!allow_zero && t == 0) {
            return Err(Error::range(
                "timestep",
                alloc::format!("{t} not in {}..={}", u8::from(!allow_zero), self.timesteps()),
            ));
        }
        Ok(())
    }

    /// Forward noising `z_t = √ᾱ_t·z₀ + √(1−ᾱ_t)·ε` for `t ∈ 1..=T`.
    pub fn add_noise(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t, false)?;
        self.add_noise_at(z0, eps, t)
    }

    /// As [`add_noise`](Self::add_noise) but also accepting `t = 0`.
    pub fn add_noise_at(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t, true)?;
        let a = self.alpha_bar[t];
        let (sa, sb) = (libm::sqrt(a), libm::sqrt(1.0 - a));
        z0.zip_map(eps, "add_noise", |x, e| (sa * x as f64 + sb * e as f64) as f32)
    }

    /// One DDIM update from `t` to `t_prev` with `σ` given by `eta`.
    ///
    /// `t_prev == t` is accepted as the degenerate identity step.
    pub fn ddim_step(
        &self,
        z_t: &Tensor,
        eps_hat: &Tensor,
        t: usize,
        t_prev: usize,
        eta: f64,
        noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.check_t(t, true)?;
        self.check_t(t_prev, true)?;
        let sigma = self.sigma(t, t_prev, eta);
        self.ddim_step_with_sigma(z_t, eps_hat, t, t_prev, sigma, noise)
    }

    /// DDIM update with an explicit σ:
    ///
    /// ```text
    /// ẑ₀     = (z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t
    /// z_prev = √ᾱ_prev·ẑ₀ + √(1−ᾱ_prev−σ²)·ε̂ + σ·noise
    /// ```
    pub fn ddim_step_with_sigma(
        &self,
        z_t: &Tensor,
        eps_hat: &Tensor,
        t: usize,
        t_prev: usize,
        sigma: f64,
        noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.check_t(t, true)?;
        self.check_t(t_prev, true)?;
        if t_prev > t {
            return Err(Error::range("timestep", alloc::format!("t_prev {t_prev} exceeds t {t}")));
        }
        tensor::same_shape("ddim_step", z_t, eps_hat)?;
        let (a, ap) = (self.alpha_bar[t], self.alpha_bar[t_prev]);
        let dir2 = 1.0 - ap - sigma * sigma;
        if dir2 < 0.0 || sigma < 0.0 {
            return Err(Error::range(
                "sigma",
                alloc::format!("σ={sigma} leaves 1−ᾱ_prev−σ² = {dir2} < 0"),
            ));
        }
        let (sa, sb, sap, dir) = (libm::sqrt(a), libm::sqrt(1.0 - a), libm::sqrt(ap), libm::sqrt(dir2));
        let noise = if sigma > 0.0 {
            let n = noise.ok_or_else(|| Error::range("noise", "σ > 0 requires a noise tensor"))?;
            tensor::same_shape("ddim_step", z_t, n)?;
            Some(n.data())
        } else {
            None
        };
        let mut out = Vec::with_capacity(z_t.len());
        for (i, (&z, &e)) in z_t.data().iter().zip(eps_hat.data()).enumerate() {
            let (z, e) = (z as f64, e as f64);
            let x0 = (z - sb * e) / sa;
            let mut v = sap * x0 + dir * e;
            if let Some(n) = noise {
                v += sigma * n[i] as f64;
            }
            out.push(v as f32);
        }
        Tensor::new(z_t.shape(), out)
    }
}

/// Classifier-free guidance `ε_u + w·(ε_c − ε_u)`, evaluated as
/// `(1−w)·ε_u + w·ε_c` so that `w = 0` and `w = 1` return an input exactly.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    eps_cond.zip_map(eps_uncond, "cfg_combine", |c, u| {
        ((1.0 - w) * u as f64 + w * c as f64) as f32
    })
}

/// Sampling settings: `N` DDIM steps, stochasticity and guidance weight.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub guidance: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            eta: 0.0,
            guidance: 7.5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > timesteps {
            return Err(Error::Config(alloc::format!(
                "steps must be in 1..={timesteps}, got {}",
                self.steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(alloc::format!("eta {} outside [0, 1]", self.eta)));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::Config(alloc::format!("guidance {} must be >= 0", self.guidance)));
        }
        Ok(())
    }

    /// Evenly spaced `τ_0 = T > τ_1 > … > τ_N = 0`, length `N + 1`.
    pub fn timesteps(&self, timesteps: usize) -> Result<Vec<usize>> {
        self.validate(timesteps)?;
        let n = self.steps;
        Ok((0..=n).map(|i| timesteps * (n - i) / n).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use alloc::vec;

    #[test]
    fn long_schedule_ends_near_zero() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        // direct product oracle
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 0.01);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn invalid_schedules() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn add_noise_limits_and_oracle() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let mut r = RngStream::new(1, 0);
        let z0 = r.gaussian(&[2, 3, 4]);
        let eps = r.gaussian(&[2, 3, 4]);
        assert!(s.add_noise_at(&z0, &eps, 0).unwrap().bit_eq(&z0));
        let zero = Tensor::zeros(&[2, 3, 4]);
        let only = s.add_noise(&zero, &eps, 300).unwrap();
        let sb = (1.0 - s.alpha_bar(300)).sqrt();
        for (o, e) in only.data().iter().zip(eps.data()) {
            assert_eq!(*o, (sb * *e as f64) as f32);
        }
        let t = 500;
        let out = s.add_noise(&z0, &eps, t).unwrap();
        let a = s.alpha_bar(t);
        for i in 0..z0.len() {
            let oracle = a.sqrt() * z0.data()[i] as f64 + (1.0 - a).sqrt() * eps.data()[i] as f64;
            assert!((out.data()[i] as f64 - oracle).abs() < 1e-6);
        }
        assert!(s.add_noise(&z0, &eps, 0).is_err());
        assert!(s.add_noise(&z0, &eps, 1001).is_err());
    }

    #[test]
    fn ddim_inverts_forward_noise() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let mut r = RngStream::new(2, 0);
        let z0 = r.gaussian(&[4, 4]);
        let eps = r.gaussian(&[4, 4]);
        let zt = s.add_noise(&z0, &eps, 400).unwrap();
        let back = s.ddim_step(&zt, &eps, 400, 0, 0.0, None).unwrap();
        assert!(back.max_abs_diff(&z0).unwrap() < 1e-5);
        let same = s.ddim_step(&zt, &eps, 400, 400, 0.0, None).unwrap();
        assert!(same.max_abs_diff(&zt).unwrap() < 1e-5);
    }

    #[test]
    fn ddim_matches_scalar_formula() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let mut r = RngStream::new(3, 0);
        let (z, e, n) = (r.gaussian(&[3, 5]), r.gaussian(&[3, 5]), r.gaussian(&[3, 5]));
        let (t, tp, eta) = (600, 560, 0.7);
        let out = s.ddim_step(&z, &e, t, tp, eta, Some(&n)).unwrap();
        let (a, ap) = (s.alpha_bar(t), s.alpha_bar(tp));
        let sigma = eta * ((1.0 - ap) / (1.0 - a)).sqrt() * (1.0 - a / ap).sqrt();
        for i in 0..z.len() {
            let (zi, ei, ni) = (z.data()[i] as f64, e.data()[i] as f64, n.data()[i] as f64);
            let x0 = (zi - (1.0 - a).sqrt() * ei) / a.sqrt();
            let o = ap.sqrt() * x0 + (1.0 - ap - sigma * sigma).sqrt() * ei + sigma * ni;
            assert!((out.data()[i] as f64 - o).abs() < 1e-6);
        }
    }

    #[test]
    fn ddim_errors() {
        let s = NoiseSchedule::linear(100, 1e-3, 2e-2).unwrap();
        let z = Tensor::zeros(&[2]);
        assert!(s.ddim_step(&z, &z, 10, 20, 0.0, None).is_err());
        assert!(s.ddim_step_with_sigma(&z, &z, 50, 10, 2.0, Some(&z)).is_err());
        // σ > 0 without noise
        assert!(s.ddim_step(&z, &z, 50, 10, 1.0, None).is_err());
    }

    #[test]
    fn guidance_endpoints_and_oracle() {
        let mut r = RngStream::new(4, 0);
        let c = r.gaussian(&[64]);
        let u = r.gaussian(&[64]);
        assert!(cfg_combine(&c, &u, 1.0).unwrap().bit_eq(&c));
        assert!(cfg_combine(&c, &u, 0.0).unwrap().bit_eq(&u));
        let g = cfg_combine(&c, &u, 7.5).unwrap();
        for i in 0..64 {
            let (ci, ui) = (c.data()[i] as f64, u.data()[i] as f64);
            assert!((g.data()[i] as f64 - (ui + 7.5 * (ci - ui))).abs() < 1e-6);
        }
    }

    #[test]
    fn timestep_plan() {
        let plan = SamplerConfig::default().timesteps(1000).unwrap();
        assert_eq!(plan.len(), 26);
        assert_eq!(plan[0], 1000);
        assert_eq!(plan[1], 960);
        assert_eq!(*plan.last().unwrap(), 0);
        assert!(plan.windows(2).all(|w| w[0] > w[1]));
        let odd = SamplerConfig { steps: 7, ..Default::default() }.timesteps(50).unwrap();
        assert!(odd.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(odd, vec![50, 42, 35, 28, 21, 14, 7, 0]);
        assert!(SamplerConfig { steps: 0, ..Default::default() }.timesteps(10).is_err());
    }
}

//! EDM-style diffusion math: loss weighting, log-normal noise-level
//! sampling, the rho-spaced sigma ladder, a deterministic Heun sampler and
//! classifier-free guidance.
//!
//! Nothing here learns. Denoisers are supplied through the [`Denoiser`]
//! trait; [`GaussianOracleDenoiser`] is the exact minimizer of the
//! denoising loss for Gaussian data and serves as the reference model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_GUIDANCE_SCALE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdmConfig {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
}

impl Default for EdmConfig {
    fn default() -> Self {
        Self { sigma_data: 0.5, p_mean: -1.2, p_std: 1.2, sigma_min: 0.002, sigma_max: 80.0, rho: 7.0, steps: 30 }
    }
}

impl EdmConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.sigma_data, self.p_mean, self.p_std, self.sigma_min, self.sigma_max, self.rho]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("EDM config values must be finite".into()));
        }
        if self.sigma_data <= 0.0 || self.p_std <= 0.0 || self.rho <= 0.0 {
            return Err(Error::InvalidInput("sigma_data, p_std and rho must be positive".into()));
        }
        if !(0.0 < self.sigma_min && self.sigma_min < self.sigma_max) {
            return Err(Error::InvalidInput(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidInput("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Descending noise levels, `steps + 1` long, ending in 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        let ok = sigmas.len() >= 2
            && sigmas.last() == Some(&0.0)
            && sigmas.windows(2).all(|w| w[0] > w[1])
            && sigmas.iter().all(|s| s.is_finite());
        if !ok {
            return Err(Error::InvalidInput("schedule must be finite, strictly decreasing and end in 0".into()));
        }
        Ok(Self { sigmas })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }
}

/// `sigma_i = (max^(1/rho) + i/(steps-1) * (min^(1/rho) - max^(1/rho)))^rho`
/// for `i < steps`, then 0. Endpoints are set exactly; a single step gives
/// `[sigma_max, 0]`.
pub fn build_schedule(cfg: &EdmConfig) -> Result<NoiseSchedule> {
    cfg.validate()?;
    let n = cfg.steps;
    let mut sigmas = Vec::with_capacity(n + 1);
    if n == 1 {
        sigmas.push(cfg.sigma_max);
    } else {
        let inv = 1.0 / cfg.rho;
        let (hi, lo) = (cfg.sigma_max.powf(inv), cfg.sigma_min.powf(inv));
        sigmas.push(cfg.sigma_max);
        for i in 1..n - 1 {
            let t = i as f64 / (n - 1) as f64;
            sigmas.push((hi + t * (lo - hi)).powf(cfg.rho));
        }
        sigmas.push(cfg.sigma_min);
    }
    sigmas.push(0.0);
    NoiseSchedule::new(sigmas)
}

/// `ln(sigma) ~ N(p_mean, p_std^2)`.
pub fn sample_sigma(rng: &mut Rng, cfg: &EdmConfig) -> f64 {
    (cfg.p_mean + cfg.p_std * rng.standard_normal()).exp()
}

/// Loss weight `(sigma^2 + sigma_data^2) / (sigma * sigma_data)^2`.
pub fn lambda_weight(sigma: f64, cfg: &EdmConfig) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    let sd2 = cfg.sigma_data * cfg.sigma_data;
    Ok((sigma * sigma + sd2) / (sigma * sigma * sd2))
}

/// A denoiser maps a noisy state at noise level `sigma` to an estimate of the
/// clean state. `C` is an opaque conditioning payload.
pub trait Denoiser<C: ?Sized = ()> {
    fn denoise(&self, x: &[f64], sigma: f64, condition: &C) -> Vec<f64>;
}

impl<C: ?Sized, F: Fn(&[f64], f64, &C) -> Vec<f64>> Denoiser<C> for F {
    fn denoise(&self, x: &[f64], sigma: f64, condition: &C) -> Vec<f64> {
        self(x, sigma, condition)
    }
}

/// Exact posterior mean for `x0 ~ N(mean, diag(cov_diag))`:
/// `mean + cov / (cov + sigma^2) * (x - mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracleDenoiser {
    mean: Vec<f64>,
    cov_diag: Vec<f64>,
}

impl GaussianOracleDenoiser {
    pub fn new(mean: Vec<f64>, cov_diag: Vec<f64>) -> Result<Self> {
        if mean.len() != cov_diag.len() || mean.is_empty() {
            return Err(Error::InvalidInput("mean and covariance must have equal nonzero length".into()));
        }
        if cov_diag.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput("covariance diagonal must be positive".into()));
        }
        Ok(Self { mean, cov_diag })
    }

    /// Zero mean, isotropic variance `sigma_data^2`.
    pub fn isotropic(dim: usize, sigma_data: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![sigma_data * sigma_data; dim])
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov_diag(&self) -> &[f64] {
        &self.cov_diag
    }
}

impl<C: ?Sized> Denoiser<C> for GaussianOracleDenoiser {
    fn denoise(&self, x: &[f64], sigma: f64, _: &C) -> Vec<f64> {
        let s2 = sigma * sigma;
        x.iter().zip(&self.mean).zip(&self.cov_diag).map(|((&x, &m), &v)| m + v / (v + s2) * (x - m)).collect()
    }
}

/// `D(x, sigma) = a * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDenoiser {
    pub a: f64,
}

impl<C: ?Sized> Denoiser<C> for LinearDenoiser {
    fn denoise(&self, x: &[f64], _: f64, _: &C) -> Vec<f64> {
        x.iter().map(|v| self.a * v).collect()
    }
}

/// Ignores its input and returns a fixed state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantDenoiser {
    pub target: Vec<f64>,
}

impl<C: ?Sized> Denoiser<C> for ConstantDenoiser {
    fn denoise(&self, _: &[f64], _: f64, _: &C) -> Vec<f64> {
        self.target.clone()
    }
}

/// `d_uncond + w * (d_cond - d_uncond)`, evaluated as
/// `w * d_cond + (1 - w) * d_uncond` so that `w = 1` and `w = 0` return the
/// respective input exactly.
pub fn cfg_combine(d_cond: &[f64], d_uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    if d_cond.len() != d_uncond.len() {
        return Err(Error::InvalidInput(format!(
            "guidance inputs differ in length: {} vs {}",
            d_cond.len(),
            d_uncond.len()
        )));
    }
    Ok(d_cond.iter().zip(d_uncond).map(|(&c, &u)| w * c + (1.0 - w) * u).collect())
}

/// Classifier-free guidance around a conditional denoiser. The unconditional
/// branch evaluates the same model with `uncond` as its condition.
#[derive(Debug, Clone)]
pub struct Guided<D, C> {
    pub inner: D,
    pub uncond: C,
    pub scale: f64,
}

impl<C, D: Denoiser<C>> Denoiser<C> for Guided<D, C> {
    fn denoise(&self, x: &[f64], sigma: f64, condition: &C) -> Vec<f64> {
        let c = self.inner.denoise(x, sigma, condition);
        let u = self.inner.denoise(x, sigma, &self.uncond);
        cfg_combine(&c, &u, self.scale).expect("denoiser outputs share the input shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossTerm {
    /// `|x0 - D(x0 + n, sigma)|^2` for one noise draw.
    pub per_sample_loss: f64,
    /// `lambda(sigma) / exp(u(sigma)) * per_sample_loss + u(sigma)`.
    pub objective: f64,
}

/// One Monte Carlo term of the weighted denoising objective. `x0` is an
/// already-encoded latent; the noise `n ~ N(0, sigma^2 I)` comes from `rng`.
pub fn weighted_loss<C: ?Sized, D: Denoiser<C> + ?Sized>(
    denoiser: &D,
    x0: &[f64],
    condition: &C,
    sigma: f64,
    u_of_sigma: impl Fn(f64) -> f64,
    cfg: &EdmConfig,
    rng: &mut Rng,
) -> Result<LossTerm> {
    let lambda = lambda_weight(sigma, cfg)?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("x0 must be finite".into()));
    }
    let noisy: Vec<f64> = x0.iter().map(|&v| v + sigma * rng.standard_normal()).collect();
    let out = denoiser.denoise(&noisy, sigma, condition);
    if out.len() != x0.len() || out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("denoiser returned a non-finite or misshapen output at sigma {sigma}")));
    }
    let per_sample_loss = x0.iter().zip(&out).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let u = u_of_sigma(sigma);
    Ok(LossTerm { per_sample_loss, objective: lambda / u.exp() * per_sample_loss + u })
}

/// Loss of [`LinearDenoiser`] `a` for a fixed noise draw:
/// `|x0 - a (x0 + n)|^2`.
pub fn linear_loss(a: f64, x0: &[f64], noise: &[f64]) -> f64 {
    x0.iter().zip(noise).map(|(&x, &n)| (x - a * (x + n)).powi(2)).sum()
}

/// Symmetric difference quotient `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub analytic: f64,
    pub finite_difference: f64,
}

impl GradCheck {
    /// Agreement within `max(1e-6, 1e-4 |g|)`.
    pub fn agrees(&self) -> bool {
        (self.analytic - self.finite_difference).abs() <= f64::max(1e-6, 1e-4 * self.analytic.abs())
    }
}

/// d/da of [`linear_loss`]: `-2 (x0 + n)^T (x0 - a (x0 + n))`, next to its
/// central finite difference with step `h`.
pub fn loss_grad_fd_check(a: f64, x0: &[f64], noise: &[f64], h: f64) -> Result<GradCheck> {
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("step must be positive, got {h}")));
    }
    if x0.len() != noise.len() {
        return Err(Error::InvalidInput("x0 and noise differ in length".into()));
    }
    let analytic = -2.0 * x0.iter().zip(noise).map(|(&x, &n)| (x + n) * (x - a * (x + n))).sum::<f64>();
    let finite_difference = central_difference(|a| linear_loss(a, x0, noise), a, h);
    Ok(GradCheck { analytic, finite_difference })
}

/// Deterministic Heun integration of the probability-flow ODE from
/// `x_init` (already at noise level `sigma_max`). The final step into
/// `sigma = 0` is a plain Euler step.
pub fn heun_integrate<C: ?Sized, D: Denoiser<C> + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    condition: &C,
    x_init: Vec<f64>,
) -> Result<Vec<f64>> {
    let mut x = x_init;
    let slope = |x: &[f64], sigma: f64, step: usize| -> Result<Vec<f64>> {
        let d = denoiser.denoise(x, sigma, condition);
        if d.len() != x.len() {
            return Err(Error::Numerical(format!("denoiser changed the state shape at step {step}")));
        }
        Ok(x.iter().zip(&d).map(|(a, b)| (a - b) / sigma).collect())
    };
    for (i, w) in schedule.sigmas().windows(2).enumerate() {
        let (s_cur, s_next) = (w[0], w[1]);
        let dt = s_next - s_cur;
        let d = slope(&x, s_cur, i)?;
        let euler: Vec<f64> = x.iter().zip(&d).map(|(x, d)| x + dt * d).collect();
        x = if s_next == 0.0 {
            euler
        } else {
            let d2 = slope(&euler, s_next, i)?;
            x.iter().zip(d.iter().zip(&d2)).map(|(x, (a, b))| x + dt * 0.5 * (a + b)).collect()
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("state became non-finite at step {i}")));
        }
    }
    Ok(x)
}

/// Draws `x ~ N(0, sigma_max^2 I)` of length `dim` and integrates it down to 0.
pub fn heun_sample<C: ?Sized, D: Denoiser<C> + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    condition: &C,
    rng: &mut Rng,
    dim: usize,
) -> Result<Vec<f64>> {
    let init = rng.normal_vec(dim, schedule.sigma_max());
    heun_integrate(denoiser, schedule, condition, init)
}

/// `n` independent samples; sample `i` uses substream `i` of `seed`, so the
/// output does not depend on thread count.
pub fn heun_sample_batch<C, D>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    condition: &C,
    seed: u64,
    n: usize,
    dim: usize,
) -> Result<Vec<Vec<f64>>>
where
    C: Sync + ?Sized,
    D: Denoiser<C> + Sync + ?Sized,
{
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = Rng::with_stream(seed, i as u64);
            heun_sample(denoiser, schedule, condition, &mut rng, dim)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleMoments {
    pub n: usize,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub max_abs_offdiag_cov: f64,
}

pub fn sample_moments(samples: &[Vec<f64>]) -> Result<SampleMoments> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::insufficient("need at least two samples"));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::InvalidInput("samples differ in dimension".into()));
    }
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; dim * dim];
    for s in samples {
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += (s[i] - mean[i]) * (s[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let variance = (0..dim).map(|i| cov[i * dim + i]).collect();
    let max_abs_offdiag_cov = (0..dim)
        .flat_map(|i| (0..dim).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| cov[i * dim + j].abs())
        .fold(0.0, f64::max);
    Ok(SampleMoments { n, dim, mean, variance, max_abs_offdiag_cov })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Self-checks of the weighting, sampling and loss formulas, as run by
/// `geocond edm check`.
pub fn diagnostics(cfg: &EdmConfig, seed: u64) -> Result<Vec<CheckOutcome>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut check = |name, passed, detail: String| out.push(CheckOutcome { name, passed, detail });

    let sd = cfg.sigma_data;
    let at_sd = lambda_weight(sd, cfg)?;
    let expect = 2.0 / (sd * sd);
    check("lambda_at_sigma_data", at_sd == expect, format!("lambda({sd}) = {at_sd}, expected {expect}"));

    let grid: Vec<f64> = (0..1000).map(|i| (sd.ln() - 5.0 + 10.0 * i as f64 / 999.0).exp()).collect();
    let lambdas = grid.iter().map(|&s| lambda_weight(s, cfg)).collect::<Result<Vec<_>>>()?;
    let decreasing = lambdas.windows(2).all(|w| w[0] > w[1]) && lambdas.iter().all(|&l| l > 0.0);
    let split = grid
        .iter()
        .zip(&lambdas)
        .map(|(&s, &l)| ((l - (1.0 / (sd * sd) + 1.0 / (s * s))) / l).abs())
        .fold(0.0, f64::max);
    check(
        "lambda_positive_and_decreasing",
        decreasing && split <= 1e-12,
        format!("max relative gap to 1/sigma_data^2 + 1/sigma^2: {split:e}"),
    );

    let tail = lambda_weight(1e6, cfg)? * sd * sd;
    check("lambda_large_sigma_limit", (tail - 1.0).abs() <= 1e-6, format!("lambda(1e6) * sigma_data^2 = {tail}"));

    let mut rng = Rng::new(seed);
    let n = 100_000;
    let logs: Vec<f64> = (0..n).map(|_| sample_sigma(&mut rng, cfg).ln()).collect();
    let mean = logs.iter().sum::<f64>() / n as f64;
    let std = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    check(
        "log_sigma_moments",
        (mean - cfg.p_mean).abs() <= 0.02 && (std - cfg.p_std).abs() <= 0.02,
        format!("mean {mean:.4} std {std:.4}"),
    );

    let x0 = rng.normal_vec(64, sd);
    let noise = rng.normal_vec(64, 0.1);
    let grad = loss_grad_fd_check(0.7, &x0, &noise, 1e-4)?;
    check("linear_loss_gradient", grad.agrees(), format!("analytic {} fd {}", grad.analytic, grad.finite_difference));

    let schedule = build_schedule(cfg)?;
    let s = schedule.sigmas();
    check(
        "schedule_endpoints",
        s[0] == cfg.sigma_max && s[s.len() - 1] == 0.0 && s.len() == cfg.steps + 1,
        format!("{} levels from {} to {}", s.len(), s[0], s[s.len() - 1]),
    );
    Ok(out)
}

//! Noise schedule, loss weighting and deterministic sampling, driven by a
//! closed-form Gaussian denoiser in place of a trained network.
//!
//! cargo run --example edm_sampling

use geocond::edm::{
    build_schedule, heun_sample_batch, lambda_weight, sample_moments, sample_sigma, Denoiser, EdmConfig,
    GaussianOracleDenoiser, Guided,
};
use geocond::rng::Rng;

fn main() -> geocond::Result<()> {
    let cfg = EdmConfig::default();
    let schedule = build_schedule(&cfg)?;
    let s = schedule.sigmas();
    println!("{} steps: {:.3} {:.3} {:.3} ... {:.4} {:.4} {}", schedule.steps(), s[0], s[1], s[2], s[28], s[29], s[30]);

    for sigma in [0.01, 0.1, 0.5, 2.0, 80.0] {
        println!("loss weight at sigma {sigma:>5}: {:.4}", lambda_weight(sigma, &cfg)?);
    }
    let mut rng = Rng::new(1);
    let logs: Vec<f64> = (0..20_000).map(|_| sample_sigma(&mut rng, &cfg).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    println!("training noise levels: mean ln sigma {mean:.3} (target {})", cfg.p_mean);

    let data = GaussianOracleDenoiser::new(vec![1.0, -0.5, 0.0], vec![0.04, 0.25, 1.0])?;
    let samples = heun_sample_batch(&data, &schedule, &(), 3, 4000, 3)?;
    let m = sample_moments(&samples)?;
    println!("\nunguided samples: mean {:.3?} variance {:.3?}", m.mean, m.variance);
    println!("target:           mean {:.3?} variance {:.3?}", data.mean(), data.cov_diag());

    // one model, two conditions: the class picks the mean
    let model = |x: &[f64], sigma: f64, class: &bool| {
        let mean = if *class { [1.0, 1.0, 1.0] } else { [0.0, 0.0, 0.0] };
        GaussianOracleDenoiser::new(mean.to_vec(), vec![0.25; 3]).unwrap().denoise(x, sigma, &())
    };
    for scale in [1.0, 2.0] {
        let guided = Guided { inner: model, uncond: false, scale };
        let samples = heun_sample_batch(&guided, &schedule, &true, 5, 4000, 3)?;
        println!("guidance {scale}: sample mean {:.3?}", sample_moments(&samples)?.mean);
    }
    Ok(())
}

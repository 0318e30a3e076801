use maskctl_core::diffusion_core::{
    ddim_sample, ddim_timesteps, ddpm_sample, ddpm_step, forward_diffuse, NoiseSchedule, DEFAULT_BETA_END,
    DEFAULT_BETA_START, DEFAULT_STEPS,
};
use maskctl_core::seeding::{rng_for, stream};
use maskctl_tensor::Tensor;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn single_step(alpha_bar: f64) -> NoiseSchedule {
    NoiseSchedule {
        betas: vec![1.0 - alpha_bar],
        alphas: vec![alpha_bar],
        alpha_bars: vec![alpha_bar],
    }
}

#[test]
fn alpha_bars_match_independent_products() {
    let s = NoiseSchedule::default();
    let t_max = DEFAULT_STEPS;
    for t in [0, 1, 37, 199, t_max - 1] {
        let mut prod = 1.0;
        for i in 0..=t {
            let beta = DEFAULT_BETA_START + (DEFAULT_BETA_END - DEFAULT_BETA_START) * i as f64 / (t_max - 1) as f64;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bars[t] - prod).abs() <= 1e-12, "t={t}: {} vs {prod}", s.alpha_bars[t]);
    }
    assert!((s.betas[0] - DEFAULT_BETA_START).abs() < 1e-15);
    assert!((s.betas[t_max - 1] - DEFAULT_BETA_END).abs() < 1e-15);
}

#[test]
fn forward_diffuse_closed_form_probe() {
    let z0 = Tensor::<f64>::full(&[1, 1, 1, 1], 1.0);
    let eps = Tensor::<f64>::full(&[1, 1, 1, 1], 1.0);
    let z = forward_diffuse(&z0, &[0], &eps, &single_step(0.25)).unwrap();
    assert!((z.item() - (0.5 + 0.75f64.sqrt())).abs() < 1e-12);
    assert!((z.item() - 1.366_025_403_784_438_6).abs() < 1e-12);
}

#[test]
fn forward_diffuse_moments_match_marginal() {
    let s = NoiseSchedule::default();
    let t = 150;
    let ab = s.alpha_bars[t];
    let shape = [8, 1, 32, 32];
    let n = 8 * 32 * 32;
    let z0 = Tensor::<f64>::full(&shape, 2.0);
    let eps = Tensor::<f32>::randn(&shape, &mut rng_for(5, stream::BATCH, 0)).cast::<f64>();
    let z = forward_diffuse(&z0, &[t; 8], &eps, &s).unwrap();
    let mean = z.mean();
    let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = (1.0 - ab).sqrt();
    assert!((mean - 2.0 * ab.sqrt()).abs() < 4.5 * sd / (n as f64).sqrt(), "mean {mean}");
    // Two-sided 99.99% interval for the sample variance of a normal sample.
    let chi = ChiSquared::new((n - 1) as f64).unwrap();
    let (lo, hi) = (chi.inverse_cdf(5e-5), chi.inverse_cdf(1.0 - 5e-5));
    let scaled = var * (n - 1) as f64 / (1.0 - ab);
    assert!(lo < scaled && scaled < hi, "variance {var} vs {}", 1.0 - ab);
}

#[test]
fn ddpm_step_matches_posterior_formula() {
    let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
    let t = 6;
    let (z, e, n) = (0.7f64, 0.2f64, -0.5f64);
    let ab_prev: f64 = (0..t).map(|i| 1.0 - s.betas[i]).product();
    let ab = ab_prev * (1.0 - s.betas[t]);
    let beta = s.betas[t];
    let mean = (z - beta / (1.0 - ab).sqrt() * e) / (1.0 - beta).sqrt();
    let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
    let expected = mean + var.sqrt() * n;
    let one = |v: f64| Tensor::<f32>::full(&[1, 1, 1, 1], v as f32);
    let got = ddpm_step(&one(z), &one(e), t, &s, &one(n)).unwrap().item() as f64;
    assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    // At t = 0 the noise is ignored.
    let zero = ddpm_step(&one(z), &one(e), 0, &s, &one(n)).unwrap();
    let zero_noise = ddpm_step(&one(z), &one(e), 0, &s, &one(0.0)).unwrap();
    assert_eq!(zero, zero_noise);
}

/// With the exact noise predictor for data concentrated at `c`, both
/// samplers land on `c`.
#[test]
fn samplers_recover_point_mass_with_ideal_predictor() {
    let s = NoiseSchedule::linear(60, 1e-4, 0.05).unwrap();
    let c = 0.3f64;
    let ideal = |z: &Tensor<f32>, t: usize| {
        let ab = s.alpha_bars[t];
        Ok(z.map(|v| ((v as f64 - ab.sqrt() * c) / (1.0 - ab).sqrt()) as f32))
    };
    let shape = [2, 4, 4];
    let ddim = ddim_sample(ideal, &shape, &s, 12, 0.0, &[1, 2]).unwrap();
    let ddpm = ddpm_sample(ideal, &shape, &s, &[1, 2]).unwrap();
    for z in [ddim, ddpm] {
        let worst = z.data().iter().map(|&v| (v as f64 - c).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-4, "max deviation {worst}");
    }
}

#[test]
fn sample_depends_only_on_its_own_seed() {
    let s = NoiseSchedule::linear(20, 1e-4, 0.05).unwrap();
    let eps = |z: &Tensor<f32>, _t: usize| Ok(z.scale(0.5));
    let shape = [1, 4, 4];
    let pair = ddim_sample(eps, &shape, &s, 5, 1.0, &[5, 9]).unwrap();
    let alone = ddim_sample(eps, &shape, &s, 5, 1.0, &[9]).unwrap();
    assert_eq!(pair.batch_item(1), alone.batch_item(0));
    let pair = ddpm_sample(eps, &shape, &s, &[5, 9]).unwrap();
    let alone = ddpm_sample(eps, &shape, &s, &[9]).unwrap();
    assert_eq!(pair.batch_item(1), alone.batch_item(0));
}

#[test]
fn ddim_rejects_bad_eta() {
    let s = NoiseSchedule::linear(20, 1e-4, 0.05).unwrap();
    let eps = |z: &Tensor<f32>, _t: usize| Ok(z.clone());
    assert!(ddim_sample(eps, &[1, 2, 2], &s, 5, 1.5, &[0]).is_err());
}

proptest! {
    #[test]
    fn schedule_is_monotone_and_bounded(
        steps in 2usize..600,
        start in 1e-5f64..1e-2,
        span in 1e-4f64..0.3,
    ) {
        let s = NoiseSchedule::linear(steps, start, start + span).unwrap();
        prop_assert_eq!(s.alpha_bars.len(), steps);
        prop_assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.alpha_bars.iter().all(|&a| 0.0 < a && a < 1.0));
        prop_assert!((1..steps).all(|t| s.posterior_variance(t) <= s.betas[t] + 1e-15));
    }

    #[test]
    fn ddim_timesteps_cover_the_schedule(total in 1usize..500, frac in 0.0f64..1.0) {
        let steps = 1 + ((total - 1) as f64 * frac) as usize;
        let ts = ddim_timesteps(total, steps).unwrap();
        prop_assert_eq!(ts.len(), steps);
        prop_assert_eq!(*ts.last().unwrap(), total - 1);
        prop_assert!(ts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn forward_diffuse_is_affine_in_its_inputs(z in -3.0f64..3.0, e in -3.0f64..3.0, t in 0usize..400) {
        let s = NoiseSchedule::default();
        let one = |v: f64| Tensor::<f64>::full(&[1, 1, 1, 1], v);
        let out = forward_diffuse(&one(z), &[t], &one(e), &s).unwrap().item();
        let ab = s.alpha_bars[t];
        prop_assert!((out - (ab.sqrt() * z + (1.0 - ab).sqrt() * e)).abs() < 1e-12);
    }
}

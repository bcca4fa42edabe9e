use cfgcd_autodiff::Tensor;
use cfgcd_schedules::NoiseSchedule;
use cfgcd_toyworld::{analytic_denoiser, Gaussian, ToyWorld, WorldConfig, WorldError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::vp_linear(1000, 1e-4, 0.02).unwrap()
}

/// Self-normalized importance sampling of `E[x0 | z_t]` with prior proposals.
/// Returns the estimate and its delta-method standard error per dimension.
fn monte_carlo_posterior_mean(g: &ToyWorld, z: &[f64], a: f64, draws: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = z.len();
    let xs = g.sample(&mut rng, &vec![0; draws]).unwrap();
    let logw: Vec<f64> = (0..draws)
        .map(|r| {
            let x = xs.row(r);
            -(0..d).map(|i| (z[i] - a.sqrt() * x[i]).powi(2)).sum::<f64>() / (2.0 * (1.0 - a))
        })
        .collect();
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let sw: f64 = w.iter().sum();
    let est: Vec<f64> = (0..d).map(|i| (0..draws).map(|r| w[r] * xs.get(r, i)).sum::<f64>() / sw).collect();
    let se = (0..d)
        .map(|i| {
            let v: f64 = (0..draws).map(|r| (w[r] * (xs.get(r, i) - est[i])).powi(2)).sum();
            v.sqrt() / sw
        })
        .collect();
    (est, se)
}

#[test]
fn matches_monte_carlo_posterior_mean() {
    let world = ToyWorld::generate(WorldConfig::single_gaussian(3), 4).unwrap();
    let g = world.class_gaussian(0).unwrap();
    let sched = schedule();
    let t = 0.35;
    let a = sched.alpha_bar(t);
    let z = vec![0.4, -0.2, 0.9];
    let post = analytic_denoiser(&Tensor::from_rows(&[z.clone()]).unwrap(), &[t], &g, &sched).unwrap();
    let (est, se) = monte_carlo_posterior_mean(&world, &z, a, 1_000_000, 9);
    for i in 0..3 {
        let diff = (post.x0.get(0, i) - est[i]).abs();
        assert!(diff < 3.0 * se[i], "dim {i}: exact {} mc {} se {}", post.x0.get(0, i), est[i], se[i]);
    }
}

#[test]
fn isotropic_closed_form() {
    // Sigma = s^2 I gives a scalar shrinkage factor.
    let s2 = 0.49;
    let mu = vec![1.0, -2.0];
    let g = Gaussian::new(mu.clone(), vec![s2, 0.0, 0.0, s2]).unwrap();
    let sched = schedule();
    let z = Tensor::from_rows(&[vec![0.3, 0.1], vec![-1.0, 2.0]]).unwrap();
    let t = [0.2, 0.8];
    let post = analytic_denoiser(&z, &t, &g, &sched).unwrap();
    for r in 0..2 {
        let a = sched.alpha_bar(t[r]);
        let k = a.sqrt() * s2 / (a * s2 + 1.0 - a);
        for i in 0..2 {
            let x0 = mu[i] + k * (z.get(r, i) - a.sqrt() * mu[i]);
            let eps = (z.get(r, i) - a.sqrt() * x0) / (1.0 - a).sqrt();
            assert!((post.x0.get(r, i) - x0).abs() < 1e-12);
            assert!((post.eps.get(r, i) - eps).abs() < 1e-10);
        }
    }
}

#[test]
fn rejects_bad_inputs() {
    assert!(matches!(
        Gaussian::new(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0]),
        Err(WorldError::DegenerateCovariance(_))
    ));
    assert!(Gaussian::new(vec![0.0], vec![1.0, 0.0]).is_err());
    let g = Gaussian::new(vec![0.0], vec![1.0]).unwrap();
    let z = Tensor::from_rows(&[vec![0.1, 0.2]]).unwrap();
    assert!(analytic_denoiser(&z, &[0.5], &g, &schedule()).is_err());
    let z = Tensor::from_rows(&[vec![0.1]]).unwrap();
    assert!(analytic_denoiser(&z, &[0.0], &g, &schedule()).is_err());
    assert!(analytic_denoiser(&z, &[0.5, 0.6], &g, &schedule()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Under N(0,I) data the noisy marginal is N(0,I), so the posterior mean
    /// is sqrt(a) z and the noise prediction is sqrt(1-a) z.
    #[test]
    fn standard_normal_prior(z0 in -3.0..3.0f64, z1 in -3.0..3.0f64, t in 0.01..1.0f64) {
        let g = Gaussian::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let sched = schedule();
        let a = sched.alpha_bar(t);
        let post = analytic_denoiser(&Tensor::from_rows(&[vec![z0, z1]]).unwrap(), &[t], &g, &sched).unwrap();
        for (i, z) in [z0, z1].into_iter().enumerate() {
            prop_assert!((post.x0.get(0, i) - a.sqrt() * z).abs() < 1e-10);
            prop_assert!((post.eps.get(0, i) - (1.0 - a).sqrt() * z).abs() < 1e-10);
        }
    }

    /// Reconstructing z_t from the two predictions is exact.
    #[test]
    fn predictions_are_consistent(seed in 0u64..1000, t in 0.01..1.0f64) {
        let world = ToyWorld::generate(WorldConfig::single_gaussian(4), seed).unwrap();
        let g = world.class_gaussian(0).unwrap();
        let sched = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let post = analytic_denoiser(&Tensor::from_rows(&[z.clone()]).unwrap(), &[t], &g, &sched).unwrap();
        let a = sched.alpha_bar(t);
        for i in 0..4 {
            let back = a.sqrt() * post.x0.get(0, i) + (1.0 - a).sqrt() * post.eps.get(0, i);
            prop_assert!((back - z[i]).abs() < 1e-9);
        }
    }
}

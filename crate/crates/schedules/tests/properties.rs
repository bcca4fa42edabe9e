use cfgcd_schedules::{karras_sigmas, NoiseSchedule};
use proptest::prelude::*;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::vp_linear(1000, 1e-4, 0.02).unwrap()
}

proptest! {
    #[test]
    fn snr_times_noise_variance_over_alpha_bar_is_one(i in 1usize..=1000) {
        let s = schedule();
        let t = i as f64 / 1000.0;
        let var = s.noise_std(t).powi(2);
        let lhs = s.snr(t) * var / s.alpha_bar(t);
        prop_assert!((lhs - 1.0).abs() < 1e-12, "{}", lhs);
        prop_assert!((s.snr(t) * s.sigma(t).powi(2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigma_round_trip(t in 0.0f64..=1.0) {
        let s = schedule();
        let back = s.t_of_sigma(s.sigma(t)).unwrap();
        prop_assert!((back - t).abs() < 1e-10, "{} -> {}", t, back);
    }

    #[test]
    fn snr_strictly_decreasing(a in 1e-4f64..1.0, b in 1e-4f64..1.0) {
        prop_assume!((a - b).abs() > 1e-9);
        let s = schedule();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(s.snr(lo) > s.snr(hi));
        prop_assert!(s.sigma(lo) < s.sigma(hi));
    }

    #[test]
    fn karras_strictly_descending(smax in 1.0f64..200.0, frac in 0.0f64..0.9, n in 1usize..40, rho in 0.5f64..10.0) {
        let s = karras_sigmas(smax, smax * frac, n, rho).unwrap();
        prop_assert_eq!(s.len(), n + 1);
        for w in s.windows(2) {
            prop_assert!(w[0] > w[1]);
        }
    }
}

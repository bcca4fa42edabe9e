use cfgcd_autodiff::Tensor;
use cfgcd_nets::Condition;
use cfgcd_schedules::{GridKind, NoiseSchedule, TimeGrid};
use cfgcd_teacher::{
    generate_diffusion, initial_noise, solve_step, AnalyticEps, QueryCounter, SolverKind, TeacherError,
};
use cfgcd_toyworld::Gaussian;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const T_MIN: f64 = 1e-3;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::vp_linear(1000, 1e-4, 0.02).unwrap()
}

/// A random Gaussian given through its eigenbasis.
struct Problem {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    evals: Vec<f64>,
}

impl Problem {
    fn random(seed: u64, d: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let basis = g.qr().q();
        let evals = (0..d).map(|_| rng.random_range(0.05..1.0)).collect();
        let mean = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        Problem { mean, basis, evals }
    }

    fn gaussian(&self) -> Gaussian {
        let d = self.evals.len();
        let cov = &self.basis * DMatrix::from_diagonal(&DVector::from_vec(self.evals.clone())) * self.basis.transpose();
        let rows: Vec<f64> = (0..d * d).map(|k| cov[(k / d, k % d)]).collect();
        Gaussian::new(self.mean.as_slice().to_vec(), rows).unwrap()
    }

    /// Closed-form probability-flow map. With `x = z sqrt(1 + sigma^2)` the
    /// flow is linear: `x - mu` scales by `sqrt((l + s1^2) / (l + s0^2))`
    /// along each eigenvector with eigenvalue `l`.
    fn exact(&self, s: &NoiseSchedule, z: &Tensor, t0: f64, t1: f64) -> Tensor {
        let (s0, s1) = (s.sigma(t0), s.sigma(t1));
        let gain: Vec<f64> = self.evals.iter().map(|l| ((l + s1 * s1) / (l + s0 * s0)).sqrt()).collect();
        let mut out = z.clone();
        for r in 0..z.rows() {
            let x = DVector::from_row_slice(z.row(r)) * (1.0 + s0 * s0).sqrt();
            let mut c = self.basis.transpose() * (x - &self.mean);
            for (ci, g) in c.iter_mut().zip(&gain) {
                *ci *= g;
            }
            let x1 = &self.mean + &self.basis * c;
            for (o, v) in out.row_mut(r).iter_mut().zip(x1.iter()) {
                *o = v / (1.0 + s1 * s1).sqrt();
            }
        }
        out
    }
}

fn rms(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    (s / a.len() as f64).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over 20 problems of the error ratios for 8 -> 16 and 16 -> 32 steps.
fn order_ratios(kind: SolverKind) -> (f64, f64) {
    let s = schedule();
    let mut r1 = Vec::new();
    let mut r2 = Vec::new();
    for seed in 0..20 {
        let p = Problem::random(seed, 8);
        let model = AnalyticEps::single(p.gaussian(), s.clone());
        let cond = vec![Condition::Class(0); 64];
        let z_t = initial_noise(1000 + seed, 64, 8);
        let truth = p.exact(&s, &z_t, 1.0, T_MIN);
        let errs: Vec<f64> = [8, 16, 32]
            .iter()
            .map(|&n| {
                let grid = TimeGrid::build(GridKind::Uniform, n, &s, 1.0, T_MIN).unwrap();
                let (out, _) = generate_diffusion(&model, &s, kind, &grid, &cond, 1.0, 1000 + seed).unwrap();
                rms(&out, &truth)
            })
            .collect();
        r1.push(errs[0] / errs[1]);
        r2.push(errs[1] / errs[2]);
    }
    (median(r1), median(r2))
}

#[test]
fn oracle_matches_fine_integration() {
    // The closed form itself is checked against a 4096-step Heun solve.
    let s = schedule();
    let p = Problem::random(99, 4);
    let model = AnalyticEps::single(p.gaussian(), s.clone());
    let cond = vec![Condition::Class(0); 8];
    let grid = TimeGrid::build(GridKind::Uniform, 4096, &s, 1.0, T_MIN).unwrap();
    let (out, _) = generate_diffusion(&model, &s, SolverKind::Heun, &grid, &cond, 1.0, 5).unwrap();
    let truth = p.exact(&s, &initial_noise(5, 8, 4), 1.0, T_MIN);
    assert!(rms(&out, &truth) < 1e-6, "rms {}", rms(&out, &truth));
}

#[test]
fn heun_is_second_order() {
    let (a, b) = order_ratios(SolverKind::Heun);
    assert!((3.2..=5.2).contains(&a) && (3.2..=5.2).contains(&b), "ratios {a} {b}");
}

#[test]
fn euler_is_first_order() {
    let (a, b) = order_ratios(SolverKind::Euler);
    assert!((1.6..=2.6).contains(&a) && (1.6..=2.6).contains(&b), "ratios {a} {b}");
}

#[test]
fn ddim_is_first_order() {
    let (a, b) = order_ratios(SolverKind::Ddim);
    assert!((1.6..=2.6).contains(&a) && (1.6..=2.6).contains(&b), "ratios {a} {b}");
}

#[test]
fn dpmpp_2s_converges_faster_than_first_order() {
    let (a, b) = order_ratios(SolverKind::Dpmpp2s);
    assert!(a > 2.6 && b > 2.6, "ratios {a} {b}");
}

/// Mean and covariance error of a sample population against the class Gaussian.
fn moment_error(samples: &Tensor, g: &Gaussian) -> f64 {
    let n = samples.rows() as f64;
    let d = samples.cols();
    let mean: Vec<f64> = (0..d).map(|j| (0..samples.rows()).map(|i| samples.get(i, j)).sum::<f64>() / n).collect();
    let cov = g.covariance();
    let mut err: f64 = mean.iter().zip(g.mean()).map(|(a, b)| (a - b).powi(2)).sum();
    for a in 0..d {
        for b in 0..d {
            let c: f64 =
                (0..samples.rows()).map(|i| (samples.get(i, a) - mean[a]) * (samples.get(i, b) - mean[b])).sum::<f64>()
                    / n;
            err += (c - cov[a * d + b]).powi(2);
        }
    }
    err.sqrt()
}

#[test]
fn moments_improve_with_more_steps() {
    let s = schedule();
    let p = Problem::random(7, 4);
    let g = p.gaussian();
    let model = AnalyticEps::single(g.clone(), s.clone());
    let cond = vec![Condition::Class(0); 4000];
    for kind in [SolverKind::Ddim, SolverKind::Heun] {
        let err = |n| {
            let grid = TimeGrid::build(GridKind::Uniform, n, &s, 1.0, T_MIN).unwrap();
            let (out, _) = generate_diffusion(&model, &s, kind, &grid, &cond, 1.0, 3).unwrap();
            moment_error(&out, &g)
        };
        let (e8, e64) = (err(8), err(64));
        assert!(e64 < e8, "{kind}: 64 steps {e64} vs 8 steps {e8}");
    }
}

#[test]
fn generation_is_reproducible() {
    let s = schedule();
    let model = AnalyticEps::single(Problem::random(1, 3).gaussian(), s.clone());
    let cond = vec![Condition::Class(0); 10];
    let grid = TimeGrid::build(GridKind::Karras, 6, &s, 1.0, T_MIN).unwrap();
    for kind in SolverKind::ALL {
        let (a, qa) = generate_diffusion(&model, &s, kind, &grid, &cond, 1.0, 42).unwrap();
        let (b, qb) = generate_diffusion(&model, &s, kind, &grid, &cond, 1.0, 42).unwrap();
        let (c, _) = generate_diffusion(&model, &s, kind, &grid, &cond, 1.0, 43).unwrap();
        assert_eq!(a, b, "{kind}");
        assert_eq!(qa, qb);
        assert_ne!(a, c, "{kind}");
    }
}

#[test]
fn steps_must_reduce_noise() {
    let s = schedule();
    let model = AnalyticEps::single(Problem::random(1, 2).gaussian(), s.clone());
    let z = Tensor::zeros(2, 2);
    let cond = [Condition::Class(0); 2];
    let mut q = QueryCounter::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err =
        solve_step(SolverKind::Heun, &model, &s, &z, &[0.5, 0.5], &[0.6, 0.4], &cond, &[1.0; 2], &mut q, &mut rng);
    assert!(matches!(err, Err(TeacherError::InvalidStep { row: 0, .. })));
    let err =
        solve_step(SolverKind::Ddim, &model, &s, &z, &[0.5, 0.5], &[0.5, 0.4], &cond, &[1.0; 2], &mut q, &mut rng);
    assert!(matches!(err, Err(TeacherError::InvalidStep { row: 0, .. })));
    assert_eq!(q.count(), 0);
}

#[test]
fn per_row_times_match_separate_solves() {
    let s = schedule();
    let model = AnalyticEps::single(Problem::random(2, 3).gaussian(), s.clone());
    let z = initial_noise(8, 2, 3);
    let cond = [Condition::Class(0); 2];
    let (from, to) = ([0.9, 0.3], [0.7, 0.1]);
    for kind in [SolverKind::Ddim, SolverKind::Euler, SolverKind::Heun, SolverKind::Dpmpp2s] {
        let mut q = QueryCounter::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let both = solve_step(kind, &model, &s, &z, &from, &to, &cond, &[1.0; 2], &mut q, &mut rng).unwrap();
        assert_eq!(q.count(), kind.evals_per_step());
        for r in 0..2 {
            let zr = z.select_rows(&[r]);
            let one = solve_step(kind, &model, &s, &zr, &from[r..=r], &to[r..=r], &cond[..1], &[1.0], &mut q, &mut rng)
                .unwrap();
            for j in 0..3 {
                assert!((one.get(0, j) - both.get(r, j)).abs() < 1e-14, "{kind}");
            }
        }
    }
}

#[test]
fn ancestral_step_has_posterior_moments() {
    // One step from a fixed z: the sample mean and variance over many draws
    // match the small-variance posterior computed from its definition.
    let s = schedule();
    let g = Gaussian::new(vec![0.5], vec![0.2]).unwrap();
    let model = AnalyticEps::single(g, s.clone());
    let n = 20_000;
    let z = Tensor::full(n, 1, 0.3);
    let (t, tn) = (0.6, 0.4);
    let mut q = QueryCounter::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = solve_step(
        SolverKind::DdpmAncestral,
        &model,
        &s,
        &z,
        &vec![t; n],
        &vec![tn; n],
        &vec![Condition::Class(0); n],
        &vec![1.0; n],
        &mut q,
        &mut rng,
    )
    .unwrap();
    let (ab, abn) = (s.alpha_bar(t), s.alpha_bar(tn));
    let x0 = 0.5 + ab.sqrt() * 0.2 / (ab * 0.2 + 1.0 - ab) * (0.3 - ab.sqrt() * 0.5);
    let beta = 1.0 - ab / abn;
    let mean = abn.sqrt() * beta / (1.0 - ab) * x0 + (ab / abn).sqrt() * (1.0 - abn) / (1.0 - ab) * 0.3;
    let var = (1.0 - abn) / (1.0 - ab) * beta;
    let m: f64 = out.data().iter().sum::<f64>() / n as f64;
    let v: f64 = out.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    assert!((m - mean).abs() < 4.0 * (var / n as f64).sqrt(), "mean {m} vs {mean}");
    assert!((v / var - 1.0).abs() < 0.05, "var {v} vs {var}");
}

//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Criteria that fail are reported, not hidden; the process exits nonzero
//! only when a criterion could not be evaluated at all.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use cfgcd_autodiff::{gradcheck, Tape, Tensor, Var};
use cfgcd_cli::config::RunConfig;
use cfgcd_cli::pipeline::{Evaluator, StudentSampler, TeacherSampler, Workspace};
use cfgcd_consistency::{
    distill, draw_cd_batch, finetune_loss_on, student_forward, ConsistencyModel, ConsistencyParam, DistillConfig,
    GuidanceMode,
};
use cfgcd_metrics::SampleMetrics;
use cfgcd_nets::{Condition, DenoiserNet, NetConfig};
use cfgcd_schedules::{GridKind, NoiseSchedule, TimeGrid};
use cfgcd_teacher::{cfg_combine, generate_diffusion, initial_noise, AnalyticEps, QueryCounter, SolverKind};
use cfgcd_toyworld::{make_dataset, EmbedderConfig, Gaussian, ToyEmbedder, WorldConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type R<T> = Result<T, Box<dyn std::error::Error>>;

// Pinned tolerances.
const GRAD_TOL: f64 = 1e-4;
const HEUN_RATIO: (f64, f64) = (3.2, 5.2);
const FIRST_ORDER_RATIO: (f64, f64) = (1.6, 2.6);
const VARIABLE_VS_FIXED: f64 = 1.1;
const PARITY_FACTOR: f64 = 1.5;
const FINETUNE_FD_SLACK: f64 = 1.05;
const MIN_SNR_TIE: f64 = 1.02;
const DIVERSITY_FLOOR: f64 = 0.01;

const SEEDS: [u64; 3] = [0, 1, 2];
const GUIDANCE_W: f64 = 3.0;
const VARIABLE_WS: [f64; 4] = [3.0, 4.0, 5.0, 6.0];

struct Board {
    lines: Vec<String>,
    passed: usize,
    failed: usize,
    broken: usize,
}

impl Board {
    fn record(&mut self, name: &str, outcome: R<(bool, String)>) {
        let line = match outcome {
            Ok((true, d)) => {
                self.passed += 1;
                format!("PASS {name}: {d}")
            }
            Ok((false, d)) => {
                self.failed += 1;
                format!("FAIL {name}: {d}")
            }
            Err(e) => {
                self.broken += 1;
                format!("FAIL {name}: could not evaluate: {e}")
            }
        };
        println!("{line}");
        self.lines.push(line);
    }
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::vp_linear(1000, 1e-4, 0.02).unwrap()
}

fn in_range(x: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&x)
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

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Exact criteria

fn cfg_identities() -> R<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let c = random(&mut rng, 64, 8, -4.0, 4.0);
    let u = random(&mut rng, 64, 8, -4.0, 4.0);
    let w1 = cfg_combine(&c, &u, 1.0)? == c;
    let w0 = cfg_combine(&c, &u, 0.0)? == u;
    // Dyadic inputs make every product and difference exact.
    let dy = |t: &Tensor| t.map(|x| (x * 64.0).round() / 64.0);
    let (c, u) = (dy(&c), dy(&u));
    let base = cfg_combine(&c, &u, 0.0)?;
    let mut affine = true;
    for w in [0.5, 1.0, 2.0, 3.0, 4.5, 6.0] {
        let lhs = cfg_combine(&c, &u, w)?;
        for i in 0..c.len() {
            affine &= lhs.data()[i] - base.data()[i] == w * (c.data()[i] - u.data()[i]);
        }
    }
    Ok((w1 && w0 && affine, format!("w=1 cond {w1}, w=0 uncond {w0}, affinity exact {affine}")))
}

fn boundary() -> R<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut ok = true;
    for mode in [GuidanceMode::Unguided, GuidanceMode::Fixed { w: 3.0 }, GuidanceMode::variable_default()] {
        let net = DenoiserNet::new(NetConfig::new(8, 8, vec![32, 32]).with_w_branch(mode.has_w_branch()), &mut rng)?;
        let param = ConsistencyParam::new(0.6, 1e-3, 1.0, schedule())?;
        let m = ConsistencyModel::new(net, param, mode)?;
        let z = random(&mut rng, 1000, 8, -5.0, 5.0);
        let cond: Vec<Condition> = (0..1000).map(|i| Condition::Class(i % 8)).collect();
        let w: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..6.0)).collect();
        let w = mode.has_w_branch().then_some(w.as_slice());
        let out = student_forward(&m, &z, &vec![1e-3; 1000], &cond, w, &mut QueryCounter::new())?;
        ok &= out == z;
    }
    Ok((ok, "f(z, t_min) == z bitwise on 1000 inputs for unguided, fixed and variable students".into()))
}

/// A random Gaussian given through its eigenbasis, the oracle shared with
/// the solver tests.
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

    fn gaussian(&self) -> R<Gaussian> {
        let d = self.evals.len();
        let cov = &self.basis * DMatrix::from_diagonal(&DVector::from_vec(self.evals.clone())) * self.basis.transpose();
        Ok(Gaussian::new(self.mean.as_slice().to_vec(), (0..d * d).map(|k| cov[(k / d, k % d)]).collect())?)
    }

    /// Closed-form probability-flow map from `t0` to `t1`.
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

fn solver_order() -> R<(bool, String)> {
    let s = schedule();
    let t_min = 1e-3;
    let rms = |a: &Tensor, b: &Tensor| {
        (a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
    };
    let mut ratios: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for seed in 0..20u64 {
        let p = Problem::random(seed, 8);
        let model = AnalyticEps::single(p.gaussian()?, s.clone());
        let cond = vec![Condition::Class(0); 64];
        let z = initial_noise(1000 + seed, 64, 8);
        let truth = p.exact(&s, &z, 1.0, t_min);
        for (name, kind) in [("heun", SolverKind::Heun), ("euler", SolverKind::Euler), ("ddim", SolverKind::Ddim)] {
            let mut errs = Vec::new();
            for n in [8, 16, 32] {
                let grid = TimeGrid::build(GridKind::Uniform, n, &s, 1.0, t_min)?;
                let (out, _) = generate_diffusion(&model, &s, kind, &grid, &cond, 1.0, 1000 + seed)?;
                errs.push(rms(&out, &truth));
            }
            let e = ratios.entry(name).or_default();
            e.0.push(errs[0] / errs[1]);
            e.1.push(errs[1] / errs[2]);
        }
    }
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, (r1, r2)) in ratios {
        let (a, b) = (median(r1), median(r2));
        let band = if name == "heun" { HEUN_RATIO } else { FIRST_ORDER_RATIO };
        ok &= in_range(a, band) && in_range(b, band);
        detail.push(format!("{name} {a:.2}/{b:.2}"));
    }
    Ok((ok, format!("median error ratios 8->16/16->32: {}", detail.join(", "))))
}

/// Contracts an op output against fixed weights so every entry matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> cfgcd_autodiff::Result<Var> {
    let [r, c] = tape.value(y).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, r, c, -1.5, 1.5));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Op = Box<dyn Fn(&mut Tape, &[Var]) -> cfgcd_autodiff::Result<Var>>;

fn gradient_suite() -> R<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random(&mut rng, 3, 4, -1.5, 1.5);
    let b = random(&mut rng, 3, 4, -1.5, 1.5);
    let m = random(&mut rng, 4, 2, -1.5, 1.5);
    let row = random(&mut rng, 1, 4, -1.5, 1.5);
    let pos = random(&mut rng, 3, 4, 0.5, 2.0);
    let tcol = random(&mut rng, 3, 1, 0.0, 1.0);
    let away = a.map(|x| if x.abs() < 0.2 { x + 0.5 } else { x });
    let cases: Vec<(&str, Vec<Tensor>, Op)> = vec![
        (
            "matmul",
            vec![a.clone(), m.clone()],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, 1)
            }),
        ),
        (
            "add",
            vec![a.clone(), row.clone()],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y, 2)
            }),
        ),
        (
            "sub",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                project(t, y, 3)
            }),
        ),
        (
            "mul",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, 4)
            }),
        ),
        (
            "div",
            vec![a.clone(), pos.clone()],
            Box::new(|t, v| {
                let y = t.div(v[0], v[1])?;
                project(t, y, 5)
            }),
        ),
        (
            "scale",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.scale(v[0], -1.7)?;
                project(t, y, 6)
            }),
        ),
        (
            "offset",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.offset(v[0], 0.3)?;
                let y = t.mul(y, y)?;
                project(t, y, 7)
            }),
        ),
        (
            "transpose",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.transpose(v[0])?;
                project(t, y, 8)
            }),
        ),
        (
            "concat",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| {
                let y = t.concat(&[v[0], v[1]])?;
                project(t, y, 9)
            }),
        ),
        (
            "silu",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.silu(v[0])?;
                project(t, y, 10)
            }),
        ),
        (
            "tanh",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.tanh(v[0])?;
                project(t, y, 11)
            }),
        ),
        (
            "softmax",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.softmax(v[0])?;
                project(t, y, 12)
            }),
        ),
        (
            "log_softmax",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.log_softmax(v[0])?;
                project(t, y, 13)
            }),
        ),
        (
            "sum",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                t.sum(y)
            }),
        ),
        (
            "mean",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                t.mean(y)
            }),
        ),
        (
            "sum_axis0",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.sum_axis(v[0], 0)?;
                project(t, y, 14)
            }),
        ),
        (
            "sum_axis1",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.sum_axis(v[0], 1)?;
                project(t, y, 15)
            }),
        ),
        (
            "l2_norm",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.l2_norm(v[0])?;
                project(t, y, 16)
            }),
        ),
        (
            "cosine",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| {
                let y = t.cosine_similarity(v[0], v[1])?;
                project(t, y, 17)
            }),
        ),
        (
            "clamp_min",
            vec![away],
            Box::new(|t, v| {
                let y = t.clamp_min(v[0], 0.0)?;
                project(t, y, 18)
            }),
        ),
        (
            "fourier",
            vec![tcol],
            Box::new(|t, v| {
                let y = t.fourier_features(v[0], 3)?;
                project(t, y, 19)
            }),
        ),
        (
            "gather_rows",
            vec![b.clone()],
            Box::new(|t, v| {
                let y = t.gather_rows(v[0], &[2, 0, 2, 1])?;
                project(t, y, 20)
            }),
        ),
    ];
    let mut worst = ("", 0.0f64);
    for (name, inputs, f) in &cases {
        let e = gradcheck::check(|t, v| f(t, v), inputs, 1e-6)?.max_error();
        if !(e <= worst.1) {
            worst = (name, e);
        }
    }
    let ft = finetune_gradcheck()?;
    let ok = worst.1 < GRAD_TOL && ft < GRAD_TOL;
    Ok((ok, format!("{} primitives (worst {} {:.1e}), finetune loss {:.1e}", cases.len(), worst.0, worst.1, ft)))
}

/// Worst relative error of the full finetune objective over every student
/// parameter.
fn finetune_gradcheck() -> R<f64> {
    let ds = make_dataset(WorldConfig { samples_per_class: 40, ..WorldConfig::default() }, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut emb = ToyEmbedder::new(EmbedderConfig::default(), 32, 8, &mut rng)?;
    emb.freeze();
    let mode = GuidanceMode::variable_default();
    let net = DenoiserNet::new(NetConfig::new(8, 8, vec![6]).with_w_branch(true), &mut rng)?;
    let param = ConsistencyParam::new(ds.sigma_data(), 1e-3, 1.0, schedule())?;
    let student = ConsistencyModel::new(net, param, mode)?;
    let cfg = DistillConfig { batch: 6, p_drop: 0.0, ..DistillConfig::default() };
    let grid = cfg.time_grid(&schedule())?;
    let batch = draw_cd_batch(&ds, &schedule(), &grid, &cfg, &mode, &mut rng)?;
    let target = random(&mut rng, 6, 8, -1.0, 1.0);
    let decoder = ds.world().decoder();
    let params = student.net.params().to_vec();
    let report = gradcheck::check(
        |tape, vars| {
            let (total, _, _) = finetune_loss_on(tape, &student, vars, &batch, &target, &emb, decoder, 0.7, 1.3)
                .expect("finetune loss");
            Ok(total)
        },
        &params,
        1e-6,
    )?;
    Ok(report.max_error())
}

// ---------------------------------------------------------------------------
// Trained-pipeline criteria

struct SeedRun {
    unguided: SampleMetrics,
    direct: SampleMetrics,
    fixed: SampleMetrics,
    variable: Vec<SampleMetrics>,
    fixed_min_snr: SampleMetrics,
    fixed_ddim_teacher: SampleMetrics,
    finetuned: SampleMetrics,
    solver_runs: Vec<(&'static str, SampleMetrics, u64)>,
    teacher64: SampleMetrics,
}

fn run_seed(seed: u64, emb: &ToyEmbedder, dir: &Path) -> R<SeedRun> {
    let config = RunConfig { seed, guidance: GuidanceMode::Fixed { w: GUIDANCE_W }, ..RunConfig::default() };
    let ws = Workspace::new(config)?;
    let ev = Evaluator::new(&ws, emb)?;
    let clock = Instant::now();
    let (teacher, log) = ws.train_teacher()?;
    eprintln!("  seed {seed}: teacher loss {:.4} ({:.0?})", log.losses.last().unwrap(), clock.elapsed());

    let student = |mode: GuidanceMode, cfg: &DistillConfig| -> R<ConsistencyModel> {
        let t = Instant::now();
        let (m, _) = distill(&teacher, None, &ws.dataset, &ws.schedule, cfg, mode, seed)?;
        eprintln!("  seed {seed}: distilled {} ({:.0?})", mode.name(), t.elapsed());
        Ok(m)
    };
    let score = |m: &ConsistencyModel, w: Option<f64>| -> R<SampleMetrics> {
        Ok(ev.evaluate(&StudentSampler { model: m, w })?.0)
    };
    let base = ws.config.distill.clone();
    let fixed_mode = GuidanceMode::Fixed { w: GUIDANCE_W };

    let unguided = score(&student(GuidanceMode::Unguided, &base)?, None)?;
    let direct_m = student(GuidanceMode::Direct { w: GUIDANCE_W }, &base)?;
    let direct = score(&direct_m, None)?;
    let fixed_m = student(fixed_mode, &base)?;
    let fixed = score(&fixed_m, None)?;
    let variable_m = student(GuidanceMode::variable_default(), &base)?;
    let variable = VARIABLE_WS.iter().map(|&w| score(&variable_m, Some(w))).collect::<R<Vec<_>>>()?;
    let fixed_min_snr = score(&student(fixed_mode, &DistillConfig { min_snr: true, ..base.clone() })?, None)?;
    let fixed_ddim_teacher =
        score(&student(fixed_mode, &DistillConfig { teacher_solver: SolverKind::Ddim, ..base.clone() })?, None)?;

    let t = Instant::now();
    let (tuned, _) = ws.finetune(fixed_m.clone(), &teacher, emb)?;
    eprintln!("  seed {seed}: finetuned ({:.0?})", t.elapsed());
    let finetuned = score(&tuned, None)?;

    let sampler = |solver, steps| -> R<TeacherSampler<'_>> {
        Ok(TeacherSampler {
            net: &teacher,
            schedule: &ws.schedule,
            solver,
            grid: ws.sampling_grid(steps)?,
            w: GUIDANCE_W,
        })
    };
    let mut solver_runs = Vec::new();
    for (name, solver, steps) in [
        ("heun", SolverKind::Heun, 8),
        ("dpmpp_2s", SolverKind::Dpmpp2s, 8),
        ("ddim", SolverKind::Ddim, 16),
        ("ddpm", SolverKind::DdpmAncestral, 16),
    ] {
        let (m, q) = ev.evaluate(&sampler(solver, steps)?)?;
        solver_runs.push((name, m, q));
    }
    let teacher64 = ev.evaluate(&sampler(SolverKind::Heun, 64)?)?.0;

    if seed == SEEDS[0] {
        let sd = dir.join("seed0");
        std::fs::create_dir_all(&sd)?;
        let frozen = ws.frozen(Some(emb));
        ws.teacher_checkpoint(&teacher, Some(emb)).save(&sd.join("teacher.ckpt"))?;
        ws.embedder_checkpoint(emb).save(&sd.join("embedder.ckpt"))?;
        ws.student_checkpoint(&fixed_m, &frozen).save(&sd.join("fixed.ckpt"))?;
        ws.student_checkpoint(&direct_m, &frozen).save(&sd.join("direct.ckpt"))?;
        ws.student_checkpoint(&variable_m, &frozen).save(&sd.join("variable.ckpt"))?;
    }

    Ok(SeedRun {
        unguided,
        direct,
        fixed,
        variable,
        fixed_min_snr,
        fixed_ddim_teacher,
        finetuned,
        solver_runs,
        teacher64,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn guidance_ordering(runs: &[SeedRun]) -> (bool, String) {
    let u = mean(runs.iter().map(|r| r.unguided.fd));
    let d = mean(runs.iter().map(|r| r.direct.fd));
    let f = mean(runs.iter().map(|r| r.fixed.fd));
    let per_w: Vec<f64> = (0..VARIABLE_WS.len()).map(|i| mean(runs.iter().map(|r| r.variable[i].fd))).collect();
    let (bi, best) =
        per_w.iter().copied().enumerate().fold((0, f64::INFINITY), |a, (i, x)| if x < a.1 { (i, x) } else { a });
    let ok = u > d && d > f && best <= VARIABLE_VS_FIXED * f;
    (
        ok,
        format!(
            "FD unguided {u:.4} > direct {d:.4} > fixed {f:.4}; best variable {best:.4} (w={}) vs 1.1x fixed {:.4}",
            VARIABLE_WS[bi],
            VARIABLE_VS_FIXED * f
        ),
    )
}

fn solver_ordering(runs: &[SeedRun]) -> (bool, String) {
    let fd = |i: usize| mean(runs.iter().map(|r| r.solver_runs[i].1.fd));
    let (heun, dpm, ddim, ddpm) = (fd(0), fd(1), fd(2), fd(3));
    let queries: Vec<u64> = runs[0].solver_runs.iter().map(|x| x.2).collect();
    let ok = heun <= dpm && dpm < ddim && ddim < ddpm;
    (ok, format!("FD heun {heun:.4} <= dpmpp_2s {dpm:.4} < ddim {ddim:.4} < ddpm {ddpm:.4}; queries {queries:?}"))
}

fn parity(runs: &[SeedRun]) -> (bool, String) {
    let s = mean(runs.iter().map(|r| r.fixed.fd));
    let t = mean(runs.iter().map(|r| r.teacher64.fd));
    (
        s <= PARITY_FACTOR * t,
        format!("1-query student FD {s:.4} vs 1.5x 64-step teacher {:.4} (teacher {t:.4})", PARITY_FACTOR * t),
    )
}

fn finetune_direction(runs: &[SeedRun]) -> (bool, String) {
    let (c0, c1) = (mean(runs.iter().map(|r| r.fixed.clap_t)), mean(runs.iter().map(|r| r.finetuned.clap_t)));
    let (f0, f1) = (mean(runs.iter().map(|r| r.fixed.fd)), mean(runs.iter().map(|r| r.finetuned.fd)));
    (
        c1 > c0 && f1 <= FINETUNE_FD_SLACK * f0,
        format!("CLAP_T {c0:.3} -> {c1:.3}, FD {f0:.4} -> {f1:.4} (cap {:.4})", FINETUNE_FD_SLACK * f0),
    )
}

fn min_snr(runs: &[SeedRun]) -> (bool, String) {
    let (f0, f1) = (mean(runs.iter().map(|r| r.fixed.fd)), mean(runs.iter().map(|r| r.fixed_min_snr.fd)));
    let (k0, k1) = (mean(runs.iter().map(|r| r.fixed.kld)), mean(runs.iter().map(|r| r.fixed_min_snr.kld)));
    (f1 <= MIN_SNR_TIE * f0, format!("FD {f0:.4} -> {f1:.4} with min-SNR; KLD {k0:.4} -> {k1:.4} (recorded only)"))
}

fn heun_vs_ddim_teacher(runs: &[SeedRun]) -> (bool, String) {
    let (h, d) = (mean(runs.iter().map(|r| r.fixed.fd)), mean(runs.iter().map(|r| r.fixed_ddim_teacher.fd)));
    (h <= d, format!("fixed-w student FD with heun teacher steps {h:.4} <= ddim teacher steps {d:.4}"))
}

fn diversity(dir: &Path, emb: &ToyEmbedder) -> R<(bool, String)> {
    let ws = Workspace::new(RunConfig::default())?;
    let (student, _) = ws.load_student(&dir.join("seed0/fixed.ckpt"))?;
    let (teacher, _) = ws.load_teacher(&dir.join("seed0/teacher.ckpt"))?;
    let ev = Evaluator::new(&ws, emb)?;
    let s = StudentSampler { model: &student, w: None };
    let t = TeacherSampler {
        net: &teacher,
        schedule: &ws.schedule,
        solver: SolverKind::Heun,
        grid: ws.sampling_grid(64)?,
        w: GUIDANCE_W,
    };
    let div = ev.diversity(&s)?;
    let (same, cross) = ev.seed_coupling(&s, &t)?;
    let e = &ws.config.eval;
    Ok((
        div.value > DIVERSITY_FLOOR && same > cross,
        format!(
            "diversity_std {:.4} over {} seeds x {} prompts; student-teacher cosine same-seed {same:.4} > cross-seed {cross:.4}",
            div.value,
            e.diversity_seeds.len(),
            e.diversity_prompts
        ),
    ))
}

fn cli(args: &[&str]) -> R<()> {
    let mut full = vec!["cfgcd"];
    full.extend_from_slice(args);
    cfgcd_cli::run(full).map_err(|e| format!("{}: {e}", e.category()).into())
}

fn sample_queries(dir: &Path, ckpt: &Path, extra: &[&str]) -> R<u64> {
    let out = dir.to_str().unwrap();
    let mut args = vec!["sample", "--out", out, "--ckpt", ckpt.to_str().unwrap()];
    args.extend_from_slice(extra);
    cli(&args)?;
    let mut rdr = csv::Reader::from_path(dir.join("samples.csv"))?;
    let col = rdr.headers()?.iter().position(|h| h == "queries").ok_or("no queries column")?;
    let rec = rdr.records().last().ok_or("no samples")??;
    Ok(rec[col].parse()?)
}

fn query_exactness(dir: &Path) -> R<(bool, String)> {
    let sd = dir.join("seed0");
    let q = |ckpt: &str, extra: &[&str]| sample_queries(&dir.join("q"), &sd.join(ckpt), extra);
    let got = [
        ("ddpm 200 + cfg", q("teacher.ckpt", &["--solver", "ddpm", "--steps", "200", "--w", "3"])?, 400),
        ("heun 8 + cfg", q("teacher.ckpt", &["--solver", "heun", "--steps", "8", "--w", "3"])?, 32),
        ("direct student", q("direct.ckpt", &[])?, 2),
        ("fixed student", q("fixed.ckpt", &[])?, 1),
        ("variable student", q("variable.ckpt", &["--w", "4"])?, 1),
    ];
    let ok = got.iter().all(|(_, g, e)| g == e);
    Ok((ok, got.iter().map(|(n, g, e)| format!("{n} {g}/{e}")).collect::<Vec<_>>().join(", ")))
}

fn files(dir: &Path) -> R<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p)?);
    }
    Ok(out)
}

/// Runs the whole command chain, then replays every command from the
/// resolved config the first run wrote, into a fresh directory.
fn determinism(dir: &Path) -> R<(bool, String)> {
    let (a, b) = (dir.join("run_a"), dir.join("run_b"));
    let (sa, sb) = (a.to_str().unwrap(), b.to_str().unwrap());
    let chain: [(&str, &[&str]); 7] = [
        ("train-teacher", &["--steps", "300", "--seed", "7"]),
        ("distill", &["--steps", "150", "--mode", "variable", "--seed", "7"]),
        ("finetune", &["--steps", "20", "--seed", "7"]),
        ("sample", &["--w", "2.5", "--seed", "7"]),
        ("evaluate", &["--seed", "7"]),
        ("bench-solvers", &["--steps", "4,8", "--seed", "7"]),
        ("sweep-w", &["--w", "2,4", "--seed", "7"]),
    ];
    for (cmd, extra) in chain {
        let mut args = vec![cmd, "--out", sa];
        args.extend_from_slice(extra);
        cli(&args)?;
    }
    for (cmd, _) in chain {
        let resolved = a.join(format!("resolved_{cmd}.toml"));
        cli(&[cmd, "--out", sb, "--config", resolved.to_str().unwrap()])?;
    }
    let (fa, fb) = (files(&a)?, files(&b)?);
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let ok = differing.is_empty() && fa.len() == fb.len() && fa.len() >= 14;
    Ok((
        ok,
        format!("{} output files compared bitwise after replay, {} differ {:?}", fa.len(), differing.len(), differing),
    ))
}

fn main() {
    // `cargo test` passes harness flags; a name filter that excludes this
    // target skips it.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let start = Instant::now();
    let mut board = Board { lines: Vec::new(), passed: 0, failed: 0, broken: 0 };
    board.record("gradient suite", gradient_suite());
    board.record("boundary condition", boundary());
    board.record("cfg identities", cfg_identities());
    board.record("solver convergence order", solver_order());

    let dir = tempfile::tempdir().expect("temp dir");
    let ws0 = Workspace::new(RunConfig::default()).expect("default workspace");
    let emb = ws0.pretrain_embedder().expect("embedder pretraining");
    let mut runs = Vec::new();
    for &s in &SEEDS {
        match run_seed(s, &emb, dir.path()) {
            Ok(r) => runs.push(r),
            Err(e) => eprintln!("seed {s} failed: {e}"),
        }
    }
    let trained = |f: fn(&[SeedRun]) -> (bool, String)| -> R<(bool, String)> {
        if runs.len() == SEEDS.len() {
            Ok(f(&runs))
        } else {
            Err("a training seed failed".into())
        }
    };
    board.record("guidance-mode fd ordering", trained(guidance_ordering));
    board.record("solver ordering at equal queries", trained(solver_ordering));
    board.record("single-query parity", trained(parity));
    board.record("finetune direction", trained(finetune_direction));
    board.record("min-snr direction", trained(min_snr));
    board.record("heun vs ddim teacher steps", trained(heun_vs_ddim_teacher));
    board.record("diversity", diversity(dir.path(), &emb));
    board.record("query-count exactness", query_exactness(dir.path()));
    board.record("determinism", determinism(dir.path()));

    println!("\n---- acceptance summary ----");
    for l in &board.lines {
        println!("{l}");
    }
    println!(
        "acceptance: {} passed, {} failed, {} not evaluated ({:.0?})",
        board.passed,
        board.failed,
        board.broken,
        start.elapsed()
    );
    if board.broken > 0 {
        std::process::exit(1);
    }
}

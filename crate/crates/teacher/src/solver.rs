use std::str::FromStr;

use cfgcd_autodiff::Tensor;
use cfgcd_nets::Condition;
use cfgcd_schedules::{NoiseSchedule, TimeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TeacherError};
use crate::guidance::{guided_eps, QueryCounter};
use crate::model::EpsModel;

const NOISE_STREAM: u64 = 0;
const ANCESTRAL_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    DdpmAncestral,
    Ddim,
    Euler,
    Heun,
    #[serde(rename = "dpmpp_2s")]
    Dpmpp2s,
}

impl SolverKind {
    pub const ALL: [SolverKind; 5] =
        [SolverKind::DdpmAncestral, SolverKind::Ddim, SolverKind::Euler, SolverKind::Heun, SolverKind::Dpmpp2s];

    /// Model evaluations per step (before the guidance factor).
    pub fn evals_per_step(self) -> u64 {
        match self {
            SolverKind::Heun | SolverKind::Dpmpp2s => 2,
            _ => 1,
        }
    }

    pub fn is_deterministic(self) -> bool {
        self != SolverKind::DdpmAncestral
    }

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::DdpmAncestral => "ddpm_ancestral",
            SolverKind::Ddim => "ddim",
            SolverKind::Euler => "euler",
            SolverKind::Heun => "heun",
            SolverKind::Dpmpp2s => "dpmpp_2s",
        }
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ddpm" | "ddpm_ancestral" => Ok(SolverKind::DdpmAncestral),
            "ddim" => Ok(SolverKind::Ddim),
            "euler" => Ok(SolverKind::Euler),
            "heun" => Ok(SolverKind::Heun),
            "dpmpp_2s" | "dpmpp2s" => Ok(SolverKind::Dpmpp2s),
            other => Err(format!("unknown solver `{other}`")),
        }
    }
}

/// Queries spent by `steps` steps at strength `w`. Two-evaluation solvers fall
/// back to one evaluation on a step that lands exactly on zero noise.
pub fn expected_queries(kind: SolverKind, steps: usize, w: f64, lands_on_zero: bool) -> u64 {
    let cfg = if w == 1.0 { 1 } else { 2 };
    let mut evals = steps as u64 * kind.evals_per_step();
    if lands_on_zero && steps > 0 && kind.evals_per_step() == 2 {
        evals -= 1;
    }
    evals * cfg
}

/// Standard normal starting latents shared by every sampler for a given seed.
pub fn initial_noise(seed: u64, rows: usize, dim: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM);
    let data = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(rows, dim, data).expect("positive shape")
}

fn scale_rows(z: &Tensor, s: &[f64]) -> Tensor {
    let mut out = z.clone();
    for (i, &si) in s.iter().enumerate() {
        for v in out.row_mut(i) {
            *v *= si;
        }
    }
    out
}

/// Advances every row from `from_t[i]` to `to_t[i]`.
///
/// Deterministic solvers integrate the probability-flow ODE written in the
/// variance-exploding variable `x = z / sqrt(alpha_bar)`, whose noise level is
/// `sigma`. `DdpmAncestral` samples the small-variance posterior and is the
/// only solver that draws from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn solve_step<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    kind: SolverKind,
    model: &M,
    schedule: &NoiseSchedule,
    z: &Tensor,
    from_t: &[f64],
    to_t: &[f64],
    cond: &[Condition],
    w: &[f64],
    counter: &mut QueryCounter,
    rng: &mut R,
) -> Result<Tensor> {
    let rows = z.rows();
    if from_t.len() != rows || to_t.len() != rows || cond.len() != rows {
        return Err(TeacherError::Shape(format!(
            "{rows} rows with {} start times, {} end times and {} conditions",
            from_t.len(),
            to_t.len(),
            cond.len()
        )));
    }
    for (row, (&a, &b)) in from_t.iter().zip(to_t).enumerate() {
        if !(a > b && b >= 0.0) {
            return Err(TeacherError::InvalidStep { row, from: a, to: b });
        }
    }
    let sig: Vec<f64> = from_t.iter().map(|&t| schedule.sigma(t)).collect();
    let sig_n: Vec<f64> = to_t.iter().map(|&t| schedule.sigma(t)).collect();
    let to_x: Vec<f64> = sig.iter().map(|s| (1.0 + s * s).sqrt()).collect();
    let from_x_n: Vec<f64> = sig_n.iter().map(|s| 1.0 / (1.0 + s * s).sqrt()).collect();

    let d1 = guided_eps(model, z, from_t, cond, w, counter)?;
    let x = scale_rows(z, &to_x);
    let out_x = match kind {
        SolverKind::Ddim => {
            let mut x = x;
            for i in 0..rows {
                let h = sig_n[i] - sig[i];
                for (xv, &e) in x.row_mut(i).iter_mut().zip(d1.row(i)) {
                    *xv += h * e;
                }
            }
            x
        }
        SolverKind::Euler => {
            let mut zn = z.clone();
            for i in 0..rows {
                let beta = schedule.beta_rate(from_t[i]);
                let inv_std = 1.0 / schedule.noise_std(from_t[i]);
                let dt = to_t[i] - from_t[i];
                for (zv, &e) in zn.row_mut(i).iter_mut().zip(d1.row(i)) {
                    let drift = -0.5 * beta * (*zv - e * inv_std);
                    *zv += dt * drift;
                }
            }
            return Ok(zn);
        }
        SolverKind::Heun => {
            let mut xp = x.clone();
            for i in 0..rows {
                let h = sig_n[i] - sig[i];
                for (xv, &e) in xp.row_mut(i).iter_mut().zip(d1.row(i)) {
                    *xv += h * e;
                }
            }
            // Rows that land on zero noise keep the Euler prediction.
            let live: Vec<usize> = (0..rows).filter(|&i| sig_n[i] > 0.0).collect();
            if !live.is_empty() {
                let zp = scale_rows(&xp, &from_x_n).select_rows(&live);
                let t2: Vec<f64> = live.iter().map(|&i| to_t[i]).collect();
                let c2: Vec<Condition> = live.iter().map(|&i| cond[i]).collect();
                let w2: Vec<f64> = live.iter().map(|&i| w[i]).collect();
                let d2 = guided_eps(model, &zp, &t2, &c2, &w2, counter)?;
                for (r, &i) in live.iter().enumerate() {
                    let h = sig_n[i] - sig[i];
                    let (x0, e1, e2) = (x.row(i), d1.row(i), d2.row(r));
                    let out: Vec<f64> = (0..x0.len()).map(|j| x0[j] + h * 0.5 * (e1[j] + e2[j])).collect();
                    xp.row_mut(i).copy_from_slice(&out);
                }
            }
            xp
        }
        SolverKind::Dpmpp2s => {
            // Denoised estimate in the x variable is x - sigma * eps.
            let mut out = Tensor::zeros(rows, z.cols());
            let mut x2 = Tensor::zeros(rows, z.cols());
            let mut sig_s = vec![0.0; rows];
            let mut t_s = vec![0.0; rows];
            let live: Vec<usize> = (0..rows).filter(|&i| sig_n[i] > 0.0).collect();
            for i in 0..rows {
                let den: Vec<f64> = x.row(i).iter().zip(d1.row(i)).map(|(&xv, &e)| xv - sig[i] * e).collect();
                if sig_n[i] == 0.0 {
                    out.row_mut(i).copy_from_slice(&den);
                    continue;
                }
                let h = sig[i].ln() - sig_n[i].ln();
                sig_s[i] = (-(-sig[i].ln() + 0.5 * h)).exp();
                t_s[i] = schedule.t_of_sigma(sig_s[i])?;
                let ratio = sig_s[i] / sig[i];
                let c = (-0.5 * h).exp_m1();
                for (j, v) in x2.row_mut(i).iter_mut().enumerate() {
                    *v = ratio * x.get(i, j) - c * den[j];
                }
            }
            if !live.is_empty() {
                let x2_live = x2.select_rows(&live);
                let inv: Vec<f64> = live.iter().map(|&i| 1.0 / (1.0 + sig_s[i] * sig_s[i]).sqrt()).collect();
                let z2 = scale_rows(&x2_live, &inv);
                let t2: Vec<f64> = live.iter().map(|&i| t_s[i]).collect();
                let c2: Vec<Condition> = live.iter().map(|&i| cond[i]).collect();
                let w2: Vec<f64> = live.iter().map(|&i| w[i]).collect();
                let d2 = guided_eps(model, &z2, &t2, &c2, &w2, counter)?;
                for (r, &i) in live.iter().enumerate() {
                    let h = sig[i].ln() - sig_n[i].ln();
                    let ratio = sig_n[i] / sig[i];
                    let c = (-h).exp_m1();
                    for j in 0..z.cols() {
                        let den2 = x2_live.get(r, j) - sig_s[i] * d2.get(r, j);
                        out.set(i, j, ratio * x.get(i, j) - c * den2);
                    }
                }
            }
            out
        }
        SolverKind::DdpmAncestral => {
            let mut zn = z.clone();
            for i in 0..rows {
                let ab = schedule.alpha_bar(from_t[i]);
                let ab_n = schedule.alpha_bar(to_t[i]);
                let one_m = schedule.noise_std(from_t[i]).powi(2);
                let a_ts = ab / ab_n;
                let b_ts = 1.0 - a_ts;
                let c0 = ab_n.sqrt() * b_ts / one_m;
                let cz = a_ts.sqrt() * (1.0 - ab_n) / one_m;
                let std = ((1.0 - ab_n) / one_m * b_ts).max(0.0).sqrt();
                let row = zn.row_mut(i);
                for (j, zv) in row.iter_mut().enumerate() {
                    let x0 = (z.get(i, j) - one_m.sqrt() * d1.get(i, j)) / ab.sqrt();
                    let noise: f64 = rng.sample(StandardNormal);
                    *zv = c0 * x0 + cz * z.get(i, j) + std * noise;
                }
            }
            return Ok(zn);
        }
    };
    Ok(scale_rows(&out_x, &from_x_n))
}

/// Runs `kind` over `grid` from standard normal noise drawn from `seed`, one
/// row per condition. Returns the final latents and the query count, which is
/// checked against [`expected_queries`].
pub fn generate_diffusion<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    kind: SolverKind,
    grid: &TimeGrid,
    cond: &[Condition],
    w: f64,
    seed: u64,
) -> Result<(Tensor, u64)> {
    if cond.is_empty() {
        return Err(TeacherError::Shape("no conditions to sample".into()));
    }
    let rows = cond.len();
    let mut z = initial_noise(seed, rows, model.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ANCESTRAL_STREAM);
    let mut counter = QueryCounter::new();
    let wv = vec![w; rows];
    let times = grid.times();
    for pair in times.windows(2) {
        let from = vec![pair[0]; rows];
        let to = vec![pair[1]; rows];
        z = solve_step(kind, model, schedule, &z, &from, &to, cond, &wv, &mut counter, &mut rng)?;
    }
    let last = *times.last().expect("grid has at least two times");
    let expected = expected_queries(kind, times.len() - 1, w, schedule.sigma(last) == 0.0);
    if counter.count() != expected {
        return Err(TeacherError::QueryMismatch { counted: counter.count(), expected });
    }
    Ok((z, counter.count()))
}

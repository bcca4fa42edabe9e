//! Variance-preserving diffusion schedules.
//!
//! The discrete schedule is a linear ramp of per-step variances `beta_i` with
//! cumulative products `alpha_bar_i`. Continuous time `t` in `[0, 1]` maps onto
//! knot `i` at `t = i / N'`, with `alpha_bar(0) = 1`, and `log alpha_bar` is
//! interpolated linearly between knots. That keeps every derived quantity
//! monotone and makes the inverse `t(sigma)` exact up to rounding.
//!
//! Two noise scales are exposed:
//! * `noise_std(t) = sqrt(1 - alpha_bar)`, the standard deviation of the noise
//!   in `z_t = sqrt(alpha_bar) z_0 + sqrt(1 - alpha_bar) eps`;
//! * `sigma(t) = sqrt((1 - alpha_bar) / alpha_bar)`, the same point expressed
//!   as `x = z_t / sqrt(alpha_bar)`, which is what ODE solvers step in.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("invalid beta range: need 0 < start < end < 1, got start={start}, end={end}")]
    BetaRange { start: f64, end: f64 },
    #[error("schedule needs at least 2 training steps, got {0}")]
    TooFewSteps(usize),
    #[error("time grid needs at least one step")]
    EmptyGrid,
    #[error("invalid time range: need 0 <= t_min < t_max <= 1, got [{t_min}, {t_max}]")]
    TimeRange { t_min: f64, t_max: f64 },
    #[error("invalid sigma range: need 0 <= sigma_min < sigma_max, got [{sigma_min}, {sigma_max}]")]
    SigmaRange { sigma_min: f64, sigma_max: f64 },
    #[error("rho must be positive, got {0}")]
    Rho(f64),
    #[error("sigma {0} is outside the schedule's range")]
    SigmaOutOfRange(f64),
    #[error("step {n} is outside the grid 0..={steps}")]
    StepOutOfRange { n: usize, steps: usize },
    #[error("gamma must be positive, got {0}")]
    Gamma(f64),
}

pub type Result<T> = std::result::Result<T, ScheduleError>;

/// Default Karras warp exponent.
pub const KARRAS_RHO: f64 = 7.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// `log alpha_bar` at knots `0..=N'`; knot 0 is the empty product.
    log_knots: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_start` to `beta_end` over `steps` steps.
    pub fn vp_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(ScheduleError::TooFewSteps(steps));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(ScheduleError::BetaRange { start: beta_start, end: beta_end });
        }
        let betas: Vec<f64> =
            (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut log_knots = Vec::with_capacity(steps + 1);
        log_knots.push(0.0);
        let (mut prod, mut log_prod) = (1.0, 0.0);
        for &b in &betas {
            prod *= 1.0 - b;
            log_prod += (-b).ln_1p();
            alpha_bars.push(prod);
            log_knots.push(log_prod);
        }
        Ok(NoiseSchedule { betas, alpha_bars, log_knots })
    }

    pub fn training_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn segment(&self, t: f64) -> (usize, f64) {
        let n = self.betas.len();
        let u = t.clamp(0.0, 1.0) * n as f64;
        let i = (u.floor() as usize).min(n - 1);
        (i, u - i as f64)
    }

    pub fn log_alpha_bar(&self, t: f64) -> f64 {
        let (i, f) = self.segment(t);
        if f == 0.0 {
            return self.log_knots[i];
        }
        self.log_knots[i] * (1.0 - f) + self.log_knots[i + 1] * f
    }

    pub fn alpha_bar(&self, t: f64) -> f64 {
        self.log_alpha_bar(t).exp()
    }

    /// `sqrt(1 - alpha_bar(t))`.
    pub fn noise_std(&self, t: f64) -> f64 {
        (-self.log_alpha_bar(t).exp_m1()).sqrt()
    }

    /// `sqrt((1 - alpha_bar(t)) / alpha_bar(t))`.
    pub fn sigma(&self, t: f64) -> f64 {
        (-self.log_alpha_bar(t)).exp_m1().sqrt()
    }

    /// `alpha_bar / (1 - alpha_bar)`; infinite at `t = 0`.
    pub fn snr(&self, t: f64) -> f64 {
        1.0 / (-self.log_alpha_bar(t)).exp_m1()
    }

    /// `beta(t) = -d log alpha_bar / dt`, constant on each knot segment.
    pub fn beta_rate(&self, t: f64) -> f64 {
        let (i, _) = self.segment(t);
        (self.log_knots[i] - self.log_knots[i + 1]) * self.betas.len() as f64
    }

    /// Inverse of [`sigma`](Self::sigma).
    pub fn t_of_sigma(&self, sigma: f64) -> Result<f64> {
        let max = self.sigma(1.0);
        if !(sigma >= 0.0) || sigma > max * (1.0 + 1e-9) {
            return Err(ScheduleError::SigmaOutOfRange(sigma));
        }
        if sigma == 0.0 {
            return Ok(0.0);
        }
        let target = -(sigma * sigma).ln_1p();
        let n = self.betas.len();
        if target <= self.log_knots[n] {
            return Ok(1.0);
        }
        // log_knots is strictly decreasing; find i with knots[i] >= target > knots[i+1].
        let (mut lo, mut hi) = (0usize, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.log_knots[mid] >= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let f = (target - self.log_knots[lo]) / (self.log_knots[lo + 1] - self.log_knots[lo]);
        Ok(((lo as f64 + f) / n as f64).clamp(0.0, 1.0))
    }

    /// `min(snr(t), gamma)`.
    pub fn min_snr_weight_at(&self, t: f64, gamma: f64) -> Result<f64> {
        if !(gamma > 0.0) {
            return Err(ScheduleError::Gamma(gamma));
        }
        Ok(min_snr(self.snr(t), gamma))
    }
}

/// `min(snr, gamma)`.
pub fn min_snr(snr: f64, gamma: f64) -> f64 {
    snr.min(gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Uniform,
    Karras,
}

impl std::str::FromStr for GridKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(GridKind::Uniform),
            "karras" => Ok(GridKind::Karras),
            other => Err(format!("unknown grid kind `{other}` (expected uniform or karras)")),
        }
    }
}

/// `N + 1` times descending from `t_max` to `t_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    kind: GridKind,
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn build(kind: GridKind, steps: usize, schedule: &NoiseSchedule, t_max: f64, t_min: f64) -> Result<Self> {
        Self::build_with_rho(kind, steps, schedule, t_max, t_min, KARRAS_RHO)
    }

    pub fn build_with_rho(
        kind: GridKind,
        steps: usize,
        schedule: &NoiseSchedule,
        t_max: f64,
        t_min: f64,
        rho: f64,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(ScheduleError::EmptyGrid);
        }
        if !(t_min >= 0.0 && t_min < t_max && t_max <= 1.0) {
            return Err(ScheduleError::TimeRange { t_min, t_max });
        }
        let times = match kind {
            GridKind::Uniform => (0..=steps).map(|i| t_max + (t_min - t_max) * i as f64 / steps as f64).collect(),
            GridKind::Karras => {
                let sigmas = karras_sigmas(schedule.sigma(t_max), schedule.sigma(t_min), steps, rho)?;
                let mut times = Vec::with_capacity(steps + 1);
                times.push(t_max);
                for &s in &sigmas[1..steps] {
                    times.push(schedule.t_of_sigma(s)?);
                }
                times.push(t_min);
                times
            }
        };
        Ok(TimeGrid { kind, times })
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Descending times, `times()[0] = t_max`.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Time of step `n` counted from the clean end: `t_at(0) = t_min`, `t_at(N) = t_max`.
    pub fn t_at(&self, n: usize) -> Result<f64> {
        let steps = self.steps();
        if n > steps {
            return Err(ScheduleError::StepOutOfRange { n, steps });
        }
        Ok(self.times[steps - n])
    }

    pub fn t_min(&self) -> f64 {
        self.times[self.steps()]
    }

    pub fn t_max(&self) -> f64 {
        self.times[0]
    }

    /// `min(snr(t_n), gamma)` for step `n` counted from the clean end.
    pub fn min_snr_weight(&self, n: usize, schedule: &NoiseSchedule, gamma: f64) -> Result<f64> {
        schedule.min_snr_weight_at(self.t_at(n)?, gamma)
    }
}

/// `N + 1` noise levels equally spaced in `sigma^(1/rho)`, from `sigma_max` down to `sigma_min`.
pub fn karras_sigmas(sigma_max: f64, sigma_min: f64, steps: usize, rho: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(ScheduleError::EmptyGrid);
    }
    if !(rho > 0.0) {
        return Err(ScheduleError::Rho(rho));
    }
    if !(sigma_min >= 0.0 && sigma_min < sigma_max) {
        return Err(ScheduleError::SigmaRange { sigma_min, sigma_max });
    }
    let a = sigma_max.powf(1.0 / rho);
    let b = sigma_min.powf(1.0 / rho);
    let mut out: Vec<f64> = (0..=steps).map(|i| (a + i as f64 / steps as f64 * (b - a)).powf(rho)).collect();
    out[0] = sigma_max;
    out[steps] = sigma_min;
    Ok(out)
}

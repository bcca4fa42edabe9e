use cfgcd_autodiff::{Tape, Tensor, Var};
use cfgcd_nets::{Condition, DenoiserNet};
use cfgcd_schedules::NoiseSchedule;
use cfgcd_teacher::QueryCounter;
use serde::{Deserialize, Serialize};

use crate::error::{ConsistencyError, Result};

/// Boundary-respecting reparameterization of the student, written in terms of
/// the noise level `sigma(t)` of the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyParam {
    sigma_data: f64,
    t_min: f64,
    t_max: f64,
    sigma_min: f64,
    schedule: NoiseSchedule,
}

impl ConsistencyParam {
    pub fn new(sigma_data: f64, t_min: f64, t_max: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(ConsistencyError::InvalidConfig(format!("sigma_data must be positive, got {sigma_data}")));
        }
        if !(t_min > 0.0 && t_min < t_max && t_max <= 1.0) {
            return Err(ConsistencyError::InvalidConfig(format!("need 0 < t_min < t_max <= 1, got {t_min}, {t_max}")));
        }
        let sigma_min = schedule.sigma(t_min);
        Ok(ConsistencyParam { sigma_data, t_min, t_max, sigma_min, schedule })
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// `(c_skip, c_out)` at time `t`. At `t_min` these are exactly `(1, 0)`.
    pub fn coefficients(&self, t: f64) -> (f64, f64) {
        let s = self.schedule.sigma(t);
        let sd2 = self.sigma_data * self.sigma_data;
        let ds = s - self.sigma_min;
        let c_skip = sd2 / (ds * ds + sd2);
        let c_out = self.sigma_data * ds / (sd2 + s * s).sqrt();
        (c_skip, c_out)
    }

    pub fn c_skip(&self, t: f64) -> f64 {
        self.coefficients(t).0
    }

    pub fn c_out(&self, t: f64) -> f64 {
        self.coefficients(t).1
    }
}

/// How classifier-free guidance enters distillation and sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GuidanceMode {
    /// Plain conditional targets with condition dropout; sampled without guidance.
    Unguided,
    /// Trained like `Unguided`; guidance is applied to the two student outputs
    /// at sampling time.
    Direct { w: f64 },
    /// Targets use the teacher's guided output at one strength.
    Fixed { w: f64 },
    /// Targets use a strength drawn per example from `[w_min, w_max)`, which
    /// the student also receives as input.
    Variable { w_min: f64, w_max: f64 },
}

impl GuidanceMode {
    pub fn variable_default() -> Self {
        GuidanceMode::Variable { w_min: 0.0, w_max: 6.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GuidanceMode::Unguided => "unguided",
            GuidanceMode::Direct { .. } => "direct",
            GuidanceMode::Fixed { .. } => "fixed",
            GuidanceMode::Variable { .. } => "variable",
        }
    }

    pub fn has_w_branch(&self) -> bool {
        matches!(self, GuidanceMode::Variable { .. })
    }

    /// Network queries per generated batch.
    pub fn queries(&self) -> u64 {
        match self {
            GuidanceMode::Direct { .. } => 2,
            _ => 1,
        }
    }

    /// Training uses condition dropout only where sampling needs the null branch.
    pub fn drops_conditions(&self) -> bool {
        matches!(self, GuidanceMode::Unguided | GuidanceMode::Direct { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        match *self {
            GuidanceMode::Unguided => Ok(()),
            GuidanceMode::Direct { w } | GuidanceMode::Fixed { w } if ok(w) => Ok(()),
            GuidanceMode::Variable { w_min, w_max } if ok(w_min) && w_max.is_finite() && w_min < w_max => Ok(()),
            other => Err(ConsistencyError::InvalidConfig(format!("invalid guidance mode {other:?}"))),
        }
    }
}

/// A distilled student: network, reparameterization and the mode it was
/// trained in.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyModel {
    pub net: DenoiserNet,
    pub param: ConsistencyParam,
    pub mode: GuidanceMode,
}

impl ConsistencyModel {
    pub fn new(net: DenoiserNet, param: ConsistencyParam, mode: GuidanceMode) -> Result<Self> {
        mode.validate()?;
        if net.has_w_branch() != mode.has_w_branch() {
            return Err(ConsistencyError::InvalidConfig(format!(
                "{} mode {} a guidance input, but the network {} one",
                mode.name(),
                if mode.has_w_branch() { "needs" } else { "forbids" },
                if net.has_w_branch() { "has" } else { "lacks" }
            )));
        }
        Ok(ConsistencyModel { net, param, mode })
    }
}

fn coefficient_columns(param: &ConsistencyParam, t: &[f64]) -> (Vec<f64>, Vec<f64>) {
    t.iter().map(|&ti| param.coefficients(ti)).unzip()
}

/// `c_skip(t) z + c_out(t) F(z, t, c[, w])`; one network query.
pub fn student_forward(
    model: &ConsistencyModel,
    z: &Tensor,
    t: &[f64],
    cond: &[Condition],
    w: Option<&[f64]>,
    counter: &mut QueryCounter,
) -> Result<Tensor> {
    let f = model.net.forward(z, t, cond, w)?;
    counter.add(1);
    let (cs, co) = coefficient_columns(&model.param, t);
    let mut out = z.clone();
    for i in 0..out.rows() {
        let fr = f.row(i);
        for (o, &fv) in out.row_mut(i).iter_mut().zip(fr) {
            *o = cs[i] * *o + co[i] * fv;
        }
    }
    Ok(out)
}

/// [`student_forward`] recorded on `tape` with parameters bound there.
pub fn student_forward_on(
    tape: &mut Tape,
    model: &ConsistencyModel,
    params: &[Var],
    z: Var,
    t: &[f64],
    cond: &[Condition],
    w: Option<&[f64]>,
) -> Result<Var> {
    let f = model.net.forward_on(tape, params, z, t, cond, w)?;
    let (cs, co) = coefficient_columns(&model.param, t);
    let cs = tape.constant(Tensor::column(&cs));
    let co = tape.constant(Tensor::column(&co));
    let skip = tape.mul(z, cs)?;
    let out = tape.mul(f, co)?;
    Ok(tape.add(skip, out)?)
}

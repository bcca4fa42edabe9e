use cfgcd_autodiff::Tensor;
use cfgcd_nets::Condition;

use crate::error::{Result, TeacherError};
use crate::model::EpsModel;

/// Number of batched model evaluations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryCounter {
    count: u64,
}

impl QueryCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn add(&mut self, n: u64) {
        self.count += n;
    }

    pub fn reset(&mut self) {
        self.count = 0;
    }
}

fn check_w(w: f64) -> Result<()> {
    if w.is_finite() && w >= 0.0 {
        Ok(())
    } else {
        Err(TeacherError::NegativeGuidance(w))
    }
}

/// `w * s_cond + (1 - w) * s_uncond`. The endpoints `w = 1` and `w = 0`
/// return the respective branch bit for bit.
pub fn cfg_combine(s_cond: &Tensor, s_uncond: &Tensor, w: f64) -> Result<Tensor> {
    check_w(w)?;
    if s_cond.shape() != s_uncond.shape() {
        return Err(TeacherError::Shape(format!(
            "conditional {:?} vs unconditional {:?}",
            s_cond.shape(),
            s_uncond.shape()
        )));
    }
    let data = s_cond.data().iter().zip(s_uncond.data()).map(|(&c, &u)| w * c + (1.0 - w) * u).collect();
    Ok(Tensor::new(s_cond.rows(), s_cond.cols(), data)?)
}

/// [`cfg_combine`] with one strength per row.
pub fn cfg_combine_rows(s_cond: &Tensor, s_uncond: &Tensor, w: &[f64]) -> Result<Tensor> {
    if s_cond.shape() != s_uncond.shape() || w.len() != s_cond.rows() {
        return Err(TeacherError::Shape(format!(
            "conditional {:?}, unconditional {:?}, {} strengths",
            s_cond.shape(),
            s_uncond.shape(),
            w.len()
        )));
    }
    let mut out = s_cond.clone();
    for (i, &wi) in w.iter().enumerate() {
        check_w(wi)?;
        let u = s_uncond.row(i);
        for (o, &ui) in out.row_mut(i).iter_mut().zip(u) {
            *o = wi * *o + (1.0 - wi) * ui;
        }
    }
    Ok(out)
}

/// Guided noise prediction with per-row strengths. When every strength is 1
/// only the conditional branch is queried; otherwise both branches are.
pub fn guided_eps<M: EpsModel + ?Sized>(
    model: &M,
    z: &Tensor,
    t: &[f64],
    cond: &[Condition],
    w: &[f64],
    counter: &mut QueryCounter,
) -> Result<Tensor> {
    if w.len() != z.rows() {
        return Err(TeacherError::Shape(format!("{} strengths for {} rows", w.len(), z.rows())));
    }
    for &wi in w {
        check_w(wi)?;
    }
    let s_cond = model.eps(z, t, cond)?;
    counter.add(1);
    if w.iter().all(|&wi| wi == 1.0) {
        return Ok(s_cond);
    }
    let null = vec![Condition::Null; z.rows()];
    let s_uncond = model.eps(z, t, &null)?;
    counter.add(1);
    cfg_combine_rows(&s_cond, &s_uncond, w)
}

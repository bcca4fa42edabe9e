use cfgcd_autodiff::Tensor;
use cfgcd_nets::{Condition, DenoiserNet};
use cfgcd_schedules::NoiseSchedule;
use cfgcd_toyworld::{analytic_denoiser, Gaussian};

use crate::error::{Result, TeacherError};

/// A noise predictor `eps(z_t, t, c)`. One call is one model query,
/// whatever the batch size.
pub trait EpsModel {
    fn dim(&self) -> usize;
    fn eps(&self, z: &Tensor, t: &[f64], cond: &[Condition]) -> Result<Tensor>;
}

impl EpsModel for DenoiserNet {
    fn dim(&self) -> usize {
        self.config().dim
    }

    fn eps(&self, z: &Tensor, t: &[f64], cond: &[Condition]) -> Result<Tensor> {
        Ok(self.forward(z, t, cond, None)?)
    }
}

/// Exact noise prediction for Gaussian classes. Each condition selects its
/// own Gaussian and the null condition selects `null`.
#[derive(Debug, Clone)]
pub struct AnalyticEps {
    classes: Vec<Gaussian>,
    null: Gaussian,
    schedule: NoiseSchedule,
}

impl AnalyticEps {
    pub fn new(classes: Vec<Gaussian>, null: Gaussian, schedule: NoiseSchedule) -> Result<Self> {
        let d = null.dim();
        if classes.iter().any(|g| g.dim() != d) {
            return Err(TeacherError::Shape("class Gaussians differ in dimension".into()));
        }
        Ok(AnalyticEps { classes, null, schedule })
    }

    /// One Gaussian answering every condition.
    pub fn single(g: Gaussian, schedule: NoiseSchedule) -> Self {
        AnalyticEps { classes: vec![g.clone()], null: g, schedule }
    }

    fn gaussian(&self, c: Condition) -> Result<&Gaussian> {
        match c {
            Condition::Null => Ok(&self.null),
            Condition::Class(k) => self.classes.get(k).ok_or_else(|| {
                TeacherError::Shape(format!("class {k} out of range for {} classes", self.classes.len()))
            }),
        }
    }
}

impl EpsModel for AnalyticEps {
    fn dim(&self) -> usize {
        self.null.dim()
    }

    fn eps(&self, z: &Tensor, t: &[f64], cond: &[Condition]) -> Result<Tensor> {
        if t.len() != z.rows() || cond.len() != z.rows() {
            return Err(TeacherError::Shape(format!(
                "{} rows with {} times and {} conditions",
                z.rows(),
                t.len(),
                cond.len()
            )));
        }
        let mut out = Tensor::zeros(z.rows(), z.cols());
        for i in 0..z.rows() {
            let g = self.gaussian(cond[i])?;
            let zi = z.select_rows(&[i]);
            let post = analytic_denoiser(&zi, &t[i..=i], g, &self.schedule)?;
            out.row_mut(i).copy_from_slice(post.eps.row(0));
        }
        Ok(out)
    }
}

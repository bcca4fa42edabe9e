use cfgcd_autodiff::Tensor;
use cfgcd_schedules::NoiseSchedule;
use nalgebra::{DMatrix, DVector};

use crate::error::{Result, WorldError};

/// A multivariate normal with dense covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl Gaussian {
    /// `cov` is row-major `d x d` and must be symmetric positive definite.
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(WorldError::Dim(format!(
                "mean of length {d} needs a {d}x{d} covariance, got {} values",
                cov.len()
            )));
        }
        let cov = DMatrix::from_row_slice(d, d, &cov);
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-9 * cov.abs().max().max(1.0) {
            return Err(WorldError::DegenerateCovariance(format!("asymmetry {asym:.3e}")));
        }
        if cov.clone().cholesky().is_none() {
            return Err(WorldError::DegenerateCovariance("covariance is not positive definite".into()));
        }
        Ok(Gaussian { mean: DVector::from_vec(mean), cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    /// Row-major covariance.
    pub fn covariance(&self) -> Vec<f64> {
        self.cov.transpose().as_slice().to_vec()
    }
}

/// Exact posterior-mean denoiser output for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    /// `E[z_0 | z_t]`.
    pub x0: Tensor,
    /// The matching noise prediction `(z_t - sqrt(a) x0) / sqrt(1 - a)`.
    pub eps: Tensor,
}

/// Closed-form denoiser when the data are exactly `gaussian`. Row `i` of `z`
/// is observed at time `t[i]`. Times with no noise (`alpha_bar = 1`) are rejected
/// because the noise prediction is undefined there.
pub fn analytic_denoiser(z: &Tensor, t: &[f64], gaussian: &Gaussian, schedule: &NoiseSchedule) -> Result<Posterior> {
    let d = gaussian.dim();
    if z.cols() != d || z.rows() != t.len() {
        return Err(WorldError::Dim(format!(
            "latents {:?} with {} times for a {d}-dimensional Gaussian",
            z.shape(),
            t.len()
        )));
    }
    let mut x0 = Tensor::zeros(z.rows(), d);
    let mut eps = Tensor::zeros(z.rows(), d);
    let eye = DMatrix::<f64>::identity(d, d);
    for (i, &ti) in t.iter().enumerate() {
        let a = schedule.alpha_bar(ti);
        let one_minus = schedule.noise_std(ti).powi(2);
        if !(one_minus > 0.0) {
            return Err(WorldError::InvalidConfig(format!("time {ti} carries no noise")));
        }
        let sa = a.sqrt();
        let zi = DVector::from_row_slice(z.row(i));
        let m = &gaussian.cov * a + &eye * one_minus;
        let chol = m.cholesky().ok_or_else(|| WorldError::DegenerateCovariance("noisy marginal covariance".into()))?;
        let y = chol.solve(&(&zi - &gaussian.mean * sa));
        let xi = &gaussian.mean + (&gaussian.cov * y) * sa;
        let ei = (&zi - &xi * sa) / one_minus.sqrt();
        x0.row_mut(i).copy_from_slice(xi.as_slice());
        eps.row_mut(i).copy_from_slice(ei.as_slice());
    }
    Ok(Posterior { x0, eps })
}

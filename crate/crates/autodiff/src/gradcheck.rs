//! Central finite-difference verification of tape gradients.

use crate::{Result, Tape, Tensor, Var};

/// Outcome of [`check`]: one norm-wise relative error per input.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// `||a - b|| / max(||a||, ||b||)`, taken as zero when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `h`, for every entry of every input.
pub fn check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        t.value(out).item()
    };

    let mut errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].rows(), inputs[k].cols()));
        let mut numeric = vec![0.0; inputs[k].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x0 = inputs[k].data()[j];
            work[k].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[j] = x0;
            *slot = (up - down) / (2.0 * h);
        }
        errors.push(relative_error(analytic.data(), &numeric));
    }
    Ok(GradCheck { errors })
}

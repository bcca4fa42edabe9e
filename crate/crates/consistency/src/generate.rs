use cfgcd_autodiff::Tensor;
use cfgcd_nets::Condition;
use cfgcd_teacher::{cfg_combine, initial_noise, QueryCounter};

use crate::error::{ConsistencyError, Result};
use crate::model::{student_forward, ConsistencyModel, GuidanceMode};

/// One-shot generation from the terminal time, one row per condition.
///
/// `w` is optional for unguided, direct and fixed students (defaulting to the
/// mode's own strength) and required for variable ones. The starting noise is
/// the same as [`cfgcd_teacher::generate_diffusion`] draws for the same seed.
pub fn generate_consistency(
    model: &ConsistencyModel,
    cond: &[Condition],
    w: Option<f64>,
    seed: u64,
) -> Result<(Tensor, u64)> {
    if cond.is_empty() {
        return Err(ConsistencyError::Shape("no conditions to sample".into()));
    }
    let rows = cond.len();
    let z = initial_noise(seed, rows, model.net.config().dim);
    let t = vec![model.param.t_max(); rows];
    let mut counter = QueryCounter::new();
    let out = match (model.mode, w) {
        (GuidanceMode::Unguided, None) => student_forward(model, &z, &t, cond, None, &mut counter)?,
        (GuidanceMode::Unguided, Some(w)) if w == 1.0 => student_forward(model, &z, &t, cond, None, &mut counter)?,
        (GuidanceMode::Unguided, Some(w)) => {
            return Err(ConsistencyError::GuidanceMismatch { trained: 1.0, requested: w })
        }
        (GuidanceMode::Direct { w: w0 }, w) => {
            let w = w.unwrap_or(w0);
            let c = student_forward(model, &z, &t, cond, None, &mut counter)?;
            let u = student_forward(model, &z, &t, &vec![Condition::Null; rows], None, &mut counter)?;
            cfg_combine(&c, &u, w)?
        }
        (GuidanceMode::Fixed { w: w0 }, w) => {
            if let Some(w) = w {
                if w != w0 {
                    return Err(ConsistencyError::GuidanceMismatch { trained: w0, requested: w });
                }
            }
            student_forward(model, &z, &t, cond, None, &mut counter)?
        }
        (GuidanceMode::Variable { .. }, None) => return Err(cfgcd_nets::NetError::MissingW.into()),
        (GuidanceMode::Variable { w_min, w_max }, Some(w)) => {
            // The upper end of the training range is accepted as the last
            // evaluation point.
            if !(w >= w_min && w <= w_max) {
                return Err(ConsistencyError::GuidanceOutOfRange { w, lo: w_min, hi: w_max });
            }
            student_forward(model, &z, &t, cond, Some(&vec![w; rows]), &mut counter)?
        }
    };
    debug_assert_eq!(counter.count(), model.mode.queries());
    Ok((out, counter.count()))
}

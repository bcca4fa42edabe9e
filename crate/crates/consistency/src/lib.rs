//! Consistency distillation of a guided diffusion teacher.
//!
//! A student `f_S(z, t) = c_skip(t) z + c_out(t) F(z, t, c[, w])` learns to
//! map any point of a teacher trajectory straight to its clean end. Targets
//! come from one teacher solver step evaluated by a slowly moving copy of the
//! student. How guidance enters is set by [`GuidanceMode`].

mod distill;
mod error;
mod finetune;
mod generate;
mod guided;
mod model;

pub use distill::{
    cd_batch_at, cd_loss, cd_loss_on, distill, draw_cd_batch, teacher_step, CdBatch, CurveRow, DistillConfig, Distiller,
};
pub use error::{ConsistencyError, Result};
pub use finetune::{clap_terms_on, finetune_clap, finetune_loss_on, FinetuneConfig};
pub use generate::generate_consistency;
pub use guided::{guided_teacher_output, train_guided_teacher, GuidedInitConfig};
pub use model::{student_forward, student_forward_on, ConsistencyModel, ConsistencyParam, GuidanceMode};

//! The conditional denoiser shared by teacher and student, plus the
//! bookkeeping that trains it: EMA shadows and a decoupled-weight-decay Adam.

mod ema;
mod error;
mod net;
pub mod optim;

pub use ema::EmaTracker;
pub use error::{NetError, Result};
pub use net::{init_student_from_teacher, Condition, DenoiserNet, InitMode, NetConfig, W_BRANCH_INIT_SCALE};
pub use optim::{AdamW, AdamWConfig, LrSchedule};

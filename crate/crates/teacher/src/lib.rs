//! The diffusion teacher and everything needed to sample from it.
//!
//! A teacher is any [`EpsModel`]: a trained [`cfgcd_nets::DenoiserNet`] or the
//! closed-form [`AnalyticEps`] used as a test oracle. Guided predictions mix
//! the conditional and null-condition outputs, and every solver reports the
//! exact number of batched model evaluations through a [`QueryCounter`].

mod error;
mod guidance;
mod model;
mod solver;
mod train;

pub use error::{Result, TeacherError};
pub use guidance::{cfg_combine, cfg_combine_rows, guided_eps, QueryCounter};
pub use model::{AnalyticEps, EpsModel};
pub use solver::{expected_queries, generate_diffusion, initial_noise, solve_step, SolverKind};
pub use train::{train_teacher, TeacherBatch, TeacherConfig, TeacherTrainer, TrainLog};

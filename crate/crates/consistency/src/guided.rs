use cfgcd_autodiff::{Tape, Tensor};
use cfgcd_nets::{init_student_from_teacher, AdamW, AdamWConfig, Condition, DenoiserNet, InitMode, LrSchedule};
use cfgcd_schedules::NoiseSchedule;
use cfgcd_teacher::{guided_eps, EpsModel, QueryCounter};
use cfgcd_toyworld::ToyDataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ConsistencyError, Result};

const INIT_STREAM: u64 = 30;
const DATA_STREAM: u64 = 31;

/// `w * f_T(z, t, c) + (1 - w) * f_T(z, t, null)`.
pub fn guided_teacher_output<M: EpsModel + ?Sized>(
    teacher: &M,
    z: &Tensor,
    t: &[f64],
    cond: &[Condition],
    w: f64,
    counter: &mut QueryCounter,
) -> Result<Tensor> {
    Ok(guided_eps(teacher, z, t, cond, &vec![w; z.rows()], counter)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidedInitConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for GuidedInitConfig {
    fn default() -> Self {
        GuidedInitConfig { iterations: 1000, batch: 256, lr: 5e-4, w_min: 0.0, w_max: 6.0, t_min: 1e-3, t_max: 1.0 }
    }
}

/// Trains a w-conditioned copy of `teacher` to reproduce the teacher's guided
/// noise prediction at strengths drawn from `[w_min, w_max)`.
pub fn train_guided_teacher(
    teacher: &DenoiserNet,
    dataset: &ToyDataset,
    schedule: &NoiseSchedule,
    config: &GuidedInitConfig,
    seed: u64,
) -> Result<DenoiserNet> {
    if config.batch == 0 || !(config.w_min >= 0.0 && config.w_min < config.w_max) {
        return Err(ConsistencyError::InvalidConfig("guided init needs a batch and 0 <= w_min < w_max".into()));
    }
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(INIT_STREAM);
    let cfg = teacher.config().clone().with_w_branch(true);
    let mut net = init_student_from_teacher(&cfg, teacher, InitMode::Unguided, None, &mut init)?;
    let mut opt = AdamW::new(AdamWConfig { lr: config.lr, ..AdamWConfig::default() }, net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);
    let mut tape = Tape::new();
    let mut counter = QueryCounter::new();
    for it in 0..config.iterations {
        let b = dataset.batch(&mut rng, config.batch);
        let t: Vec<f64> = (0..config.batch).map(|_| rng.random_range(config.t_min..config.t_max)).collect();
        let w: Vec<f64> = (0..config.batch).map(|_| rng.random_range(config.w_min..config.w_max)).collect();
        let mut z = b.z0.clone();
        for (i, &ti) in t.iter().enumerate() {
            let (s, q) = (schedule.alpha_bar(ti).sqrt(), schedule.noise_std(ti));
            for v in z.row_mut(i) {
                let e: f64 = rng.sample(StandardNormal);
                *v = s * *v + q * e;
            }
        }
        let cond: Vec<Condition> = b.captions.iter().map(|&c| Condition::Class(c)).collect();
        let target = guided_eps(teacher, &z, &t, &cond, &w, &mut counter)?;
        tape.reset();
        let params = net.bind(&mut tape, true);
        let zv = tape.constant(z);
        let pred = net.forward_on(&mut tape, &params, zv, &t, &cond, Some(&w))?;
        let tg = tape.constant(target);
        let diff = tape.sub(pred, tg)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq)?;
        let mut grads = tape.backward(loss)?;
        let g: Vec<Option<Tensor>> = params.iter().map(|&p| grads.take(p)).collect();
        let lr = config.lr * LrSchedule::Cosine.factor(it, config.iterations);
        opt.step(net.params_mut(), &g, lr)?;
    }
    Ok(net)
}

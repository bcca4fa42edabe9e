use cfgcd_autodiff::{Tape, Tensor};
use cfgcd_nets::{AdamW, AdamWConfig, Condition, DenoiserNet, LrSchedule, NetConfig};
use cfgcd_schedules::NoiseSchedule;
use cfgcd_toyworld::ToyDataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TeacherError};

const INIT_STREAM: u64 = 10;
const DATA_STREAM: u64 = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub fourier_k: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    /// Probability of replacing a caption by the null condition.
    pub p_drop: f64,
    /// Training times are drawn uniformly from `[t_min, t_max]`.
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            hidden: vec![128, 128, 128],
            fourier_k: 6,
            steps: 3000,
            batch: 256,
            lr: 1e-3,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Cosine,
            p_drop: 0.1,
            t_min: 1e-3,
            t_max: 1.0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TeacherError::InvalidConfig(m.to_string()));
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return bad("p_drop must lie in [0, 1]");
        }
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max <= 1.0) {
            return bad("need 0 < t_min < t_max <= 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }

    pub fn net_config(&self, dim: usize, classes: usize) -> NetConfig {
        NetConfig { fourier_k: self.fourier_k, ..NetConfig::new(dim, classes, self.hidden.clone()) }
    }
}

/// One noised training batch and the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBatch {
    pub z_t: Tensor,
    pub t: Vec<f64>,
    pub cond: Vec<Condition>,
    pub eps: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean squared noise residual of every step, before its update.
    pub losses: Vec<f64>,
}

/// Step-by-step teacher training. [`train_teacher`] is this run to completion.
pub struct TeacherTrainer<'a> {
    dataset: &'a ToyDataset,
    schedule: &'a NoiseSchedule,
    config: TeacherConfig,
    net: DenoiserNet,
    opt: AdamW,
    rng: ChaCha8Rng,
    tape: Tape,
    step: usize,
}

impl<'a> TeacherTrainer<'a> {
    pub fn new(dataset: &'a ToyDataset, schedule: &'a NoiseSchedule, config: TeacherConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(TeacherError::EmptyDataset);
        }
        let world = dataset.world();
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        init.set_stream(INIT_STREAM);
        let net = DenoiserNet::new(config.net_config(world.dim(), world.classes()), &mut init)?;
        let opt = AdamW::new(
            AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..AdamWConfig::default() },
            net.params(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(DATA_STREAM);
        Ok(TeacherTrainer { dataset, schedule, config, net, opt, rng, tape: Tape::new(), step: 0 })
    }

    pub fn net(&self) -> &DenoiserNet {
        &self.net
    }

    pub fn into_net(self) -> DenoiserNet {
        self.net
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Draws examples with their training captions, drops captions with
    /// probability `p_drop`, and noises them at uniform times.
    pub fn draw_batch(&mut self) -> TeacherBatch {
        let b = self.dataset.batch(&mut self.rng, self.config.batch);
        let cond = b
            .captions
            .iter()
            .map(|&c| if self.rng.random::<f64>() < self.config.p_drop { Condition::Null } else { Condition::Class(c) })
            .collect();
        let t: Vec<f64> =
            (0..self.config.batch).map(|_| self.rng.random_range(self.config.t_min..self.config.t_max)).collect();
        let d = b.z0.cols();
        let eps_data: Vec<f64> = (0..self.config.batch * d).map(|_| self.rng.sample(StandardNormal)).collect();
        let eps = Tensor::new(self.config.batch, d, eps_data).expect("positive shape");
        let mut z_t = b.z0.clone();
        for (i, &ti) in t.iter().enumerate() {
            let (s, n) = (self.schedule.alpha_bar(ti).sqrt(), self.schedule.noise_std(ti));
            for (j, v) in z_t.row_mut(i).iter_mut().enumerate() {
                *v = s * *v + n * eps.get(i, j);
            }
        }
        TeacherBatch { z_t, t, cond, eps }
    }

    /// One optimizer update on `batch`; returns the loss before the update.
    pub fn step_on(&mut self, batch: &TeacherBatch) -> Result<f64> {
        self.tape.reset();
        let tape = &mut self.tape;
        let params = self.net.bind(tape, true);
        let z = tape.constant(batch.z_t.clone());
        let pred = self.net.forward_on(tape, &params, z, &batch.t, &batch.cond, None)?;
        let target = tape.constant(batch.eps.clone());
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq)?;
        let value = tape.value(loss).item()?;
        let mut grads = tape.backward(loss)?;
        let g: Vec<Option<Tensor>> = params.iter().map(|&p| grads.take(p)).collect();
        let lr = self.config.lr * self.config.lr_schedule.factor(self.step, self.config.steps);
        self.opt.step(self.net.params_mut(), &g, lr)?;
        self.step += 1;
        Ok(value)
    }

    pub fn run(&mut self, steps: usize, log: &mut TrainLog) -> Result<()> {
        for _ in 0..steps {
            let b = self.draw_batch();
            log.losses.push(self.step_on(&b)?);
        }
        Ok(())
    }
}

/// Trains an unconditional-capable noise predictor on `dataset`.
pub fn train_teacher(
    dataset: &ToyDataset,
    schedule: &NoiseSchedule,
    config: TeacherConfig,
    seed: u64,
) -> Result<(DenoiserNet, TrainLog)> {
    let steps = config.steps;
    let mut trainer = TeacherTrainer::new(dataset, schedule, config, seed)?;
    let mut log = TrainLog::default();
    trainer.run(steps, &mut log)?;
    Ok((trainer.into_net(), log))
}

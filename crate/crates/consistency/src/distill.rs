use cfgcd_autodiff::{Tape, Tensor, Var};
use cfgcd_nets::{
    init_student_from_teacher, AdamW, AdamWConfig, Condition, DenoiserNet, EmaTracker, InitMode, LrSchedule,
};
use cfgcd_schedules::{GridKind, NoiseSchedule, TimeGrid};
use cfgcd_teacher::{solve_step, EpsModel, QueryCounter, SolverKind};
use cfgcd_toyworld::{Batch, ToyDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ConsistencyError, Result};
use crate::model::{student_forward, student_forward_on, ConsistencyModel, ConsistencyParam, GuidanceMode};

const INIT_STREAM: u64 = 20;
const DATA_STREAM: u64 = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Number of discretization intervals `N`.
    pub n_steps: usize,
    pub grid: GridKind,
    pub teacher_solver: SolverKind,
    pub min_snr: bool,
    pub gamma: f64,
    pub target_ema: f64,
    pub report_ema: f64,
    /// Ramp the report average in over the first updates.
    pub report_warmup: bool,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    /// Condition dropout in modes that sample from the null branch.
    pub p_drop: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub init: InitMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            n_steps: 18,
            grid: GridKind::Uniform,
            teacher_solver: SolverKind::Heun,
            min_snr: false,
            gamma: 5.0,
            target_ema: 0.95,
            report_ema: 0.999,
            report_warmup: true,
            iterations: 2000,
            batch: 128,
            lr: 2e-4,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Constant,
            p_drop: 0.1,
            t_min: 1e-3,
            t_max: 1.0,
            init: InitMode::Unguided,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConsistencyError::InvalidConfig(m));
        if self.n_steps < 2 {
            return bad(format!("N must be at least 2, got {}", self.n_steps));
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !self.teacher_solver.is_deterministic() {
            return bad("distillation needs a deterministic teacher solver".into());
        }
        for (name, d) in [("target_ema", self.target_ema), ("report_ema", self.report_ema)] {
            if !(0.0..=1.0).contains(&d) {
                return bad(format!("{name} must lie in [0, 1], got {d}"));
            }
        }
        if self.batch == 0 || !(self.lr > 0.0) {
            return bad("batch and lr must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return bad("p_drop must lie in [0, 1]".into());
        }
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max <= 1.0) {
            return bad("need 0 < t_min < t_max <= 1".into());
        }
        Ok(())
    }

    pub fn time_grid(&self, schedule: &NoiseSchedule) -> Result<TimeGrid> {
        Ok(TimeGrid::build(self.grid, self.n_steps, schedule, self.t_max, self.t_min)?)
    }
}

/// Everything one distillation update needs, drawn up front.
#[derive(Debug, Clone, PartialEq)]
pub struct CdBatch {
    pub z0: Tensor,
    pub captions: Vec<usize>,
    /// Step index per row, in `1..=N`.
    pub n: Vec<usize>,
    pub t_n: Vec<f64>,
    pub t_prev: Vec<f64>,
    pub z_n: Tensor,
    /// Condition seen by teacher and student (null where dropped).
    pub cond: Vec<Condition>,
    /// Teacher guidance strength per row.
    pub teacher_w: Vec<f64>,
    /// Guidance input of a w-conditioned student.
    pub student_w: Option<Vec<f64>>,
    /// Loss weight per row.
    pub weights: Vec<f64>,
}

/// Samples data, step indices, noise, conditions and strengths for one update.
pub fn draw_cd_batch<R: Rng + ?Sized>(
    dataset: &ToyDataset,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    config: &DistillConfig,
    mode: &GuidanceMode,
    rng: &mut R,
) -> Result<CdBatch> {
    let b = dataset.batch(rng, config.batch);
    let n: Vec<usize> = (0..config.batch).map(|_| rng.random_range(1..=grid.steps())).collect();
    cd_batch_at(b, n, schedule, grid, config, mode, rng)
}

/// Builds an update batch from clean data and explicit step indices, drawing
/// the noise, condition dropout and strengths from `rng`.
pub fn cd_batch_at<R: Rng + ?Sized>(
    b: Batch,
    n: Vec<usize>,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    config: &DistillConfig,
    mode: &GuidanceMode,
    rng: &mut R,
) -> Result<CdBatch> {
    let rows = b.z0.rows();
    if n.len() != rows || b.captions.len() != rows {
        return Err(ConsistencyError::Shape(format!("{rows} rows, {} steps, {} captions", n.len(), b.captions.len())));
    }
    let big_n = grid.steps();
    if let Some(&bad) = n.iter().find(|&&k| k == 0 || k > big_n) {
        return Err(ConsistencyError::StepOutOfRange { n: bad, steps: big_n });
    }
    let t_n: Vec<f64> = n.iter().map(|&k| grid.t_at(k)).collect::<std::result::Result<_, _>>()?;
    let t_prev: Vec<f64> = n.iter().map(|&k| grid.t_at(k - 1)).collect::<std::result::Result<_, _>>()?;
    let mut z_n = b.z0.clone();
    for i in 0..rows {
        let (s, q) = (schedule.alpha_bar(t_n[i]).sqrt(), schedule.noise_std(t_n[i]));
        for v in z_n.row_mut(i) {
            let e: f64 = rng.sample(StandardNormal);
            *v = s * *v + q * e;
        }
    }
    let cond: Vec<Condition> = b
        .captions
        .iter()
        .map(|&c| {
            if mode.drops_conditions() && rng.random::<f64>() < config.p_drop {
                Condition::Null
            } else {
                Condition::Class(c)
            }
        })
        .collect();
    let (teacher_w, student_w) = match *mode {
        GuidanceMode::Unguided | GuidanceMode::Direct { .. } => (vec![1.0; rows], None),
        GuidanceMode::Fixed { w } => (vec![w; rows], None),
        GuidanceMode::Variable { w_min, w_max } => {
            let w: Vec<f64> = (0..rows).map(|_| rng.random_range(w_min..w_max)).collect();
            (w.clone(), Some(w))
        }
    };
    let weights = if config.min_snr {
        n.iter().map(|&k| grid.min_snr_weight(k, schedule, config.gamma)).collect::<std::result::Result<_, _>>()?
    } else {
        vec![1.0; rows]
    };
    Ok(CdBatch { z0: b.z0, captions: b.captions, n, t_n, t_prev, z_n, cond, teacher_w, student_w, weights })
}

/// One teacher solver step from `z_n` to the previous grid time, using the
/// guided teacher output where the batch asks for it.
pub fn teacher_step<M: EpsModel + ?Sized>(
    teacher: &M,
    schedule: &NoiseSchedule,
    solver: SolverKind,
    batch: &CdBatch,
    counter: &mut QueryCounter,
) -> Result<Tensor> {
    if !solver.is_deterministic() {
        return Err(ConsistencyError::InvalidConfig("distillation needs a deterministic teacher solver".into()));
    }
    // Deterministic solvers never draw from this generator.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    Ok(solve_step(
        solver,
        teacher,
        schedule,
        &batch.z_n,
        &batch.t_n,
        &batch.t_prev,
        &batch.cond,
        &batch.teacher_w,
        counter,
        &mut unused,
    )?)
}

fn check_loss_shapes(rows: usize, cols: usize, target: &Tensor, weights: &[f64]) -> Result<()> {
    if target.shape() != [rows, cols] || weights.len() != rows {
        return Err(ConsistencyError::Shape(format!(
            "student {:?}, target {:?}, {} weights",
            [rows, cols],
            target.shape(),
            weights.len()
        )));
    }
    Ok(())
}

/// `mean_i w_i * ||student_i - target_i||^2`.
pub fn cd_loss(student: &Tensor, target: &Tensor, weights: &[f64]) -> Result<f64> {
    check_loss_shapes(student.rows(), student.cols(), target, weights)?;
    let total: f64 = (0..student.rows())
        .map(|i| {
            let d2: f64 = student.row(i).iter().zip(target.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
            weights[i] * d2
        })
        .sum();
    Ok(total / student.rows() as f64)
}

/// [`cd_loss`] on a tape; the target is a constant, so gradients reach the
/// student branch only.
pub fn cd_loss_on(tape: &mut Tape, student: Var, target: &Tensor, weights: &[f64]) -> Result<Var> {
    let [r, c] = tape.value(student).shape();
    check_loss_shapes(r, c, target, weights)?;
    let tg = tape.constant(target.clone());
    let diff = tape.sub(student, tg)?;
    let sq = tape.mul(diff, diff)?;
    let per = tape.sum_axis(sq, 1)?;
    let wv = tape.constant(Tensor::column(weights));
    let weighted = tape.mul(per, wv)?;
    Ok(tape.mean(weighted)?)
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    /// Unweighted consistency loss.
    pub l_cd: f64,
    pub clap_a: Option<f64>,
    pub clap_t: Option<f64>,
    /// The optimized objective (weighted, plus any auxiliary terms).
    pub weighted_loss: f64,
}

/// Per-step numbers averaged into [`CurveRow`]s.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct StepStats {
    pub l_cd: f64,
    pub clap_a: Option<f64>,
    pub clap_t: Option<f64>,
    pub objective: f64,
}

#[derive(Debug, Default)]
pub(crate) struct CurveAccumulator {
    epoch_len: usize,
    rows: Vec<CurveRow>,
    pending: Vec<StepStats>,
}

impl CurveAccumulator {
    pub fn new(dataset_len: usize, batch: usize) -> Self {
        CurveAccumulator { epoch_len: dataset_len.div_ceil(batch).max(1), ..Default::default() }
    }

    pub fn push(&mut self, s: StepStats) {
        self.pending.push(s);
        if self.pending.len() == self.epoch_len {
            self.flush();
        }
    }

    fn flush(&mut self) {
        if self.pending.is_empty() {
            return;
        }
        let n = self.pending.len() as f64;
        let avg = |f: &dyn Fn(&StepStats) -> f64| self.pending.iter().map(f).sum::<f64>() / n;
        let opt_avg = |f: &dyn Fn(&StepStats) -> Option<f64>| {
            let v: Option<Vec<f64>> = self.pending.iter().map(f).collect();
            v.map(|v| v.iter().sum::<f64>() / n)
        };
        self.rows.push(CurveRow {
            epoch: self.rows.len() + 1,
            l_cd: avg(&|s| s.l_cd),
            clap_a: opt_avg(&|s| s.clap_a),
            clap_t: opt_avg(&|s| s.clap_t),
            weighted_loss: avg(&|s| s.objective),
        });
        self.pending.clear();
    }

    pub fn finish(mut self) -> Vec<CurveRow> {
        self.flush();
        self.rows
    }
}

/// Optimizer state for distilling one student.
pub struct Distiller {
    student: ConsistencyModel,
    target: EmaTracker,
    report: EmaTracker,
    opt: AdamW,
    config: DistillConfig,
    grid: TimeGrid,
    rng: ChaCha8Rng,
    tape: Tape,
    iteration: usize,
    queries: QueryCounter,
}

impl Distiller {
    /// The target and report averages both start as copies of `student`.
    pub fn new(student: ConsistencyModel, config: DistillConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let grid = config.time_grid(student.param.schedule())?;
        let target = EmaTracker::new(&student.net, config.target_ema)?;
        let report = EmaTracker::new(&student.net, config.report_ema)?.with_warmup(config.report_warmup);
        let opt = AdamW::new(
            AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..AdamWConfig::default() },
            student.net.params(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(DATA_STREAM);
        Ok(Distiller {
            student,
            target,
            report,
            opt,
            config,
            grid,
            rng,
            tape: Tape::new(),
            iteration: 0,
            queries: QueryCounter::new(),
        })
    }

    pub fn student(&self) -> &ConsistencyModel {
        &self.student
    }

    pub fn target_net(&self) -> &DenoiserNet {
        self.target.shadow()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn config(&self) -> &DistillConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Teacher queries spent so far.
    pub fn teacher_queries(&self) -> u64 {
        self.queries.count()
    }

    pub fn draw_batch(&mut self, dataset: &ToyDataset) -> Result<CdBatch> {
        let mode = self.student.mode;
        draw_cd_batch(dataset, self.student.param.schedule(), &self.grid, &self.config, &mode, &mut self.rng)
    }

    /// Teacher step plus gradient-free target evaluation at the previous time.
    pub fn targets<M: EpsModel + ?Sized>(&mut self, teacher: &M, batch: &CdBatch) -> Result<Tensor> {
        let z_prev =
            teacher_step(teacher, self.student.param.schedule(), self.config.teacher_solver, batch, &mut self.queries)?;
        let target_model = ConsistencyModel {
            net: self.target.shadow().clone(),
            param: self.student.param.clone(),
            mode: self.student.mode,
        };
        let mut unused = QueryCounter::new();
        student_forward(&target_model, &z_prev, &batch.t_prev, &batch.cond, batch.student_w.as_deref(), &mut unused)
    }

    /// Applies one update whose objective is built by `objective` from the
    /// student output; returns its statistics.
    pub(crate) fn update_with<F>(&mut self, batch: &CdBatch, target: &Tensor, objective: F) -> Result<StepStats>
    where
        F: FnOnce(&mut Tape, Var, Var) -> Result<(Var, Option<f64>, Option<f64>)>,
    {
        self.tape.reset();
        let params = self.student.net.bind(&mut self.tape, true);
        let z = self.tape.constant(batch.z_n.clone());
        let out = student_forward_on(
            &mut self.tape,
            &self.student,
            &params,
            z,
            &batch.t_n,
            &batch.cond,
            batch.student_w.as_deref(),
        )?;
        let l_cd = cd_loss(self.tape.value(out), target, &vec![1.0; batch.weights.len()])?;
        let cd = cd_loss_on(&mut self.tape, out, target, &batch.weights)?;
        let (total, clap_a, clap_t) = objective(&mut self.tape, out, cd)?;
        let value = self.tape.value(total).item()?;
        let mut grads = self.tape.backward(total)?;
        let g: Vec<Option<Tensor>> = params.iter().map(|&p| grads.take(p)).collect();
        let lr = self.config.lr * self.config.lr_schedule.factor(self.iteration, self.config.iterations);
        self.opt.step(self.student.net.params_mut(), &g, lr)?;
        self.target.update(&self.student.net)?;
        self.report.update(&self.student.net)?;
        self.iteration += 1;
        Ok(StepStats { l_cd, clap_a, clap_t, objective: value })
    }

    /// One distillation update; returns `(unweighted, weighted)` loss before it.
    pub fn step<M: EpsModel + ?Sized>(&mut self, teacher: &M, dataset: &ToyDataset) -> Result<(f64, f64)> {
        let batch = self.draw_batch(dataset)?;
        let target = self.targets(teacher, &batch)?;
        let s = self.update_with(&batch, &target, |_, _, cd| Ok((cd, None, None)))?;
        Ok((s.l_cd, s.objective))
    }

    pub(crate) fn step_stats<M: EpsModel + ?Sized>(&mut self, teacher: &M, dataset: &ToyDataset) -> Result<StepStats> {
        let batch = self.draw_batch(dataset)?;
        let target = self.targets(teacher, &batch)?;
        self.update_with(&batch, &target, |_, _, cd| Ok((cd, None, None)))
    }

    /// The report average as the final student.
    pub fn finish(self) -> ConsistencyModel {
        ConsistencyModel { net: self.report.into_shadow(), param: self.student.param, mode: self.student.mode }
    }

    /// The raw optimized student, without averaging.
    pub fn into_raw_student(self) -> ConsistencyModel {
        self.student
    }
}

/// Distills `teacher` into a new student in `mode`. With `InitMode::Guided`
/// the student starts from `guided_source` instead of the teacher.
pub fn distill(
    teacher: &DenoiserNet,
    guided_source: Option<&DenoiserNet>,
    dataset: &ToyDataset,
    schedule: &NoiseSchedule,
    config: &DistillConfig,
    mode: GuidanceMode,
    seed: u64,
) -> Result<(ConsistencyModel, Vec<CurveRow>)> {
    config.validate()?;
    mode.validate()?;
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(INIT_STREAM);
    let student_cfg = teacher.config().clone().with_w_branch(mode.has_w_branch());
    let net = init_student_from_teacher(&student_cfg, teacher, config.init, guided_source, &mut init)?;
    let param = ConsistencyParam::new(dataset.sigma_data(), config.t_min, config.t_max, schedule.clone())?;
    let student = ConsistencyModel::new(net, param, mode)?;
    let mut d = Distiller::new(student, config.clone(), seed)?;
    let mut curve = CurveAccumulator::new(dataset.len(), config.batch);
    for _ in 0..config.iterations {
        curve.push(d.step_stats(teacher, dataset)?);
    }
    Ok((d.finish(), curve.finish()))
}

use std::path::Path;

use cfgcd_autodiff::Tensor;
use cfgcd_consistency::{
    distill, finetune_clap, generate_consistency, train_guided_teacher, ConsistencyModel, ConsistencyParam, CurveRow,
    GuidanceMode,
};
use cfgcd_metrics::{diversity_std, evaluate_samples, Diversity, MetricsReport, SampleMetrics};
use cfgcd_nets::{Condition, DenoiserNet, InitMode};
use cfgcd_schedules::{GridKind, NoiseSchedule, TimeGrid};
use cfgcd_teacher::{generate_diffusion, train_teacher, SolverKind, TrainLog};
use cfgcd_toyworld::{make_dataset, pretrain_embedder, ToyDataset, ToyEmbedder, ToyWorld};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointKind, FrozenChecksums};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// A resolved configuration together with the frozen world it describes.
pub struct Workspace {
    pub config: RunConfig,
    pub hash: String,
    pub dataset: ToyDataset,
    pub schedule: NoiseSchedule,
}

fn named(net: &DenoiserNet) -> Vec<(String, Tensor)> {
    net.names().iter().cloned().zip(net.params().iter().cloned()).collect()
}

impl Workspace {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dataset = make_dataset(config.world.clone(), config.data_seed)?;
        let schedule = config.schedule.build()?;
        Ok(Workspace { hash: config.hash(), config, dataset, schedule })
    }

    pub fn world(&self) -> &ToyWorld {
        self.dataset.world()
    }

    pub fn frozen(&self, embedder: Option<&ToyEmbedder>) -> FrozenChecksums {
        FrozenChecksums {
            world: self.world().checksum(),
            dataset: self.dataset.checksum(),
            embedder: embedder.map(ToyEmbedder::checksum),
        }
    }

    /// Refuses checkpoints built on a different world or dataset.
    pub fn audit(&self, ck: &Checkpoint) -> Result<()> {
        let mine = self.frozen(None);
        for (what, expected, found) in
            [("world", &ck.frozen.world, &mine.world), ("dataset", &ck.frozen.dataset, &mine.dataset)]
        {
            if expected != found {
                return Err(CliError::Checksum { what, expected: expected.clone(), found: found.clone() });
            }
        }
        Ok(())
    }

    /// Refuses an embedder other than the one `ck` recorded, when it recorded one.
    pub fn audit_embedder(&self, ck: &Checkpoint, embedder: &ToyEmbedder) -> Result<()> {
        match &ck.frozen.embedder {
            Some(expected) if *expected != embedder.checksum() => {
                Err(CliError::Checksum { what: "embedder", expected: expected.clone(), found: embedder.checksum() })
            }
            _ => Ok(()),
        }
    }

    pub fn pretrain_embedder(&self) -> Result<ToyEmbedder> {
        Ok(pretrain_embedder(self.world(), self.config.embedder.clone(), self.config.data_seed)?)
    }

    pub fn train_teacher(&self) -> Result<(DenoiserNet, TrainLog)> {
        Ok(train_teacher(&self.dataset, &self.schedule, self.config.teacher.clone(), self.config.seed)?)
    }

    /// Distills in `mode`, first fitting the guided initialization when the
    /// config asks for it.
    pub fn distill(&self, teacher: &DenoiserNet, mode: GuidanceMode) -> Result<(ConsistencyModel, Vec<CurveRow>)> {
        let c = &self.config;
        let source = match c.distill.init {
            InitMode::Guided => {
                Some(train_guided_teacher(teacher, &self.dataset, &self.schedule, &c.guided_init, c.seed)?)
            }
            InitMode::Unguided => None,
        };
        Ok(distill(teacher, source.as_ref(), &self.dataset, &self.schedule, &c.distill, mode, c.seed)?)
    }

    pub fn finetune(
        &self,
        student: ConsistencyModel,
        teacher: &DenoiserNet,
        embedder: &ToyEmbedder,
    ) -> Result<(ConsistencyModel, Vec<CurveRow>)> {
        let cfg = self.config.finetune_config();
        Ok(finetune_clap(student, teacher, &self.dataset, embedder, self.world().decoder(), &cfg, self.config.seed)?)
    }

    pub fn teacher_checkpoint(&self, net: &DenoiserNet, embedder: Option<&ToyEmbedder>) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Teacher,
            config: self.config.clone(),
            net: Some(net.config().clone()),
            mode: None,
            frozen: self.frozen(embedder),
            tensors: named(net),
        }
    }

    /// `source` carries the frozen record forward from the teacher.
    pub fn student_checkpoint(&self, model: &ConsistencyModel, source: &FrozenChecksums) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Student,
            config: self.config.clone(),
            net: Some(model.net.config().clone()),
            mode: Some(model.mode),
            frozen: source.clone(),
            tensors: named(&model.net),
        }
    }

    pub fn embedder_checkpoint(&self, embedder: &ToyEmbedder) -> Checkpoint {
        let names = ["w1", "b1", "w2", "b2", "table"];
        Checkpoint {
            kind: CheckpointKind::Embedder,
            config: self.config.clone(),
            net: None,
            mode: None,
            frozen: self.frozen(Some(embedder)),
            tensors: names.iter().map(|n| n.to_string()).zip(embedder.params().iter().cloned()).collect(),
        }
    }

    fn load_audited(&self, path: &Path, kind: CheckpointKind) -> Result<Checkpoint> {
        let ck = Checkpoint::load(path)?.expect_kind(kind)?;
        self.audit(&ck)?;
        Ok(ck)
    }

    pub fn load_teacher(&self, path: &Path) -> Result<(DenoiserNet, Checkpoint)> {
        let ck = self.load_audited(path, CheckpointKind::Teacher)?;
        let cfg = ck.net.clone().ok_or_else(|| CliError::Checkpoint("teacher checkpoint lacks a net config".into()))?;
        Ok((DenoiserNet::from_params(cfg, ck.tensors.clone())?, ck))
    }

    pub fn load_student(&self, path: &Path) -> Result<(ConsistencyModel, Checkpoint)> {
        let ck = self.load_audited(path, CheckpointKind::Student)?;
        let (cfg, mode) = match (ck.net.clone(), ck.mode) {
            (Some(c), Some(m)) => (c, m),
            _ => return Err(CliError::Checkpoint("student checkpoint lacks its net config or mode".into())),
        };
        let net = DenoiserNet::from_params(cfg, ck.tensors.clone())?;
        let d = &ck.config.distill;
        let param = ConsistencyParam::new(self.dataset.sigma_data(), d.t_min, d.t_max, ck.config.schedule.build()?)?;
        Ok((ConsistencyModel::new(net, param, mode)?, ck))
    }

    pub fn load_embedder(&self, path: &Path) -> Result<ToyEmbedder> {
        let ck = self.load_audited(path, CheckpointKind::Embedder)?;
        let params = ck.tensors.iter().map(|(_, t)| t.clone()).collect();
        let emb = ToyEmbedder::from_params(ck.config.embedder.clone(), params)?;
        self.audit_embedder(&ck, &emb)?;
        Ok(emb)
    }

    /// Uniform grid over the teacher's training time range.
    pub fn sampling_grid(&self, steps: usize) -> Result<TimeGrid> {
        let t = &self.config.teacher;
        Ok(TimeGrid::build(GridKind::Uniform, steps, &self.schedule, t.t_max, t.t_min)?)
    }
}

/// Condition-balanced latents gathered for one generator.
pub trait Generator {
    /// Returns the latents and the network queries spent on the batch.
    fn generate(&self, cond: &[Condition], seed: u64) -> Result<(Tensor, u64)>;
}

pub struct TeacherSampler<'a> {
    pub net: &'a DenoiserNet,
    pub schedule: &'a NoiseSchedule,
    pub solver: SolverKind,
    pub grid: TimeGrid,
    pub w: f64,
}

impl Generator for TeacherSampler<'_> {
    fn generate(&self, cond: &[Condition], seed: u64) -> Result<(Tensor, u64)> {
        Ok(generate_diffusion(self.net, self.schedule, self.solver, &self.grid, cond, self.w, seed)?)
    }
}

pub struct StudentSampler<'a> {
    pub model: &'a ConsistencyModel,
    pub w: Option<f64>,
}

impl Generator for StudentSampler<'_> {
    fn generate(&self, cond: &[Condition], seed: u64) -> Result<(Tensor, u64)> {
        Ok(generate_consistency(self.model, cond, self.w, seed)?)
    }
}

fn mean_metrics(all: &[SampleMetrics]) -> SampleMetrics {
    let n = all.len() as f64;
    let avg = |f: fn(&SampleMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
    SampleMetrics {
        fd: avg(|m| m.fd),
        kld: avg(|m| m.kld),
        clap_a: avg(|m| m.clap_a),
        clap_t: avg(|m| m.clap_t),
        is: avg(|m| m.is),
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Scores generators against a fixed reference set drawn from the world.
pub struct Evaluator<'a> {
    ws: &'a Workspace,
    embedder: &'a ToyEmbedder,
    classes: Vec<usize>,
    cond: Vec<Condition>,
    reference: Tensor,
}

impl<'a> Evaluator<'a> {
    pub fn new(ws: &'a Workspace, embedder: &'a ToyEmbedder) -> Result<Self> {
        let k = ws.world().classes();
        let e = &ws.config.eval;
        let classes: Vec<usize> = (0..e.samples_per_class * k).map(|i| i % k).collect();
        let cond = classes.iter().map(|&c| Condition::Class(c)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(e.reference_seed);
        let reference = ws.world().sample(&mut rng, &classes)?;
        Ok(Evaluator { ws, embedder, classes, cond, reference })
    }

    pub fn score(&self, generated: &Tensor) -> Result<SampleMetrics> {
        Ok(evaluate_samples(self.embedder, self.ws.world().decoder(), generated, &self.reference, &self.classes)?)
    }

    /// Metrics averaged over the configured sample seeds, and the queries of
    /// one generation.
    pub fn evaluate(&self, g: &dyn Generator) -> Result<(SampleMetrics, u64)> {
        let mut all = Vec::new();
        let mut queries = 0;
        for &s in &self.ws.config.eval.sample_seeds {
            let (z, q) = g.generate(&self.cond, s)?;
            all.push(self.score(&z)?);
            queries = q;
        }
        Ok((mean_metrics(&all), queries))
    }

    fn prompts(&self) -> Vec<Condition> {
        let k = self.ws.world().classes();
        (0..self.ws.config.eval.diversity_prompts).map(|i| Condition::Class(i % k)).collect()
    }

    /// Latents for the diversity prompts, one tensor per diversity seed.
    pub fn per_seed(&self, g: &dyn Generator) -> Result<Vec<Tensor>> {
        let prompts = self.prompts();
        self.ws.config.eval.diversity_seeds.iter().map(|&s| Ok(g.generate(&prompts, s)?.0)).collect()
    }

    /// Seed diversity of decoded generations.
    pub fn diversity(&self, g: &dyn Generator) -> Result<Diversity> {
        let decoder = self.ws.world().decoder();
        let audio: Vec<Tensor> =
            self.per_seed(g)?.iter().map(|z| decoder.decode(z)).collect::<std::result::Result<_, _>>()?;
        Ok(diversity_std(&audio)?)
    }

    /// Mean latent cosine similarity between `a` and `b` generations from the
    /// same seed, and from different seeds, over the diversity prompts.
    pub fn seed_coupling(&self, a: &dyn Generator, b: &dyn Generator) -> Result<(f64, f64)> {
        let (xa, xb) = (self.per_seed(a)?, self.per_seed(b)?);
        let (mut same, mut cross) = (Vec::new(), Vec::new());
        for (i, ta) in xa.iter().enumerate() {
            for (j, tb) in xb.iter().enumerate() {
                let sims = (0..ta.rows()).map(|r| cosine(ta.row(r), tb.row(r)));
                if i == j {
                    same.extend(sims);
                } else {
                    cross.extend(sims);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        Ok((mean(&same), mean(&cross)))
    }

    pub fn report(
        &self,
        model_id: &str,
        mode: &str,
        w: f64,
        queries: u64,
        m: &SampleMetrics,
        diversity: Option<f64>,
    ) -> MetricsReport {
        MetricsReport {
            model_id: model_id.to_string(),
            mode: mode.to_string(),
            w,
            queries,
            fd: m.fd,
            kld: m.kld,
            clap_a: m.clap_a,
            clap_t: m.clap_t,
            is: m.is,
            diversity_std: diversity,
            seeds: MetricsReport::seed_set(&self.ws.config.eval.sample_seeds),
            config_hash: self.ws.hash.clone(),
            seed: self.ws.config.seed,
        }
    }
}

/// The strength a student is sampled at when the caller gives none.
pub fn default_student_w(mode: &GuidanceMode, eval_w: f64) -> (Option<f64>, f64) {
    match *mode {
        GuidanceMode::Unguided => (None, 1.0),
        GuidanceMode::Direct { w } | GuidanceMode::Fixed { w } => (None, w),
        GuidanceMode::Variable { .. } => (Some(eval_w), eval_w),
    }
}

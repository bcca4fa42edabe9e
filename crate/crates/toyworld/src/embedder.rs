use cfgcd_autodiff::{Tape, Tensor, Var};
use cfgcd_nets::{AdamW, AdamWConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checksum::checksum_tensors;
use crate::error::{Result, WorldError};
use crate::world::ToyWorld;

const TRAIN_STREAM: u64 = 2;
const HOLDOUT_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    /// Softmax temperature applied to cosine similarities.
    pub temperature: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Standard deviation of the initial condition table.
    pub table_scale: f64,
    /// Fresh examples used to measure held-out retrieval accuracy.
    pub holdout: usize,
    /// Retrieval accuracy that pretraining must exceed.
    pub min_accuracy: f64,
    /// Control run: train against uniformly random labels.
    pub shuffle_labels: bool,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            hidden: 64,
            embed_dim: 16,
            temperature: 0.1,
            lr: 3e-3,
            steps: 1500,
            batch: 256,
            table_scale: 0.3,
            holdout: 2000,
            min_accuracy: 0.9,
            shuffle_labels: false,
        }
    }
}

/// Contrastive audio/condition embedder. An MLP encodes audio and a learned
/// table holds one vector per condition class.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEmbedder {
    config: EmbedderConfig,
    /// `[w1, b1, w2, b2, table]`.
    params: Vec<Tensor>,
    frozen: bool,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(rows, cols, data).expect("positive shape")
}

impl ToyEmbedder {
    pub fn new(config: EmbedderConfig, audio_dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.hidden == 0 || config.embed_dim == 0 || audio_dim == 0 || classes == 0 {
            return Err(WorldError::InvalidConfig("embedder dimensions must be positive".into()));
        }
        if !(config.temperature > 0.0) {
            return Err(WorldError::InvalidConfig("embedder temperature must be positive".into()));
        }
        let (h, e) = (config.hidden, config.embed_dim);
        let table = (0..classes * e).map(|_| config.table_scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let params = vec![
            uniform(rng, audio_dim, h, audio_dim),
            uniform(rng, 1, h, audio_dim),
            uniform(rng, h, e, h),
            uniform(rng, 1, e, h),
            Tensor::new(classes, e, table)?,
        ];
        Ok(ToyEmbedder { config, params, frozen: false })
    }

    /// Rebuilds a frozen embedder from stored `[w1, b1, w2, b2, table]`.
    pub fn from_params(config: EmbedderConfig, params: Vec<Tensor>) -> Result<Self> {
        let shapes: Vec<[usize; 2]> = params.iter().map(Tensor::shape).collect();
        let ok = shapes.len() == 5 && {
            let (m, h, e, k) = (shapes[0][0], config.hidden, config.embed_dim, shapes[4][0]);
            shapes == [[m, h], [1, h], [h, e], [1, e], [k, e]]
        };
        if !ok {
            return Err(WorldError::Dim(format!("embedder parameter shapes {shapes:?} do not match the config")));
        }
        Ok(ToyEmbedder { config, params, frozen: true })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.params[4].rows()
    }

    pub fn audio_dim(&self) -> usize {
        self.params[0].rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.params[4].cols()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn encode(tape: &mut Tape, p: &[Var], a: Var) -> Result<Var> {
        let h = tape.matmul(a, p[0])?;
        let h = tape.add(h, p[1])?;
        let h = tape.silu(h)?;
        let o = tape.matmul(h, p[2])?;
        Ok(tape.add(o, p[3])?)
    }

    fn check_audio(&self, a: &Tensor) -> Result<()> {
        if a.cols() != self.audio_dim() {
            return Err(WorldError::Dim(format!(
                "audio has {} columns, embedder expects {}",
                a.cols(),
                self.audio_dim()
            )));
        }
        Ok(())
    }

    /// Raw (unnormalized) audio embeddings, one row per input row.
    pub fn audio_embed(&self, audio: &Tensor) -> Result<Tensor> {
        self.check_audio(audio)?;
        let mut tape = Tape::new();
        let a = tape.constant(audio.clone());
        let out = self.audio_embed_on(&mut tape, a)?;
        Ok(tape.value(out).clone())
    }

    /// Records the encoder with its weights held constant, so gradients
    /// reach `audio` only.
    pub fn audio_embed_on(&self, tape: &mut Tape, audio: Var) -> Result<Var> {
        let p: Vec<Var> = self.params[..4].iter().map(|t| tape.constant(t.clone())).collect();
        Self::encode(tape, &p, audio)
    }

    /// Condition-table rows for the given classes.
    pub fn text_embed(&self, classes: &[usize]) -> Result<Tensor> {
        for &c in classes {
            if c >= self.classes() {
                return Err(WorldError::ClassOutOfRange { class: c, classes: self.classes() });
            }
        }
        Ok(self.params[4].select_rows(classes))
    }

    /// Class posteriors `softmax(cos(audio, table) / temperature)`.
    pub fn posteriors(&self, audio: &Tensor) -> Result<Tensor> {
        self.check_audio(audio)?;
        let mut tape = Tape::new();
        let p: Vec<Var> = self.params.iter().map(|t| tape.constant(t.clone())).collect();
        let a = tape.constant(audio.clone());
        let logits = Self::logits(&mut tape, &p, a, self.config.temperature)?;
        let out = tape.softmax(logits)?;
        Ok(tape.value(out).clone())
    }

    /// Most similar class per audio row.
    pub fn classify(&self, audio: &Tensor) -> Result<Vec<usize>> {
        let post = self.posteriors(audio)?;
        Ok((0..post.rows())
            .map(|i| {
                post.row(i)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect())
    }

    fn logits(tape: &mut Tape, p: &[Var], a: Var, temperature: f64) -> Result<Var> {
        let ea = Self::encode(tape, p, a)?;
        let na = tape.l2_norm(ea)?;
        let ea = tape.div(ea, na)?;
        let nt = tape.l2_norm(p[4])?;
        let et = tape.div(p[4], nt)?;
        let ett = tape.transpose(et)?;
        let cos = tape.matmul(ea, ett)?;
        Ok(tape.scale(cos, 1.0 / temperature)?)
    }

    /// Fraction of fresh decoded samples whose nearest class is their own.
    pub fn retrieval_accuracy(&self, world: &ToyWorld, rng: &mut ChaCha8Rng, n: usize) -> Result<f64> {
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..world.classes())).collect();
        let z = world.sample(rng, &classes)?;
        let audio = world.decoder().decode(&z)?;
        let pred = self.classify(&audio)?;
        let hits = pred.iter().zip(&classes).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / n.max(1) as f64)
    }

    pub fn checksum(&self) -> String {
        checksum_tensors(&self.params)
    }
}

/// Symmetric contrastive loss: audio-to-class cross-entropy averaged with a
/// class-to-audio term that spreads each class's mass over its batch members.
fn contrastive_loss(tape: &mut Tape, p: &[Var], audio: &Tensor, labels: &[usize], temperature: f64) -> Result<Var> {
    let b = labels.len();
    let k = tape.value(p[4]).rows();
    let a = tape.constant(audio.clone());
    let logits = ToyEmbedder::logits(tape, p, a, temperature)?;

    let mut onehot = Tensor::zeros(b, k);
    for (i, &c) in labels.iter().enumerate() {
        onehot.set(i, c, 1.0);
    }
    let lp = tape.log_softmax(logits)?;
    let oh = tape.constant(onehot);
    let picked = tape.mul(lp, oh)?;
    let l1 = tape.sum(picked)?;
    let l1 = tape.scale(l1, -1.0 / b as f64)?;

    let mut counts = vec![0usize; k];
    for &c in labels {
        counts[c] += 1;
    }
    let present = counts.iter().filter(|&&n| n > 0).count() as f64;
    let mut mask = Tensor::zeros(k, b);
    for (i, &c) in labels.iter().enumerate() {
        mask.set(c, i, 1.0 / (counts[c] as f64 * present));
    }
    let lt = tape.transpose(logits)?;
    let lpt = tape.log_softmax(lt)?;
    let m = tape.constant(mask);
    let weighted = tape.mul(lpt, m)?;
    let l2 = tape.sum(weighted)?;
    let l2 = tape.scale(l2, -1.0)?;

    let loss = tape.add(l1, l2)?;
    Ok(tape.scale(loss, 0.5)?)
}

/// Trains an embedder on fresh decoded samples with clean labels, freezes it
/// and reports held-out retrieval accuracy. Never fails on low accuracy.
pub fn train_embedder(world: &ToyWorld, config: EmbedderConfig, seed: u64) -> Result<(ToyEmbedder, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_STREAM);
    let mut emb = ToyEmbedder::new(config.clone(), world.config().audio_dim, world.classes(), &mut rng)?;
    let opt_cfg = AdamWConfig { lr: config.lr, weight_decay: 0.0, ..AdamWConfig::default() };
    let mut opt = AdamW::new(opt_cfg, &emb.params);
    let mut tape = Tape::new();
    for _ in 0..config.steps {
        let classes: Vec<usize> = (0..config.batch).map(|_| rng.random_range(0..world.classes())).collect();
        let z = world.sample(&mut rng, &classes)?;
        let audio = world.decoder().decode(&z)?;
        let labels: Vec<usize> = if config.shuffle_labels {
            (0..config.batch).map(|_| rng.random_range(0..world.classes())).collect()
        } else {
            classes
        };
        tape.reset();
        let p: Vec<Var> = emb.params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = contrastive_loss(&mut tape, &p, &audio, &labels, config.temperature)?;
        let mut grads = tape.backward(loss)?;
        let g: Vec<Option<Tensor>> = p.iter().map(|&v| grads.take(v)).collect();
        opt.step(&mut emb.params, &g, config.lr)?;
    }
    emb.freeze();
    let mut hold = ChaCha8Rng::seed_from_u64(seed);
    hold.set_stream(HOLDOUT_STREAM);
    let acc = emb.retrieval_accuracy(world, &mut hold, config.holdout)?;
    Ok((emb, acc))
}

/// [`train_embedder`] that refuses an embedder whose held-out retrieval
/// accuracy does not exceed `config.min_accuracy`.
pub fn pretrain_embedder(world: &ToyWorld, config: EmbedderConfig, seed: u64) -> Result<ToyEmbedder> {
    let threshold = config.min_accuracy;
    let (emb, acc) = train_embedder(world, config, seed)?;
    if acc > threshold {
        Ok(emb)
    } else {
        Err(WorldError::PretrainFailed { accuracy: acc, threshold })
    }
}

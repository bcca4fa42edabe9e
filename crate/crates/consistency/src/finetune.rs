use cfgcd_autodiff::{Tape, Tensor, Var};
use cfgcd_nets::Condition;
use cfgcd_teacher::EpsModel;
use cfgcd_toyworld::{ToyDataset, ToyDecoder, ToyEmbedder};
use serde::{Deserialize, Serialize};

use crate::distill::{cd_loss_on, CdBatch, CurveAccumulator, CurveRow, DistillConfig, Distiller};
use crate::error::{ConsistencyError, Result};
use crate::model::{student_forward_on, ConsistencyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub distill: DistillConfig,
    pub lambda_a: f64,
    pub lambda_t: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            distill: DistillConfig { iterations: 500, ..DistillConfig::default() },
            lambda_a: 0.1,
            lambda_t: 0.1,
        }
    }
}

/// Batch-mean clipped similarity scores of the decoded student output,
/// against the decoded clean latent (audio) and the caption row (text).
/// Rows whose condition was dropped do not take part.
pub fn clap_terms_on(
    tape: &mut Tape,
    z0_hat: Var,
    batch: &CdBatch,
    embedder: &ToyEmbedder,
    decoder: &ToyDecoder,
) -> Result<(Var, Var)> {
    if !embedder.is_frozen() {
        return Err(ConsistencyError::UnfrozenEmbedder);
    }
    let audio = decoder.decode_on(tape, z0_hat)?;
    let e = embedder.audio_embed_on(tape, audio)?;
    let ref_a = tape.constant(embedder.audio_embed(&decoder.decode(&batch.z0)?)?);
    let ref_t = tape.constant(embedder.text_embed(&batch.captions)?);
    let mask: Vec<f64> = batch.cond.iter().map(|c| if matches!(c, Condition::Class(_)) { 1.0 } else { 0.0 }).collect();
    let live = mask.iter().sum::<f64>().max(1.0);
    let mask = tape.constant(Tensor::column(&mask));
    let mut score = |r: Var| -> Result<Var> {
        let cos = tape.cosine_similarity(e, r)?;
        let s = tape.scale(cos, 100.0)?;
        let s = tape.clamp_min(s, 0.0)?;
        let s = tape.mul(s, mask)?;
        let s = tape.sum(s)?;
        Ok(tape.scale(s, 1.0 / live)?)
    };
    let a = score(ref_a)?;
    let t = score(ref_t)?;
    Ok((a, t))
}

/// `cd + lambda_a (1 - clap_a / 100) + lambda_t (1 - clap_t / 100)`.
fn combine(tape: &mut Tape, cd: Var, clap_a: Var, clap_t: Var, lambda_a: f64, lambda_t: f64) -> Result<Var> {
    let a = tape.scale(clap_a, -lambda_a / 100.0)?;
    let a = tape.offset(a, lambda_a)?;
    let t = tape.scale(clap_t, -lambda_t / 100.0)?;
    let t = tape.offset(t, lambda_t)?;
    let s = tape.add(cd, a)?;
    Ok(tape.add(s, t)?)
}

/// Full finetuning objective for `batch`, recorded with the student's
/// parameters bound as `params`. Returns `(total, clap_a, clap_t)`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_loss_on(
    tape: &mut Tape,
    model: &ConsistencyModel,
    params: &[Var],
    batch: &CdBatch,
    target: &Tensor,
    embedder: &ToyEmbedder,
    decoder: &ToyDecoder,
    lambda_a: f64,
    lambda_t: f64,
) -> Result<(Var, Var, Var)> {
    let z = tape.constant(batch.z_n.clone());
    let out = student_forward_on(tape, model, params, z, &batch.t_n, &batch.cond, batch.student_w.as_deref())?;
    let cd = cd_loss_on(tape, out, target, &batch.weights)?;
    let (a, t) = clap_terms_on(tape, out, batch, embedder, decoder)?;
    let total = combine(tape, cd, a, t, lambda_a, lambda_t)?;
    Ok((total, a, t))
}

/// Continues distilling `model` with the similarity terms added. Decoder and
/// embedder stay fixed; only the student moves.
pub fn finetune_clap<M: EpsModel + ?Sized>(
    model: ConsistencyModel,
    teacher: &M,
    dataset: &ToyDataset,
    embedder: &ToyEmbedder,
    decoder: &ToyDecoder,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<(ConsistencyModel, Vec<CurveRow>)> {
    if !embedder.is_frozen() {
        return Err(ConsistencyError::UnfrozenEmbedder);
    }
    let (la, lt) = (config.lambda_a, config.lambda_t);
    if !(la >= 0.0 && lt >= 0.0) {
        return Err(ConsistencyError::InvalidConfig("loss weights must be non-negative".into()));
    }
    let mut d = Distiller::new(model, config.distill.clone(), seed)?;
    let mut curve = CurveAccumulator::new(dataset.len(), config.distill.batch);
    for _ in 0..config.distill.iterations {
        let batch = d.draw_batch(dataset)?;
        let target = d.targets(teacher, &batch)?;
        let stats = d.update_with(&batch, &target, |tape, out, cd| {
            let (a, t) = clap_terms_on(tape, out, &batch, embedder, decoder)?;
            let (va, vt) = (tape.value(a).item()?, tape.value(t).item()?);
            Ok((combine(tape, cd, a, t, la, lt)?, Some(va), Some(vt)))
        })?;
        curve.push(stats);
    }
    Ok((d.finish(), curve.finish()))
}

use cfgcd_autodiff::Tensor;
use cfgcd_toyworld::{ToyDecoder, ToyEmbedder};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{MetricsError, Result};

/// Smoothing added to both sides of every posterior ratio.
pub const KLD_EPSILON: f64 = 1e-8;

fn moments(x: &Tensor) -> (Vec<f64>, DMatrix<f64>) {
    let n = x.rows() as f64;
    let d = x.cols();
    let mut mu = vec![0.0; d];
    for i in 0..x.rows() {
        for (m, v) in mu.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n;
    }
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..x.rows() {
        let r = x.row(i);
        for p in 0..d {
            let dp = r[p] - mu[p];
            for q in p..d {
                cov[(p, q)] += dp * (r[q] - mu[q]);
            }
        }
    }
    for p in 0..d {
        for q in p..d {
            let v = cov[(p, q)] / (n - 1.0);
            cov[(p, q)] = v;
            cov[(q, p)] = v;
        }
    }
    (mu, cov)
}

fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let roots = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})` over
/// sample moments (unbiased covariances). Square roots clip negative
/// eigenvalues at zero.
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(MetricsError::Shape(format!("{} vs {} columns", a.cols(), b.cols())));
    }
    let needed = a.cols() + 1;
    for x in [a, b] {
        if x.rows() < needed {
            return Err(MetricsError::TooFewSamples { what: "frechet_distance", needed, got: x.rows() });
        }
    }
    let (ma, ca) = moments(a);
    let (mb, cb) = moments(b);
    let ra = sqrt_psd(ca.clone());
    let cross = sqrt_psd(&ra * &cb * &ra);
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
    let trace = ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok((mean_term + trace).max(0.0))
}

/// Mean over conditions of `KL(mean ref posterior || mean generated posterior)`.
/// Conditions absent from either side are skipped.
pub fn kld_metric(gen_post: &Tensor, gen_cond: &[usize], ref_post: &Tensor, ref_cond: &[usize]) -> Result<f64> {
    if gen_post.rows() != gen_cond.len() || ref_post.rows() != ref_cond.len() || gen_post.cols() != ref_post.cols() {
        return Err(MetricsError::Shape("posteriors and condition labels disagree".into()));
    }
    let k = gen_post.cols();
    let mean_for = |post: &Tensor, labels: &[usize], c: usize| -> Option<Vec<f64>> {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.is_empty() {
            return None;
        }
        let mut m = vec![0.0; k];
        for &i in &rows {
            for (mv, p) in m.iter_mut().zip(post.row(i)) {
                *mv += p;
            }
        }
        Some(m.into_iter().map(|v| v / rows.len() as f64).collect())
    };
    let conds: std::collections::BTreeSet<usize> = ref_cond.iter().copied().collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in conds {
        let (Some(p), Some(q)) = (mean_for(ref_post, ref_cond, c), mean_for(gen_post, gen_cond, c)) else {
            continue;
        };
        total += p.iter().zip(&q).map(|(&pi, &qi)| pi * ((pi + KLD_EPSILON) / (qi + KLD_EPSILON)).ln()).sum::<f64>();
        count += 1;
    }
    if count == 0 {
        return Err(MetricsError::TooFewSamples { what: "kld_metric", needed: 1, got: 0 });
    }
    Ok(total / count as f64)
}

/// `max(100 cos(candidate, reference), 0)`.
pub fn clap_score(candidate: &[f64], reference: &[f64]) -> Result<f64> {
    if candidate.len() != reference.len() {
        return Err(MetricsError::Shape(format!("{} vs {} entries", candidate.len(), reference.len())));
    }
    let na = candidate.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = reference.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricsError::ZeroNorm);
    }
    let dot: f64 = candidate.iter().zip(reference).map(|(a, b)| a * b).sum();
    Ok((100.0 * dot / (na * nb)).clamp(0.0, 100.0))
}

/// `exp(mean_x KL(p(y|x) || p(y)))` with `p(y)` the mean posterior.
pub fn inception_score(posteriors: &Tensor) -> Result<f64> {
    let n = posteriors.rows();
    if n < 2 || posteriors.is_empty() {
        return Err(MetricsError::TooFewSamples { what: "inception_score", needed: 2, got: n });
    }
    let k = posteriors.cols();
    let mut marginal = vec![0.0; k];
    for i in 0..n {
        for (m, p) in marginal.iter_mut().zip(posteriors.row(i)) {
            *m += p / n as f64;
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for (j, &p) in posteriors.row(i).iter().enumerate() {
            if p > 0.0 {
                kl += p * (p / marginal[j]).ln();
            }
        }
    }
    Ok((kl / n as f64).exp().max(1.0))
}

/// Seed-diversity statistic and the number of constant samples met on the way.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diversity {
    pub value: f64,
    /// Samples with zero range, normalized to all zeros.
    pub constant_samples: usize,
}

/// `per_seed[s]` holds one row per prompt. Each row is min-max normalized to
/// `[0, 1]`, the population standard deviation across seeds is taken per
/// coordinate, and the result is averaged over coordinates and prompts.
pub fn diversity_std(per_seed: &[Tensor]) -> Result<Diversity> {
    if per_seed.len() < 2 {
        return Err(MetricsError::TooFewSamples { what: "diversity_std", needed: 2, got: per_seed.len() });
    }
    let shape = per_seed[0].shape();
    if per_seed.iter().any(|t| t.shape() != shape) {
        return Err(MetricsError::Shape("every seed must cover the same prompts".into()));
    }
    let mut constant = 0;
    let normalized: Vec<Tensor> = per_seed
        .iter()
        .map(|t| {
            let mut out = t.clone();
            for i in 0..t.rows() {
                let row = out.row_mut(i);
                let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    for v in row.iter_mut() {
                        *v = (*v - lo) / (hi - lo);
                    }
                } else {
                    constant += 1;
                    row.fill(0.0);
                }
            }
            out
        })
        .collect();
    let s = per_seed.len() as f64;
    let [rows, cols] = shape;
    let mut total = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let mean = normalized.iter().map(|t| t.get(i, j)).sum::<f64>() / s;
            let var = normalized.iter().map(|t| (t.get(i, j) - mean).powi(2)).sum::<f64>() / s;
            total += var.sqrt();
        }
    }
    Ok(Diversity { value: total / (rows * cols) as f64, constant_samples: constant })
}

/// Metrics of generated latents against reference latents row-paired by
/// condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    /// Mean over conditions of the per-condition Fréchet distance between
    /// raw embedder features.
    pub fd: f64,
    pub kld: f64,
    pub clap_a: f64,
    pub clap_t: f64,
    pub is: f64,
}

/// Decodes and embeds both sets, then scores them. Row `i` of `generated`
/// and of `reference` share condition `cond[i]`.
pub fn evaluate_samples(
    embedder: &ToyEmbedder,
    decoder: &ToyDecoder,
    generated: &Tensor,
    reference: &Tensor,
    cond: &[usize],
) -> Result<SampleMetrics> {
    if generated.shape() != reference.shape() || generated.rows() != cond.len() {
        return Err(MetricsError::Shape(format!(
            "generated {:?}, reference {:?}, {} conditions",
            generated.shape(),
            reference.shape(),
            cond.len()
        )));
    }
    let ga = decoder.decode(generated)?;
    let ra = decoder.decode(reference)?;
    let ge = embedder.audio_embed(&ga)?;
    let re = embedder.audio_embed(&ra)?;
    let gp = embedder.posteriors(&ga)?;
    let rp = embedder.posteriors(&ra)?;
    let te = embedder.text_embed(cond)?;

    let classes: std::collections::BTreeSet<usize> = cond.iter().copied().collect();
    let mut fd = 0.0;
    for &c in &classes {
        let idx: Vec<usize> = (0..cond.len()).filter(|&i| cond[i] == c).collect();
        fd += frechet_distance(&ge.select_rows(&idx), &re.select_rows(&idx))?;
    }
    fd /= classes.len() as f64;
    let n = cond.len() as f64;
    let mut clap_a = 0.0;
    let mut clap_t = 0.0;
    for i in 0..cond.len() {
        clap_a += clap_score(ge.row(i), re.row(i))?;
        clap_t += clap_score(ge.row(i), te.row(i))?;
    }
    Ok(SampleMetrics {
        fd,
        kld: kld_metric(&gp, cond, &rp, cond)?,
        clap_a: clap_a / n,
        clap_t: clap_t / n,
        is: inception_score(&gp)?,
    })
}

use cfgcd_autodiff::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checksum::checksum_tensors;
use crate::decoder::ToyDecoder;
use crate::error::{Result, WorldError};
use crate::oracle::Gaussian;

/// RNG stream for the world's fixed structure (centers, components, decoder).
const STRUCTURE_STREAM: u64 = 0;
/// RNG stream for the finite training set and its captions.
const DATASET_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub classes: usize,
    pub dim: usize,
    /// Gaussian components per class.
    pub components: usize,
    pub samples_per_class: usize,
    /// Range of per-axis standard deviations of a component.
    pub component_std: [f64; 2],
    /// Per-axis standard deviation of component means around their class center.
    pub component_offset: f64,
    /// Class centers are drawn from `N(0, center_scale^2 I)`.
    pub center_scale: f64,
    /// Minimum Euclidean distance between class centers.
    pub center_separation: f64,
    /// Probability that a training caption is replaced by a uniform label.
    pub caption_noise: f64,
    pub audio_dim: usize,
    pub decoder_gain: f64,
    pub decoder_bias: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            classes: 8,
            dim: 8,
            components: 6,
            samples_per_class: 4000,
            component_std: [0.02, 0.06],
            component_offset: 0.32,
            center_scale: 1.0,
            center_separation: 1.6,
            caption_noise: 0.3,
            audio_dim: 32,
            decoder_gain: 1.2,
            decoder_bias: 0.1,
        }
    }
}

impl WorldConfig {
    /// A one-class, one-component world whose data is exactly Gaussian.
    pub fn single_gaussian(dim: usize) -> Self {
        WorldConfig {
            classes: 1,
            dim,
            components: 1,
            caption_noise: 0.0,
            component_std: [0.2, 0.8],
            component_offset: 0.0,
            ..WorldConfig::default()
        }
    }

    /// Per-axis standard deviation of a whole class, bounded from above.
    pub fn class_sigma(&self) -> f64 {
        let offset = if self.components > 1 { self.component_offset } else { 0.0 };
        (offset * offset + self.component_std[1] * self.component_std[1]).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(WorldError::InvalidConfig(m.to_string()));
        if self.classes == 0 || self.dim == 0 || self.components == 0 {
            return bad("classes, dim and components must be positive");
        }
        if self.samples_per_class == 0 || self.audio_dim == 0 {
            return bad("samples_per_class and audio_dim must be positive");
        }
        let [lo, hi] = self.component_std;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(WorldError::DegenerateCovariance(format!(
                "component_std range [{lo}, {hi}] must satisfy 0 < lo <= hi"
            )));
        }
        if !(0.0..=1.0).contains(&self.caption_noise) {
            return bad("caption_noise must lie in [0, 1]");
        }
        if !(self.component_offset >= 0.0 && self.center_scale > 0.0) {
            return bad("component_offset must be >= 0 and center_scale > 0");
        }
        if self.classes > 1 && self.center_separation < 3.0 * self.class_sigma() {
            return Err(WorldError::InvalidConfig(format!(
                "center_separation {} is below 3 sigma = {:.4}",
                self.center_separation,
                3.0 * self.class_sigma()
            )));
        }
        Ok(())
    }
}

/// The generative structure: per-class Gaussian mixtures plus the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    config: WorldConfig,
    centers: Tensor,
    /// Per class, `components x dim` component means.
    means: Vec<Tensor>,
    /// Per class and component, a `dim x dim` factor `L` with covariance `L L^T`.
    factors: Vec<Vec<Tensor>>,
    decoder: ToyDecoder,
}

fn random_rotation<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

impl ToyWorld {
    pub fn generate(config: WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STRUCTURE_STREAM);
        let (k, d, m) = (config.classes, config.dim, config.components);

        let max_attempts = 10_000;
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut attempts = 0;
        while centers.len() < k {
            attempts += 1;
            if attempts > max_attempts {
                return Err(WorldError::Separation {
                    classes: k,
                    separation: config.center_separation,
                    attempts: max_attempts,
                });
            }
            let c: Vec<f64> = (0..d).map(|_| config.center_scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let far = centers.iter().all(|o| {
                let dist: f64 = o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                dist.sqrt() > config.center_separation
            });
            if far {
                centers.push(c);
            }
        }

        let mut means = Vec::with_capacity(k);
        for c in &centers {
            let mut mu = Tensor::zeros(m, d);
            for j in 0..m {
                for i in 0..d {
                    let off = config.component_offset * rng.sample::<f64, _>(StandardNormal);
                    mu.set(j, i, c[i] + off);
                }
            }
            means.push(mu);
        }

        let [lo, hi] = config.component_std;
        let mut factors = Vec::with_capacity(k);
        for _ in 0..k {
            let mut per = Vec::with_capacity(m);
            for _ in 0..m {
                let q = random_rotation(&mut rng, d);
                let std: Vec<f64> = (0..d).map(|_| if lo == hi { lo } else { rng.random_range(lo..hi) }).collect();
                let mut l = Tensor::zeros(d, d);
                for r in 0..d {
                    for c in 0..d {
                        l.set(r, c, q[(r, c)] * std[c]);
                    }
                }
                per.push(l);
            }
            factors.push(per);
        }

        let decoder = ToyDecoder::random(&mut rng, d, config.audio_dim, config.decoder_gain, config.decoder_bias);
        let centers = Tensor::from_rows(&centers)?;
        Ok(ToyWorld { config, centers, means, factors, decoder })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn decoder(&self) -> &ToyDecoder {
        &self.decoder
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.config.classes {
            Err(WorldError::ClassOutOfRange { class, classes: self.config.classes })
        } else {
            Ok(())
        }
    }

    /// One draw from class `class`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, class: usize, out: &mut [f64]) -> Result<()> {
        self.check_class(class)?;
        let d = self.config.dim;
        let j = rng.random_range(0..self.config.components);
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mu = self.means[class].row(j);
        let l = &self.factors[class][j];
        for r in 0..d {
            let mut acc = mu[r];
            for (c, e) in eps.iter().enumerate() {
                acc += l.get(r, c) * e;
            }
            out[r] = acc;
        }
        Ok(())
    }

    /// One row per entry of `classes`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, classes: &[usize]) -> Result<Tensor> {
        let d = self.config.dim;
        let mut out = Tensor::zeros(classes.len().max(1), d);
        for (i, &c) in classes.iter().enumerate() {
            self.sample_into(rng, c, out.row_mut(i))?;
        }
        Ok(out)
    }

    /// Exact mean of the class mixture.
    pub fn class_mean(&self, class: usize) -> Result<Vec<f64>> {
        self.check_class(class)?;
        let mu = &self.means[class];
        let m = self.config.components as f64;
        Ok((0..self.config.dim).map(|i| (0..mu.rows()).map(|j| mu.get(j, i)).sum::<f64>() / m).collect())
    }

    /// Exact covariance of the class mixture, row-major.
    pub fn class_covariance(&self, class: usize) -> Result<Vec<f64>> {
        let mean = self.class_mean(class)?;
        let d = self.config.dim;
        let m = self.config.components;
        let mut cov = vec![0.0; d * d];
        for j in 0..m {
            let mu = self.means[class].row(j);
            let l = &self.factors[class][j];
            for r in 0..d {
                for c in 0..d {
                    let ll: f64 = (0..d).map(|k| l.get(r, k) * l.get(c, k)).sum();
                    cov[r * d + c] += (ll + (mu[r] - mean[r]) * (mu[c] - mean[c])) / m as f64;
                }
            }
        }
        Ok(cov)
    }

    /// The class distribution as a single Gaussian; only valid for
    /// one-component classes.
    pub fn class_gaussian(&self, class: usize) -> Result<Gaussian> {
        self.check_class(class)?;
        if self.config.components != 1 {
            return Err(WorldError::NotGaussian { class, components: self.config.components });
        }
        Gaussian::new(self.class_mean(class)?, self.class_covariance(class)?)
    }

    pub fn checksum(&self) -> String {
        let mut all: Vec<&Tensor> = vec![&self.centers];
        all.extend(self.means.iter());
        for f in &self.factors {
            all.extend(f.iter());
        }
        all.push(self.decoder.weight());
        all.push(self.decoder.bias());
        checksum_tensors(all)
    }
}

/// A minibatch of clean latents with their true classes and training captions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub z0: Tensor,
    pub classes: Vec<usize>,
    pub captions: Vec<usize>,
}

/// A finite, seeded training set drawn from a [`ToyWorld`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    world: ToyWorld,
    seed: u64,
    z0: Tensor,
    classes: Vec<usize>,
    captions: Vec<usize>,
    sigma_data: f64,
}

/// Builds the world and its training set from `seed`.
pub fn make_dataset(config: WorldConfig, seed: u64) -> Result<ToyDataset> {
    let world = ToyWorld::generate(config, seed)?;
    ToyDataset::from_world(world, seed)
}

impl ToyDataset {
    pub fn from_world(world: ToyWorld, seed: u64) -> Result<Self> {
        let cfg = world.config().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(DATASET_STREAM);
        let n = cfg.classes * cfg.samples_per_class;
        let classes: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
        let z0 = world.sample(&mut rng, &classes)?;
        let captions = classes
            .iter()
            .map(|&c| if rng.random::<f64>() < cfg.caption_noise { rng.random_range(0..cfg.classes) } else { c })
            .collect();
        let sigma_data = (z0.data().iter().map(|x| x * x).sum::<f64>() / z0.len() as f64).sqrt();
        if !sigma_data.is_finite() || sigma_data <= 0.0 {
            return Err(WorldError::DegenerateCovariance(format!("data RMS {sigma_data}")));
        }
        Ok(ToyDataset { world, seed, z0, classes, captions, sigma_data })
    }

    pub fn world(&self) -> &ToyWorld {
        &self.world
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn z0(&self) -> &Tensor {
        &self.z0
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn captions(&self) -> &[usize] {
        &self.captions
    }

    /// Root-mean-square of all training latents.
    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    /// Uniform draw of `size` examples with replacement.
    pub fn batch<R: Rng + ?Sized>(&self, rng: &mut R, size: usize) -> Batch {
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        Batch {
            z0: self.z0.select_rows(&idx),
            classes: idx.iter().map(|&i| self.classes[i]).collect(),
            captions: idx.iter().map(|&i| self.captions[i]).collect(),
        }
    }

    /// Checksum of the world structure and every stored example.
    pub fn checksum(&self) -> String {
        let labels = Tensor::new(2, self.len(), self.classes.iter().chain(&self.captions).map(|&c| c as f64).collect())
            .expect("non-empty dataset");
        let structure = self.world.checksum();
        let data = checksum_tensors([&self.z0, &labels]);
        format!("{}", &checksum_of_strings(&[&structure, &data]))
    }
}

fn checksum_of_strings(parts: &[&str]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

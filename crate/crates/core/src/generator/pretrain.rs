use std::path::PathBuf;

use candle_core::{DType, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, NoiseMode};
use crate::checkpoint::Archive;
use crate::error::{bail, Error, Result};
use crate::latent::{sample_z_plus_batch, MappingConfig, MappingNetwork};
use crate::nn::{scalar, seeded_rng, Adam};
use crate::objectives::{discriminator_adversarial, generator_adversarial, r1_penalty, FeatureExtractor};

pub const MIN_PRETRAIN_PHOTOS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub generator: GeneratorConfig,
    pub mapping_depth: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub r1_weight: f64,
    pub seed: u64,
    /// Where the last finite state is written if training diverges.
    pub divergence_checkpoint: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::desk(),
            mapping_depth: 4,
            steps: 200,
            batch_size: 8,
            // no equalized lr, so the StyleGAN2 rate of 2e-3 is far too hot here
            lr: 2e-4,
            r1_weight: 1.0,
            seed: 0,
            divergence_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub d_loss: Vec<f64>,
    pub g_loss: Vec<f64>,
    pub r1: Vec<f64>,
}

/// Mapping network, synthesis network and discriminator after pretraining.
#[derive(Clone, Debug)]
pub struct PretrainedBase {
    pub mapping: MappingNetwork,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub report: PretrainReport,
}

impl PretrainedBase {
    /// Freshly initialised (untrained) networks for `config`.
    pub fn initial(config: &PretrainConfig, dtype: DType) -> Result<Self> {
        let mut rng = seeded_rng(config.seed);
        let mapping_cfg = MappingConfig {
            dim: config.generator.latent_dim,
            depth: config.mapping_depth,
        };
        Ok(Self {
            mapping: MappingNetwork::new(mapping_cfg, dtype, &mut rng)?,
            generator: Generator::new(config.generator.clone(), dtype, &mut rng)?,
            discriminator: Discriminator::new(DiscriminatorConfig::mirror(&config.generator), dtype, &mut rng)?,
            report: PretrainReport::default(),
        })
    }

    /// Draws `n` images `g(f(z))` with i.i.d. per-segment `z`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        let cfg = self.generator.config();
        let z = sample_z_plus_batch(rng, n, cfg.num_styles(), cfg.latent_dim, self.generator.dtype())?;
        self.generator.synthesize(&self.mapping.forward(&z)?, NoiseMode::Zero)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = self.generator.to_archive()?;
        a.merge(self.discriminator.to_archive()?);
        a.insert_store(self.mapping.store())?;
        a.metadata
            .insert("mapping.config".into(), serde_json::to_string(&self.mapping.config())?);
        Ok(a)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let Some(cfg) = archive.metadata.get("mapping.config") else {
            bail!(Data, "archive carries no mapping config");
        };
        let mapping = MappingNetwork::new(serde_json::from_str(cfg)?, DType::F32, &mut seeded_rng(0))?;
        archive.load_into(mapping.store())?;
        Ok(Self {
            mapping,
            generator: Generator::from_archive(archive)?,
            discriminator: Discriminator::from_archive(archive)?,
            report: PretrainReport::default(),
        })
    }
}

/// `mean D(real) − mean D(fake)`.
pub fn logit_gap(d: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<f64> {
    Ok(scalar(&d.forward(real)?.mean_all()?)? - scalar(&d.forward(fake)?.mean_all()?)?)
}

/// Σ over extractor taps of the L2 distance between the mean feature vectors
/// (averaged over batch and space) of two image sets. A cheap stand-in for FID.
pub fn feature_distance_proxy(fx: &FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<f64> {
    let (fa, fb) = (fx.forward(a)?, fx.forward(b)?);
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let mx = x.mean((0, 2, 3))?;
        let my = y.mean((0, 2, 3))?;
        total += scalar(&(mx - my)?.sqr()?.sum_all()?)?.sqrt();
    }
    Ok(total)
}

/// Trains mapping, synthesis and discriminator from scratch on `photos`
/// `(N, 3, R, R)` with the non-saturating loss plus R1.
pub fn pretrain_base(config: &PretrainConfig, photos: &Tensor) -> Result<PretrainedBase> {
    config.generator.validate()?;
    let (n, c, h, w) = photos.dims4()?;
    let r = config.generator.resolution;
    if c != 3 || h != r || w != r {
        bail!(Shape, "photos must be (N, 3, {r}, {r}), got {:?}", photos.dims());
    }
    if n < MIN_PRETRAIN_PHOTOS {
        bail!(Data, "pretraining needs at least {MIN_PRETRAIN_PHOTOS} photos, got {n}");
    }
    if config.batch_size == 0 || config.batch_size > n {
        bail!(Config, "batch size must be in 1..={n}");
    }
    let mut base = PretrainedBase::initial(config, photos.dtype())?;
    let mut rng = seeded_rng(config.seed ^ 0x5EED);
    let mut g_vars = base.mapping.store().vars();
    g_vars.extend(base.generator.store().vars());
    let mut opt_g = Adam::new(g_vars, config.lr, 0.0, 0.99);
    let mut opt_d = Adam::new(base.discriminator.vars(), config.lr, 0.0, 0.99);
    let mut good = snapshot(&base)?;
    let (ns, dim) = (config.generator.num_styles(), config.generator.latent_dim);
    for step in 0..config.steps {
        let idx: Vec<u32> = sample(&mut rng, n, config.batch_size).into_iter().map(|i| i as u32).collect();
        let real = photos.index_select(&Tensor::new(idx.as_slice(), photos.device())?, 0)?;

        let z = sample_z_plus_batch(&mut rng, config.batch_size, ns, dim, photos.dtype())?;
        let fake = base.generator.synthesize(&base.mapping.forward(&z)?, NoiseMode::Zero)?.detach();
        let adv_d = discriminator_adversarial(&base.discriminator.forward(&real)?, &base.discriminator.forward(&fake)?)?;
        let r1 = r1_penalty(&base.discriminator, &real)?;
        let loss_d = (&adv_d + r1.affine(config.r1_weight, 0.0)?)?;
        let ld = scalar(&loss_d)?;

        let z = sample_z_plus_batch(&mut rng, config.batch_size, ns, dim, photos.dtype())?;
        let fake = base.generator.synthesize(&base.mapping.forward(&z)?, NoiseMode::Zero)?;
        let loss_g = generator_adversarial(&base.discriminator.forward_with(&fake, true)?)?;
        let lg = scalar(&loss_g)?;

        if !ld.is_finite() || !lg.is_finite() {
            restore(&base, &good)?;
            let checkpoint = match &config.divergence_checkpoint {
                Some(path) => {
                    base.to_archive()?.save(path)?;
                    Some(path.clone())
                }
                None => None,
            };
            return Err(Error::Diverged {
                step,
                reason: format!("non-finite loss (D {ld}, G {lg})"),
                checkpoint,
            });
        }
        opt_d.step(&loss_d.backward()?)?;
        opt_g.step(&loss_g.backward()?)?;
        good = snapshot(&base)?;
        base.report.d_loss.push(ld);
        base.report.g_loss.push(lg);
        base.report.r1.push(scalar(&r1)?);
        base.report.steps = step + 1;
        log::debug!("pretrain step {step}: D {ld:.4} G {lg:.4}");
    }
    Ok(base)
}

type Snapshot = [std::collections::BTreeMap<String, Tensor>; 3];

fn snapshot(b: &PretrainedBase) -> Result<Snapshot> {
    Ok([
        b.mapping.store().snapshot()?,
        b.generator.store().snapshot()?,
        b.discriminator.store().snapshot()?,
    ])
}

fn restore(b: &PretrainedBase, s: &Snapshot) -> Result<()> {
    b.mapping.store().restore(&s[0])?;
    b.generator.store().restore(&s[1])?;
    b.discriminator.store().restore(&s[2])
}

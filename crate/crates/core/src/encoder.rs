//! Image → Z+ encoder trained against the frozen generator, plus an
//! optimisation-based inversion used as a quality reference.

use candle_core::{DType, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{bail, Error, Result};
use crate::generator::{Generator, GeneratorConfig, LayerRole, NoiseMode};
use crate::latent::{sample_z_plus_batch, LatentCode, LatentSpace, MappingNetwork};
use crate::nn::{leaky_relu, scalar, seeded_rng, Adam, Conv2d, Linear, ParamStore};
use crate::objectives::{identity_loss, IdentityEmbedder};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    /// Stage each output segment reads from, one entry per style input.
    pub segment_stages: Vec<usize>,
    /// Channels of the four strided stages.
    pub channels: [usize; 4],
}

impl EncoderConfig {
    /// Coarse segments read the deepest stage, middle the third, fine the second.
    pub fn for_generator(g: &GeneratorConfig) -> Self {
        let segment_stages = (0..g.num_styles())
            .map(|i| match g.role_of_style(i) {
                LayerRole::Coarse => 3,
                LayerRole::Middle => 2,
                LayerRole::Fine => 1,
            })
            .collect();
        Self {
            resolution: g.resolution,
            latent_dim: g.latent_dim,
            segment_stages,
            channels: [16, 32, 64, 64],
        }
    }

    pub fn num_styles(&self) -> usize {
        self.segment_stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || !self.resolution.is_power_of_two() {
            bail!(Config, "encoder resolution must be a power of two >= 16");
        }
        if self.segment_stages.is_empty() || self.segment_stages.iter().any(|&s| s > 3) {
            bail!(Config, "segment stages must be in 0..4");
        }
        if self.latent_dim == 0 || self.channels.contains(&0) {
            bail!(Config, "encoder dims must be positive");
        }
        Ok(())
    }
}

const HEAD_RES: usize = 4;

/// Strided conv pyramid with one linear head per output segment.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    store: ParamStore,
    stages: Vec<Conv2d>,
    heads: Vec<Linear>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, dtype: DType, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let gain = 2f64.sqrt();
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (k, &c) in config.channels.iter().enumerate() {
            stages.push(Conv2d::new(&mut store, &format!("encoder.stage{k}"), c_in, c, 3, 2, gain, rng)?);
            c_in = c;
        }
        let heads = config
            .segment_stages
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let fan_in = config.channels[s] * HEAD_RES * HEAD_RES;
                Linear::new(
                    &mut store,
                    &format!("encoder.head{i}"),
                    fan_in,
                    config.latent_dim,
                    1.0,
                    Some(0.0),
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            store,
            stages,
            heads,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    /// `(B, 3, R, R)` images to `(B, L, d)` Z+ codes.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = img.dims4()?;
        let r = self.config.resolution;
        if c != 3 || h != r || w != r {
            bail!(Argument, "encoder expects (B, 3, {r}, {r}) images, got {:?}", img.dims());
        }
        let mut feats = Vec::with_capacity(4);
        let mut x = img.clone();
        for stage in &self.stages {
            x = leaky_relu(&stage.forward(&x, false)?, 0.2)?;
            let (_, _, fh, _) = x.dims4()?;
            let pooled = if fh > HEAD_RES {
                x.avg_pool2d(fh / HEAD_RES)?
            } else {
                x.upsample_nearest2d(HEAD_RES, HEAD_RES)?
            };
            feats.push(pooled.reshape((b, ()))?);
        }
        let segs = self
            .heads
            .iter()
            .zip(&self.config.segment_stages)
            .map(|(head, &s)| Ok(head.forward(&feats[s], false)?.unsqueeze(1)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&segs, 1)?)
    }

    pub fn encode(&self, img: &Tensor) -> Result<LatentCode> {
        let img = if img.rank() == 3 { img.unsqueeze(0)? } else { img.clone() };
        if img.dim(0)? != 1 {
            bail!(Argument, "encode takes a single image");
        }
        LatentCode::from_tensor(LatentSpace::ZPlus, &self.forward(&img)?)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.insert_store(&self.store)?;
        a.metadata.insert("encoder.config".into(), serde_json::to_string(&self.config)?);
        Ok(a)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let Some(cfg) = archive.metadata.get("encoder.config") else {
            bail!(Data, "archive carries no encoder config");
        };
        let e = Self::new(serde_json::from_str(cfg)?, DType::F32, &mut seeded_rng(0))?;
        archive.load_into(&e.store)?;
        Ok(e)
    }
}

/// `g(f(z))` for `(B, L, d)` Z+ codes.
pub fn render(g: &Generator, f: &MappingNetwork, z: &Tensor) -> Result<Tensor> {
    g.synthesize(&f.forward(z)?, NoiseMode::Zero)
}

/// Per-image mean squared error between `imgs` and their re-synthesis through `E`.
pub fn reconstruction_errors(e: &Encoder, g: &Generator, f: &MappingNetwork, imgs: &Tensor) -> Result<Vec<f64>> {
    let rec = render(g, f, &e.forward(imgs)?)?;
    Ok((rec - imgs)?.sqr()?.flatten_from(1)?.mean(1)?.to_dtype(DType::F64)?.to_vec1()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub latent_weight: f64,
    pub image_weight: f64,
    pub id_weight: f64,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            lr: 1e-3,
            latent_weight: 1.0,
            image_weight: 1.0,
            id_weight: 0.1,
            seed: 0,
        }
    }
}

/// Trains `e` in place on samples `(z, g(f(z)))` drawn from the frozen
/// generator. Returns the per-step total loss.
pub fn train_encoder(
    e: &Encoder,
    g: &Generator,
    f: &MappingNetwork,
    embedder: &IdentityEmbedder,
    config: &EncoderTrainConfig,
) -> Result<Vec<f64>> {
    if !g.is_frozen() || !f.is_frozen() {
        bail!(Usage, "encoder training needs a frozen generator and mapping network");
    }
    if config.batch_size == 0 {
        bail!(Config, "batch size must be positive");
    }
    let gc = g.config();
    if e.config.num_styles() != gc.num_styles() || e.config.latent_dim != gc.latent_dim || e.config.resolution != gc.resolution {
        bail!(Config, "encoder layout does not match the generator");
    }
    let mut rng = seeded_rng(config.seed);
    let mut opt = Adam::new(e.store.vars(), config.lr, 0.9, 0.99);
    let mut good = e.store.snapshot()?;
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let z = sample_z_plus_batch(&mut rng, config.batch_size, gc.num_styles(), gc.latent_dim, g.dtype())?;
        let x = render(g, f, &z)?.detach();
        let z_hat = e.forward(&x)?;
        let rec = render(g, f, &z_hat)?;
        let mut loss = (&z_hat - &z)?.sqr()?.mean_all()?.affine(config.latent_weight, 0.0)?;
        loss = (loss + (&rec - &x)?.sqr()?.mean_all()?.affine(config.image_weight, 0.0)?)?;
        if config.id_weight > 0.0 {
            loss = (loss + identity_loss(embedder, &rec, &x)?.affine(config.id_weight, 0.0)?)?;
        }
        let value = scalar(&loss)?;
        if !value.is_finite() {
            e.store.restore(&good)?;
            return Err(Error::Diverged {
                step,
                reason: "encoder loss is not finite".into(),
                checkpoint: None,
            });
        }
        opt.step(&loss.backward()?)?;
        good = e.store.snapshot()?;
        history.push(value);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvertConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Starting code; a seeded standard-normal draw when absent.
    pub init: Option<LatentCode>,
}

impl Default for InvertConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.05,
            seed: 0,
            init: None,
        }
    }
}

/// Gradient descent on a Z+ code to reconstruct `img`; returns the best
/// code seen and its mean squared error.
pub fn invert_by_optimization(g: &Generator, f: &MappingNetwork, img: &Tensor, config: &InvertConfig) -> Result<(LatentCode, f64)> {
    if config.steps == 0 {
        bail!(Argument, "inversion needs at least one step");
    }
    let img = if img.rank() == 3 { img.unsqueeze(0)? } else { img.clone() };
    let gc = g.config();
    let (l, d) = (gc.num_styles(), gc.latent_dim);
    let start = match &config.init {
        Some(code) => {
            if code.space() != LatentSpace::ZPlus || code.num_layers() != l || code.dim() != d {
                bail!(Argument, "initial code must be a Z+ code with L = {l}, d = {d}");
            }
            code.to_tensor(g.dtype())?
        }
        None => sample_z_plus_batch(&mut seeded_rng(config.seed), 1, l, d, g.dtype())?,
    };
    let z = Var::from_tensor(&start)?;
    let mut opt = Adam::new(vec![z.clone()], config.lr, 0.9, 0.99);
    let mut best = (start.clone(), f64::INFINITY);
    for _ in 0..config.steps {
        let loss = (render(g, f, z.as_tensor())? - &img)?.sqr()?.mean_all()?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            bail!(Numeric, "inversion loss is not finite");
        }
        if value < best.1 {
            best = (z.as_tensor().detach().copy()?, value);
        }
        opt.step(&loss.backward()?)?;
    }
    let value = scalar(&(render(g, f, z.as_tensor())? - &img)?.sqr()?.mean_all()?)?;
    if value < best.1 {
        best = (z.as_tensor().detach().copy()?, value);
    }
    Ok((LatentCode::from_tensor(LatentSpace::ZPlus, &best.0)?, best.1))
}

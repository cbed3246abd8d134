use candle_core::{DType, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{bail, Result};
use crate::nn::{leaky_relu, seeded_rng, Conv2d, Linear, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    /// Channels per level starting at 4×4 (one entry when `resolution <= 4`).
    pub channels: Vec<usize>,
}

impl DiscriminatorConfig {
    /// Mirror of a generator channel schedule.
    pub fn mirror(g: &super::GeneratorConfig) -> Self {
        Self {
            resolution: g.resolution,
            channels: g.channels.clone(),
        }
    }

    pub fn num_levels(&self) -> usize {
        (self.resolution.trailing_zeros() as usize).saturating_sub(1).max(1)
    }

    fn head_resolution(&self) -> usize {
        self.resolution.min(4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 || !self.resolution.is_power_of_two() {
            bail!(Config, "discriminator resolution must be a power of two >= 2");
        }
        if self.channels.len() != self.num_levels() || self.channels.contains(&0) {
            bail!(Config, "discriminator needs {} positive channel entries", self.num_levels());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DiscBlock {
    conv_a: Conv2d,
    conv_b: Conv2d,
}

/// Convolutional critic mirroring the generator's resolution schedule; emits
/// one logit per image.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    from_rgb: Conv2d,
    blocks: Vec<DiscBlock>,
    hidden: Linear,
    out: Linear,
    frozen: bool,
}

const SLOPE: f64 = 0.2;

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, dtype: DType, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let gain = 2f64.sqrt();
        let top = config.num_levels() - 1;
        let from_rgb = Conv2d::new(&mut store, "disc.from_rgb", 3, config.channels[top], 1, 1, gain, rng)?;
        let mut blocks = Vec::new();
        if config.resolution > 4 {
            for lvl in (1..=top).rev() {
                let (c, c_next) = (config.channels[lvl], config.channels[lvl - 1]);
                blocks.push(DiscBlock {
                    conv_a: Conv2d::new(&mut store, &format!("disc.L{lvl}.conv_a"), c, c, 3, 1, gain, rng)?,
                    conv_b: Conv2d::new(&mut store, &format!("disc.L{lvl}.conv_b"), c, c_next, 3, 1, gain, rng)?,
                });
            }
        }
        let hr = config.head_resolution();
        let c0 = config.channels[0];
        let hidden = Linear::new(&mut store, "disc.head.hidden", c0 * hr * hr, c0, gain, Some(0.0), rng)?;
        let out = Linear::new(&mut store, "disc.head.out", c0, 1, 1.0, Some(0.0), rng)?;
        Ok(Self {
            config,
            store,
            from_rgb,
            blocks,
            hidden,
            out,
            frozen: false,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn vars(&self) -> Vec<Var> {
        self.store.vars()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    /// Independent copy with fresh variables.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = Self::new(self.config.clone(), self.store.dtype(), &mut seeded_rng(0))?;
        for (name, var) in self.store.iter() {
            copy.store.set(name, var.as_tensor())?;
        }
        Ok(Self {
            frozen: self.frozen,
            ..copy
        })
    }

    /// `(B, 3, R, R) → (B, 1)` logits.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        self.forward_with(img, self.frozen)
    }

    /// Forward pass that optionally cuts the parameters from the graph, used
    /// when only the generator side needs gradients.
    pub fn forward_with(&self, img: &Tensor, detach_params: bool) -> Result<Tensor> {
        let (b, c, h, w) = img.dims4()?;
        if c != 3 || h != self.config.resolution || w != self.config.resolution {
            bail!(
                Shape,
                "discriminator expects (B, 3, {r}, {r}), got {:?}",
                img.dims(),
                r = self.config.resolution
            );
        }
        let mut x = leaky_relu(&self.from_rgb.forward(img, detach_params)?, SLOPE)?;
        for block in &self.blocks {
            x = leaky_relu(&block.conv_a.forward(&x, detach_params)?, SLOPE)?;
            x = leaky_relu(&block.conv_b.forward(&x, detach_params)?, SLOPE)?;
            x = x.avg_pool2d(2)?;
        }
        let x = x.reshape((b, ()))?;
        let x = leaky_relu(&self.hidden.forward(&x, detach_params)?, SLOPE)?;
        self.out.forward(&x, detach_params)
    }

    pub fn discriminate(&self, img: &Tensor) -> Result<f64> {
        let img = if img.rank() == 3 { img.unsqueeze(0)? } else { img.clone() };
        if img.dim(0)? != 1 {
            bail!(Shape, "discriminate takes a single image");
        }
        let logit = self.forward(&img)?;
        crate::nn::scalar(&logit)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.insert_store(&self.store)?;
        a.metadata
            .insert("discriminator.config".into(), serde_json::to_string(&self.config)?);
        Ok(a)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let Some(cfg) = archive.metadata.get("discriminator.config") else {
            bail!(Data, "archive carries no discriminator config");
        };
        let d = Self::new(serde_json::from_str(cfg)?, DType::F32, &mut seeded_rng(0))?;
        archive.load_into(&d.store)?;
        Ok(d)
    }
}

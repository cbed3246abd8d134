//! StyleGAN2-style synthesis network, discriminator and base pretraining.
//!
//! Style-input indexing follows StyleGAN2: at level `ℓ` (resolution `4·2^ℓ`)
//! the upsampling conv reads `w[2ℓ-1]`, the second conv `w[2ℓ]` and the
//! toRGB layer `w[2ℓ+1]`; the 4×4 level only has the second conv and toRGB.
//! That gives `L = 2·(log2(resolution) − 1)` style inputs.

mod discriminator;
mod pretrain;

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use pretrain::{feature_distance_proxy, logit_gap, pretrain_base, PretrainConfig, PretrainReport, PretrainedBase, MIN_PRETRAIN_PHOTOS};

use candle_core::{DType, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{bail, Error, Result};
use crate::latent::{LatentCode, LatentSpace};
use crate::nn::{leaky_relu, param, randn, seeded_rng, Linear, ParamStore};

/// Hierarchical role of a generator layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerRole {
    /// 4–8 px: pose, face shape, hair texture.
    Coarse,
    /// 16–32 px: eyes, mouth, hairstyle.
    Middle,
    /// ≥64 px: colour scheme and microstructure.
    Fine,
}

/// Role of a layer operating at `resolution` pixels in a full 256×256 generator.
pub fn layer_role(resolution: usize) -> LayerRole {
    match resolution {
        0..=8 => LayerRole::Coarse,
        9..=32 => LayerRole::Middle,
        _ => LayerRole::Fine,
    }
}

/// Number of resolution levels tagged fine, one adaptation block each.
pub const FINE_LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub resolution: usize,
    /// Feature channels per level, starting at 4×4.
    pub channels: Vec<usize>,
    pub latent_dim: usize,
}

impl GeneratorConfig {
    /// 64×64, channels 256→16, d = 512.
    pub fn desk() -> Self {
        Self {
            resolution: 64,
            channels: vec![256, 128, 64, 32, 16],
            latent_dim: 512,
        }
    }

    /// The full 256×256 layout (L = 14).
    pub fn full() -> Self {
        Self {
            resolution: 256,
            channels: vec![512, 512, 512, 512, 256, 128, 64],
            latent_dim: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 4 || !self.resolution.is_power_of_two() {
            bail!(Config, "generator resolution must be a power of two >= 4, got {}", self.resolution);
        }
        if self.channels.len() != self.num_levels() {
            bail!(
                Config,
                "resolution {} needs {} channel entries, got {}",
                self.resolution,
                self.num_levels(),
                self.channels.len()
            );
        }
        if self.channels.contains(&0) || self.latent_dim == 0 {
            bail!(Config, "channel counts and latent dim must be positive");
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.resolution.trailing_zeros() as usize - 1
    }

    /// Style-input count `L`.
    pub fn num_styles(&self) -> usize {
        2 * self.num_levels()
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        4 << level
    }

    /// Level whose convolutions consume style input `index`.
    pub fn style_level(&self, index: usize) -> usize {
        index.div_ceil(2).min(self.num_levels() - 1)
    }

    pub fn style_resolution(&self, index: usize) -> usize {
        self.level_resolution(self.style_level(index))
    }

    /// Role of a resolution level. The three finest levels are fine (which
    /// reproduces the 64–256 px rule for a 256 px generator); coarser levels
    /// use the 4–8 / 16–32 px split.
    pub fn level_role(&self, level: usize) -> LayerRole {
        if level + FINE_LEVELS >= self.num_levels() {
            LayerRole::Fine
        } else if self.level_resolution(level) <= 8 {
            LayerRole::Coarse
        } else {
            LayerRole::Middle
        }
    }

    pub fn role_of_style(&self, index: usize) -> LayerRole {
        self.level_role(self.style_level(index))
    }

    pub fn fine_levels(&self) -> Vec<usize> {
        (0..self.num_levels()).filter(|&l| self.level_role(l) == LayerRole::Fine).collect()
    }

    /// Style layers receiving an adaptation block: the non-upsampling conv
    /// of every fine level.
    pub fn adaptation_sites(&self) -> Vec<AdaptationSite> {
        self.fine_levels()
            .into_iter()
            .map(|level| AdaptationSite {
                layer_index: 2 * level,
                level,
                channels: self.channels[level],
                resolution: self.level_resolution(level),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationSite {
    pub layer_index: usize,
    pub level: usize,
    pub channels: usize,
    pub resolution: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoiseMode {
    #[default]
    Zero,
    Seeded(u64),
}

/// Convolution with weights scaled per input channel by `styles` (B, C_in);
/// when `demodulate`, every output filter of every sample is rescaled to unit
/// L2 norm (ε = 1e-8).
///
/// Computed as `conv(x ⊙ s, W) ⊙ d` rather than materialising per-sample
/// weights; the two are algebraically identical.
pub fn modulated_conv(x: &Tensor, weight: &Tensor, styles: &Tensor, demodulate: bool, padding: usize) -> Result<Tensor> {
    let (b, c_in, _, _) = x.dims4()?;
    let (c_out, w_in, _, _) = weight.dims4()?;
    let (sb, sc) = styles.dims2()?;
    if w_in != c_in || sc != c_in || sb != b {
        bail!(
            Argument,
            "modulated_conv: input {:?}, weight {:?}, styles {:?}",
            x.dims(),
            weight.dims(),
            styles.dims()
        );
    }
    let xs = x.broadcast_mul(&styles.reshape((b, c_in, 1, 1))?)?;
    let y = xs.conv2d(weight, padding, 1, 1, 1)?;
    if !demodulate {
        return Ok(y);
    }
    let wsq = weight.sqr()?.sum((2, 3))?;
    let norm = styles.sqr()?.matmul(&wsq.t()?)?;
    let demod = (norm + 1e-8)?.sqrt()?.recip()?;
    Ok(y.broadcast_mul(&demod.reshape((b, c_out, 1, 1))?)?)
}

/// `leaky_relu(x, 0.2) · √2`.
pub(crate) fn lrelu_gain(x: &Tensor) -> Result<Tensor> {
    Ok((leaky_relu(x, 0.2)? * std::f64::consts::SQRT_2)?)
}

/// Nearest-neighbour ×2 upsampling followed by a fixed [1,2,1]² blur per channel.
pub(crate) fn upsample_smooth(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let up = x.upsample_nearest2d(2 * h, 2 * w)?.reshape((b * c, 1, 2 * h, 2 * w))?;
    let k1 = [1.0f32, 2.0, 1.0];
    let kernel: Vec<f32> = k1.iter().flat_map(|a| k1.iter().map(move |b| a * b / 16.0)).collect();
    let kernel = Tensor::from_vec(kernel, (1, 1, 3, 3), x.device())?.to_dtype(x.dtype())?;
    // replicate-pad so borders are not darkened
    let padded = up.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    Ok(padded.conv2d(&kernel, 0, 1, 1, 1)?.reshape((b, c, 2 * h, 2 * w))?)
}

/// Observer/modifier of the synthesis pass.
pub trait SynthesisHook {
    /// Receives the modulated-conv output of style layer `layer_index`
    /// (before noise, bias and activation) together with that layer's input,
    /// and returns the tensor that continues through the network.
    fn conv_output(&mut self, _layer_index: usize, _input: &Tensor, conv_out: Tensor) -> Result<Tensor> {
        Ok(conv_out)
    }

    /// Receives the feature map at the end of every level.
    fn level_features(&mut self, _level: usize, _features: &Tensor) -> Result<()> {
        Ok(())
    }
}

/// Hook that changes nothing.
pub struct NoHook;

impl SynthesisHook for NoHook {}

#[derive(Clone, Debug)]
struct StyledConv {
    affine: Linear,
    weight: Var,
    bias: Var,
    noise_strength: Var,
    upsample: bool,
}

#[derive(Clone, Debug)]
struct ToRgb {
    affine: Linear,
    weight: Var,
    bias: Var,
}

#[derive(Clone, Debug)]
struct Level {
    conv0: Option<StyledConv>,
    conv1: StyledConv,
    torgb: ToRgb,
}

/// Synthesis network `g`.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    constant: Var,
    levels: Vec<Level>,
    frozen: bool,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, dtype: DType, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let d = config.latent_dim;
        let constant = store.normal("synthesis.const", &[config.channels[0], 4, 4], 1.0, rng)?;
        let mut levels = Vec::with_capacity(config.num_levels());
        for (l, &c) in config.channels.iter().enumerate() {
            let prefix = format!("synthesis.L{l}");
            let conv0 = if l == 0 {
                None
            } else {
                let c_prev = config.channels[l - 1];
                Some(styled_conv(&mut store, &format!("{prefix}.conv0"), d, c_prev, c, true, rng)?)
            };
            let conv1 = styled_conv(&mut store, &format!("{prefix}.conv1"), d, c, c, false, rng)?;
            let name = format!("{prefix}.torgb");
            let torgb = ToRgb {
                affine: Linear::new(&mut store, &format!("{name}.affine"), d, c, 1.0, Some(1.0), rng)?,
                weight: store.normal(format!("{name}.weight"), &[3, c, 1, 1], 1.0 / (c as f64).sqrt(), rng)?,
                bias: store.constant(format!("{name}.bias"), &[3], 0.0)?,
            };
            levels.push(Level { conv0, conv1, torgb });
        }
        Ok(Self {
            config,
            store,
            constant,
            levels,
            frozen: false,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn num_styles(&self) -> usize {
        self.config.num_styles()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    /// Independent copy (fresh variables) carrying the same frozen flag.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut copy = Self::new(self.config.clone(), self.dtype(), &mut seeded_rng(0))?;
        for (name, var) in self.store.iter() {
            copy.store.set(name, var.as_tensor())?;
        }
        copy.frozen = self.frozen;
        Ok(copy)
    }

    /// Weight tensor of the modulated conv reading style input `layer_index`.
    pub fn style_conv_weight(&self, layer_index: usize) -> Option<Tensor> {
        if layer_index >= self.num_styles() {
            return None;
        }
        let level = self.config.style_level(layer_index);
        let conv = if layer_index == 2 * level {
            Some(&self.levels[level].conv1)
        } else {
            self.levels[level].conv0.as_ref()
        };
        conv.map(|c| c.weight.as_tensor().detach())
    }

    /// Batched synthesis: `ws` is `(B, L, d)`, returns `(B, 3, R, R)` in [-1, 1].
    pub fn synthesize(&self, ws: &Tensor, noise: NoiseMode) -> Result<Tensor> {
        self.synthesize_with(ws, noise, &mut NoHook)
    }

    /// Synthesis of a single W+ code, `(1, 3, R, R)`.
    pub fn synthesize_code(&self, w: &LatentCode, noise: NoiseMode) -> Result<Tensor> {
        if w.space() != LatentSpace::WPlus {
            bail!(Usage, "synthesis expects a W+ code");
        }
        self.synthesize(&w.to_tensor(self.dtype())?, noise)
    }

    pub fn synthesize_with(&self, ws: &Tensor, noise: NoiseMode, hook: &mut dyn SynthesisHook) -> Result<Tensor> {
        let (b, l, d) = ws
            .dims3()
            .map_err(|_| Error::Shape(format!("expected (B, L, d) latents, got {:?}", ws.dims())))?;
        if l != self.num_styles() {
            bail!(Usage, "generator takes {} style inputs, code has {l}", self.num_styles());
        }
        if d != self.config.latent_dim {
            bail!(Shape, "generator latent dim is {}, code has {d}", self.config.latent_dim);
        }
        let frozen = self.frozen;
        let style = |i: usize| -> Result<Tensor> { Ok(ws.narrow(1, i, 1)?.squeeze(1)?) };
        let c0 = self.config.channels[0];
        let mut x = param(&self.constant, frozen)
            .unsqueeze(0)?
            .broadcast_as((b, c0, 4, 4))?
            .contiguous()?;
        let mut rgb: Option<Tensor> = None;
        for (lvl, level) in self.levels.iter().enumerate() {
            if let Some(conv0) = &level.conv0 {
                let idx = 2 * lvl - 1;
                x = self.styled_forward(conv0, &x, &style(idx)?, idx, noise, hook)?;
            }
            let idx = 2 * lvl;
            x = self.styled_forward(&level.conv1, &x, &style(idx)?, idx, noise, hook)?;
            hook.level_features(lvl, &x)?;
            let s = level.torgb.affine.forward(&style(idx + 1)?, frozen)?;
            let y = modulated_conv(&x, &param(&level.torgb.weight, frozen), &s, false, 0)?
                .broadcast_add(&param(&level.torgb.bias, frozen).reshape((1, 3, 1, 1))?)?;
            rgb = Some(match rgb {
                Some(prev) => (upsample_smooth(&prev)? + y)?,
                None => y,
            });
        }
        Ok(rgb.expect("at least one level").tanh()?)
    }

    fn styled_forward(
        &self,
        conv: &StyledConv,
        x: &Tensor,
        w: &Tensor,
        layer_index: usize,
        noise: NoiseMode,
        hook: &mut dyn SynthesisHook,
    ) -> Result<Tensor> {
        let frozen = self.frozen;
        let input = if conv.upsample {
            let (_, _, h, wd) = x.dims4()?;
            x.upsample_nearest2d(2 * h, 2 * wd)?
        } else {
            x.clone()
        };
        let s = conv.affine.forward(w, frozen)?;
        let h = modulated_conv(&input, &param(&conv.weight, frozen), &s, true, 1)?;
        let mut h = hook.conv_output(layer_index, &input, h)?;
        if let NoiseMode::Seeded(seed) = noise {
            let (b, _, hh, ww) = h.dims4()?;
            let mut rng = seeded_rng(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ layer_index as u64);
            let n = randn(&[b, 1, hh, ww], 1.0, h.dtype(), &mut rng)?;
            h = h.broadcast_add(&n.broadcast_mul(&param(&conv.noise_strength, frozen))?)?;
        }
        let c = h.dim(1)?;
        let h = h.broadcast_add(&param(&conv.bias, frozen).reshape((1, c, 1, 1))?)?;
        lrelu_gain(&h)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.insert_store(&self.store)?;
        a.metadata.insert("generator.config".into(), serde_json::to_string(&self.config)?);
        Ok(a)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let Some(cfg) = archive.metadata.get("generator.config") else {
            bail!(Data, "archive carries no generator config");
        };
        let config: GeneratorConfig = serde_json::from_str(cfg)?;
        let g = Self::new(config, DType::F32, &mut seeded_rng(0))?;
        archive.load_into(&g.store)?;
        Ok(g)
    }
}

fn styled_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    latent_dim: usize,
    c_in: usize,
    c_out: usize,
    upsample: bool,
    rng: &mut R,
) -> Result<StyledConv> {
    Ok(StyledConv {
        affine: Linear::new(store, &format!("{name}.affine"), latent_dim, c_in, 1.0, Some(1.0), rng)?,
        weight: store.normal(format!("{name}.weight"), &[c_out, c_in, 3, 3], 1.0, rng)?,
        bias: store.constant(format!("{name}.bias"), &[c_out], 0.0)?,
        noise_strength: store.constant(format!("{name}.noise_strength"), &[1], 0.0)?,
        upsample,
    })
}

/// Average-pools `(B, C, R, R)` images down to `size × size`.
pub fn downsample_to(img: &Tensor, size: usize) -> Result<Tensor> {
    let (_, _, h, w) = img.dims4()?;
    if h % size != 0 || w % size != 0 {
        bail!(Shape, "cannot pool {h}x{w} to {size}x{size}");
    }
    Ok(img.avg_pool2d((h / size, w / size))?)
}

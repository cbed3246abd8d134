//! Attentive Affine adaptation blocks and the stylized generator `g′`.
//!
//! Each fine layer of the frozen generator gets one block. A block attends
//! from the content code's segments to the style code's segments, reads the
//! attention-weighted style vector for its own layer, turns it into per-channel
//! scales and runs its own modulated convolution. The result is added to the
//! frozen layer's conv output through a scalar gate that starts closed.
//!
//! Latent tensors are `(B, L, d)`, so the projected codes are stored one row
//! per segment: `Q` and `K` are `(B, L, d_attn)`, `V` is `(B, L, d)`.

use candle_core::{DType, Tensor, Var, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{bail, Error, Result};
use crate::generator::{modulated_conv, AdaptationSite, Generator, NoiseMode, SynthesisHook};
use crate::latent::LatentCode;
use crate::nn::{scalar, seeded_rng, softmax_last, Linear, ParamStore};
use crate::objectives::weight_norm;

const EPS: f64 = 1e-8;

/// Channel-wise instance normalisation of `(B, L, d)` codes across the `L`
/// segments.
pub fn normalize_latent_tensor(w: &Tensor) -> Result<Tensor> {
    let (_, l, _) = w.dims3()?;
    if l < 2 {
        bail!(Argument, "normalising a latent code needs at least two segments, got {l}");
    }
    let mean = w.mean_keepdim(1)?;
    let centered = w.broadcast_sub(&mean)?;
    let std = (centered.sqr()?.mean_keepdim(1)? + EPS)?.sqrt()?;
    Ok(centered.broadcast_div(&std)?)
}

pub fn normalize_latent(w: &LatentCode) -> Result<LatentCode> {
    let t = normalize_latent_tensor(&w.to_tensor(DType::F64)?)?;
    LatentCode::from_tensor(w.space(), &t)
}

/// Row-wise softmax of `Q Kᵀ`: `(B, L, L)`, row `r` is content segment `r`'s
/// distribution over style segments.
pub fn attention_map(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    if q.dims() != k.dims() || q.rank() != 3 {
        bail!(Argument, "Q {:?} and K {:?} must both be (B, L, d_attn)", q.dims(), k.dims());
    }
    let logits = q.matmul(&k.transpose(1, 2)?.contiguous()?)?;
    let values = logits.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if values.iter().any(|v| !v.is_finite()) {
        bail!(Numeric, "attention logits are not finite");
    }
    softmax_last(&logits)
}

/// `x_i = Σ_j A[i, j] · V_j`, returned as `(B, d)`.
pub fn attention_weighted_segment(v: &Tensor, a: &Tensor, i: usize) -> Result<Tensor> {
    let (b, l, _) = v.dims3()?;
    if a.dims() != [b, l, l] {
        bail!(Argument, "attention {:?} does not match values {:?}", a.dims(), v.dims());
    }
    if i >= l {
        bail!(Argument, "segment index {i} out of range for L = {l}");
    }
    Ok(a.narrow(1, i, 1)?.matmul(v)?.squeeze(1)?)
}

/// Per-channel standardisation over space followed by `y_s · x̂ + y_b`.
pub fn adaptive_normalize(f: &Tensor, y_s: &Tensor, y_b: Option<&Tensor>) -> Result<Tensor> {
    let (b, c, _, _) = f.dims4()?;
    if y_s.dims() != [b, c] || y_b.is_some_and(|t| t.dims() != [b, c]) {
        bail!(Argument, "modulation parameters must be ({b}, {c})");
    }
    let mean = f.mean_keepdim((2, 3))?;
    let centered = f.broadcast_sub(&mean)?;
    let std = (centered.sqr()?.mean_keepdim((2, 3))? + EPS)?.sqrt()?;
    let out = centered.broadcast_div(&std)?.broadcast_mul(&y_s.reshape((b, c, 1, 1))?)?;
    Ok(match y_b {
        Some(y_b) => out.broadcast_add(&y_b.reshape((b, c, 1, 1))?)?,
        None => out,
    })
}

/// `F_frozen + α · F_adapted`.
pub fn fuse(frozen: &Tensor, adapted: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    if frozen.dims() != adapted.dims() {
        bail!(Argument, "cannot fuse {:?} with {:?}", frozen.dims(), adapted.dims());
    }
    Ok((frozen + adapted.broadcast_mul(alpha)?)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub latent_dim: usize,
    pub attn_dim: usize,
    /// Emit a shift `y_b` as well and normalise explicitly before a plain conv.
    pub with_shift: bool,
    pub sites: Vec<AdaptationSite>,
}

impl AdaptConfig {
    /// Blocks at every fine site of `g`, `d_attn = d / 4`, no shift.
    pub fn for_generator(g: &Generator) -> Self {
        let d = g.config().latent_dim;
        Self {
            latent_dim: d,
            attn_dim: (d / 4).max(1),
            with_shift: false,
            sites: g.config().adaptation_sites(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.attn_dim == 0 {
            bail!(Config, "latent and attention dims must be positive");
        }
        if self.sites.is_empty() {
            bail!(Config, "no adaptation sites");
        }
        Ok(())
    }
}

/// Projected codes of one block.
#[derive(Clone, Debug)]
pub struct Qkv {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

/// One Attentive Affine block at a fine layer.
#[derive(Clone, Debug)]
pub struct AdaptBlock {
    pub site: AdaptationSite,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub affine: Linear,
    pub conv: Var,
    pub gate: Var,
    with_shift: bool,
}

impl AdaptBlock {
    /// Registers the block's parameters under `adapt.block{index}.*` and its
    /// gate as `adapt.gate{index}`. The conv starts as a copy of `init_conv`
    /// when given, otherwise unit-normal.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        index: usize,
        site: AdaptationSite,
        latent_dim: usize,
        attn_dim: usize,
        with_shift: bool,
        init_conv: Option<&Tensor>,
        rng: &mut R,
    ) -> Result<Self> {
        let p = format!("adapt.block{index}");
        let d = latent_dim;
        let c = site.channels;
        let q_proj = Linear::new(store, &format!("{p}.q"), d, attn_dim, 1.0, Some(0.0), rng)?;
        let k_proj = Linear::new(store, &format!("{p}.k"), d, attn_dim, 1.0, Some(0.0), rng)?;
        let v_proj = Linear::new(store, &format!("{p}.v"), d, d, 1.0, Some(0.0), rng)?;
        let out = if with_shift { 2 * c } else { c };
        let affine = Linear::new(store, &format!("{p}.affine"), d, out, 1.0, Some(1.0), rng)?;
        if with_shift {
            // scales start at 1, shifts at 0
            let bias = affine.bias.as_ref().expect("affine has a bias");
            let init = Tensor::cat(
                &[
                    Tensor::ones(c, store.dtype(), bias.device())?,
                    Tensor::zeros(c, store.dtype(), bias.device())?,
                ],
                0,
            )?;
            bias.set(&init)?;
        }
        let conv = match init_conv {
            Some(w) => {
                if w.dims() != [c, c, 3, 3] {
                    bail!(Argument, "initial conv {:?} does not match {c} channels", w.dims());
                }
                store.insert(format!("{p}.conv.weight"), w.to_dtype(store.dtype())?.copy()?)?
            }
            None => store.normal(format!("{p}.conv.weight"), &[c, c, 3, 3], 1.0, rng)?,
        };
        let gate = store.constant(format!("adapt.gate{index}"), &[1], 0.0)?;
        Ok(Self {
            site,
            q_proj,
            k_proj,
            v_proj,
            affine,
            conv,
            gate,
            with_shift,
        })
    }

    pub fn with_shift(&self) -> bool {
        self.with_shift
    }

    /// `Q = q(Norm(w_c))`, `K = k(Norm(w_s))`, `V = v(w_s)`.
    pub fn compute_qkv(&self, w_c: &Tensor, w_s: &Tensor) -> Result<Qkv> {
        let (b, l, d) = w_c.dims3()?;
        if w_s.dims() != [b, l, d] || d != self.q_proj.in_dim() {
            bail!(
                Argument,
                "content {:?} and style {:?} codes must match and have d = {}",
                w_c.dims(),
                w_s.dims(),
                self.q_proj.in_dim()
            );
        }
        Ok(Qkv {
            q: self.q_proj.forward(&normalize_latent_tensor(w_c)?, false)?,
            k: self.k_proj.forward(&normalize_latent_tensor(w_s)?, false)?,
            v: self.v_proj.forward(w_s, false)?,
        })
    }

    pub fn attention(&self, w_c: &Tensor, w_s: &Tensor) -> Result<Tensor> {
        let qkv = self.compute_qkv(w_c, w_s)?;
        attention_map(&qkv.q, &qkv.k)
    }

    /// Affine map of the attended segment: `(y_s, y_b)`, `y_b` only with the
    /// shift variant.
    pub fn attentive_affine(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        if x.dim(D::Minus1)? != self.affine.in_dim() {
            bail!(
                Argument,
                "attended segment has {} dims, affine expects {}",
                x.dim(D::Minus1)?,
                self.affine.in_dim()
            );
        }
        let y = self.affine.forward(x, false)?;
        if !self.with_shift {
            return Ok((y, None));
        }
        let c = self.site.channels;
        Ok((y.narrow(D::Minus1, 0, c)?, Some(y.narrow(D::Minus1, c, c)?)))
    }

    /// Modulation parameters for this block's layer.
    pub fn modulation(&self, w_c: &Tensor, w_s: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let qkv = self.compute_qkv(w_c, w_s)?;
        let a = attention_map(&qkv.q, &qkv.k)?;
        let x = attention_weighted_segment(&qkv.v, &a, self.site.layer_index)?;
        self.attentive_affine(&x)
    }

    /// Applies the block's conv to layer input `f` under given modulation.
    pub fn apply(&self, f: &Tensor, y_s: &Tensor, y_b: Option<&Tensor>) -> Result<Tensor> {
        let w = self.conv.as_tensor();
        if self.with_shift {
            Ok(adaptive_normalize(f, y_s, y_b)?.conv2d(w, 1, 1, 1, 1)?)
        } else {
            modulated_conv(f, w, y_s, true, 1)
        }
    }

    /// Full block: QKV, attention, attended segment, affine, modulated conv.
    pub fn forward(&self, f: &Tensor, w_c: &Tensor, w_s: &Tensor) -> Result<Tensor> {
        let (y_s, y_b) = self.modulation(w_c, w_s)?;
        self.apply(f, &y_s, y_b.as_ref())
    }
}

pub fn adapt_block_forward(block: &AdaptBlock, f: &Tensor, w_c: &Tensor, w_s: &Tensor) -> Result<Tensor> {
    block.forward(f, w_c, w_s)
}

/// The trainable part of `g′`: one block per fine site.
#[derive(Clone, Debug)]
pub struct StyleAdapter {
    config: AdaptConfig,
    store: ParamStore,
    blocks: Vec<AdaptBlock>,
}

impl StyleAdapter {
    /// Blocks for `config.sites`; convs start from `g`'s weights at each site.
    pub fn new<R: Rng + ?Sized>(config: AdaptConfig, g: &Generator, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if config.latent_dim != g.config().latent_dim {
            bail!(
                Config,
                "adapter latent dim {} differs from generator's {}",
                config.latent_dim,
                g.config().latent_dim
            );
        }
        let mut store = ParamStore::new(g.dtype());
        let mut blocks = Vec::new();
        for (i, site) in config.sites.iter().enumerate() {
            let Some(w) = g.style_conv_weight(site.layer_index) else {
                bail!(Config, "generator has no layer {}", site.layer_index);
            };
            if w.dims() != [site.channels, site.channels, 3, 3] {
                bail!(
                    Config,
                    "site {} does not match the generator's layer shape {:?}",
                    site.layer_index,
                    w.dims()
                );
            }
            blocks.push(AdaptBlock::new(
                &mut store,
                i,
                *site,
                config.latent_dim,
                config.attn_dim,
                config.with_shift,
                Some(&w),
                rng,
            )?);
        }
        Ok(Self { config, store, blocks })
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn blocks(&self) -> &[AdaptBlock] {
        &self.blocks
    }

    pub fn vars(&self) -> Vec<Var> {
        self.store.vars()
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    pub fn gates(&self) -> Result<Vec<f64>> {
        self.blocks.iter().map(|b| scalar(b.gate.as_tensor())).collect()
    }

    pub fn set_gates(&self, value: f64) -> Result<()> {
        for b in &self.blocks {
            b.gate.set(&Tensor::full(value, 1, b.gate.device())?.to_dtype(b.gate.dtype())?)?;
        }
        Ok(())
    }

    pub fn conv_weights(&self) -> Vec<Tensor> {
        self.blocks.iter().map(|b| b.conv.as_tensor().clone()).collect()
    }

    /// `‖W‖₂` over all block convs.
    pub fn weight_norm(&self) -> Result<Tensor> {
        weight_norm(&self.conv_weights())
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.insert_store(&self.store)?;
        a.metadata.insert("adapt.config".into(), serde_json::to_string(&self.config)?);
        Ok(a)
    }

    /// Restores an adapter for `g` from an archive written by [`to_archive`](Self::to_archive).
    pub fn from_archive(archive: &Archive, g: &Generator) -> Result<Self> {
        let Some(cfg) = archive.metadata.get("adapt.config") else {
            bail!(Data, "archive carries no adaptation config");
        };
        let a = Self::new(serde_json::from_str(cfg)?, g, &mut seeded_rng(0))?;
        archive.load_into(&a.store)?;
        Ok(a)
    }

    /// `g′(w_c, w_s)`: `(B, L, d)` W+ codes to `(B, 3, R, R)` images.
    pub fn stylized_synthesize(&self, g: &Generator, w_c: &Tensor, w_s: &Tensor, noise: NoiseMode) -> Result<Tensor> {
        if w_c.dims() != w_s.dims() {
            bail!(
                Argument,
                "content {:?} and style {:?} codes differ in shape",
                w_c.dims(),
                w_s.dims()
            );
        }
        let (_, l, _) = w_c
            .dims3()
            .map_err(|_| Error::Argument(format!("expected (B, L, d) codes, got {:?}", w_c.dims())))?;
        if l != g.num_styles() {
            bail!(Usage, "generator takes {} style inputs, code has {l}", g.num_styles());
        }
        let mut hook = FusionHook {
            blocks: &self.blocks,
            modulation: self.blocks.iter().map(|b| b.modulation(w_c, w_s)).collect::<Result<Vec<_>>>()?,
        };
        g.synthesize_with(w_c, noise, &mut hook)
    }

    pub fn stylize_codes(&self, g: &Generator, w_c: &LatentCode, w_s: &LatentCode, noise: NoiseMode) -> Result<Tensor> {
        let dt = g.dtype();
        self.stylized_synthesize(g, &w_c.to_tensor(dt)?, &w_s.to_tensor(dt)?, noise)
    }
}

struct FusionHook<'a> {
    blocks: &'a [AdaptBlock],
    modulation: Vec<(Tensor, Option<Tensor>)>,
}

impl SynthesisHook for FusionHook<'_> {
    fn conv_output(&mut self, layer_index: usize, input: &Tensor, conv_out: Tensor) -> Result<Tensor> {
        let Some(k) = self.blocks.iter().position(|b| b.site.layer_index == layer_index) else {
            return Ok(conv_out);
        };
        let block = &self.blocks[k];
        let (y_s, y_b) = &self.modulation[k];
        let adapted = block.apply(input, y_s, y_b.as_ref())?;
        fuse(&conv_out, &adapted, block.gate.as_tensor())
    }
}

//! Loss terms for base pretraining and both adaptation stages, plus the
//! fixed random-weight networks that stand in for perceptual and identity
//! feature extractors.

use candle_core::{DType, Tensor, Var, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::enable_higher_order_gradients;
use crate::checkpoint::Archive;
use crate::error::{bail, Result};
use crate::generator::Discriminator;
use crate::nn::{safe_sqrt, seeded_rng, softmax_last, softplus, Conv2d, Linear, ParamStore};

/// One layer of a [`FeatureExtractor`]: optional 2×2 average pool, conv, ReLU.
#[derive(Clone, Debug)]
pub struct ExtractorLayer {
    pub conv: Conv2d,
    pub pool_before: bool,
    pub tap: bool,
}

/// Fixed conv stack whose tapped activations feed the perceptual, contextual
/// and feature-matching losses. Never trained.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    store: ParamStore,
    layers: Vec<ExtractorLayer>,
}

impl FeatureExtractor {
    /// Default pyramid: 3→16 at full resolution, then 32, 64, 64 channels at
    /// 1/2, 1/4 and 1/8 resolution, the last three tapped.
    pub fn new<R: Rng + ?Sized>(dtype: DType, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new(dtype);
        let spec = [
            (3, 16, false, false),
            (16, 32, true, true),
            (32, 64, true, true),
            (64, 64, true, true),
        ];
        let mut layers = Vec::new();
        for (i, (ci, co, pool, tap)) in spec.into_iter().enumerate() {
            let conv = Conv2d::new(&mut store, &format!("metricnets.extractor.{i}"), ci, co, 3, 1, 2f64.sqrt(), rng)?;
            layers.push(ExtractorLayer {
                conv,
                pool_before: pool,
                tap,
            });
        }
        Ok(Self { store, layers })
    }

    /// Builds an extractor from explicit layers whose parameters live in `store`.
    pub fn from_layers(store: ParamStore, layers: Vec<ExtractorLayer>) -> Self {
        Self { store, layers }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_taps(&self) -> usize {
        self.layers.iter().filter(|l| l.tap).count()
    }

    /// Tapped feature maps, finest first.
    pub fn forward(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = img.clone();
        let mut taps = Vec::new();
        for layer in &self.layers {
            if layer.pool_before {
                x = x.avg_pool2d(2)?;
            }
            x = layer.conv.forward(&x, true)?.relu()?;
            if layer.tap {
                taps.push(x.clone());
            }
        }
        Ok(taps)
    }
}

pub const EMBEDDING_DIM: usize = 128;

/// Fixed conv stack ending in a unit-norm 128-d embedding; identity proxy.
#[derive(Clone, Debug)]
pub struct IdentityEmbedder {
    store: ParamStore,
    convs: Vec<Conv2d>,
    proj: Linear,
}

impl IdentityEmbedder {
    pub fn new<R: Rng + ?Sized>(dtype: DType, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new(dtype);
        let gain = 2f64.sqrt();
        let chans = [(3, 16), (16, 32), (32, 32)];
        let convs = chans
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| Conv2d::new(&mut store, &format!("metricnets.embedder.{i}"), ci, co, 3, 2, gain, rng))
            .collect::<Result<Vec<_>>>()?;
        let proj = Linear::new(&mut store, "metricnets.embedder.proj", 32 * 16, EMBEDDING_DIM, 1.0, None, rng)?;
        Ok(Self { store, convs, proj })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `(B, 3, R, R) → (B, 128)` with unit rows.
    pub fn embed(&self, img: &Tensor) -> Result<Tensor> {
        let mut x = img.clone();
        for conv in &self.convs {
            x = conv.forward(&x, true)?.relu()?;
        }
        let (b, _, h, _) = x.dims4()?;
        if h > 4 {
            x = x.avg_pool2d(h / 4)?;
        } else if h < 4 {
            x = x.upsample_nearest2d(4, 4)?;
        }
        let e = self.proj.forward(&x.reshape((b, ()))?, true)?;
        let norm = (e.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
        Ok(e.broadcast_div(&norm)?)
    }
}

/// The two fixed metric networks, checkpointed under `metricnets.*`.
#[derive(Clone, Debug)]
pub struct MetricNets {
    pub extractor: FeatureExtractor,
    pub embedder: IdentityEmbedder,
}

impl MetricNets {
    pub fn new(seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        Ok(Self {
            extractor: FeatureExtractor::new(dtype, &mut rng)?,
            embedder: IdentityEmbedder::new(dtype, &mut rng)?,
        })
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.insert_store(self.extractor.store())?;
        a.insert_store(self.embedder.store())?;
        Ok(a)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let nets = Self::new(0, DType::F32)?;
        archive.load_into(nets.extractor.store())?;
        archive.load_into(nets.embedder.store())?;
        Ok(nets)
    }

    pub fn checksum(&self) -> Result<String> {
        Ok(format!(
            "{}{}",
            self.extractor.store().checksum()?,
            self.embedder.store().checksum()?
        ))
    }
}

fn check_taps(a: &[Tensor], b: &[Tensor]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        bail!(Argument, "feature pyramids must not be empty");
    }
    if a.len() != b.len() {
        bail!(Shape, "feature pyramids have {} and {} taps", a.len(), b.len());
    }
    Ok(())
}

/// `(B, C, H, W) → (B, H·W, C)`: one row per spatial feature vector.
fn feature_rows(t: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = t.dims4()?;
    Ok(t.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Contextual loss summed over taps, averaged over the batch.
///
/// For every generated feature `i` and target feature `j`: cosine distance
/// `d_ij`, relative distance `d̃_ij = d_ij / (min_k d_ik + 1e-5)`, affinity
/// `softmax_j((1 − d̃_ij) / h)`. The similarity is the mean over `j` of the
/// best-matching `i`, and the loss is its negative log.
pub fn contextual_loss(feats_g: &[Tensor], feats_s: &[Tensor], bandwidth: f64) -> Result<Tensor> {
    check_taps(feats_g, feats_s)?;
    if bandwidth <= 0.0 {
        bail!(Argument, "contextual bandwidth must be positive");
    }
    let mut total: Option<Tensor> = None;
    for (fg, fs) in feats_g.iter().zip(feats_s) {
        let (x, y) = (feature_rows(fg)?, feature_rows(fs)?);
        if x.dim(1)? == 0 || y.dim(1)? == 0 || x.dim(2)? != y.dim(2)? {
            bail!(Argument, "contextual loss needs non-empty feature sets of equal width");
        }
        let unit = |t: &Tensor| -> Result<Tensor> {
            let n = (t.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
            Ok(t.broadcast_div(&n)?)
        };
        let cos = unit(&x)?.matmul(&unit(&y)?.transpose(1, 2)?)?;
        let dist = cos.affine(-1.0, 1.0)?;
        let dmin = dist.min_keepdim(D::Minus1)?;
        let rel = dist.broadcast_div(&(dmin + 1e-5)?)?;
        let affinity = softmax_last(&rel.affine(-1.0 / bandwidth, 1.0 / bandwidth)?)?;
        let cx = affinity.max(1)?.mean(1)?;
        let term = cx.log()?.neg()?.mean(0)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty taps"))
}

fn channel_stats(t: &Tensor) -> Result<(Tensor, Tensor)> {
    let mean = t.mean_keepdim((2, 3))?;
    let var = t.broadcast_sub(&mean)?.sqr()?.mean((2, 3))?;
    Ok((mean.squeeze(3)?.squeeze(2)?, (var + 1e-8)?.sqrt()?))
}

/// Σ over taps of `‖μ(G) − μ(S)‖₂ + ‖σ(G) − σ(S)‖₂` over channels, averaged over the batch.
pub fn feature_matching_loss(feats_g: &[Tensor], feats_s: &[Tensor]) -> Result<Tensor> {
    check_taps(feats_g, feats_s)?;
    let mut total: Option<Tensor> = None;
    for (fg, fs) in feats_g.iter().zip(feats_s) {
        if fg.dims() != fs.dims() {
            bail!(Shape, "feature maps {:?} vs {:?}", fg.dims(), fs.dims());
        }
        let (mg, sg) = channel_stats(fg)?;
        let (ms, ss) = channel_stats(fs)?;
        let dm = safe_sqrt(&(mg - ms)?.sqr()?.sum(1)?)?;
        let ds = safe_sqrt(&(sg - ss)?.sqr()?.sum(1)?)?;
        let term = (dm + ds)?.mean(0)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty taps"))
}

/// Σ over taps of the mean squared feature difference.
pub fn perceptual_from_features(feats_g: &[Tensor], feats_s: &[Tensor]) -> Result<Tensor> {
    check_taps(feats_g, feats_s)?;
    let mut total: Option<Tensor> = None;
    for (fg, fs) in feats_g.iter().zip(feats_s) {
        if fg.dims() != fs.dims() {
            bail!(Shape, "feature maps {:?} vs {:?}", fg.dims(), fs.dims());
        }
        let term = (fg - fs)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty taps"))
}

pub fn perceptual_loss(fx: &FeatureExtractor, g: &Tensor, s: &Tensor) -> Result<Tensor> {
    if g.dims() != s.dims() {
        bail!(Shape, "perceptual loss inputs {:?} vs {:?}", g.dims(), s.dims());
    }
    perceptual_from_features(&fx.forward(g)?, &fx.forward(s)?)
}

/// Per-sample perceptual distance `(B,)`.
pub fn perceptual_per_sample(fx: &FeatureExtractor, g: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (fg, fs) = (fx.forward(g)?, fx.forward(s)?);
    let mut total: Option<Tensor> = None;
    for (a, b) in fg.iter().zip(&fs) {
        let term = (a - b)?.sqr()?.flatten_from(1)?.mean(1)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("extractor has taps"))
}

/// `1 − ⟨a, b⟩` per row, averaged; inputs are unit embeddings.
///
/// Evaluated as `½‖a − b‖²`, equal for unit rows and exactly zero when the
/// embeddings coincide.
pub fn identity_loss_from_embeddings(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.sum(1)?.affine(0.5, 0.0)?.mean(0)?)
}

pub fn identity_loss(e: &IdentityEmbedder, g: &Tensor, reference: &Tensor) -> Result<Tensor> {
    if g.dims() != reference.dims() {
        bail!(Shape, "identity loss inputs {:?} vs {:?}", g.dims(), reference.dims());
    }
    identity_loss_from_embeddings(&e.embed(g)?, &e.embed(reference)?)
}

/// Non-saturating generator loss `mean softplus(−D(fake))`.
pub fn generator_adversarial(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(softplus(&fake_logits.neg()?)?.mean_all()?)
}

/// `mean softplus(−D(real)) + mean softplus(D(fake))`.
pub fn discriminator_adversarial(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    Ok((softplus(&real_logits.neg()?)?.mean_all()? + softplus(fake_logits)?.mean_all()?)?)
}

/// Batch mean of `‖∇ₓ D(x)‖²` at the real images; differentiable with
/// respect to the discriminator parameters.
pub fn r1_penalty(d: &Discriminator, real: &Tensor) -> Result<Tensor> {
    enable_higher_order_gradients();
    let x = Var::from_tensor(&real.detach())?;
    let logits = d.forward_with(x.as_tensor(), false)?;
    let grads = logits.sum_all()?.backward()?;
    let Some(gx) = grads.get(x.as_tensor()) else {
        bail!(Numeric, "discriminator output does not depend on its input");
    };
    if !d.store().is_empty() && !gx.track_op() {
        bail!(
            Usage,
            "higher-order gradients are disabled on this thread; call backend::enable_higher_order_gradients() before the first backward pass"
        );
    }
    Ok(gx.sqr()?.sum((1, 2, 3))?.mean(0)?)
}

#[derive(Clone, Debug)]
pub struct AdversarialLosses {
    pub generator: Tensor,
    pub discriminator: Tensor,
    pub r1: Tensor,
}

/// All three adversarial terms for one (real, fake) batch.
pub fn adversarial_losses(d: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<AdversarialLosses> {
    if real.dims()[1..] != fake.dims()[1..] {
        bail!(Shape, "real {:?} vs fake {:?}", real.dims(), fake.dims());
    }
    let real_logits = d.forward(real)?;
    let fake_logits = d.forward(fake)?;
    Ok(AdversarialLosses {
        generator: generator_adversarial(&fake_logits)?,
        discriminator: discriminator_adversarial(&real_logits, &fake_logits)?,
        r1: r1_penalty(d, real)?,
    })
}

/// `‖W‖₂` over the adaptation-block convolutions; projections, affine maps
/// and gates are excluded.
pub fn adaptation_weight_norm(adapter: &crate::adaptation::StyleAdapter) -> Result<Tensor> {
    weight_norm(&adapter.conv_weights())
}

/// `‖W‖₂` over a set of convolution weight tensors.
pub fn weight_norm(weights: &[Tensor]) -> Result<Tensor> {
    let Some(first) = weights.first() else {
        bail!(Argument, "no weights given");
    };
    let mut sum = first.sqr()?.sum_all()?;
    for w in &weights[1..] {
        sum = (sum + w.sqr()?.sum_all()?)?;
    }
    safe_sqrt(&sum)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adv: f64,
    pub cx: f64,
    pub fm: f64,
    pub id: f64,
    pub perc: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            cx: 0.25,
            fm: 1.0,
            id: 1.0,
            perc: 1.0,
            reg: 0.01,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            adv: 0.0,
            cx: 0.0,
            fm: 0.0,
            id: 0.0,
            perc: 0.0,
            reg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("adv", self.adv),
            ("cx", self.cx),
            ("fm", self.fm),
            ("id", self.id),
            ("perc", self.perc),
            ("reg", self.reg),
        ] {
            if !v.is_finite() || v < 0.0 {
                bail!(Config, "loss weight {name} must be finite and >= 0, got {v}");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
}

/// Unweighted generator-side loss terms of one step.
#[derive(Clone, Debug)]
pub struct GeneratorTerms {
    pub adv: Tensor,
    pub cx: Tensor,
    pub fm: Tensor,
    pub id: Tensor,
    /// Stage II only.
    pub perc: Option<Tensor>,
    /// Stage II only: `‖W‖₂` of the adaptation convs.
    pub reg: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorTerms {
    pub adv: Tensor,
    pub r1: Tensor,
}

/// Weighted totals `(L_G, L_D)` for a stage.
///
/// Stage I: `λ_adv·adv + λ_CX·CX + λ_FM·FM + λ_ID·ID`; Stage II adds
/// `λ_perc·Perc + λ_reg·‖W‖₂`. `L_D = adv_D + r1_weight·R1` regardless of λ.
pub fn stage_objective(
    stage: Stage,
    w: &LossWeights,
    r1_weight: f64,
    g: &GeneratorTerms,
    d: &DiscriminatorTerms,
) -> Result<(Tensor, Tensor)> {
    w.validate()?;
    let mut total = ((g.adv.affine(w.adv, 0.0)? + g.cx.affine(w.cx, 0.0)?)? + g.fm.affine(w.fm, 0.0)?)?;
    total = (total + g.id.affine(w.id, 0.0)?)?;
    if stage == Stage::II {
        let (Some(perc), Some(reg)) = (&g.perc, &g.reg) else {
            bail!(Usage, "stage II objective needs the perceptual and regularisation terms");
        };
        total = ((total + perc.affine(w.perc, 0.0)?)? + reg.affine(w.reg, 0.0)?)?;
    }
    let d_total = (&d.adv + d.r1.affine(r1_weight, 0.0)?)?;
    Ok((total, d_total))
}

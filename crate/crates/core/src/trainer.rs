//! Two-stage training of the adaptation blocks over the frozen generator.
//!
//! Stage I pairs random content codes with style codes of real sketches.
//! Stage II uses photo/sketch pairs: the photo supplies the content code, its
//! sketch the style code and the reconstruction target. Only the blocks,
//! their gates and the discriminator are updated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{AdaptConfig, StyleAdapter};
use crate::checkpoint::Archive;
use crate::encoder::Encoder;
use crate::error::{bail, Error, Result};
use crate::generator::{Discriminator, Generator, NoiseMode};
use crate::latent::{sample_z_plus_batch, MappingNetwork};
use crate::nn::{scalar, seeded_rng, Adam, Rng64};
use crate::objectives::{
    contextual_loss, discriminator_adversarial, feature_matching_loss, generator_adversarial, identity_loss, perceptual_from_features,
    perceptual_per_sample, r1_penalty, stage_objective, DiscriminatorTerms, GeneratorTerms, LossWeights, MetricNets, Stage,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub lr_blocks: f64,
    pub lr_disc: f64,
    pub weights: LossWeights,
    pub r1_weight: f64,
    pub cx_bandwidth: f64,
    pub seed: u64,
    /// Extra checkpoint every this many steps within a stage.
    pub checkpoint_every: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 1000,
            stage2_steps: 1000,
            batch_size: 4,
            lr_blocks: 2e-3,
            lr_disc: 2e-3,
            weights: LossWeights::default(),
            r1_weight: 1.0,
            cx_bandwidth: 0.5,
            seed: 0,
            checkpoint_every: None,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_steps + self.stage2_steps == 0 {
            bail!(Config, "at least one training step is required");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        for (name, v) in [
            ("lr_blocks", self.lr_blocks),
            ("lr_disc", self.lr_disc),
            ("cx_bandwidth", self.cx_bandwidth),
        ] {
            if !(v.is_finite() && v > 0.0) {
                bail!(Config, "{name} must be positive, got {v}");
            }
        }
        if !(self.r1_weight.is_finite() && self.r1_weight >= 0.0) {
            bail!(Config, "r1_weight must be >= 0");
        }
        if self.checkpoint_every == Some(0) {
            bail!(Config, "checkpoint cadence must be positive");
        }
        self.weights.validate()
    }
}

/// Networks that stay fixed during adaptation.
#[derive(Clone, Copy)]
pub struct FrozenNets<'a> {
    pub generator: &'a Generator,
    pub mapping: &'a MappingNetwork,
    pub encoder: &'a Encoder,
    pub metrics: &'a MetricNets,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenChecksums {
    pub generator: String,
    pub mapping: String,
    pub encoder: String,
    pub metrics: String,
}

impl FrozenNets<'_> {
    pub fn checksums(&self) -> Result<FrozenChecksums> {
        Ok(FrozenChecksums {
            generator: self.generator.checksum()?,
            mapping: self.mapping.checksum()?,
            encoder: self.encoder.checksum()?,
            metrics: self.metrics.checksum()?,
        })
    }

    fn check_frozen(&self) -> Result<()> {
        if !self.generator.is_frozen() || !self.mapping.is_frozen() {
            bail!(Usage, "the generator and mapping network must be frozen before adaptation");
        }
        Ok(())
    }

    /// `f(E(x))` for a batch of images, in chunks.
    pub fn style_codes(&self, imgs: &Tensor) -> Result<Tensor> {
        let n = imgs.dim(0)?;
        let mut out = Vec::new();
        for start in (0..n).step_by(16) {
            let chunk = imgs.narrow(0, start, 16.min(n - start))?;
            out.push(self.mapping.forward(&self.encoder.forward(&chunk)?)?.detach());
        }
        Ok(Tensor::cat(&out, 0)?)
    }
}

/// Sketches with their cached W+ style codes.
#[derive(Clone, Debug)]
pub struct StylePool {
    pub sketches: Tensor,
    pub codes: Tensor,
}

/// Photo/sketch pairs with cached W+ codes of both.
#[derive(Clone, Debug)]
pub struct PairedSet {
    pub photos: Tensor,
    pub sketches: Tensor,
    pub photo_codes: Tensor,
    pub sketch_codes: Tensor,
}

impl StylePool {
    pub fn new(nets: &FrozenNets, sketches: &Tensor) -> Result<Self> {
        if sketches.dim(0)? == 0 {
            bail!(Data, "style pool is empty");
        }
        Ok(Self {
            codes: nets.style_codes(sketches)?,
            sketches: sketches.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.sketches.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairedSet {
    pub fn new(nets: &FrozenNets, photos: &Tensor, sketches: &Tensor) -> Result<Self> {
        if photos.dims() != sketches.dims() {
            bail!(Data, "photos {:?} and sketches {:?} do not pair up", photos.dims(), sketches.dims());
        }
        if photos.dim(0)? == 0 {
            bail!(Data, "paired set is empty");
        }
        Ok(Self {
            photo_codes: nets.style_codes(photos)?,
            sketch_codes: nets.style_codes(sketches)?,
            photos: photos.clone(),
            sketches: sketches.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.photos.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.insert("codes.photo", &self.photo_codes)?;
        a.insert("codes.sketch", &self.sketch_codes)?;
        Ok(a)
    }
}

/// Mutable training state: the blocks, the discriminator and their optimisers.
pub struct TrainState {
    pub adapter: StyleAdapter,
    pub discriminator: Discriminator,
    opt_blocks: Adam,
    opt_disc: Adam,
    rng: Rng64,
    pub step: usize,
}

impl TrainState {
    /// Fresh blocks over `g`; the discriminator is copied from `disc`.
    pub fn new(g: &Generator, disc: &Discriminator, config: &TrainConfig) -> Result<Self> {
        let mut rng = seeded_rng(config.seed);
        let adapter = StyleAdapter::new(AdaptConfig::for_generator(g), g, &mut rng)?;
        Self::from_parts(adapter, disc.deep_clone()?, config)
    }

    pub fn from_parts(adapter: StyleAdapter, discriminator: Discriminator, config: &TrainConfig) -> Result<Self> {
        Ok(Self {
            opt_blocks: Adam::new(adapter.vars(), config.lr_blocks, 0.0, 0.99),
            opt_disc: Adam::new(discriminator.vars(), config.lr_disc, 0.0, 0.99),
            adapter,
            discriminator,
            rng: seeded_rng(config.seed ^ 0xA11CE),
            step: 0,
        })
    }

    pub fn to_archive(&self, stage: Stage) -> Result<Archive> {
        let mut a = self.adapter.to_archive()?;
        a.merge(self.discriminator.to_archive()?);
        a.metadata.insert("train.stage".into(), format!("{stage:?}"));
        a.metadata.insert("train.step".into(), self.step.to_string());
        Ok(a)
    }

    fn snapshot(&self) -> Result<[BTreeMap<String, Tensor>; 2]> {
        Ok([self.adapter.store().snapshot()?, self.discriminator.store().snapshot()?])
    }

    fn restore(&self, s: &[BTreeMap<String, Tensor>; 2]) -> Result<()> {
        self.adapter.store().restore(&s[0])?;
        self.discriminator.store().restore(&s[1])
    }
}

/// Named scalar values of one step, in a fixed order.
pub type StepScalars = Vec<(&'static str, f64)>;

/// Unweighted generator-side terms for output `out` against style target
/// `target` and content reference `content` (= g(w⁺)).
#[allow(clippy::too_many_arguments)]
pub fn generator_terms(
    stage: Stage,
    nets: &MetricNets,
    disc: &Discriminator,
    adapter: &StyleAdapter,
    out: &Tensor,
    target: &Tensor,
    content: &Tensor,
    bandwidth: f64,
) -> Result<GeneratorTerms> {
    let fo = nets.extractor.forward(out)?;
    let ft = nets.extractor.forward(target)?;
    // contextual matching on the coarser taps only; the finest tap is costly and mostly texture
    let skip = usize::from(fo.len() > 1);
    let (perc, reg) = match stage {
        Stage::I => (None, None),
        Stage::II => (Some(perceptual_from_features(&fo, &ft)?), Some(adapter.weight_norm()?)),
    };
    Ok(GeneratorTerms {
        adv: generator_adversarial(&disc.forward_with(out, true)?)?,
        cx: contextual_loss(&fo[skip..], &ft[skip..], bandwidth)?,
        fm: feature_matching_loss(&fo, &ft)?,
        id: identity_loss(&nets.embedder, out, content)?,
        perc,
        reg,
    })
}

fn pick(t: &Tensor, idx: &[u32]) -> Result<Tensor> {
    Ok(t.index_select(&Tensor::new(idx, t.device())?, 0)?)
}

fn draw_indices(rng: &mut Rng64, n: usize, k: usize) -> Vec<u32> {
    if k <= n {
        sample(rng, n, k).into_iter().map(|i| i as u32).collect()
    } else {
        (0..k).map(|_| rng.random_range(0..n) as u32).collect()
    }
}

struct StepBatch {
    content_codes: Tensor,
    style_codes: Tensor,
    target: Tensor,
}

fn run_step(state: &mut TrainState, nets: &FrozenNets, config: &TrainConfig, stage: Stage, batch: StepBatch) -> Result<StepScalars> {
    let g = nets.generator;
    let out = state
        .adapter
        .stylized_synthesize(g, &batch.content_codes, &batch.style_codes, NoiseMode::Zero)?;
    let content = g.synthesize(&batch.content_codes, NoiseMode::Zero)?.detach();
    let d = &state.discriminator;
    let d_terms = DiscriminatorTerms {
        adv: discriminator_adversarial(&d.forward(&batch.target)?, &d.forward(&out.detach())?)?,
        r1: r1_penalty(d, &batch.target)?,
    };
    let g_terms = generator_terms(
        stage,
        nets.metrics,
        d,
        &state.adapter,
        &out,
        &batch.target,
        &content,
        config.cx_bandwidth,
    )?;
    let (loss_g, loss_d) = stage_objective(stage, &config.weights, config.r1_weight, &g_terms, &d_terms)?;
    let mut scalars: StepScalars = vec![
        ("adv_g", scalar(&g_terms.adv)?),
        ("cx", scalar(&g_terms.cx)?),
        ("fm", scalar(&g_terms.fm)?),
        ("id", scalar(&g_terms.id)?),
    ];
    if let (Some(p), Some(r)) = (&g_terms.perc, &g_terms.reg) {
        scalars.push(("perc", scalar(p)?));
        scalars.push(("reg", scalar(r)?));
    }
    scalars.extend([
        ("total_g", scalar(&loss_g)?),
        ("adv_d", scalar(&d_terms.adv)?),
        ("r1", scalar(&d_terms.r1)?),
        ("total_d", scalar(&loss_d)?),
    ]);
    if let Some((name, v)) = scalars.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Diverged {
            step: state.step,
            reason: format!("{name} = {v}"),
            checkpoint: None,
        });
    }
    let grads_d = loss_d.backward()?;
    let grads_g = loss_g.backward()?;
    state.opt_disc.step(&grads_d)?;
    state.opt_blocks.step(&grads_g)?;
    state.step += 1;
    Ok(scalars)
}

/// One Stage I update: random content codes against sketches from the pool.
pub fn stage1_step(state: &mut TrainState, nets: &FrozenNets, pool: &StylePool, config: &TrainConfig) -> Result<StepScalars> {
    nets.check_frozen()?;
    let gc = nets.generator.config();
    let b = config.batch_size;
    let z = sample_z_plus_batch(&mut state.rng, b, gc.num_styles(), gc.latent_dim, nets.generator.dtype())?;
    let idx = draw_indices(&mut state.rng, pool.len(), b);
    let batch = StepBatch {
        content_codes: nets.mapping.forward(&z)?.detach(),
        style_codes: pick(&pool.codes, &idx)?,
        target: pick(&pool.sketches, &idx)?,
    };
    run_step(state, nets, config, Stage::I, batch)
}

/// One Stage II update on a paired batch.
pub fn stage2_step(state: &mut TrainState, nets: &FrozenNets, pairs: &PairedSet, config: &TrainConfig) -> Result<StepScalars> {
    nets.check_frozen()?;
    let idx = draw_indices(&mut state.rng, pairs.len(), config.batch_size);
    let batch = StepBatch {
        content_codes: pick(&pairs.photo_codes, &idx)?,
        style_codes: pick(&pairs.sketch_codes, &idx)?,
        target: pick(&pairs.sketches, &idx)?,
    };
    run_step(state, nets, config, Stage::II, batch)
}

/// Stylised outputs for every pair, `(N, 3, R, R)`.
pub fn stylize_pairs(adapter: &StyleAdapter, g: &Generator, pairs: &PairedSet) -> Result<Tensor> {
    let n = pairs.len();
    let mut out = Vec::new();
    for start in (0..n).step_by(8) {
        let k = 8.min(n - start);
        out.push(
            adapter
                .stylized_synthesize(
                    g,
                    &pairs.photo_codes.narrow(0, start, k)?,
                    &pairs.sketch_codes.narrow(0, start, k)?,
                    NoiseMode::Zero,
                )?
                .detach(),
        );
    }
    Ok(Tensor::cat(&out, 0)?)
}

/// Mean perceptual loss between stylised outputs and their target sketches.
pub fn mean_perceptual(adapter: &StyleAdapter, nets: &FrozenNets, pairs: &PairedSet) -> Result<f64> {
    let out = stylize_pairs(adapter, nets.generator, pairs)?;
    scalar(&perceptual_per_sample(&nets.metrics.extractor, &out, &pairs.sketches)?.mean_all()?)
}

/// Mean pairwise perceptual distance among the stylised outputs of all pairs.
pub fn style_diversity(adapter: &StyleAdapter, nets: &FrozenNets, pairs: &PairedSet) -> Result<f64> {
    let out = stylize_pairs(adapter, nets.generator, pairs)?;
    let n = out.dim(0)?;
    if n < 2 {
        return Ok(0.0);
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for i in 0..n as u32 {
        for j in i + 1..n as u32 {
            a.push(i);
            b.push(j);
        }
    }
    let d = perceptual_per_sample(&nets.metrics.extractor, &pick(&out, &a)?, &pick(&out, &b)?)?;
    scalar(&d.mean_all()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub stage: Stage,
    pub term: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub wall_clock_secs: f64,
    pub checksums_start: FrozenChecksums,
    pub checksums_end: FrozenChecksums,
    /// Style diversity and mean perceptual loss on the paired set at each
    /// stage boundary: `(label, value)` with labels like `stage2_end`.
    pub probes: BTreeMap<String, f64>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    /// `step,stage,term,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,stage,term,value\n");
        for r in &self.log {
            let _ = writeln!(s, "{},{:?},{},{}", r.step, r.stage, r.term, r.value);
        }
        s
    }

    pub fn values(&self, stage: Stage, term: &str) -> Vec<f64> {
        self.log
            .iter()
            .filter(|r| r.stage == stage && r.term == term)
            .map(|r| r.value)
            .collect()
    }
}

/// Training inputs: Stage I style sketches and Stage II pairs.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub style_sketches: Option<Tensor>,
    pub photos: Option<Tensor>,
    pub sketches: Option<Tensor>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub report: TrainReport,
}

fn save_checkpoint(state: &TrainState, stage: Stage, dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    state.to_archive(stage)?.save(&path)?;
    out.push(path);
    Ok(())
}

/// Runs Stage I then Stage II starting from fresh blocks and a copy of `disc`.
pub fn run_training(config: &TrainConfig, nets: &FrozenNets, disc: &Discriminator, data: &TrainData) -> Result<TrainOutcome> {
    let state = TrainState::new(nets.generator, disc, config)?;
    continue_training(config, nets, state, data)
}

/// As [`run_training`] but from an existing state.
pub fn continue_training(config: &TrainConfig, nets: &FrozenNets, mut state: TrainState, data: &TrainData) -> Result<TrainOutcome> {
    config.validate()?;
    nets.check_frozen()?;
    let started = Instant::now();
    let checksums_start = nets.checksums()?;
    let style_sketches = data.style_sketches.as_ref().or(data.sketches.as_ref());
    let pool = match (config.stage1_steps, style_sketches) {
        (0, _) => None,
        (_, Some(s)) => Some(StylePool::new(nets, s)?),
        (_, None) => bail!(Config, "stage I needs style sketches"),
    };
    let pairs = match (&data.photos, &data.sketches) {
        (Some(p), Some(s)) => Some(PairedSet::new(nets, p, s)?),
        _ if config.stage2_steps > 0 => bail!(Config, "stage II needs paired photos and sketches"),
        _ => None,
    };
    if let (Some(dir), Some(p)) = (&config.output_dir, &pairs) {
        std::fs::create_dir_all(dir)?;
        p.to_archive()?.save(dir.join("codes.ckpt"))?;
    }
    let mut log = Vec::new();
    let mut probes = BTreeMap::new();
    let mut checkpoints = Vec::new();
    let probe = |label: &str, state: &TrainState, probes: &mut BTreeMap<String, f64>| -> Result<()> {
        if let Some(p) = &pairs {
            probes.insert(format!("{label}.diversity"), style_diversity(&state.adapter, nets, p)?);
            probes.insert(format!("{label}.perceptual"), mean_perceptual(&state.adapter, nets, p)?);
        }
        Ok(())
    };
    for stage in [Stage::I, Stage::II] {
        let steps = match stage {
            Stage::I => config.stage1_steps,
            Stage::II => config.stage2_steps,
        };
        if steps == 0 {
            continue;
        }
        let tag = match stage {
            Stage::I => "stage1",
            Stage::II => "stage2",
        };
        probe(&format!("{tag}_start"), &state, &mut probes)?;
        let mut good = state.snapshot()?;
        for k in 0..steps {
            let result = match stage {
                Stage::I => stage1_step(&mut state, nets, pool.as_ref().expect("pool checked"), config),
                Stage::II => stage2_step(&mut state, nets, pairs.as_ref().expect("pairs checked"), config),
            };
            let scalars = match result {
                Ok(s) => s,
                Err(Error::Diverged { step, reason, .. }) => {
                    state.restore(&good)?;
                    let mut saved = Vec::new();
                    if let Some(dir) = &config.output_dir {
                        save_checkpoint(&state, stage, dir, "last_finite.ckpt", &mut saved)?;
                    }
                    return Err(Error::Diverged {
                        step,
                        reason,
                        checkpoint: saved.pop(),
                    });
                }
                Err(e) => return Err(e),
            };
            good = state.snapshot()?;
            for (term, value) in scalars {
                log.push(LogRow {
                    step: state.step,
                    stage,
                    term: term.to_string(),
                    value,
                });
            }
            if let (Some(every), Some(dir)) = (config.checkpoint_every, &config.output_dir) {
                if (k + 1) % every == 0 && k + 1 < steps {
                    save_checkpoint(&state, stage, dir, &format!("{tag}_step{}.ckpt", k + 1), &mut checkpoints)?;
                }
            }
        }
        probe(&format!("{tag}_end"), &state, &mut probes)?;
        if let Some(dir) = &config.output_dir {
            save_checkpoint(&state, stage, dir, &format!("{tag}.ckpt"), &mut checkpoints)?;
        }
        log::info!("{tag} finished after {steps} steps");
    }
    let report = TrainReport {
        log,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checksums_start,
        checksums_end: nets.checksums()?,
        probes,
        checkpoints,
    };
    if report.checksums_start != report.checksums_end {
        bail!(Numeric, "a frozen network changed during training");
    }
    if let Some(dir) = &config.output_dir {
        std::fs::write(dir.join("losses.csv"), report.to_csv())?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(TrainOutcome { state, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_pairs;
    use crate::encoder::EncoderConfig;
    use crate::generator::{GeneratorConfig, PretrainConfig, PretrainedBase};
    use candle_core::DType;

    struct Fixture {
        base: PretrainedBase,
        encoder: Encoder,
        metrics: MetricNets,
        data: TrainData,
    }

    impl Fixture {
        fn new() -> Self {
            let pc = PretrainConfig {
                generator: GeneratorConfig {
                    resolution: 16,
                    channels: vec![8, 8, 8],
                    latent_dim: 16,
                },
                mapping_depth: 2,
                ..Default::default()
            };
            let mut base = PretrainedBase::initial(&pc, DType::F32).unwrap();
            base.generator.freeze();
            base.mapping.freeze();
            let encoder = Encoder::new(EncoderConfig::for_generator(&pc.generator), DType::F32, &mut seeded_rng(1)).unwrap();
            let ds = generate_synthetic_pairs(6, 16, 0, 2).unwrap();
            Self {
                base,
                encoder,
                metrics: MetricNets::new(3, DType::F32).unwrap(),
                data: TrainData {
                    style_sketches: None,
                    photos: Some(ds.photos(DType::F32).unwrap()),
                    sketches: Some(ds.sketches(DType::F32).unwrap()),
                },
            }
        }

        fn nets(&self) -> FrozenNets<'_> {
            FrozenNets {
                generator: &self.base.generator,
                mapping: &self.base.mapping,
                encoder: &self.encoder,
                metrics: &self.metrics,
            }
        }
    }

    fn config(s1: usize, s2: usize) -> TrainConfig {
        TrainConfig {
            stage1_steps: s1,
            stage2_steps: s2,
            batch_size: 2,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn a_step_moves_blocks_and_discriminator_but_not_the_generator() {
        let fx = Fixture::new();
        let nets = fx.nets();
        let cfg = config(1, 0);
        let mut state = TrainState::new(&fx.base.generator, &fx.base.discriminator, &cfg).unwrap();
        let (blocks, disc, frozen) = (
            state.adapter.checksum().unwrap(),
            state.discriminator.checksum().unwrap(),
            nets.checksums().unwrap(),
        );
        let pool = StylePool::new(&nets, fx.data.sketches.as_ref().unwrap()).unwrap();
        let s = stage1_step(&mut state, &nets, &pool, &cfg).unwrap();
        let names: Vec<_> = s.iter().map(|(n, _)| *n).collect();
        assert_eq!(names, ["adv_g", "cx", "fm", "id", "total_g", "adv_d", "r1", "total_d"]);
        assert_ne!(state.adapter.checksum().unwrap(), blocks);
        assert_ne!(state.discriminator.checksum().unwrap(), disc);
        assert_eq!(nets.checksums().unwrap(), frozen);
        // the source discriminator is untouched
        assert_eq!(fx.base.discriminator.checksum().unwrap(), disc);
    }

    #[test]
    fn stage_two_logs_perceptual_and_regularizer() {
        let fx = Fixture::new();
        let nets = fx.nets();
        let cfg = config(0, 1);
        let mut state = TrainState::new(&fx.base.generator, &fx.base.discriminator, &cfg).unwrap();
        let pairs = PairedSet::new(&nets, fx.data.photos.as_ref().unwrap(), fx.data.sketches.as_ref().unwrap()).unwrap();
        let s = stage2_step(&mut state, &nets, &pairs, &cfg).unwrap();
        let names: Vec<_> = s.iter().map(|(n, _)| *n).collect();
        assert_eq!(
            names,
            ["adv_g", "cx", "fm", "id", "perc", "reg", "total_g", "adv_d", "r1", "total_d"]
        );
        let get = |k: &str| s.iter().find(|(n, _)| *n == k).unwrap().1;
        let w = LossWeights::default();
        let want =
            w.adv * get("adv_g") + w.cx * get("cx") + w.fm * get("fm") + w.id * get("id") + w.perc * get("perc") + w.reg * get("reg");
        assert!((get("total_g") - want).abs() < 1e-4 * want.abs().max(1.0));
        assert!((get("total_d") - (get("adv_d") + cfg.r1_weight * get("r1"))).abs() < 1e-4);
    }

    #[test]
    fn zero_weights_leave_blocks_unchanged() {
        let fx = Fixture::new();
        let nets = fx.nets();
        let cfg = TrainConfig {
            weights: LossWeights::zero(),
            ..config(2, 2)
        };
        let init = TrainState::new(&fx.base.generator, &fx.base.discriminator, &cfg).unwrap();
        let before = init.adapter.checksum().unwrap();
        let out = continue_training(&cfg, &nets, init, &fx.data).unwrap();
        assert_eq!(out.state.adapter.checksum().unwrap(), before);
    }

    #[test]
    fn heavy_regularizer_shrinks_block_weights() {
        let fx = Fixture::new();
        let nets = fx.nets();
        let cfg = TrainConfig {
            weights: LossWeights {
                reg: 1e6,
                ..LossWeights::zero()
            },
            ..config(0, 5)
        };
        let state = TrainState::new(&fx.base.generator, &fx.base.discriminator, &cfg).unwrap();
        let before = scalar(&state.adapter.weight_norm().unwrap()).unwrap();
        let out = continue_training(&cfg, &nets, state, &fx.data).unwrap();
        let norms = out.report.values(Stage::II, "reg");
        assert_eq!(norms.len(), 5);
        assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
        assert!(scalar(&out.state.adapter.weight_norm().unwrap()).unwrap() < before);
    }

    #[test]
    fn training_is_deterministic() {
        let fx = Fixture::new();
        let nets = fx.nets();
        let cfg = config(2, 2);
        let a = run_training(&cfg, &nets, &fx.base.discriminator, &fx.data).unwrap();
        let b = run_training(&cfg, &nets, &fx.base.discriminator, &fx.data).unwrap();
        assert_eq!(a.state.adapter.checksum().unwrap(), b.state.adapter.checksum().unwrap());
        assert_eq!(a.report.log, b.report.log);
        assert_eq!(a.report.probes, b.report.probes);
    }

    #[test]
    fn one_step_per_stage_writes_two_stage_checkpoints() {
        let fx = Fixture::new();
        let nets = fx.nets();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            output_dir: Some(dir.path().to_path_buf()),
            ..config(1, 1)
        };
        let out = run_training(&cfg, &nets, &fx.base.discriminator, &fx.data).unwrap();
        let names: Vec<_> = out
            .report
            .checkpoints
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(names, ["stage1.ckpt", "stage2.ckpt"]);
        let csv = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
        assert!(csv.starts_with("step,stage,term,value\n"));
        assert_eq!(csv.lines().count(), 1 + 8 + 10);
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("codes.ckpt").exists());
        for key in ["stage1_start", "stage1_end", "stage2_start", "stage2_end"] {
            assert!(out.report.probes.contains_key(&format!("{key}.diversity")));
        }
        let restored = StyleAdapter::from_archive(&Archive::load(dir.path().join("stage2.ckpt")).unwrap(), &fx.base.generator).unwrap();
        assert_eq!(restored.checksum().unwrap(), out.state.adapter.checksum().unwrap());
    }

    #[test]
    fn periodic_checkpoints_follow_the_cadence() {
        let fx = Fixture::new();
        let nets = fx.nets();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            output_dir: Some(dir.path().to_path_buf()),
            checkpoint_every: Some(2),
            ..config(0, 5)
        };
        let out = run_training(&cfg, &nets, &fx.base.discriminator, &fx.data).unwrap();
        let names: Vec<_> = out
            .report
            .checkpoints
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(names, ["stage2_step2.ckpt", "stage2_step4.ckpt", "stage2.ckpt"]);
    }

    #[test]
    fn missing_data_and_unfrozen_networks_are_rejected() {
        let fx = Fixture::new();
        let nets = fx.nets();
        let empty = TrainData::default();
        assert!(matches!(
            run_training(&config(1, 0), &nets, &fx.base.discriminator, &empty),
            Err(Error::Config(_))
        ));
        let photos_only = TrainData {
            photos: fx.data.photos.clone(),
            ..Default::default()
        };
        assert!(matches!(
            run_training(&config(0, 1), &nets, &fx.base.discriminator, &photos_only),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            run_training(&config(0, 0), &nets, &fx.base.discriminator, &fx.data),
            Err(Error::Config(_))
        ));

        let loose = PretrainedBase::initial(&PretrainConfig::default(), DType::F32).unwrap();
        let nets = FrozenNets {
            generator: &loose.generator,
            ..nets
        };
        assert!(matches!(
            run_training(&config(1, 0), &nets, &fx.base.discriminator, &fx.data),
            Err(Error::Usage(_))
        ));
    }
}

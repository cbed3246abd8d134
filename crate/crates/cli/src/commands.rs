use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use pssg::adaptation::StyleAdapter;
use pssg::checkpoint::Archive;
use pssg::config::{derive_seed, KvConfig};
use pssg::data::{generate_synthetic_pairs, preprocess, save_grid, stack_images, Image, PairedDataset};
use pssg::encoder::{self, Encoder, EncoderConfig};
use pssg::evaluation::{evaluate_model, hash_text, style_references, AdaptedModel, SketchModel};
use pssg::generator::{pretrain_base, Discriminator, NoiseMode, PretrainedBase};
use pssg::latent::{apply_latent_edit, LatentCode, LatentSpace};
use pssg::nn::seeded_rng;
use pssg::objectives::MetricNets;
use pssg::trainer::{continue_training, FrozenNets, TrainData, TrainState};
use pssg::{Error, Result};

use crate::settings;
use crate::{Common, StageArg};

const BASE: &str = "base.ckpt";
const METRICS: &str = "metrics.ckpt";
const ENCODER: &str = "encoder.ckpt";
const ADAPT_DIR: &str = "adapt";

fn load_config(common: &Common) -> Result<KvConfig> {
    let mut cfg = match &common.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    settings::check_keys(&cfg)?;
    Ok(cfg)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn read_image(path: &Path, resolution: usize) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    preprocess(&bytes, resolution).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

struct Base {
    base: PretrainedBase,
    metrics: MetricNets,
}

fn load_base(run: &Path) -> Result<Base> {
    let mut base = PretrainedBase::from_archive(&Archive::load(run.join(BASE))?)?;
    base.generator.freeze();
    base.mapping.freeze();
    let metrics = MetricNets::from_archive(&Archive::load(run.join(METRICS))?)?;
    Ok(Base { base, metrics })
}

fn load_encoder(run: &Path) -> Result<Encoder> {
    Encoder::from_archive(&Archive::load(run.join(ENCODER))?)
}

fn load_dataset(root: &Path, resolution: usize) -> Result<PairedDataset> {
    require(root)?;
    let loaded = PairedDataset::load(root, resolution)?;
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    Ok(loaded.dataset)
}

/// Newest adaptation checkpoint in the run directory.
fn default_checkpoint(run: &Path) -> PathBuf {
    let dir = run.join(ADAPT_DIR);
    let s2 = dir.join("stage2.ckpt");
    if s2.exists() {
        s2
    } else {
        dir.join("stage1.ckpt")
    }
}

pub fn synth_data(n: usize, res: usize, style: u8, seed: u64, out: &Path) -> Result<()> {
    let d = generate_synthetic_pairs(n, res, style, seed)?;
    d.save(out)?;
    log::info!("wrote {} pairs of style {style} to {}", d.len(), out.display());
    Ok(())
}

pub fn pretrain(common: &Common, photo_dir: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let mut pc = settings::pretrain(&cfg, common.seed)?;
    let res = pc.generator.resolution;
    let photos = match photo_dir {
        Some(dir) => {
            require(dir)?;
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "png" || e == "jpg" || e == "jpeg"))
                .collect();
            paths.sort();
            let imgs = paths.iter().map(|p| read_image(p, res)).collect::<Result<Vec<_>>>()?;
            stack_images(&imgs.iter().collect::<Vec<_>>(), DType::F32)?
        }
        None => pssg::data::generate_photos(settings::pretrain_photos(&cfg)?, res, derive_seed(common.seed, "photos"))?,
    };
    std::fs::create_dir_all(&common.run)?;
    pc.divergence_checkpoint = Some(common.run.join("pretrain_last_finite.ckpt"));
    let base = pretrain_base(&pc, &photos)?;
    base.to_archive()?.save(common.run.join(BASE))?;
    MetricNets::new(derive_seed(common.seed, "metrics"), DType::F32)?
        .to_archive()?
        .save(common.run.join(METRICS))?;
    let mut csv = String::from("step,d_loss,g_loss,r1\n");
    let r = &base.report;
    for i in 0..r.d_loss.len() {
        let _ = writeln!(csv, "{},{},{},{}", i + 1, r.d_loss[i], r.g_loss[i], r.r1[i]);
    }
    std::fs::write(common.run.join("pretrain_losses.csv"), csv)?;
    log::info!("pretrained {} steps into {}", r.steps, common.run.display());
    Ok(())
}

pub fn train_encoder(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let Base { base, metrics } = load_base(&common.run)?;
    let ec = EncoderConfig::for_generator(base.generator.config());
    let e = Encoder::new(ec, DType::F32, &mut seeded_rng(derive_seed(common.seed, "encoder.init")))?;
    let losses = encoder::train_encoder(
        &e,
        &base.generator,
        &base.mapping,
        &metrics.embedder,
        &settings::encoder(&cfg, common.seed)?,
    )?;
    e.to_archive()?.save(common.run.join(ENCODER))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", i + 1);
    }
    std::fs::write(common.run.join("encoder_losses.csv"), csv)?;
    log::info!("encoder trained for {} steps", losses.len());
    Ok(())
}

fn load_state(path: &Path, nets: &FrozenNets, cfg: &pssg::trainer::TrainConfig) -> Result<TrainState> {
    let a = Archive::load(path)?;
    TrainState::from_parts(
        StyleAdapter::from_archive(&a, nets.generator)?,
        Discriminator::from_archive(&a)?,
        cfg,
    )
}

pub fn adapt(common: &Common, data: &Path, stage: StageArg) -> Result<()> {
    let cfg = load_config(common)?;
    let Base { base, metrics } = load_base(&common.run)?;
    let encoder = load_encoder(&common.run)?;
    let nets = FrozenNets {
        generator: &base.generator,
        mapping: &base.mapping,
        encoder: &encoder,
        metrics: &metrics,
    };
    let dataset = load_dataset(data, base.generator.config().resolution)?;
    let out_dir = common.run.join(ADAPT_DIR);
    let mut tc = settings::adapt(&cfg, common.seed)?;
    tc.output_dir = Some(out_dir.clone());
    match stage {
        StageArg::One => tc.stage2_steps = 0,
        StageArg::Two => tc.stage1_steps = 0,
        StageArg::Both => {}
    }
    let state = match stage {
        StageArg::Two if out_dir.join("stage1.ckpt").exists() => load_state(&out_dir.join("stage1.ckpt"), &nets, &tc)?,
        _ => TrainState::new(&base.generator, &base.discriminator, &tc)?,
    };
    let train_data = TrainData {
        style_sketches: None,
        photos: Some(dataset.photos(DType::F32)?),
        sketches: Some(dataset.sketches(DType::F32)?),
    };
    let outcome = continue_training(&tc, &nets, state, &train_data)?;
    for (k, v) in &outcome.report.probes {
        log::info!("{k} = {v:.5}");
    }
    write_grid(&nets, &dataset, &out_dir)?;
    Ok(())
}

/// Rows of (photo, Stage I output, Stage II output) for the first pairs.
fn write_grid(nets: &FrozenNets, dataset: &PairedDataset, dir: &Path) -> Result<()> {
    let shown = dataset.take(4);
    let adapters = ["stage1.ckpt", "stage2.ckpt"]
        .iter()
        .map(|n| dir.join(n))
        .filter(|p| p.exists())
        .map(|p| StyleAdapter::from_archive(&Archive::load(&p)?, nets.generator))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for s in &shown.samples {
        let photo = s.photo.to_tensor(DType::F32)?.unsqueeze(0)?;
        let sketch = s.sketch.to_tensor(DType::F32)?.unsqueeze(0)?;
        let mut row = vec![s.photo.clone()];
        for a in &adapters {
            let model = AdaptedModel {
                generator: nets.generator,
                mapping: nets.mapping,
                encoder: nets.encoder,
                adapter: a,
            };
            row.push(Image::from_tensor(&model.generate(&photo, &sketch)?)?);
        }
        rows.push(row);
    }
    let refs: Vec<Vec<&Image>> = rows.iter().map(|r| r.iter().collect()).collect();
    save_grid(&refs, dir.join("grid.png"))
}

pub struct InferArgs {
    pub photo: PathBuf,
    pub style_ref: Option<PathBuf>,
    pub style_id: Option<u8>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub edit: Option<PathBuf>,
    pub mag: f32,
    pub edit_layers: Option<String>,
    pub out: PathBuf,
}

fn parse_layers(spec: &str, num_layers: usize) -> Result<std::ops::RangeInclusive<usize>> {
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::Usage(format!("bad layer range {spec:?}")))
    };
    match spec.split_once('-') {
        Some((a, b)) => Ok(parse(a)?..=parse(b)?),
        None if spec.trim().is_empty() => Ok(0..=num_layers - 1),
        None => {
            let k = parse(spec)?;
            Ok(k..=k)
        }
    }
}

fn read_direction(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!("{}: length is not a multiple of 4", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn infer(common: &Common, args: &InferArgs) -> Result<()> {
    let Base { base, .. } = load_base(&common.run)?;
    let encoder = load_encoder(&common.run)?;
    let res = base.generator.config().resolution;
    let style_ref = match (&args.style_ref, args.style_id) {
        (Some(p), _) => read_image(p, res)?,
        (None, Some(id)) => {
            let dataset = load_dataset(args.data.as_deref().expect("clap requires --data"), res)?;
            let Some(&i) = style_references(&dataset).get(&id) else {
                return Err(Error::Usage(format!("no sketch of style {id} in the dataset")));
            };
            dataset.samples[i].sketch.clone()
        }
        (None, None) => return Err(Error::Usage("a style exemplar is required: pass --style-ref or --style-id".into())),
    };
    let photo = read_image(&args.photo, res)?;
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| default_checkpoint(&common.run));
    let adapter = StyleAdapter::from_archive(&Archive::load(&ckpt)?, &base.generator)?;
    let model = AdaptedModel {
        generator: &base.generator,
        mapping: &base.mapping,
        encoder: &encoder,
        adapter: &adapter,
    };
    let mut w_c = model.code(&photo.to_tensor(DType::F32)?.unsqueeze(0)?)?;
    let w_s = model.code(&style_ref.to_tensor(DType::F32)?.unsqueeze(0)?)?;
    if let Some(path) = &args.edit {
        let code = LatentCode::from_tensor(LatentSpace::WPlus, &w_c)?;
        let layers = parse_layers(args.edit_layers.as_deref().unwrap_or(""), code.num_layers())?;
        let edited = apply_latent_edit(&code, &read_direction(path)?, args.mag, layers)?;
        w_c = edited.to_tensor(DType::F32)?;
    }
    let out: Tensor = adapter.stylized_synthesize(&base.generator, &w_c, &w_s, NoiseMode::Zero)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Image::from_tensor(&out)?.save_png(&args.out)?;
    log::info!("wrote {}", args.out.display());
    Ok(())
}

pub fn eval(common: &Common, data: &Path, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let Base { base, metrics } = load_base(&common.run)?;
    let encoder = load_encoder(&common.run)?;
    let dataset = load_dataset(data, base.generator.config().resolution)?;
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| default_checkpoint(&common.run));
    let archive = Archive::load(&ckpt)?;
    let adapter = StyleAdapter::from_archive(&archive, &base.generator)?;
    let model = AdaptedModel {
        generator: &base.generator,
        mapping: &base.mapping,
        encoder: &encoder,
        adapter: &adapter,
    };
    let config_hash = hash_text(&format!("seed = {}\n{}", common.seed, cfg.to_text()));
    let mut report = evaluate_model(&model, &metrics, &dataset, &config_hash)?;
    report.checkpoint_hash = Some(archive.content_hash()?);
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| common.run.join("eval"));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("metrics.csv"), report.to_csv())?;
    std::fs::write(dir.join("metrics.json"), report.summary_json()? + "\n")?;
    log::info!(
        "{} samples: ssim {:.4}, perceptual {:.4}, id {:.4}",
        report.count,
        report.mean_ssim,
        report.mean_perceptual,
        report.mean_id_loss
    );
    Ok(())
}

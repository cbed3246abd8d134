//! Mapping from flat configuration keys to the library's config structs.

use pssg::config::{derive_seed, KvConfig};
use pssg::encoder::EncoderTrainConfig;
use pssg::generator::{GeneratorConfig, PretrainConfig};
use pssg::objectives::LossWeights;
use pssg::trainer::TrainConfig;
use pssg::Result;

/// Every key the front end understands, for validation and `--help` text.
pub const KEYS: &[&str] = &[
    "generator.resolution",
    "generator.channels",
    "generator.latent_dim",
    "mapping.depth",
    "pretrain.photos",
    "pretrain.steps",
    "pretrain.batch",
    "pretrain.lr",
    "pretrain.r1",
    "encoder.steps",
    "encoder.batch",
    "encoder.lr",
    "encoder.id_weight",
    "adapt.stage1_steps",
    "adapt.stage2_steps",
    "adapt.batch",
    "adapt.lr_blocks",
    "adapt.lr_disc",
    "adapt.r1",
    "adapt.cx_bandwidth",
    "adapt.checkpoint_every",
    "lambda.adv",
    "lambda.cx",
    "lambda.fm",
    "lambda.id",
    "lambda.perc",
    "lambda.reg",
];

pub fn check_keys(cfg: &KvConfig) -> Result<()> {
    if let Some(k) = cfg.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(pssg::Error::Config(format!("unknown configuration key {k:?}")));
    }
    Ok(())
}

pub fn generator(cfg: &KvConfig) -> Result<GeneratorConfig> {
    let d = GeneratorConfig::desk();
    let g = GeneratorConfig {
        resolution: cfg.get_or("generator.resolution", d.resolution)?,
        channels: cfg.get_list("generator.channels")?.unwrap_or(d.channels),
        latent_dim: cfg.get_or("generator.latent_dim", d.latent_dim)?,
    };
    g.validate()?;
    Ok(g)
}

pub fn pretrain(cfg: &KvConfig, seed: u64) -> Result<PretrainConfig> {
    let d = PretrainConfig::default();
    Ok(PretrainConfig {
        generator: generator(cfg)?,
        mapping_depth: cfg.get_or("mapping.depth", d.mapping_depth)?,
        steps: cfg.get_or("pretrain.steps", d.steps)?,
        batch_size: cfg.get_or("pretrain.batch", d.batch_size)?,
        lr: cfg.get_or("pretrain.lr", d.lr)?,
        r1_weight: cfg.get_or("pretrain.r1", d.r1_weight)?,
        seed: derive_seed(seed, "pretrain"),
        divergence_checkpoint: None,
    })
}

pub fn pretrain_photos(cfg: &KvConfig) -> Result<usize> {
    cfg.get_or("pretrain.photos", pssg::generator::MIN_PRETRAIN_PHOTOS)
}

pub fn encoder(cfg: &KvConfig, seed: u64) -> Result<EncoderTrainConfig> {
    let d = EncoderTrainConfig::default();
    Ok(EncoderTrainConfig {
        steps: cfg.get_or("encoder.steps", d.steps)?,
        batch_size: cfg.get_or("encoder.batch", d.batch_size)?,
        lr: cfg.get_or("encoder.lr", d.lr)?,
        id_weight: cfg.get_or("encoder.id_weight", d.id_weight)?,
        seed: derive_seed(seed, "encoder.train"),
        ..d
    })
}

pub fn adapt(cfg: &KvConfig, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let w = LossWeights::default();
    let t = TrainConfig {
        stage1_steps: cfg.get_or("adapt.stage1_steps", d.stage1_steps)?,
        stage2_steps: cfg.get_or("adapt.stage2_steps", d.stage2_steps)?,
        batch_size: cfg.get_or("adapt.batch", d.batch_size)?,
        lr_blocks: cfg.get_or("adapt.lr_blocks", d.lr_blocks)?,
        lr_disc: cfg.get_or("adapt.lr_disc", d.lr_disc)?,
        weights: LossWeights {
            adv: cfg.get_or("lambda.adv", w.adv)?,
            cx: cfg.get_or("lambda.cx", w.cx)?,
            fm: cfg.get_or("lambda.fm", w.fm)?,
            id: cfg.get_or("lambda.id", w.id)?,
            perc: cfg.get_or("lambda.perc", w.perc)?,
            reg: cfg.get_or("lambda.reg", w.reg)?,
        },
        r1_weight: cfg.get_or("adapt.r1", d.r1_weight)?,
        cx_bandwidth: cfg.get_or("adapt.cx_bandwidth", d.cx_bandwidth)?,
        seed: derive_seed(seed, "adapt"),
        checkpoint_every: cfg.get("adapt.checkpoint_every")?,
        output_dir: None,
    };
    t.validate()?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_keys() {
        let cfg = KvConfig::default();
        assert_eq!(generator(&cfg).unwrap(), GeneratorConfig::desk());
        assert_eq!(adapt(&cfg, 0).unwrap().stage1_steps, TrainConfig::default().stage1_steps);
    }

    #[test]
    fn keys_are_read_and_unknown_keys_rejected() {
        let cfg = KvConfig::parse("generator.resolution = 16\ngenerator.channels = 8,8,8\nlambda.cx = 2").unwrap();
        check_keys(&cfg).unwrap();
        assert_eq!(generator(&cfg).unwrap().channels, vec![8, 8, 8]);
        assert_eq!(adapt(&cfg, 1).unwrap().weights.cx, 2.0);
        assert!(check_keys(&KvConfig::parse("lamda.cx = 1").unwrap()).is_err());
        assert!(generator(&KvConfig::parse("generator.resolution = 16").unwrap()).is_err());
    }

    #[test]
    fn component_seeds_differ() {
        let cfg = KvConfig::default();
        assert_ne!(pretrain(&cfg, 3).unwrap().seed, adapt(&cfg, 3).unwrap().seed);
    }
}

//! Desk-scale stand-ins for the sketch-quality metrics: windowed structural
//! similarity, feature-space perceptual distance and identity loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::StyleAdapter;
use crate::data::{Image, PairedDataset};
use crate::encoder::Encoder;
use crate::error::{bail, Result};
use crate::generator::{Generator, NoiseMode};
use crate::latent::MappingNetwork;
use crate::nn::scalar;
use crate::objectives::{identity_loss, perceptual_per_sample, IdentityEmbedder, MetricNets};

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const RANGE: f64 = 2.0;

fn gaussian_window(n: usize) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a row-major plane.
fn filter_valid(p: &[f64], size: usize, k: &[f64]) -> (Vec<f64>, usize) {
    let out = size + 1 - k.len();
    let mut tmp = vec![0.0; size * out];
    for y in 0..size {
        for x in 0..out {
            tmp[y * out + x] = k.iter().enumerate().map(|(i, w)| w * p[y * size + x + i]).sum();
        }
    }
    let mut res = vec![0.0; out * out];
    for y in 0..out {
        for x in 0..out {
            res[y * out + x] = k.iter().enumerate().map(|(i, w)| w * tmp[(y + i) * out + x]).sum();
        }
    }
    (res, out)
}

fn ssim_plane(a: &[f64], b: &[f64], size: usize) -> f64 {
    let k = gaussian_window(WINDOW.min(size));
    let (c1, c2) = ((K1 * RANGE).powi(2), (K2 * RANGE).powi(2));
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
    let (ma, n) = filter_valid(a, size, &k);
    let (mb, _) = filter_valid(b, size, &k);
    let (saa, _) = filter_valid(&prod(a, a), size, &k);
    let (sbb, _) = filter_valid(&prod(b, b), size, &k);
    let (sab, _) = filter_valid(&prod(a, b), size, &k);
    let mut total = 0.0;
    for i in 0..n * n {
        let (va, vb) = (saa[i] - ma[i] * ma[i], sbb[i] - mb[i] * mb[i]);
        let cov = sab[i] - ma[i] * mb[i];
        total += ((2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
    }
    total / (n * n) as f64
}

/// Mean SSIM over channels (11×11 Gaussian window, σ = 1.5, dynamic range 2).
pub fn structural_similarity(a: &Image, b: &Image) -> Result<f64> {
    if a.size != b.size || a.data.len() != b.data.len() {
        bail!(Shape, "images of size {} and {} cannot be compared", a.size, b.size);
    }
    let n = a.size * a.size;
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
        total += ssim_plane(&pa, &pb, a.size);
    }
    Ok(total / 3.0)
}

/// Identity loss between two images.
pub fn id_metric(e: &IdentityEmbedder, a: &Tensor, b: &Tensor) -> Result<f64> {
    scalar(&identity_loss(e, a, b)?)
}

/// Anything that turns a photo plus a style reference sketch into a sketch.
pub trait SketchModel {
    /// `photo` and `style_ref` are `(1, 3, R, R)`; returns `(1, 3, R, R)`.
    fn generate(&self, photo: &Tensor, style_ref: &Tensor) -> Result<Tensor>;
}

/// `g′(f(E(P)), f(E(S_ref)))`.
pub struct AdaptedModel<'a> {
    pub generator: &'a Generator,
    pub mapping: &'a MappingNetwork,
    pub encoder: &'a Encoder,
    pub adapter: &'a StyleAdapter,
}

impl AdaptedModel<'_> {
    pub fn code(&self, img: &Tensor) -> Result<Tensor> {
        self.mapping.forward(&self.encoder.forward(img)?)
    }
}

impl SketchModel for AdaptedModel<'_> {
    fn generate(&self, photo: &Tensor, style_ref: &Tensor) -> Result<Tensor> {
        let out = self
            .adapter
            .stylized_synthesize(self.generator, &self.code(photo)?, &self.code(style_ref)?, NoiseMode::Zero)?;
        Ok(out.detach())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub style_id: u8,
    pub ssim: f64,
    pub perceptual: f64,
    pub id_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
    pub mean_ssim: f64,
    pub mean_perceptual: f64,
    pub mean_id_loss: f64,
    pub count: usize,
    /// Style id → sample id of the reference sketch used for that style.
    pub style_refs: BTreeMap<u8, String>,
    pub config_hash: String,
    pub checkpoint_hash: Option<String>,
}

pub const REPORT_HEADER: &str = "# ssim_surrogate: windowed SSIM; perceptual_surrogate: fixed random-feature distance; id_loss: 1 - cosine of random-feature embeddings. Not comparable with published SCOOT/FSIM/LPIPS numbers.";

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\nsample_id,style_id,ssim_surrogate,perceptual_surrogate,id_loss\n");
        for m in &self.samples {
            let _ = writeln!(s, "{},{},{},{},{}", m.sample_id, m.style_id, m.ssim, m.perceptual, m.id_loss);
        }
        s
    }

    /// Summary without per-sample rows.
    pub fn summary_json(&self) -> Result<String> {
        let v = serde_json::json!({
            "note": REPORT_HEADER.trim_start_matches("# "),
            "count": self.count,
            "mean_ssim_surrogate": self.mean_ssim,
            "mean_perceptual_surrogate": self.mean_perceptual,
            "mean_id_loss": self.mean_id_loss,
            "style_refs": self.style_refs,
            "config_hash": self.config_hash,
            "checkpoint_hash": self.checkpoint_hash,
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Style id → index of its reference sample: the first by sorted sample id.
pub fn style_references(dataset: &PairedDataset) -> BTreeMap<u8, usize> {
    let mut refs: BTreeMap<u8, usize> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let e = refs.entry(s.style_id).or_insert(i);
        if s.sample_id < dataset.samples[*e].sample_id {
            *e = i;
        }
    }
    refs
}

/// Scores `model` on every pair, conditioning on each style's fixed reference sketch.
pub fn evaluate_model(model: &dyn SketchModel, nets: &MetricNets, dataset: &PairedDataset, config_hash: &str) -> Result<MetricsReport> {
    if dataset.is_empty() {
        bail!(Data, "evaluation dataset is empty");
    }
    let refs = style_references(dataset);
    let ref_tensors = refs
        .iter()
        .map(|(&style, &i)| Ok((style, dataset.samples[i].sketch.to_tensor(DType::F32)?.unsqueeze(0)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| dataset.samples[a].sample_id.cmp(&dataset.samples[b].sample_id));
    let mut samples = Vec::with_capacity(order.len());
    for i in order {
        let s = &dataset.samples[i];
        let photo = s.photo.to_tensor(DType::F32)?.unsqueeze(0)?;
        let target = s.sketch.to_tensor(DType::F32)?.unsqueeze(0)?;
        let out = model.generate(&photo, &ref_tensors[&s.style_id])?;
        if out.dims() != target.dims() {
            bail!(Shape, "model produced {:?}, expected {:?}", out.dims(), target.dims());
        }
        samples.push(SampleMetrics {
            sample_id: s.sample_id.clone(),
            style_id: s.style_id,
            ssim: structural_similarity(&Image::from_tensor(&out)?, &s.sketch)?,
            perceptual: scalar(&perceptual_per_sample(&nets.extractor, &out, &target)?)?,
            id_loss: id_metric(&nets.embedder, &out, &target)?,
        });
    }
    let n = samples.len() as f64;
    let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        mean_ssim: mean(|m| m.ssim),
        mean_perceptual: mean(|m| m.perceptual),
        mean_id_loss: mean(|m| m.id_loss),
        count: samples.len(),
        style_refs: refs.iter().map(|(&k, &i)| (k, dataset.samples[i].sample_id.clone())).collect(),
        config_hash: config_hash.to_string(),
        checkpoint_hash: None,
        samples,
    })
}

/// Short hex digest of arbitrary configuration text.
pub fn hash_text(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_pairs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(img: &Image, amp: f32, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = img.clone();
        for v in &mut out.data {
            *v = (*v + rng.random_range(-amp..=amp)).clamp(-1.0, 1.0);
        }
        out
    }

    // Direct 2-D window sums, no separability.
    fn ssim_oracle(a: &[f64], b: &[f64], size: usize) -> f64 {
        let c = 5.0;
        let mut w = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in w.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-(((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / 4.5)).exp();
                s += *v;
            }
        }
        let (c1, c2) = (0.0004, 0.0036);
        let n = size - 10;
        let mut total = 0.0;
        for y in 0..n {
            for x in 0..n {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = w[i][j] / s;
                        let (p, q) = (a[(y + i) * size + x + j], b[(y + i) * size + x + j]);
                        ma += k * p;
                        mb += k * q;
                        aa += k * p * p;
                        bb += k * q * q;
                        ab += k * p * q;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total / (n * n) as f64
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        let d = generate_synthetic_pairs(1, 24, 1, 3).unwrap();
        let a = &d.samples[0].sketch;
        let b = noisy(a, 0.3, 1);
        let n = 24 * 24;
        let mut want = 0.0;
        for c in 0..3 {
            let pa: Vec<f64> = a.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
            let pb: Vec<f64> = b.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
            want += ssim_oracle(&pa, &pb, 24) / 3.0;
        }
        let got = structural_similarity(a, &b).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ssim_identity_and_noise_monotonic() {
        let d = generate_synthetic_pairs(1, 32, 0, 5).unwrap();
        let a = &d.samples[0].sketch;
        assert!((structural_similarity(a, a).unwrap() - 1.0).abs() < 1e-9);
        let mut last = 1.0;
        for amp in [0.05, 0.2, 0.5, 1.0] {
            let s = structural_similarity(a, &noisy(a, amp, 9)).unwrap();
            assert!(s < last, "amp {amp}: {s} !< {last}");
            last = s;
        }
        assert!(structural_similarity(a, &Image::filled(16, [0.0; 3])).is_err());
    }

    struct Echo;
    impl SketchModel for Echo {
        fn generate(&self, _photo: &Tensor, style_ref: &Tensor) -> Result<Tensor> {
            Ok(style_ref.clone())
        }
    }

    struct Oracle<'a>(&'a PairedDataset);
    impl SketchModel for Oracle<'_> {
        fn generate(&self, photo: &Tensor, _style_ref: &Tensor) -> Result<Tensor> {
            let p = Image::from_tensor(photo)?;
            let s = self.0.samples.iter().find(|s| s.photo == p).expect("known photo");
            s.sketch.to_tensor(DType::F32)?.unsqueeze(0).map_err(Into::into)
        }
    }

    #[test]
    fn evaluation_scores_perfect_model_exactly() {
        let mut d = generate_synthetic_pairs(3, 32, 0, 1).unwrap();
        d.extend(generate_synthetic_pairs(2, 32, 2, 2).unwrap());
        let nets = MetricNets::new(4, DType::F32).unwrap();
        let r = evaluate_model(&Oracle(&d), &nets, &d, "abc").unwrap();
        assert_eq!(r.count, 5);
        assert!((r.mean_ssim - 1.0).abs() < 1e-9);
        assert!(r.mean_perceptual.abs() < 1e-9);
        assert!(r.mean_id_loss.abs() < 1e-9);
        assert_eq!(r.style_refs[&0], "s0_00000");
        assert_eq!(r.style_refs[&2], "s2_00000");

        let echo = evaluate_model(&Echo, &nets, &d, "abc").unwrap();
        // The reference sample itself scores perfectly under the echo model.
        let first = echo.samples.iter().find(|m| m.sample_id == "s0_00000").unwrap();
        assert!((first.ssim - 1.0).abs() < 1e-9);
        assert!(echo.mean_ssim < 1.0 && echo.mean_perceptual > 0.0);
        let csv = echo.to_csv();
        assert!(csv.starts_with("# "));
        assert_eq!(csv.lines().count(), 2 + 5);
        assert!(echo.summary_json().unwrap().contains("mean_ssim_surrogate"));
    }

    #[test]
    fn empty_dataset_is_a_data_error() {
        let nets = MetricNets::new(4, DType::F32).unwrap();
        let e = evaluate_model(&Echo, &nets, &PairedDataset::default(), "x").unwrap_err();
        assert!(matches!(e, crate::Error::Data(_)));
    }

    #[test]
    fn ssim_of_constant_images_has_closed_form() {
        let (a, b) = (Image::filled(16, [0.2; 3]), Image::filled(16, [0.3; 3]));
        // zero variance: only the luminance term survives
        let c1 = (K1 * RANGE).powi(2);
        let (ma, mb) = (0.2f32 as f64, 0.3f32 as f64);
        let want = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        assert!((structural_similarity(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_negated_zero_mean_image_is_negative() {
        // checkerboard: every local window mean is near zero too
        let mut a = Image::filled(16, [0.0; 3]);
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    a.set(c, y, x, if (x + y) % 2 == 0 { 0.5 } else { -0.5 });
                }
            }
        }
        let mut neg = a.clone();
        neg.data.iter_mut().for_each(|v| *v = -*v);
        assert!(structural_similarity(&a, &neg).unwrap() < -0.9);
    }

    struct Noisy<'a>(Oracle<'a>, f64);
    impl SketchModel for Noisy<'_> {
        fn generate(&self, photo: &Tensor, style_ref: &Tensor) -> Result<Tensor> {
            let clean = self.0.generate(photo, style_ref)?;
            let n = crate::nn::randn(clean.dims(), self.1, clean.dtype(), &mut crate::nn::seeded_rng(12))?;
            Ok((clean + n)?.clamp(-1f32, 1f32)?)
        }
    }

    #[test]
    fn metrics_degrade_with_noise_and_means_are_plain_averages() {
        let d = generate_synthetic_pairs(16, 32, 1, 8).unwrap();
        let nets = MetricNets::new(4, DType::F32).unwrap();
        let reports: Vec<MetricsReport> = [0.0, 0.1, 0.3]
            .iter()
            .map(|&s| evaluate_model(&Noisy(Oracle(&d), s), &nets, &d, "h").unwrap())
            .collect();
        for w in reports.windows(2) {
            assert!(w[1].mean_ssim < w[0].mean_ssim);
            assert!(w[1].mean_perceptual > w[0].mean_perceptual);
        }
        let r = &reports[2];
        let avg = |f: fn(&SampleMetrics) -> f64| r.samples.iter().map(f).sum::<f64>() / r.samples.len() as f64;
        assert!((r.mean_ssim - avg(|m| m.ssim)).abs() < 1e-12);
        assert!((r.mean_perceptual - avg(|m| m.perceptual)).abs() < 1e-12);
        assert!((r.mean_id_loss - avg(|m| m.id_loss)).abs() < 1e-12);
    }
}

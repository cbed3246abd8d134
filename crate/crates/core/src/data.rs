//! Synthetic photo/sketch pairs, paired-directory loading and image
//! preprocessing.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::nn::seeded_rng;

pub const NUM_STYLES: u8 = 3;

/// Square RGB image, channel-major, values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * size * size);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, size * size));
        }
        Self { size, data }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.size + y) * self.size + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.size + y) * self.size + x] = v;
    }

    /// Rec. 601 luma in [-1, 1], row-major.
    pub fn luma(&self) -> Vec<f32> {
        let n = self.size * self.size;
        (0..n)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i])
            .collect()
    }

    /// Grey image from a row-major plane.
    pub fn from_gray(size: usize, plane: &[f32]) -> Self {
        let mut data = Vec::with_capacity(3 * plane.len());
        for _ in 0..3 {
            data.extend_from_slice(plane);
        }
        Self { size, data }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        let s = self.size;
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    out.set(c, y, x, self.get(c, y, s - 1 - x));
                }
            }
        }
        out
    }

    /// `(3, R, R)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (3, self.size, self.size), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Accepts `(3, R, R)` or `(1, 3, R, R)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        if c != 3 || h != w {
            bail!(Shape, "expected a square RGB image, got {:?}", t.dims());
        }
        Ok(Self {
            size: h,
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
        })
    }

    /// Interleaved 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.size * self.size;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                let v = ((self.data[c * n + i].clamp(-1.0, 1.0) + 1.0) * 127.5).round();
                out.push(v as u8);
            }
        }
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let buf = image::RgbImage::from_raw(self.size as u32, self.size as u32, self.to_rgb8()).expect("buffer matches dimensions");
        let mut bytes = Vec::new();
        buf.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)?;
        Ok(bytes)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }
}

/// Tiles equally sized images row by row with a one-pixel white gutter and
/// writes the result as PNG.
pub fn save_grid(rows: &[Vec<&Image>], path: impl AsRef<Path>) -> Result<()> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let Some(size) = rows.iter().flatten().map(|i| i.size).next() else {
        bail!(Data, "grid has no images");
    };
    if rows.iter().flatten().any(|i| i.size != size) {
        bail!(Data, "grid images differ in size");
    }
    let (w, h) = (cols * (size + 1) + 1, rows.len() * (size + 1) + 1);
    let mut buf = image::RgbImage::from_pixel(w as u32, h as u32, image::Rgb([255; 3]));
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let rgb = img.to_rgb8();
            for y in 0..size {
                for x in 0..size {
                    let k = 3 * (y * size + x);
                    let px = image::Rgb([rgb[k], rgb[k + 1], rgb[k + 2]]);
                    buf.put_pixel((c * (size + 1) + 1 + x) as u32, (r * (size + 1) + 1 + y) as u32, px);
                }
            }
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Stacks images into `(N, 3, R, R)`.
pub fn stack_images(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let Some(first) = images.first() else {
        bail!(Data, "no images to stack");
    };
    if images.iter().any(|i| i.size != first.size) {
        bail!(Data, "images differ in size");
    }
    let ts = images.iter().map(|i| i.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Bilinear resize of a channel-major `[0, 255]` buffer with half-pixel
/// centres and edge clamping.
pub fn resize_bilinear(src: &[f32], channels: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let mut out = vec![0.0; channels * out_h * out_w];
    let (sy, sx) = (h as f32 / out_h as f32, w as f32 / out_w as f32);
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            for c in 0..channels {
                let p = |y: usize, x: usize| src[(c * h + y) * w + x];
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                out[(c * out_h + oy) * out_w + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Decodes, centre-crops to a square, resizes to `resolution` and maps to [-1, 1].
pub fn preprocess(bytes: &[u8], resolution: usize) -> Result<Image> {
    if resolution == 0 {
        bail!(Argument, "resolution must be positive");
    }
    let img = image::load_from_memory(bytes).map_err(|e| Error::Data(format!("cannot decode image: {e}")))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let s = w.min(h);
    if s == 0 {
        bail!(Data, "image is empty");
    }
    let (ox, oy) = ((w - s) / 2, (h - s) / 2);
    let mut planar = vec![0.0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let px = rgb.get_pixel((ox + x) as u32, (oy + y) as u32);
            for c in 0..3 {
                planar[(c * s + y) * s + x] = px[c] as f32;
            }
        }
    }
    let resized = if s == resolution {
        planar
    } else {
        resize_bilinear(&planar, 3, s, s, resolution, resolution)
    };
    Ok(Image {
        size: resolution,
        data: resized.into_iter().map(|v| v / 127.5 - 1.0).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub photo: Image,
    pub sketch: Image,
    pub style_id: u8,
    pub sample_id: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairedDataset {
    pub samples: Vec<PairedSample>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolution(&self) -> Option<usize> {
        self.samples.first().map(|s| s.photo.size)
    }

    pub fn photos(&self, dtype: DType) -> Result<Tensor> {
        stack_images(&self.samples.iter().map(|s| &s.photo).collect::<Vec<_>>(), dtype)
    }

    pub fn sketches(&self, dtype: DType) -> Result<Tensor> {
        stack_images(&self.samples.iter().map(|s| &s.sketch).collect::<Vec<_>>(), dtype)
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Self {
        Self {
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }

    pub fn extend(&mut self, other: PairedDataset) {
        self.samples.extend(other.samples);
    }

    /// Writes `photos/`, `sketches/` and `meta.json` under `root`.
    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        std::fs::create_dir_all(root.join("photos"))?;
        std::fs::create_dir_all(root.join("sketches"))?;
        let mut styles = BTreeMap::new();
        for s in &self.samples {
            s.photo.save_png(root.join("photos").join(format!("{}.png", s.sample_id)))?;
            s.sketch.save_png(root.join("sketches").join(format!("{}.png", s.sample_id)))?;
            styles.insert(s.sample_id.clone(), s.style_id);
        }
        let meta = DatasetMeta {
            version: 1,
            resolution: self.resolution().unwrap_or(0),
            styles,
        };
        std::fs::write(root.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    /// Loads a directory written by [`save`](Self::save) (or any root with
    /// `photos/` and `sketches/`; style ids default to 0 without `meta.json`).
    pub fn load(root: impl AsRef<Path>, resolution: usize) -> Result<LoadedPairs> {
        let root = root.as_ref();
        let mut loaded = load_paired_dataset(root.join("photos"), root.join("sketches"), resolution)?;
        let meta_path = root.join("meta.json");
        if meta_path.exists() {
            let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(&meta_path)?)?;
            for s in &mut loaded.dataset.samples {
                s.style_id = meta.styles.get(&s.sample_id).copied().unwrap_or(0);
            }
        }
        Ok(loaded)
    }

    /// Content hash over sample ids, styles and pixel values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.sample_id.as_bytes());
            h.update([s.style_id]);
            for v in s.photo.data.iter().chain(&s.sketch.data) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub resolution: usize,
    /// Sample id → style id.
    pub styles: BTreeMap<String, u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedPairs {
    pub dataset: PairedDataset,
    /// One message per file without a partner.
    pub warnings: Vec<String>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"));
        if let (true, Some(stem)) = (is_image, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Pairs images of two directories by basename, in sorted order.
pub fn load_paired_dataset(photo_dir: impl AsRef<Path>, sketch_dir: impl AsRef<Path>, resolution: usize) -> Result<LoadedPairs> {
    let photos = png_stems(photo_dir.as_ref())?;
    let sketches = png_stems(sketch_dir.as_ref())?;
    let mut dataset = PairedDataset::default();
    let mut warnings = Vec::new();
    for (stem, path) in &photos {
        match sketches.get(stem) {
            Some(sk) => dataset.samples.push(PairedSample {
                photo: preprocess(&std::fs::read(path)?, resolution)?,
                sketch: preprocess(&std::fs::read(sk)?, resolution)?,
                style_id: 0,
                sample_id: stem.clone(),
            }),
            None => warnings.push(format!("photo {stem} has no sketch")),
        }
    }
    for stem in sketches.keys().filter(|s| !photos.contains_key(*s)) {
        warnings.push(format!("sketch {stem} has no photo"));
    }
    if dataset.is_empty() {
        let first = |m: &BTreeMap<String, PathBuf>| m.keys().take(10).cloned().collect::<Vec<_>>().join(", ");
        bail!(
            Data,
            "no matching basenames; photos: [{}]; sketches: [{}]",
            first(&photos),
            first(&sketches)
        );
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(LoadedPairs { dataset, warnings })
}

/// Order of dataset indices for `epoch`, a pure function of `(seed, epoch)`.
pub fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

// ---- procedural faces -------------------------------------------------------

/// Coverage of an ellipse at a pixel, anti-aliased over about one pixel.
fn ellipse_cover(x: f32, y: f32, cx: f32, cy: f32, rx: f32, ry: f32, px: f32) -> f32 {
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    let f = (dx * dx + dy * dy).sqrt() - 1.0;
    (0.5 - f * rx.min(ry) / px).clamp(0.0, 1.0)
}

fn blend(img: &mut Image, x: usize, y: usize, rgb: [f32; 3], alpha: f32) {
    if alpha <= 0.0 {
        return;
    }
    for (c, v) in rgb.into_iter().enumerate() {
        let old = img.get(c, y, x);
        img.set(c, y, x, old * (1.0 - alpha) + v * alpha);
    }
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, base: f32, spread: f32) -> f32 {
    base + rng.random_range(-spread..=spread)
}

fn color<R: Rng + ?Sized>(rng: &mut R, base: [f32; 3], spread: f32) -> [f32; 3] {
    base.map(|v| jitter(rng, v, spread).clamp(-1.0, 1.0))
}

/// Renders one face-like composition.
pub fn render_face<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Image {
    let bg_top = color(rng, [0.5, 0.5, 0.6], 0.4);
    let bg_bottom = color(rng, [0.2, 0.3, 0.3], 0.4);
    let mut img = Image::filled(size, [0.0; 3]);
    for y in 0..size {
        let t = y as f32 / (size - 1).max(1) as f32;
        let rgb = [0, 1, 2].map(|c| bg_top[c] * (1.0 - t) + bg_bottom[c] * t);
        for x in 0..size {
            blend(&mut img, x, y, rgb, 1.0);
        }
    }
    let (cx, cy) = (jitter(rng, 0.5, 0.05), jitter(rng, 0.55, 0.04));
    let (hrx, hry) = (jitter(rng, 0.27, 0.04), jitter(rng, 0.34, 0.04));
    let skin = color(rng, [0.55, 0.15, -0.1], 0.3);
    let hair = color(rng, [-0.6, -0.7, -0.75], 0.3);
    let hair_ry = jitter(rng, 0.3, 0.06);
    let eye_dx = jitter(rng, 0.1, 0.02);
    let eye_y = cy - jitter(rng, 0.06, 0.02);
    let eye_r = jitter(rng, 0.04, 0.01);
    let iris = color(rng, [-0.5, -0.4, -0.3], 0.4);
    let mouth_y = cy + jitter(rng, 0.17, 0.03);
    let (mouth_rx, mouth_ry) = (jitter(rng, 0.09, 0.03), jitter(rng, 0.025, 0.01));
    let lips = color(rng, [0.6, -0.5, -0.4], 0.2);
    let brow_y = eye_y - jitter(rng, 0.06, 0.01);
    let px = 1.0 / size as f32;
    for yi in 0..size {
        let y = (yi as f32 + 0.5) * px;
        for xi in 0..size {
            let x = (xi as f32 + 0.5) * px;
            // hair behind and above the head
            blend(
                &mut img,
                xi,
                yi,
                hair,
                ellipse_cover(x, y, cx, cy - 0.1, hrx + 0.05, hair_ry + 0.1, px),
            );
            blend(&mut img, xi, yi, skin, ellipse_cover(x, y, cx, cy, hrx, hry, px));
            blend(
                &mut img,
                xi,
                yi,
                hair,
                ellipse_cover(x, y, cx, cy - hry + 0.02, hrx * 0.95, 0.09, px),
            );
            for side in [-1.0f32, 1.0] {
                let ex = cx + side * eye_dx;
                blend(
                    &mut img,
                    xi,
                    yi,
                    [0.9, 0.9, 0.9],
                    ellipse_cover(x, y, ex, eye_y, eye_r * 1.5, eye_r, px),
                );
                blend(&mut img, xi, yi, iris, ellipse_cover(x, y, ex, eye_y, eye_r * 0.7, eye_r * 0.7, px));
                blend(
                    &mut img,
                    xi,
                    yi,
                    hair,
                    ellipse_cover(x, y, ex, brow_y, eye_r * 1.8, eye_r * 0.35, px),
                );
            }
            blend(
                &mut img,
                xi,
                yi,
                skin.map(|v| v - 0.25),
                ellipse_cover(x, y, cx, cy + 0.05, 0.025, 0.05, px),
            );
            blend(&mut img, xi, yi, lips, ellipse_cover(x, y, cx, mouth_y, mouth_rx, mouth_ry, px));
        }
    }
    img
}

// ---- sketch styles ------------------------------------------------------------

fn gaussian_blur(plane: &[f32], size: usize, sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = k.iter().sum();
    let at = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = (-r..=r)
                .map(|i| k[(i + r) as usize] * plane[y * size + at(x as isize + i)])
                .sum::<f32>()
                / norm;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = (-r..=r)
                .map(|i| k[(i + r) as usize] * tmp[at(y as isize + i) * size + x])
                .sum::<f32>()
                / norm;
        }
    }
    out
}

/// Sobel gradient magnitude with replicate borders.
fn sobel(plane: &[f32], size: usize) -> Vec<f32> {
    let at = |y: isize, x: isize| plane[y.clamp(0, size as isize - 1) as usize * size + x.clamp(0, size as isize - 1) as usize];
    let mut out = vec![0.0; plane.len()];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1) - at(y - 1, x - 1) - 2.0 * at(y, x - 1) - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1) - at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1);
            out[y as usize * size + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

const INK: f32 = -1.0;
const PAPER: f32 = 1.0;

/// Derives a greyscale sketch of `photo` in one of three styles: 0 thresholded
/// Sobel lines, 1 difference-of-Gaussians lines over light shading, 2 Sobel
/// lines with diagonal hatching in dark regions.
pub fn sketch_from_photo(photo: &Image, style_id: u8) -> Result<Image> {
    let s = photo.size;
    let luma = photo.luma();
    let plane: Vec<f32> = match style_id {
        0 => {
            let g = sobel(&gaussian_blur(&luma, s, 0.7), s);
            g.iter().map(|&m| if m > 0.6 { INK } else { PAPER }).collect()
        }
        1 => {
            let a = gaussian_blur(&luma, s, 0.8);
            let b = gaussian_blur(&luma, s, 1.6);
            a.iter()
                .zip(&b)
                .zip(&luma)
                .map(|((a, b), l)| {
                    let shade = 0.35 + 0.6 * ((l + 1.0) / 2.0);
                    if a - b < -0.04 {
                        INK
                    } else {
                        shade.min(PAPER)
                    }
                })
                .collect()
        }
        2 => {
            let g = sobel(&gaussian_blur(&luma, s, 0.7), s);
            let smooth = gaussian_blur(&luma, s, 1.5);
            let period = (s / 16).max(3);
            (0..s * s)
                .map(|i| {
                    let (y, x) = (i / s, i % s);
                    let hatch = smooth[i] < -0.35 && (x + y) % period == 0;
                    if g[i] > 0.7 || hatch {
                        INK
                    } else {
                        PAPER
                    }
                })
                .collect()
        }
        _ => bail!(Argument, "style id must be below {NUM_STYLES}, got {style_id}"),
    };
    Ok(Image::from_gray(s, &plane))
}

/// Fraction of pixels darker than mid-grey.
pub fn ink_fraction(sketch: &Image) -> f64 {
    let n = sketch.size * sketch.size;
    sketch.data[..n].iter().filter(|&&v| v < 0.0).count() as f64 / n as f64
}

/// `n` procedurally rendered photos with sketches of style `style_id`.
pub fn generate_synthetic_pairs(n: usize, resolution: usize, style_id: u8, seed: u64) -> Result<PairedDataset> {
    if n == 0 {
        bail!(Argument, "need at least one pair");
    }
    if resolution < 8 {
        bail!(Argument, "resolution must be at least 8");
    }
    if style_id >= NUM_STYLES {
        bail!(Argument, "style id must be below {NUM_STYLES}, got {style_id}");
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        // one stream per sample so samples can be rendered independently
        let mut rng = seeded_rng(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let photo = render_face(resolution, &mut rng);
        let sketch = sketch_from_photo(&photo, style_id)?;
        samples.push(PairedSample {
            photo,
            sketch,
            style_id,
            sample_id: format!("s{style_id}_{i:05}"),
        });
    }
    Ok(PairedDataset { samples })
}

/// Photos only, for base pretraining.
pub fn generate_photos(n: usize, resolution: usize, seed: u64) -> Result<Tensor> {
    let mut rng = seeded_rng(seed);
    let imgs: Vec<Image> = (0..n).map(|_| render_face(resolution, &mut rng)).collect();
    stack_images(&imgs.iter().collect::<Vec<_>>(), DType::F32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png_bytes(w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> Vec<u8> {
        let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y)));
        let mut bytes = Vec::new();
        img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png).unwrap();
        bytes
    }

    #[test]
    fn synthetic_pairs_are_deterministic_and_well_formed() {
        let a = generate_synthetic_pairs(4, 32, 1, 9).unwrap();
        let b = generate_synthetic_pairs(4, 32, 1, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.content_hash(), generate_synthetic_pairs(4, 32, 1, 10).unwrap().content_hash());
        for s in &a.samples {
            assert_eq!(s.photo.data.len(), 3 * 32 * 32);
            assert!(s.photo.data.iter().chain(&s.sketch.data).all(|v| (-1.0..=1.0).contains(v)));
            // sketches are greyscale
            let n = 32 * 32;
            assert_eq!(s.sketch.data[..n], s.sketch.data[n..2 * n]);
            assert_eq!(s.style_id, 1);
        }
        assert_eq!(a.samples[3].sample_id, "s1_00003");
        // a prefix of a longer run is the shorter run
        assert_eq!(generate_synthetic_pairs(6, 32, 1, 9).unwrap().take(4), a);
    }

    #[test]
    fn every_style_leaves_a_moderate_amount_of_ink() {
        for style in 0..NUM_STYLES {
            let d = generate_synthetic_pairs(6, 64, style, 2).unwrap();
            for s in &d.samples {
                let f = ink_fraction(&s.sketch);
                assert!((0.02..=0.5).contains(&f), "style {style}: ink {f}");
            }
        }
        assert!(generate_synthetic_pairs(1, 32, NUM_STYLES, 0).is_err());
        assert!(generate_synthetic_pairs(0, 32, 0, 0).is_err());
    }

    #[test]
    fn styles_differ() {
        let p = &generate_synthetic_pairs(1, 64, 0, 4).unwrap().samples[0].photo;
        let s: Vec<Image> = (0..NUM_STYLES).map(|k| sketch_from_photo(p, k).unwrap()).collect();
        assert_ne!(s[0], s[1]);
        assert_ne!(s[0], s[2]);
        assert_ne!(s[1], s[2]);
    }

    #[test]
    fn bilinear_matches_hand_computed_probe() {
        // 4x4 ramp along x, downsampled 2x: sample centres fall at 0.5 and 2.5.
        let src: Vec<f32> = (0..16).map(|i| (i % 4) as f32 * 10.0).collect();
        let out = resize_bilinear(&src, 1, 4, 4, 2, 2);
        assert_eq!(out, vec![5.0, 25.0, 5.0, 25.0]);
        // upsampling 2 -> 4 on a 2x2 checker of 0/100
        let out = resize_bilinear(&[0.0, 100.0, 100.0, 0.0], 1, 2, 2, 4, 4);
        // position -0.25 clamps to 0, 0.25 interpolates a quarter
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 25.0 * 1.0).abs() < 1e-4, "{}", out[1]);
        assert!(
            (out[5] - (0.75 * 0.75 * 0.0 + 0.75 * 0.25 * 100.0 * 2.0 + 0.0)).abs() < 1e-4,
            "{}",
            out[5]
        );
    }

    #[test]
    fn preprocess_maps_extremes_and_crops_center() {
        let white = preprocess(&png_bytes(8, 8, |_, _| [255; 3]), 8).unwrap();
        assert!(white.data.iter().all(|&v| v == 1.0));
        let black = preprocess(&png_bytes(8, 8, |_, _| [0; 3]), 4).unwrap();
        assert!(black.data.iter().all(|&v| v == -1.0));
        // 128x96: the central 96x96 is white, the 16-pixel side bands black.
        let wide = preprocess(
            &png_bytes(128, 96, |x, _| if (16..112).contains(&x) { [255; 3] } else { [0; 3] }),
            32,
        )
        .unwrap();
        assert_eq!(wide.size, 32);
        assert!(wide.data.iter().all(|&v| v == 1.0));
        assert!(matches!(preprocess(b"not an image", 8), Err(Error::Data(_))));
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let img = generate_synthetic_pairs(1, 16, 0, 1).unwrap().samples[0].photo.clone();
        let back = preprocess(&img.to_png().unwrap(), 16).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 127.0 + 1e-6);
        }
    }

    #[test]
    fn loader_pairs_sorted_basenames_and_reports_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let (p, s) = (dir.path().join("p"), dir.path().join("s"));
        std::fs::create_dir_all(&p).unwrap();
        std::fs::create_dir_all(&s).unwrap();
        let px = png_bytes(8, 8, |x, y| [(x * 30) as u8, (y * 30) as u8, 0]);
        for name in ["b", "a", "only_photo"] {
            std::fs::write(p.join(format!("{name}.png")), &px).unwrap();
        }
        for name in ["a", "b", "only_sketch"] {
            std::fs::write(s.join(format!("{name}.png")), &px).unwrap();
        }
        std::fs::write(p.join("notes.txt"), "x").unwrap();
        let loaded = load_paired_dataset(&p, &s, 8).unwrap();
        let ids: Vec<_> = loaded.dataset.samples.iter().map(|s| s.sample_id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(loaded.warnings.len(), 2);

        let empty = dir.path().join("e");
        std::fs::create_dir_all(&empty).unwrap();
        std::fs::write(empty.join("zzz.png"), &px).unwrap();
        assert!(matches!(load_paired_dataset(&p, &empty, 8), Err(Error::Data(_))));
        assert!(matches!(
            load_paired_dataset(dir.path().join("nope"), &s, 8),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn save_load_round_trip_keeps_styles() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = generate_synthetic_pairs(2, 16, 0, 1).unwrap();
        d.extend(generate_synthetic_pairs(2, 16, 2, 1).unwrap());
        d.save(dir.path()).unwrap();
        let back = PairedDataset::load(dir.path(), 16).unwrap().dataset;
        assert_eq!(back.len(), 4);
        for (a, b) in d.samples.iter().zip(&back.samples) {
            assert_eq!((a.sample_id.as_str(), a.style_id), (b.sample_id.as_str(), b.style_id));
            assert!(a
                .sketch
                .data
                .iter()
                .zip(&b.sketch.data)
                .all(|(x, y)| (x - y).abs() <= 1.0 / 127.0 + 1e-6));
        }
    }

    #[test]
    fn shuffles_are_pure_permutations() {
        let a = shuffled_indices(50, 3, 1);
        assert_eq!(a, shuffled_indices(50, 3, 1));
        assert_ne!(a, shuffled_indices(50, 3, 2));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn flip_is_an_involution() {
        let img = generate_synthetic_pairs(1, 16, 0, 1).unwrap().samples[0].photo.clone();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        let t = img.to_tensor(DType::F32).unwrap();
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }
}

//! WebAssembly bindings for a static demo page. Each export returns plain
//! buffers the page paints onto canvases.

use candle_core::{DType, Device, Tensor};
use pssg::adaptation::{adaptive_normalize, attention_map, normalize_latent_tensor};
use pssg::data::{generate_synthetic_pairs, Image};
use pssg::nn::{randn, seeded_rng};
use wasm_bindgen::prelude::*;

/// Latent segments shown in the attention heat map (the 64×64 layout).
pub const DEMO_SEGMENTS: usize = 10;
const DEMO_DIM: usize = 16;
const DEMO_ATTN: usize = 4;

fn rgba(img: &Image) -> Vec<u8> {
    img.to_rgb8().chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Photo and sketch side by side as RGBA, `2·size` wide.
pub fn pair_pixels(seed: u64, style: u8, size: usize) -> Result<Vec<u8>, String> {
    let d = generate_synthetic_pairs(1, size, style, seed).map_err(|e| e.to_string())?;
    let (p, s) = (rgba(&d.samples[0].photo), rgba(&d.samples[0].sketch));
    let mut out = Vec::with_capacity(p.len() * 2);
    for (a, b) in p.chunks_exact(4 * size).zip(s.chunks_exact(4 * size)) {
        out.extend_from_slice(a);
        out.extend_from_slice(b);
    }
    Ok(out)
}

/// Row-major `L × L` attention between a random content code and a style
/// code that is `mix` of the way from an independent code to the content code.
pub fn attention_values(seed: u64, mix: f32) -> Result<Vec<f32>, String> {
    let run = || -> pssg::Result<Vec<f32>> {
        let mut rng = seeded_rng(seed);
        let shape = [1, DEMO_SEGMENTS, DEMO_DIM];
        let w_c = randn(&shape, 1.0, DType::F32, &mut rng)?;
        let other = randn(&shape, 1.0, DType::F32, &mut rng)?;
        let w_s = ((&w_c * mix as f64)? + (other * (1.0 - mix as f64))?)?;
        let proj = randn(&[DEMO_DIM, DEMO_ATTN], 1.0, DType::F32, &mut rng)?.unsqueeze(0)?;
        let q = normalize_latent_tensor(&w_c)?.matmul(&proj)?;
        let k = normalize_latent_tensor(&w_s)?.matmul(&proj)?;
        Ok(attention_map(&q, &k)?.flatten_all()?.to_vec1()?)
    };
    run().map_err(|e| e.to_string())
}

/// A synthetic photo next to its adaptively normalised version, each
/// channel standardised then scaled by `scale` and shifted by `shift`.
pub fn normalized_pixels(seed: u64, size: usize, scale: f32, shift: f32) -> Result<Vec<u8>, String> {
    let run = || -> pssg::Result<Vec<u8>> {
        let photo = generate_synthetic_pairs(1, size, 0, seed)?.samples[0].photo.clone();
        let f = photo.to_tensor(DType::F32)?.unsqueeze(0)?;
        let y_s = Tensor::full(scale, (1, 3), &Device::Cpu)?;
        let y_b = Tensor::full(shift, (1, 3), &Device::Cpu)?;
        let out = Image::from_tensor(&adaptive_normalize(&f, &y_s, Some(&y_b))?)?;
        let (a, b) = (rgba(&photo), rgba(&out));
        let mut px = Vec::with_capacity(a.len() * 2);
        for (l, r) in a.chunks_exact(4 * size).zip(b.chunks_exact(4 * size)) {
            px.extend_from_slice(l);
            px.extend_from_slice(r);
        }
        Ok(px)
    };
    run().map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn render_pair(seed: u32, style: u8, size: usize) -> Result<Vec<u8>, JsError> {
    pair_pixels(seed as u64, style, size).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = attentionMap)]
pub fn attention_map_js(seed: u32, mix: f32) -> Result<Vec<f32>, JsError> {
    attention_values(seed as u64, mix).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = adaptiveNormalize)]
pub fn adaptive_normalize_js(seed: u32, size: usize, scale: f32, shift: f32) -> Result<Vec<u8>, JsError> {
    normalized_pixels(seed as u64, size, scale, shift).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = segmentCount)]
pub fn segment_count() -> usize {
    DEMO_SEGMENTS
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_buffer_has_two_tiles() {
        let px = pair_pixels(3, 2, 32).unwrap();
        assert_eq!(px.len(), 2 * 32 * 32 * 4);
        assert!(px.chunks_exact(4).all(|p| p[3] == 255));
        assert!(pair_pixels(3, 7, 32).is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let a = attention_values(1, 0.3).unwrap();
        assert_eq!(a.len(), DEMO_SEGMENTS * DEMO_SEGMENTS);
        for row in a.chunks_exact(DEMO_SEGMENTS) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn normalisation_hits_requested_statistics() {
        let size = 32;
        let px = normalized_pixels(2, size, 0.25, -0.5).unwrap();
        // right half, red channel, back to [-1, 1]
        let vals: Vec<f64> = px
            .chunks_exact(4 * size)
            .enumerate()
            .filter(|(i, _)| i % 2 == 1)
            .flat_map(|(_, row)| row.chunks_exact(4).map(|p| p[0] as f64 / 127.5 - 1.0).collect::<Vec<_>>())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean + 0.5).abs() < 0.02, "{mean}");
    }
}

//! Extended latent spaces (Z+ / W+), the mapping network and latent editing.

use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{bail, Error, Result};
use crate::nn::{leaky_relu, seeded_rng, Linear, ParamStore};

pub const LATENT_MAGIC: &[u8; 4] = b"PSSL";
pub const LATENT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LatentSpace {
    ZPlus,
    WPlus,
}

impl LatentSpace {
    fn tag(self) -> u8 {
        match self {
            LatentSpace::ZPlus => 0,
            LatentSpace::WPlus => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(LatentSpace::ZPlus),
            1 => Ok(LatentSpace::WPlus),
            t => bail!(Data, "unknown latent space tag {t}"),
        }
    }
}

/// A stack of `num_layers` latent vectors of length `dim`, one per style input.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    space: LatentSpace,
    num_layers: usize,
    dim: usize,
    data: Vec<f32>,
}

impl LatentCode {
    pub fn new(space: LatentSpace, segments: Vec<Vec<f32>>) -> Result<Self> {
        let num_layers = segments.len();
        let dim = segments.first().map_or(0, Vec::len);
        if segments.iter().any(|s| s.len() != dim) {
            bail!(Shape, "latent segments have unequal lengths");
        }
        Self::from_flat(space, num_layers, dim, segments.concat())
    }

    pub fn from_flat(space: LatentSpace, num_layers: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if num_layers == 0 || dim == 0 {
            bail!(Argument, "latent code needs L >= 1 and d >= 1 (got L={num_layers}, d={dim})");
        }
        if data.len() != num_layers * dim {
            bail!(Shape, "expected {} latent values, got {}", num_layers * dim, data.len());
        }
        if data.iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "latent code contains non-finite values");
        }
        Ok(Self {
            space,
            num_layers,
            dim,
            data,
        })
    }

    pub fn space(&self) -> LatentSpace {
        self.space
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn segment(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn segments(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    /// `(1, L, d)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, self.num_layers, self.dim), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Accepts `(L, d)` or `(1, L, d)`.
    pub fn from_tensor(space: LatentSpace, t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            2 => t.clone(),
            3 if t.dim(0)? == 1 => t.squeeze(0)?,
            _ => bail!(Shape, "expected (L, d) or (1, L, d) latent tensor, got {:?}", t.dims()),
        };
        let (l, d) = t.dims2()?;
        let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        Self::from_flat(space, l, d, data)
    }

    /// Stacks codes of one space into a `(B, L, d)` batch.
    pub fn stack(codes: &[LatentCode], dtype: DType) -> Result<Tensor> {
        let Some(first) = codes.first() else {
            bail!(Argument, "cannot stack an empty list of latent codes");
        };
        for c in codes {
            if (c.num_layers, c.dim, c.space) != (first.num_layers, first.dim, first.space) {
                bail!(Shape, "latent codes to stack disagree in shape or space");
            }
        }
        let data: Vec<f32> = codes.iter().flat_map(|c| c.data.iter().copied()).collect();
        Ok(Tensor::from_vec(data, (codes.len(), first.num_layers, first.dim), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn unstack(space: LatentSpace, batch: &Tensor) -> Result<Vec<LatentCode>> {
        let (b, _, _) = batch.dims3()?;
        (0..b).map(|i| Self::from_tensor(space, &batch.get(i)?)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + 4 * self.data.len());
        out.extend_from_slice(LATENT_MAGIC);
        out.extend_from_slice(&LATENT_VERSION.to_le_bytes());
        out.push(self.space.tag());
        out.extend_from_slice(&(self.num_layers as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 17 || &bytes[..4] != LATENT_MAGIC {
            bail!(Data, "not a latent code record (bad magic)");
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != LATENT_VERSION {
            bail!(Data, "unsupported latent record version {version}");
        }
        let space = LatentSpace::from_tag(bytes[8])?;
        let l = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
        let payload = &bytes[17..];
        if payload.len() != 4 * l * d {
            bail!(Data, "latent record payload holds {} bytes, expected {}", payload.len(), 4 * l * d);
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_flat(space, l, d, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Draws a Z+ code with every entry i.i.d. standard normal.
pub fn sample_z_plus(seed: u64, num_layers: usize, dim: usize) -> Result<LatentCode> {
    if num_layers == 0 || dim == 0 {
        bail!(Argument, "sample_z_plus needs L >= 1 and d >= 1 (got L={num_layers}, d={dim})");
    }
    let mut rng = seeded_rng(seed);
    let data = (0..num_layers * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    LatentCode::from_flat(LatentSpace::ZPlus, num_layers, dim, data)
}

/// Batched Z+ sampling as a `(B, L, d)` tensor from a caller-owned RNG.
pub fn sample_z_plus_batch<R: Rng + ?Sized>(rng: &mut R, batch: usize, num_layers: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    crate::nn::randn(&[batch, num_layers, dim], 1.0, dtype, rng)
}

/// Adds `magnitude · direction` to every segment in `layers` (inclusive).
pub fn apply_latent_edit(w: &LatentCode, direction: &[f32], magnitude: f32, layers: RangeInclusive<usize>) -> Result<LatentCode> {
    if direction.len() != w.dim {
        bail!(Argument, "edit direction has length {}, latent dim is {}", direction.len(), w.dim);
    }
    let (start, end) = (*layers.start(), *layers.end());
    if start > end || end >= w.num_layers {
        bail!(Argument, "layer range {start}..={end} is outside 0..{}", w.num_layers);
    }
    let mut out = w.clone();
    for i in start..=end {
        for (v, dv) in out.data[i * w.dim..(i + 1) * w.dim].iter_mut().zip(direction) {
            *v += magnitude * dv;
        }
    }
    if out.data.iter().any(|v| !v.is_finite()) {
        bail!(Numeric, "latent edit produced non-finite values");
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MappingConfig {
    pub dim: usize,
    pub depth: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self { dim: 512, depth: 4 }
    }
}

/// MLP applied independently to every segment of a Z+ code.
///
/// Each layer is `leaky_relu(x Wᵀ + b, 0.2)`; depth 0 is the identity map.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    config: MappingConfig,
    store: ParamStore,
    layers: Vec<Linear>,
    frozen: bool,
}

impl MappingNetwork {
    pub fn new<R: Rng + ?Sized>(config: MappingConfig, dtype: DType, rng: &mut R) -> Result<Self> {
        if config.dim == 0 {
            bail!(Argument, "mapping dim must be positive");
        }
        let mut store = ParamStore::new(dtype);
        let layers = (0..config.depth)
            .map(|k| {
                Linear::new(
                    &mut store,
                    &format!("mapping.{k}"),
                    config.dim,
                    config.dim,
                    2f64.sqrt(),
                    Some(0.0),
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            store,
            layers,
            frozen: false,
        })
    }

    pub fn config(&self) -> MappingConfig {
        self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
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

    /// `(B, L, d) → (B, L, d)`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        if z.dim(candle_core::D::Minus1)? != self.config.dim {
            bail!(Shape, "mapping expects dim {}, got {:?}", self.config.dim, z.dims());
        }
        let mut x = z.clone();
        for layer in &self.layers {
            x = leaky_relu(&layer.forward(&x, self.frozen)?, 0.2)?;
        }
        Ok(x)
    }

    pub fn map_to_w_plus(&self, z: &LatentCode) -> Result<LatentCode> {
        if z.space() != LatentSpace::ZPlus {
            bail!(Usage, "map_to_w_plus expects a Z+ code");
        }
        if z.dim() != self.config.dim {
            bail!(Shape, "latent dim {} does not match mapper dim {}", z.dim(), self.config.dim);
        }
        let w = self.forward(&z.to_tensor(self.store.dtype())?)?;
        LatentCode::from_tensor(LatentSpace::WPlus, &w)
    }

    /// Deep copy with independent parameters.
    pub fn deep_clone(&self) -> Result<Self> {
        let store = self.store.deep_clone()?;
        let layers = (0..self.config.depth)
            .map(|k| {
                let get = |s: &str| store.get(&format!("mapping.{k}.{s}")).cloned();
                Ok(Linear {
                    weight: get("weight").ok_or_else(|| Error::Data("missing mapping weight".into()))?,
                    bias: get("bias"),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: self.config,
            store,
            layers,
            frozen: self.frozen,
        })
    }
}

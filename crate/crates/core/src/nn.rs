//! Parameter storage and the handful of layer primitives shared by every
//! network in the crate.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{bail, Result};

pub type Rng64 = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng64 {
    use rand::SeedableRng;
    Rng64::seed_from_u64(seed)
}

/// Draws a tensor of i.i.d. `N(0, std²)` values from a caller-owned RNG.
///
/// All randomness goes through this function (never `Tensor::randn`) so that
/// every run is reproducible from its seed.
pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, dtype: DType, rng: &mut R) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Returns the parameter as a tensor, cut from the autograd graph when the
/// owning network is frozen.
#[inline]
pub fn param(v: &Var, frozen: bool) -> Tensor {
    if frozen {
        v.as_detached_tensor()
    } else {
        v.as_tensor().clone()
    }
}

/// Ordered, named collection of trainable variables.
///
/// Cloning a store shares the underlying variables; use [`ParamStore::deep_clone`]
/// for an independent copy.
#[derive(Clone, Debug)]
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            bail!(Argument, "duplicate parameter name {name}");
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    pub fn normal<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> Result<Var> {
        let t = randn(shape, std, self.dtype, rng)?;
        self.insert(name, t)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, self.dtype, &Device::Cpu)? * value)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and little-endian f32 values, hex encoded.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            for &d in var.dims() {
                hasher.update((d as u64).to_le_bytes());
            }
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Copies the current values of every variable.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            match snapshot.get(name) {
                Some(t) => var.set(t)?,
                None => bail!(Argument, "snapshot lacks parameter {name}"),
            }
        }
        Ok(())
    }

    /// Independent copy with freshly allocated variables.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype);
        for (name, var) in &self.vars {
            out.insert(name.clone(), var.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    /// Overwrites the value of a named variable.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let Some(var) = self.vars.get(name) else {
            bail!(Argument, "unknown parameter {name}");
        };
        if var.dims() != value.dims() {
            bail!(Shape, "parameter {name}: expected {:?}, got {:?}", var.dims(), value.dims());
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// Dense layer `y = x Wᵀ + b` over the last dimension.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    /// He-style normal init scaled by `gain / sqrt(fan_in)`, bias filled with `bias_init`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        bias_init: Option<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        let std = gain / (fan_in as f64).sqrt();
        let weight = store.normal(format!("{name}.weight"), &[fan_out, fan_in], std, rng)?;
        let bias = match bias_init {
            Some(b) => Some(store.constant(format!("{name}.bias"), &[fan_out], b)?),
            None => None,
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor, frozen: bool) -> Result<Tensor> {
        let w = param(&self.weight, frozen);
        let y = x.broadcast_matmul(&w.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&param(b, frozen))?,
            None => y,
        })
    }
}

/// Plain 2-D convolution over NCHW inputs.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let std = gain / (fan_in as f64).sqrt();
        let weight = store.normal(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], std, rng)?;
        let bias = Some(store.constant(format!("{name}.bias"), &[c_out], 0.0)?);
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor, frozen: bool) -> Result<Tensor> {
        let y = x.conv2d(&param(&self.weight, frozen), self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&param(b, frozen).reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

/// `max(x, slope·x)` for `0 < slope < 1`.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// Softmax over the last dimension with max subtraction.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// `sqrt(s + δ) − sqrt(δ)`: exactly zero at `s = 0` while keeping a finite
/// derivative there.
pub fn safe_sqrt(s: &Tensor) -> Result<Tensor> {
    const DELTA: f64 = 1e-12;
    Ok(((s + DELTA)?.sqrt()? - DELTA.sqrt())?)
}

/// Adam with per-parameter first/second moment estimates.
///
/// `beta1 = 0` is allowed (the StyleGAN2 setting) and then the update is a
/// pure RMS-normalised gradient step.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let n = vars.len();
        Self {
            vars,
            m: vec![None; n],
            v: vec![None; n],
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, var) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = match &self.m[i] {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match &self.v[i] {
                Some(v) => ((v * self.beta2)? + (g2 * (1.0 - self.beta2))?)?,
                None => (g2 * (1.0 - self.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let next = (var.as_tensor().detach() - (update * self.lr)?)?;
            var.set(&next)?;
            self.m[i] = Some(m);
            self.v[i] = Some(v);
        }
        Ok(())
    }
}

/// Scalar value of a 0-d (or single element) tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

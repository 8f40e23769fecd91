//! Minimal differentiable building blocks on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names and are created
//! from a seeded generator, so two models built with the same seed are
//! bit-identical.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-b, b]`.
    Uniform(f64),
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
            dtype,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn sample(&mut self, n: usize, init: Init) -> Vec<f64> {
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
            Init::Uniform(b) => {
                let d = Uniform::new_inclusive(-b, b).expect("finite bound");
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
        }
    }

    /// Creates a parameter from explicit values.
    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = self.sample(n, init);
        self.insert(name, shape, values)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Current values, detached.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(Error::CheckpointMismatch(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = ps.param(&format!("{name}.weight"), &[out_dim, in_dim], Init::Uniform(bound))?;
        let bias = if bias {
            Some(ps.param(&format!("{name}.bias"), &[out_dim], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        bias: bool,
    ) -> Result<Self> {
        let weight = ps.param(&format!("{name}.weight"), &[out_dim, in_dim], weight_init)?;
        let bias = if bias {
            Some(ps.param(&format!("{name}.bias"), &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.contiguous()?.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = ps.param(&format!("{name}.weight"), &[out_c, in_c, kernel, kernel], Init::Normal(std))?;
        let bias = ps.param(&format!("{name}.bias"), &[out_c], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// 1x1 convolution with weight and bias exactly zero.
    pub fn zero(ps: &mut ParamStore, name: &str, in_c: usize, out_c: usize) -> Result<Self> {
        let weight = ps.param(&format!("{name}.weight"), &[out_c, in_c, 1, 1], Init::Zeros)?;
        let bias = ps.param(&format!("{name}.bias"), &[out_c], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: 0,
        })
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (k_out, _, kh, kw) = self.weight.dims4()?;
        let y = if kh == 1 && kw == 1 && self.stride == 1 {
            // 1x1 conv as a channel matmul
            let x_nhwc = x.permute((0, 2, 3, 1))?.contiguous()?;
            let w = self.weight.reshape((k_out, ()))?;
            x_nhwc.broadcast_matmul(&w.t()?)?.permute((0, 3, 1, 2))?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        y.broadcast_add(&self.bias.reshape((1, k_out, 1, 1))?)
    }
}

/// Layer normalisation over the last dimension, built from differentiable
/// primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[dim], Init::Ones)?,
            bias: ps.param(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    /// Normalises the channel axis of an NCHW tensor.
    pub fn forward_nchw(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.forward(&x.permute((0, 2, 3, 1))?)?.permute((0, 3, 1, 2))
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::with_init(ps, &format!("{name}.fc1"), dim, hidden, Init::Normal(0.02), true)?,
            fc2: Linear::with_init(ps, &format!("{name}.fc2"), hidden, dim, Init::Normal(0.02), true)?,
        })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Row-stochastic bilinear interpolation matrix (half-pixel centres,
/// edge-clamped) mapping `src` samples to `dst` samples.
fn interp_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let x = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let x0 = (x.floor() as usize).min(src - 1);
        let x1 = (x0 + 1).min(src - 1);
        let t = x - x0 as f64;
        m[i * src + x0] += 1.0 - t;
        m[i * src + x1] += t;
    }
    m
}

/// Differentiable bilinear resize of an NCHW tensor.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let mw = Tensor::from_vec(interp_matrix(w, width), (width, w), dev)?.to_dtype(dtype)?;
    let mh = Tensor::from_vec(interp_matrix(h, height), (height, h), dev)?.to_dtype(dtype)?;
    let y = x.contiguous()?.broadcast_matmul(&mw.t()?)?; // (n, c, h, width)
    mh.broadcast_matmul(&y.contiguous()?) // (n, c, height, width)
}

/// Softmax over the last axis. The subtracted maximum is detached, which
/// leaves both value and gradient unchanged.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    shifted.broadcast_sub(&shifted.exp()?.sum_keepdim(D::Minus1)?.log()?)
}

/// `log(sigmoid(x))` computed without overflow.
pub fn log_sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    // -softplus(-x) = min(x, 0) - log(1 + exp(-|x|))
    let neg_abs = x.abs()?.neg()?;
    let min0 = x.minimum(&x.zeros_like()?)?;
    min0 - (neg_abs.exp()? + 1.0)?.log()?
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_rows_sum_to_one() {
        for (s, d) in [(2, 8), (8, 2), (5, 7), (4, 4)] {
            let m = interp_matrix(s, d);
            for i in 0..d {
                let row: f64 = m[i * s..(i + 1) * s].iter().sum();
                assert!((row - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn halving_resize_is_pair_average() {
        let x = Tensor::from_vec((0..16).map(|v| v as f32).collect::<Vec<_>>(), (1, 1, 4, 4), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 2, 2).unwrap();
        let pooled = x.avg_pool2d(2).unwrap();
        let diff: f32 = (y - pooled).unwrap().abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!(diff < 1e-5);
    }

    #[test]
    fn same_seed_same_parameters() {
        let mut a = ParamStore::new(7, DType::F32);
        let mut b = ParamStore::new(7, DType::F32);
        let ta = a.param("w", &[3, 4], Init::Normal(1.0)).unwrap();
        let tb = b.param("w", &[3, 4], Init::Normal(1.0)).unwrap();
        let va: Vec<f32> = ta.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = tb.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let x = Tensor::new(&[-100f64, -1.0, 0.0, 1.0, 100.0], &Device::Cpu).unwrap();
        let y: Vec<f64> = log_sigmoid(&x).unwrap().to_vec1().unwrap();
        let expected = [-100.0, -(1.0 + 1f64.exp()).ln(), -(2f64.ln()), -(1.0 + (-1f64).exp()).ln(), 0.0];
        for (a, b) in y.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

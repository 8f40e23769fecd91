//! Patch feature extractors producing position-constrained feature grids.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posfar::PcfGrid;

/// Anything that maps a normalised `H x W x 3` image to a feature grid.
pub trait FeatureExtractor: Send + Sync {
    /// Identifies the extractor weights and geometry; stored in banks.
    fn fingerprint(&self) -> String;
    /// Pixels per feature cell.
    fn stride(&self) -> usize;
    /// Feature dimension d_f.
    fn dim(&self) -> usize;
    /// Expected square input side.
    fn resolution(&self) -> usize;
    fn extract(&self, image: &Array3<f32>) -> Result<PcfGrid>;

    fn grid(&self) -> (usize, usize) {
        let g = self.resolution() / self.stride();
        (g, g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvExtractorConfig {
    pub resolution: usize,
    /// Power of two, at least 2.
    pub stride: usize,
    /// Channels of the mid-level (stride / 2) map.
    pub mid_channels: usize,
    /// Channels of the deep (stride) map.
    pub deep_channels: usize,
    pub seed: u64,
}

impl Default for ConvExtractorConfig {
    fn default() -> Self {
        Self {
            resolution: 1024,
            stride: 8,
            mid_channels: 256,
            deep_channels: 256,
            seed: 0,
        }
    }
}

impl ConvExtractorConfig {
    pub fn tiny() -> Self {
        Self {
            resolution: 64,
            stride: 4,
            mid_channels: 32,
            deep_channels: 32,
            seed: 0,
        }
    }
}

/// Two-stage convolutional extractor with fixed seeded weights.
///
/// The mid-level map (stride / 2) is aligned to the deep map's grid by 2x2
/// averaging (bilinear resampling at half-pixel centres), concatenated with
/// it and smoothed with a 3x3 local average.
pub struct ConvExtractor {
    config: ConvExtractorConfig,
    conv_mid: (Tensor, Tensor),
    conv_deep: (Tensor, Tensor),
    device: Device,
}

fn kaiming(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize, device: &Device) -> Result<(Tensor, Tensor)> {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let w: Vec<f32> = (0..out_c * in_c * k * k).map(|_| normal.sample(rng) as f32).collect();
    let b: Vec<f32> = (0..out_c).map(|_| normal.sample(rng) as f32 * 0.1).collect();
    Ok((
        Tensor::from_vec(w, (out_c, in_c, k, k), device)?,
        Tensor::from_vec(b, (1, out_c, 1, 1), device)?,
    ))
}

impl ConvExtractor {
    pub fn new(config: ConvExtractorConfig) -> Result<Self> {
        if config.stride < 2 || !config.stride.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "extractor stride must be a power of two >= 2, got {}",
                config.stride
            )));
        }
        if config.resolution % config.stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "resolution {} not divisible by stride {}",
                config.resolution, config.stride
            )));
        }
        let device = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let conv_mid = kaiming(&mut rng, config.mid_channels, 3, 3, &device)?;
        let conv_deep = kaiming(&mut rng, config.deep_channels, config.mid_channels, 3, &device)?;
        Ok(Self {
            config,
            conv_mid,
            conv_deep,
            device,
        })
    }

    pub fn config(&self) -> &ConvExtractorConfig {
        &self.config
    }
}

fn local_average3(x: &Array3<f32>) -> Array3<f32> {
    let (h, w, d) = x.dim();
    let mut out = Array3::<f32>::zeros((h, w, d));
    for r in 0..h {
        for c in 0..w {
            let mut n = 0.0f32;
            for y in r.saturating_sub(1)..(r + 2).min(h) {
                for xx in c.saturating_sub(1)..(c + 2).min(w) {
                    n += 1.0;
                    for k in 0..d {
                        out[[r, c, k]] += x[[y, xx, k]];
                    }
                }
            }
            for k in 0..d {
                out[[r, c, k]] /= n;
            }
        }
    }
    out
}

impl FeatureExtractor for ConvExtractor {
    fn fingerprint(&self) -> String {
        let c = &self.config;
        format!(
            "convx-v1:res{}:stride{}:c{}+{}:seed{}",
            c.resolution, c.stride, c.mid_channels, c.deep_channels, c.seed
        )
    }

    fn stride(&self) -> usize {
        self.config.stride
    }

    fn dim(&self) -> usize {
        self.config.mid_channels + self.config.deep_channels
    }

    fn resolution(&self) -> usize {
        self.config.resolution
    }

    fn extract(&self, image: &Array3<f32>) -> Result<PcfGrid> {
        let (h, w, ch) = image.dim();
        let res = self.config.resolution;
        if (h, w) != (res, res) || ch != 3 {
            return Err(Error::ResolutionMismatch {
                expected: (res, res),
                actual: (h, w),
            });
        }
        let data: Vec<f32> = image.iter().copied().collect();
        let x = Tensor::from_vec(data, (1, h, w, 3), &self.device)?.permute((0, 3, 1, 2))?.contiguous()?;
        let half = self.config.stride / 2;
        let x = if half > 1 { x.avg_pool2d(half)? } else { x };
        let mid = x.conv2d(&self.conv_mid.0, 1, 1, 1, 1)?.broadcast_add(&self.conv_mid.1)?.relu()?;
        let mid_pooled = mid.avg_pool2d(2)?;
        let deep = mid_pooled
            .conv2d(&self.conv_deep.0, 1, 1, 1, 1)?
            .broadcast_add(&self.conv_deep.1)?
            .relu()?;
        let feats = Tensor::cat(&[&mid_pooled, &deep], 1)?; // (1, d, gh, gw)
        let (_, d, gh, gw) = feats.dims4()?;
        let flat: Vec<f32> = feats.squeeze(0)?.permute((1, 2, 0))?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let grid = Array3::from_shape_vec((gh, gw, d), flat).map_err(|e| Error::Format(e.to_string()))?;
        let smoothed = local_average3(&grid);
        let vectors = Array2::from_shape_vec((gh * gw, d), smoothed.into_iter().collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        PcfGrid::new(vectors, (gh, gw), (h, w))
    }
}

//! The click-conditioned segmentation network.
//!
//! An image branch (ViT over image, click maps and previous mask) and a
//! residual branch (Swin blocks over PosFAR residuals, optionally fused with
//! language) are projected to a multi-scale pyramid. Residual features enter
//! the image pyramid through zero-initialised 1x1 convolutions, so at step 0
//! the decoder sees the image branch alone. In segmentation mode the roles
//! are swapped and only the two finest scales are kept.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clicks::{AnomalyMask, ClickEncoding, DEFAULT_CLICK_RADIUS, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::language::{prompt_contrastive_loss, CrossAttention, LinguisticEncoder};
use crate::nn::{log_sigmoid, resize_bilinear, softmax_last, Conv2d, Init, LayerNorm, Linear, Mlp, ParamStore};
use crate::posfar::{PosFarTensor, DEFAULT_THETA, DEFAULT_WINDOW_RADIUS};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_LAMBDA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub resolution: usize,
    pub d_f: usize,
    /// Linguistic feature width.
    pub z: usize,
    /// Width of the frozen text embeddings.
    pub text_dim: usize,
    /// Width of the incoming PosFAR vectors.
    pub posfar_dim: usize,
    /// Pixels per PosFAR grid cell.
    pub pcf_stride: usize,
    pub swin_blocks: usize,
    pub swin_heads: usize,
    pub swin_window: usize,
    pub image_backbone: String,
    pub image_dim: usize,
    pub image_depth: usize,
    pub image_heads: usize,
    pub patch_size: usize,
    pub neck_dim: usize,
    /// Pyramid scales as downsampling factors, coarsest first.
    pub scales: Vec<usize>,
    pub use_language: bool,
    pub seg_mode: bool,
    pub theta: f32,
    pub window_radius: usize,
    pub click_radius: usize,
    pub threshold: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 1024,
            d_f: 512,
            z: 512,
            text_dim: 768,
            posfar_dim: 512,
            pcf_stride: 8,
            swin_blocks: 2,
            swin_heads: 32,
            swin_window: 8,
            image_backbone: "vit-b16".into(),
            image_dim: 768,
            image_depth: 12,
            image_heads: 12,
            patch_size: 16,
            neck_dim: 256,
            scales: vec![32, 16, 8, 4],
            use_language: true,
            seg_mode: false,
            theta: DEFAULT_THETA,
            window_radius: DEFAULT_WINDOW_RADIUS,
            click_radius: DEFAULT_CLICK_RADIUS,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: 64x64 inputs, 64-dim features.
    pub fn tiny() -> Self {
        Self {
            resolution: 64,
            d_f: 64,
            z: 64,
            text_dim: 128,
            posfar_dim: 64,
            pcf_stride: 4,
            swin_blocks: 2,
            swin_heads: 4,
            swin_window: 8,
            image_backbone: "vit-tiny".into(),
            image_dim: 64,
            image_depth: 2,
            image_heads: 4,
            patch_size: 8,
            neck_dim: 32,
            click_radius: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let dims = [
            ("resolution", self.resolution),
            ("d_f", self.d_f),
            ("z", self.z),
            ("text_dim", self.text_dim),
            ("posfar_dim", self.posfar_dim),
            ("pcf_stride", self.pcf_stride),
            ("swin_heads", self.swin_heads),
            ("swin_window", self.swin_window),
            ("image_dim", self.image_dim),
            ("image_heads", self.image_heads),
            ("patch_size", self.patch_size),
            ("neck_dim", self.neck_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.swin_blocks == 0 {
            return bad("swin_blocks must be at least 1".into());
        }
        if self.scales.is_empty() || self.scales.windows(2).any(|w| w[0] <= w[1]) {
            return bad(format!("scales must be strictly finer from coarse to fine, got {:?}", self.scales));
        }
        if self.seg_mode && self.scales.len() < 2 {
            return bad("segmentation mode needs at least two scales".into());
        }
        for &s in &self.scales {
            if s == 0 || self.resolution % s != 0 {
                return bad(format!("scale 1/{s} does not divide resolution {}", self.resolution));
            }
        }
        if self.resolution % self.patch_size != 0 || self.resolution % self.pcf_stride != 0 {
            return bad("resolution must be divisible by patch_size and pcf_stride".into());
        }
        if self.d_f % self.swin_heads != 0 || self.image_dim % self.image_heads != 0 {
            return bad("feature widths must be divisible by their head counts".into());
        }
        let grid = self.residual_grid();
        let ws = self.swin_window.min(grid);
        if grid % ws != 0 {
            return bad(format!("residual grid {grid} not divisible by window {ws}"));
        }
        if !(self.theta > 0.0) || !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("theta must be positive and threshold inside (0, 1)".into());
        }
        Ok(())
    }

    pub fn residual_grid(&self) -> usize {
        self.resolution / self.pcf_stride
    }

    pub fn image_grid(&self) -> usize {
        self.resolution / self.patch_size
    }

    /// Scales that feed the decoder: all of them, or the two finest in
    /// segmentation mode.
    pub fn active_scales(&self) -> Vec<usize> {
        if self.seg_mode {
            self.scales[self.scales.len() - 2..].to_vec()
        } else {
            self.scales.clone()
        }
    }

    /// Fields that determine parameter shapes; checkpoints must agree on them.
    fn structural(&self) -> serde_json::Value {
        serde_json::json!({
            "resolution": self.resolution,
            "d_f": self.d_f,
            "z": self.z,
            "text_dim": self.text_dim,
            "posfar_dim": self.posfar_dim,
            "pcf_stride": self.pcf_stride,
            "swin_blocks": self.swin_blocks,
            "swin_heads": self.swin_heads,
            "swin_window": self.swin_window,
            "image_backbone": self.image_backbone,
            "image_dim": self.image_dim,
            "image_depth": self.image_depth,
            "image_heads": self.image_heads,
            "patch_size": self.patch_size,
            "neck_dim": self.neck_dim,
            "scales": self.scales,
            "use_language": self.use_language,
            "seg_mode": self.seg_mode,
        })
    }
}

/// Multi-head attention over `(B, N, C)` with an optional additive bias
/// broadcastable to `(B, heads, N, N)`.
fn multi_head(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, bias: Option<&Tensor>) -> candle_core::Result<Tensor> {
    let (b, n, c) = q.dims3()?;
    let dh = c / heads;
    let split = |t: &Tensor| -> candle_core::Result<Tensor> {
        t.reshape((b, n, heads, dh))?.transpose(1, 2)?.contiguous()
    };
    let (q, k, v) = (split(q)?, split(k)?, split(v)?);
    let mut att = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
    if let Some(bias) = bias {
        att = att.broadcast_add(bias)?;
    }
    let out = softmax_last(&att)?.matmul(&v)?;
    out.transpose(1, 2)?.reshape((b, n, c))
}

#[derive(Debug, Clone)]
struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::with_init(ps, &format!("{name}.qkv"), dim, 3 * dim, Init::Normal(0.02), true)?,
            proj: Linear::with_init(ps, &format!("{name}.proj"), dim, dim, Init::Normal(0.02), true)?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let c = x.dim(D::Minus1)?;
        let qkv = self.qkv.forward(x)?;
        let q = qkv.narrow(D::Minus1, 0, c)?;
        let k = qkv.narrow(D::Minus1, c, c)?;
        let v = qkv.narrow(D::Minus1, 2 * c, c)?;
        self.proj.forward(&multi_head(&q, &k, &v, self.heads, bias)?)
    }
}

#[derive(Debug, Clone)]
struct VitBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl VitBlock {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            attn: SelfAttention::new(ps, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, 4 * dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, None)?)?;
        &x + self.mlp.forward(&self.norm2.forward(&x)?)?
    }
}

/// ViT over the image with click maps and the previous mask as extra input
/// channels. The extra-channel patch weights start at zero.
#[derive(Debug, Clone)]
struct ImageBranch {
    patch_rgb: Conv2d,
    patch_extra: Conv2d,
    pos_embed: Tensor,
    blocks: Vec<VitBlock>,
    norm: LayerNorm,
    grid: usize,
}

impl ImageBranch {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let (d, p, g) = (cfg.image_dim, cfg.patch_size, cfg.image_grid());
        let patch_rgb = Conv2d::new(ps, "image.patch_rgb", 3, d, p, p, 0)?;
        let patch_extra = Conv2d {
            weight: ps.param("image.patch_extra.weight", &[d, 3, p, p], Init::Zeros)?,
            bias: ps.param("image.patch_extra.bias", &[d], Init::Zeros)?,
            stride: p,
            padding: 0,
        };
        let pos_embed = ps.param("image.pos_embed", &[1, d, g, g], Init::Normal(0.02))?;
        let blocks = (0..cfg.image_depth)
            .map(|i| VitBlock::new(ps, &format!("image.blocks.{i}"), d, cfg.image_heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_rgb,
            patch_extra,
            pos_embed,
            blocks,
            norm: LayerNorm::new(ps, "image.norm", d)?,
            grid: g,
        })
    }

    /// `(B, 3, H, W)` image and `(B, 3, H, W)` click channels to `(B, D, H/p, W/p)`.
    fn forward(&self, image: &Tensor, clicks: &Tensor) -> candle_core::Result<Tensor> {
        let x = (self.patch_rgb.forward(image)? + self.patch_extra.forward(clicks)?)?;
        let (b, d, gh, gw) = x.dims4()?;
        let pos = if (gh, gw) == (self.grid, self.grid) {
            self.pos_embed.clone()
        } else {
            resize_bilinear(&self.pos_embed, gh, gw)?
        };
        let x = x.broadcast_add(&pos)?;
        let mut t = x.flatten_from(2)?.transpose(1, 2)?.contiguous()?; // (B, N, D)
        for block in &self.blocks {
            t = block.forward(&t)?;
        }
        self.norm.forward(&t)?.transpose(1, 2)?.reshape((b, d, gh, gw))
    }
}

fn relative_position_index(ws: usize) -> Vec<u32> {
    let n = ws * ws;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = (i / ws) as i64 - (j / ws) as i64 + ws as i64 - 1;
            let dx = (i % ws) as i64 - (j % ws) as i64 + ws as i64 - 1;
            idx.push((dy * (2 * ws as i64 - 1) + dx) as u32);
        }
    }
    idx
}

/// Additive mask keeping attention inside the regions a cyclic shift glued
/// together: `(num_windows, N, N)`.
fn shift_mask(h: usize, w: usize, ws: usize, shift: usize) -> Vec<f32> {
    let bands = |len: usize| -> Vec<usize> {
        (0..len)
            .map(|i| {
                if i < len - ws {
                    0
                } else if i < len - shift {
                    1
                } else {
                    2
                }
            })
            .collect()
    };
    let (rb, cb) = (bands(h), bands(w));
    let (nwh, nww) = (h / ws, w / ws);
    let n = ws * ws;
    let mut mask = vec![0f32; nwh * nww * n * n];
    for wr in 0..nwh {
        for wc in 0..nww {
            let labels: Vec<usize> = (0..n)
                .map(|k| rb[wr * ws + k / ws] * 3 + cb[wc * ws + k % ws])
                .collect();
            let base = (wr * nww + wc) * n * n;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] != labels[j] {
                        mask[base + i * n + j] = -100.0;
                    }
                }
            }
        }
    }
    mask
}

#[derive(Debug, Clone)]
struct SwinBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    bias_table: Tensor,
    norm2: LayerNorm,
    mlp: Mlp,
    shifted: bool,
}

impl SwinBlock {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, ws: usize, shifted: bool) -> Result<Self> {
        let span = 2 * ws - 1;
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            attn: SelfAttention::new(ps, &format!("{name}.attn"), dim, heads)?,
            bias_table: ps.param(&format!("{name}.rel_bias"), &[span * span, heads], Init::Normal(0.02))?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, 4 * dim)?,
            shifted,
        })
    }

    /// `(B, H, W, C)` in and out.
    fn forward(&self, x: &Tensor, window: usize) -> candle_core::Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let ws = window.min(h).min(w);
        let shift = if self.shifted && h > ws && w > ws { ws / 2 } else { 0 };
        let n = ws * ws;
        let heads = self.attn.heads;
        let mut y = self.norm1.forward(x)?;
        if shift > 0 {
            y = y.roll(-(shift as i32), 1)?.roll(-(shift as i32), 2)?;
        }
        let (nwh, nww) = (h / ws, w / ws);
        let windows = y
            .reshape((b, nwh, ws, nww, ws, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b * nwh * nww, n, c))?;
        let dev = x.device();
        let index = Tensor::from_vec(relative_position_index(ws), n * n, dev)?;
        let span = 2 * ws - 1;
        let table = if span * span == self.bias_table.dim(0)? {
            self.bias_table.clone()
        } else {
            // grid smaller than the configured window: use the central part
            let full = ((self.bias_table.dim(0)? as f64).sqrt().round()) as usize;
            let off = (full - span) / 2;
            self.bias_table
                .reshape((full, full, heads))?
                .narrow(0, off, span)?
                .narrow(1, off, span)?
                .reshape((span * span, heads))?
        };
        let mut bias = table.index_select(&index, 0)?.reshape((n, n, heads))?.permute((2, 0, 1))?; // (heads, N, N)
        if shift > 0 {
            let mask = Tensor::from_vec(shift_mask(h, w, ws, shift), (nwh * nww, 1, n, n), dev)?.to_dtype(x.dtype())?;
            // (B * nW, heads, N, N) with the mask repeated per image
            bias = mask.broadcast_add(&bias.unsqueeze(0)?)?.repeat((b, 1, 1, 1))?;
        } else {
            bias = bias.unsqueeze(0)?;
        }
        let attended = self.attn.forward(&windows, Some(&bias.contiguous()?))?;
        let mut y = attended
            .reshape((b, nwh, nww, ws, ws, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b, h, w, c))?;
        if shift > 0 {
            y = y.roll(shift as i32, 1)?.roll(shift as i32, 2)?;
        }
        let x = (x + y)?;
        &x + self.mlp.forward(&self.norm2.forward(&x)?)?
    }
}

/// Swin blocks over the PosFAR grid followed by optional language fusion.
#[derive(Debug, Clone)]
struct ResidualBranch {
    embed: Linear,
    blocks: Vec<SwinBlock>,
    norm: LayerNorm,
    cross: Option<CrossAttention>,
    window: usize,
}

impl ResidualBranch {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let ws = cfg.swin_window;
        let blocks = (0..cfg.swin_blocks)
            .map(|i| SwinBlock::new(ps, &format!("residual.swin.{i}"), cfg.d_f, cfg.swin_heads, ws, i % 2 == 1))
            .collect::<Result<Vec<_>>>()?;
        let cross = if cfg.use_language {
            Some(CrossAttention::new(ps, "lang.cross", cfg.z, cfg.d_f)?)
        } else {
            None
        };
        Ok(Self {
            embed: Linear::new(ps, "residual.embed", cfg.posfar_dim, cfg.d_f, true)?,
            blocks,
            norm: LayerNorm::new(ps, "residual.norm", cfg.d_f)?,
            cross,
            window: ws,
        })
    }

    /// `(B, M, P)` residual vectors on an `h x w` grid to `(B, d_f, h, w)`.
    fn forward(&self, posfar: &Tensor, grid: (usize, usize), l: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let (b, _, _) = posfar.dims3()?;
        let mut x = self.embed.forward(posfar)?.reshape((b, grid.0, grid.1, ()))?;
        for block in &self.blocks {
            x = block.forward(&x, self.window)?;
        }
        let x = self.norm.forward(&x)?.permute((0, 3, 1, 2))?.contiguous()?;
        match (&self.cross, l) {
            (Some(cross), Some(l)) => cross.forward(&x, l),
            _ => Ok(x),
        }
    }
}

/// 1x1 conv, channel layer norm, GELU, resize.
#[derive(Debug, Clone)]
struct ConvNeck {
    conv: Conv2d,
    norm: LayerNorm,
}

impl ConvNeck {
    fn new(ps: &mut ParamStore, name: &str, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), in_c, out_c, 1, 1, 0)?,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), out_c)?,
        })
    }

    fn forward(&self, x: &Tensor, size: usize) -> candle_core::Result<Tensor> {
        let y = self.norm.forward_nchw(&self.conv.forward(x)?)?.gelu()?;
        resize_bilinear(&y, size, size)
    }
}

/// Coarse-to-fine upsample-add, two 3x3 convs and a one-channel head.
#[derive(Debug, Clone)]
struct Decoder {
    conv1: Conv2d,
    conv2: Conv2d,
    head: Conv2d,
}

impl Decoder {
    fn new(ps: &mut ParamStore, dim: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(ps, "decoder.conv1", dim, dim, 3, 1, 1)?,
            conv2: Conv2d::new(ps, "decoder.conv2", dim, dim, 3, 1, 1)?,
            head: Conv2d::new(ps, "decoder.head", dim, 1, 1, 1, 0)?,
        })
    }

    fn forward(&self, pyramid: &[Tensor], out: (usize, usize)) -> candle_core::Result<Tensor> {
        let mut x = pyramid[0].clone();
        for f in &pyramid[1..] {
            let (_, _, h, w) = f.dims4()?;
            x = (resize_bilinear(&x, h, w)? + f)?;
        }
        let x = self.conv1.forward(&x)?.relu()?;
        let x = self.conv2.forward(&x)?.relu()?;
        resize_bilinear(&self.head.forward(&x)?, out.0, out.1)
    }
}

/// Per-scale features, coarsest first.
#[derive(Debug, Clone)]
pub struct FusionPyramid {
    pub scales: Vec<usize>,
    pub image: Vec<Tensor>,
    pub residual: Vec<Tensor>,
    pub fused: Vec<Tensor>,
}

/// Batched network inputs.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// `(B, 3, H, W)` normalised image.
    pub image: Tensor,
    /// `(B, 3, H, W)`: positive clicks, negative clicks, previous mask.
    pub clicks: Tensor,
    /// `(B, h_f * w_f, P)` residuals.
    pub posfar: Tensor,
    pub grid: (usize, usize),
    /// `(B, T, text_dim)` frozen text embeddings.
    pub text: Option<Tensor>,
}

impl ModelInput {
    /// Single-sample input from host arrays.
    pub fn from_arrays(
        image: &Array3<f32>,
        clicks: &ClickEncoding,
        posfar: &PosFarTensor,
        text: Option<&ndarray::Array2<f32>>,
        dtype: DType,
    ) -> Result<Self> {
        let dev = Device::Cpu;
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::DimensionMismatch {
                what: "image channels",
                expected: 3,
                actual: c,
            });
        }
        if clicks.positive.dim() != (h, w) {
            return Err(Error::ResolutionMismatch {
                expected: (h, w),
                actual: clicks.positive.dim(),
            });
        }
        let img = Tensor::from_vec(image.iter().copied().collect::<Vec<_>>(), (1, h, w, 3), &dev)?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .to_dtype(dtype)?;
        let mut cl = Vec::with_capacity(3 * h * w);
        for m in [&clicks.positive, &clicks.negative, &clicks.previous_mask] {
            cl.extend(m.iter().copied());
        }
        let cl = Tensor::from_vec(cl, (1, 3, h, w), &dev)?.to_dtype(dtype)?;
        let (m, p) = posfar.residuals.dim();
        let pf = Tensor::from_vec(posfar.residuals.iter().copied().collect::<Vec<_>>(), (1, m, p), &dev)?.to_dtype(dtype)?;
        let text = match text {
            Some(t) => {
                let (n, d) = t.dim();
                Some(Tensor::from_vec(t.iter().copied().collect::<Vec<_>>(), (1, n, d), &dev)?.to_dtype(dtype)?)
            }
            None => None,
        };
        Ok(Self {
            image: img,
            clicks: cl,
            posfar: pf,
            grid: posfar.grid,
            text,
        })
    }
}

/// Training and evaluation losses for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub nfl: f64,
    pub contrastive: f64,
    pub total: f64,
}

pub struct AdClickNet {
    config: ModelConfig,
    params: ParamStore,
    image: ImageBranch,
    residual: ResidualBranch,
    lang_encoder: Option<LinguisticEncoder>,
    image_necks: Vec<ConvNeck>,
    residual_necks: Vec<ConvNeck>,
    zero_convs: Vec<Conv2d>,
    decoder: Decoder,
}

impl AdClickNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(config: ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(config.seed, dtype);
        let image = ImageBranch::new(&mut ps, &config)?;
        let residual = ResidualBranch::new(&mut ps, &config)?;
        let lang_encoder = if config.use_language {
            Some(LinguisticEncoder::new(&mut ps, "lang.encoder", config.text_dim, config.z)?)
        } else {
            None
        };
        let scales = config.active_scales();
        let mut image_necks = Vec::new();
        let mut residual_necks = Vec::new();
        let mut zero_convs = Vec::new();
        for s in &scales {
            image_necks.push(ConvNeck::new(&mut ps, &format!("neck.image.s{s}"), config.image_dim, config.neck_dim)?);
            residual_necks.push(ConvNeck::new(&mut ps, &format!("neck.residual.s{s}"), config.d_f, config.neck_dim)?);
            zero_convs.push(Conv2d::zero(&mut ps, &format!("zc.s{s}"), config.neck_dim, config.neck_dim)?);
        }
        let decoder = Decoder::new(&mut ps, config.neck_dim)?;
        Ok(Self {
            config,
            params: ps,
            image,
            residual,
            lang_encoder,
            image_necks,
            residual_necks,
            zero_convs,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn linguistic_encoder(&self) -> Option<&LinguisticEncoder> {
        self.lang_encoder.as_ref()
    }

    /// Zero-convolution weights, one per active scale.
    pub fn zero_conv_weights(&self) -> Vec<&Tensor> {
        self.zero_convs.iter().map(|z| &z.weight).collect()
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let (_, c, h, w) = input.image.dims4()?;
        let coarsest = self.config.scales[0].max(self.config.patch_size).max(self.config.pcf_stride);
        if c != 3 || h % coarsest != 0 || w % coarsest != 0 || h != w {
            return Err(Error::ShapeMismatch {
                what: "model input",
                lhs: input.image.dims().to_vec(),
                rhs: vec![3, coarsest, coarsest],
            });
        }
        if input.clicks.dims() != input.image.dims() {
            return Err(Error::ShapeMismatch {
                what: "click channels",
                lhs: input.clicks.dims().to_vec(),
                rhs: input.image.dims().to_vec(),
            });
        }
        let (_, m, p) = input.posfar.dims3()?;
        if p != self.config.posfar_dim || m != input.grid.0 * input.grid.1 {
            return Err(Error::ShapeMismatch {
                what: "posfar input",
                lhs: input.posfar.dims().to_vec(),
                rhs: vec![input.grid.0 * input.grid.1, self.config.posfar_dim],
            });
        }
        Ok(())
    }

    /// Linguistic tokens `l` for `(B, T, text_dim)` text embeddings.
    pub fn encode_text(&self, text: &Tensor) -> Result<Option<Tensor>> {
        match &self.lang_encoder {
            Some(enc) => {
                let d = text.dim(D::Minus1)?;
                if d != self.config.text_dim {
                    return Err(Error::DimensionMismatch {
                        what: "text embedding",
                        expected: self.config.text_dim,
                        actual: d,
                    });
                }
                Ok(Some(enc.forward(text)?))
            }
            None => Ok(None),
        }
    }

    pub fn pyramid(&self, input: &ModelInput) -> Result<FusionPyramid> {
        self.check_input(input)?;
        let (_, _, h, _) = input.image.dims4()?;
        let f_n = self.image.forward(&input.image, &input.clicks)?;
        let l = match &input.text {
            Some(t) => self.encode_text(t)?,
            None => None,
        };
        let r = self.residual.forward(&input.posfar, input.grid, l.as_ref())?;
        let scales = self.config.active_scales();
        let mut out = FusionPyramid {
            scales: scales.clone(),
            image: Vec::new(),
            residual: Vec::new(),
            fused: Vec::new(),
        };
        for (i, s) in scales.iter().enumerate() {
            let size = h / s;
            let fi = self.image_necks[i].forward(&f_n, size)?;
            let fr = self.residual_necks[i].forward(&r, size)?;
            let fused = if self.config.seg_mode {
                (self.zero_convs[i].forward(&fi)? + &fr)?
            } else {
                (&fi + self.zero_convs[i].forward(&fr)?)?
            };
            out.image.push(fi);
            out.residual.push(fr);
            out.fused.push(fused);
        }
        Ok(out)
    }

    /// Full-resolution logits `(B, 1, H, W)`.
    pub fn logits(&self, input: &ModelInput) -> Result<Tensor> {
        let pyr = self.pyramid(input)?;
        let (_, _, h, w) = input.image.dims4()?;
        Ok(self.decoder.forward(&pyr.fused, (h, w))?)
    }

    /// Anomaly probabilities `(B, 1, H, W)` in `[0, 1]`.
    pub fn forward(&self, input: &ModelInput) -> Result<Tensor> {
        let p = candle_nn::ops::sigmoid(&self.logits(input)?)?;
        let finite = p.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("network output"));
        }
        Ok(p)
    }

    /// Single-sample prediction as an [`AnomalyMask`].
    pub fn predict_mask(&self, input: &ModelInput) -> Result<AnomalyMask> {
        let p = self.forward(input)?;
        let (_, _, h, w) = p.dims4()?;
        let v: Vec<f32> = p.narrow(0, 0, 1)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        let scores = ndarray::Array2::from_shape_vec((h, w), v).map_err(|e| Error::Format(e.to_string()))?;
        AnomalyMask::new(scores, self.config.threshold)
    }

    /// SHA-256 over parameter names and little-endian f32 values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, t) in self.params.snapshot() {
            hasher.update(name.as_bytes());
            let v: Vec<f32> = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            for x in v {
                hasher.update(x.to_le_bytes());
            }
        }
        Ok(format!("{:x}", hasher.finalize()))
    }

    pub fn save(&self, path: &Path, step: usize) -> Result<()> {
        let snapshot = self.params.snapshot();
        let mut meta = HashMap::new();
        meta.insert("format_version".to_string(), CHECKPOINT_FORMAT_VERSION.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert("step".to_string(), step.to_string());
        let bytes = safetensors::tensor::serialize(snapshot.iter().map(|(k, v)| (k.as_str(), v)), Some(meta))
            .map_err(|e| Error::Format(e.to_string()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    fn read_checkpoint(path: &Path) -> Result<(ModelConfig, usize, BTreeMap<String, Tensor>)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Format(e.to_string()))?;
        let meta = meta.metadata().clone().unwrap_or_default();
        let version = meta.get("format_version").map(String::as_str).unwrap_or("?");
        if version != CHECKPOINT_FORMAT_VERSION.to_string() {
            return Err(Error::CheckpointMismatch(format!("unsupported format version {version}")));
        }
        let config: ModelConfig = serde_json::from_str(
            meta.get("config")
                .ok_or_else(|| Error::CheckpointMismatch("missing config snapshot".into()))?,
        )?;
        let step = meta.get("step").and_then(|s| s.parse().ok()).unwrap_or(0);
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?.into_iter().collect();
        Ok((config, step, tensors))
    }

    /// Builds a model from the checkpoint's own config snapshot.
    pub fn load(path: &Path) -> Result<(Self, usize)> {
        let (config, step, tensors) = Self::read_checkpoint(path)?;
        let model = Self::new(config)?;
        model.params.load(&tensors)?;
        Ok((model, step))
    }

    /// Loads weights into this model; the snapshot must agree on every
    /// structural field.
    pub fn load_weights(&self, path: &Path) -> Result<usize> {
        let (config, step, tensors) = Self::read_checkpoint(path)?;
        if config.structural() != self.config.structural() {
            return Err(Error::CheckpointMismatch(format!(
                "structural config differs: checkpoint {} vs model {}",
                config.structural(),
                self.config.structural()
            )));
        }
        self.params.load(&tensors)?;
        Ok(step)
    }

    /// Submodule a parameter belongs to, for gradient diagnostics.
    pub fn submodule_of(name: &str) -> &'static str {
        if name.starts_with("image.patch_extra") {
            "image.click_adapter"
        } else if name.starts_with("image.") {
            "image"
        } else if name.starts_with("residual.") {
            "residual"
        } else if name.starts_with("lang.encoder") {
            "lang.encoder"
        } else if name.starts_with("lang.cross.w_k") {
            "lang.w_k"
        } else if name.starts_with("lang.cross.w_v") {
            "lang.w_v"
        } else if name.starts_with("lang.cross") {
            "lang.query"
        } else if name.starts_with("neck.") {
            "neck"
        } else if name.starts_with("zc.") {
            "zero_conv"
        } else {
            "decoder"
        }
    }
}

/// Normalised focal loss on probabilities. Each pixel's weight is
/// `(1 - p_t)^gamma` divided by the weight sum over the batch; at
/// `gamma = 0` this is mean binary cross-entropy.
pub fn normalized_focal_loss(prediction: &[f64], target: &[bool], gamma: f64) -> Result<f64> {
    let weights = nfl_weights(prediction, target, gamma)?;
    Ok(prediction
        .iter()
        .zip(target)
        .zip(&weights)
        .map(|((&p, &y), &w)| -w * p_t(p, y).max(1e-300).ln())
        .sum())
}

fn p_t(p: f64, y: bool) -> f64 {
    if y {
        p
    } else {
        1.0 - p
    }
}

/// Normalised per-pixel weights used by [`normalized_focal_loss`].
pub fn nfl_weights(prediction: &[f64], target: &[bool], gamma: f64) -> Result<Vec<f64>> {
    if prediction.len() != target.len() {
        return Err(Error::ShapeMismatch {
            what: "focal loss",
            lhs: vec![prediction.len()],
            rhs: vec![target.len()],
        });
    }
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
    }
    if prediction.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidArgument("predictions must lie in [0, 1]".into()));
    }
    let raw: Vec<f64> = prediction
        .iter()
        .zip(target)
        .map(|(&p, &y)| (1.0 - p_t(p, y)).powf(gamma))
        .collect();
    let sum: f64 = raw.iter().sum::<f64>().max(1e-12);
    Ok(raw.into_iter().map(|w| w / sum).collect())
}

/// Differentiable normalised focal loss on logits; the weight normaliser is
/// detached.
pub fn normalized_focal_loss_logits(logits: &Tensor, target: &Tensor, gamma: f64) -> Result<Tensor> {
    if logits.dims() != target.dims() {
        return Err(Error::ShapeMismatch {
            what: "focal loss",
            lhs: logits.dims().to_vec(),
            rhs: target.dims().to_vec(),
        });
    }
    let log_p = log_sigmoid(logits)?;
    let log_q = log_sigmoid(&logits.neg()?)?;
    let one_minus_y = target.affine(-1.0, 1.0)?;
    let log_pt = ((target * &log_p)? + (&one_minus_y * &log_q)?)?;
    let beta = if gamma == 0.0 {
        log_pt.ones_like()?
    } else {
        let q = log_pt.exp()?.affine(-1.0, 1.0)?.clamp(0.0, 1.0)?;
        if gamma == 2.0 {
            q.sqr()?
        } else {
            q.clamp(1e-12, 1.0)?.powf(gamma)?
        }
    };
    let norm = beta.sum_all()?.detach().clamp(1e-12, f64::INFINITY)?;
    Ok((beta * log_pt)?.sum_all()?.neg()?.broadcast_div(&norm)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    /// Weight of the prompt-contrastive term.
    pub lambda: f64,
    pub temperature: f64,
    /// Maximum number of simulated clicks preceding the supervised one.
    pub max_prev_clicks: usize,
    /// Probability of a jittered training click.
    pub jitter: f64,
    /// Evaluate the fixed batch every this many steps.
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            lr: 1e-5,
            weight_decay: 0.05,
            gamma: DEFAULT_GAMMA,
            lambda: DEFAULT_LAMBDA,
            temperature: 0.1,
            max_prev_clicks: 3,
            jitter: 0.3,
            eval_every: 10,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: ModelInput,
    /// `(1, 1, H, W)` binary target.
    pub target: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct TrainBatch {
    pub samples: Vec<TrainSample>,
    /// Phrase text embeddings `(T, text_dim)` with their prompt group.
    pub phrases: Vec<(Tensor, usize)>,
}

/// Loss of one batch: focal loss over all samples plus the weighted
/// contrastive term.
pub fn batch_loss(model: &AdClickNet, batch: &TrainBatch, cfg: &TrainConfig) -> Result<(Tensor, LossTerms)> {
    if batch.samples.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let mut logits = Vec::with_capacity(batch.samples.len());
    let mut targets = Vec::with_capacity(batch.samples.len());
    for s in &batch.samples {
        logits.push(model.logits(&s.input)?);
        targets.push(s.target.to_dtype(model.dtype())?);
    }
    let logits = Tensor::cat(&logits, 0)?;
    let targets = Tensor::cat(&targets, 0)?;
    let nfl = normalized_focal_loss_logits(&logits, &targets, cfg.gamma)?;
    let mut total = nfl.clone();
    let mut contrastive = 0.0;
    if let (Some(enc), false) = (model.linguistic_encoder(), batch.phrases.is_empty()) {
        if cfg.lambda > 0.0 {
            let pooled = batch
                .phrases
                .iter()
                .map(|(v, _)| enc.forward(&v.to_dtype(model.dtype())?)?.mean_keepdim(0))
                .collect::<candle_core::Result<Vec<_>>>()?;
            let groups: Vec<usize> = batch.phrases.iter().map(|(_, g)| *g).collect();
            let c = prompt_contrastive_loss(&Tensor::cat(&pooled, 0)?, &groups, cfg.temperature)?;
            contrastive = c.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            total = (total + (c * cfg.lambda)?)?;
        }
    }
    let terms = LossTerms {
        nfl: nfl.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        contrastive,
        total: total.to_dtype(DType::F64)?.to_scalar::<f64>()?,
    };
    Ok((total, terms))
}

/// Supplies training batches; may run the current model to simulate clicks.
pub trait BatchSource {
    fn next_batch(&mut self, model: &AdClickNet, step: usize) -> Result<TrainBatch>;
}

/// Replays one batch forever; used for overfitting checks.
pub struct FixedBatchSource(pub TrainBatch);

impl BatchSource for FixedBatchSource {
    fn next_batch(&mut self, _model: &AdClickNet, _step: usize) -> Result<TrainBatch> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub nfl: f64,
    pub contrastive: f64,
    pub total: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_batch_loss: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub losses: Vec<LossTerms>,
    /// `(step, loss)` on the fixed batch, measured before that step's update.
    pub fixed_batch: Vec<(usize, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs AdamW over batches from `source`, optionally tracking a fixed batch
/// and writing JSON-lines logs and checkpoints into `out_dir`.
pub fn train(
    model: &AdClickNet,
    source: &mut dyn BatchSource,
    fixed: Option<&TrainBatch>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    let mut opt = AdamW::new(
        model.params().vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            Some((
                OpenOptions::new().create(true).append(true).open(&p).map_err(|e| Error::io(&p, e))?,
                p,
            ))
        }
        None => None,
    };
    let mut report = TrainReport::default();
    let fixed_loss = |report: &mut TrainReport, step: usize| -> Result<Option<f64>> {
        match fixed {
            Some(b) => {
                let (_, t) = batch_loss(model, b, cfg)?;
                report.fixed_batch.push((step, t.total));
                Ok(Some(t.total))
            }
            None => Ok(None),
        }
    };
    for step in 0..cfg.steps {
        let fixed_value = if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            fixed_loss(&mut report, step)?
        } else {
            None
        };
        let batch = source.next_batch(model, step)?;
        let (loss, terms) = batch_loss(model, &batch, cfg)?;
        if !terms.total.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: terms.total,
            });
        }
        opt.backward_step(&loss)?;
        report.losses.push(terms);
        if let Some((file, path)) = log.as_mut() {
            let rec = LogRecord {
                step,
                nfl: terms.nfl,
                contrastive: terms.contrastive,
                total: terms.total,
                lr: cfg.lr,
                fixed_batch_loss: fixed_value,
            };
            writeln!(file, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let (Some(dir), true) = (out_dir, cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            let p = dir.join(format!("checkpoint_{:06}.safetensors", step + 1));
            model.save(&p, step + 1)?;
            report.checkpoints.push(p);
        }
    }
    if cfg.eval_every > 0 {
        fixed_loss(&mut report, cfg.steps)?;
    }
    if let Some(dir) = out_dir {
        let p = dir.join("checkpoint_final.safetensors");
        model.save(&p, cfg.steps)?;
        report.checkpoints.push(p);
    }
    Ok(report)
}

/// Gradient L2 norm per submodule for one batch, without updating weights.
pub fn gradient_norms(model: &AdClickNet, batch: &TrainBatch, cfg: &TrainConfig) -> Result<BTreeMap<&'static str, f64>> {
    let (loss, _) = batch_loss(model, batch, cfg)?;
    let grads = loss.backward()?;
    let mut out: BTreeMap<&'static str, f64> = BTreeMap::new();
    for (name, var) in model.params().named_vars() {
        let sq = match grads.get(var.as_tensor()) {
            Some(g) => g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?,
            None => 0.0,
        };
        *out.entry(AdClickNet::submodule_of(name)).or_default() += sq;
    }
    Ok(out.into_iter().map(|(k, v)| (k, v.sqrt())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(cfg: &ModelConfig, seed: u64, with_text: bool) -> ModelInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dev = Device::Cpu;
        let r = cfg.resolution;
        let g = cfg.residual_grid();
        let mut rand_t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::from_vec(v, shape, &dev).unwrap()
        };
        ModelInput {
            image: rand_t(&[1, 3, r, r]),
            clicks: rand_t(&[1, 3, r, r]).abs().unwrap(),
            posfar: rand_t(&[1, g * g, cfg.posfar_dim]).abs().unwrap(),
            grid: (g, g),
            text: with_text.then(|| rand_t(&[1, 5, cfg.text_dim])),
        }
    }

    fn values(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn output_shape_and_range() {
        let cfg = ModelConfig::tiny();
        let model = AdClickNet::new(cfg.clone()).unwrap();
        let p = model.forward(&random_input(&cfg, 1, true)).unwrap();
        assert_eq!(p.dims(), &[1, 1, 64, 64]);
        assert!(values(&p).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_init_fused_equals_image_pyramid() {
        let cfg = ModelConfig::tiny();
        let model = AdClickNet::new(cfg.clone()).unwrap();
        let a = random_input(&cfg, 2, true);
        let mut b = a.clone();
        b.posfar = (b.posfar * 3.0).unwrap();
        let pa = model.pyramid(&a).unwrap();
        let pb = model.pyramid(&b).unwrap();
        for i in 0..pa.fused.len() {
            assert_eq!(values(&pa.fused[i]), values(&pa.image[i]));
            assert_eq!(values(&pa.fused[i]), values(&pb.fused[i]));
        }
    }

    #[test]
    fn seg_mode_keeps_two_scales_and_residual_path() {
        let cfg = ModelConfig {
            seg_mode: true,
            ..ModelConfig::tiny()
        };
        let model = AdClickNet::new(cfg.clone()).unwrap();
        let pyr = model.pyramid(&random_input(&cfg, 3, true)).unwrap();
        assert_eq!(pyr.scales, vec![8, 4]);
        for i in 0..2 {
            assert_eq!(values(&pyr.fused[i]), values(&pyr.residual[i]));
        }
    }

    #[test]
    fn shift_mask_separates_wrapped_regions() {
        let m = shift_mask(4, 4, 2, 1);
        // last window mixes three bands in each direction
        let n = 4;
        let last = &m[3 * n * n..];
        assert_eq!(last[0], 0.0);
        assert!(last.iter().any(|&v| v < 0.0));
        // first window lies in one region
        assert!(m[..n * n].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let cfg = ModelConfig::tiny();
        let model = AdClickNet::new(cfg.clone()).unwrap();
        let input = random_input(&cfg, 4, true);
        let before = values(&model.forward(&input).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        model.save(&path, 7).unwrap();
        let (loaded, step) = AdClickNet::load(&path).unwrap();
        assert_eq!(step, 7);
        assert_eq!(values(&loaded.forward(&input).unwrap()), before);
        assert_eq!(loaded.fingerprint().unwrap(), model.fingerprint().unwrap());

        let other = AdClickNet::new(ModelConfig {
            neck_dim: 16,
            ..cfg
        })
        .unwrap();
        assert!(matches!(other.load_weights(&path), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn nfl_gamma_zero_is_mean_bce() {
        let p = [0.1, 0.8, 0.5, 0.99, 0.3];
        let y = [false, true, true, false, false];
        let bce: f64 = p
            .iter()
            .zip(&y)
            .map(|(&p, &y)| -(if y { p } else { 1.0 - p } as f64).ln())
            .sum::<f64>()
            / p.len() as f64;
        assert!((normalized_focal_loss(&p, &y, 0.0).unwrap() - bce).abs() < 1e-12);
        assert!(normalized_focal_loss(&[1.0, 0.0], &[true, false], 2.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn logits_nfl_matches_probability_form() {
        let x = [-2.0f64, 0.5, 3.0, -0.1, 1.2, -4.0];
        let y = [false, true, true, true, false, false];
        let p: Vec<f64> = x.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let dev = Device::Cpu;
        let xt = Tensor::new(&x, &dev).unwrap();
        let yt = Tensor::new(&y.map(|b| b as u8 as f64), &dev).unwrap();
        for gamma in [0.0, 1.5, 2.0] {
            let a: f64 = normalized_focal_loss_logits(&xt, &yt, gamma).unwrap().to_scalar().unwrap();
            let b = normalized_focal_loss(&p, &y, gamma).unwrap();
            assert!((a - b).abs() < 1e-12, "gamma {gamma}: {a} vs {b}");
        }
    }

    #[test]
    fn background_only_batch_has_positive_loss() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[0.3f64, -0.2, 0.0, 1.0], &dev).unwrap();
        let y = x.zeros_like().unwrap();
        let l: f64 = normalized_focal_loss_logits(&x, &y, 2.0).unwrap().to_scalar().unwrap();
        assert!(l.is_finite() && l > 0.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::tiny();
        cfg.scales = vec![4, 8];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny();
        cfg.swin_blocks = 0;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn nfl_weights_sum_to_one(
            p in proptest::collection::vec(0.0f64..=1.0, 1..200),
            seed in 0u64..1000,
            gamma in 0.0f64..4.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<bool> = p.iter().map(|_| rng.random_bool(0.3)).collect();
            let w = nfl_weights(&p, &y, gamma).unwrap();
            let s: f64 = w.iter().sum();
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            // an all-perfect batch has no weight mass at all
            prop_assert!((s - 1.0).abs() < 1e-6 || s == 0.0);
        }
    }
}

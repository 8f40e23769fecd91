//! Defect descriptions: prompt templating, text embedding, the trainable
//! linguistic encoder and cross-attention fusion into residual features.

use candle_core::{DType, Device, Module, Tensor};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::{PromptCorpus, PromptKey};
use crate::error::{Error, Result};
use crate::nn::{log_softmax_last, softmax_last, Conv2d, Init, LayerNorm, Linear, ParamStore};

/// Instruction used to generate a phrase corpus for one defect.
pub fn render_prompt_template(object: &str, defect: &str, u: usize) -> Result<String> {
    if object.trim().is_empty() || defect.trim().is_empty() {
        return Err(Error::InvalidArgument("object and defect must be non-empty".into()));
    }
    Ok(format!("Give {u} phrases describing the {defect} defect on a {object}."))
}

/// Frozen text embedder producing one vector per token.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn fingerprint(&self) -> String;
    /// `T x dim` token embeddings, `T >= 1`.
    fn embed(&self, prompt: &str) -> Result<Array2<f32>>;
}

/// Deterministic hashed word embedding: each lowercase word maps to a fixed
/// Gaussian vector, framed by `[CLS]` and `[SEP]` and tagged with a small
/// sinusoidal position code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashedTextEncoder {
    pub dim: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for HashedTextEncoder {
    fn default() -> Self {
        Self {
            dim: 768,
            max_tokens: 32,
            seed: 0,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

impl HashedTextEncoder {
    fn token_vector(&self, token: &str) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.seed);
        let scale = 1.0 / (self.dim as f32).sqrt();
        (0..self.dim)
            .map(|_| {
                let v: f32 = StandardNormal.sample(&mut rng);
                v * scale
            })
            .collect()
    }
}

impl TextEncoder for HashedTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("hashed-v1:d{}:t{}:seed{}", self.dim, self.max_tokens, self.seed)
    }

    fn embed(&self, prompt: &str) -> Result<Array2<f32>> {
        if prompt.trim().is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        if self.dim == 0 || self.max_tokens < 2 {
            return Err(Error::EncoderUnavailable(format!("bad encoder geometry {}", self.fingerprint())));
        }
        let mut tokens = vec!["[CLS]".to_string()];
        tokens.extend(tokenize(prompt).into_iter().take(self.max_tokens - 2));
        tokens.push("[SEP]".to_string());
        let mut out = Array2::<f32>::zeros((tokens.len(), self.dim));
        for (t, tok) in tokens.iter().enumerate() {
            let v = self.token_vector(tok);
            for (k, val) in v.into_iter().enumerate() {
                let freq = 1.0 / 10_000f32.powf((k / 2 * 2) as f32 / self.dim as f32);
                let angle = t as f32 * freq;
                let pos = if k % 2 == 0 { angle.sin() } else { angle.cos() };
                out[[t, k]] = val + 0.02 * pos;
            }
        }
        Ok(out)
    }
}

/// Compact token sequence `l` for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct LinguisticFeature {
    /// `T_l x Z`.
    pub tokens: Array2<f32>,
    pub source_prompt: String,
    pub object: String,
    pub defect: String,
}

impl LinguisticFeature {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn mean_token(&self) -> Vec<f32> {
        let n = self.len().max(1) as f32;
        self.tokens.sum_axis(ndarray::Axis(0)).iter().map(|v| v / n).collect()
    }
}

/// Trainable two-layer projection from text embeddings to `Z` dimensions.
#[derive(Debug, Clone)]
pub struct LinguisticEncoder {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl LinguisticEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, text_dim: usize, z: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), text_dim, z, true)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), z, z, true)?,
        })
    }

    /// `(.., T, text_dim) -> (.., T, Z)`.
    pub fn forward(&self, v: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(v)?.gelu()?)
    }
}

/// Query convolution with normalisation plus key and value projections.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub query_conv: Conv2d,
    pub query_norm: LayerNorm,
    pub w_k: Linear,
    pub w_v: Linear,
    pub d_f: usize,
}

impl CrossAttention {
    pub fn new(ps: &mut ParamStore, name: &str, z: usize, d_f: usize) -> Result<Self> {
        let std = 1.0 / (z as f64).sqrt();
        Ok(Self {
            query_conv: Conv2d::new(ps, &format!("{name}.query_conv"), d_f, d_f, 1, 1, 0)?,
            query_norm: LayerNorm::new(ps, &format!("{name}.query_norm"), d_f)?,
            w_k: Linear::with_init(ps, &format!("{name}.w_k"), z, d_f, Init::Normal(std), false)?,
            w_v: Linear::with_init(ps, &format!("{name}.w_v"), z, d_f, Init::Normal(std * 0.1), false)?,
            d_f,
        })
    }

    /// Attention weights `(B, h*w, T)` for residuals `(B, d_f, h, w)` and
    /// linguistic tokens `(B, T, Z)`.
    pub fn weights(&self, residual: &Tensor, l: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = residual.dims4()?;
        let q = self.query_conv.forward(residual)?;
        let q = self.query_norm.forward(&q.permute((0, 2, 3, 1))?)?.reshape((b, h * w, c))?.contiguous()?;
        let k = self.w_k.forward(l)?; // (B, T, d_f)
        let logits = q.matmul(&k.transpose(1, 2)?.contiguous()?)?;
        softmax_last(&(logits / (self.d_f as f64).sqrt())?)
    }

    /// `R + softmax(q k^T / sqrt(d_f)) v`, shape preserving.
    pub fn forward(&self, residual: &Tensor, l: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = residual.dims4()?;
        let att = self.weights(residual, l)?;
        let v = self.w_v.forward(l)?;
        let mixed = att.matmul(&v.contiguous()?)?; // (B, h*w, d_f)
        let mixed = mixed.reshape((b, h, w, c))?.permute((0, 3, 1, 2))?;
        residual + mixed
    }
}

fn array2_tensor(a: &Array2<f32>, dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, a.dim(), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Encodes a prompt with the frozen text encoder followed by `encoder`.
pub fn encode_prompt(
    prompt: &str,
    key: &PromptKey,
    text_encoder: &dyn TextEncoder,
    encoder: &LinguisticEncoder,
) -> Result<LinguisticFeature> {
    let v = text_encoder.embed(prompt)?;
    let dtype = encoder.fc1.weight.dtype();
    let l = encoder.forward(&array2_tensor(&v, dtype)?)?;
    let flat: Vec<f32> = l.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let tokens = Array2::from_shape_vec(l.dims2()?, flat).map_err(|e| Error::Format(e.to_string()))?;
    if tokens.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linguistic feature"));
    }
    Ok(LinguisticFeature {
        tokens,
        source_prompt: prompt.to_string(),
        object: key.object.clone(),
        defect: key.defect.clone(),
    })
}

/// Fuses a linguistic feature into an `h x w x d_f` residual map.
pub fn fuse_language(residual: &Array3<f32>, l: &LinguisticFeature, params: &CrossAttention) -> Result<Array3<f32>> {
    let (h, w, d) = residual.dim();
    if d != params.d_f {
        return Err(Error::DimensionMismatch {
            what: "residual map",
            expected: params.d_f,
            actual: d,
        });
    }
    let z = params.w_k.weight.dims2()?.1;
    if l.dim() != z {
        return Err(Error::DimensionMismatch {
            what: "linguistic feature",
            expected: z,
            actual: l.dim(),
        });
    }
    if l.is_empty() {
        return Err(Error::InvalidArgument("linguistic feature has no tokens".into()));
    }
    let dtype = params.w_k.weight.dtype();
    let data: Vec<f32> = residual.iter().copied().collect();
    let r = Tensor::from_vec(data, (1, h, w, d), &Device::Cpu)?
        .to_dtype(dtype)?
        .permute((0, 3, 1, 2))?;
    let lt = array2_tensor(&l.tokens, dtype)?.unsqueeze(0)?;
    let out = params.forward(&r, &lt)?.permute((0, 2, 3, 1))?.to_dtype(DType::F32)?;
    let flat: Vec<f32> = out.flatten_all()?.to_vec1()?;
    Array3::from_shape_vec((h, w, d), flat).map_err(|e| Error::Format(e.to_string()))
}

/// Supervised contrastive loss over cosine similarities of `(N, Z)`
/// embeddings: rows sharing a group pull together, others push apart.
/// Anchors without a partner are skipped; returns zero if none qualify.
pub fn prompt_contrastive_loss(embeddings: &Tensor, groups: &[usize], temperature: f64) -> Result<Tensor> {
    let (n, _) = embeddings.dims2()?;
    if groups.len() != n {
        return Err(Error::DimensionMismatch {
            what: "contrastive groups",
            expected: n,
            actual: groups.len(),
        });
    }
    let dtype = embeddings.dtype();
    let norm = embeddings.sqr()?.sum_keepdim(1)?.sqrt()?.clamp(1e-8, f64::INFINITY)?;
    let e = embeddings.broadcast_div(&norm)?;
    let sim = (e.matmul(&e.t()?)? / temperature)?;
    let mut diag = vec![0f32; n * n];
    let mut pos = vec![0f32; n * n];
    let mut anchors = 0usize;
    for i in 0..n {
        diag[i * n + i] = -1e9;
        let partners: Vec<usize> = (0..n).filter(|&j| j != i && groups[j] == groups[i]).collect();
        if !partners.is_empty() {
            anchors += 1;
        }
        for &j in &partners {
            pos[i * n + j] = 1.0 / partners.len() as f32;
        }
    }
    if anchors == 0 {
        return Ok(Tensor::zeros((), dtype, embeddings.device())?);
    }
    let diag = Tensor::from_vec(diag, (n, n), embeddings.device())?.to_dtype(dtype)?;
    let pos = Tensor::from_vec(pos, (n, n), embeddings.device())?.to_dtype(dtype)?;
    let logp = log_softmax_last(&(sim + diag)?)?;
    let total = (logp * pos)?.sum_all()?;
    Ok((total.neg()? / anchors as f64)?)
}

/// Uniform phrase choice for a key; reproducible for a fixed seed and salt.
pub fn select_phrase<'a>(corpus: &'a PromptCorpus, key: &PromptKey, seed: u64, salt: &str) -> Result<&'a str> {
    let phrases = corpus.phrases(key)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(salt.as_bytes()) ^ fnv1a(key.to_string().as_bytes()));
    Ok(&phrases[rng.random_range(0..phrases.len())])
}

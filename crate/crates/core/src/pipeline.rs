//! Glue between datasets, feature extraction, language and the network:
//! an inference engine, evaluation drivers and training batch sources.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::RgbImage;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clicks::{
    encode_clicks, run_click_protocol, sample_first_click, sample_next_click, AnomalyMask, Click, ClickEncoding,
    ClickModel, ProtocolOutcome,
};
use crate::datasets::{
    build_reference_bank, load_dataset, normalize_rgb, DatasetIndex, Layout, PromptCorpus, PromptKey, ReferenceBank,
    Split,
};
use crate::error::{Error, Result};
use crate::extractor::{ConvExtractor, ConvExtractorConfig, FeatureExtractor};
use crate::imgproc::{bool_to_f32, read_mask_png};
use crate::language::{select_phrase, HashedTextEncoder, TextEncoder};
use crate::metrics::{aggregate_noc, iis_scores, ad_scores, AdRow, EvalRecord, IisRow, DEFAULT_PRO_FPR_LIMIT};
use crate::network::{AdClickNet, ModelConfig, BatchSource, ModelInput, TrainBatch, TrainConfig, TrainSample};
use crate::posfar::{compute_posfar, match_reference, PosFarTensor};
use crate::segmode::{seg_forward, DefectTypeSet};
use crate::synthetic::paste_random_anomaly;

/// Everything needed to turn an image, a prompt and clicks into a mask.
pub struct Engine {
    pub model: AdClickNet,
    pub extractor: Box<dyn FeatureExtractor>,
    pub text_encoder: Box<dyn TextEncoder>,
    pub banks: BTreeMap<String, ReferenceBank>,
    pub corpus: PromptCorpus,
    pub prompt_seed: u64,
}

impl Engine {
    pub fn new(
        model: AdClickNet,
        extractor: Box<dyn FeatureExtractor>,
        text_encoder: Box<dyn TextEncoder>,
        banks: BTreeMap<String, ReferenceBank>,
        corpus: PromptCorpus,
        prompt_seed: u64,
    ) -> Result<Self> {
        let cfg = model.config();
        let checks = [
            ("extractor dim", cfg.posfar_dim, extractor.dim()),
            ("extractor stride", cfg.pcf_stride, extractor.stride()),
            ("extractor resolution", cfg.resolution, extractor.resolution()),
            ("text encoder dim", cfg.text_dim, text_encoder.dim()),
        ];
        for (what, expected, actual) in checks {
            if expected != actual {
                return Err(Error::DimensionMismatch { what, expected, actual });
            }
        }
        let fp = extractor.fingerprint();
        for (cat, bank) in &banks {
            if bank.extractor_fingerprint != fp {
                return Err(Error::InvalidArgument(format!(
                    "bank `{cat}` was built by `{}`, engine extractor is `{fp}`",
                    bank.extractor_fingerprint
                )));
            }
        }
        Ok(Self {
            model,
            extractor,
            text_encoder,
            banks,
            corpus,
            prompt_seed,
        })
    }

    pub fn resolution(&self) -> usize {
        self.model.config().resolution
    }

    pub fn posfar(&self, category: &str, image: &Array3<f32>) -> Result<PosFarTensor> {
        let bank = self
            .banks
            .get(category)
            .ok_or_else(|| Error::InvalidArgument(format!("no reference bank for category `{category}`")))?;
        posfar_against(self.extractor.as_ref(), bank, image, self.model.config().window_radius, self.model.config().theta)
    }

    /// Frozen text embedding of the phrase chosen for `key`; `None` when the
    /// model runs without language.
    pub fn text_embedding(&self, key: &PromptKey, salt: &str) -> Result<Option<Array2<f32>>> {
        if !self.model.config().use_language {
            return Ok(None);
        }
        let phrase = select_phrase(&self.corpus, key, self.prompt_seed, salt)?;
        Ok(Some(self.text_encoder.embed(phrase)?))
    }

    pub fn predict(
        &self,
        image: &Array3<f32>,
        posfar: &PosFarTensor,
        text: Option<&Array2<f32>>,
        clicks: &[Click],
        previous: &AnomalyMask,
    ) -> Result<AnomalyMask> {
        let res = self.resolution();
        let enc = encode_clicks(clicks, previous, (res, res), self.model.config().click_radius)?;
        let input = ModelInput::from_arrays(image, &enc, posfar, text, self.model.dtype())?;
        self.model.predict_mask(&input)
    }
}

/// Serializable recipe for the frozen parts of an engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSpec {
    pub model: ModelConfig,
    pub extractor: ConvExtractorConfig,
    pub text: HashedTextEncoder,
    pub coreset_fraction: f64,
    pub prompt_seed: u64,
}

impl EngineSpec {
    /// 64x64 setup used by the toy pipeline and the tests.
    pub fn tiny() -> Self {
        let model = ModelConfig::tiny();
        Self {
            extractor: ConvExtractorConfig {
                resolution: model.resolution,
                stride: model.pcf_stride,
                mid_channels: model.posfar_dim / 2,
                deep_channels: model.posfar_dim / 2,
                seed: 0,
            },
            text: HashedTextEncoder {
                dim: model.text_dim,
                ..HashedTextEncoder::default()
            },
            model,
            coreset_fraction: 1.0,
            prompt_seed: 0,
        }
    }

    pub fn build_extractor(&self) -> Result<ConvExtractor> {
        ConvExtractor::new(self.extractor.clone())
    }

    /// Wires a model (fresh or loaded) to the frozen components.
    pub fn assemble(
        &self,
        model: AdClickNet,
        banks: BTreeMap<String, ReferenceBank>,
        corpus: PromptCorpus,
    ) -> Result<Engine> {
        Engine::new(
            model,
            Box::new(self.build_extractor()?),
            Box::new(self.text.clone()),
            banks,
            corpus,
            self.prompt_seed,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn posfar_against(
    extractor: &dyn FeatureExtractor,
    bank: &ReferenceBank,
    image: &Array3<f32>,
    window_radius: usize,
    theta: f32,
) -> Result<PosFarTensor> {
    let pcf = extractor.extract(image)?;
    let matched = match_reference(&pcf, bank, window_radius)?;
    compute_posfar(&pcf, &matched, theta)
}

/// Builds one reference bank per category from `<root>/<category>/train/good`.
pub fn build_banks(
    root: &Path,
    layout: Layout,
    categories: &[String],
    extractor: &dyn FeatureExtractor,
    coreset_fraction: f64,
    seed: u64,
) -> Result<BTreeMap<String, ReferenceBank>> {
    let mut banks = BTreeMap::new();
    for category in categories {
        let index = load_dataset(root, layout, category, Split::Train)?.with_resolution(extractor.resolution());
        banks.insert(category.clone(), build_reference_bank(&index, extractor, coreset_fraction, seed)?);
    }
    Ok(banks)
}

/// A test image with everything the network needs precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub category: String,
    pub defect_type: String,
    pub image: Array3<f32>,
    pub gt: Array2<bool>,
    pub posfar: PosFarTensor,
    /// Prompt key for defective samples.
    pub key: Option<PromptKey>,
}

impl PreparedSample {
    pub fn is_anomalous(&self) -> bool {
        self.gt.iter().any(|&v| v)
    }
}

/// Loads, normalises and precomputes PosFAR for the samples of `index`.
pub fn prepare_samples(engine: &Engine, index: &DatasetIndex, defective_only: bool) -> Result<Vec<PreparedSample>> {
    let index = index.clone().with_resolution(engine.resolution());
    let mut out = Vec::new();
    for s in &index.samples {
        if defective_only && s.is_good() {
            continue;
        }
        let image = normalize_rgb(&index.load_image(s)?);
        let gt = index.load_mask(s)?;
        let key = if s.is_good() {
            None
        } else {
            Some(engine.corpus.resolve(&index.category, &s.defect_type)?)
        };
        out.push(PreparedSample {
            id: format!("{}/{}", index.category, s.id()),
            category: index.category.clone(),
            defect_type: s.defect_type.clone(),
            posfar: engine.posfar(&index.category, &image)?,
            image,
            gt,
            key,
        });
    }
    Ok(out)
}

/// Click model bound to one prepared sample.
pub struct SampleClickModel<'a> {
    engine: &'a Engine,
    sample: &'a PreparedSample,
    text: Option<Array2<f32>>,
}

impl<'a> SampleClickModel<'a> {
    pub fn new(engine: &'a Engine, sample: &'a PreparedSample) -> Result<Self> {
        let text = match &sample.key {
            Some(k) => engine.text_embedding(k, &sample.id)?,
            None => None,
        };
        Ok(Self { engine, sample, text })
    }
}

impl ClickModel for SampleClickModel<'_> {
    fn predict(&self, clicks: &[Click], previous: &AnomalyMask) -> Result<AnomalyMask> {
        self.engine
            .predict(&self.sample.image, &self.sample.posfar, self.text.as_ref(), clicks, previous)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IisProtocol {
    pub noc_target: f64,
    pub cap: usize,
    pub fpr_limit: f64,
}

impl Default for IisProtocol {
    fn default() -> Self {
        Self {
            noc_target: 0.8,
            cap: crate::clicks::DEFAULT_NOC_CAP,
            fpr_limit: DEFAULT_PRO_FPR_LIMIT,
        }
    }
}

/// Simulated-annotator evaluation over defective samples: scores at each
/// click budget plus NoC.
pub fn evaluate_iis(
    engine: &Engine,
    name: &str,
    samples: &[PreparedSample],
    budgets: &[usize],
    protocol: &IisProtocol,
) -> Result<(IisRow, Vec<ProtocolOutcome>)> {
    let defective: Vec<&PreparedSample> = samples.iter().filter(|s| s.is_anomalous()).collect();
    if defective.is_empty() {
        return Err(Error::NoRegion);
    }
    let max_clicks = budgets.iter().copied().max().unwrap_or(1).max(protocol.cap);
    let mut outcomes = Vec::with_capacity(defective.len());
    for s in &defective {
        let model = SampleClickModel::new(engine, s)?;
        outcomes.push(run_click_protocol(&model, s.gt.view(), max_clicks, protocol.noc_target)?);
    }
    let gts: Vec<Array2<bool>> = defective.iter().map(|s| s.gt.clone()).collect();
    let threshold = engine.model.config().threshold;
    let mut per_budget = Vec::new();
    for &k in budgets {
        if k == 0 {
            return Err(Error::InvalidArgument("click budgets must be positive".into()));
        }
        let maps: Vec<Array2<f32>> = outcomes.iter().map(|o| o.masks[k - 1].scores.clone()).collect();
        per_budget.push((k, iis_scores(&maps, &gts, threshold, protocol.fpr_limit)?));
    }
    let traces: Vec<Vec<f64>> = outcomes.iter().map(|o| o.ious[..protocol.cap.min(o.ious.len())].to_vec()).collect();
    let noc = aggregate_noc(&traces, protocol.noc_target, protocol.cap)?;
    Ok((
        IisRow {
            name: name.to_string(),
            per_budget,
            noc,
            noc_target: protocol.noc_target,
        },
        outcomes,
    ))
}

/// Defect types used for automatic inference on one category: all corpus
/// keys of the category, or a single placeholder when language is off.
pub fn defect_types_for(engine: &Engine, category: &str) -> Result<DefectTypeSet> {
    let keys = engine.corpus.keys_for_object(category);
    if keys.is_empty() && !engine.model.config().use_language {
        return DefectTypeSet::new(vec![PromptKey::new(category, "anomaly")]);
    }
    DefectTypeSet::new(keys)
}

/// Automatic detection over good and defective samples.
pub fn evaluate_ad(engine: &Engine, name: &str, samples: &[PreparedSample], fpr_limit: f64) -> Result<(AdRow, Vec<EvalRecord>)> {
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let types = defect_types_for(engine, &s.category)?;
        let set = seg_forward(engine, &s.image, &s.posfar, &types, &s.id, &[])?;
        records.push(EvalRecord {
            score_map: set.aggregate,
            gt_mask: s.gt.clone(),
            image_label: s.is_anomalous(),
            image_score: set.image_score as f64,
            iou_trace: Vec::new(),
        });
    }
    let scores = ad_scores(&records, fpr_limit)?;
    Ok((
        AdRow {
            name: name.to_string(),
            scores,
        },
        records,
    ))
}

fn target_tensor(gt: &Array2<bool>) -> Result<Tensor> {
    let (h, w) = gt.dim();
    let v: Vec<f32> = gt.iter().map(|&b| b as u8 as f32).collect();
    Ok(Tensor::from_vec(v, (1, 1, h, w), &Device::Cpu)?)
}

fn array_tensor(a: &Array2<f32>) -> Result<Tensor> {
    Ok(Tensor::from_vec(a.iter().copied().collect::<Vec<_>>(), a.dim(), &Device::Cpu)?)
}

fn random_phrase<'c, R: Rng>(corpus: &'c PromptCorpus, key: &PromptKey, rng: &mut R) -> Result<&'c str> {
    let phrases = corpus.phrases(key)?;
    Ok(&phrases[rng.random_range(0..phrases.len())])
}

/// Pairs of phrases from a few prompt groups for the contrastive term.
fn contrastive_phrases<R: Rng>(
    corpus: &PromptCorpus,
    encoder: &dyn TextEncoder,
    groups: usize,
    rng: &mut R,
) -> Result<Vec<(Tensor, usize)>> {
    let mut keys: Vec<&PromptKey> = corpus.entries.keys().collect();
    keys.shuffle(rng);
    let mut out = Vec::new();
    for (g, key) in keys.into_iter().take(groups).enumerate() {
        for _ in 0..2 {
            let v = encoder.embed(random_phrase(corpus, key, rng)?)?;
            out.push((array_tensor(&v)?, g));
        }
    }
    Ok(out)
}

/// Iterative-click training batches: a first positive click inside the
/// anomaly, then up to `max_prev_clicks` clicks simulated on the current
/// model's own predictions. The supervised step sees all clicks and the
/// last prediction as previous mask.
pub struct ClickTrainingSource<'a> {
    samples: Vec<PreparedSample>,
    text_encoder: &'a dyn TextEncoder,
    corpus: &'a PromptCorpus,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
}

impl<'a> ClickTrainingSource<'a> {
    pub fn new(engine: &'a Engine, samples: Vec<PreparedSample>, cfg: TrainConfig) -> Result<Self> {
        let samples: Vec<PreparedSample> = samples.into_iter().filter(|s| s.is_anomalous()).collect();
        if samples.is_empty() {
            return Err(Error::InvalidArgument("training needs samples with anomalies".into()));
        }
        Ok(Self {
            samples,
            text_encoder: engine.text_encoder.as_ref(),
            corpus: &engine.corpus,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
        })
    }

    fn text_for(&mut self, model: &AdClickNet, key: Option<&PromptKey>) -> Result<Option<Array2<f32>>> {
        match key {
            Some(k) if model.config().use_language => {
                let phrase = random_phrase(self.corpus, k, &mut self.rng)?;
                Ok(Some(self.text_encoder.embed(phrase)?))
            }
            _ => Ok(None),
        }
    }

    fn make_sample(&mut self, model: &AdClickNet, i: usize) -> Result<TrainSample> {
        let s = self.samples[i].clone();
        let res = model.config().resolution;
        let radius = model.config().click_radius;
        let text = self.text_for(model, s.key.as_ref())?;
        let first = sample_first_click(s.gt.view(), &mut self.rng).ok_or(Error::NoRegion)?;
        let mut clicks = vec![first];
        let mut prev = AnomalyMask::empty(res, res);
        let extra = self.rng.random_range(0..=self.cfg.max_prev_clicks);
        for t in 0..extra {
            let enc = encode_clicks(&clicks, &prev, (res, res), radius)?;
            let input = ModelInput::from_arrays(&s.image, &enc, &s.posfar, text.as_ref(), model.dtype())?;
            let pred = model.predict_mask(&input)?;
            match sample_next_click(&pred, s.gt.view(), t + 1, self.cfg.jitter, &mut self.rng)? {
                Some(c) => {
                    prev = pred;
                    clicks.push(c);
                }
                None => break,
            }
        }
        let enc = encode_clicks(&clicks, &prev, (res, res), radius)?;
        Ok(TrainSample {
            input: ModelInput::from_arrays(&s.image, &enc, &s.posfar, text.as_ref(), model.dtype())?,
            target: target_tensor(&s.gt)?,
        })
    }
}

impl BatchSource for ClickTrainingSource<'_> {
    fn next_batch(&mut self, model: &AdClickNet, _step: usize) -> Result<TrainBatch> {
        let mut samples = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let i = self.rng.random_range(0..self.samples.len());
            samples.push(self.make_sample(model, i)?);
        }
        let phrases = if model.config().use_language && self.cfg.lambda > 0.0 {
            contrastive_phrases(self.corpus, self.text_encoder, 4, &mut self.rng)?
        } else {
            Vec::new()
        };
        Ok(TrainBatch { samples, phrases })
    }
}

/// Deterministic batch for loss tracking: the first `n` defective samples,
/// one centred click each, a fixed phrase.
pub fn fixed_click_batch(engine: &Engine, samples: &[PreparedSample], n: usize) -> Result<TrainBatch> {
    let res = engine.resolution();
    let radius = engine.model.config().click_radius;
    let mut out = TrainBatch::default();
    for s in samples.iter().filter(|s| s.is_anomalous()).take(n) {
        let empty = AnomalyMask::empty(res, res);
        let click = crate::clicks::simulate_next_click(&empty, s.gt.view(), 0)?.ok_or(Error::NoRegion)?;
        let enc = encode_clicks(&[click], &empty, (res, res), radius)?;
        let text = match &s.key {
            Some(k) => engine.text_embedding(k, &s.id)?,
            None => None,
        };
        out.samples.push(TrainSample {
            input: ModelInput::from_arrays(&s.image, &enc, &s.posfar, text.as_ref(), engine.model.dtype())?,
            target: target_tensor(&s.gt)?,
        });
    }
    if out.samples.is_empty() {
        return Err(Error::NoRegion);
    }
    Ok(out)
}

/// Where segmentation-mode training gets anomalous pixels from.
#[derive(Debug, Clone, PartialEq)]
pub enum SegSupervision {
    /// Random tinted blobs pasted onto defect-free training images.
    Synthetic { per_category: usize },
    /// Masks exported from annotation sessions (PNG plus JSON sidecar).
    PseudoLabels(PathBuf),
}

#[derive(Debug, Clone)]
struct SegItem {
    category: String,
    image: Array3<f32>,
    gt: Array2<bool>,
    posfar: PosFarTensor,
    key: Option<PromptKey>,
}

/// Batches for segmentation-mode training: no clicks, one prompt per sample.
pub struct SegTrainingSource<'a> {
    items: Vec<SegItem>,
    text_encoder: &'a dyn TextEncoder,
    corpus: &'a PromptCorpus,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
}

/// Sidecar written next to an exported mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSidecar {
    pub session_id: String,
    pub image_id: String,
    pub category: String,
    pub image_path: PathBuf,
    pub prompt: PromptKey,
    pub phrase: Option<String>,
    pub clicks: Vec<Click>,
    pub threshold: f32,
    pub model_fingerprint: String,
    pub mask_file: String,
}

impl<'a> SegTrainingSource<'a> {
    /// Synthetic mode computes residuals against a bank built from the other
    /// half of the training images, so pasted images never match themselves.
    pub fn new(
        engine: &'a Engine,
        root: &Path,
        layout: Layout,
        categories: &[String],
        supervision: &SegSupervision,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e9);
        let res = engine.resolution();
        let cfg_m = engine.model.config();
        let mut items = Vec::new();
        match supervision {
            SegSupervision::Synthetic { per_category } => {
                for category in categories {
                    let index = load_dataset(root, layout, category, Split::Train)?.with_resolution(res);
                    if index.samples.len() < 2 {
                        return Err(Error::InvalidArgument(format!(
                            "category `{category}` needs at least two training images"
                        )));
                    }
                    let half = index.samples.len() / 2;
                    let folds = [index.samples[..half].to_vec(), index.samples[half..].to_vec()];
                    let banks = folds
                        .iter()
                        .map(|f| {
                            let idx = DatasetIndex {
                                samples: f.clone(),
                                ..index.clone()
                            };
                            build_reference_bank(&idx, engine.extractor.as_ref(), 1.0, cfg.seed)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let keys = engine.corpus.keys_for_object(category);
                    for n in 0..*per_category {
                        let fold = n % 2;
                        let pick = &folds[fold][rng.random_range(0..folds[fold].len())];
                        let mut img: RgbImage = index.load_image(pick)?;
                        let gt = if rng.random_bool(0.8) {
                            paste_random_anomaly(&mut img, &mut rng)
                        } else {
                            Array2::from_elem((res, res), false)
                        };
                        let image = normalize_rgb(&img);
                        let posfar = posfar_against(
                            engine.extractor.as_ref(),
                            &banks[1 - fold],
                            &image,
                            cfg_m.window_radius,
                            cfg_m.theta,
                        )?;
                        let key = (!keys.is_empty()).then(|| keys[rng.random_range(0..keys.len())].clone());
                        items.push(SegItem {
                            category: category.clone(),
                            image,
                            gt,
                            posfar,
                            key,
                        });
                    }
                }
            }
            SegSupervision::PseudoLabels(dir) => {
                let mut entries: Vec<PathBuf> = fs::read_dir(dir)
                    .map_err(|e| Error::io(dir, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "json"))
                    .collect();
                entries.sort();
                for p in entries {
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    let side: ExportSidecar = serde_json::from_str(&text)?;
                    let mask_path = p.with_file_name(&side.mask_file);
                    let gt = crate::imgproc::resize_nearest_bool(read_mask_png(&mask_path)?.view(), res, res);
                    let image = normalize_rgb(&crate::datasets::load_rgb(&side.image_path, res)?);
                    let posfar = engine.posfar(&side.category, &image)?;
                    items.push(SegItem {
                        category: side.category.clone(),
                        image,
                        gt,
                        posfar,
                        key: Some(side.prompt.clone()),
                    });
                }
            }
        }
        if items.is_empty() {
            return Err(Error::InvalidArgument("no segmentation training items".into()));
        }
        log::info!("segmentation training pool: {} items", items.len());
        Ok(Self {
            items,
            text_encoder: engine.text_encoder.as_ref(),
            corpus: &engine.corpus,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Categories present in the pool.
    pub fn categories(&self) -> Vec<String> {
        let mut c: Vec<String> = self.items.iter().map(|i| i.category.clone()).collect();
        c.dedup();
        c
    }
}

impl BatchSource for SegTrainingSource<'_> {
    fn next_batch(&mut self, model: &AdClickNet, _step: usize) -> Result<TrainBatch> {
        let res = model.config().resolution;
        let mut samples = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let item = self.items[self.rng.random_range(0..self.items.len())].clone();
            let text = match (&item.key, model.config().use_language) {
                (Some(k), true) => Some(self.text_encoder.embed(random_phrase(self.corpus, k, &mut self.rng)?)?),
                _ => None,
            };
            let enc = ClickEncoding::empty(res, res);
            samples.push(TrainSample {
                input: ModelInput::from_arrays(&item.image, &enc, &item.posfar, text.as_ref(), model.dtype())?,
                target: target_tensor(&item.gt)?,
            });
        }
        let phrases = if model.config().use_language && self.cfg.lambda > 0.0 {
            contrastive_phrases(self.corpus, self.text_encoder, 4, &mut self.rng)?
        } else {
            Vec::new()
        };
        Ok(TrainBatch { samples, phrases })
    }
}

/// Previous-mask channel helper for replaying a stored click log.
pub fn replay_clicks(
    engine: &Engine,
    image: &Array3<f32>,
    posfar: &PosFarTensor,
    text: Option<&Array2<f32>>,
    clicks: &[Click],
) -> Result<AnomalyMask> {
    let res = engine.resolution();
    let mut mask = AnomalyMask::empty(res, res);
    for t in 0..clicks.len() {
        mask = engine.predict(image, posfar, text, &clicks[..=t], &mask)?;
    }
    Ok(mask)
}

/// `gt` as a float map, handy for overlays and oracles.
pub fn gt_scores(gt: &Array2<bool>) -> Array2<f32> {
    bool_to_f32(gt.view())
}

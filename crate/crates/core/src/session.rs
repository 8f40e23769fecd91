//! Annotation sessions: per-image click histories on top of a shared engine.
//!
//! Coordinates are pixels of the image resized to the model resolution.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::clicks::{AnomalyMask, Click, Polarity};
use crate::datasets::{load_dataset, normalize_rgb, DatasetIndex, Layout, PromptKey, Split};
use crate::error::{Error, Result};
use crate::imgproc::{encode_png_bytes, write_mask_png};
use crate::language::select_phrase;
use crate::metrics::iou;
use crate::pipeline::{Engine, ExportSidecar};
use crate::posfar::PosFarTensor;

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);

/// One annotatable image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    /// `<category>/<defect_type>/<stem>`.
    pub image_id: String,
    pub category: String,
    pub defect_type: String,
    pub path: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct ImageCatalog {
    entries: BTreeMap<String, ImageEntry>,
}

impl ImageCatalog {
    pub fn from_indices(indices: &[DatasetIndex]) -> Self {
        let mut entries = BTreeMap::new();
        for index in indices {
            for s in &index.samples {
                let image_id = format!("{}/{}", index.category, s.id());
                entries.insert(
                    image_id.clone(),
                    ImageEntry {
                        image_id,
                        category: index.category.clone(),
                        defect_type: s.defect_type.clone(),
                        path: s.image_path.clone(),
                        mask_path: s.mask_path.clone(),
                    },
                );
            }
        }
        Self { entries }
    }

    /// Test images of every listed category.
    pub fn from_dataset(root: &Path, layout: Layout, categories: &[String]) -> Result<Self> {
        let indices = categories
            .iter()
            .map(|c| load_dataset(root, layout, c, Split::Test))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_indices(&indices))
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageEntry> {
        self.entries.get(image_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ImageEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A corpus key, or a free-text phrase encoded as typed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptChoice {
    Key { object: String, defect: String },
    Text { text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Exported,
    Abandoned,
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    /// Every export lands below this directory.
    pub output_root: PathBuf,
    pub idle_timeout: Duration,
    /// Report IoU against ground truth after each click when available.
    pub evaluation_mode: bool,
}

impl SessionConfig {
    pub fn new(output_root: impl Into<PathBuf>) -> Self {
        Self {
            output_root: output_root.into(),
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
            evaluation_mode: false,
        }
    }
}

pub struct SessionState {
    pub session_id: String,
    pub image_id: String,
    pub category: String,
    pub prompt: PromptKey,
    /// Phrase actually encoded, `None` when the model ignores language.
    pub phrase: Option<String>,
    pub clicks: Vec<Click>,
    pub masks: Vec<AnomalyMask>,
    pub status: SessionStatus,
    pub export_path: Option<PathBuf>,
    last_used: Instant,
    image: Array3<f32>,
    posfar: PosFarTensor,
    text: Option<Array2<f32>>,
    gt: Option<Array2<bool>>,
}

impl SessionState {
    pub fn current_mask(&self, resolution: usize) -> AnomalyMask {
        self.masks
            .last()
            .cloned()
            .unwrap_or_else(|| AnomalyMask::empty(resolution, resolution))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub image_id: String,
    pub category: String,
    pub prompt: PromptKey,
    pub phrase: Option<String>,
    pub width: usize,
    pub height: usize,
    pub clicks: Vec<Click>,
    pub status: SessionStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskView {
    pub session_id: String,
    pub width: usize,
    pub height: usize,
    pub threshold: f32,
    pub n_clicks: usize,
    /// Binarised mask as 8-bit grayscale PNG, base64.
    pub mask_png: String,
    pub foreground_pixels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
}

/// In-memory session registry. Each session has its own lock, so clicks on
/// one session are serialized while different sessions proceed in parallel.
pub struct SessionManager {
    engine: Option<Arc<Engine>>,
    catalog: ImageCatalog,
    config: SessionConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionState>>>>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    // a panic inside one request must not wedge the whole service
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl SessionManager {
    pub fn new(engine: Option<Arc<Engine>>, catalog: ImageCatalog, config: SessionConfig) -> Self {
        Self {
            engine,
            catalog,
            config,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn catalog(&self) -> &ImageCatalog {
        &self.catalog
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    fn engine(&self) -> Result<&Engine> {
        self.engine.as_deref().ok_or(Error::ModelNotLoaded)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<SessionState>>> {
        lock(&self.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    pub fn list_images(&self) -> Vec<ImageEntry> {
        self.catalog.entries().cloned().collect()
    }

    pub fn len(&self) -> usize {
        lock(&self.sessions).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn resolve_prompt(
        &self,
        engine: &Engine,
        category: &str,
        image_id: &str,
        choice: &PromptChoice,
    ) -> Result<(PromptKey, Option<String>, Option<Array2<f32>>)> {
        let (key, phrase) = match choice {
            PromptChoice::Key { object, defect } => {
                let key = PromptKey::new(object.clone(), defect.clone());
                // must exist, even when language is off, so typos surface early
                let phrase = select_phrase(&engine.corpus, &key, engine.prompt_seed, image_id)?.to_string();
                (key, phrase)
            }
            PromptChoice::Text { text } => {
                if text.trim().is_empty() {
                    return Err(Error::UnknownPrompt("empty free-text prompt".into()));
                }
                (PromptKey::new(category, "custom"), text.clone())
            }
        };
        if !engine.model.config().use_language {
            return Ok((key, None, None));
        }
        let emb = engine.text_encoder.embed(&phrase)?;
        Ok((key, Some(phrase), Some(emb)))
    }

    /// Loads the image, computes and caches PosFAR and the prompt feature.
    pub fn open_session(&self, image_id: &str, category: &str, prompt: &PromptChoice) -> Result<SessionSummary> {
        let engine = self.engine()?;
        let entry = self
            .catalog
            .get(image_id)
            .filter(|e| e.category == category)
            .ok_or_else(|| Error::UnknownImage(format!("{image_id} (category {category})")))?;
        let res = engine.resolution();
        let (key, phrase, text) = self.resolve_prompt(engine, category, image_id, prompt)?;
        let image = normalize_rgb(&crate::datasets::load_rgb(&entry.path, res)?);
        let posfar = engine.posfar(category, &image)?;
        let gt = match (&entry.mask_path, self.config.evaluation_mode) {
            (Some(p), true) => Some(crate::datasets::load_mask(p, res)?),
            _ => None,
        };
        let state = SessionState {
            session_id: uuid::Uuid::new_v4().simple().to_string(),
            image_id: image_id.to_string(),
            category: category.to_string(),
            prompt: key,
            phrase,
            clicks: Vec::new(),
            masks: Vec::new(),
            status: SessionStatus::Active,
            export_path: None,
            last_used: Instant::now(),
            image,
            posfar,
            text,
            gt,
        };
        let summary = summarize(&state, res);
        lock(&self.sessions).insert(state.session_id.clone(), Arc::new(Mutex::new(state)));
        Ok(summary)
    }

    pub fn summary(&self, session_id: &str) -> Result<SessionSummary> {
        let res = self.engine()?.resolution();
        let s = self.session(session_id)?;
        let s = lock(&s);
        Ok(summarize(&s, res))
    }

    /// Runs one refinement step with all clicks so far.
    pub fn submit_click(&self, session_id: &str, x: usize, y: usize, polarity: Polarity) -> Result<MaskView> {
        let engine = self.engine()?;
        let res = engine.resolution();
        let s = self.session(session_id)?;
        let mut s = lock(&s);
        ensure_active(&s)?;
        let click = Click::new(x, y, polarity, s.clicks.len());
        click.check_bounds(res, res)?;
        let prev = s.current_mask(res);
        let mut clicks = s.clicks.clone();
        clicks.push(click);
        let mask = engine.predict(&s.image, &s.posfar, s.text.as_ref(), &clicks, &prev)?;
        s.clicks = clicks;
        s.masks.push(mask);
        s.last_used = Instant::now();
        mask_view(&s, res)
    }

    /// Drops the last click and returns the mask before it.
    pub fn undo_click(&self, session_id: &str) -> Result<MaskView> {
        let res = self.engine()?.resolution();
        let s = self.session(session_id)?;
        let mut s = lock(&s);
        ensure_active(&s)?;
        if s.clicks.pop().is_none() {
            return Err(Error::ZeroClicks);
        }
        s.masks.pop();
        s.last_used = Instant::now();
        mask_view(&s, res)
    }

    /// Switches the prompt and re-runs the click history under it, so the
    /// stored masks always belong to a single phrase.
    pub fn set_prompt(&self, session_id: &str, prompt: &PromptChoice) -> Result<MaskView> {
        let engine = self.engine()?;
        let res = engine.resolution();
        let s = self.session(session_id)?;
        let mut s = lock(&s);
        ensure_active(&s)?;
        let (key, phrase, text) = self.resolve_prompt(engine, &s.category, &s.image_id, prompt)?;
        let mut masks = Vec::with_capacity(s.clicks.len());
        let mut prev = AnomalyMask::empty(res, res);
        for t in 0..s.clicks.len() {
            prev = engine.predict(&s.image, &s.posfar, text.as_ref(), &s.clicks[..=t], &prev)?;
            masks.push(prev.clone());
        }
        s.prompt = key;
        s.phrase = phrase;
        s.text = text;
        s.masks = masks;
        s.last_used = Instant::now();
        mask_view(&s, res)
    }

    pub fn get_mask(&self, session_id: &str) -> Result<MaskView> {
        let res = self.engine()?.resolution();
        let s = self.session(session_id)?;
        let mut s = lock(&s);
        s.last_used = Instant::now();
        mask_view(&s, res)
    }

    /// Base64 PNG of the image as the model sees it.
    pub fn image_png(&self, image_id: &str) -> Result<String> {
        let res = self.engine()?.resolution();
        let entry = self
            .catalog
            .get(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))?;
        let img = crate::datasets::load_rgb(&entry.path, res)?;
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(B64.encode(buf.into_inner()))
    }

    /// Writes the binarised mask and a JSON sidecar under the output root.
    /// A second call returns the first path without rewriting.
    pub fn export(&self, session_id: &str) -> Result<PathBuf> {
        let engine = self.engine()?;
        let res = engine.resolution();
        let s = self.session(session_id)?;
        let mut s = lock(&s);
        if let (SessionStatus::Exported, Some(p)) = (s.status, &s.export_path) {
            return Ok(p.clone());
        }
        ensure_active(&s)?;
        if s.clicks.is_empty() {
            return Err(Error::ZeroClicks);
        }
        let dir = self.config.output_root.join("labels");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stem = format!("{}__{}", s.image_id.replace('/', "_"), &s.session_id[..8]);
        let mask_file = format!("{stem}.png");
        let mask_path = dir.join(&mask_file);
        let mask = s.current_mask(res);
        write_mask_png(mask.binarize().view(), &mask_path)?;
        let entry = self
            .catalog
            .get(&s.image_id)
            .ok_or_else(|| Error::UnknownImage(s.image_id.clone()))?;
        let sidecar = ExportSidecar {
            session_id: s.session_id.clone(),
            image_id: s.image_id.clone(),
            category: s.category.clone(),
            image_path: entry.path.clone(),
            prompt: s.prompt.clone(),
            phrase: s.phrase.clone(),
            clicks: s.clicks.clone(),
            threshold: mask.threshold,
            model_fingerprint: engine.model.fingerprint()?,
            mask_file,
        };
        let side_path = dir.join(format!("{stem}.json"));
        if let Err(e) = fs::write(&side_path, serde_json::to_string_pretty(&sidecar)?) {
            let _ = fs::remove_file(&mask_path);
            return Err(Error::io(&side_path, e));
        }
        s.status = SessionStatus::Exported;
        s.export_path = Some(mask_path.clone());
        s.last_used = Instant::now();
        Ok(mask_path)
    }

    /// Removes sessions idle for longer than the configured timeout.
    pub fn evict_idle(&self, now: Instant) -> usize {
        let timeout = self.config.idle_timeout;
        let mut sessions = lock(&self.sessions);
        let before = sessions.len();
        sessions.retain(|_, s| {
            let mut s = lock(s);
            let keep = now.saturating_duration_since(s.last_used) <= timeout;
            if !keep && s.status == SessionStatus::Active {
                s.status = SessionStatus::Abandoned;
            }
            keep
        });
        before - sessions.len()
    }
}

fn ensure_active(s: &SessionState) -> Result<()> {
    match s.status {
        SessionStatus::Active => Ok(()),
        SessionStatus::Exported => Err(Error::SessionExported(s.session_id.clone())),
        SessionStatus::Abandoned => Err(Error::UnknownSession(s.session_id.clone())),
    }
}

fn summarize(s: &SessionState, res: usize) -> SessionSummary {
    SessionSummary {
        session_id: s.session_id.clone(),
        image_id: s.image_id.clone(),
        category: s.category.clone(),
        prompt: s.prompt.clone(),
        phrase: s.phrase.clone(),
        width: res,
        height: res,
        clicks: s.clicks.clone(),
        status: s.status,
    }
}

fn mask_view(s: &SessionState, res: usize) -> Result<MaskView> {
    let mask = s.current_mask(res);
    let bin = mask.binarize();
    let iou = match (&s.gt, s.clicks.is_empty()) {
        (Some(gt), false) if gt.iter().any(|&v| v) => Some(iou(bin.view(), gt.view())?),
        _ => None,
    };
    Ok(MaskView {
        session_id: s.session_id.clone(),
        width: res,
        height: res,
        threshold: mask.threshold,
        n_clicks: s.clicks.len(),
        mask_png: B64.encode(encode_png_bytes(bin.view())?),
        foreground_pixels: bin.iter().filter(|&&v| v).count(),
        iou,
    })
}

/// Decodes a `mask_png` field back into a binary mask.
pub fn decode_mask_png(b64: &str) -> Result<Array2<bool>> {
    let bytes = B64.decode(b64).map_err(|e| Error::Format(format!("bad base64: {e}")))?;
    let img = image::load_from_memory(&bytes)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32).0[0] >= 128
    }))
}

/// Recomputes an exported mask from its sidecar; used to audit labels.
pub fn replay_export(engine: &Engine, sidecar: &ExportSidecar) -> Result<Array2<bool>> {
    let res = engine.resolution();
    let image = normalize_rgb(&crate::datasets::load_rgb(&sidecar.image_path, res)?);
    let posfar = engine.posfar(&sidecar.category, &image)?;
    let text = match (&sidecar.phrase, engine.model.config().use_language) {
        (Some(p), true) => Some(engine.text_encoder.embed(p)?),
        _ => None,
    };
    let mask = crate::pipeline::replay_clicks(engine, &image, &posfar, text.as_ref(), &sidecar.clicks)?;
    Ok(mask.binarize())
}

pub fn read_sidecar(path: &Path) -> Result<ExportSidecar> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

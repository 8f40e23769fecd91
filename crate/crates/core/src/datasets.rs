//! Dataset indexing (MVTec-AD and KolektorSDD2 layouts), the defect-free
//! reference bank and the prompt corpus.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::imgproc::{read_mask_png, resize_nearest_bool};

pub const GOOD: &str = "good";
pub const DEFAULT_RESOLUTION: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Mvtec,
    Ksdd2,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvtec" => Ok(Layout::Mvtec),
            "ksdd2" => Ok(Layout::Ksdd2),
            other => Err(Error::InvalidArgument(format!("unknown layout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub defect_type: String,
}

impl Sample {
    pub fn is_good(&self) -> bool {
        self.defect_type == GOOD
    }

    /// Stable identifier: `<defect_type>/<file stem>`.
    pub fn id(&self) -> String {
        let stem = self
            .image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("{}/{}", self.defect_type, stem)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub category: String,
    pub split: Split,
    /// Square side every image is resized to.
    pub resolution: usize,
    pub samples: Vec<Sample>,
}

impl DatasetIndex {
    /// Sample count per defect type.
    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            *out.entry(s.defect_type.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn defect_types(&self) -> Vec<String> {
        self.counts().into_keys().filter(|d| d != GOOD).collect()
    }

    /// Copy of the index restricted to defect-free samples.
    pub fn good_only(&self) -> DatasetIndex {
        DatasetIndex {
            samples: self.samples.iter().filter(|s| s.is_good()).cloned().collect(),
            ..self.clone()
        }
    }

    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.resolution = resolution;
        self
    }

    pub fn find(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id() == id)
    }

    pub fn load_image(&self, sample: &Sample) -> Result<RgbImage> {
        load_rgb(&sample.image_path, self.resolution)
    }

    /// Ground-truth mask at the index resolution; all-false for good samples.
    pub fn load_mask(&self, sample: &Sample) -> Result<Array2<bool>> {
        match &sample.mask_path {
            Some(p) => load_mask(p, self.resolution),
            None => Ok(Array2::from_elem((self.resolution, self.resolution), false)),
        }
    }
}

pub fn load_rgb(path: &Path, resolution: usize) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    if img.width() as usize == resolution && img.height() as usize == resolution {
        return Ok(img);
    }
    Ok(image::imageops::resize(&img, resolution as u32, resolution as u32, FilterType::Triangle))
}

pub fn load_mask(path: &Path, resolution: usize) -> Result<Array2<bool>> {
    let m = read_mask_png(path)?;
    if m.dim() == (resolution, resolution) {
        return Ok(m);
    }
    Ok(resize_nearest_bool(m.view(), resolution, resolution))
}

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// H x W x 3 image normalised with ImageNet channel statistics.
pub fn normalize_rgb(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, k)| {
        let v = img.get_pixel(c as u32, r as u32)[k] as f32 / 255.0;
        (v - IMAGENET_MEAN[k]) / IMAGENET_STD[k]
    })
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    entries.sort();
    Ok(entries)
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// MVTec categories under `root` (directories holding a `train` folder).
pub fn list_categories(root: &Path) -> Result<Vec<String>> {
    Ok(read_dir_sorted(root)?
        .into_iter()
        .filter(|p| p.join("train").is_dir())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect())
}

pub fn load_dataset(root: &Path, layout: Layout, category: &str, split: Split) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::LayoutMismatch(root.to_path_buf()));
    }
    let index = match layout {
        Layout::Mvtec => load_mvtec(root, category, split)?,
        Layout::Ksdd2 => load_ksdd2(root, split)?,
    };
    log::info!(
        "indexed {} {:?} samples of `{}`: {:?}",
        index.samples.len(),
        split,
        index.category,
        index.counts()
    );
    Ok(index)
}

fn load_mvtec(root: &Path, category: &str, split: Split) -> Result<DatasetIndex> {
    let cat_dir = root.join(category);
    let split_dir = cat_dir.join(split.dir_name());
    if !split_dir.is_dir() {
        let first = read_dir_sorted(root)?.into_iter().next().unwrap_or_else(|| root.to_path_buf());
        return Err(Error::LayoutMismatch(if cat_dir.is_dir() { split_dir } else { first }));
    }
    let mut samples = Vec::new();
    for defect_dir in read_dir_sorted(&split_dir)? {
        if !defect_dir.is_dir() {
            return Err(Error::LayoutMismatch(defect_dir));
        }
        let defect = defect_dir.file_name().unwrap().to_string_lossy().into_owned();
        if split == Split::Train && defect != GOOD {
            return Err(Error::LayoutMismatch(defect_dir));
        }
        for img in read_dir_sorted(&defect_dir)? {
            if !is_png(&img) {
                return Err(Error::LayoutMismatch(img));
            }
            let mask_path = if defect == GOOD {
                None
            } else {
                let stem = img.file_stem().unwrap().to_string_lossy();
                let mask = cat_dir.join("ground_truth").join(&defect).join(format!("{stem}_mask.png"));
                if !mask.is_file() {
                    return Err(Error::MissingMask(img));
                }
                Some(mask)
            };
            samples.push(Sample {
                image_path: img,
                mask_path,
                defect_type: defect.clone(),
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::LayoutMismatch(split_dir));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        category: category.to_string(),
        split,
        resolution: DEFAULT_RESOLUTION,
        samples,
    })
}

/// KolektorSDD2: `<root>/<split>/<id>.png` next to `<id>_GT.png`. Images with
/// an all-zero GT are defect-free.
fn load_ksdd2(root: &Path, split: Split) -> Result<DatasetIndex> {
    let split_dir = root.join(split.dir_name());
    if !split_dir.is_dir() {
        let first = read_dir_sorted(root)?.into_iter().next().unwrap_or_else(|| root.to_path_buf());
        return Err(Error::LayoutMismatch(first));
    }
    let mut samples = Vec::new();
    for p in read_dir_sorted(&split_dir)? {
        if !is_png(&p) {
            return Err(Error::LayoutMismatch(p));
        }
        let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
        if stem.ends_with("_GT") {
            continue;
        }
        let gt = split_dir.join(format!("{stem}_GT.png"));
        if !gt.is_file() {
            return Err(Error::MissingMask(p));
        }
        let defective = read_mask_png(&gt)?.iter().any(|&v| v);
        samples.push(Sample {
            image_path: p,
            mask_path: defective.then_some(gt),
            defect_type: if defective { "defect".into() } else { GOOD.into() },
        });
    }
    if samples.is_empty() {
        return Err(Error::LayoutMismatch(split_dir));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        category: "ksdd2".into(),
        split,
        resolution: DEFAULT_RESOLUTION,
        samples,
    })
}

const BANK_MAGIC: &[u8; 8] = b"ADCKBANK";
const POSFAR_MAGIC: &[u8; 8] = b"ADCKPFAR";
const FORMAT_VERSION: u32 = 1;

/// Position-tagged features of defect-free training images.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBank {
    pub category: String,
    pub dim: usize,
    /// Feature grid (rows, cols).
    pub grid: (usize, usize),
    pub positions: Vec<(u32, u32)>,
    /// Row-major `len() x dim` matrix.
    pub features: Vec<f32>,
    pub extractor_fingerprint: String,
}

impl ReferenceBank {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Format("reference bank is empty".into()));
        }
        if self.features.len() != self.len() * self.dim {
            return Err(Error::Format("feature buffer does not match N x d_f".into()));
        }
        if let Some(p) = self
            .positions
            .iter()
            .find(|(r, c)| *r as usize >= self.grid.0 || *c as usize >= self.grid.1)
        {
            return Err(Error::Format(format!("position {p:?} outside grid {:?}", self.grid)));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let extra = GridFileExtra {
            category: &self.category,
            theta: None,
            matched: None,
        };
        write_grid_file(w, BANK_MAGIC, self.dim, self.grid, &self.extractor_fingerprint, &extra, &self.positions, &self.features)
            .map_err(|e| Error::io("<bank>", e))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let f = read_grid_file(r, BANK_MAGIC)?;
        let bank = ReferenceBank {
            category: f.category,
            dim: f.dim,
            grid: f.grid,
            positions: f.positions,
            features: f.vectors,
            extractor_fingerprint: f.fingerprint,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

pub(crate) struct GridFileExtra<'a> {
    pub category: &'a str,
    pub theta: Option<f32>,
    pub matched: Option<&'a [u32]>,
}

pub(crate) struct GridFile {
    pub dim: usize,
    pub grid: (usize, usize),
    pub fingerprint: String,
    pub category: String,
    pub theta: Option<f32>,
    pub positions: Vec<(u32, u32)>,
    pub matched: Option<Vec<u32>>,
    pub vectors: Vec<f32>,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(fmt_err)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

fn fmt_err(e: std::io::Error) -> Error {
    Error::Format(format!("truncated file: {e}"))
}

/// Header: magic, version, d_f, h_f, w_f, N (all little-endian), extractor
/// fingerprint, category, optional theta; then N (row, col) position tags,
/// optional N matched indices, then N row-major d_f vectors.
#[allow(clippy::too_many_arguments)]
pub(crate) fn write_grid_file<W: Write>(
    w: &mut W,
    magic: &[u8; 8],
    dim: usize,
    grid: (usize, usize),
    fingerprint: &str,
    extra: &GridFileExtra<'_>,
    positions: &[(u32, u32)],
    vectors: &[f32],
) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(dim as u32)?;
    w.write_u32::<LittleEndian>(grid.0 as u32)?;
    w.write_u32::<LittleEndian>(grid.1 as u32)?;
    w.write_u64::<LittleEndian>(positions.len() as u64)?;
    write_str(w, fingerprint)?;
    write_str(w, extra.category)?;
    if magic == POSFAR_MAGIC {
        w.write_f32::<LittleEndian>(extra.theta.unwrap_or(f32::NAN))?;
    }
    for &(r, c) in positions {
        w.write_u32::<LittleEndian>(r)?;
        w.write_u32::<LittleEndian>(c)?;
    }
    if magic == POSFAR_MAGIC {
        for &m in extra.matched.unwrap_or(&[]) {
            w.write_u32::<LittleEndian>(m)?;
        }
    }
    for &v in vectors {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub(crate) fn read_grid_file<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<GridFile> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(fmt_err)?;
    if &m != magic {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(fmt_err)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dim = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
    let h = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
    let w = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
    let n = r.read_u64::<LittleEndian>().map_err(fmt_err)? as usize;
    let fingerprint = read_str(r)?;
    let category = read_str(r)?;
    let theta = if magic == POSFAR_MAGIC {
        Some(r.read_f32::<LittleEndian>().map_err(fmt_err)?)
    } else {
        None
    };
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        let row = r.read_u32::<LittleEndian>().map_err(fmt_err)?;
        let col = r.read_u32::<LittleEndian>().map_err(fmt_err)?;
        positions.push((row, col));
    }
    let matched = if magic == POSFAR_MAGIC {
        let mut v = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut v).map_err(fmt_err)?;
        Some(v)
    } else {
        None
    };
    let mut vectors = vec![0f32; n * dim];
    r.read_f32_into::<LittleEndian>(&mut vectors).map_err(fmt_err)?;
    Ok(GridFile {
        dim,
        grid: (h, w),
        fingerprint,
        category,
        theta,
        positions,
        matched,
        vectors,
    })
}

pub(crate) const POSFAR_FILE_MAGIC: &[u8; 8] = POSFAR_MAGIC;

/// Greedy farthest-point subsampling of the rows of a `n x dim` matrix.
/// The first point is drawn from `seed`; later points maximise the distance
/// to the selected set, lowest index winning ties.
pub fn greedy_coreset(features: &[f32], dim: usize, target: usize, seed: u64) -> Vec<usize> {
    let n = features.len() / dim;
    if target >= n {
        return (0..n).collect();
    }
    let row = |i: usize| &features[i * dim..(i + 1) * dim];
    let dist2 = |a: &[f32], b: &[f32]| -> f64 {
        a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);
    let mut selected = vec![first];
    let mut min_d: Vec<f64> = (0..n).map(|i| dist2(row(i), row(first))).collect();
    while selected.len() < target {
        let mut best = 0;
        for i in 1..n {
            if min_d[i] > min_d[best] {
                best = i;
            }
        }
        selected.push(best);
        let b = row(best).to_vec();
        for (i, d) in min_d.iter_mut().enumerate() {
            *d = d.min(dist2(row(i), &b));
        }
    }
    selected
}

/// Extracts position-tagged features from every training image of `index`
/// and optionally keeps a greedy coreset of them.
pub fn build_reference_bank(
    index: &DatasetIndex,
    extractor: &dyn FeatureExtractor,
    coreset_fraction: f64,
    seed: u64,
) -> Result<ReferenceBank> {
    if !(coreset_fraction > 0.0 && coreset_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "coreset_fraction must lie in (0, 1], got {coreset_fraction}"
        )));
    }
    if let Some(bad) = index.samples.iter().find(|s| !s.is_good()) {
        return Err(Error::DefectiveReference {
            path: bad.image_path.clone(),
            defect: bad.defect_type.clone(),
        });
    }
    if index.samples.is_empty() {
        return Err(Error::InvalidArgument("no training images".into()));
    }
    let mut features = Vec::new();
    let mut positions = Vec::new();
    let mut grid = (0, 0);
    let mut dim = 0;
    for sample in &index.samples {
        let img = normalize_rgb(&index.load_image(sample)?);
        let pcf = extractor.extract(&img)?;
        grid = pcf.grid;
        dim = pcf.dim;
        for (j, v) in pcf.vectors.outer_iter().enumerate() {
            positions.push(((j / grid.1) as u32, (j % grid.1) as u32));
            features.extend(v.iter().copied());
        }
    }
    let (positions, features) = if coreset_fraction < 1.0 {
        let n = positions.len();
        let target = ((n as f64 * coreset_fraction).ceil() as usize).max(1);
        let keep = greedy_coreset(&features, dim, target, seed);
        let pos = keep.iter().map(|&i| positions[i]).collect();
        let feats = keep.iter().flat_map(|&i| features[i * dim..(i + 1) * dim].iter().copied()).collect();
        (pos, feats)
    } else {
        (positions, features)
    };
    let bank = ReferenceBank {
        category: index.category.clone(),
        dim,
        grid,
        positions,
        features,
        extractor_fingerprint: extractor.fingerprint(),
    };
    bank.validate()?;
    Ok(bank)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PromptKey {
    pub object: String,
    pub defect: String,
}

impl PromptKey {
    pub fn new(object: impl Into<String>, defect: impl Into<String>) -> Self {
        Self {
            object: object.into(),
            defect: defect.into(),
        }
    }
}

impl fmt::Display for PromptKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.object, self.defect)
    }
}

impl std::str::FromStr for PromptKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('/') {
            Some((o, d)) if !o.is_empty() && !d.is_empty() => Ok(PromptKey::new(o, d)),
            _ => Err(Error::UnknownPrompt(s.to_string())),
        }
    }
}

/// Defect descriptions keyed by (object, defect).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptCorpus {
    pub entries: BTreeMap<PromptKey, Vec<String>>,
    /// Entry used for defect types without their own phrases.
    pub fallback: Option<PromptKey>,
}

#[derive(Serialize, Deserialize)]
struct CorpusEntryFile {
    object: String,
    defect: String,
    phrases: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    entries: Vec<CorpusEntryFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fallback: Option<PromptKey>,
}

fn schema(key_path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        key_path: key_path.into(),
        message: message.into(),
    }
}

impl PromptCorpus {
    /// Parses the JSON corpus format:
    /// `{"entries": [{"object", "defect", "phrases": [..]}], "fallback": {"object", "defect"}}`.
    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| schema("$", e.to_string()))?;
        let entries = value
            .get("entries")
            .ok_or_else(|| schema("entries", "missing"))?
            .as_array()
            .ok_or_else(|| schema("entries", "expected an array"))?;
        let mut corpus = PromptCorpus::default();
        for (i, e) in entries.iter().enumerate() {
            let field = |name: &str| -> Result<String> {
                e.get(name)
                    .and_then(|v| v.as_str())
                    .map(str::to_string)
                    .ok_or_else(|| schema(format!("entries[{i}].{name}"), "expected a string"))
            };
            let key = PromptKey::new(field("object")?, field("defect")?);
            let phrases = e
                .get("phrases")
                .and_then(|v| v.as_array())
                .ok_or_else(|| schema(format!("entries[{i}].phrases"), "expected an array"))?;
            let mut list = Vec::with_capacity(phrases.len());
            for (j, p) in phrases.iter().enumerate() {
                let s = p
                    .as_str()
                    .ok_or_else(|| schema(format!("entries[{i}].phrases[{j}]"), "expected a string"))?;
                list.push(s.to_string());
            }
            if list.is_empty() {
                return Err(Error::EmptyPhrases {
                    object: key.object,
                    defect: key.defect,
                });
            }
            if corpus.entries.contains_key(&key) {
                return Err(schema(format!("entries[{i}]"), format!("duplicate key {key}")));
            }
            corpus.entries.insert(key, list);
        }
        if let Some(fb) = value.get("fallback") {
            let key: PromptKey =
                serde_json::from_value(fb.clone()).map_err(|e| schema("fallback", e.to_string()))?;
            if !corpus.entries.contains_key(&key) {
                return Err(schema("fallback", format!("unknown key {key}")));
            }
            corpus.fallback = Some(key);
        }
        Ok(corpus)
    }

    pub fn to_json(&self) -> String {
        let file = CorpusFile {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| CorpusEntryFile {
                    object: k.object.clone(),
                    defect: k.defect.clone(),
                    phrases: v.clone(),
                })
                .collect(),
            fallback: self.fallback.clone(),
        };
        serde_json::to_string_pretty(&file).expect("corpus serialises")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn phrase_counts(&self) -> Vec<(PromptKey, usize)> {
        self.entries.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }

    pub fn phrases(&self, key: &PromptKey) -> Result<&[String]> {
        self.entries
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownPrompt(key.to_string()))
    }

    /// Exact key, else the declared fallback.
    pub fn resolve(&self, object: &str, defect: &str) -> Result<PromptKey> {
        let key = PromptKey::new(object, defect);
        if self.entries.contains_key(&key) {
            return Ok(key);
        }
        self.fallback.clone().ok_or_else(|| Error::UnknownPrompt(key.to_string()))
    }

    /// Keys belonging to one object category.
    pub fn keys_for_object(&self, object: &str) -> Vec<PromptKey> {
        self.entries.keys().filter(|k| k.object == object).cloned().collect()
    }

    /// Checks every defect type of `index` resolves to an entry.
    pub fn check_covers(&self, index: &DatasetIndex) -> Result<()> {
        let seen: HashSet<&str> = index
            .samples
            .iter()
            .filter(|s| !s.is_good())
            .map(|s| s.defect_type.as_str())
            .collect();
        for d in seen {
            self.resolve(&index.category, d)?;
        }
        Ok(())
    }
}

pub fn load_prompt_corpus(path: &Path) -> Result<PromptCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corpus = PromptCorpus::parse(&text)?;
    log::info!(
        "prompt corpus {}: {} entries, phrases per entry {:?}",
        path.display(),
        corpus.len(),
        corpus.phrase_counts().iter().map(|(_, n)| *n).collect::<Vec<_>>()
    );
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_with_forty_phrases() {
        let phrases: Vec<String> = (0..40).map(|i| format!("\"scratch variant {i}\"")).collect();
        let text = format!(
            r#"{{"entries":[{{"object":"metal_nut","defect":"scratch","phrases":[{}]}}]}}"#,
            phrases.join(",")
        );
        let c = PromptCorpus::parse(&text).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.phrases(&PromptKey::new("metal_nut", "scratch")).unwrap().len(), 40);
    }

    #[test]
    fn empty_phrase_list_rejected() {
        let text = r#"{"entries":[{"object":"a","defect":"b","phrases":[]}]}"#;
        assert!(matches!(PromptCorpus::parse(text), Err(Error::EmptyPhrases { .. })));
    }

    #[test]
    fn duplicate_key_rejected() {
        let text = r#"{"entries":[{"object":"a","defect":"b","phrases":["x"]},
                                   {"object":"a","defect":"b","phrases":["y"]}]}"#;
        match PromptCorpus::parse(text) {
            Err(Error::Schema { key_path, .. }) => assert_eq!(key_path, "entries[1]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_error_names_key_path() {
        let text = r#"{"entries":[{"object":"a","defect":"b","phrases":["x", 3]}]}"#;
        match PromptCorpus::parse(text) {
            Err(Error::Schema { key_path, .. }) => assert_eq!(key_path, "entries[0].phrases[1]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fallback_resolution() {
        let text = r#"{"entries":[{"object":"a","defect":"any","phrases":["x"]}],
                       "fallback":{"object":"a","defect":"any"}}"#;
        let c = PromptCorpus::parse(text).unwrap();
        assert_eq!(c.resolve("a", "crack").unwrap(), PromptKey::new("a", "any"));
    }

    /// Exhaustive reference for the greedy rule.
    fn greedy_oracle(points: &[[f32; 2]], target: usize, first: usize) -> Vec<usize> {
        let mut chosen = vec![first];
        while chosen.len() < target {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for (i, p) in points.iter().enumerate() {
                let d = chosen
                    .iter()
                    .map(|&j| {
                        let q = points[j];
                        ((p[0] - q[0]) as f64).powi(2) + ((p[1] - q[1]) as f64).powi(2)
                    })
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            chosen.push(best.1);
        }
        chosen
    }

    #[test]
    fn coreset_quarter_of_sixteen() {
        let points: Vec<[f32; 2]> = (0..16).map(|i| [(i % 4) as f32, (i / 4) as f32 * 1.5]).collect();
        let flat: Vec<f32> = points.iter().flatten().copied().collect();
        let seed = 42;
        let got = greedy_coreset(&flat, 2, 4, seed);
        assert_eq!(got.len(), 4);
        let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..16);
        assert_eq!(got, greedy_oracle(&points, 4, first));
        // same inputs, same subset
        assert_eq!(got, greedy_coreset(&flat, 2, 4, seed));
    }

    #[test]
    fn empty_directory_is_layout_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path(), Layout::Mvtec, "metal_nut", Split::Test).unwrap_err();
        assert!(matches!(err, Error::LayoutMismatch(_)));
        let err = load_dataset(dir.path(), Layout::Ksdd2, "", Split::Train).unwrap_err();
        assert!(matches!(err, Error::LayoutMismatch(_)));
    }
}

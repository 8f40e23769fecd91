//! Automatic segmentation: one forward pass per defect-type prompt, no clicks,
//! pixel-wise max over the per-type maps.

use ndarray::{Array2, Array3, ArrayView2};

use crate::clicks::{Click, ClickEncoding};
use crate::datasets::PromptKey;
use crate::error::{Error, Result};
use crate::imgproc::mean_filter3;
use crate::network::ModelInput;
use crate::pipeline::Engine;
use crate::posfar::PosFarTensor;

/// Non-empty, duplicate-free list of prompt keys queried for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectTypeSet {
    keys: Vec<PromptKey>,
}

impl DefectTypeSet {
    pub fn new(mut keys: Vec<PromptKey>) -> Result<Self> {
        keys.sort();
        keys.dedup();
        if keys.is_empty() {
            return Err(Error::InvalidArgument("defect type set is empty".into()));
        }
        Ok(Self { keys })
    }

    pub fn keys(&self) -> &[PromptKey] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ScoreMapSet {
    pub per_type: Vec<(PromptKey, Array2<f32>)>,
    pub aggregate: Array2<f32>,
    pub image_score: f32,
}

/// Pixel-wise maximum over per-type maps.
pub fn aggregate_max(maps: &[Array2<f32>]) -> Result<Array2<f32>> {
    let first = maps.first().ok_or_else(|| Error::InvalidArgument("no score maps to aggregate".into()))?;
    let mut out = first.clone();
    for m in &maps[1..] {
        if m.dim() != out.dim() {
            return Err(Error::ShapeMismatch {
                what: "score maps",
                lhs: out.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        out.zip_mut_with(m, |a, &b| *a = a.max(b));
    }
    Ok(out)
}

/// Image-level score: maximum of the 3x3 box-smoothed map.
pub fn image_score(map: ArrayView2<f32>) -> f32 {
    mean_filter3(map).iter().copied().fold(f32::NEG_INFINITY, f32::max)
}

/// Runs the segmentation-mode model once per defect type. `clicks` must be
/// empty: this mode has no click input.
pub fn seg_forward(
    engine: &Engine,
    image: &Array3<f32>,
    posfar: &PosFarTensor,
    types: &DefectTypeSet,
    salt: &str,
    clicks: &[Click],
) -> Result<ScoreMapSet> {
    if !clicks.is_empty() {
        return Err(Error::ClicksInSegMode);
    }
    let cfg = engine.model.config();
    if !cfg.seg_mode {
        return Err(Error::InvalidArgument("model was not built in segmentation mode".into()));
    }
    let res = cfg.resolution;
    let enc = ClickEncoding::empty(res, res);
    let mut per_type = Vec::with_capacity(types.len());
    for key in types.keys() {
        let text = engine.text_embedding(key, salt)?;
        let input = ModelInput::from_arrays(image, &enc, posfar, text.as_ref(), engine.model.dtype())?;
        per_type.push((key.clone(), engine.model.predict_mask(&input)?.scores));
        if !cfg.use_language {
            // without prompts every type yields the same map
            break;
        }
    }
    let maps: Vec<Array2<f32>> = per_type.iter().map(|(_, m)| m.clone()).collect();
    let aggregate = aggregate_max(&maps)?;
    let image_score = image_score(aggregate.view());
    Ok(ScoreMapSet {
        per_type,
        aggregate,
        image_score,
    })
}

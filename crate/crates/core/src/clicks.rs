//! Clicks, their raster encoding, simulated annotators and the iterative
//! click protocol used for NoC evaluation.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{connected_components, distance_to_boundary};
use crate::metrics;

pub const DEFAULT_CLICK_RADIUS: usize = 5;
pub const DEFAULT_NOC_CAP: usize = 20;
pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Marks anomalous pixels.
    Positive,
    /// Marks normal pixels.
    Negative,
}

impl Polarity {
    pub fn is_positive(self) -> bool {
        matches!(self, Polarity::Positive)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    /// Pixel column.
    pub x: usize,
    /// Pixel row.
    pub y: usize,
    pub polarity: Polarity,
    /// Interaction ordinal within a session, starting at 0.
    #[serde(default)]
    pub index: usize,
}

impl Click {
    pub fn new(x: usize, y: usize, polarity: Polarity, index: usize) -> Self {
        Self { x, y, polarity, index }
    }

    pub fn positive(x: usize, y: usize) -> Self {
        Self::new(x, y, Polarity::Positive, 0)
    }

    pub fn negative(x: usize, y: usize) -> Self {
        Self::new(x, y, Polarity::Negative, 0)
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.x >= width || self.y >= height {
            return Err(Error::OutOfBounds {
                x: self.x as i64,
                y: self.y as i64,
                width,
                height,
            });
        }
        Ok(())
    }
}

/// Ordered click history as written next to exported labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClickLog {
    pub clicks: Vec<Click>,
}

/// Dense score map in [0, 1] with the threshold used to binarise it.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMask {
    pub scores: Array2<f32>,
    pub threshold: f32,
}

impl AnomalyMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            scores: Array2::zeros((height, width)),
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn new(scores: Array2<f32>, threshold: f32) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidArgument(format!("threshold {threshold} not in (0, 1)")));
        }
        if scores.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("mask scores outside [0, 1]".into()));
        }
        Ok(Self { scores, threshold })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.scores.dim()
    }

    pub fn binarize(&self) -> Array2<bool> {
        self.scores.map(|&v| v >= self.threshold)
    }
}

/// Model-side view of the clicks: one binary disk map per polarity plus the
/// previous mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickEncoding {
    pub positive: Array2<f32>,
    pub negative: Array2<f32>,
    pub previous_mask: Array2<f32>,
}

impl ClickEncoding {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            positive: Array2::zeros((height, width)),
            negative: Array2::zeros((height, width)),
            previous_mask: Array2::zeros((height, width)),
        }
    }

    pub fn has_clicks(&self) -> bool {
        self.positive.iter().chain(self.negative.iter()).any(|&v| v != 0.0)
    }
}

fn stamp_disk(map: &mut Array2<f32>, cx: usize, cy: usize, radius: usize) {
    let (h, w) = map.dim();
    let r = radius as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let y = cy as i64 + dy;
            let x = cx as i64 + dx;
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                map[[y as usize, x as usize]] = 1.0;
            }
        }
    }
}

pub fn encode_clicks(
    clicks: &[Click],
    previous_mask: &AnomalyMask,
    resolution: (usize, usize),
    radius: usize,
) -> Result<ClickEncoding> {
    let (h, w) = resolution;
    if previous_mask.dim() != resolution {
        return Err(Error::ResolutionMismatch {
            expected: resolution,
            actual: previous_mask.dim(),
        });
    }
    let mut enc = ClickEncoding {
        positive: Array2::zeros((h, w)),
        negative: Array2::zeros((h, w)),
        previous_mask: previous_mask.scores.clone(),
    };
    for c in clicks {
        c.check_bounds(h, w)?;
        let map = match c.polarity {
            Polarity::Positive => &mut enc.positive,
            Polarity::Negative => &mut enc.negative,
        };
        stamp_disk(map, c.x, c.y, radius);
    }
    Ok(enc)
}

/// The largest error region of a prediction and its polarity.
struct ErrorRegion {
    mask: Array2<bool>,
    polarity: Polarity,
}

fn largest_error_region(prediction: ArrayView2<bool>, gt: ArrayView2<bool>) -> Option<ErrorRegion> {
    let false_neg = ndarray::Zip::from(&prediction).and(&gt).map_collect(|&p, &g| g && !p);
    let false_pos = ndarray::Zip::from(&prediction).and(&gt).map_collect(|&p, &g| p && !g);
    let mut best: Option<(usize, Polarity, Array2<bool>)> = None;
    // false negatives first so equal-area ties prefer a positive click
    for (errors, polarity) in [(false_neg, Polarity::Positive), (false_pos, Polarity::Negative)] {
        let cc = connected_components(errors.view());
        for (k, &size) in cc.sizes.iter().enumerate() {
            if best.as_ref().is_none_or(|(s, _, _)| size > *s) {
                let label = k as u32 + 1;
                best = Some((size, polarity, cc.labels.map(|&l| l == label)));
            }
        }
    }
    best.map(|(_, polarity, mask)| ErrorRegion { mask, polarity })
}

fn check_same_shape(prediction: &AnomalyMask, gt: ArrayView2<bool>) -> Result<()> {
    if prediction.dim() != gt.dim() {
        return Err(Error::ShapeMismatch {
            what: "click simulation",
            lhs: vec![prediction.dim().0, prediction.dim().1],
            rhs: gt.shape().to_vec(),
        });
    }
    Ok(())
}

/// Simulated annotator: clicks the interior point (distance-transform argmax,
/// row-major tie-break) of the largest error region. Returns `None` when the
/// binarised prediction already equals the ground truth.
pub fn simulate_next_click(prediction: &AnomalyMask, gt: ArrayView2<bool>, index: usize) -> Result<Option<Click>> {
    check_same_shape(prediction, gt)?;
    let binary = prediction.binarize();
    let Some(region) = largest_error_region(binary.view(), gt) else {
        return Ok(None);
    };
    let dist = distance_to_boundary(region.mask.view());
    let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
    for ((r, c), &d) in dist.indexed_iter() {
        if region.mask[[r, c]] && d > best.0 {
            best = (d, r, c);
        }
    }
    Ok(Some(Click::new(best.2, best.1, region.polarity, index)))
}

/// Training-time variant: with probability `jitter` the click lands on a
/// uniformly random pixel of the largest error region instead of its centre.
pub fn sample_next_click<R: Rng>(
    prediction: &AnomalyMask,
    gt: ArrayView2<bool>,
    index: usize,
    jitter: f64,
    rng: &mut R,
) -> Result<Option<Click>> {
    check_same_shape(prediction, gt)?;
    if !rng.random_bool(jitter.clamp(0.0, 1.0)) {
        return simulate_next_click(prediction, gt, index);
    }
    let binary = prediction.binarize();
    let Some(region) = largest_error_region(binary.view(), gt) else {
        return Ok(None);
    };
    Ok(random_pixel(region.mask.view(), rng).map(|(r, c)| Click::new(c, r, region.polarity, index)))
}

fn random_pixel<R: Rng>(mask: ArrayView2<bool>, rng: &mut R) -> Option<(usize, usize)> {
    let cells: Vec<(usize, usize)> = mask.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p).collect();
    if cells.is_empty() {
        return None;
    }
    Some(cells[rng.random_range(0..cells.len())])
}

/// First training click: a positive click uniformly inside the anomaly.
pub fn sample_first_click<R: Rng>(gt: ArrayView2<bool>, rng: &mut R) -> Option<Click> {
    random_pixel(gt, rng).map(|(r, c)| Click::positive(c, r))
}

/// Anything that turns a click history and the previous mask into a new mask.
pub trait ClickModel {
    fn predict(&self, clicks: &[Click], previous: &AnomalyMask) -> Result<AnomalyMask>;
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub clicks: Vec<Click>,
    /// IoU after click 1, 2, ... (one entry per click actually placed, padded
    /// with the final value if the annotator had nothing left to correct).
    pub ious: Vec<f64>,
    pub masks: Vec<AnomalyMask>,
    pub noc: usize,
}

/// Alternates simulated clicks and model refinement from an empty mask.
pub fn run_click_protocol<M: ClickModel + ?Sized>(
    model: &M,
    gt: ArrayView2<bool>,
    max_clicks: usize,
    iou_target: f64,
) -> Result<ProtocolOutcome> {
    if max_clicks == 0 {
        return Err(Error::InvalidArgument("max_clicks must be at least 1".into()));
    }
    let (h, w) = gt.dim();
    let mut current = AnomalyMask::empty(h, w);
    let mut clicks = Vec::new();
    let mut ious = Vec::new();
    let mut masks = Vec::new();
    for t in 0..max_clicks {
        match simulate_next_click(&current, gt, t)? {
            Some(click) => {
                clicks.push(click);
                current = model.predict(&clicks, &current)?;
            }
            // perfect prediction: nothing left to click, the state persists
            None => {}
        }
        ious.push(metrics::iou(current.binarize().view(), gt)?);
        masks.push(current.clone());
    }
    let noc = metrics::noc(&ious, iou_target, max_clicks);
    Ok(ProtocolOutcome {
        clicks,
        ious,
        masks,
        noc,
    })
}

//! Toy dataset: textured squares on a plain background with dark or bright
//! blob anomalies, written in the MVTec directory layout.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{PromptCorpus, PromptKey, GOOD};
use crate::error::{Error, Result};
use crate::imgproc::write_mask_png;

pub const TOY_CATEGORIES: [&str; 2] = ["tile", "mesh"];
pub const TOY_DEFECTS: [&str; 2] = ["stain", "spot"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub resolution: usize,
    pub categories: Vec<String>,
    pub train_good: usize,
    pub test_good: usize,
    pub test_per_defect: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            categories: TOY_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            train_good: 8,
            test_good: 4,
            test_per_defect: 10,
            seed: 0,
        }
    }
}

/// Side margin of the textured square.
fn margin(resolution: usize) -> usize {
    resolution / 8
}

fn texture(category: &str, r: usize, c: usize) -> [f32; 3] {
    match category {
        "tile" => {
            let on = ((r / 6) + (c / 6)) % 2 == 0;
            let v = if on { 170.0 } else { 120.0 };
            [v * 0.9, v * 0.95, v]
        }
        "mesh" => {
            let v = 140.0 + 45.0 * (((r + c) as f32) / 2.5).sin();
            [v * 0.85, v, v * 0.8]
        }
        other => {
            // any other category: horizontal bands with a name-dependent period
            let period = 3 + other.len() % 5;
            let v = if (r / period) % 2 == 0 { 160.0 } else { 110.0 };
            [v, v * 0.9, v * 0.9]
        }
    }
}

/// One defect-free image.
pub fn render_good<R: Rng>(category: &str, resolution: usize, rng: &mut R) -> RgbImage {
    let m = margin(resolution);
    let gain: f32 = rng.random_range(0.95..1.05);
    let mut img = RgbImage::new(resolution as u32, resolution as u32);
    for r in 0..resolution {
        for c in 0..resolution {
            let inside = r >= m && r < resolution - m && c >= m && c < resolution - m;
            let base = if inside { texture(category, r, c) } else { [70.0, 70.0, 75.0] };
            let px: [u8; 3] = std::array::from_fn(|k| {
                let noise: f32 = rng.random_range(-6.0..6.0);
                (base[k] * gain + noise).clamp(0.0, 255.0) as u8
            });
            img.put_pixel(c as u32, r as u32, Rgb(px));
        }
    }
    img
}

/// Elliptic blob fully inside the textured square.
fn blob_mask<R: Rng>(resolution: usize, rng: &mut R) -> Array2<bool> {
    let m = margin(resolution) as f32;
    let max_r = (resolution as f32 * 0.16).max(3.0);
    let min_r = (resolution as f32 * 0.08).max(2.0);
    let ry = rng.random_range(min_r..max_r);
    let rx = rng.random_range(min_r..max_r);
    let lo_y = m + ry + 1.0;
    let lo_x = m + rx + 1.0;
    let hi_y = resolution as f32 - m - ry - 1.0;
    let hi_x = resolution as f32 - m - rx - 1.0;
    let cy = rng.random_range(lo_y..hi_y.max(lo_y + 1.0));
    let cx = rng.random_range(lo_x..hi_x.max(lo_x + 1.0));
    Array2::from_shape_fn((resolution, resolution), |(r, c)| {
        let dy = (r as f32 + 0.5 - cy) / ry;
        let dx = (c as f32 + 0.5 - cx) / rx;
        dy * dy + dx * dx <= 1.0
    })
}

fn paint(img: &mut RgbImage, mask: &Array2<bool>, f: impl Fn([u8; 3]) -> [u8; 3]) {
    for ((r, c), &on) in mask.indexed_iter() {
        if on {
            let p = img.get_pixel(c as u32, r as u32).0;
            img.put_pixel(c as u32, r as u32, Rgb(f(p)));
        }
    }
}

/// Paints a defect of the named kind and returns its mask.
pub fn paste_defect<R: Rng>(img: &mut RgbImage, defect: &str, rng: &mut R) -> Result<Array2<bool>> {
    let mask = blob_mask(img.height() as usize, rng);
    match defect {
        "stain" => paint(img, &mask, |p| p.map(|v| (v as f32 * 0.3) as u8)),
        "spot" => paint(img, &mask, |p| p.map(|v| 255 - ((255 - v) as f32 * 0.15) as u8)),
        other => return Err(Error::InvalidArgument(format!("unknown toy defect `{other}`"))),
    }
    Ok(mask)
}

/// Randomly tinted blob used as self-supervised anomaly for training
/// without real defects.
pub fn paste_random_anomaly<R: Rng>(img: &mut RgbImage, rng: &mut R) -> Array2<bool> {
    let mask = blob_mask(img.height() as usize, rng);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..255.0));
    let alpha: f32 = rng.random_range(0.6..0.9);
    paint(img, &mask, |p| {
        std::array::from_fn(|k| (p[k] as f32 * (1.0 - alpha) + tint[k] * alpha) as u8)
    });
    mask
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)?;
    Ok(())
}

/// Writes `<root>/<category>/{train,test,ground_truth}` for every category.
pub fn write_dataset(root: &Path, cfg: &SyntheticConfig) -> Result<()> {
    for (ci, category) in cfg.categories.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(ci as u64));
        let cat = root.join(category);
        for i in 0..cfg.train_good {
            let img = render_good(category, cfg.resolution, &mut rng);
            save_png(&img, &cat.join("train").join(GOOD).join(format!("{i:03}.png")))?;
        }
        for i in 0..cfg.test_good {
            let img = render_good(category, cfg.resolution, &mut rng);
            save_png(&img, &cat.join("test").join(GOOD).join(format!("{i:03}.png")))?;
        }
        for defect in TOY_DEFECTS {
            for i in 0..cfg.test_per_defect {
                let mut img = render_good(category, cfg.resolution, &mut rng);
                let mask = paste_defect(&mut img, defect, &mut rng)?;
                save_png(&img, &cat.join("test").join(defect).join(format!("{i:03}.png")))?;
                let mask_path = cat.join("ground_truth").join(defect).join(format!("{i:03}_mask.png"));
                if let Some(dir) = mask_path.parent() {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                write_mask_png(mask.view(), &mask_path)?;
            }
        }
    }
    Ok(())
}

/// Forty phrases per (category, defect) built from a few word lists.
pub fn toy_corpus(categories: &[String]) -> PromptCorpus {
    let mut corpus = PromptCorpus::default();
    for category in categories {
        for defect in TOY_DEFECTS {
            let (adjectives, nouns): (&[&str], &[&str]) = match defect {
                "stain" => (
                    &["dark", "black", "dim", "murky", "shadowy"],
                    &["stain", "smudge", "blot", "patch", "mark", "blotch", "discoloration", "soiling"],
                ),
                _ => (
                    &["bright", "white", "pale", "glowing", "shiny"],
                    &["spot", "speck", "glare", "patch", "dot", "highlight", "flare", "blemish"],
                ),
            };
            let phrases = adjectives
                .iter()
                .flat_map(|a| nouns.iter().map(move |n| format!("a {a} {n} on the {category} surface")))
                .collect();
            corpus.entries.insert(PromptKey::new(category.clone(), defect), phrases);
        }
    }
    corpus
}

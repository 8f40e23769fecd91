//! Small raster utilities shared by click simulation, metrics and I/O:
//! connected components, Euclidean distance transform, resizing and PNG codecs.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Labelled connected components of a binary mask. Label 0 is background,
/// components are numbered from 1 in row-major order of their first pixel.
#[derive(Debug, Clone)]
pub struct Components {
    pub labels: Array2<u32>,
    /// `sizes[k]` is the pixel count of component `k + 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// 8-connected component labelling.
pub fn connected_components(mask: ArrayView2<bool>) -> Components {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] || labels[[r, c]] != 0 {
                continue;
            }
            let label = sizes.len() as u32 + 1;
            let mut size = 0usize;
            labels[[r, c]] = label;
            stack.push((r, c));
            while let Some((y, x)) = stack.pop() {
                size += 1;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let ny = y as i64 + dy;
                        let nx = x as i64 + dx;
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = label;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            sizes.push(size);
        }
    }
    Components { labels, sizes }
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance from every `true` pixel to the nearest `false` pixel,
/// treating everything outside the image as `false`. `false` pixels get 0.
pub fn distance_to_boundary(region: ArrayView2<bool>) -> Array2<f64> {
    let (h, w) = region.dim();
    let (ph, pw) = (h + 2, w + 2);
    // larger than any squared in-grid distance, small enough to stay exact
    let far = (ph * ph + pw * pw) as f64 + 1.0;
    let mut grid = Array2::<f64>::zeros((ph, pw));
    for r in 0..h {
        for c in 0..w {
            if region[[r, c]] {
                grid[[r + 1, c + 1]] = far;
            }
        }
    }
    let n = ph.max(pw);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for c in 0..pw {
        for r in 0..ph {
            f[r] = grid[[r, c]];
        }
        edt_1d(&f[..ph], &mut out[..ph], &mut v, &mut z);
        for r in 0..ph {
            grid[[r, c]] = out[r];
        }
    }
    for r in 0..ph {
        for c in 0..pw {
            f[c] = grid[[r, c]];
        }
        edt_1d(&f[..pw], &mut out[..pw], &mut v, &mut z);
        for c in 0..pw {
            grid[[r, c]] = out[c];
        }
    }
    Array2::from_shape_fn((h, w), |(r, c)| grid[[r + 1, c + 1]].sqrt())
}

/// 3x3 mean filter; border pixels average over the in-bounds neighbours.
pub fn mean_filter3(map: ArrayView2<f32>) -> Array2<f32> {
    let (h, w) = map.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut sum = 0.0f64;
        let mut n = 0u32;
        for y in r.saturating_sub(1)..(r + 2).min(h) {
            for x in c.saturating_sub(1)..(c + 2).min(w) {
                sum += map[[y, x]] as f64;
                n += 1;
            }
        }
        (sum / n as f64) as f32
    })
}

/// Nearest-neighbour resize of a binary mask.
pub fn resize_nearest_bool(mask: ArrayView2<bool>, height: usize, width: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((height, width), |(r, c)| {
        let sr = ((r as f64 + 0.5) * h as f64 / height as f64).floor() as usize;
        let sc = ((c as f64 + 0.5) * w as f64 / width as f64).floor() as usize;
        mask[[sr.min(h - 1), sc.min(w - 1)]]
    })
}

pub fn bool_to_f32(mask: ArrayView2<bool>) -> Array2<f32> {
    mask.map(|&b| if b { 1.0 } else { 0.0 })
}

pub fn threshold(map: ArrayView2<f32>, t: f32) -> Array2<bool> {
    map.map(|&v| v >= t)
}

/// Reads a single-channel mask PNG; any nonzero pixel is anomalous.
pub fn read_mask_png(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32)[0] > 0
    }))
}

/// Encodes a binary mask as an 8-bit PNG (0 = normal, 255 = anomalous).
pub fn mask_to_gray(mask: ArrayView2<bool>) -> GrayImage {
    let (h, w) = mask.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255u8 } else { 0 }])
    })
}

pub fn write_mask_png(mask: ArrayView2<bool>, path: &Path) -> Result<()> {
    mask_to_gray(mask)
        .save(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
}

pub fn encode_png_bytes(mask: ArrayView2<bool>) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    mask_to_gray(mask).write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Writes a score map in [0, 1] as a 16-bit grayscale PNG.
pub fn write_score_png16(map: ArrayView2<f32>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = map[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn brute_distance(region: ArrayView2<bool>) -> Array2<f64> {
        let (h, w) = region.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            if !region[[r, c]] {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for y in -1..=h as i64 {
                for x in -1..=w as i64 {
                    let inside = y >= 0
                        && x >= 0
                        && y < h as i64
                        && x < w as i64
                        && region[[y as usize, x as usize]];
                    if !inside {
                        let d = ((y - r as i64).pow(2) + (x - c as i64).pow(2)) as f64;
                        best = best.min(d);
                    }
                }
            }
            best.sqrt()
        })
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let h = rng.random_range(1..12);
            let w = rng.random_range(1..12);
            let region = Array2::from_shape_fn((h, w), |_| rng.random_bool(0.7));
            let fast = distance_to_boundary(region.view());
            let slow = brute_distance(region.view());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn diagonal_pixels_join_under_eight_connectivity() {
        let m = array![[true, false, false], [false, true, false], [false, false, false]];
        let cc = connected_components(m.view());
        assert_eq!(cc.count(), 1);
        assert_eq!(cc.sizes, vec![2]);
    }

    #[test]
    fn separate_blobs_get_separate_labels() {
        let m = array![[true, true, false, false], [false, false, false, true]];
        let cc = connected_components(m.view());
        assert_eq!(cc.count(), 2);
        assert_eq!(cc.labels[[1, 3]], 2);
    }
}

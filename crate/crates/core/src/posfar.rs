//! Positional Fast Anomaly Residuals: match every test patch feature against
//! spatially nearby reference features and keep the element-wise residual
//! `|p_test - p_ref|^theta`.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1};

use crate::datasets::{read_grid_file, write_grid_file, GridFileExtra, ReferenceBank, POSFAR_FILE_MAGIC};
use crate::error::{Error, Result};

pub const DEFAULT_THETA: f32 = 2.0;
pub const DEFAULT_WINDOW_RADIUS: usize = 1;

/// Patch features of one image on an `h_f x w_f` grid, row-major cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PcfGrid {
    /// `(h_f * w_f) x d_f`.
    pub vectors: Array2<f32>,
    pub grid: (usize, usize),
    pub dim: usize,
    pub source_resolution: (usize, usize),
}

impl PcfGrid {
    pub fn new(vectors: Array2<f32>, grid: (usize, usize), source_resolution: (usize, usize)) -> Result<Self> {
        let (m, dim) = vectors.dim();
        if m != grid.0 * grid.1 {
            return Err(Error::DimensionMismatch {
                what: "pcf grid cells",
                expected: grid.0 * grid.1,
                actual: m,
            });
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pcf features"));
        }
        Ok(Self {
            vectors,
            grid,
            dim,
            source_resolution,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell(&self, row: usize, col: usize) -> ArrayView1<'_, f32> {
        self.vectors.row(row * self.grid.1 + col)
    }
}

/// Reference feature selected for every grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedReferences {
    /// Bank index per cell, `h_f x w_f`.
    pub indices: Array2<usize>,
    /// `(h_f * w_f) x d_f` copies of the matched bank vectors.
    pub vectors: Array2<f32>,
}

/// Residual tensor fed to the residual branch.
#[derive(Debug, Clone, PartialEq)]
pub struct PosFarTensor {
    /// `(h_f * w_f) x d_f`, row-major cells, every entry >= 0.
    pub residuals: Array2<f32>,
    pub grid: (usize, usize),
    pub theta: f32,
    pub matched_indices: Array2<usize>,
}

impl PosFarTensor {
    pub fn dim(&self) -> usize {
        self.residuals.ncols()
    }

    /// Debug dump in the reference-bank container format plus theta.
    pub fn write_to<W: Write>(&self, w: &mut W, fingerprint: &str, category: &str) -> Result<()> {
        let positions: Vec<(u32, u32)> = (0..self.grid.0 * self.grid.1)
            .map(|j| ((j / self.grid.1) as u32, (j % self.grid.1) as u32))
            .collect();
        let matched: Vec<u32> = self.matched_indices.iter().map(|&i| i as u32).collect();
        let extra = GridFileExtra {
            category,
            theta: Some(self.theta),
            matched: Some(&matched),
        };
        let flat: Vec<f32> = self.residuals.iter().copied().collect();
        write_grid_file(w, POSFAR_FILE_MAGIC, self.dim(), self.grid, fingerprint, &extra, &positions, &flat)
            .map_err(|e| Error::io("<posfar>", e))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let f = read_grid_file(r, POSFAR_FILE_MAGIC)?;
        let n = f.grid.0 * f.grid.1;
        let residuals =
            Array2::from_shape_vec((n, f.dim), f.vectors).map_err(|e| Error::Format(e.to_string()))?;
        let matched = f.matched.unwrap_or_default().into_iter().map(|i| i as usize).collect();
        Ok(Self {
            residuals,
            grid: f.grid,
            theta: f.theta.unwrap_or(DEFAULT_THETA),
            matched_indices: Array2::from_shape_vec(f.grid, matched).map_err(|e| Error::Format(e.to_string()))?,
        })
    }
}

fn squared_distance(a: ArrayView1<f32>, b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

/// For every cell, the bank vector nearest in Euclidean distance among
/// entries whose position lies within `window_radius` cells (Chebyshev) of
/// the cell. Ties go to the lowest bank index.
pub fn match_reference(pcf: &PcfGrid, bank: &ReferenceBank, window_radius: usize) -> Result<MatchedReferences> {
    if bank.dim != pcf.dim {
        return Err(Error::DimensionMismatch {
            what: "reference bank",
            expected: pcf.dim,
            actual: bank.dim,
        });
    }
    let (gh, gw) = pcf.grid;
    // bucket bank entries by position, preserving index order
    let (bh, bw) = bank.grid;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); bh * bw];
    for (i, &(r, c)) in bank.positions.iter().enumerate() {
        buckets[r as usize * bw + c as usize].push(i);
    }
    let rad = window_radius as i64;
    let mut indices = Array2::<usize>::zeros((gh, gw));
    let mut vectors = Array2::<f32>::zeros((gh * gw, pcf.dim));
    let mut candidates = Vec::new();
    for row in 0..gh {
        for col in 0..gw {
            candidates.clear();
            let r0 = (row as i64 - rad).max(0);
            let r1 = (row as i64 + rad).min(bh as i64 - 1);
            let c0 = (col as i64 - rad).max(0);
            let c1 = (col as i64 + rad).min(bw as i64 - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    candidates.extend_from_slice(&buckets[r as usize * bw + c as usize]);
                }
            }
            if candidates.is_empty() {
                return Err(Error::NoCandidates { row, col });
            }
            candidates.sort_unstable();
            let query = pcf.cell(row, col);
            let mut best = (f64::INFINITY, usize::MAX);
            for &i in &candidates {
                let d = squared_distance(query, bank.vector(i));
                if d < best.0 {
                    best = (d, i);
                }
            }
            indices[[row, col]] = best.1;
            vectors
                .row_mut(row * gw + col)
                .iter_mut()
                .zip(bank.vector(best.1))
                .for_each(|(o, &v)| *o = v);
        }
    }
    Ok(MatchedReferences { indices, vectors })
}

/// `r_j = |p_j - p*_j|^theta`, element-wise.
pub fn compute_posfar(pcf: &PcfGrid, matched: &MatchedReferences, theta: f32) -> Result<PosFarTensor> {
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::InvalidArgument(format!("theta must be positive, got {theta}")));
    }
    if pcf.vectors.dim() != matched.vectors.dim() {
        return Err(Error::ShapeMismatch {
            what: "posfar",
            lhs: pcf.vectors.shape().to_vec(),
            rhs: matched.vectors.shape().to_vec(),
        });
    }
    if pcf.vectors.iter().chain(matched.vectors.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("posfar inputs"));
    }
    let residuals = ndarray::Zip::from(&pcf.vectors)
        .and(&matched.vectors)
        .map_collect(|&t, &r| (t - r).abs().powf(theta));
    Ok(PosFarTensor {
        residuals,
        grid: pcf.grid,
        theta,
        matched_indices: matched.indices.clone(),
    })
}

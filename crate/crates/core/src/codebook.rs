//! The discrete dictionary: quantization, dequantization and nearest-codeword
//! neighbor tables.
//!
//! All distances are squared Euclidean evaluated in `f64`; ties always go to
//! the smaller index.

use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use rayon::prelude::*;
use std::cmp::Ordering;
use std::path::Path;

const CODEBOOK_MAGIC: &[u8; 4] = b"RTOK";
const TOKEN_GRID_MAGIC: &[u8; 4] = b"RTKG";

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `K` codewords of dimension `D`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    vectors: Vec<f64>,
}

impl Codebook {
    pub fn new(k: usize, dim: usize, vectors: Vec<f64>) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!(
                "codebook needs at least 2 codewords, got {k}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("codeword dimension must be >= 1".into()));
        }
        if vectors.len() != k * dim {
            return Err(Error::Dimension(format!(
                "codebook {k}x{dim} needs {} values, got {}",
                k * dim,
                vectors.len()
            )));
        }
        if let Some(i) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("codeword {} has a non-finite entry", i / dim)));
        }
        Ok(Codebook { k, dim, vectors })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension("codebook rows differ in length".into()));
        }
        Codebook::new(rows.len(), dim, rows.concat())
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut [f64] {
        &mut self.vectors
    }

    /// Index of the nearest codeword to `z` and its squared distance.
    pub fn nearest(&self, z: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.k {
            let d = sq_dist(z, self.row(k));
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    /// Number of codewords that exactly repeat an earlier codeword.
    pub fn duplicate_count(&self) -> usize {
        (1..self.k)
            .filter(|&j| (0..j).any(|i| self.row(i) == self.row(j)))
            .count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CODEBOOK_MAGIC);
        w.u32(self.k as u32);
        w.u32(self.dim as u32);
        w.f64s_as_f32(&self.vectors);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("codebook file", bytes, CODEBOOK_MAGIC)?;
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let vectors = r.f32s_as_f64(k * dim)?;
        r.finish()?;
        Codebook::new(k, dim, vectors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Codebook::from_bytes(&read_file(path)?)
    }
}

/// An `H x W` grid of `D`-dimensional latent vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "latent grid {height}x{width}x{dim} is empty"
            )));
        }
        if values.len() != height * width * dim {
            return Err(Error::Dimension(format!(
                "latent grid {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                values.len()
            )));
        }
        Ok(LatentGrid {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// An `H x W` grid of codebook indices into a codebook of size `k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub indices: Vec<u32>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, k: usize, indices: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!("token grid {height}x{width} is empty")));
        }
        if indices.len() != height * width {
            return Err(Error::Dimension(format!(
                "token grid {height}x{width} needs {} indices, got {}",
                height * width,
                indices.len()
            )));
        }
        let grid = TokenGrid {
            height,
            width,
            k,
            indices,
        };
        grid.check()?;
        Ok(grid)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, h: usize, w: usize) -> usize {
        self.indices[h * self.width + w] as usize
    }

    /// Rejects grids carrying an index `>= k`.
    pub fn check(&self) -> Result<()> {
        match self.indices.iter().find(|&&i| i as usize >= self.k) {
            Some(&i) => Err(Error::IndexOutOfRange {
                index: i as usize,
                k: self.k,
            }),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(TOKEN_GRID_MAGIC);
        w.u32(self.height as u32);
        w.u32(self.width as u32);
        w.u32(self.k as u32);
        for &i in &self.indices {
            w.u32(i);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("token grid file", bytes, TOKEN_GRID_MAGIC)?;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let k = r.u32()? as usize;
        let indices = r.u32s(h * w)?;
        r.finish()?;
        TokenGrid::new(h, w, k, indices)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        TokenGrid::from_bytes(&read_file(path)?)
    }
}

pub fn quantize(latent: &LatentGrid, cb: &Codebook) -> Result<TokenGrid> {
    if latent.dim != cb.dim() {
        return Err(Error::Dimension(format!(
            "latent dimension {} does not match codebook dimension {}",
            latent.dim,
            cb.dim()
        )));
    }
    if latent.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("latent grid has non-finite entries".into()));
    }
    let indices = (0..latent.cells())
        .map(|i| cb.nearest(latent.cell(i)).0 as u32)
        .collect();
    Ok(TokenGrid {
        height: latent.height,
        width: latent.width,
        k: cb.size(),
        indices,
    })
}

pub fn dequantize(tokens: &TokenGrid, cb: &Codebook) -> Result<LatentGrid> {
    if tokens.k != cb.size() {
        return Err(Error::Dimension(format!(
            "token grid indexes a codebook of size {}, codebook has {}",
            tokens.k,
            cb.size()
        )));
    }
    tokens.check()?;
    let mut values = Vec::with_capacity(tokens.cells() * cb.dim());
    for &i in &tokens.indices {
        values.extend_from_slice(cb.row(i as usize));
    }
    Ok(LatentGrid {
        height: tokens.height,
        width: tokens.width,
        dim: cb.dim(),
        values,
    })
}

/// Per-codeword lists of the `delta_max` nearest other codewords.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    k: usize,
    delta_max: usize,
    neighbors: Vec<u32>,
    distances: Vec<f64>,
}

impl NeighborTable {
    pub fn size(&self) -> usize {
        self.k
    }

    pub fn delta_max(&self) -> usize {
        self.delta_max
    }

    /// Neighbors of codeword `k`, nearest first.
    pub fn row(&self, k: usize) -> &[u32] {
        &self.neighbors[k * self.delta_max..(k + 1) * self.delta_max]
    }

    /// Squared distances matching [`NeighborTable::row`].
    pub fn row_distances(&self, k: usize) -> &[f64] {
        &self.distances[k * self.delta_max..(k + 1) * self.delta_max]
    }
}

fn by_distance_then_index(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

pub fn build_neighbor_table(cb: &Codebook, delta_max: usize) -> Result<NeighborTable> {
    let k = cb.size();
    if delta_max == 0 || delta_max >= k {
        return Err(Error::InvalidArgument(format!(
            "neighbor depth must be in [1, {}], got {delta_max}",
            k - 1
        )));
    }
    let rows: Vec<Vec<(f64, u32)>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, u32)> = (0..k)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(cb.row(i), cb.row(j)), j as u32))
                .collect();
            if delta_max < cand.len() {
                cand.select_nth_unstable_by(delta_max - 1, by_distance_then_index);
                cand.truncate(delta_max);
            }
            cand.sort_unstable_by(by_distance_then_index);
            cand
        })
        .collect();
    let mut neighbors = Vec::with_capacity(k * delta_max);
    let mut distances = Vec::with_capacity(k * delta_max);
    for row in rows {
        for (d, j) in row {
            distances.push(d);
            neighbors.push(j);
        }
    }
    Ok(NeighborTable {
        k,
        delta_max,
        neighbors,
        distances,
    })
}

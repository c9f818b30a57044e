//! Binary occupancy grids over the cube `[-0.5, 0.5]^3`.
//!
//! Cell `(i, j, k)` (along x, y, z) has linear index `(i * n + j) * n + k`,
//! so x is the slowest axis. Bits are packed little-endian: bit `b` of the
//! grid lives in byte `b / 8` at position `b % 8`.

use std::io::{Read, Write};

use log::warn;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

pub const GRID_MAGIC: &[u8; 4] = b"VOXG";
pub const GRID_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct OccupancyGrid {
    n: usize,
    bits: Vec<u8>,
}

/// Latent-resolution mask; same layout as a grid.
pub type LatentMask = OccupancyGrid;

impl OccupancyGrid {
    pub fn empty(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("grid resolution must be >= 2, got {n}")));
        }
        Ok(OccupancyGrid {
            n,
            bits: vec![0; (n * n * n).div_ceil(8)],
        })
    }

    pub fn full(n: usize) -> Result<Self> {
        let mut g = Self::empty(n)?;
        for idx in 0..g.len() {
            g.set_index(idx, true);
        }
        Ok(g)
    }

    pub fn from_bools(n: usize, cells: &[bool]) -> Result<Self> {
        let mut g = Self::empty(n)?;
        if cells.len() != g.len() {
            return Err(Error::shape("grid", format!("{} cells for n = {n}", cells.len())));
        }
        for (i, &c) in cells.iter().enumerate() {
            g.set_index(i, c);
        }
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of cells, `n^3`.
    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n + j) * self.n + k
    }

    pub fn get_index(&self, idx: usize) -> bool {
        self.bits[idx / 8] >> (idx % 8) & 1 == 1
    }

    pub fn set_index(&mut self, idx: usize, on: bool) {
        let mask = 1u8 << (idx % 8);
        if on {
            self.bits[idx / 8] |= mask;
        } else {
            self.bits[idx / 8] &= !mask;
        }
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.get_index(self.index(i, j, k))
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, on: bool) {
        let idx = self.index(i, j, k);
        self.set_index(idx, on);
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.get_index(i)).collect()
    }

    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    /// Writes the grid file: magic, version, `n`, packed bits, then the
    /// source bounding box as six `f32` (min xyz, max xyz).
    pub fn write(&self, w: &mut impl Write, bbox: [f32; 6]) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&GRID_VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        w.write_all(&self.bits)?;
        for v in bbox {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<(Self, [f32; 6])> {
        let trunc = |e: std::io::Error| Error::Format(format!("truncated grid file: {e}"));
        let mut head = [0u8; 12];
        r.read_exact(&mut head).map_err(trunc)?;
        if &head[..4] != GRID_MAGIC {
            return Err(Error::Format(format!("bad grid magic {:?}", &head[..4])));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != GRID_VERSION {
            return Err(Error::Format(format!("unsupported grid version {version}")));
        }
        let n = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut g = Self::empty(n).map_err(|e| Error::Format(e.to_string()))?;
        r.read_exact(&mut g.bits).map_err(trunc)?;
        let mut bbox = [0f32; 6];
        for v in &mut bbox {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(trunc)?;
            *v = f32::from_le_bytes(b);
        }
        Ok((g, bbox))
    }
}

/// Coordinates this far outside the cube are rounding noise from
/// normalization and are clamped silently.
const RANGE_SLACK: f64 = 1e-9;

/// Per-axis cell index `floor((c + 0.5) * n)` clamped to `[0, n-1]`;
/// the flag reports whether the point lay outside the cube.
fn cell_of(c: f64, n: usize) -> (usize, bool) {
    let f = ((c + 0.5) * n as f64).floor();
    if f < 0.0 {
        (0, c < -0.5 - RANGE_SLACK)
    } else if f >= n as f64 {
        // The upper face c = 0.5 lands here without being out of range.
        (n - 1, c > 0.5 + RANGE_SLACK)
    } else {
        (f as usize, false)
    }
}

/// Voxelizes and returns the number of points that fell outside the cube.
pub fn voxelize_counting(cloud: &PointCloud, n: usize) -> Result<(OccupancyGrid, usize)> {
    if cloud.is_empty() {
        return Err(Error::Empty("voxelize: empty point cloud"));
    }
    let mut grid = OccupancyGrid::empty(n)?;
    let mut clamped = 0;
    for p in &cloud.points {
        let (i, a) = cell_of(p.x, n);
        let (j, b) = cell_of(p.y, n);
        let (k, c) = cell_of(p.z, n);
        clamped += (a || b || c) as usize;
        grid.set(i, j, k, true);
    }
    if clamped > 0 {
        warn!("voxelize: {clamped} of {} points outside [-0.5, 0.5]^3 were clamped", cloud.len());
    }
    Ok((grid, clamped))
}

pub fn voxelize(cloud: &PointCloud, n: usize) -> Result<OccupancyGrid> {
    voxelize_counting(cloud, n).map(|(g, _)| g)
}

/// Any-rule pooling of `(n / r)^3` blocks.
pub fn downsample_mask(grid: &OccupancyGrid, r: usize) -> Result<LatentMask> {
    let n = grid.n;
    if r == 0 || n % r != 0 {
        return Err(Error::invalid(format!("grid resolution {n} is not divisible by {r}")));
    }
    let f = n / r;
    let mut out = OccupancyGrid::empty(r)?;
    for (i, j, k) in sparse_coords(grid) {
        out.set(i / f, j / f, k / f, true);
    }
    Ok(out)
}

/// Occupied cells in lexicographic `(i, j, k)` order.
pub fn sparse_coords(grid: &OccupancyGrid) -> Vec<(usize, usize, usize)> {
    let n = grid.n;
    (0..grid.len())
        .filter(|&idx| grid.get_index(idx))
        .map(|idx| (idx / (n * n), (idx / n) % n, idx % n))
        .collect()
}

pub fn voxel_centers(grid: &OccupancyGrid) -> Result<PointCloud> {
    let coords = sparse_coords(grid);
    if coords.is_empty() {
        return Err(Error::Empty("voxel_centers: grid has no occupied cell"));
    }
    let n = grid.n as f64;
    let c = |i: usize| (i as f64 + 0.5) / n - 0.5;
    Ok(PointCloud::new(
        coords.into_iter().map(|(i, j, k)| Vec3::new(c(i), c(j), c(k))).collect(),
    ))
}

pub fn grid_iou(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<f64> {
    if a.n != b.n {
        return Err(Error::shape("grid_iou", format!("resolution {} vs {}", a.n, b.n)));
    }
    let (inter, union) = a.bits.iter().zip(&b.bits).fold((0u32, 0u32), |(i, u), (x, y)| {
        (i + (x & y).count_ones(), u + (x | y).count_ones())
    });
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

//! Sparse radiance fields stored as COO voxel lists.
//!
//! A field of resolution `H` covers the world cube `[-1, 1]^3`; voxel `(i, j, k)`
//! is centred at `-1 + (i + 0.5) * 2 / H` along x (and likewise for y, z).
//! Every voxel carries `1 + d` features: a raw density followed by `d` radiance
//! coefficients.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer voxel coordinate.
pub type Coord = [u16; 3];

/// Largest resolution whose voxel lookup table is held densely in memory.
const DENSE_INDEX_MAX: u32 = 128;
/// Largest resolution that may be expanded into a dense array.
pub const DENSIFY_MAX: u32 = 64;

const MAGIC: &[u8; 4] = b"SRF1";
const VERSION: u32 = 1;

/// Radiance width: plain RGB or four real SH coefficients per channel.
pub fn valid_color_dim(d: usize) -> bool {
    d == 3 || d == 12
}

#[derive(Debug, Clone)]
enum VoxelIndex {
    Dense(Vec<u32>),
    Hashed(HashMap<u64, u32>),
}

impl VoxelIndex {
    const EMPTY: u32 = u32::MAX;

    fn new(resolution: u32) -> Self {
        if resolution <= DENSE_INDEX_MAX {
            VoxelIndex::Dense(vec![Self::EMPTY; (resolution as usize).pow(3)])
        } else {
            VoxelIndex::Hashed(HashMap::new())
        }
    }

    fn key(h: u32, c: Coord) -> u64 {
        let h = h as u64;
        (c[0] as u64 * h + c[1] as u64) * h + c[2] as u64
    }

    fn get(&self, h: u32, c: Coord) -> Option<usize> {
        let key = Self::key(h, c);
        match self {
            VoxelIndex::Dense(v) => {
                let slot = v[key as usize];
                (slot != Self::EMPTY).then_some(slot as usize)
            }
            VoxelIndex::Hashed(m) => m.get(&key).map(|&s| s as usize),
        }
    }

    fn set(&mut self, h: u32, c: Coord, slot: usize) {
        let key = Self::key(h, c);
        match self {
            VoxelIndex::Dense(v) => v[key as usize] = slot as u32,
            VoxelIndex::Hashed(m) => {
                m.insert(key, slot as u32);
            }
        }
    }
}

/// Per-component divisors applied before feeding fields to the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationSpec {
    pub density_scale: f64,
    pub color_scale: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            density_scale: 10_000.0,
            color_scale: 10.0,
        }
    }
}

impl NormalizationSpec {
    pub fn new(density_scale: f64, color_scale: f64) -> Result<Self> {
        let spec = Self {
            density_scale,
            color_scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density_scale > 0.0 && self.color_scale > 0.0)
            || !self.density_scale.is_finite()
            || !self.color_scale.is_finite()
        {
            return Err(Error::Config(format!(
                "normalization scales must be positive, got ({}, {})",
                self.density_scale, self.color_scale
            )));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        Self {
            density_scale: 1.0 / self.density_scale,
            color_scale: 1.0 / self.color_scale,
        }
    }
}

/// Dense `H x H x H x C` array, row-major with the channel innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    pub resolution: u32,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl DenseGrid {
    pub fn zeros(resolution: u32, channels: usize) -> Self {
        Self {
            resolution,
            channels,
            data: vec![0.0; (resolution as usize).pow(3) * channels],
        }
    }

    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        let h = self.resolution as usize;
        ((i * h + j) * h + k) * self.channels
    }

    pub fn cell(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let o = self.offset(i, j, k);
        &self.data[o..o + self.channels]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize, k: usize) -> &mut [f64] {
        let o = self.offset(i, j, k);
        &mut self.data[o..o + self.channels]
    }
}

/// A sparse voxel radiance field in coordinate-list form.
#[derive(Debug, Clone)]
pub struct SparseRadianceField {
    resolution: u32,
    color_dim: usize,
    coords: Vec<Coord>,
    features: Vec<f64>,
    index: VoxelIndex,
}

impl SparseRadianceField {
    pub fn new(resolution: u32, color_dim: usize) -> Result<Self> {
        if resolution < 2 || resolution > u16::MAX as u32 + 1 {
            return Err(Error::Config(format!(
                "resolution must lie in [2, 65536], got {resolution}"
            )));
        }
        if !valid_color_dim(color_dim) {
            return Err(Error::Config(format!(
                "color_dim must be 3 or 12, got {color_dim}"
            )));
        }
        Ok(Self {
            resolution,
            color_dim,
            coords: Vec::new(),
            features: Vec::new(),
            index: VoxelIndex::new(resolution),
        })
    }

    /// Build a field from parallel coordinate and flat feature lists.
    pub fn from_parts(
        resolution: u32,
        color_dim: usize,
        coords: Vec<Coord>,
        features: Vec<f64>,
    ) -> Result<Self> {
        let mut srf = Self::new(resolution, color_dim)?;
        let width = srf.width();
        if features.len() != coords.len() * width {
            return Err(Error::Shape(format!(
                "{} coords need {} features, got {}",
                coords.len(),
                coords.len() * width,
                features.len()
            )));
        }
        srf.coords.reserve(coords.len());
        srf.features.reserve(features.len());
        for (c, f) in coords.iter().zip(features.chunks_exact(width)) {
            srf.insert([c[0] as u32, c[1] as u32, c[2] as u32], f)?;
        }
        Ok(srf)
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn color_dim(&self) -> usize {
        self.color_dim
    }

    /// Feature width `1 + d`.
    pub fn width(&self) -> usize {
        1 + self.color_dim
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Fraction of empty cells, `1 - M / H^3`.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.len() as f64 / (self.resolution as f64).powi(3)
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.features[i * w..(i + 1) * w]
    }

    pub fn feature_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.width();
        &mut self.features[i * w..(i + 1) * w]
    }

    pub fn density(&self, i: usize) -> f64 {
        self.features[i * self.width()]
    }

    pub fn radiance(&self, i: usize) -> &[f64] {
        &self.feature(i)[1..]
    }

    pub fn in_bounds(&self, c: [i64; 3]) -> bool {
        let h = self.resolution as i64;
        c.iter().all(|&v| (0..h).contains(&v))
    }

    /// Storage slot of the voxel at `c`, if present. Out-of-range coordinates
    /// are simply absent.
    pub fn find(&self, c: [i64; 3]) -> Option<usize> {
        if !self.in_bounds(c) {
            return None;
        }
        self.index
            .get(self.resolution, [c[0] as u16, c[1] as u16, c[2] as u16])
    }

    pub fn get(&self, c: [i64; 3]) -> Option<&[f64]> {
        self.find(c).map(|i| self.feature(i))
    }

    pub fn insert(&mut self, coord: [u32; 3], feature: &[f64]) -> Result<()> {
        if coord.iter().any(|&v| v >= self.resolution) {
            return Err(Error::Bounds {
                coord: coord.map(i64::from),
                resolution: self.resolution,
            });
        }
        if feature.len() != self.width() {
            return Err(Error::Shape(format!(
                "feature width {} does not match 1 + d = {}",
                feature.len(),
                self.width()
            )));
        }
        let c = coord.map(|v| v as u16);
        if self.index.get(self.resolution, c).is_some() {
            return Err(Error::Duplicate(c));
        }
        self.index.set(self.resolution, c, self.coords.len());
        self.coords.push(c);
        self.features.extend_from_slice(feature);
        Ok(())
    }

    /// Keep voxels for which `keep(slot)` is true, preserving order.
    pub fn retain_slots(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        let mut out = Self::new(self.resolution, self.color_dim).expect("valid dims");
        for i in 0..self.len() {
            if keep(i) {
                let c = self.coords[i];
                out.index.set(out.resolution, c, out.coords.len());
                out.coords.push(c);
                out.features.extend_from_slice(self.feature(i));
            }
        }
        out
    }

    /// Copy with voxels in lexicographic `(i, j, k)` order.
    pub fn sorted(&self) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_unstable_by_key(|&i| self.coords[i]);
        let mut out = Self::new(self.resolution, self.color_dim).expect("valid dims");
        out.coords.reserve(self.len());
        out.features.reserve(self.features.len());
        for i in order {
            let c = self.coords[i];
            out.index.set(out.resolution, c, out.coords.len());
            out.coords.push(c);
            out.features.extend_from_slice(self.feature(i));
        }
        out
    }

    /// Replace the feature buffer wholesale (same voxel set).
    pub fn with_features(&self, features: Vec<f64>) -> Result<Self> {
        if features.len() != self.features.len() {
            return Err(Error::Shape(format!(
                "expected {} features, got {}",
                self.features.len(),
                features.len()
            )));
        }
        let mut out = self.clone();
        out.features = features;
        Ok(out)
    }

    /// Round every feature to the nearest `f32`, the on-disk precision.
    pub fn round_to_storage(&mut self) {
        for f in &mut self.features {
            *f = *f as f32 as f64;
        }
    }

    pub fn densify(&self) -> Result<DenseGrid> {
        if self.resolution > DENSIFY_MAX {
            return Err(Error::Capacity(format!(
                "densify is limited to H <= {DENSIFY_MAX}, got {}",
                self.resolution
            )));
        }
        let mut grid = DenseGrid::zeros(self.resolution, self.width());
        for (i, c) in self.coords.iter().enumerate() {
            grid.cell_mut(c[0] as usize, c[1] as usize, c[2] as usize)
                .copy_from_slice(self.feature(i));
        }
        Ok(grid)
    }

    /// Inverse of [`densify`](Self::densify); all-zero cells are dropped.
    pub fn from_dense(grid: &DenseGrid) -> Result<Self> {
        let d = grid.channels.checked_sub(1).unwrap_or(0);
        let mut srf = Self::new(grid.resolution, d)?;
        let h = grid.resolution as usize;
        for i in 0..h {
            for j in 0..h {
                for k in 0..h {
                    let cell = grid.cell(i, j, k);
                    if cell.iter().any(|&v| v != 0.0) {
                        srf.insert([i as u32, j as u32, k as u32], cell)?;
                    }
                }
            }
        }
        Ok(srf)
    }

    pub fn normalize(&self, spec: &NormalizationSpec) -> Self {
        let mut out = self.clone();
        let w = self.width();
        for f in out.features.chunks_exact_mut(w) {
            f[0] /= spec.density_scale;
            for r in &mut f[1..] {
                *r /= spec.color_scale;
            }
        }
        out
    }

    pub fn denormalize(&self, spec: &NormalizationSpec) -> Self {
        let mut out = self.clone();
        let w = self.width();
        for f in out.features.chunks_exact_mut(w) {
            f[0] *= spec.density_scale;
            for r in &mut f[1..] {
                *r *= spec.color_scale;
            }
        }
        out
    }

    /// Serialize in canonical order: magic, version, H, d, M, coords, features.
    pub fn to_bytes(&self) -> Vec<u8> {
        let sorted = self.sorted();
        let mut out =
            Vec::with_capacity(24 + self.len() * 6 + self.features.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.resolution.to_le_bytes());
        out.extend_from_slice(&(self.color_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for c in &sorted.coords {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for f in &sorted.features {
            out.extend_from_slice(&(*f as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"SRF1\"")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let h = r.u32()?;
        let d = r.u32()? as usize;
        let m_pos = r.pos as u64;
        let m = r.u64()?;
        let mut srf =
            Self::new(h, d).map_err(|e| Error::format(8, format!("bad header: {e}")))?;
        let w = srf.width();
        let needed = m
            .checked_mul(6 + 4 * w as u64)
            .ok_or_else(|| Error::format(m_pos, "voxel count overflows"))?;
        if (bytes.len() - r.pos) as u64 != needed {
            return Err(Error::format(
                bytes.len() as u64,
                format!(
                    "payload is {} bytes, header implies {needed}",
                    bytes.len() - r.pos
                ),
            ));
        }
        let m = m as usize;
        let mut coords = Vec::with_capacity(m);
        for _ in 0..m {
            coords.push([r.u16()?, r.u16()?, r.u16()?]);
        }
        let mut features = Vec::with_capacity(m * w);
        for _ in 0..m * w {
            features.push(r.f32()? as f64);
        }
        srf.coords.reserve(m);
        srf.features.reserve(m * w);
        let coord_base = 24u64;
        for (n, (c, f)) in coords.iter().zip(features.chunks_exact(w)).enumerate() {
            srf.insert([c[0] as u32, c[1] as u32, c[2] as u32], f)
                .map_err(|e| Error::format(coord_base + 6 * n as u64, e.to_string()))?;
        }
        Ok(srf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Set equality: same dimensions and the same voxels with bitwise-equal features.
impl PartialEq for SparseRadianceField {
    fn eq(&self, other: &Self) -> bool {
        if self.resolution != other.resolution
            || self.color_dim != other.color_dim
            || self.len() != other.len()
        {
            return false;
        }
        self.coords.iter().enumerate().all(|(i, c)| {
            other
                .get(c.map(i64::from))
                .is_some_and(|g| {
                    g.iter()
                        .zip(self.feature(i))
                        .all(|(a, b)| a.to_bits() == b.to_bits())
                })
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// World-space centre of voxel index `i` along one axis.
pub fn voxel_center(i: f64, resolution: u32) -> f64 {
    -1.0 + (i + 0.5) * 2.0 / resolution as f64
}

/// Continuous grid coordinate of a world-space position along one axis.
pub fn world_to_grid(x: f64, resolution: u32) -> f64 {
    (x + 1.0) * 0.5 * resolution as f64 - 0.5
}

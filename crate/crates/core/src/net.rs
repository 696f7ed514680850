//! Sparse convolutional encoder-decoder that maps partial fields to whole
//! ones, with a small reverse-mode tape, AdamW training and checkpoints.
//!
//! Layout of the network for `depth = D`:
//!
//! ```text
//! e0 = relu(subm3(x))                      level 0
//! el = relu(conv3 stride s_l (e{l-1}))     levels 1..=D
//! uD = eD
//! ul = relu(up(u{l+1}) + el)               levels D-1..=0, union of supports
//! f  = relu(subm3(u0))
//! density = 1x1(f), radiance = 1x1(f)
//! ```
//!
//! `subm3` keeps the input support; strided convolutions produce every coarse
//! site whose kernel footprint holds an input; `up` emits all children of
//! every coarse site, so the output can grow beyond the input support.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraView, Vec3};
use crate::error::{Error, Result};
use crate::loss::{loss_sample_coords, total_loss, LossSampling, LossWeights, QGaussianSpec, RenderTargets};
use crate::par;
use crate::raster::ImageBuffer;
use crate::render::RenderConfig;
use crate::srf::{Coord, NormalizationSpec, SparseRadianceField};

/// Input width: density plus RGB.
pub const IN_CHANNELS: usize = 4;
/// Output radiance width: degree-1 SH for three channels.
pub const OUT_COLOR_DIM: usize = 12;

const DENSE_LEVEL_MAX: usize = 128;

fn pack(c: [i32; 3]) -> u64 {
    ((c[0] as u64) << 42) | ((c[1] as u64) << 21) | c[2] as u64
}

#[derive(Debug, Clone)]
enum CoordIndex {
    Dense { extent: usize, slots: Vec<u32> },
    Hashed(HashMap<u64, u32>),
}

impl CoordIndex {
    fn build(extent: usize, coords: &[[i32; 3]]) -> Self {
        if extent <= DENSE_LEVEL_MAX {
            let mut slots = vec![u32::MAX; extent * extent * extent];
            for (i, c) in coords.iter().enumerate() {
                slots[(c[0] as usize * extent + c[1] as usize) * extent + c[2] as usize] = i as u32;
            }
            CoordIndex::Dense { extent, slots }
        } else {
            CoordIndex::Hashed(coords.iter().enumerate().map(|(i, c)| (pack(*c), i as u32)).collect())
        }
    }

    fn get(&self, c: [i32; 3]) -> Option<usize> {
        match self {
            CoordIndex::Dense { extent, slots } => {
                let e = *extent as i32;
                if c.iter().any(|&v| v < 0 || v >= e) {
                    return None;
                }
                let s = slots[(c[0] as usize * extent + c[1] as usize) * extent + c[2] as usize];
                (s != u32::MAX).then_some(s as usize)
            }
            CoordIndex::Hashed(map) => {
                if c.iter().any(|&v| v < 0) {
                    return None;
                }
                map.get(&pack(c)).map(|&s| s as usize)
            }
        }
    }
}

/// Features on sparse sites of the grid seen at some stride.
///
/// Coordinates are in units of the level, i.e. in `[0, H / stride)`.
#[derive(Debug, Clone)]
pub struct SparseTensor {
    coords: Vec<[i32; 3]>,
    features: Vec<f64>,
    channels: usize,
    stride: u32,
    resolution: u32,
    index: Arc<CoordIndex>,
}

impl SparseTensor {
    pub fn new(
        resolution: u32,
        stride: u32,
        channels: usize,
        coords: Vec<[i32; 3]>,
        features: Vec<f64>,
    ) -> Result<Self> {
        if stride == 0 || !stride.is_power_of_two() || resolution % stride != 0 {
            return Err(Error::Contract(format!(
                "stride {stride} must be a power of two dividing H={resolution}"
            )));
        }
        if features.len() != coords.len() * channels {
            return Err(Error::Shape(format!(
                "{} sites x {channels} channels need {} features, got {}",
                coords.len(),
                coords.len() * channels,
                features.len()
            )));
        }
        let extent = (resolution / stride) as i32;
        if let Some(c) = coords.iter().find(|c| c.iter().any(|&v| v < 0 || v >= extent)) {
            return Err(Error::Bounds {
                coord: c.map(i64::from),
                resolution: extent as u32,
            });
        }
        let index = CoordIndex::build(extent as usize, &coords);
        let t = Self {
            coords,
            features,
            channels,
            stride,
            resolution,
            index: Arc::new(index),
        };
        if t.coords.iter().enumerate().any(|(i, c)| t.index.get(*c) != Some(i)) {
            return Err(Error::Contract("duplicate coordinates in sparse tensor".into()));
        }
        Ok(t)
    }

    /// Density and RGB of a field as a stride-1 tensor.
    pub fn from_field(srf: &SparseRadianceField) -> Result<Self> {
        if srf.color_dim() != 3 {
            return Err(Error::Contract(format!(
                "network input must be an RGB field, got d={}",
                srf.color_dim()
            )));
        }
        let coords = srf.coords().iter().map(|c| c.map(i32::from)).collect();
        Self::new(srf.resolution(), 1, IN_CHANNELS, coords, srf.features().to_vec())
    }

    pub fn coords(&self) -> &[[i32; 3]] {
        &self.coords
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn extent(&self) -> i32 {
        (self.resolution / self.stride) as i32
    }

    pub fn find(&self, c: [i32; 3]) -> Option<usize> {
        self.index.get(c)
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    fn with_features(&self, features: Vec<f64>, channels: usize) -> Self {
        debug_assert_eq!(features.len(), self.len() * channels);
        Self {
            coords: self.coords.clone(),
            features,
            channels,
            stride: self.stride,
            resolution: self.resolution,
            index: Arc::clone(&self.index),
        }
    }
}

/// Convolution weights laid out as `kernel_volume x c_in x c_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kernel_size: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvWeights {
    pub fn zeros(kernel_size: usize, c_in: usize, c_out: usize) -> Self {
        let kv = kernel_size.pow(3);
        Self {
            kernel_size,
            c_in,
            c_out,
            weight: vec![0.0; kv * c_in * c_out],
            bias: vec![0.0; c_out],
        }
    }

    fn check(&self, c_in: usize) -> Result<()> {
        let kv = self.kernel_size.pow(3);
        if self.c_in != c_in
            || self.weight.len() != kv * self.c_in * self.c_out
            || self.bias.len() != self.c_out
        {
            return Err(Error::Contract(format!(
                "weights {}^3 x {} x {} (bias {}) do not fit {c_in} input channels",
                self.kernel_size,
                self.c_in,
                self.c_out,
                self.bias.len()
            )));
        }
        Ok(())
    }
}

/// Kernel offsets in `[-r, r]^3` for an odd kernel size, `z` fastest.
fn kernel_offsets(kernel_size: usize) -> Vec<[i32; 3]> {
    let r = (kernel_size / 2) as i32;
    let mut out = Vec::with_capacity(kernel_size.pow(3));
    for x in -r..=r {
        for y in -r..=r {
            for z in -r..=r {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Compressed lists of `(kernel tap, input row)` per output row.
#[derive(Debug, Clone, Default)]
struct Rulebook {
    starts: Vec<u32>,
    taps: Vec<(u32, u32)>,
}

impl Rulebook {
    fn outputs(&self) -> usize {
        self.starts.len().saturating_sub(1)
    }

    fn row(&self, o: usize) -> &[(u32, u32)] {
        &self.taps[self.starts[o] as usize..self.starts[o + 1] as usize]
    }

    fn from_rows(rows: Vec<Vec<(u32, u32)>>) -> Self {
        let mut starts = Vec::with_capacity(rows.len() + 1);
        starts.push(0);
        let mut taps = Vec::new();
        for r in rows {
            taps.extend(r);
            starts.push(taps.len() as u32);
        }
        Self { starts, taps }
    }

    /// Same pairs grouped by input row: `(tap, output row)`.
    fn transpose(&self, inputs: usize) -> Self {
        let mut count = vec![0u32; inputs + 1];
        for &(_, i) in &self.taps {
            count[i as usize + 1] += 1;
        }
        for i in 0..inputs {
            count[i + 1] += count[i];
        }
        let mut fill = count.clone();
        let mut taps = vec![(0, 0); self.taps.len()];
        for o in 0..self.outputs() {
            for &(k, i) in self.row(o) {
                let slot = &mut fill[i as usize];
                taps[*slot as usize] = (k, o as u32);
                *slot += 1;
            }
        }
        Self { starts: count, taps }
    }
}

fn sorted_unique(mut v: Vec<[i32; 3]>) -> Vec<[i32; 3]> {
    v.sort_unstable();
    v.dedup();
    v
}

/// Sites of a strided convolution: every `q` with some `stride * q + o` in
/// the input for a kernel offset `o`, kept inside the coarser level.
fn conv_output_coords(input: &SparseTensor, kernel_size: usize, stride: u32) -> Vec<[i32; 3]> {
    let s = stride as i32;
    let extent = input.extent() / s;
    let offs = kernel_offsets(kernel_size);
    let mut out = Vec::with_capacity(input.len() * offs.len() / (s * s * s) as usize + 1);
    for p in &input.coords {
        for o in &offs {
            let r = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
            if r.iter().all(|&v| v.rem_euclid(s) == 0) {
                let q = r.map(|v| v.div_euclid(s));
                if q.iter().all(|&v| v >= 0 && v < extent) {
                    out.push(q);
                }
            }
        }
    }
    sorted_unique(out)
}

fn conv_rulebook(input: &SparseTensor, out: &[[i32; 3]], kernel_size: usize, stride: u32) -> Rulebook {
    let offs = kernel_offsets(kernel_size);
    let s = stride as i32;
    let rows = par::map_slice(out, |q| {
        let mut row = Vec::new();
        for (k, o) in offs.iter().enumerate() {
            let p = [s * q[0] + o[0], s * q[1] + o[1], s * q[2] + o[2]];
            if let Some(i) = input.find(p) {
                row.push((k as u32, i as u32));
            }
        }
        row
    });
    Rulebook::from_rows(rows)
}

fn transposed_rulebook(input: &SparseTensor, stride: u32) -> (Vec<[i32; 3]>, Rulebook) {
    let s = stride as i32;
    let mut pairs: Vec<([i32; 3], (u32, u32))> = Vec::with_capacity(input.len() * (s * s * s) as usize);
    for (i, q) in input.coords.iter().enumerate() {
        let mut k = 0u32;
        for a in 0..s {
            for b in 0..s {
                for c in 0..s {
                    pairs.push(([s * q[0] + a, s * q[1] + b, s * q[2] + c], (k, i as u32)));
                    k += 1;
                }
            }
        }
    }
    pairs.sort_unstable_by_key(|p| p.0);
    let coords = pairs.iter().map(|p| p.0).collect();
    let rows = pairs.into_iter().map(|p| vec![p.1]).collect();
    (coords, Rulebook::from_rows(rows))
}

fn apply_rulebook(input: &SparseTensor, rb: &Rulebook, w: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
    let c_in = input.channels;
    let mut out = vec![0.0; rb.outputs() * c_out];
    par::for_each_row_mut(&mut out, c_out, |o, row| {
        row.copy_from_slice(b);
        for &(k, i) in rb.row(o) {
            let x = input.feature(i as usize);
            let wk = &w[k as usize * c_in * c_out..(k as usize + 1) * c_in * c_out];
            for (ci, &xv) in x.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wr = &wk[ci * c_out..(ci + 1) * c_out];
                for (r, wv) in row.iter_mut().zip(wr) {
                    *r += xv * wv;
                }
            }
        }
    });
    out
}

/// Generalised sparse convolution with stride `stride`.
///
/// Output sites are all coarse sites whose kernel footprint covers an input
/// site; each output sums `W_o^T f_in` over present inputs at offset `o`.
pub fn sparse_conv3d(input: &SparseTensor, weights: &ConvWeights, stride: u32) -> Result<SparseTensor> {
    weights.check(input.channels)?;
    if weights.kernel_size % 2 == 0 {
        return Err(Error::Contract("kernel size must be odd".into()));
    }
    if stride == 0 || !stride.is_power_of_two() || input.extent() as u32 % stride != 0 {
        return Err(Error::Contract(format!("stride {stride} does not divide the level")));
    }
    let coords = conv_output_coords(input, weights.kernel_size, stride);
    let rb = conv_rulebook(input, &coords, weights.kernel_size, stride);
    let feats = apply_rulebook(input, &rb, &weights.weight, &weights.bias, weights.c_out);
    SparseTensor::new(input.resolution, input.stride * stride, weights.c_out, coords, feats)
}

/// Stride-1 convolution evaluated only on the input's own sites.
pub fn submanifold_conv3d(input: &SparseTensor, weights: &ConvWeights) -> Result<SparseTensor> {
    weights.check(input.channels)?;
    let rb = conv_rulebook(input, &input.coords, weights.kernel_size, 1);
    let feats = apply_rulebook(input, &rb, &weights.weight, &weights.bias, weights.c_out);
    Ok(input.with_features(feats, weights.c_out))
}

/// Transposed convolution with kernel = stride: every site emits all
/// `stride^3` children at the finer level.
pub fn transposed_conv3d(input: &SparseTensor, weights: &ConvWeights) -> Result<SparseTensor> {
    weights.check(input.channels)?;
    let s = weights.kernel_size as u32;
    if !s.is_power_of_two() || input.stride % s != 0 {
        return Err(Error::Contract(format!(
            "cannot upsample stride {} by {s}",
            input.stride
        )));
    }
    let (coords, rb) = transposed_rulebook(input, s);
    let feats = apply_rulebook(input, &rb, &weights.weight, &weights.bias, weights.c_out);
    SparseTensor::new(input.resolution, input.stride / s, weights.c_out, coords, feats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Number of downsampling levels.
    pub depth: usize,
    pub strides: Vec<u32>,
    /// Widths per level; levels past the end reuse the last width.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    /// Seed for weight initialisation.
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            strides: vec![2, 2, 2],
            channels: vec![16, 32, 64],
            kernel_size: 3,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return cfg("depth must be at least 1".into());
        }
        if self.strides.len() != self.depth {
            return cfg(format!("{} strides given for depth {}", self.strides.len(), self.depth));
        }
        if self.strides.iter().any(|s| !s.is_power_of_two() || *s < 2) {
            return cfg(format!("strides must be powers of two >= 2, got {:?}", self.strides));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return cfg(format!("channel widths must be positive, got {:?}", self.channels));
        }
        if self.kernel_size % 2 == 0 {
            return cfg(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.channels[level.min(self.channels.len() - 1)]
    }

    /// Product of all strides; the input resolution must be a multiple.
    pub fn total_stride(&self) -> u32 {
        self.strides.iter().product()
    }

    fn layers(&self) -> Vec<LayerShape> {
        let k = self.kernel_size;
        let mut v = vec![LayerShape::new(k, IN_CHANNELS, self.width(0))];
        for l in 1..=self.depth {
            v.push(LayerShape::new(k, self.width(l - 1), self.width(l)));
        }
        for l in (0..self.depth).rev() {
            v.push(LayerShape::new(self.strides[l] as usize, self.width(l + 1), self.width(l)));
        }
        v.push(LayerShape::new(k, self.width(0), self.width(0)));
        v.push(LayerShape::new(1, self.width(0), 1));
        v.push(LayerShape::new(1, self.width(0), OUT_COLOR_DIM));
        let mut offset = 0;
        for l in &mut v {
            l.offset = offset;
            offset += l.len();
        }
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(LayerShape::len).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    kernel: usize,
    c_in: usize,
    c_out: usize,
    offset: usize,
}

impl LayerShape {
    fn new(kernel: usize, c_in: usize, c_out: usize) -> Self {
        Self { kernel, c_in, c_out, offset: 0 }
    }

    fn weight_len(&self) -> usize {
        self.kernel.pow(3) * self.c_in * self.c_out
    }

    fn len(&self) -> usize {
        self.weight_len() + self.c_out
    }
}

enum Op {
    Conv { layer: usize, input: usize, output: usize, rb: Rulebook },
    Relu { input: usize, output: usize },
    /// `output = a + b` on the union of both supports.
    Add { a: usize, b: usize, output: usize, rows_a: Vec<u32>, rows_b: Vec<u32> },
}

/// Values and operations recorded by a forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<SparseTensor>,
    ops: Vec<Op>,
    density: usize,
    radiance: usize,
}

impl Tape {
    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetConfig,
    /// All weights and biases, f32-representable.
    pub params: Vec<f64>,
}

impl Network {
    /// He-initialised network; output heads start small.
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let layers = config.layers();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![0.0; config.parameter_count()];
        let heads = layers.len() - 2;
        for (n, l) in layers.iter().enumerate() {
            let fan_in = (l.kernel.pow(3) * l.c_in) as f64;
            let std = if n >= heads { 0.1 } else { 1.0 } * (2.0 / fan_in).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[l.offset..l.offset + l.weight_len()] {
                *p = normal.sample(&mut rng) as f32 as f64;
            }
        }
        Ok(Self { config, params })
    }

    fn weights(&self, l: &LayerShape) -> (&[f64], &[f64]) {
        let w = &self.params[l.offset..l.offset + l.weight_len()];
        let b = &self.params[l.offset + l.weight_len()..l.offset + l.len()];
        (w, b)
    }

    /// Forward pass that records a tape for [`Network::backward`].
    ///
    /// `partial` must be an RGB field in normalised units. The output has
    /// `d = 12`, lives at the input resolution and is never pruned.
    pub fn forward_with_tape(&self, partial: &SparseRadianceField) -> Result<(SparseRadianceField, Tape)> {
        let h = partial.resolution();
        if h % self.config.total_stride() != 0 {
            return Err(Error::Contract(format!(
                "resolution {h} is not a multiple of the total stride {}",
                self.config.total_stride()
            )));
        }
        let layers = self.config.layers();
        let depth = self.config.depth;
        let mut tape = Tape::default();
        tape.nodes.push(SparseTensor::from_field(partial)?);

        let conv = |tape: &mut Tape, layer: usize, input: usize, kind: ConvKind| -> usize {
            let l = &layers[layer];
            let (w, b) = self.weights(l);
            let x = &tape.nodes[input];
            let (coords, rb, stride) = match kind {
                ConvKind::Submanifold => {
                    (x.coords.clone(), conv_rulebook(x, &x.coords, l.kernel, 1), x.stride)
                }
                ConvKind::Strided(s) => {
                    let c = conv_output_coords(x, l.kernel, s);
                    let rb = conv_rulebook(x, &c, l.kernel, s);
                    (c, rb, x.stride * s)
                }
                ConvKind::Transposed(s) => {
                    let (c, rb) = transposed_rulebook(x, s);
                    (c, rb, x.stride / s)
                }
            };
            let feats = apply_rulebook(x, &rb, w, b, l.c_out);
            let out = if matches!(kind, ConvKind::Submanifold) {
                x.with_features(feats, l.c_out)
            } else {
                SparseTensor::new(x.resolution, stride, l.c_out, coords, feats).expect("valid sites")
            };
            tape.nodes.push(out);
            let output = tape.nodes.len() - 1;
            tape.ops.push(Op::Conv { layer, input, output, rb });
            output
        };
        let relu = |tape: &mut Tape, input: usize| -> usize {
            let x = &tape.nodes[input];
            let out = x.with_features(x.features.iter().map(|v| v.max(0.0)).collect(), x.channels);
            tape.nodes.push(out);
            let output = tape.nodes.len() - 1;
            tape.ops.push(Op::Relu { input, output });
            output
        };

        let mut enc = Vec::with_capacity(depth + 1);
        let c = conv(&mut tape, 0, 0, ConvKind::Submanifold);
        enc.push(relu(&mut tape, c));
        for l in 1..=depth {
            let c = conv(&mut tape, l, enc[l - 1], ConvKind::Strided(self.config.strides[l - 1]));
            enc.push(relu(&mut tape, c));
        }
        let mut up = enc[depth];
        for (n, l) in (0..depth).rev().enumerate() {
            let t = conv(&mut tape, depth + 1 + n, up, ConvKind::Transposed(self.config.strides[l]));
            let s = add_union(&mut tape, t, enc[l]);
            up = relu(&mut tape, s);
        }
        let f = conv(&mut tape, 2 * depth + 1, up, ConvKind::Submanifold);
        let f = relu(&mut tape, f);
        tape.density = conv(&mut tape, 2 * depth + 2, f, ConvKind::Submanifold);
        tape.radiance = conv(&mut tape, 2 * depth + 3, f, ConvKind::Submanifold);

        let dn = &tape.nodes[tape.density];
        let rn = &tape.nodes[tape.radiance];
        let mut feats = Vec::with_capacity(dn.len() * (1 + OUT_COLOR_DIM));
        for i in 0..dn.len() {
            feats.push(dn.features[i]);
            feats.extend_from_slice(rn.feature(i));
        }
        let coords: Vec<Coord> = dn.coords.iter().map(|c| c.map(|v| v as u16)).collect();
        let out = SparseRadianceField::from_parts(h, OUT_COLOR_DIM, coords, feats)?;
        Ok((out, tape))
    }

    pub fn forward(&self, partial: &SparseRadianceField) -> Result<SparseRadianceField> {
        self.forward_with_tape(partial).map(|(out, _)| out)
    }

    /// Parameter gradients for an upstream gradient in the output field's
    /// feature layout.
    pub fn backward(&self, tape: &Tape, d_out: &[f64]) -> Result<Vec<f64>> {
        if tape.is_empty() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        let n = tape.nodes[tape.density].len();
        let w = 1 + OUT_COLOR_DIM;
        if d_out.len() != n * w {
            return Err(Error::Shape(format!(
                "output gradient has {} values, expected {}",
                d_out.len(),
                n * w
            )));
        }
        let layers = self.config.layers();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; tape.nodes.len()];
        grads[tape.density] = Some(d_out.chunks_exact(w).map(|r| r[0]).collect());
        grads[tape.radiance] = Some(d_out.chunks_exact(w).flat_map(|r| r[1..].to_vec()).collect());
        let mut d_params = vec![0.0; self.params.len()];

        for op in tape.ops.iter().rev() {
            match op {
                Op::Conv { layer, input, output, rb } => {
                    let Some(g) = grads[*output].take() else { continue };
                    let l = &layers[*layer];
                    let (wts, _) = self.weights(l);
                    let x = &tape.nodes[*input];
                    let (dw, db) = conv_param_grads(x, rb, &g, l);
                    d_params[l.offset..l.offset + l.weight_len()]
                        .iter_mut()
                        .zip(&dw)
                        .for_each(|(a, b)| *a += b);
                    d_params[l.offset + l.weight_len()..l.offset + l.len()]
                        .iter_mut()
                        .zip(&db)
                        .for_each(|(a, b)| *a += b);
                    if *input != 0 {
                        let dx = conv_input_grad(x, rb, &g, wts, l);
                        accumulate(&mut grads[*input], dx);
                    }
                }
                Op::Relu { input, output } => {
                    let Some(mut g) = grads[*output].take() else { continue };
                    for (gv, v) in g.iter_mut().zip(&tape.nodes[*output].features) {
                        if *v <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads[*input], g);
                }
                Op::Add { a, b, output, rows_a, rows_b } => {
                    let Some(g) = grads[*output].take() else { continue };
                    let c = tape.nodes[*output].channels;
                    for (src, rows) in [(*a, rows_a), (*b, rows_b)] {
                        let mut d = vec![0.0; tape.nodes[src].len() * c];
                        for (i, &r) in rows.iter().enumerate() {
                            let r = r as usize;
                            d[i * c..(i + 1) * c].copy_from_slice(&g[r * c..(r + 1) * c]);
                        }
                        accumulate(&mut grads[src], d);
                    }
                }
            }
        }
        Ok(d_params)
    }

    /// Round parameters to the f32 values a checkpoint stores.
    pub fn round_to_storage(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }
}

#[derive(Clone, Copy)]
enum ConvKind {
    Submanifold,
    Strided(u32),
    Transposed(u32),
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn add_union(tape: &mut Tape, a: usize, b: usize) -> usize {
    let (ta, tb) = (&tape.nodes[a], &tape.nodes[b]);
    let c = ta.channels;
    debug_assert_eq!(c, tb.channels);
    let coords = sorted_unique(ta.coords.iter().chain(&tb.coords).copied().collect());
    let index = CoordIndex::build(ta.extent() as usize, &coords);
    let rows_a: Vec<u32> = ta.coords.iter().map(|p| index.get(*p).unwrap() as u32).collect();
    let rows_b: Vec<u32> = tb.coords.iter().map(|p| index.get(*p).unwrap() as u32).collect();
    let mut feats = vec![0.0; coords.len() * c];
    for (t, rows) in [(ta, &rows_a), (tb, &rows_b)] {
        for (i, &r) in rows.iter().enumerate() {
            let r = r as usize;
            for (dst, src) in feats[r * c..(r + 1) * c].iter_mut().zip(t.feature(i)) {
                *dst += src;
            }
        }
    }
    let out = SparseTensor {
        coords,
        features: feats,
        channels: c,
        stride: ta.stride,
        resolution: ta.resolution,
        index: Arc::new(index),
    };
    tape.nodes.push(out);
    let output = tape.nodes.len() - 1;
    tape.ops.push(Op::Add { a, b, output, rows_a, rows_b });
    output
}

/// Weight and bias gradients; taps are reduced in parallel per kernel
/// offset, each in a fixed order.
fn conv_param_grads(x: &SparseTensor, rb: &Rulebook, g: &[f64], l: &LayerShape) -> (Vec<f64>, Vec<f64>) {
    let (c_in, c_out) = (l.c_in, l.c_out);
    let kv = l.kernel.pow(3);
    let mut by_tap: Vec<Vec<(u32, u32)>> = vec![Vec::new(); kv];
    for o in 0..rb.outputs() {
        for &(k, i) in rb.row(o) {
            by_tap[k as usize].push((i, o as u32));
        }
    }
    let blocks = par::map_slice(&by_tap, |pairs| {
        let mut dw = vec![0.0; c_in * c_out];
        for &(i, o) in pairs {
            let xi = x.feature(i as usize);
            let go = &g[o as usize * c_out..(o as usize + 1) * c_out];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (ci, &xv) in xi.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (d, gv) in dw[ci * c_out..(ci + 1) * c_out].iter_mut().zip(go) {
                    *d += xv * gv;
                }
            }
        }
        dw
    });
    let mut db = vec![0.0; c_out];
    for row in g.chunks_exact(c_out) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    (blocks.concat(), db)
}

fn conv_input_grad(x: &SparseTensor, rb: &Rulebook, g: &[f64], w: &[f64], l: &LayerShape) -> Vec<f64> {
    let (c_in, c_out) = (l.c_in, l.c_out);
    let rt = rb.transpose(x.len());
    let mut dx = vec![0.0; x.len() * c_in];
    par::for_each_row_mut(&mut dx, c_in, |i, row| {
        for &(k, o) in rt.row(i) {
            let go = &g[o as usize * c_out..(o as usize + 1) * c_out];
            let wk = &w[k as usize * c_in * c_out..(k as usize + 1) * c_in * c_out];
            for (ci, r) in row.iter_mut().enumerate() {
                let wr = &wk[ci * c_out..(ci + 1) * c_out];
                *r += wr.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    });
    dx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay, scaled by the current learning rate.
    pub weight_decay: f64,
    /// Learning-rate factor applied once per epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Rendered views per sample and step for the rendering term.
    pub views_per_step: usize,
    pub sampling: LossSampling,
    pub qgaussian: QGaussianSpec,
    pub normalization: NormalizationSpec,
    pub render: RenderConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
            lr_decay: 0.99,
            epochs: 100,
            batch_size: 1,
            views_per_step: 3,
            sampling: LossSampling::QGaussian,
            qgaussian: QGaussianSpec::default(),
            normalization: NormalizationSpec::default(),
            render: RenderConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return cfg(format!("learning_rate must be nonnegative, got {}", self.learning_rate));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return cfg(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return cfg("betas must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return cfg("epsilon must be positive and weight_decay nonnegative".into());
        }
        if self.batch_size == 0 || self.views_per_step == 0 {
            return cfg("batch_size and views_per_step must be positive".into());
        }
        self.qgaussian.validate()?;
        self.normalization.validate()?;
        self.render.validate()
    }
}

/// One training pair: the network sees `partial` and should produce
/// `whole`; `views`/`images` supervise the rendering term.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub partial: SparseRadianceField,
    pub whole: SparseRadianceField,
    pub views: Vec<CameraView>,
    pub images: Vec<ImageBuffer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub l_alpha: f64,
    pub l_rho: f64,
    pub l_r: f64,
    pub total: f64,
}

/// First and second moment estimates of AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// A network together with its optimiser state and training history.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub net: Network,
    pub adam: AdamState,
    /// Epochs completed so far.
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

impl Trainer {
    pub fn new(net: Network) -> Self {
        let n = net.params.len();
        Self { net, adam: AdamState::new(n), epoch: 0, history: Vec::new() }
    }

    fn adam_step(&mut self, grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in self
            .net
            .params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.adam.m)
            .zip(&mut self.adam.v)
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon) + cfg.weight_decay * *p;
            *p -= lr * update;
        }
        self.net.round_to_storage();
    }

    /// Run `epochs` more epochs. Randomness for epoch `e` depends only on
    /// `(cfg.seed, e)`, so resuming from a checkpoint replays the same run.
    pub fn train(
        &mut self,
        data: &[TrainSample],
        cfg: &TrainConfig,
        weights: &LossWeights,
        epochs: usize,
    ) -> Result<()> {
        cfg.validate()?;
        weights.validate()?;
        if data.is_empty() {
            return Err(Error::Contract("training needs at least one sample".into()));
        }
        let h = data[0].whole.resolution();
        for s in data {
            if s.partial.resolution() != h || s.whole.resolution() != h {
                return Err(Error::Contract("all training fields must share one resolution".into()));
            }
            if s.whole.color_dim() != OUT_COLOR_DIM {
                return Err(Error::Contract(format!(
                    "whole fields must have d={OUT_COLOR_DIM}, got {}",
                    s.whole.color_dim()
                )));
            }
            if s.views.len() != s.images.len() || s.views.is_empty() {
                return Err(Error::Contract("each sample needs matching, nonempty views and images".into()));
            }
        }
        let norm = &cfg.normalization;
        let prepared: Vec<(SparseRadianceField, SparseRadianceField)> =
            data.iter().map(|s| (s.partial.normalize(norm), s.whole.normalize(norm))).collect();

        for _ in 0..epochs {
            let epoch = self.epoch;
            let lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch as u64);
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            let mut sums = [0.0; 4];
            let mut steps = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                let plans: Vec<(usize, Vec<Coord>, Vec<usize>)> = batch
                    .iter()
                    .map(|&i| {
                        let (partial, _) = &prepared[i];
                        let coords = loss_sample_coords(h, cfg.sampling, &cfg.qgaussian, partial.len(), &mut rng);
                        let views = pick_views(&data[i].views, cfg.views_per_step, &mut rng);
                        (i, coords, views)
                    })
                    .collect();
                let results = plans
                    .iter()
                    .map(|(i, coords, picks)| {
                        let (partial, whole) = &prepared[*i];
                        let views: Vec<CameraView> = picks.iter().map(|&v| data[*i].views[v].clone()).collect();
                        let images: Vec<ImageBuffer> = picks.iter().map(|&v| data[*i].images[v].clone()).collect();
                        let (pred, tape) = self.net.forward_with_tape(partial)?;
                        let targets = RenderTargets {
                            views: &views,
                            images: &images,
                            render: &cfg.render,
                            normalization: norm,
                        };
                        let report = total_loss(&pred, whole, &targets, weights, coords)?;
                        let g = self.net.backward(&tape, &report.grad)?;
                        Ok((report, g))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut grad = vec![0.0; self.net.params.len()];
                let inv = 1.0 / results.len() as f64;
                for (report, g) in &results {
                    if !report.total.is_finite() {
                        return Err(Error::Divergence(format!(
                            "loss is {} at epoch {epoch}, step {steps}",
                            report.total
                        )));
                    }
                    sums[0] += report.l_alpha;
                    sums[1] += report.l_rho;
                    sums[2] += report.l_r;
                    sums[3] += report.total;
                    for (a, b) in grad.iter_mut().zip(g) {
                        *a += b * inv;
                    }
                }
                steps += results.len();
                self.adam_step(&grad, lr, cfg);
            }
            let n = steps as f64;
            self.history.push(EpochStats {
                epoch,
                learning_rate: lr,
                l_alpha: sums[0] / n,
                l_rho: sums[1] / n,
                l_r: sums[2] / n,
                total: sums[3] / n,
            });
            log::debug!("epoch {epoch}: total loss {:.6}", sums[3] / n);
            self.epoch += 1;
        }
        Ok(())
    }

    /// Write network parameters plus optimiser state and epoch.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = encode_net(&self.net);
        bytes.extend_from_slice(TRAILER_MAGIC);
        bytes.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        bytes.extend_from_slice(&self.adam.step.to_le_bytes());
        for v in self.adam.m.iter().chain(&self.adam.v) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let hist = serde_json::to_vec(&self.history).expect("history serialises");
        bytes.extend_from_slice(&(hist.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&hist);
        write_bytes(path.as_ref(), &bytes)
    }

    /// Load a checkpoint; files without optimiser state start fresh.
    pub fn load(path: impl AsRef<Path>, expected: Option<&NetConfig>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_bytes(path)?;
        let (net, used) = decode_net(&bytes, expected)?;
        let mut trainer = Trainer::new(net);
        let rest = &bytes[used..];
        if rest.is_empty() {
            return Ok(trainer);
        }
        let mut r = Reader { bytes: rest, pos: 0, base: used };
        if r.take(4)? != TRAILER_MAGIC {
            return Err(Error::format(used as u64, "unknown trailer"));
        }
        trainer.epoch = r.u64()? as usize;
        trainer.adam.step = r.u64()?;
        let n = trainer.net.params.len();
        for i in 0..2 * n {
            let v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            if i < n {
                trainer.adam.m[i] = v;
            } else {
                trainer.adam.v[i - n] = v;
            }
        }
        let len = r.u64()? as usize;
        let at = r.pos + r.base;
        trainer.history = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::format(at as u64, format!("bad history: {e}")))?;
        if r.pos != r.bytes.len() {
            return Err(Error::format((r.pos + r.base) as u64, "trailing bytes after checkpoint"));
        }
        Ok(trainer)
    }
}

/// Pick views spread in azimuth: the views are split into equal azimuth
/// sectors and one random view is taken from each nonempty sector.
fn pick_views(views: &[CameraView], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    let count = count.min(views.len());
    let mut sectors: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (i, v) in views.iter().enumerate() {
        let c: Vec3 = v.pose.center();
        let phi = c.y.atan2(c.x) + std::f64::consts::PI;
        let s = ((phi / std::f64::consts::TAU * count as f64) as usize).min(count - 1);
        sectors[s].push(i);
    }
    let mut out: Vec<usize> = sectors
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s[rng.random_range(0..s.len())])
        .collect();
    while out.len() < count {
        let i = rng.random_range(0..views.len());
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

const MAGIC: &[u8; 4] = b"SNET";
const TRAILER_MAGIC: &[u8; 4] = b"ADAM";
const VERSION: u32 = 1;

fn encode_net(net: &Network) -> Vec<u8> {
    let c = &net.config;
    let mut b = Vec::with_capacity(64 + net.params.len() * 4);
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(c.depth as u32).to_le_bytes());
    for s in &c.strides {
        b.extend_from_slice(&s.to_le_bytes());
    }
    b.extend_from_slice(&(c.channels.len() as u32).to_le_bytes());
    for w in &c.channels {
        b.extend_from_slice(&(*w as u32).to_le_bytes());
    }
    b.extend_from_slice(&(c.kernel_size as u32).to_le_bytes());
    b.extend_from_slice(&c.seed.to_le_bytes());
    b.extend_from_slice(&(net.params.len() as u64).to_le_bytes());
    for p in &net.params {
        b.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    b
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format((self.base + self.pos) as u64, format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_net(bytes: &[u8], expected: Option<&NetConfig>) -> Result<(Network, usize)> {
    let mut r = Reader { bytes, pos: 0, base: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format(0, "not a network checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let depth = r.u32()? as usize;
    if depth > 16 {
        return Err(Error::format(8, format!("implausible depth {depth}")));
    }
    let strides = (0..depth).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let nch = r.u32()? as usize;
    if nch > 64 {
        return Err(Error::format((r.pos - 4) as u64, format!("implausible channel list length {nch}")));
    }
    let channels = (0..nch).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let kernel_size = r.u32()? as usize;
    let seed = r.u64()?;
    let config = NetConfig { depth, strides, channels, kernel_size, seed };
    let header_end = r.pos;
    config.validate().map_err(|e| Error::format(8, format!("bad config echo: {e}")))?;
    if let Some(want) = expected {
        let same_shape = want.depth == config.depth
            && want.strides == config.strides
            && want.channels == config.channels
            && want.kernel_size == config.kernel_size;
        if !same_shape {
            return Err(Error::Shape(format!(
                "checkpoint network {:?}/{:?}/k{} does not match the configured {:?}/{:?}/k{}",
                config.strides, config.channels, config.kernel_size, want.strides, want.channels, want.kernel_size
            )));
        }
    }
    let n = r.u64()? as usize;
    if n != config.parameter_count() {
        return Err(Error::format(header_end as u64, format!(
            "checkpoint holds {n} parameters but its config needs {}",
            config.parameter_count()
        )));
    }
    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format(header_end as u64, "size overflow"))?)?;
    let params = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((Network { config, params }, r.pos))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingFile(path.to_path_buf())),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Write just the network parameters.
pub fn save_net(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_net(net))
}

/// Read the network part of a checkpoint, ignoring any optimiser trailer.
/// With `expected`, a differently shaped network is a shape error.
pub fn load_net(path: impl AsRef<Path>, expected: Option<&NetConfig>) -> Result<Network> {
    let bytes = read_bytes(path.as_ref())?;
    decode_net(&bytes, expected).map(|(n, _)| n)
}

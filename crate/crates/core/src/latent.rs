//! Value-semantic 4-D latent clips and the frame-axis operations on them.
//!
//! A [`LatentClip`] stores `frames × channels × height × width` f32 values in
//! frame-major order. Every operation returns a fresh clip; inputs are never
//! mutated. Reductions (means, mse) accumulate in f64 and round once.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Shape of a clip: frame count plus per-frame channel/height/width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", try_from = "[usize; 4]")]
pub struct Dims {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        let dims = Self {
            frames,
            channels,
            height,
            width,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(invalid(format!("all dims must be >= 1, got {self}")));
        }
        Ok(())
    }

    /// Elements in a single frame (`channels · height · width`).
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.frames * self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_frames(&self, frames: usize) -> Self {
        Self { frames, ..*self }
    }

    pub fn same_frame_shape(&self, other: &Dims) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn to_array(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }
}

impl From<Dims> for [usize; 4] {
    fn from(d: Dims) -> Self {
        d.to_array()
    }
}

impl TryFrom<[usize; 4]> for Dims {
    type Error = crate::Error;

    fn try_from(a: [usize; 4]) -> Result<Self> {
        Dims::new(a[0], a[1], a[2], a[3])
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.frames, self.channels, self.height, self.width
        )
    }
}

/// Half-open frame interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRange {
    pub start: usize,
    pub end: usize,
}

impl FrameRange {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(invalid(format!("frame range start {start} > end {end}")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn check(&self, n_frames: usize) -> Result<()> {
        if self.start > self.end || self.end > n_frames {
            return Err(invalid(format!(
                "frame range [{}, {}) out of bounds for {n_frames} frames",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn overlaps(&self, other: &FrameRange) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl std::fmt::Display for FrameRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    dims: Dims,
    data: Vec<f32>,
}

impl LatentClip {
    /// Builds a clip, rejecting length mismatches and non-finite values.
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(invalid(format!(
                "data length {} does not match dims {dims} ({} elements)",
                data.len(),
                dims.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite value {} at index {i}", data[i])));
        }
        Ok(Self { dims, data })
    }

    pub(crate) fn from_parts(dims: Dims, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        Self { dims, data }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::from_parts(dims, vec![0.0; dims.len()])
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        Self::from_parts(dims, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n_frames(&self) -> usize {
        self.dims.frames
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn frame(&self, index: usize) -> &[f32] {
        let len = self.dims.frame_len();
        &self.data[index * len..(index + 1) * len]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dims.frame_len())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn frame_mut(&mut self, index: usize) -> &mut [f32] {
        let len = self.dims.frame_len();
        &mut self.data[index * len..(index + 1) * len]
    }

    pub(crate) fn zip_map(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.require_same_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.dims, data))
    }

    pub fn require_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(invalid(format!(
                "dimension mismatch: {} vs {}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Reverses the frame order inside `range`; frames outside are untouched.
    pub fn flip_frames(&self, range: FrameRange) -> Result<Self> {
        range.check(self.n_frames())?;
        let order: Vec<usize> = (0..self.n_frames())
            .map(|i| {
                if i >= range.start && i < range.end {
                    range.start + range.end - 1 - i
                } else {
                    i
                }
            })
            .collect();
        self.permute_frames(&order)
    }

    /// `out[i] = self[order[i]]`. `order` must be a permutation.
    pub fn permute_frames(&self, order: &[usize]) -> Result<Self> {
        let n = self.n_frames();
        if order.len() != n {
            return Err(invalid(format!(
                "permutation has {} entries for {n} frames",
                order.len()
            )));
        }
        let mut seen = vec![false; n];
        for &i in order {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(invalid(format!("{order:?} is not a frame permutation")));
            }
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &i in order {
            data.extend_from_slice(self.frame(i));
        }
        Ok(Self::from_parts(self.dims, data))
    }

    /// Copies out the frames in `range`. An empty range is rejected.
    pub fn slice_frames(&self, range: FrameRange) -> Result<Self> {
        range.check(self.n_frames())?;
        if range.is_empty() {
            return Err(invalid(format!("empty frame range {range}")));
        }
        let len = self.dims.frame_len();
        let data = self.data[range.start * len..range.end * len].to_vec();
        Ok(Self::from_parts(self.dims.with_frames(range.len()), data))
    }

    /// Per-pixel mean over the frame axis, as a single-frame clip.
    pub fn frame_mean(&self) -> Self {
        let len = self.dims.frame_len();
        let mut acc = vec![0.0f64; len];
        for frame in self.frames() {
            for (a, &v) in acc.iter_mut().zip(frame) {
                *a += v as f64;
            }
        }
        let n = self.n_frames() as f64;
        let data = acc.into_iter().map(|a| (a / n) as f32).collect();
        Self::from_parts(self.dims.with_frames(1), data)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, other: &Self) -> Result<f64> {
        self.require_same_dims(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn sample_standard_normal(rng: &mut SeededRng, dims: Dims) -> Result<Self> {
        dims.validate()?;
        let data = (0..dims.len()).map(|_| rng.standard_normal() as f32).collect();
        Ok(Self::from_parts(dims, data))
    }
}

/// Concatenates clips along the frame axis.
pub fn concat_frames(parts: &[LatentClip]) -> Result<LatentClip> {
    let first = parts
        .first()
        .ok_or_else(|| invalid("concat_frames needs at least one part"))?;
    let mut frames = 0;
    for p in parts {
        if !p.dims.same_frame_shape(&first.dims) {
            return Err(invalid(format!(
                "cannot concatenate {} with {}: frame shapes differ",
                first.dims, p.dims
            )));
        }
        frames += p.n_frames();
    }
    let mut data = Vec::with_capacity(frames * first.dims.frame_len());
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Ok(LatentClip::from_parts(first.dims.with_frames(frames), data))
}

/// Seeded ChaCha20 stream with a Ziggurat standard-normal transform.
///
/// The same seed always yields the same sample stream within this build.
/// `fork` derives an independent stream from the same seed.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        rand::Rng::random_range(&mut self.inner, 0..n)
    }
}

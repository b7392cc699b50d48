//! Dense feature maps, dilated patches, z-score statistics, convolution,
//! activation and pooling.
//!
//! Every patch in the crate uses one component order: the `k·k` window
//! offsets in row-major order (`dy` outer, `dx` inner), with the `m` channels
//! of each neighbor innermost. Kernels are stored in the same order, so a
//! kernel and a patch can be dotted directly.
//!
//! Pixels outside the image domain read as zero. Values are stored as `f32`;
//! dot products and statistics accumulate in `f64`.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::KernelBank;
use crate::error::{invalid, Result};

/// Floor applied to every standard deviation component.
pub const STD_FLOOR: f64 = 1e-6;

/// A 2D pixel grid with `channels` values per pixel.
///
/// `scale` is the cumulative downsampling factor relative to the original
/// image (1 for inputs).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    scale: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        scale: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(invalid(format!(
                "feature map dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if scale == 0 {
            return Err(invalid("feature map scale must be >= 1"));
        }
        if data.len() != width * height * channels {
            return Err(invalid(format!(
                "feature map data has {} values, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            scale,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize, scale: usize) -> Self {
        assert!(width > 0 && height > 0 && channels > 0 && scale > 0);
        Self {
            width,
            height,
            channels,
            scale,
            data: vec![0.0; width * height * channels],
        }
    }

    /// Builds a map by evaluating `f(x, y, channel)` at every position.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, 1, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, channel: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + channel]
    }

    /// The feature vector `I(p)` of one pixel.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// Copies one channel out as a row-major plane.
    pub fn channel(&self, channel: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn with_scale(mut self, scale: usize) -> Result<Self> {
        if scale == 0 {
            return Err(invalid("feature map scale must be >= 1"));
        }
        self.scale = scale;
        Ok(self)
    }

    /// Loads an 8-bit PNG into `[0, 1]` values: one channel for grayscale
    /// images, three for anything else (alpha is dropped).
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?;
        Ok(Self::from_image(&img))
    }

    pub fn from_image(img: &image::DynamicImage) -> Self {
        use image::ColorType;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = match img.color() {
            ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16 => {
                (1, img.to_luma8().into_raw())
            }
            _ => (3, img.to_rgb8().into_raw()),
        };
        let data = raw.into_iter().map(|v| f32::from(v) / 255.0).collect();
        Self {
            width,
            height,
            channels,
            scale: 1,
            data,
        }
    }

    /// Writes the debugging container: little-endian `u32` width, height,
    /// channels and scale, followed by the `f32` data.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        for v in [self.width, self.height, self.channels, self.scale] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        let field = |i: usize| {
            u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().unwrap()) as usize
        };
        let (width, height, channels, scale) = (field(0), field(1), field(2), field(3));
        let len = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| invalid("feature map header overflows"))?;
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(width, height, channels, scale, data)
    }
}

/// A flattened `k×k×m` neighborhood around `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub values: Vec<f32>,
    pub origin: (usize, usize),
    pub k: usize,
    pub dilation: usize,
}

impl AsRef<[f32]> for Patch {
    fn as_ref(&self) -> &[f32] {
        &self.values
    }
}

/// Componentwise mean and floored population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics that leave values untouched (mean 0, std 1).
    pub fn identity(len: usize) -> Self {
        Self {
            mean: vec![0.0; len],
            std: vec![1.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Z-scores `values` into `out`.
    pub fn normalize_into(&self, values: &[f32], out: &mut [f64]) {
        for (((o, &v), m), s) in out.iter_mut().zip(values).zip(&self.mean).zip(&self.std) {
            *o = (f64::from(v) - m) / s;
        }
    }
}

/// Window offsets `(dx, dy)` of the dilated `k×k` adjacency, row-major.
pub fn adjacency_offsets(k: usize, dilation: usize) -> Result<Vec<(isize, isize)>> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(invalid(format!("window size must be odd and positive, got {k}")));
    }
    if dilation == 0 {
        return Err(invalid("dilation must be >= 1"));
    }
    let r = (k / 2) as isize;
    let d = dilation as isize;
    let mut offsets = Vec::with_capacity(k * k);
    for dy in -r..=r {
        for dx in -r..=r {
            offsets.push((dx * d, dy * d));
        }
    }
    Ok(offsets)
}

#[inline]
pub(crate) fn fill_patch(
    map: &FeatureMap,
    x: usize,
    y: usize,
    offsets: &[(isize, isize)],
    out: &mut [f32],
) {
    let m = map.channels;
    for (slot, &(dx, dy)) in out.chunks_exact_mut(m).zip(offsets) {
        let qx = x as isize + dx;
        let qy = y as isize + dy;
        if qx >= 0 && qy >= 0 && (qx as usize) < map.width && (qy as usize) < map.height {
            slot.copy_from_slice(map.pixel(qx as usize, qy as usize));
        } else {
            slot.fill(0.0);
        }
    }
}

/// Extracts the patch `P(p)` centered at `p`, zero-filling out-of-domain
/// neighbors.
pub fn extract_patch(map: &FeatureMap, p: (usize, usize), k: usize, dilation: usize) -> Result<Patch> {
    if p.0 >= map.width || p.1 >= map.height {
        return Err(invalid(format!(
            "pixel ({}, {}) outside {}x{} domain",
            p.0, p.1, map.width, map.height
        )));
    }
    let offsets = adjacency_offsets(k, dilation)?;
    let mut values = vec![0.0; offsets.len() * map.channels];
    fill_patch(map, p.0, p.1, &offsets, &mut values);
    Ok(Patch {
        values,
        origin: p,
        k,
        dilation,
    })
}

/// Componentwise mean and population standard deviation over a set of
/// equal-length vectors, with each deviation floored at [`STD_FLOOR`].
pub fn zscore_stats<P: AsRef<[f32]>>(patches: &[P]) -> Result<ChannelStats> {
    let first = patches
        .first()
        .ok_or_else(|| invalid("statistics need at least one patch"))?;
    let len = first.as_ref().len();
    let mut mean = vec![0.0f64; len];
    let mut m2 = vec![0.0f64; len];
    // Welford's update, one vector at a time.
    for (n, patch) in patches.iter().enumerate() {
        let values = patch.as_ref();
        if values.len() != len {
            return Err(invalid(format!(
                "patch length {} differs from {len}",
                values.len()
            )));
        }
        let count = (n + 1) as f64;
        for ((mu, acc), &v) in mean.iter_mut().zip(m2.iter_mut()).zip(values) {
            let v = f64::from(v);
            let delta = v - *mu;
            *mu += delta / count;
            *acc += delta * (v - *mu);
        }
    }
    let n = patches.len() as f64;
    let std = m2
        .into_iter()
        .map(|acc| (acc / n).max(0.0).sqrt().max(STD_FLOOR))
        .collect();
    Ok(ChannelStats { mean, std })
}

/// Applies `(v - mean) / std` to every component.
pub fn normalize_patch(patch: &Patch, stats: &ChannelStats) -> Result<Patch> {
    if patch.values.len() != stats.len() {
        return Err(invalid(format!(
            "patch length {} does not match statistics length {}",
            patch.values.len(),
            stats.len()
        )));
    }
    let values = patch
        .values
        .iter()
        .zip(&stats.mean)
        .zip(&stats.std)
        .map(|((&v, m), s)| ((f64::from(v) - m) / s) as f32)
        .collect();
    Ok(Patch {
        values,
        ..patch.clone()
    })
}

fn output_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Convolves `map` with every kernel of `bank`: output channel `i` at `p` is
/// `<P(p), K_i> + b_i`. The window of output pixel `(ox, oy)` is centered on
/// input pixel `(ox·stride, oy·stride)`.
pub fn convolve(map: &FeatureMap, bank: &KernelBank, stride: usize) -> Result<FeatureMap> {
    convolve_impl(map, bank, stride, None)
}

/// Like [`convolve`], but each patch is z-scored with `stats` before the dot
/// product (marker-based normalization).
pub fn convolve_normalized(
    map: &FeatureMap,
    bank: &KernelBank,
    stats: &ChannelStats,
    stride: usize,
) -> Result<FeatureMap> {
    convolve_impl(map, bank, stride, Some(stats))
}

fn convolve_impl(
    map: &FeatureMap,
    bank: &KernelBank,
    stride: usize,
    stats: Option<&ChannelStats>,
) -> Result<FeatureMap> {
    if stride == 0 {
        return Err(invalid("stride must be >= 1"));
    }
    let offsets = adjacency_offsets(bank.k(), bank.dilation())?;
    let patch_len = offsets.len() * map.channels;
    if bank.kernel_len() != patch_len {
        return Err(invalid(format!(
            "kernel length {} does not match {}x{}x{} patches",
            bank.kernel_len(),
            bank.k(),
            bank.k(),
            map.channels
        )));
    }
    if let Some(stats) = stats {
        if stats.len() != patch_len {
            return Err(invalid(format!(
                "normalization statistics length {} does not match patch length {patch_len}",
                stats.len()
            )));
        }
    }
    let n_kernels = bank.len();
    if n_kernels == 0 {
        return Err(invalid("kernel bank is empty"));
    }
    let (ow, oh) = (output_len(map.width, stride), output_len(map.height, stride));
    let mut out = vec![0.0f32; ow * oh * n_kernels];
    out.par_chunks_mut(ow * n_kernels)
        .enumerate()
        .for_each(|(oy, row)| {
            let mut patch = vec![0.0f32; patch_len];
            let mut normalized = vec![0.0f64; patch_len];
            for (ox, px) in row.chunks_exact_mut(n_kernels).enumerate() {
                fill_patch(map, ox * stride, oy * stride, &offsets, &mut patch);
                if let Some(stats) = stats {
                    stats.normalize_into(&patch, &mut normalized);
                } else {
                    for (n, &v) in normalized.iter_mut().zip(&patch) {
                        *n = f64::from(v);
                    }
                }
                for (i, o) in px.iter_mut().enumerate() {
                    let kernel = bank.kernel(i);
                    let mut acc = 0.0f64;
                    for (&v, &w) in normalized.iter().zip(kernel) {
                        acc += v * f64::from(w);
                    }
                    if let Some(b) = bank.bias(i) {
                        acc += f64::from(b);
                    }
                    *o = acc as f32;
                }
            }
        });
    FeatureMap::new(ow, oh, n_kernels, map.scale * stride, out)
}

/// Clamps negative values to zero.
pub fn relu(map: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: map.data.iter().map(|&v| v.max(0.0)).collect(),
        ..map.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Pools each channel over a `window×window` neighborhood.
///
/// Output pixel `(ox, oy)` covers input columns
/// `ox·stride - (window-1)/2 ..= ox·stride - (window-1)/2 + window - 1` (and
/// likewise for rows). Max pooling treats out-of-domain pixels as zeros;
/// average pooling divides by the number of in-domain pixels.
pub fn pool(map: &FeatureMap, kind: PoolKind, window: usize, stride: usize) -> Result<FeatureMap> {
    if window == 0 || stride == 0 {
        return Err(invalid("pool window and stride must be >= 1"));
    }
    let m = map.channels;
    let (ow, oh) = (output_len(map.width, stride), output_len(map.height, stride));
    let back = ((window - 1) / 2) as isize;
    let mut out = vec![0.0f32; ow * oh * m];
    out.par_chunks_mut(ow * m).enumerate().for_each(|(oy, row)| {
        let mut acc = vec![0.0f64; m];
        for (ox, px) in row.chunks_exact_mut(m).enumerate() {
            let x0 = (ox * stride) as isize - back;
            let y0 = (oy * stride) as isize - back;
            let mut count = 0usize;
            let mut padded = false;
            acc.fill(match kind {
                PoolKind::Max => f64::NEG_INFINITY,
                PoolKind::Avg => 0.0,
            });
            for y in y0..y0 + window as isize {
                for x in x0..x0 + window as isize {
                    if !map.contains(x as i64, y as i64) {
                        padded = true;
                        continue;
                    }
                    count += 1;
                    let values = map.pixel(x as usize, y as usize);
                    for (a, &v) in acc.iter_mut().zip(values) {
                        match kind {
                            PoolKind::Max => *a = a.max(f64::from(v)),
                            PoolKind::Avg => *a += f64::from(v),
                        }
                    }
                }
            }
            for (o, &a) in px.iter_mut().zip(&acc) {
                *o = match kind {
                    PoolKind::Max if padded => a.max(0.0) as f32,
                    PoolKind::Max => a as f32,
                    PoolKind::Avg => (a / count as f64) as f32,
                };
            }
        }
    });
    FeatureMap::new(ow, oh, m, map.scale * stride, out)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl std::fmt::Display for FeatureMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{} (scale {})",
            self.width, self.height, self.channels, self.scale
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{KernelBank, Label};
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, m: usize) -> FeatureMap {
        FeatureMap::from_fn(w, h, m, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn bank(kernels: Vec<Vec<f32>>, biases: Option<Vec<f32>>, k: usize) -> KernelBank {
        let labels = vec![Label::Foreground; kernels.len()];
        KernelBank::new(kernels, biases, labels, k, 1).unwrap()
    }

    #[test]
    fn offsets_for_3x3() {
        let offsets = adjacency_offsets(3, 1).unwrap();
        let expected: Vec<(isize, isize)> = (-1..=1)
            .flat_map(|dy| (-1..=1).map(move |dx| (dx, dy)))
            .collect();
        assert_eq!(offsets, expected);
    }

    #[test]
    fn offsets_single_pixel_and_dilated() {
        assert_eq!(adjacency_offsets(1, 3).unwrap(), vec![(0, 0)]);
        let dilated = adjacency_offsets(3, 2).unwrap();
        assert_eq!(dilated.len(), 9);
        for (dx, dy) in dilated {
            assert!([-2, 0, 2].contains(&dx) && [-2, 0, 2].contains(&dy));
        }
    }

    #[test]
    fn offsets_reject_even_or_zero() {
        assert!(matches!(adjacency_offsets(4, 1), Err(Error::InvalidArgument(_))));
        assert!(adjacency_offsets(0, 1).is_err());
        assert!(adjacency_offsets(3, 0).is_err());
    }

    #[test]
    fn patch_of_constant_map() {
        let map = FeatureMap::from_fn(5, 5, 2, |_, _, _| 0.25).unwrap();
        let patch = extract_patch(&map, (2, 2), 3, 1).unwrap();
        assert_eq!(patch.values, vec![0.25; 18]);
    }

    #[test]
    fn patch_enumerates_row_major() {
        let map = FeatureMap::from_fn(3, 3, 1, |x, y, _| (y * 3 + x + 1) as f32).unwrap();
        let patch = extract_patch(&map, (1, 1), 3, 1).unwrap();
        assert_eq!(patch.values, vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    }

    #[test]
    fn corner_patch_is_zero_padded() {
        let map = FeatureMap::from_fn(4, 4, 1, |_, _, _| 1.0).unwrap();
        let patch = extract_patch(&map, (0, 0), 3, 1).unwrap();
        assert_eq!(patch.values.iter().filter(|&&v| v == 0.0).count(), 5);
        assert!(extract_patch(&map, (4, 0), 3, 1).is_err());
    }

    #[test]
    fn stats_of_two_patches() {
        let stats = zscore_stats(&[vec![1.0f32, 3.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(stats.mean, vec![2.0, 2.0]);
        assert_eq!(stats.std, vec![1.0, 1.0]);
    }

    #[test]
    fn stats_of_single_patch_hit_the_floor() {
        let stats = zscore_stats(&[vec![0.5f32, -2.0, 7.0]]).unwrap();
        assert_eq!(stats.std, vec![STD_FLOOR; 3]);
        assert!(zscore_stats::<Vec<f32>>(&[]).is_err());
        assert!(zscore_stats(&[vec![1.0f32], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let patches: Vec<Vec<f32>> = (0..5)
            .map(|_| (0..12).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let stats = zscore_stats(&patches).unwrap();
        for j in 0..12 {
            let mean: f64 = patches.iter().map(|p| f64::from(p[j])).sum::<f64>() / 5.0;
            let var: f64 = patches
                .iter()
                .map(|p| (f64::from(p[j]) - mean).powi(2))
                .sum::<f64>()
                / 5.0;
            assert!((stats.mean[j] - mean).abs() < 1e-9);
            assert!((stats.std[j] - var.sqrt().max(STD_FLOOR)).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_examples() {
        let patch = Patch {
            values: vec![1.0, -2.0, 4.0],
            origin: (0, 0),
            k: 1,
            dilation: 1,
        };
        let own = ChannelStats {
            mean: vec![1.0, -2.0, 4.0],
            std: vec![2.0, 2.0, 2.0],
        };
        assert_eq!(normalize_patch(&patch, &own).unwrap().values, vec![0.0; 3]);
        let identity = ChannelStats::identity(3);
        let once = normalize_patch(&patch, &identity).unwrap();
        assert_eq!(once.values, patch.values);
        assert_eq!(normalize_patch(&once, &identity).unwrap(), once);
        assert!(normalize_patch(&patch, &ChannelStats::identity(2)).is_err());
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = random_map(&mut rng, 6, 5, 1);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let out = convolve(&map, &bank(vec![k], None, 3), 1).unwrap();
        assert_eq!(out.data(), map.data());
        assert_eq!(out.scale(), 1);
    }

    #[test]
    fn all_ones_kernel_on_constant_map() {
        let map = FeatureMap::from_fn(5, 5, 1, |_, _, _| 0.5).unwrap();
        let out = convolve(&map, &bank(vec![vec![1.0; 9]], None, 3), 1).unwrap();
        for y in 1..4 {
            for x in 1..4 {
                assert!((out.get(x, y, 0) - 4.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn convolution_rejects_depth_mismatch() {
        let map = FeatureMap::zeros(4, 4, 2, 1);
        assert!(matches!(
            convolve(&map, &bank(vec![vec![1.0; 9]], None, 3), 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn strided_convolution_shape() {
        let map = FeatureMap::zeros(7, 5, 1, 2);
        let out = convolve(&map, &bank(vec![vec![1.0; 9]], Some(vec![0.5]), 3), 2).unwrap();
        assert_eq!((out.width(), out.height(), out.scale()), (4, 3, 4));
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn relu_clamps() {
        let map = FeatureMap::new(3, 1, 1, 1, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&map).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn max_pool_2x2() {
        let map = FeatureMap::new(2, 2, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = pool(&map, PoolKind::Max, 2, 2).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(out.scale(), 2);
    }

    #[test]
    fn avg_pool_counts_valid_pixels_only() {
        let map = FeatureMap::from_fn(3, 3, 1, |_, _, _| 2.0).unwrap();
        let out = pool(&map, PoolKind::Avg, 3, 1).unwrap();
        assert!(out.data().iter().all(|&v| (v - 2.0).abs() < 1e-7));
        assert!(pool(&map, PoolKind::Avg, 0, 1).is_err());
    }

    #[test]
    fn binary_container_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = random_map(&mut rng, 4, 3, 2).with_scale(4).unwrap();
        let mut buf = Vec::new();
        map.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 4 * 24);
        assert_eq!(&buf[0..4], &4u32.to_le_bytes());
        assert_eq!(FeatureMap::read_binary(buf.as_slice()).unwrap(), map);
    }

    #[test]
    fn rejects_non_finite_values() {
        assert!(FeatureMap::new(1, 1, 1, 1, vec![f32::NAN]).is_err());
        assert!(FeatureMap::new(2, 1, 1, 1, vec![0.0]).is_err());
        assert!(FeatureMap::new(1, 1, 1, 0, vec![0.0]).is_err());
    }
}

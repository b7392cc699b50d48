//! Mean-based adaptive decoder: turns a labeled feature map into a saliency
//! map without any learned parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{forward_encoder, EncoderModel, Label};
use crate::error::{invalid, Result};
use crate::tensor::FeatureMap;

/// A single-channel map, normally with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(invalid(format!(
                "saliency map of {}x{} needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("saliency values must be finite"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// 8-bit quantization `round(255·S)`, clamped to `[0, 255]`.
    pub fn quantized(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    /// Saves an 8-bit grayscale PNG with value `round(255·S)`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.quantized())
            .expect("buffer matches dimensions");
        img.save(path.as_ref())?;
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.quantized())
            .expect("buffer matches dimensions");
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Loads a PNG as luminance in `[0, 1]`.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
        Self::new(w, h, data)
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    Nearest,
    Bilinear,
}

fn default_neighborhood() -> usize {
    1
}
fn default_upsample() -> Upsample {
    Upsample::Bilinear
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Odd window over which `μ_F` and `μ_B` are averaged.
    #[serde(default = "default_neighborhood")]
    pub neighborhood_k: usize,
    #[serde(default = "default_upsample")]
    pub upsample: Upsample,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            neighborhood_k: default_neighborhood(),
            upsample: default_upsample(),
        }
    }
}

/// Whether both kernel classes were present in the decoded map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStatus {
    Complete,
    /// No foreground channels: every foreground weight is 0.
    NoForeground,
    /// No background channels: every background weight is 0.
    NoBackground,
    NoChannels,
}

/// Per-pixel foreground and background channel means.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMeans {
    pub width: usize,
    pub height: usize,
    pub foreground: Vec<f64>,
    pub background: Vec<f64>,
    pub status: DecodeStatus,
}

/// `μ_F(p)` and `μ_B(p)`: the mean of the foreground (background) labeled
/// channels over the `neighborhood_k` window at `p`, out-of-domain pixels
/// counting as zeros.
pub fn channel_means(features: &FeatureMap, labels: &[Label], neighborhood_k: usize) -> Result<ChannelMeans> {
    if labels.len() != features.channels() {
        return Err(invalid(format!(
            "{} labels for {} channels",
            labels.len(),
            features.channels()
        )));
    }
    if neighborhood_k == 0 || neighborhood_k.is_multiple_of(2) {
        return Err(invalid("neighborhood size must be odd and positive"));
    }
    let (w, h) = (features.width(), features.height());
    let n_fg = labels.iter().filter(|&&l| l == Label::Foreground).count();
    let n_bg = labels.len() - n_fg;
    let status = match (n_fg, n_bg) {
        (0, 0) => DecodeStatus::NoChannels,
        (0, _) => DecodeStatus::NoForeground,
        (_, 0) => DecodeStatus::NoBackground,
        _ => DecodeStatus::Complete,
    };
    // Per-pixel channel sums for each class.
    let mut fg_sum = vec![0.0f64; w * h];
    let mut bg_sum = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for (&v, &l) in features.pixel(x, y).iter().zip(labels) {
                match l {
                    Label::Foreground => fg_sum[i] += f64::from(v),
                    Label::Background => bg_sum[i] += f64::from(v),
                }
            }
        }
    }
    let window_mean = |sums: &[f64], count: usize| -> Vec<f64> {
        if count == 0 {
            return vec![0.0; w * h];
        }
        let r = (neighborhood_k / 2) as isize;
        let denom = (neighborhood_k * neighborhood_k * count) as f64;
        let mut out = vec![0.0; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for qy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                    for qx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                        acc += sums[qy as usize * w + qx as usize];
                    }
                }
                out[y as usize * w + x as usize] = acc / denom;
            }
        }
        out
    };
    Ok(ChannelMeans {
        width: w,
        height: h,
        foreground: window_mean(&fg_sum, n_fg),
        background: window_mean(&bg_sum, n_bg),
        status,
    })
}

/// Per-pixel, per-channel weights `α ∈ {-1, 0, +1}`, laid out like the
/// feature map (channels innermost).
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<i8>,
}

impl AlphaMap {
    pub fn get(&self, x: usize, y: usize, channel: usize) -> i8 {
        self.data[(y * self.width + x) * self.channels + channel]
    }
}

/// `+1` on foreground channels where `μ_F > μ_B`, `-1` on background
/// channels where `μ_F < μ_B`, `0` everywhere else.
pub fn adaptive_weights(features: &FeatureMap, labels: &[Label], means: &ChannelMeans) -> Result<AlphaMap> {
    if labels.len() != features.channels()
        || means.width != features.width()
        || means.height != features.height()
    {
        return Err(invalid("labels and means must match the feature map"));
    }
    let mut data = Vec::with_capacity(features.data().len());
    for (&mf, &mb) in means.foreground.iter().zip(&means.background) {
        for &label in labels {
            data.push(match label {
                Label::Foreground if mf > mb => 1,
                Label::Background if mf < mb => -1,
                _ => 0,
            });
        }
    }
    Ok(AlphaMap {
        width: features.width(),
        height: features.height(),
        channels: features.channels(),
        data,
    })
}

/// Pre-normalization decoder output at feature resolution:
/// `relu((1/m') Σ_i α_i(p) J_i(p))`.
pub fn combine(features: &FeatureMap, labels: &[Label], neighborhood_k: usize) -> Result<Vec<f32>> {
    let means = channel_means(features, labels, neighborhood_k)?;
    let alpha = adaptive_weights(features, labels, &means)?;
    let m = features.channels() as f64;
    Ok(features
        .data()
        .chunks_exact(features.channels())
        .zip(alpha.data.chunks_exact(features.channels()))
        .map(|(values, weights)| {
            let sum: f64 = values
                .iter()
                .zip(weights)
                .map(|(&v, &a)| f64::from(a) * f64::from(v))
                .sum();
            (sum / m).max(0.0) as f32
        })
        .collect())
}

/// Resizes a `w×h` plane produced at cumulative `scale` to `target`.
pub fn upsample(plane: &[f32], w: usize, h: usize, scale: usize, target: (usize, usize), mode: Upsample) -> Vec<f32> {
    let (tw, th) = target;
    if (w, h) == target {
        return plane.to_vec();
    }
    let s = scale.max(1) as f64;
    let mut out = Vec::with_capacity(tw * th);
    for y in 0..th {
        for x in 0..tw {
            let v = match mode {
                Upsample::Nearest => {
                    let sx = ((x as f64 / s) as usize).min(w - 1);
                    let sy = ((y as f64 / s) as usize).min(h - 1);
                    plane[sy * w + sx]
                }
                Upsample::Bilinear => {
                    let fx = ((x as f64 + 0.5) / s - 0.5).clamp(0.0, (w - 1) as f64);
                    let fy = ((y as f64 + 0.5) / s - 0.5).clamp(0.0, (h - 1) as f64);
                    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
                    let at = |xx: usize, yy: usize| f64::from(plane[yy * w + xx]);
                    let top = at(x0, y0) * (1.0 - ax) + at(x1, y0) * ax;
                    let bottom = at(x0, y1) * (1.0 - ax) + at(x1, y1) * ax;
                    (top * (1.0 - ay) + bottom * ay) as f32
                }
            };
            out.push(v);
        }
    }
    out
}

/// Min–max normalization to `[0, 1]`. A constant positive map becomes all
/// ones; an all-zero map stays all zeros.
pub fn min_max_normalize(values: &mut [f32]) {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        let range = f64::from(hi) - f64::from(lo);
        for v in values.iter_mut() {
            *v = ((f64::from(*v) - f64::from(lo)) / range) as f32;
        }
    } else {
        let fill = if hi > 0.0 { 1.0 } else { 0.0 };
        values.fill(fill);
    }
}

/// Decodes a block output into a saliency map of size `target`.
pub fn decode(
    features: &FeatureMap,
    labels: &[Label],
    config: &DecoderConfig,
    target: (usize, usize),
) -> Result<SaliencyMap> {
    if target.0 == 0 || target.1 == 0 {
        return Err(invalid("decode target size must be positive"));
    }
    let raw = combine(features, labels, config.neighborhood_k)?;
    let mut full = upsample(
        &raw,
        features.width(),
        features.height(),
        features.scale(),
        target,
        config.upsample,
    );
    min_max_normalize(&mut full);
    SaliencyMap::new(target.0, target.1, full)
}

/// Decodes every block's output: one saliency map per block, all at the
/// input image's size.
pub fn decode_progressive(
    model: &EncoderModel,
    image: &FeatureMap,
    config: &DecoderConfig,
) -> Result<Vec<SaliencyMap>> {
    let outputs = forward_encoder(model, image)?;
    decode_outputs(model, &outputs, config, (image.width(), image.height()))
}

/// Decodes precomputed block outputs of `model`.
pub fn decode_outputs(
    model: &EncoderModel,
    outputs: &[FeatureMap],
    config: &DecoderConfig,
    target: (usize, usize),
) -> Result<Vec<SaliencyMap>> {
    outputs
        .iter()
        .zip(&model.blocks)
        .map(|(out, block)| decode(out, block.bank.labels(), config, target))
        .collect()
}

//! FLIM encoders: filter estimation from markers and the forward pass.
//!
//! Two estimation strategies are supported:
//!
//! * **Cluster** – at every block, patches under each marker are z-scored
//!   with marker statistics and grouped by k-means; unit-norm cluster centers
//!   become kernels. The block then needs the statistics at inference time.
//! * **BoFP** – a single k-means pass per marker at the input image picks a
//!   bag of feature points. Each block derives one kernel and bias per point
//!   from the patch under it, folding the z-score statistics of the bag into
//!   the weights so no normalization step is needed at inference.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, nearest_member};
pub use crate::markers::Label;
use crate::markers::{map_point, map_to_scale, rasterize, MarkerSet};
use crate::tensor::{
    adjacency_offsets, convolve, convolve_normalized, fill_patch, norm, pool, relu, zscore_stats,
    ChannelStats, FeatureMap, PoolKind,
};
use crate::error::{invalid, Error, Result};

/// Normalized patches with a smaller norm are treated as degenerate.
const DEGENERATE_NORM: f64 = 1e-12;

/// A bank of `m'` kernels of length `k·k·m`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    weights: Vec<f32>,
    kernel_len: usize,
    biases: Option<Vec<f32>>,
    labels: Vec<Label>,
    k: usize,
    dilation: usize,
}

impl KernelBank {
    pub fn new(
        kernels: Vec<Vec<f32>>,
        biases: Option<Vec<f32>>,
        labels: Vec<Label>,
        k: usize,
        dilation: usize,
    ) -> Result<Self> {
        let kernel_len = kernels.first().map_or(0, Vec::len);
        if kernels.iter().any(|kernel| kernel.len() != kernel_len) {
            return Err(invalid("kernels must share one length"));
        }
        let weights = kernels.into_iter().flatten().collect();
        Self::from_flat(weights, kernel_len, biases, labels, k, dilation)
    }

    pub fn from_flat(
        weights: Vec<f32>,
        kernel_len: usize,
        biases: Option<Vec<f32>>,
        labels: Vec<Label>,
        k: usize,
        dilation: usize,
    ) -> Result<Self> {
        if k == 0 || k.is_multiple_of(2) || dilation == 0 {
            return Err(invalid(format!(
                "bad window geometry k={k}, dilation={dilation}"
            )));
        }
        let count = labels.len();
        if count == 0 {
            if !weights.is_empty() {
                return Err(invalid("kernels without labels"));
            }
        } else if kernel_len == 0 || !kernel_len.is_multiple_of(k * k) || weights.len() != count * kernel_len {
            return Err(invalid(format!(
                "{} weights do not form {count} kernels of a {k}x{k} window",
                weights.len()
            )));
        }
        if let Some(b) = &biases {
            if b.len() != count {
                return Err(invalid(format!("{} biases for {count} kernels", b.len())));
            }
        }
        if weights.iter().chain(biases.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(invalid("kernel weights must be finite"));
        }
        Ok(Self {
            weights,
            kernel_len,
            biases,
            labels,
            k,
            dilation,
        })
    }

    /// Number of kernels `m'`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn kernel(&self, i: usize) -> &[f32] {
        &self.weights[i * self.kernel_len..(i + 1) * self.kernel_len]
    }

    pub fn kernels(&self) -> impl Iterator<Item = &[f32]> {
        self.weights.chunks_exact(self.kernel_len.max(1))
    }

    pub fn bias(&self, i: usize) -> Option<f32> {
        self.biases.as_ref().map(|b| b[i])
    }

    pub fn biases(&self) -> Option<&[f32]> {
        self.biases.as_deref()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_len
    }

    /// Input channels `m` the kernels expect.
    pub fn depth(&self) -> usize {
        self.kernel_len / (self.k * self.k)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.biases.as_ref().map_or(0, Vec::len)
    }
}

fn default_k() -> usize {
    3
}
fn default_one() -> usize {
    1
}
fn default_pool_window() -> usize {
    3
}
fn default_pool_stride() -> usize {
    2
}
fn default_pool_kind() -> PoolKind {
    PoolKind::Max
}

/// Hyperparameters of one convolutional block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_one")]
    pub dilation: usize,
    #[serde(default = "default_one")]
    pub kernels_per_marker: usize,
    #[serde(default = "default_pool_kind")]
    pub pooling: PoolKind,
    #[serde(default = "default_pool_window")]
    pub pool_window: usize,
    #[serde(default = "default_pool_stride")]
    pub pool_stride: usize,
    #[serde(default = "default_one")]
    pub conv_stride: usize,
}

impl Default for BlockSpec {
    fn default() -> Self {
        Self {
            k: default_k(),
            dilation: 1,
            kernels_per_marker: 1,
            pooling: default_pool_kind(),
            pool_window: default_pool_window(),
            pool_stride: default_pool_stride(),
            conv_stride: 1,
        }
    }
}

impl BlockSpec {
    pub fn new(k: usize, kernels_per_marker: usize) -> Self {
        Self {
            k,
            kernels_per_marker,
            ..Self::default()
        }
    }

    /// A block without pooling (window 1, stride 1).
    pub fn without_pooling(mut self) -> Self {
        self.pool_window = 1;
        self.pool_stride = 1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k.is_multiple_of(2) {
            return Err(invalid(format!("kernel size must be odd, got {}", self.k)));
        }
        if self.dilation == 0 || self.kernels_per_marker == 0 {
            return Err(invalid("dilation and kernels_per_marker must be >= 1"));
        }
        if self.pool_window == 0 || self.pool_stride == 0 || self.conv_stride == 0 {
            return Err(invalid("pool window and strides must be >= 1"));
        }
        if !(3..=7).contains(&self.k) {
            log::warn!("kernel size {} is outside the usual 3..=7 range", self.k);
        }
        if self.kernels_per_marker > 4 {
            log::warn!(
                "{} kernels per marker is above the usual 1..=4 range",
                self.kernels_per_marker
            );
        }
        Ok(())
    }

    /// Downsampling factor contributed by this block.
    pub fn stride(&self) -> usize {
        self.conv_stride * self.pool_stride
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Cluster,
    Bofp,
}

impl std::str::FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster" => Ok(Self::Cluster),
            "bofp" => Ok(Self::Bofp),
            other => Err(invalid(format!("unknown mode {other:?} (cluster|bofp)"))),
        }
    }
}

impl std::fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cluster => "cluster",
            Self::Bofp => "bofp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub spec: BlockSpec,
    pub bank: KernelBank,
    /// Marker-based normalization statistics (Cluster mode only).
    pub stats: Option<ChannelStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub mode: EncoderMode,
    pub input_channels: usize,
    pub blocks: Vec<EncoderBlock>,
}

/// A discriminative location selected from one marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturePoint {
    pub x: usize,
    pub y: usize,
    pub label: Label,
    pub marker_id: u32,
}

/// Feature points of one training image, at original scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePoints {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<FeaturePoint>,
}

/// The bag of feature points: the union of every training image's points.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BagOfFeaturePoints {
    pub images: Vec<ImagePoints>,
}

impl BagOfFeaturePoints {
    /// Total point count `|B|`.
    pub fn len(&self) -> usize {
        self.images.iter().map(|i| i.points.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Maps every point of every image to a block input of the given scale
    /// and size. Duplicates are kept so `m'` stays fixed across blocks.
    pub fn map_to(&self, scale: usize, domains: &[(usize, usize)]) -> Vec<Vec<((usize, usize), Label)>> {
        self.images
            .iter()
            .zip(domains)
            .map(|(img, &domain)| {
                img.points
                    .iter()
                    .map(|p| (map_point((p.x, p.y), scale, domain), p.label))
                    .collect()
            })
            .collect()
    }
}

/// One marker's pixels at some block's scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerPixels {
    pub marker_id: u32,
    pub label: Label,
    pub pixels: Vec<(usize, usize)>,
}

/// A training image with its markers.
#[derive(Debug, Clone)]
pub struct TrainingImage {
    pub id: String,
    pub image: FeatureMap,
    pub markers: MarkerSet,
}

/// Output of [`estimate_block_cluster`].
#[derive(Debug, Clone)]
pub struct ClusterEstimate {
    pub bank: KernelBank,
    pub stats: ChannelStats,
    pub kmeans_runs: usize,
}

/// Output of [`build_bofp`].
#[derive(Debug, Clone)]
pub struct BofpBuild {
    pub bag: BagOfFeaturePoints,
    pub kmeans_runs: usize,
}

/// Output of [`estimate_block_bofp`].
#[derive(Debug, Clone)]
pub struct BofpEstimate {
    pub bank: KernelBank,
    /// `μ_B` and `σ_B` of the feature-point patches.
    pub stats: ChannelStats,
}

fn derive_seed(root: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined inputs
    let mut z = root
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn patches_at(map: &FeatureMap, pixels: &[(usize, usize)], offsets: &[(isize, isize)]) -> Vec<Vec<f32>> {
    pixels
        .iter()
        .map(|&(x, y)| {
            let mut patch = vec![0.0f32; offsets.len() * map.channels()];
            fill_patch(map, x, y, offsets, &mut patch);
            patch
        })
        .collect()
}

fn to_f64(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| f64::from(v)).collect()
}

fn check_in_domain(map: &FeatureMap, pixels: &[(usize, usize)]) -> Result<()> {
    match pixels.iter().find(|&&(x, y)| x >= map.width() || y >= map.height()) {
        Some(&(x, y)) => Err(invalid(format!(
            "pixel ({x}, {y}) outside {}x{} block input",
            map.width(),
            map.height()
        ))),
        None => Ok(()),
    }
}

/// Cluster-mode filter estimation for one block.
///
/// `marker_pixels[i]` lists the markers of image `i` with their pixels
/// already mapped to the scale of `inputs[i]`. Statistics are computed over
/// the patches of every marker pixel; then each marker's normalized patches
/// are clustered into `spec.kernels_per_marker` groups whose unit-norm
/// centers become kernels labeled like the marker.
pub fn estimate_block_cluster(
    inputs: &[FeatureMap],
    marker_pixels: &[Vec<MarkerPixels>],
    spec: &BlockSpec,
    seed: u64,
) -> Result<ClusterEstimate> {
    spec.validate()?;
    if inputs.len() != marker_pixels.len() {
        return Err(invalid("one marker list per input image is required"));
    }
    let offsets = adjacency_offsets(spec.k, spec.dilation)?;
    let mut per_marker = Vec::new();
    for (map, markers) in inputs.iter().zip(marker_pixels) {
        for marker in markers {
            check_in_domain(map, &marker.pixels)?;
            if marker.pixels.is_empty() {
                log::warn!("marker {} has no pixels at this scale; skipped", marker.marker_id);
                continue;
            }
            per_marker.push((marker, patches_at(map, &marker.pixels, &offsets)));
        }
    }
    if per_marker.is_empty() {
        return Err(invalid("no marker pixels to estimate filters from"));
    }
    let all: Vec<&Vec<f32>> = per_marker.iter().flat_map(|(_, p)| p).collect();
    let stats = zscore_stats(&all)?;

    let mut kernels = Vec::new();
    let mut labels = Vec::new();
    let mut normalized = vec![0.0f64; stats.len()];
    for (ordinal, (marker, patches)) in per_marker.iter().enumerate() {
        let points: Vec<Vec<f64>> = patches
            .iter()
            .map(|p| {
                stats.normalize_into(p, &mut normalized);
                normalized.clone()
            })
            .collect();
        let clusters = kmeans(&points, spec.kernels_per_marker, derive_seed(seed, ordinal as u64, 0))?;
        for center in &clusters.centers {
            let n = norm(center);
            if n < DEGENERATE_NORM {
                log::warn!("marker {} produced a zero-norm cluster center; skipped", marker.marker_id);
                continue;
            }
            kernels.push(center.iter().map(|v| (v / n) as f32).collect());
            labels.push(marker.label);
        }
    }
    if kernels.is_empty() {
        return Err(invalid("every cluster center was degenerate"));
    }
    let bank = KernelBank::new(kernels, None, labels, spec.k, spec.dilation)?;
    Ok(ClusterEstimate {
        bank,
        stats,
        kmeans_runs: per_marker.len(),
    })
}

/// Selects the bag of feature points from original-scale training images.
///
/// Raw (unnormalized) patches under each marker are clustered into `c`
/// groups; for every center the marker pixel whose patch is nearest to it
/// joins the image's bag. A location already in the bag is not added twice.
pub fn build_bofp(
    images: &[TrainingImage],
    c: usize,
    k: usize,
    dilation: usize,
    seed: u64,
) -> Result<BofpBuild> {
    let offsets = adjacency_offsets(k, dilation)?;
    let mut bag = BagOfFeaturePoints::default();
    let mut runs = 0usize;
    for image in images {
        let map = &image.image;
        if map.scale() != 1 {
            return Err(invalid("feature points are selected on original-scale images"));
        }
        let mut points: Vec<FeaturePoint> = Vec::new();
        for marker in &image.markers.markers {
            let pixels = rasterize(marker, map.width(), map.height())?;
            if pixels.is_empty() {
                log::warn!("marker {} of {} has no pixels; skipped", marker.id, image.id);
                continue;
            }
            let patches: Vec<Vec<f64>> = patches_at(map, &pixels, &offsets)
                .iter()
                .map(|p| to_f64(p))
                .collect();
            let clusters = kmeans(&patches, c, derive_seed(seed, runs as u64, 1))?;
            runs += 1;
            for center in &clusters.centers {
                let (x, y) = pixels[nearest_member(&patches, center)?];
                if !points.iter().any(|p| (p.x, p.y) == (x, y)) {
                    points.push(FeaturePoint {
                        x,
                        y,
                        label: marker.label,
                        marker_id: marker.id,
                    });
                }
            }
        }
        bag.images.push(ImagePoints {
            image: image.id.clone(),
            width: map.width(),
            height: map.height(),
            points,
        });
    }
    if runs == 0 {
        return Err(invalid("no markers to select feature points from"));
    }
    Ok(BofpBuild { bag, kmeans_runs: runs })
}

/// BoFP kernel and bias estimation for one block.
///
/// For every mapped point with normalized patch `P̂` (z-scored with the bag
/// statistics `μ_B`, `σ_B`): `K = (P̂ / ‖P̂‖) ⊘ σ_B` and `b = -<μ_B, K>`, so
/// that `<Q, K> + b = <(Q - μ_B) ⊘ σ_B, P̂ / ‖P̂‖>` for any patch `Q`.
pub fn estimate_block_bofp(
    inputs: &[FeatureMap],
    points: &[Vec<((usize, usize), Label)>],
    spec: &BlockSpec,
) -> Result<BofpEstimate> {
    spec.validate()?;
    if inputs.len() != points.len() {
        return Err(invalid("one point list per input image is required"));
    }
    let offsets = adjacency_offsets(spec.k, spec.dilation)?;
    let mut patches = Vec::new();
    let mut point_labels = Vec::new();
    for (map, pts) in inputs.iter().zip(points) {
        let pixels: Vec<(usize, usize)> = pts.iter().map(|(p, _)| *p).collect();
        check_in_domain(map, &pixels)?;
        patches.extend(patches_at(map, &pixels, &offsets));
        point_labels.extend(pts.iter().map(|(_, l)| *l));
    }
    if patches.is_empty() {
        return Err(invalid("no feature points to estimate filters from"));
    }
    let stats = zscore_stats(&patches)?;

    let mut kernels = Vec::with_capacity(patches.len());
    let mut biases = Vec::with_capacity(patches.len());
    let mut labels = Vec::with_capacity(patches.len());
    let mut normalized = vec![0.0f64; stats.len()];
    for (patch, label) in patches.iter().zip(point_labels) {
        stats.normalize_into(patch, &mut normalized);
        let n = norm(&normalized);
        if n < DEGENERATE_NORM {
            log::warn!("feature-point patch has zero norm after normalization; skipped");
            continue;
        }
        let kernel: Vec<f32> = normalized
            .iter()
            .zip(&stats.std)
            .map(|(v, s)| (v / n / s) as f32)
            .collect();
        // Bias from the stored (f32) weights so the identity holds for them.
        let bias: f64 = -kernel
            .iter()
            .zip(&stats.mean)
            .map(|(&w, m)| f64::from(w) * m)
            .sum::<f64>();
        kernels.push(kernel);
        biases.push(bias as f32);
        labels.push(label);
    }
    if kernels.is_empty() {
        return Err(invalid("every feature-point patch was degenerate"));
    }
    let bank = KernelBank::new(kernels, Some(biases), labels, spec.k, spec.dilation)?;
    Ok(BofpEstimate { bank, stats })
}

/// Convolution, ReLU and pooling of one block.
///
/// When `stats` is given every patch is z-scored before the dot product
/// (Cluster mode). A bank without biases requires `stats`.
pub fn forward_block(
    input: &FeatureMap,
    spec: &BlockSpec,
    bank: &KernelBank,
    stats: Option<&ChannelStats>,
) -> Result<FeatureMap> {
    if bank.depth() != input.channels() {
        return Err(invalid(format!(
            "block expects {} input channels, got {}",
            bank.depth(),
            input.channels()
        )));
    }
    let conv = match stats {
        Some(stats) => convolve_normalized(input, bank, stats, spec.conv_stride)?,
        None if bank.biases().is_some() => convolve(input, bank, spec.conv_stride)?,
        None => return Err(invalid("cluster-mode block needs normalization statistics")),
    };
    pool(&relu(&conv), spec.pooling, spec.pool_window, spec.pool_stride)
}

impl EncoderBlock {
    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        forward_block(input, &self.spec, &self.bank, self.stats.as_ref())
    }
}

/// Per-block training figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub kernels: usize,
    pub kmeans_runs: usize,
    pub filter_estimation_secs: f64,
}

/// What training cost, surfaced for manifests and efficiency comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub mode: EncoderMode,
    pub kmeans_invocations: usize,
    /// Time spent estimating filters (including feature-point selection),
    /// excluding forward passes.
    pub filter_estimation_secs: f64,
    pub blocks: Vec<BlockReport>,
    pub feature_points: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainedEncoder {
    pub model: EncoderModel,
    pub report: TrainingReport,
    pub bag: Option<BagOfFeaturePoints>,
}

/// Trains an encoder block by block from marked images.
pub fn train_encoder(
    images: &[TrainingImage],
    blocks: &[BlockSpec],
    mode: EncoderMode,
    seed: u64,
) -> Result<TrainedEncoder> {
    let first = images
        .first()
        .ok_or_else(|| invalid("training needs at least one marked image"))?;
    if blocks.is_empty() {
        return Err(invalid("an encoder needs at least one block"));
    }
    for spec in blocks {
        spec.validate()?;
    }
    let input_channels = first.image.channels();
    for img in images {
        if img.image.channels() != input_channels {
            return Err(invalid("training images must share a channel count"));
        }
        if img.markers.is_empty() {
            return Err(invalid(format!("training image {} has no markers", img.id)));
        }
        img.markers.validate(img.image.width(), img.image.height())?;
    }

    let mut block_reports = Vec::with_capacity(blocks.len());
    let mut model_blocks = Vec::with_capacity(blocks.len());
    let mut total_estimation = Duration::ZERO;
    let mut kmeans_total = 0;
    let mut inputs: Vec<FeatureMap> = images.iter().map(|i| i.image.clone()).collect();
    let mut bag = None;

    // Original-scale marker disks, rasterized once (Cluster mode).
    let disks: Vec<Vec<MarkerPixels>> = if mode == EncoderMode::Cluster {
        images
            .iter()
            .map(|img| {
                img.markers
                    .markers
                    .iter()
                    .map(|m| {
                        Ok(MarkerPixels {
                            marker_id: m.id,
                            label: m.label,
                            pixels: rasterize(m, img.image.width(), img.image.height())?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    for (b, spec) in blocks.iter().enumerate() {
        let start = Instant::now();
        let (block, runs) = match mode {
            EncoderMode::Cluster => {
                let mapped: Vec<Vec<MarkerPixels>> = disks
                    .iter()
                    .zip(&inputs)
                    .map(|(markers, map)| {
                        markers
                            .iter()
                            .map(|m| {
                                Ok(MarkerPixels {
                                    pixels: map_to_scale(
                                        &m.pixels,
                                        map.scale(),
                                        (map.width(), map.height()),
                                    )?,
                                    ..m.clone()
                                })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?;
                let est = estimate_block_cluster(&inputs, &mapped, spec, derive_seed(seed, b as u64, 2))?;
                let runs = est.kmeans_runs;
                (
                    EncoderBlock {
                        spec: *spec,
                        bank: est.bank,
                        stats: Some(est.stats),
                    },
                    runs,
                )
            }
            EncoderMode::Bofp => {
                // Feature points are selected once, on the input images.
                let mut runs = 0;
                if bag.is_none() {
                    let build = build_bofp(images, spec.kernels_per_marker, spec.k, spec.dilation, seed)?;
                    runs = build.kmeans_runs;
                    bag = Some(build.bag);
                }
                let bag = bag.as_ref().expect("bag built at the first block");
                let scale = inputs[0].scale();
                let domains: Vec<_> = inputs.iter().map(|m| (m.width(), m.height())).collect();
                let est = estimate_block_bofp(&inputs, &bag.map_to(scale, &domains), spec)?;
                (
                    EncoderBlock {
                        spec: *spec,
                        bank: est.bank,
                        stats: None,
                    },
                    runs,
                )
            }
        };
        let elapsed = start.elapsed();
        total_estimation += elapsed;
        kmeans_total += runs;
        if let Some(prev) = model_blocks.last().map(|b: &EncoderBlock| b.bank.len()) {
            if prev != block.bank.len() {
                log::warn!(
                    "block {} has {} kernels, previous block had {prev}",
                    b + 1,
                    block.bank.len()
                );
            }
        }
        block_reports.push(BlockReport {
            kernels: block.bank.len(),
            kmeans_runs: runs,
            filter_estimation_secs: elapsed.as_secs_f64(),
        });
        if b + 1 < blocks.len() {
            inputs = inputs
                .iter()
                .map(|map| block.forward(map))
                .collect::<Result<_>>()?;
        }
        model_blocks.push(block);
    }

    let report = TrainingReport {
        mode,
        kmeans_invocations: kmeans_total,
        filter_estimation_secs: total_estimation.as_secs_f64(),
        blocks: block_reports,
        feature_points: bag.as_ref().map(BagOfFeaturePoints::len),
    };
    Ok(TrainedEncoder {
        model: EncoderModel {
            mode,
            input_channels,
            blocks: model_blocks,
        },
        report,
        bag,
    })
}

/// Runs every block in order, returning each block's output.
pub fn forward_encoder(model: &EncoderModel, image: &FeatureMap) -> Result<Vec<FeatureMap>> {
    if image.channels() != model.input_channels {
        return Err(invalid(format!(
            "model expects {} input channels, got {}",
            model.input_channels,
            image.channels()
        )));
    }
    let mut outputs: Vec<FeatureMap> = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        let input = outputs.last().unwrap_or(image);
        let out = block.forward(input)?;
        outputs.push(out);
    }
    Ok(outputs)
}

/// Trainable parameters: every kernel weight plus every bias.
pub fn count_parameters(model: &EncoderModel) -> usize {
    model.blocks.iter().map(|b| b.bank.parameter_count()).sum()
}

const MANIFEST_FILE: &str = "model.json";
const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT_NAME: &str = "flim-encoder";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BlockManifest {
    spec: BlockSpec,
    kernels: usize,
    kernel_len: usize,
    labels: Vec<u8>,
    has_biases: bool,
    has_stats: bool,
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    version: u32,
    mode: EncoderMode,
    input_channels: usize,
    parameters: usize,
    blocks: Vec<BlockManifest>,
}

impl EncoderModel {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Cumulative downsampling after the last block.
    pub fn output_scale(&self) -> usize {
        self.blocks.iter().map(|b| b.spec.stride()).product()
    }

    /// Writes `model.json` (mode, block specs, labels) and `weights.bin`
    /// (little-endian kernels as f32, then biases as f32, then statistics
    /// means and deviations as f64, block by block) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            for w in &block.bank.weights {
                blob.extend_from_slice(&w.to_le_bytes());
            }
            for b in block.bank.biases().into_iter().flatten() {
                blob.extend_from_slice(&b.to_le_bytes());
            }
            if let Some(stats) = &block.stats {
                for v in stats.mean.iter().chain(&stats.std) {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
            blocks.push(BlockManifest {
                spec: block.spec,
                kernels: block.bank.len(),
                kernel_len: block.bank.kernel_len(),
                labels: block.bank.labels().iter().map(|l| l.code()).collect(),
                has_biases: block.bank.biases().is_some(),
                has_stats: block.stats.is_some(),
            });
        }
        let manifest = ModelManifest {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            mode: self.mode,
            input_channels: self.input_channels,
            parameters: count_parameters(self),
            blocks,
        };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        std::fs::write(dir.join(WEIGHTS_FILE), blob)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let weights_path = dir.join(WEIGHTS_FILE);
        let bad = |path: &Path, reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let manifest: ModelManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
            .map_err(|e| bad(&manifest_path, e.to_string()))?;
        if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
            return Err(bad(
                &manifest_path,
                format!("unsupported format {} v{}", manifest.format, manifest.version),
            ));
        }
        let blob = std::fs::read(&weights_path)?;
        let mut cursor = 0usize;
        let mut take = |n: usize, width: usize| -> Result<&[u8]> {
            let end = cursor + n * width;
            let bytes = blob
                .get(cursor..end)
                .ok_or_else(|| bad(&weights_path, "weights file is truncated".into()))?;
            cursor = end;
            Ok(bytes)
        };
        let f32s = |b: &[u8]| -> Vec<f32> {
            b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
        };
        let f64s = |b: &[u8]| -> Vec<f64> {
            b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        };
        let mut blocks = Vec::with_capacity(manifest.blocks.len());
        for bm in &manifest.blocks {
            let weights = f32s(take(bm.kernels * bm.kernel_len, 4)?);
            let biases = if bm.has_biases {
                Some(f32s(take(bm.kernels, 4)?))
            } else {
                None
            };
            let stats = if bm.has_stats {
                let mean = f64s(take(bm.kernel_len, 8)?);
                let std = f64s(take(bm.kernel_len, 8)?);
                Some(ChannelStats { mean, std })
            } else {
                None
            };
            let labels = bm
                .labels
                .iter()
                .map(|&c| Label::from_code(c).ok_or_else(|| bad(&manifest_path, format!("bad label {c}"))))
                .collect::<Result<Vec<_>>>()?;
            let bank = KernelBank::from_flat(weights, bm.kernel_len, biases, labels, bm.spec.k, bm.spec.dilation)?;
            blocks.push(EncoderBlock {
                spec: bm.spec,
                bank,
                stats,
            });
        }
        if cursor != blob.len() {
            return Err(bad(&weights_path, "trailing bytes in weights file".into()));
        }
        Ok(Self {
            mode: manifest.mode,
            input_channels: manifest.input_channels,
            blocks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markers::Marker;
    use crate::tensor::{dot, extract_patch, STD_FLOOR};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rgb(seed: u64, w: usize, h: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(w, h, 3, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
    }

    fn training(seed: u64, size: usize, markers: Vec<Marker>) -> TrainingImage {
        TrainingImage {
            id: format!("img{seed}"),
            image: random_rgb(seed, size, size),
            markers: MarkerSet::new(format!("img{seed}.png"), markers),
        }
    }

    fn five_markers() -> Vec<Marker> {
        vec![
            Marker::new(1, 8, 8, Label::Foreground),
            Marker::new(2, 20, 10, Label::Foreground),
            Marker::new(3, 40, 40, Label::Background),
            Marker::new(4, 50, 12, Label::Background),
            Marker::new(5, 12, 50, Label::Background),
        ]
    }

    #[test]
    fn single_marker_identical_patches() {
        let map = FeatureMap::from_fn(12, 12, 1, |x, _, _| if x < 6 { 0.2 } else { 0.9 }).unwrap();
        // Column x = 2 pixels all see the same 3x3 neighborhood.
        let pixels = vec![(2, 3), (2, 4), (2, 5)];
        let markers = vec![vec![MarkerPixels {
            marker_id: 1,
            label: Label::Foreground,
            pixels: pixels.clone(),
        }]];
        // Add a second marker so the statistics are not all floored.
        let mut with_bg = markers.clone();
        with_bg[0].push(MarkerPixels {
            marker_id: 2,
            label: Label::Background,
            pixels: vec![(6, 3), (8, 8)],
        });
        let est = estimate_block_cluster(std::slice::from_ref(&map), &with_bg, &BlockSpec::new(3, 1), 0).unwrap();
        let patch = extract_patch(&map, pixels[0], 3, 1).unwrap();
        let mut normalized = vec![0.0; 9];
        est.stats.normalize_into(&patch.values, &mut normalized);
        let n = norm(&normalized);
        for (w, v) in est.bank.kernel(0).iter().zip(&normalized) {
            assert!((f64::from(*w) - v / n).abs() < 1e-6);
        }
    }

    #[test]
    fn cluster_bank_has_c_kernels_per_marker_with_labels() {
        let img = training(1, 32, vec![
            Marker::new(1, 8, 8, Label::Foreground),
            Marker::new(2, 24, 24, Label::Background),
        ]);
        let pixels: Vec<Vec<MarkerPixels>> = vec![img
            .markers
            .markers
            .iter()
            .map(|m| MarkerPixels {
                marker_id: m.id,
                label: m.label,
                pixels: rasterize(m, 32, 32).unwrap(),
            })
            .collect()];
        let est = estimate_block_cluster(&[img.image], &pixels, &BlockSpec::new(3, 3), 9).unwrap();
        use Label::*;
        assert_eq!(est.bank.labels(), &[Foreground, Foreground, Foreground, Background, Background, Background]);
        assert_eq!(est.kmeans_runs, 2);
        assert!(est.bank.biases().is_none());
        for kernel in est.bank.kernels() {
            let n = norm(&to_f64(kernel));
            assert!((n - 1.0).abs() < 1e-6, "norm {n}");
        }
    }

    #[test]
    fn cluster_estimation_needs_markers() {
        let map = random_rgb(0, 8, 8);
        assert!(matches!(
            estimate_block_cluster(&[map], &[vec![]], &BlockSpec::default(), 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn uniform_marker_picks_first_pixel() {
        let image = FeatureMap::from_fn(20, 20, 3, |_, _, c| 0.1 * c as f32).unwrap();
        let marker = Marker::new(1, 10, 10, Label::Foreground);
        let first = rasterize(&marker, 20, 20).unwrap()[0];
        let img = TrainingImage {
            id: "u".into(),
            image,
            markers: MarkerSet::new("u.png", vec![marker]),
        };
        let build = build_bofp(&[img], 1, 3, 1, 0).unwrap();
        let pts = &build.bag.images[0].points;
        assert_eq!(pts.len(), 1);
        assert_eq!((pts[0].x, pts[0].y), first);
    }

    #[test]
    fn bag_holds_at_most_c_points_per_marker() {
        let img = training(4, 32, vec![
            Marker::new(1, 8, 8, Label::Foreground),
            Marker::new(2, 20, 20, Label::Background),
        ]);
        let build = build_bofp(std::slice::from_ref(&img), 2, 3, 1, 0).unwrap();
        assert!(build.bag.len() <= 4);
        assert_eq!(build.kmeans_runs, 2);
        for p in &build.bag.images[0].points {
            let marker = img.markers.markers.iter().find(|m| m.id == p.marker_id).unwrap();
            assert!(rasterize(marker, 32, 32).unwrap().contains(&(p.x, p.y)));
            assert_eq!(p.label, marker.label);
        }
    }

    #[test]
    fn edge_straddling_marker_picks_both_sides() {
        // Left half dark, right half bright; marker centered on the boundary.
        let image = FeatureMap::from_fn(16, 16, 1, |x, _, _| if x < 8 { 0.0 } else { 1.0 }).unwrap();
        let marker = Marker::new(1, 8, 8, Label::Foreground);
        let img = TrainingImage {
            id: "edge".into(),
            image,
            markers: MarkerSet::new("edge.png", vec![marker]),
        };
        let build = build_bofp(&[img], 2, 1, 1, 0).unwrap();
        let xs: Vec<usize> = build.bag.images[0].points.iter().map(|p| p.x).collect();
        assert_eq!(xs.len(), 2);
        assert!(xs.iter().any(|&x| x < 8) && xs.iter().any(|&x| x >= 8));
    }

    #[test]
    fn bofp_identity_statistics_give_unit_patches() {
        // Two points whose patches are +v and -v: mean 0, std |v| per component.
        let map = FeatureMap::new(2, 1, 1, 1, vec![1.0, -1.0]).unwrap();
        let spec = BlockSpec::new(1, 1);
        let est = estimate_block_bofp(
            &[map],
            &[vec![((0, 0), Label::Foreground), ((1, 0), Label::Background)]],
            &spec,
        )
        .unwrap();
        assert_eq!(est.stats.mean, vec![0.0]);
        assert_eq!(est.stats.std, vec![1.0]);
        assert_eq!(est.bank.kernel(0), &[1.0]);
        assert_eq!(est.bank.kernel(1), &[-1.0]);
        assert_eq!(est.bank.biases(), Some(&[0.0f32, 0.0][..]));
    }

    #[test]
    fn bofp_bias_identity_holds() {
        let maps = [random_rgb(10, 16, 16), random_rgb(11, 16, 16)];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let points: Vec<Vec<((usize, usize), Label)>> = (0..2)
            .map(|_| {
                (0..15)
                    .map(|i| {
                        let label = if i % 2 == 0 { Label::Foreground } else { Label::Background };
                        ((rng.random_range(0..16), rng.random_range(0..16)), label)
                    })
                    .collect()
            })
            .collect();
        let spec = BlockSpec::new(3, 1);
        let est = estimate_block_bofp(&maps, &points, &spec).unwrap();
        assert_eq!(est.bank.len(), 30);
        assert_eq!(est.bank.kernel_len(), 27);
        for _ in 0..50 {
            let q: Vec<f64> = (0..27).map(|_| rng.random_range(0.0..1.0)).collect();
            for i in 0..est.bank.len() {
                let k = to_f64(est.bank.kernel(i));
                let lhs = dot(&q, &k) + f64::from(est.bank.bias(i).unwrap());
                let z: Vec<f64> = q
                    .iter()
                    .zip(&est.stats.mean)
                    .zip(&est.stats.std)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect();
                let unit: Vec<f64> = k.iter().zip(&est.stats.std).map(|(w, s)| w * s).collect();
                let rhs = dot(&z, &unit);
                assert!((lhs - rhs).abs() <= 1e-5 * (1.0 + norm(&q)));
            }
        }
    }

    #[test]
    fn forward_identity_block_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = FeatureMap::from_fn(5, 4, 1, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let bank = KernelBank::new(vec![k], None, vec![Label::Foreground], 3, 1).unwrap();
        let spec = BlockSpec::new(3, 1).without_pooling();
        let out = forward_block(&map, &spec, &bank, Some(&ChannelStats::identity(9))).unwrap();
        assert_eq!(out, relu(&map));
        assert!(forward_block(&map, &spec, &bank, None).is_err());
    }

    #[test]
    fn two_block_shapes() {
        let img = training(3, 64, five_markers());
        let specs = [BlockSpec::new(3, 1), BlockSpec::new(3, 1)];
        for mode in [EncoderMode::Cluster, EncoderMode::Bofp] {
            let trained = train_encoder(std::slice::from_ref(&img), &specs, mode, 42).unwrap();
            let outs = forward_encoder(&trained.model, &img.image).unwrap();
            assert_eq!(outs.len(), 2);
            assert_eq!((outs[1].width(), outs[1].height(), outs[1].scale()), (16, 16, 4));
            for (out, block) in outs.iter().zip(&trained.model.blocks) {
                assert_eq!(out.channels(), block.bank.len());
            }
        }
    }

    #[test]
    fn kmeans_invocation_counts() {
        let img = training(5, 64, five_markers());
        let specs = [BlockSpec::new(3, 2); 2];
        let cluster = train_encoder(std::slice::from_ref(&img), &specs, EncoderMode::Cluster, 1).unwrap();
        assert_eq!(cluster.report.kmeans_invocations, 10);
        let specs4 = [BlockSpec::new(3, 2); 4];
        let bofp = train_encoder(&[img], &specs4, EncoderMode::Bofp, 1).unwrap();
        assert_eq!(bofp.report.kmeans_invocations, 5);
    }

    #[test]
    fn one_block_both_modes_same_kernel_shape() {
        let img = training(6, 64, five_markers());
        let spec = [BlockSpec::new(3, 2)];
        for mode in [EncoderMode::Cluster, EncoderMode::Bofp] {
            let model = train_encoder(std::slice::from_ref(&img), &spec, mode, 7).unwrap().model;
            assert_eq!(model.blocks[0].bank.kernel_len(), 27);
            assert!(model.blocks[0].bank.len() <= 10);
        }
    }

    #[test]
    fn parameter_count_formula() {
        let kernels = vec![vec![0.5f32; 27]; 10];
        let labels = vec![Label::Foreground; 10];
        let cluster = EncoderModel {
            mode: EncoderMode::Cluster,
            input_channels: 3,
            blocks: vec![EncoderBlock {
                spec: BlockSpec::default(),
                bank: KernelBank::new(kernels.clone(), None, labels.clone(), 3, 1).unwrap(),
                stats: Some(ChannelStats::identity(27)),
            }],
        };
        assert_eq!(count_parameters(&cluster), 270);
        let mut bofp = cluster.clone();
        bofp.blocks[0].bank = KernelBank::new(kernels, Some(vec![0.0; 10]), labels, 3, 1).unwrap();
        assert_eq!(count_parameters(&bofp), 280);
        let empty = EncoderModel {
            mode: EncoderMode::Bofp,
            input_channels: 3,
            blocks: vec![],
        };
        assert_eq!(count_parameters(&empty), 0);
    }

    #[test]
    fn model_save_load_round_trip() {
        let img = training(8, 64, five_markers());
        let specs = [BlockSpec::new(3, 2), BlockSpec::new(5, 1)];
        let dir = tempfile::tempdir().unwrap();
        for mode in [EncoderMode::Cluster, EncoderMode::Bofp] {
            let model = train_encoder(std::slice::from_ref(&img), &specs, mode, 3).unwrap().model;
            let path = dir.path().join(mode.to_string());
            model.save(&path).unwrap();
            assert_eq!(EncoderModel::load(&path).unwrap(), model);
        }
    }

    #[test]
    fn std_floor_keeps_kernels_finite() {
        // Constant channel 1: zero variance across feature points.
        let map = FeatureMap::from_fn(10, 10, 2, |x, y, c| if c == 0 { (x * y) as f32 / 81.0 } else { 0.5 }).unwrap();
        let est = estimate_block_bofp(
            &[map],
            &[vec![((2, 2), Label::Foreground), ((5, 7), Label::Background), ((8, 1), Label::Background)]],
            &BlockSpec::new(3, 1),
        )
        .unwrap();
        assert!(est.stats.std.contains(&STD_FLOOR));
        for kernel in est.bank.kernels() {
            assert!(kernel.iter().all(|v| v.is_finite() && v.abs() < 1e3));
        }
    }
}

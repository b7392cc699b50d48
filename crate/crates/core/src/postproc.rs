//! Saliency refinement: Otsu binarization, disk morphology, area filtering,
//! seed estimation and dynamic-trees delineation.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{quantize, SaliencyMap};
use crate::error::{invalid, Result};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(invalid(format!(
                "mask of {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self { width, height, bits }
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

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
            ..self.clone()
        }
    }

    pub fn intersects(&self, other: &Self) -> bool {
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// The mask as a `{0, 1}` saliency map.
    pub fn to_saliency(&self) -> SaliencyMap {
        SaliencyMap::new(
            self.width,
            self.height,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask dimensions are valid")
    }

    /// Saves an 8-bit PNG with values `{0, 255}`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_saliency().save_png(path)
    }

    /// Loads a PNG; any nonzero luminance is foreground.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::new(w, h, img.into_raw().into_iter().map(|v| v > 0).collect())
    }
}

/// Internal (object) and external (background) seeds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedSet {
    pub internal: BinaryMask,
    pub external: BinaryMask,
}

impl SeedSet {
    /// True when there is no object seed to grow from.
    pub fn is_degenerate(&self) -> bool {
        self.internal.is_empty()
    }
}

fn histogram(saliency: &SaliencyMap) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &v in saliency.data() {
        hist[quantize(v) as usize] += 1;
    }
    hist
}

/// Otsu threshold over the 256-bin histogram of the 8-bit map, as a bin.
/// Pixels strictly above the bin are foreground. Ties go to the lowest bin;
/// a single-valued map returns that value, so its mask is empty.
pub fn otsu_bin(saliency: &SaliencyMap) -> u8 {
    let hist = histogram(saliency);
    let total: u64 = hist.iter().sum();
    let weighted_total: f64 = hist.iter().enumerate().map(|(i, &n)| i as f64 * n as f64).sum();
    let occupied: Vec<usize> = (0..256).filter(|&i| hist[i] > 0).collect();
    if occupied.len() == 1 {
        return occupied[0] as u8;
    }
    let (mut w0, mut sum0) = (0u64, 0.0f64);
    let mut best = (0u8, f64::NEG_INFINITY);
    for (t, &n) in hist.iter().enumerate() {
        w0 += n;
        sum0 += t as f64 * n as f64;
        let w1 = total - w0;
        let variance = if w0 == 0 || w1 == 0 {
            0.0
        } else {
            let mu0 = sum0 / w0 as f64;
            let mu1 = (weighted_total - sum0) / w1 as f64;
            w0 as f64 * w1 as f64 * (mu0 - mu1) * (mu0 - mu1) / (total as f64 * total as f64)
        };
        if variance > best.1 {
            best = (t as u8, variance);
        }
    }
    best.0
}

/// Otsu threshold in `[0, 1]` (`bin / 255`).
pub fn otsu(saliency: &SaliencyMap) -> f32 {
    f32::from(otsu_bin(saliency)) / 255.0
}

/// Pixels whose 8-bit value is strictly greater than `bin`.
pub fn threshold_mask(saliency: &SaliencyMap, bin: u8) -> BinaryMask {
    BinaryMask {
        width: saliency.width(),
        height: saliency.height(),
        bits: saliency.data().iter().map(|&v| quantize(v) > bin).collect(),
    }
}

pub fn otsu_mask(saliency: &SaliencyMap) -> BinaryMask {
    threshold_mask(saliency, otsu_bin(saliency))
}

fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let r2 = (radius * radius) as isize;
    (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r2)
        .collect()
}

fn morph(mask: &BinaryMask, radius: usize, erode: bool) -> BinaryMask {
    let offsets = disk(radius);
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut bits = vec![false; mask.bits.len()];
    for y in 0..h {
        for x in 0..w {
            let mut hits = offsets.iter().filter_map(|&(dx, dy)| {
                let (qx, qy) = (x + dx, y + dy);
                (qx >= 0 && qy >= 0 && qx < w && qy < h).then(|| mask.bits[(qy * w + qx) as usize])
            });
            bits[(y * w + x) as usize] = if erode {
                hits.all(|b| b)
            } else {
                hits.any(|b| b)
            };
        }
    }
    BinaryMask { bits, ..mask.clone() }
}

/// Binary erosion by a Euclidean disk. Only in-domain neighbors are
/// considered, which keeps erosion the exact dual of [`dilate`].
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    morph(mask, radius, true)
}

/// Binary dilation by a Euclidean disk.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    morph(mask, radius, false)
}

/// 8-connected component labels (0 for background, components from 1) and
/// the pixel count of each component (index 0 unused).
pub fn connected_components(mask: &BinaryMask) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0;
        labels[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (qx, qy) = (x + dx, y + dy);
                    if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                        continue;
                    }
                    let q = qy as usize * w + qx as usize;
                    if mask.bits[q] && labels[q] == 0 {
                        labels[q] = id;
                        queue.push_back(q);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps the 8-connected components whose area lies in `[min_area, max_area]`.
pub fn area_filter(mask: &BinaryMask, min_area: usize, max_area: usize) -> BinaryMask {
    let (labels, sizes) = connected_components(mask);
    BinaryMask {
        bits: labels
            .iter()
            .map(|&l| l != 0 && (min_area..=max_area).contains(&sizes[l as usize]))
            .collect(),
        ..mask.clone()
    }
}

fn default_morph_radius() -> usize {
    2
}
fn default_min_area() -> usize {
    1000
}
fn default_max_area() -> usize {
    9000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineParams {
    #[serde(default = "default_morph_radius")]
    pub morph_radius: usize,
    #[serde(default = "default_min_area")]
    pub min_area: usize,
    #[serde(default = "default_max_area")]
    pub max_area: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            morph_radius: default_morph_radius(),
            min_area: default_min_area(),
            max_area: default_max_area(),
        }
    }
}

impl RefineParams {
    pub fn validate(&self) -> Result<()> {
        if self.morph_radius == 0 {
            return Err(invalid("morphology radius must be >= 1"));
        }
        if self.min_area > self.max_area {
            return Err(invalid("min_area exceeds max_area"));
        }
        Ok(())
    }

    /// Width of the neutral band between internal and external seeds.
    pub fn margin(&self) -> usize {
        2 * self.morph_radius
    }
}

/// Derives seeds from a saliency map: Otsu mask, opening then closing,
/// area filtering, erosion for the internal seeds; the complement of the
/// internal seeds dilated by the margin for the external seeds.
pub fn seeds_from_saliency(saliency: &SaliencyMap, params: &RefineParams) -> Result<SeedSet> {
    params.validate()?;
    let r = params.morph_radius;
    let mask = otsu_mask(saliency);
    let opened = dilate(&erode(&mask, r), r);
    let closed = erode(&dilate(&opened, r), r);
    let kept = area_filter(&closed, params.min_area, params.max_area);
    let internal = erode(&kept, r);
    let external = dilate(&internal, params.margin()).complement();
    Ok(SeedSet { internal, external })
}

/// The spanning forest computed by [`dynamic_trees_forest`].
#[derive(Debug, Clone)]
pub struct Forest {
    pub width: usize,
    pub height: usize,
    /// Root pixel of the tree that conquered each pixel.
    pub root: Vec<usize>,
    /// Predecessor on the optimum path (`None` for roots and unreached pixels).
    pub predecessor: Vec<Option<usize>>,
    /// Max-arc path cost.
    pub cost: Vec<f64>,
    /// Whether each pixel was conquered by an internal-seed tree.
    pub object: Vec<bool>,
    pub conquered: Vec<bool>,
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct QueueEntry {
    // Non-negative costs order like their bit patterns.
    cost_bits: u64,
    seq: u64,
    pixel: usize,
}

/// Grows an optimum-path forest from every seed pixel at once over
/// 8-adjacency. The arc weight into `q` from a pixel of tree `T` is the
/// Euclidean distance between `I(q)` and the current mean color of `T`;
/// path cost is the maximum arc weight along the path. A tree's mean color
/// is updated as it conquers pixels. Equal costs are served first-in
/// first-out.
pub fn dynamic_trees_forest(image: &FeatureMap, seeds: &SeedSet) -> Result<Forest> {
    let (w, h) = (image.width(), image.height());
    if seeds.internal.size() != (w, h) || seeds.external.size() != (w, h) {
        return Err(invalid("seed masks must match the image size"));
    }
    if seeds.internal.intersects(&seeds.external) {
        return Err(invalid("internal and external seeds overlap"));
    }
    let m = image.channels();
    let n = w * h;
    let mut cost = vec![f64::INFINITY; n];
    let mut root = vec![usize::MAX; n];
    let mut predecessor = vec![None; n];
    let mut conquered = vec![false; n];
    // Per-root running color sums and counts, indexed by root pixel.
    let mut tree_sum: Vec<Vec<f64>> = Vec::new();
    let mut tree_count: Vec<usize> = Vec::new();
    let mut tree_index = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;

    for p in 0..n {
        if seeds.internal.bits[p] || seeds.external.bits[p] {
            cost[p] = 0.0;
            root[p] = p;
            tree_index[p] = tree_sum.len();
            tree_sum.push(vec![0.0; m]);
            tree_count.push(0);
            heap.push(Reverse(QueueEntry {
                cost_bits: 0f64.to_bits(),
                seq,
                pixel: p,
            }));
            seq += 1;
        }
    }

    let mut mean = vec![0.0f64; m];
    while let Some(Reverse(entry)) = heap.pop() {
        let p = entry.pixel;
        if conquered[p] || entry.cost_bits != cost[p].to_bits() {
            continue;
        }
        conquered[p] = true;
        let tree = tree_index[root[p]];
        let (x, y) = (p % w, p / w);
        for (s, &v) in tree_sum[tree].iter_mut().zip(image.pixel(x, y)) {
            *s += f64::from(v);
        }
        tree_count[tree] += 1;
        let count = tree_count[tree] as f64;
        for (mu, s) in mean.iter_mut().zip(&tree_sum[tree]) {
            *mu = s / count;
        }
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (qx, qy) = (x as isize + dx, y as isize + dy);
                if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                    continue;
                }
                let q = qy as usize * w + qx as usize;
                if conquered[q] {
                    continue;
                }
                let arc = image
                    .pixel(qx as usize, qy as usize)
                    .iter()
                    .zip(&mean)
                    .map(|(&v, mu)| (f64::from(v) - mu).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let candidate = cost[p].max(arc);
                if candidate < cost[q] {
                    cost[q] = candidate;
                    root[q] = root[p];
                    predecessor[q] = Some(p);
                    heap.push(Reverse(QueueEntry {
                        cost_bits: candidate.to_bits(),
                        seq,
                        pixel: q,
                    }));
                    seq += 1;
                }
            }
        }
    }

    let object = (0..n)
        .map(|p| conquered[p] && seeds.internal.bits[root[p]])
        .collect();
    Ok(Forest {
        width: w,
        height: h,
        root,
        predecessor,
        cost,
        object,
        conquered,
    })
}

/// Object mask of the dynamic-trees forest: the pixels conquered by trees
/// rooted at internal seeds. Empty when there are no internal seeds.
pub fn dynamic_trees(image: &FeatureMap, seeds: &SeedSet) -> Result<BinaryMask> {
    if seeds.is_degenerate() {
        if seeds.internal.size() != (image.width(), image.height()) {
            return Err(invalid("seed masks must match the image size"));
        }
        return Ok(BinaryMask::empty(image.width(), image.height()));
    }
    let forest = dynamic_trees_forest(image, seeds)?;
    BinaryMask::new(forest.width, forest.height, forest.object)
}

/// Seeds from the saliency map, then delineation on the original colors.
/// Returns the object mask as a `{0, 1}` map (all zeros when degenerate).
pub fn refine(saliency: &SaliencyMap, image: &FeatureMap, params: &RefineParams) -> Result<SaliencyMap> {
    if saliency.size() != (image.width(), image.height()) {
        return Err(invalid(format!(
            "saliency {}x{} does not match image {}x{}",
            saliency.width(),
            saliency.height(),
            image.width(),
            image.height()
        )));
    }
    let seeds = seeds_from_saliency(saliency, params)?;
    if seeds.is_degenerate() {
        return Ok(SaliencyMap::zeros(saliency.width(), saliency.height()));
    }
    Ok(dynamic_trees(image, &seeds)?.to_saliency())
}

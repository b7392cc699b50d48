//! Synthetic parasitology-like dataset: elliptical "eggs" with a dark shell
//! and granular interior, scattered among "impurity" blobs on a noisy,
//! unevenly lit background. Ground truth is exact and generation is
//! deterministic per seed.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, SplitSpec};
use super::dataset::{GT_DIR, IMAGES_DIR, MARKERS_DIR};
use crate::encoder::BlockSpec;
use crate::error::{invalid, Result};
use crate::markers::{Label, Marker, MarkerSet};
use crate::postproc::RefineParams;

const BACKGROUND: [f64; 3] = [208.0, 198.0, 172.0];
const SHELL: [f64; 3] = [105.0, 66.0, 32.0];
const INTERIOR: [f64; 3] = [158.0, 112.0, 58.0];
const IMPURITY_PALETTE: [[f64; 3]; 5] = [
    [150.0, 116.0, 70.0],
    [128.0, 128.0, 132.0],
    [112.0, 146.0, 104.0],
    [96.0, 106.0, 150.0],
    [176.0, 170.0, 160.0],
];
const SHELL_WIDTH: f64 = 2.0;
const PLACEMENT_TRIES: usize = 200;
const GAP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_images: usize,
    pub width: usize,
    pub height: usize,
    /// Inclusive range of eggs per image.
    pub eggs_per_image: (usize, usize),
    /// Inclusive range of pixels per egg.
    pub egg_area: (usize, usize),
    /// Mean number of impurities per 10,000 pixels.
    pub impurity_density: f64,
    /// The first `marked_images` images get automatic markers.
    pub marked_images: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: crate::clustering::DEFAULT_SEED,
            n_images: 22,
            width: 160,
            height: 160,
            eggs_per_image: (1, 3),
            egg_area: (400, 1200),
            impurity_density: 2.0,
            marked_images: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 {
            return Err(invalid("synthetic images must be at least 32x32"));
        }
        if self.eggs_per_image.0 > self.eggs_per_image.1 || self.egg_area.0 > self.egg_area.1 {
            return Err(invalid("inverted range"));
        }
        if self.egg_area.0 < 60 {
            return Err(invalid("eggs smaller than 60 pixels cannot hold a shell and markers"));
        }
        if !(self.impurity_density >= 0.0 && self.impurity_density.is_finite()) {
            return Err(invalid("impurity density must be non-negative"));
        }
        if self.marked_images > self.n_images {
            return Err(invalid("more marked images than images"));
        }
        Ok(())
    }

    /// Refinement parameters scaled to this dataset's object sizes.
    pub fn refine_params(&self) -> RefineParams {
        RefineParams {
            morph_radius: 2,
            min_area: self.egg_area.0 / 2,
            max_area: self.egg_area.1 * 2,
        }
    }
}

/// What was drawn in one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthImage {
    pub id: String,
    pub egg_areas: Vec<usize>,
    pub impurities: usize,
    pub markers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub config: SynthConfig,
    pub images: Vec<SynthImage>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Squared normalized radius of `(x, y)`; inside when `<= 1`.
    fn level(&self, x: f64, y: f64, shrink: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / (self.a - shrink);
        let v = (-dx * self.sin + dy * self.cos) / (self.b - shrink);
        u * u + v * v
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        self.level(x as f64, y as f64, 0.0) <= 1.0
    }

    fn pixel_count(&self, w: usize, h: usize) -> usize {
        let (x0, x1, y0, y1) = self.bounds(w, h);
        (y0..y1)
            .flat_map(|y| (x0..x1).map(move |x| (x, y)))
            .filter(|&(x, y)| self.contains(x, y))
            .count()
    }

    fn bounds(&self, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let r = self.a.ceil() + 1.0;
        let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
        (
            clamp(self.cx - r, w),
            clamp(self.cx + r + 1.0, w),
            clamp(self.cy - r, h),
            clamp(self.cy + r + 1.0, h),
        )
    }
}

struct Blob {
    circles: Vec<(f64, f64, f64)>,
    color: [f64; 3],
}

impl Blob {
    fn contains(&self, x: usize, y: usize) -> bool {
        self.circles
            .iter()
            .any(|&(cx, cy, r)| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r)
    }
}

/// Center and bounding radius of every placed object.
struct Placement {
    taken: Vec<(f64, f64, f64)>,
}

impl Placement {
    fn try_place(&mut self, rng: &mut ChaCha8Rng, radius: f64, w: usize, h: usize) -> Option<(f64, f64)> {
        let lo = radius + GAP;
        if 2.0 * lo >= w.min(h) as f64 {
            return None;
        }
        for _ in 0..PLACEMENT_TRIES {
            let cx = rng.random_range(lo..w as f64 - lo);
            let cy = rng.random_range(lo..h as f64 - lo);
            let free = self
                .taken
                .iter()
                .all(|&(ox, oy, or)| ((cx - ox).powi(2) + (cy - oy).powi(2)).sqrt() > radius + or + GAP);
            if free {
                self.taken.push((cx, cy, radius));
                return Some((cx, cy));
            }
        }
        None
    }
}

fn random_egg(rng: &mut ChaCha8Rng, config: &SynthConfig) -> (f64, f64, f64) {
    let (lo, hi) = (config.egg_area.0 as f64, config.egg_area.1 as f64);
    // Aim inside the range so rasterization rarely falls outside it.
    let area = rng.random_range(lo + 0.05 * (hi - lo)..=hi - 0.05 * (hi - lo));
    let ratio = rng.random_range(0.6..0.85);
    let a = (area / (std::f64::consts::PI * ratio)).sqrt();
    (a, a * ratio, rng.random_range(0.0..std::f64::consts::PI))
}

struct Scene {
    eggs: Vec<Ellipse>,
    blobs: Vec<Blob>,
}

fn build_scene(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Scene {
    let (w, h) = (config.width, config.height);
    let mut placement = Placement { taken: Vec::new() };
    let n_eggs = rng.random_range(config.eggs_per_image.0..=config.eggs_per_image.1);
    let mut eggs = Vec::new();
    for _ in 0..n_eggs {
        for _ in 0..20 {
            let (a, b, angle) = random_egg(rng, config);
            let Some((cx, cy)) = placement.try_place(rng, a + 1.0, w, h) else {
                continue;
            };
            let egg = Ellipse {
                cx,
                cy,
                a,
                b,
                cos: angle.cos(),
                sin: angle.sin(),
            };
            let count = egg.pixel_count(w, h);
            if (config.egg_area.0..=config.egg_area.1).contains(&count) {
                eggs.push(egg);
                break;
            }
            placement.taken.pop();
        }
    }
    let mean = config.impurity_density * (w * h) as f64 / 10_000.0;
    let n_blobs = if mean > 0.0 {
        rng.random_range((mean * 0.5).floor() as usize..=(mean * 1.5).ceil() as usize)
    } else {
        0
    };
    let mut blobs = Vec::new();
    for _ in 0..n_blobs {
        let lobes = rng.random_range(1..=3usize);
        let r0 = rng.random_range(4.0..9.0);
        let Some((cx, cy)) = placement.try_place(rng, r0 * 1.8, w, h) else {
            continue;
        };
        let mut circles = vec![(cx, cy, r0)];
        for _ in 1..lobes {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r: f64 = rng.random_range(3.0..r0);
            let d = r0 * 0.7;
            circles.push((cx + d * angle.cos(), cy + d * angle.sin(), r));
        }
        let color = IMPURITY_PALETTE[rng.random_range(0..IMPURITY_PALETTE.len())];
        blobs.push(Blob { circles, color });
    }
    Scene { eggs, blobs }
}

fn render(rng: &mut ChaCha8Rng, scene: &Scene, w: usize, h: usize) -> (RgbImage, GrayImage) {
    let noise = Normal::new(0.0, 5.0).expect("valid sigma");
    let granule = Normal::new(0.0, 10.0).expect("valid sigma");
    // Soft illumination gradient across the slide.
    let gx = rng.random_range(-0.08..0.08);
    let gy = rng.random_range(-0.08..0.08);
    let mut img = RgbImage::new(w as u32, h as u32);
    let mut gt = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let light = 1.0 + gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);
            let egg = scene.eggs.iter().find(|e| e.contains(x, y));
            let (base, sigma_scale) = if let Some(e) = egg {
                gt.put_pixel(x as u32, y as u32, Luma([255]));
                if e.level(x as f64, y as f64, SHELL_WIDTH) > 1.0 {
                    (SHELL, 1.0)
                } else {
                    (INTERIOR, 0.0)
                }
            } else if let Some(b) = scene.blobs.iter().find(|b| b.contains(x, y)) {
                (b.color, 1.0)
            } else {
                (BACKGROUND, 1.0)
            };
            let shared = if sigma_scale == 0.0 {
                granule.sample(rng)
            } else {
                0.0
            };
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let value = base[c] * light + shared + noise.sample(rng);
                *v = value.round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    (img, gt)
}

fn is_clear_background(scene: &Scene, x: usize, y: usize, margin: f64) -> bool {
    let (fx, fy) = (x as f64, y as f64);
    scene
        .eggs
        .iter()
        .all(|e| ((fx - e.cx).powi(2) + (fy - e.cy).powi(2)).sqrt() > e.a + margin)
        && scene.blobs.iter().all(|b| {
            b.circles
                .iter()
                .all(|&(cx, cy, r)| ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() > r + margin)
        })
}

fn auto_markers(rng: &mut ChaCha8Rng, scene: &Scene, file: &str, w: usize, h: usize) -> MarkerSet {
    let mut markers = Vec::new();
    let push = |markers: &mut Vec<Marker>, x: f64, y: f64, label| {
        let id = markers.len() as u32 + 1;
        let (x, y) = (x.round().clamp(0.0, (w - 1) as f64), y.round().clamp(0.0, (h - 1) as f64));
        markers.push(Marker::new(id, x as u32, y as u32, label));
    };
    for e in &scene.eggs {
        push(&mut markers, e.cx, e.cy, Label::Foreground);
        // A second disk halfway along the major axis, inside the shell.
        let d = (e.a - SHELL_WIDTH) * 0.5;
        push(&mut markers, e.cx + d * e.cos, e.cy + d * e.sin, Label::Foreground);
    }
    for b in scene.blobs.iter().take(3) {
        let (cx, cy, _) = b.circles[0];
        push(&mut markers, cx, cy, Label::Background);
    }
    let mut placed = 0;
    for _ in 0..1000 {
        if placed == 3 {
            break;
        }
        let x = rng.random_range(4..w - 4);
        let y = rng.random_range(4..h - 4);
        if is_clear_background(scene, x, y, 6.0) {
            push(&mut markers, x as f64, y as f64, Label::Background);
            placed += 1;
        }
    }
    MarkerSet::new(file, markers)
}

fn image_seed(root: u64, i: usize) -> u64 {
    root ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Writes `images/`, `gt/`, `markers/`, a `synth.json` summary and a
/// `pipeline.json` whose split trains on the marked images and tests on the
/// rest.
pub fn synth_dataset(root: impl AsRef<Path>, config: &SynthConfig) -> Result<SynthSummary> {
    config.validate()?;
    let root = root.as_ref();
    for dir in [IMAGES_DIR, GT_DIR, MARKERS_DIR] {
        std::fs::create_dir_all(root.join(dir))?;
    }
    let (w, h) = (config.width, config.height);
    let mut images = Vec::with_capacity(config.n_images);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..config.n_images {
        let id = format!("img_{i:03}");
        let file = format!("{id}.png");
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(config.seed, i));
        let scene = build_scene(&mut rng, config);
        let (img, gt) = render(&mut rng, &scene, w, h);
        img.save(root.join(IMAGES_DIR).join(&file))?;
        gt.save(root.join(GT_DIR).join(&file))?;
        let mut n_markers = 0;
        if i < config.marked_images {
            let set = auto_markers(&mut rng, &scene, &file, w, h);
            n_markers = set.len();
            set.save(root.join(MARKERS_DIR).join(format!("{id}.json")))?;
            train.push(id.clone());
        } else {
            test.push(id.clone());
        }
        images.push(SynthImage {
            id,
            egg_areas: scene.eggs.iter().map(|e| e.pixel_count(w, h)).collect(),
            impurities: scene.blobs.len(),
            markers: n_markers,
        });
    }
    let summary = SynthSummary {
        config: config.clone(),
        images,
    };
    std::fs::write(root.join("synth.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut pipeline = PipelineConfig::new(".");
    pipeline.split = SplitSpec::Lists { train, test };
    pipeline.blocks = vec![BlockSpec::new(3, 2); 2];
    pipeline.refine = Some(config.refine_params());
    pipeline.seed = config.seed;
    pipeline.save(root.join("pipeline.json"))?;
    Ok(summary)
}

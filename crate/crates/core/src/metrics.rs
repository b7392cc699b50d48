//! Salient-object-detection metrics: F-measure, MAE, weighted F-measure and
//! threshold-sweep F-measure curves.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::SaliencyMap;
use crate::error::{invalid, Result};
use crate::postproc::{otsu_mask, BinaryMask};

/// The usual SOD setting, `β² = 0.3`.
pub const BETA_SQ_SOD: f64 = 0.3;
/// Plain F1.
pub const BETA_SQ_F1: f64 = 1.0;
/// Number of thresholds in an F-measure curve (1..=255).
pub const CURVE_LEN: usize = 255;

/// Gaussian window and decay constants of the weighted F-measure.
const WF_SIGMA: f64 = 5.0;
const WF_WINDOW: usize = 7;
const WF_DECAY: f64 = -std::f64::consts::LN_2 / 5.0;
const EPS: f64 = f64::EPSILON;

fn check_size(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(invalid(format!(
            "size mismatch: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

fn f_from_counts(tp: u64, fp: u64, fn_: u64, beta_sq: f64) -> f64 {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let denom = beta_sq * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    }
}

/// `(1+β²)·P·R / (β²·P + R)`; 0 when the denominator vanishes.
pub fn f_beta(pred: &BinaryMask, gt: &BinaryMask, beta_sq: f64) -> Result<f64> {
    check_size(pred.size(), gt.size())?;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(f_from_counts(tp, fp, fn_, beta_sq))
}

/// Mean absolute difference between the saliency map and the mask.
pub fn mae(saliency: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    check_size(saliency.size(), gt.size())?;
    let total: f64 = saliency
        .data()
        .iter()
        .zip(gt.bits())
        .map(|(&s, &g)| (f64::from(s) - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(total / gt.bits().len() as f64)
}

/// Weighted F-measure, with a flag set when the ground truth is empty (the
/// score is then 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedF {
    pub score: f64,
    pub degenerate: bool,
}

/// Euclidean distance from every pixel to the nearest foreground pixel of
/// `mask`, with that pixel's index. Exact (separable lower-envelope method).
pub fn distance_transform(mask: &BinaryMask) -> (Vec<f64>, Vec<usize>) {
    let (w, h) = mask.size();
    let inf = f64::INFINITY;
    // Column pass: nearest foreground row in each column.
    let mut col_dist = vec![inf; w * h];
    let mut col_row = vec![usize::MAX; w * h];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if mask.get(x, y) {
                last = Some(y);
            }
            if let Some(r) = last {
                col_dist[y * w + x] = (y - r) as f64;
                col_row[y * w + x] = r;
            }
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if mask.get(x, y) {
                next = Some(y);
            }
            if let Some(r) = next {
                let d = (r - y) as f64;
                if d < col_dist[y * w + x] {
                    col_dist[y * w + x] = d;
                    col_row[y * w + x] = r;
                }
            }
        }
    }
    // Row pass: lower envelope of parabolas (x - x')² + g(x')².
    let mut dist = vec![inf; w * h];
    let mut nearest = vec![usize::MAX; w * h];
    let mut hull: Vec<usize> = Vec::with_capacity(w);
    let mut bounds: Vec<f64> = Vec::with_capacity(w + 1);
    for y in 0..h {
        let f = |x: usize| {
            let g = col_dist[y * w + x];
            g * g
        };
        hull.clear();
        bounds.clear();
        for q in 0..w {
            if !f(q).is_finite() {
                continue;
            }
            loop {
                let Some(&p) = hull.last() else {
                    hull.push(q);
                    bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let s = ((f(q) + (q * q) as f64) - (f(p) + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= *bounds.last().unwrap() {
                    hull.pop();
                    bounds.pop();
                } else {
                    hull.push(q);
                    bounds.push(s);
                    break;
                }
            }
        }
        if hull.is_empty() {
            continue;
        }
        let mut k = 0;
        for x in 0..w {
            while k + 1 < hull.len() && bounds[k + 1] < x as f64 {
                k += 1;
            }
            let p = hull[k];
            let dx = x as f64 - p as f64;
            dist[y * w + x] = (dx * dx + f(p)).sqrt();
            nearest[y * w + x] = col_row[y * w + p] * w + p;
        }
    }
    (dist, nearest)
}

fn gaussian_window() -> Vec<f64> {
    let r = (WF_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .map(|(dx, dy)| (-((dx * dx + dy * dy) as f64) / (2.0 * WF_SIGMA * WF_SIGMA)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Weighted F-measure (β² = 1): pixel errors are smoothed by a Gaussian
/// dependency term inside the object and amplified by distance from the
/// object outside it, then combined into weighted precision and recall.
pub fn weighted_f(saliency: &SaliencyMap, gt: &BinaryMask) -> Result<WeightedF> {
    check_size(saliency.size(), gt.size())?;
    if gt.is_empty() {
        return Ok(WeightedF {
            score: 0.0,
            degenerate: true,
        });
    }
    let (w, h) = gt.size();
    let g: Vec<bool> = gt.bits().to_vec();
    let err: Vec<f64> = saliency
        .data()
        .iter()
        .zip(&g)
        .map(|(&s, &gv)| (if gv { 1.0 } else { 0.0 } - f64::from(s)).abs())
        .collect();
    let (dist, nearest) = distance_transform(gt);
    // Background pixels take the error of their nearest object pixel.
    let et: Vec<f64> = (0..w * h)
        .map(|i| if g[i] { err[i] } else { err[nearest[i]] })
        .collect();
    let kernel = gaussian_window();
    let r = (WF_WINDOW / 2) as isize;
    let mut ea = vec![0.0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            let mut ki = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (qx, qy) = (x + dx, y + dy);
                    if qx >= 0 && qy >= 0 && qx < w as isize && qy < h as isize {
                        acc += kernel[ki] * et[qy as usize * w + qx as usize];
                    }
                    ki += 1;
                }
            }
            ea[y as usize * w + x as usize] = acc;
        }
    }
    let (mut ew_fg_sum, mut ew_bg_sum, mut n_fg) = (0.0, 0.0, 0usize);
    for i in 0..w * h {
        if g[i] {
            let e = if ea[i] < err[i] { ea[i] } else { err[i] };
            ew_fg_sum += e;
            n_fg += 1;
        } else {
            let b = 2.0 - (WF_DECAY * dist[i]).exp();
            ew_bg_sum += err[i] * b;
        }
    }
    let tpw = n_fg as f64 - ew_fg_sum;
    let fpw = ew_bg_sum;
    let recall = 1.0 - ew_fg_sum / n_fg as f64;
    let precision = tpw / (EPS + tpw + fpw);
    let score = 2.0 * recall * precision / (EPS + recall + precision);
    Ok(WeightedF {
        score: score.clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// F-measure of the mask `q ≥ t` for every 8-bit threshold `t = 1..=255`.
pub fn f_curve(saliency: &SaliencyMap, gt: &BinaryMask, beta_sq: f64) -> Result<Vec<f64>> {
    check_size(saliency.size(), gt.size())?;
    let mut pos = [0u64; 256];
    let mut neg = [0u64; 256];
    for (q, &g) in saliency.quantized().into_iter().zip(gt.bits()) {
        if g {
            pos[q as usize] += 1;
        } else {
            neg[q as usize] += 1;
        }
    }
    let total_pos: u64 = pos.iter().sum();
    // Counts of values >= t, accumulated from the top.
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut curve = vec![0.0; CURVE_LEN];
    for t in (1..=255usize).rev() {
        tp += pos[t];
        fp += neg[t];
        curve[t - 1] = f_from_counts(tp, fp, total_pos - tp, beta_sq);
    }
    Ok(curve)
}

/// Curve index whose mask equals the Otsu mask (`q > bin`, i.e. `q ≥ bin+1`),
/// if any.
pub fn curve_index_for_bin(bin: u8) -> Option<usize> {
    (bin < 255).then_some(bin as usize)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub image: String,
    /// F-measure of the Otsu-binarized map.
    pub f_beta: f64,
    pub mae: f64,
    pub weighted_f: f64,
    pub weighted_f_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub beta_sq: f64,
    pub images: Vec<ImageScores>,
    pub f_beta: MeanStd,
    pub mae: MeanStd,
    pub weighted_f: MeanStd,
    /// Mean F-measure curve over images, thresholds 1..=255.
    pub f_curve: Vec<f64>,
}

/// One evaluated image: name, predicted saliency, ground truth.
pub struct EvalItem<'a> {
    pub image: &'a str,
    pub saliency: &'a SaliencyMap,
    pub gt: &'a BinaryMask,
}

/// Scores every item and aggregates mean ± std and the mean curve.
pub fn evaluate(items: &[EvalItem<'_>], beta_sq: f64) -> Result<EvalReport> {
    let per_image: Vec<(ImageScores, Vec<f64>)> = items
        .par_iter()
        .map(|item| {
            let pred = otsu_mask(item.saliency);
            let wf = weighted_f(item.saliency, item.gt)?;
            let scores = ImageScores {
                image: item.image.to_string(),
                f_beta: f_beta(&pred, item.gt, beta_sq)?,
                mae: mae(item.saliency, item.gt)?,
                weighted_f: wf.score,
                weighted_f_degenerate: wf.degenerate,
            };
            Ok((scores, f_curve(item.saliency, item.gt, beta_sq)?))
        })
        .collect::<Result<_>>()?;
    let column = |f: fn(&ImageScores) -> f64| -> Vec<f64> { per_image.iter().map(|(s, _)| f(s)).collect() };
    let mut curve = vec![0.0; CURVE_LEN];
    for (_, c) in &per_image {
        for (acc, v) in curve.iter_mut().zip(c) {
            *acc += v;
        }
    }
    if !per_image.is_empty() {
        let n = per_image.len() as f64;
        curve.iter_mut().for_each(|v| *v /= n);
    }
    Ok(EvalReport {
        beta_sq,
        f_beta: MeanStd::of(&column(|s| s.f_beta)),
        mae: MeanStd::of(&column(|s| s.mae)),
        weighted_f: MeanStd::of(&column(|s| s.weighted_f)),
        images: per_image.into_iter().map(|(s, _)| s).collect(),
        f_curve: curve,
    })
}

/// Mean ± std across splits of each split's mean scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub splits: usize,
    pub f_beta: MeanStd,
    pub mae: MeanStd,
    pub weighted_f: MeanStd,
}

pub fn aggregate_splits(reports: &[EvalReport]) -> SplitSummary {
    let of = |f: fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    SplitSummary {
        splits: reports.len(),
        f_beta: of(|r| r.f_beta.mean),
        mae: of(|r| r.mae.mean),
        weighted_f: of(|r| r.weighted_f.mean),
    }
}

impl EvalReport {
    /// Per-image rows followed by `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,f_beta,mae,weighted_f\n");
        for s in &self.images {
            let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", s.image, s.f_beta, s.mae, s.weighted_f);
        }
        let _ = writeln!(
            out,
            "mean,{:.6},{:.6},{:.6}",
            self.f_beta.mean, self.mae.mean, self.weighted_f.mean
        );
        let _ = writeln!(
            out,
            "std,{:.6},{:.6},{:.6}",
            self.f_beta.std, self.mae.std, self.weighted_f.std
        );
        out
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("threshold,f_measure\n");
        for (i, v) in self.f_curve.iter().enumerate() {
            let _ = writeln!(out, "{},{:.6}", i + 1, v);
        }
        out
    }

    /// A minimal SVG line plot of the F-measure curve.
    pub fn curve_svg(&self) -> String {
        let (w, h, pad) = (480.0, 320.0, 40.0);
        let points: Vec<String> = self
            .f_curve
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = pad + (w - 2.0 * pad) * i as f64 / (CURVE_LEN - 1) as f64;
                let y = h - pad - (h - 2.0 * pad) * v.clamp(0.0, 1.0);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        format!(
            concat!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n",
                "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
                "<line x1=\"{p}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
                "<line x1=\"{p}\" y1=\"{p}\" x2=\"{p}\" y2=\"{b}\" stroke=\"black\"/>\n",
                "<text x=\"{mid}\" y=\"{lab}\" text-anchor=\"middle\" font-size=\"12\">threshold</text>\n",
                "<text x=\"12\" y=\"{p}\" font-size=\"12\">F</text>\n",
                "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{pts}\"/>\n",
                "</svg>\n"
            ),
            w = w,
            h = h,
            p = pad,
            b = h - pad,
            r = w - pad,
            mid = w / 2.0,
            lab = h - 10.0,
            pts = points.join(" ")
        )
    }
}

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{GridPoint, GridSpec, PipelineConfig, Split};
use super::dataset::{ingest, DatasetIndex};
use crate::decoder::{decode_progressive, DecoderConfig, SaliencyMap};
use crate::encoder::{count_parameters, train_encoder, BlockSpec, EncoderMode, EncoderModel, TrainedEncoder};
use crate::error::{invalid, Error, Result};
use crate::metrics::{evaluate, f_beta, mae, EvalItem, EvalReport, BETA_SQ_F1};
use crate::postproc::{otsu_mask, refine, BinaryMask, RefineParams};
use crate::tensor::FeatureMap;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILURE_FILE: &str = "FAILED";
pub const MODEL_DIR: &str = "model";
pub const SALIENCY_DIR: &str = "saliency";
pub const REFINED_DIR: &str = "refined";

/// Per-block decoder outputs for one image, plus the delineated mask when
/// refinement is enabled.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub blocks: Vec<SaliencyMap>,
    pub refined: Option<SaliencyMap>,
}

impl Prediction {
    /// The map that gets evaluated: refined if available, else the last block.
    pub fn final_map(&self) -> &SaliencyMap {
        self.refined
            .as_ref()
            .unwrap_or_else(|| self.blocks.last().expect("models have at least one block"))
    }
}

pub fn predict(
    model: &EncoderModel,
    image: &FeatureMap,
    decoder: &DecoderConfig,
    refine_params: Option<&RefineParams>,
) -> Result<Prediction> {
    if model.blocks.is_empty() {
        return Err(invalid("model has no blocks"));
    }
    let blocks = decode_progressive(model, image, decoder)?;
    let refined = match refine_params {
        Some(p) => Some(refine(blocks.last().expect("nonempty"), image, p)?),
        None => None,
    };
    Ok(Prediction { blocks, refined })
}

/// F-measure (of the Otsu mask) and MAE of one image's final map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image: String,
    pub f_beta: f64,
    pub mae: f64,
}

pub fn score_prediction(image: &str, map: &SaliencyMap, gt: &BinaryMask, beta_sq: f64) -> Result<ImageScore> {
    Ok(ImageScore {
        image: image.to_string(),
        f_beta: f_beta(&otsu_mask(map), gt, beta_sq)?,
        mae: mae(map, gt)?,
    })
}

/// Scores the listed images that have usable ground truth; the rest are
/// skipped with a warning. Results follow the order of `ids`.
pub fn score_images(
    model: &EncoderModel,
    index: &DatasetIndex,
    ids: &[String],
    decoder: &DecoderConfig,
    refine_params: Option<&RefineParams>,
    beta_sq: f64,
) -> Result<Vec<ImageScore>> {
    let scored: Vec<Option<ImageScore>> = ids
        .par_iter()
        .map(|id| {
            let Some(gt) = index.load_gt(id)? else {
                log::warn!("{id}: no usable ground truth, skipped");
                return Ok(None);
            };
            let image = index.load_image(id)?;
            let pred = predict(model, &image, decoder, refine_params)?;
            score_prediction(id, pred.final_map(), &gt, beta_sq).map(Some)
        })
        .collect::<Result<_>>()?;
    Ok(scored.into_iter().flatten().collect())
}

/// The lowest-scoring image (by F), ties broken by the lowest name.
pub fn select_training_image(scores: &[ImageScore]) -> Option<&ImageScore> {
    scores.iter().min_by(|a, b| {
        a.f_beta
            .total_cmp(&b.f_beta)
            .then_with(|| a.image.cmp(&b.image))
    })
}

/// Outcome of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub point: GridPoint,
    /// Mean validation F (β² = 1) after refinement; `None` if the point failed.
    pub score: Option<f64>,
    pub error: Option<String>,
    pub parameters: usize,
}

/// Trains every grid point on the configured training images and ranks them
/// by mean validation F (β² = 1). Failed points are kept, ranked last.
/// Pooling settings come from the config's first block.
pub fn grid_search(
    config: &PipelineConfig,
    grid: &GridSpec,
    index: &DatasetIndex,
    validation: &[String],
) -> Result<Vec<GridResult>> {
    grid.validate()?;
    let split = config.resolve_split(index)?;
    let training = index.training_images(&split.train)?;
    if training.is_empty() {
        return Err(invalid("grid search needs at least one marked training image"));
    }
    let template = config.blocks.first().copied().unwrap_or_default();
    let mut results: Vec<GridResult> = grid
        .points()
        .into_par_iter()
        .map(|point| {
            let outcome = train_encoder(&training, &point.block_specs(&template), config.mode, config.seed)
                .and_then(|trained| {
                    let scores = score_images(
                        &trained.model,
                        index,
                        validation,
                        &config.decoder,
                        config.refine.as_ref(),
                        BETA_SQ_F1,
                    )?;
                    if scores.is_empty() {
                        return Err(invalid("no validation image has ground truth"));
                    }
                    let mean = scores.iter().map(|s| s.f_beta).sum::<f64>() / scores.len() as f64;
                    Ok((mean, count_parameters(&trained.model)))
                });
            match outcome {
                Ok((score, parameters)) => GridResult {
                    point,
                    score: Some(score),
                    error: None,
                    parameters,
                },
                Err(e) => GridResult {
                    point,
                    score: None,
                    error: Some(e.to_string()),
                    parameters: 0,
                },
            }
        })
        .collect();
    // Stable sort keeps grid order among equal scores.
    results.sort_by(|a, b| match (a.score, b.score) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(results)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub load_secs: f64,
    pub train_secs: f64,
    pub infer_secs: f64,
    pub refine_secs: f64,
    pub evaluate_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum RunStatus {
    Running,
    Complete,
    Failed { stage: String, error: String },
}

/// Everything needed to reproduce and audit a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub status: RunStatus,
    pub seed: u64,
    pub mode: EncoderMode,
    pub blocks: Vec<BlockSpec>,
    pub decoder: DecoderConfig,
    pub refine: Option<RefineParams>,
    pub beta_sq: f64,
    pub training_images: Vec<String>,
    pub test_images: Vec<String>,
    pub kmeans_invocations: usize,
    pub kmeans_per_block: Vec<usize>,
    pub kernels_per_block: Vec<usize>,
    pub feature_points: Option<usize>,
    pub filter_estimation_secs: f64,
    pub parameter_count: usize,
    pub stages: StageTimes,
}

/// Mean saliency over ground-truth background and foreground, per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveRow {
    pub image: String,
    pub background_mean: Vec<f64>,
    pub foreground_mean: Vec<f64>,
}

impl ProgressiveRow {
    fn new(image: &str, blocks: &[SaliencyMap], gt: &BinaryMask) -> Self {
        let mean_over = |map: &SaliencyMap, want: bool| {
            let (sum, n) = map
                .data()
                .iter()
                .zip(gt.bits())
                .filter(|(_, &g)| g == want)
                .fold((0.0, 0usize), |(s, n), (&v, _)| (s + f64::from(v), n + 1));
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        };
        Self {
            image: image.to_string(),
            background_mean: blocks.iter().map(|m| mean_over(m, false)).collect(),
            foreground_mean: blocks.iter().map(|m| mean_over(m, true)).collect(),
        }
    }

    /// Whether background saliency never increases from one block to the next.
    pub fn background_non_increasing(&self) -> bool {
        self.background_mean.windows(2).all(|w| w[1] <= w[0])
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    /// Metrics of the last block's decoder output.
    pub decoder_report: EvalReport,
    /// Metrics after delineation, when enabled.
    pub refined_report: Option<EvalReport>,
    pub progressive: Vec<ProgressiveRow>,
}

impl RunOutcome {
    pub fn final_report(&self) -> &EvalReport {
        self.refined_report.as_ref().unwrap_or(&self.decoder_report)
    }
}

fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Writes `<stem>.json`, `<stem>.csv`, `<stem>_curve.csv` and
/// `<stem>_curve.svg`.
pub fn write_report(dir: impl AsRef<Path>, stem: &str, report: &EvalReport) -> Result<()> {
    let dir = dir.as_ref();
    write_json(dir.join(format!("{stem}.json")), report)?;
    std::fs::write(dir.join(format!("{stem}.csv")), report.to_csv())?;
    std::fs::write(dir.join(format!("{stem}_curve.csv")), report.curve_csv())?;
    std::fs::write(dir.join(format!("{stem}_curve.svg")), report.curve_svg())?;
    Ok(())
}

fn progressive_csv(rows: &[ProgressiveRow]) -> String {
    let mut out = String::from("image,block,background_mean,foreground_mean\n");
    for row in rows {
        for (i, (bg, fg)) in row.background_mean.iter().zip(&row.foreground_mean).enumerate() {
            out.push_str(&format!("{},{},{bg:.6},{fg:.6}\n", row.image, i + 1));
        }
    }
    out
}

/// Loads the dataset and trains the configured encoder on the marked images
/// of the training split.
pub fn train_from_config(config: &PipelineConfig) -> Result<(DatasetIndex, Split, TrainedEncoder)> {
    config.validate()?;
    let index = ingest(&config.dataset)?;
    let split = config.resolve_split(&index)?;
    let training = index.training_images(&split.train)?;
    if training.is_empty() {
        return Err(invalid("no marked training images in the training split"));
    }
    let trained = train_encoder(&training, &config.blocks, config.mode, config.seed)?;
    Ok((index, split, trained))
}

struct Tracker<'a> {
    out: &'a Path,
    manifest: RunManifest,
}

impl Tracker<'_> {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut RunManifest) -> Result<T>) -> Result<T> {
        match f(&mut self.manifest) {
            Ok(v) => Ok(v),
            Err(e) => {
                self.manifest.status = RunStatus::Failed {
                    stage: name.to_string(),
                    error: e.to_string(),
                };
                // Best effort: the original error is what matters.
                let _ = std::fs::write(self.out.join(FAILURE_FILE), format!("{name}: {e}\n"));
                let _ = write_json(self.out.join(MANIFEST_FILE), &self.manifest);
                Err(e)
            }
        }
    }
}

/// Trains, decodes every test image block by block, refines, evaluates and
/// writes all artifacts under `out`. On failure, outputs written so far are
/// kept next to a `FAILED` marker naming the stage.
pub fn run_end_to_end(config: &PipelineConfig, out: impl AsRef<Path>) -> Result<RunOutcome> {
    let out = out.as_ref();
    std::fs::create_dir_all(out)?;
    let _ = std::fs::remove_file(out.join(FAILURE_FILE));
    let mut t = Tracker {
        out,
        manifest: RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            status: RunStatus::Running,
            seed: config.seed,
            mode: config.mode,
            blocks: config.blocks.clone(),
            decoder: config.decoder,
            refine: config.refine,
            beta_sq: config.beta_sq,
            training_images: Vec::new(),
            test_images: Vec::new(),
            kmeans_invocations: 0,
            kmeans_per_block: Vec::new(),
            kernels_per_block: Vec::new(),
            feature_points: None,
            filter_estimation_secs: 0.0,
            parameter_count: 0,
            stages: StageTimes::default(),
        },
    };

    let (index, split, training) = t.stage("load", |m| {
        let start = Instant::now();
        config.validate()?;
        let index = ingest(&config.dataset)?;
        let split = config.resolve_split(&index)?;
        let training = index.training_images(&split.train)?;
        if training.is_empty() {
            return Err(invalid("no marked training images in the training split"));
        }
        m.training_images = training.iter().map(|t| t.id.clone()).collect();
        m.test_images = split.test.clone();
        m.stages.load_secs = start.elapsed().as_secs_f64();
        Ok((index, split, training))
    })?;

    let model = t.stage("train", |m| {
        let start = Instant::now();
        let trained = train_encoder(&training, &config.blocks, config.mode, config.seed)?;
        m.stages.train_secs = start.elapsed().as_secs_f64();
        let report = &trained.report;
        m.kmeans_invocations = report.kmeans_invocations;
        m.kmeans_per_block = report.blocks.iter().map(|b| b.kmeans_runs).collect();
        m.kernels_per_block = report.blocks.iter().map(|b| b.kernels).collect();
        m.feature_points = report.feature_points;
        m.filter_estimation_secs = report.filter_estimation_secs;
        m.parameter_count = count_parameters(&trained.model);
        trained.model.save(out.join(MODEL_DIR))?;
        Ok(trained.model)
    })?;
    drop(training);

    let decoded = t.stage("infer", |m| {
        let start = Instant::now();
        std::fs::create_dir_all(out.join(SALIENCY_DIR))?;
        let decoded: Vec<(FeatureMap, Vec<SaliencyMap>)> = split
            .test
            .par_iter()
            .map(|id| {
                let image = index.load_image(id)?;
                let blocks = decode_progressive(&model, &image, &config.decoder)?;
                for (b, map) in blocks.iter().enumerate() {
                    map.save_png(out.join(SALIENCY_DIR).join(format!("{id}_block{}.png", b + 1)))?;
                }
                Ok((image, blocks))
            })
            .collect::<Result<_>>()?;
        m.stages.infer_secs = start.elapsed().as_secs_f64();
        Ok(decoded)
    })?;

    let refined: Option<Vec<SaliencyMap>> = match &config.refine {
        None => None,
        Some(params) => Some(t.stage("refine", |m| {
            let start = Instant::now();
            std::fs::create_dir_all(out.join(REFINED_DIR))?;
            let maps: Vec<SaliencyMap> = decoded
                .par_iter()
                .zip(&split.test)
                .map(|((image, blocks), id)| {
                    let mask = refine(blocks.last().expect("nonempty"), image, params)?;
                    mask.save_png(out.join(REFINED_DIR).join(format!("{id}.png")))?;
                    Ok(mask)
                })
                .collect::<Result<_>>()?;
            m.stages.refine_secs = start.elapsed().as_secs_f64();
            Ok(maps)
        })?),
    };

    let (decoder_report, refined_report, progressive) = t.stage("evaluate", |m| {
        let start = Instant::now();
        let mut gts = Vec::with_capacity(split.test.len());
        for id in &split.test {
            gts.push(index.load_gt(id)?);
        }
        let mut progressive = Vec::new();
        let mut raw_items = Vec::new();
        let mut refined_items = Vec::new();
        for (i, id) in split.test.iter().enumerate() {
            let Some(gt) = &gts[i] else {
                log::warn!("{id}: no usable ground truth, excluded from metrics");
                continue;
            };
            let blocks = &decoded[i].1;
            progressive.push(ProgressiveRow::new(id, blocks, gt));
            raw_items.push(EvalItem {
                image: id,
                saliency: blocks.last().expect("nonempty"),
                gt,
            });
            if let Some(maps) = &refined {
                refined_items.push(EvalItem {
                    image: id,
                    saliency: &maps[i],
                    gt,
                });
            }
        }
        if raw_items.is_empty() {
            return Err(Error::NotFound("test images with usable ground truth".into()));
        }
        let decoder_report = evaluate(&raw_items, config.beta_sq)?;
        write_report(out, "report_decoder", &decoder_report)?;
        let refined_report = match refined {
            Some(_) => {
                let r = evaluate(&refined_items, config.beta_sq)?;
                write_report(out, "report", &r)?;
                Some(r)
            }
            None => {
                write_report(out, "report", &decoder_report)?;
                None
            }
        };
        std::fs::write(out.join("progressive.csv"), progressive_csv(&progressive))?;
        m.stages.evaluate_secs = start.elapsed().as_secs_f64();
        Ok((decoder_report, refined_report, progressive))
    })?;

    t.manifest.status = RunStatus::Complete;
    write_json(out.join(MANIFEST_FILE), &t.manifest)?;
    Ok(RunOutcome {
        manifest: t.manifest,
        decoder_report,
        refined_report,
        progressive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(image: &str, f: f64) -> ImageScore {
        ImageScore {
            image: image.into(),
            f_beta: f,
            mae: 0.0,
        }
    }

    #[test]
    fn selection_rules() {
        assert!(select_training_image(&[]).is_none());
        let ties = [score("b", 1.0), score("a", 1.0), score("c", 1.0)];
        assert_eq!(select_training_image(&ties).unwrap().image, "a");
        let unique = [score("a", 0.9), score("b", 0.2), score("c", 0.5)];
        assert_eq!(select_training_image(&unique).unwrap().image, "b");
    }

    #[test]
    fn progressive_row_means() {
        let gt = BinaryMask::from_fn(4, 1, |x, _| x == 0);
        let a = SaliencyMap::new(4, 1, vec![1.0, 0.6, 0.3, 0.0]).unwrap();
        let b = SaliencyMap::new(4, 1, vec![1.0, 0.3, 0.0, 0.0]).unwrap();
        let row = ProgressiveRow::new("x", &[a, b], &gt);
        assert!((row.background_mean[0] - 0.3).abs() < 1e-6);
        assert!((row.background_mean[1] - 0.1).abs() < 1e-6);
        assert_eq!(row.foreground_mean, vec![1.0, 1.0]);
        assert!(row.background_non_increasing());
    }
}

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use flim::encoder::EncoderMode;
use flim::metrics::{evaluate, EvalItem};
use flim::pipeline::{
    grid_search, ingest, predict, run_end_to_end, synth_dataset, train_from_config, write_report, GridSpec,
    PipelineConfig, SynthConfig,
};
use flim::postproc::refine;
use flim::{EncoderModel, SaliencyMap};
use flim_cli::service::{serve, ServiceConfig};

/// Backpropagation-free salient object detection from image markers.
#[derive(Parser)]
#[command(name = "flim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index a dataset directory and report per-image issues.
    Ingest {
        dataset: PathBuf,
        /// Write the index as JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic egg/impurity dataset with markers and a config.
    Synth(SynthArgs),
    /// Train an encoder on the marked images of the training split.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Decode every block of the trained model on a set of images.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        /// Model directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        images: ImageSelection,
    },
    /// Delineate objects from saliency maps with dynamic trees.
    Refine {
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding `<id>.png` saliency maps.
        #[arg(long)]
        saliency: PathBuf,
        #[command(flatten)]
        images: ImageSelection,
    },
    /// Score predictions against ground truth.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding `<id>.png` predictions.
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        images: ImageSelection,
        /// Overrides the configured β².
        #[arg(long)]
        beta_sq: Option<f64>,
        /// Also plot the F-measure curve as SVG.
        #[arg(long)]
        svg: bool,
    },
    /// Rank architectures over a grid of kernel sizes, kernels per marker and depths.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        kernel_sizes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        kernels_per_marker: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        block_counts: Option<Vec<usize>>,
        /// Validation images; defaults to the unmarked training-split images.
        #[arg(long, value_delimiter = ',')]
        validation: Option<Vec<String>>,
    },
    /// Train, decode, refine and evaluate in one go.
    Run {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Serve the annotation API on localhost.
    Serve {
        dataset: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline configuration JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<EncoderMode>,
}

impl RunArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut config = PipelineConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(mode) = self.mode {
            config.mode = mode;
        }
        config.validate()?;
        Ok(config)
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

#[derive(Args)]
struct ImageSelection {
    /// Image ids; defaults to the test split.
    #[arg(long, value_delimiter = ',')]
    images: Option<Vec<String>>,
}

impl ImageSelection {
    fn resolve(&self, config: &PipelineConfig, index: &flim::pipeline::DatasetIndex) -> Result<Vec<String>> {
        match &self.images {
            Some(ids) => {
                for id in ids {
                    if index.get(id).is_none() {
                        bail!("unknown image {id:?}");
                    }
                }
                Ok(ids.clone())
            }
            None => Ok(config.resolve_split(index)?.test),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Number of images that receive automatic markers.
    #[arg(long)]
    marked: Option<usize>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest { dataset, out } => {
            let index = ingest(&dataset)?;
            let trainable = index.trainable().count();
            let flagged = index.entries.iter().filter(|e| !e.issues.is_empty()).count();
            log::info!("{} images, {trainable} trainable, {flagged} flagged", index.entries.len());
            let json = serde_json::to_string_pretty(&index)?;
            match out {
                Some(path) => std::fs::write(path, json + "\n")?,
                None => println!("{json}"),
            }
        }
        Command::Synth(args) => {
            let defaults = SynthConfig::default();
            let config = SynthConfig {
                seed: args.seed.unwrap_or(defaults.seed),
                n_images: args.images.unwrap_or(defaults.n_images),
                width: args.width.unwrap_or(defaults.width),
                height: args.height.unwrap_or(defaults.height),
                marked_images: args.marked.unwrap_or(defaults.marked_images),
                ..defaults
            };
            let summary = synth_dataset(&args.out, &config)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Train { run } => {
            let config = run.load()?;
            let out = run.out_dir()?;
            let (_, split, trained) = train_from_config(&config)?;
            trained.model.save(out)?;
            log::info!(
                "trained on {} image(s): {} kmeans run(s), {} parameters",
                split.train.len(),
                trained.report.kmeans_invocations,
                flim::encoder::count_parameters(&trained.model)
            );
            std::fs::write(
                out.join("training.json"),
                serde_json::to_string_pretty(&trained.report)? + "\n",
            )?;
        }
        Command::Infer { run, model, images } => {
            let config = run.load()?;
            let out = run.out_dir()?;
            let model = EncoderModel::load(&model).context("loading model")?;
            let index = ingest(&config.dataset)?;
            for id in images.resolve(&config, &index)? {
                let pred = predict(&model, &index.load_image(&id)?, &config.decoder, None)?;
                for (b, map) in pred.blocks.iter().enumerate() {
                    map.save_png(out.join(format!("{id}_block{}.png", b + 1)))?;
                }
                pred.final_map().save_png(out.join(format!("{id}.png")))?;
            }
        }
        Command::Refine { run, saliency, images } => {
            let config = run.load()?;
            let out = run.out_dir()?;
            let index = ingest(&config.dataset)?;
            let params = config.refine.unwrap_or_default();
            for id in images.resolve(&config, &index)? {
                let map = SaliencyMap::load_png(saliency.join(format!("{id}.png")))
                    .with_context(|| format!("saliency for {id}"))?;
                refine(&map, &index.load_image(&id)?, &params)?.save_png(out.join(format!("{id}.png")))?;
            }
        }
        Command::Eval {
            run,
            pred,
            images,
            beta_sq,
            svg,
        } => {
            let config = run.load()?;
            let out = run.out_dir()?;
            let index = ingest(&config.dataset)?;
            let mut loaded = Vec::new();
            for id in images.resolve(&config, &index)? {
                if !index.get(&id).is_some_and(|e| e.evaluable()) {
                    log::warn!("skipping {id}: no usable ground truth");
                    continue;
                }
                let Some(gt) = index.load_gt(&id)? else { continue };
                let map = SaliencyMap::load_png(pred.join(format!("{id}.png")))
                    .with_context(|| format!("prediction for {id}"))?;
                loaded.push((id, map, gt));
            }
            let items: Vec<EvalItem<'_>> = loaded
                .iter()
                .map(|(image, saliency, gt)| EvalItem { image, saliency, gt })
                .collect();
            let report = evaluate(&items, beta_sq.unwrap_or(config.beta_sq))?;
            if svg {
                write_report(out, "report", &report)?;
            } else {
                std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
                std::fs::write(out.join("report.csv"), report.to_csv())?;
                std::fs::write(out.join("report_curve.csv"), report.curve_csv())?;
            }
            println!(
                "F={:.4}±{:.4} MAE={:.4}±{:.4} wF={:.4}±{:.4} ({} images)",
                report.f_beta.mean,
                report.f_beta.std,
                report.mae.mean,
                report.mae.std,
                report.weighted_f.mean,
                report.weighted_f.std,
                report.images.len()
            );
        }
        Command::Grid {
            run,
            kernel_sizes,
            kernels_per_marker,
            block_counts,
            validation,
        } => {
            let config = run.load()?;
            let out = run.out_dir()?;
            let defaults = GridSpec::default();
            let grid = GridSpec {
                kernel_sizes: kernel_sizes.unwrap_or(defaults.kernel_sizes),
                kernels_per_marker: kernels_per_marker.unwrap_or(defaults.kernels_per_marker),
                block_counts: block_counts.unwrap_or(defaults.block_counts),
            };
            let index = ingest(&config.dataset)?;
            let validation = match validation {
                Some(ids) => ids,
                None => {
                    let split = config.resolve_split(&index)?;
                    let unmarked: Vec<String> = split
                        .train
                        .iter()
                        .filter(|id| index.get(id).is_some_and(|e| !e.has_markers && e.evaluable()))
                        .cloned()
                        .collect();
                    if unmarked.is_empty() {
                        log::warn!("no unmarked training images; validating on the test split");
                        split.test
                    } else {
                        unmarked
                    }
                }
            };
            let ranking = grid_search(&config, &grid, &index, &validation)?;
            std::fs::write(out.join("grid.json"), serde_json::to_string_pretty(&ranking)? + "\n")?;
            for r in ranking.iter().take(5) {
                match r.score {
                    Some(s) => println!(
                        "k={} c={} blocks={} F1={s:.4} params={}",
                        r.point.k, r.point.kernels_per_marker, r.point.blocks, r.parameters
                    ),
                    None => println!(
                        "k={} c={} blocks={} failed: {}",
                        r.point.k,
                        r.point.kernels_per_marker,
                        r.point.blocks,
                        r.error.as_deref().unwrap_or("")
                    ),
                }
            }
        }
        Command::Run { run } => {
            let config = run.load()?;
            let outcome = run_end_to_end(&config, &run.out)?;
            let report = outcome.final_report();
            println!(
                "F={:.4} MAE={:.4} wF={:.4} ({} images)",
                report.f_beta.mean,
                report.mae.mean,
                report.weighted_f.mean,
                report.images.len()
            );
        }
        Command::Serve { dataset, port } => {
            let config = ServiceConfig::for_root(dataset)?;
            tokio::runtime::Runtime::new()?.block_on(serve(config, port))?;
        }
    }
    Ok(())
}

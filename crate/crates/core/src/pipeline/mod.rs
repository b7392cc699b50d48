//! Dataset handling and the end-to-end train, infer, refine and evaluate
//! pipeline, including architecture grid search and the synthetic dataset.

mod config;
mod dataset;
mod run;
mod synth;

pub use config::{GridPoint, GridSpec, PipelineConfig, Split, SplitSpec};
pub use dataset::{ingest, DatasetEntry, DatasetIndex, EntryIssue, GT_DIR, IMAGES_DIR, MARKERS_DIR};
pub use run::{
    grid_search, predict, run_end_to_end, score_images, score_prediction, select_training_image, train_from_config,
    write_report, GridResult, ImageScore, Prediction, ProgressiveRow, RunManifest, RunOutcome, RunStatus, StageTimes,
    FAILURE_FILE, MANIFEST_FILE, MODEL_DIR, REFINED_DIR, SALIENCY_DIR,
};
pub use synth::{synth_dataset, SynthConfig, SynthImage, SynthSummary};

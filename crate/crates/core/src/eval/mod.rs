//! Inference, the metric report, text ablations and cost benchmarking.

pub mod annotate;
pub mod boxes;
pub mod metrics;

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

pub use annotate::{detection_listing, draw_detections};
pub use boxes::{decode, iou, nms, DecodeSettings, Detection, Xyxy};
pub use metrics::{ClassMetrics, DeltaReport, ImageEval, MetricsReport};

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::model::{DetectorModel, ParamCounts};
use crate::parallel;
use crate::text::{Corruption, TextProvider};
use crate::train::{train, Phase, TrainSettings};

/// Post-NMS detections for one sample; text is fetched only for fusion models.
pub fn predict_sample(
    model: &DetectorModel<f32>,
    sample: &Sample,
    text: &TextProvider,
    settings: &DecodeSettings,
) -> Result<Vec<Detection>> {
    let seq = if model.has_fusion() { Some(text.sequence(sample)?) } else { None };
    let maps = model.predict(&sample.image.to_tensor(), seq.as_ref())?;
    Ok(decode(&maps, &model.config().geometry(), settings))
}

fn ground_truth(sample: &Sample, canvas: f64) -> Vec<(usize, Xyxy)> {
    sample.annotations.iter().map(|a| (a.class_id, a.xyxy(canvas))).collect()
}

/// Metric report over one split. Images run in parallel; results are
/// merged in dataset order so the report does not depend on thread count.
pub fn evaluate(
    model: &DetectorModel<f32>,
    ds: &Dataset,
    split: Split,
    text: &TextProvider,
    settings: &DecodeSettings,
) -> Result<MetricsReport> {
    let samples: Vec<&Sample> = ds.split(split).collect();
    if samples.is_empty() {
        return Err(Error::Usage(format!("split `{}` is empty", split.as_str())));
    }
    if model.config().num_classes != ds.catalog.len() {
        return Err(Error::Config(format!(
            "model predicts {} classes but catalog `{}` has {}",
            model.config().num_classes,
            ds.catalog.name,
            ds.catalog.len()
        )));
    }
    let canvas = model.config().input_size as f64;
    let images = parallel::install(|| {
        samples
            .par_iter()
            .map(|s| {
                Ok(ImageEval {
                    detections: predict_sample(model, s, text, settings)?,
                    ground_truth: ground_truth(s, canvas),
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let names: Vec<String> = ds.catalog.names().map(String::from).collect();
    Ok(MetricsReport::build(&names, &images))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationInfo {
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub ablation: AblationInfo,
    #[serde(flatten)]
    pub report: MetricsReport,
    /// Percent change of every cell relative to the reference report.
    pub deltas: DeltaReport,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serialisable") + "\n"
    }
}

/// Evaluates a fusion model with corrupted descriptions and compares the
/// result with `reference`.
pub fn ablation_eval(
    model: &DetectorModel<f32>,
    ds: &Dataset,
    split: Split,
    text: &TextProvider,
    corruption: Corruption,
    reference: &MetricsReport,
    settings: &DecodeSettings,
) -> Result<AblationReport> {
    if !model.has_fusion() {
        return Err(Error::Usage("text ablations need a fusion model".into()));
    }
    let info = match &corruption {
        Corruption::None => return Err(Error::Usage("ablation needs a corruption mode".into())),
        Corruption::Mismatch { seed } => AblationInfo {
            mode: "mismatch".into(),
            class: None,
            seed: *seed,
        },
        Corruption::Partial { class } => AblationInfo {
            mode: "partial".into(),
            class: Some(class.clone()),
            seed: 0,
        },
    };
    let provider = text.clone().with_corruption(corruption)?;
    let report = evaluate(model, ds, split, &provider, settings)?;
    let deltas = DeltaReport::between(&report, reference);
    Ok(AblationReport {
        ablation: info,
        report,
        deltas,
    })
}

/// Cost figures in the layout of a parameter/time table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub fusion: String,
    pub xattn_count: usize,
    pub params: ParamCounts,
    pub epochs_timed: usize,
    pub train_images_per_epoch: usize,
    pub batch_size: usize,
    /// Mean wall time of one training epoch.
    pub mean_epoch_seconds: f64,
    pub images_timed: usize,
    /// Mean wall time of single-image inference (one image at a time).
    pub mean_inference_seconds: f64,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serialisable") + "\n"
    }
}

pub const MIN_TIMED_IMAGES: usize = 100;

/// Times `epochs` training epochs on a copy of the model and single-image
/// inference over the test split, cycling through it until at least
/// [`MIN_TIMED_IMAGES`] images have been timed.
pub fn bench(
    model: &DetectorModel<f32>,
    ds: &Dataset,
    text: &TextProvider,
    settings: &TrainSettings,
) -> Result<BenchReport> {
    let mut scratch = model.clone();
    let phase = if model.has_fusion() { Phase::Finetune } else { Phase::Baseline };
    if phase == Phase::Finetune && !scratch.initialized_from_store() {
        // timing only: a freshly built fusion model counts as its own init
        let own = scratch.params().clone();
        scratch.load_shared_from(&own);
    }
    // timing must not be skewed by validation passes
    let mut train_only = ds.clone();
    train_only.samples.retain(|s| s.split == Split::Train);
    let outcome = train(&mut scratch, &train_only, phase, settings, text, |_| {})?;
    let epoch_secs: Vec<f64> = outcome.curve.iter().map(|e| e.seconds).collect();

    let test: Vec<&Sample> = ds.split(Split::Test).collect();
    if test.is_empty() {
        return Err(Error::Usage("bench needs a non-empty test split".into()));
    }
    let n = MIN_TIMED_IMAGES.max(test.len());
    let mut total = 0.0;
    for i in 0..n {
        let s = test[i % test.len()];
        let seq = if model.has_fusion() { Some(text.sequence(s)?) } else { None };
        let img = s.image.to_tensor();
        let t = Instant::now();
        let maps = model.predict(&img, seq.as_ref())?;
        std::hint::black_box(decode(&maps, &model.config().geometry(), &settings.decode));
        total += t.elapsed().as_secs_f64();
    }
    Ok(BenchReport {
        fusion: model.config().fusion.as_str().to_string(),
        xattn_count: model.config().xattn_count,
        params: model.count_parameters(),
        epochs_timed: epoch_secs.len(),
        train_images_per_epoch: train_only.samples.len(),
        batch_size: settings.batch_size,
        mean_epoch_seconds: epoch_secs.iter().sum::<f64>() / epoch_secs.len().max(1) as f64,
        images_timed: n,
        mean_inference_seconds: total / n as f64,
    })
}

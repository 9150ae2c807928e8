//! Single-image localization and manifest-wide evaluation.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::cam::{eigen_cam, ActivationMap, CamConfig, CamError};
use crate::io::{self, Aggregate, FormatError, ManifestRecord, RecordReport, ReportDocument};
use crate::localize::{self, binarize, largest_component_bbox, BoundingBox, LocalizationRecord, LocalizeError};
use crate::refnet::{forward_to_tap, ModelError, ModelGraph};
use crate::tensor::{FeatureMap, RasterImage};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("line {line}: {source}")]
    Format {
        line: usize,
        #[source]
        source: FormatError,
    },
    #[error("line {line}: {source}")]
    Model {
        line: usize,
        #[source]
        source: ModelError,
    },
    #[error("line {line}: {source}")]
    Cam {
        line: usize,
        #[source]
        source: CamError,
    },
    #[error("line {line}: activation file is not a rank-3 feature map: {detail}")]
    NotFeatureMap { line: usize, detail: String },
    #[error("line {line}: no activation source (pass a model and tap, or set \"fmap\")")]
    MissingActivationSource { line: usize },
    #[error("MissingClassificationFlag: line {line} has no classified_correctly flag")]
    MissingClassificationFlag { line: usize },
    #[error(transparent)]
    Localize(#[from] LocalizeError),
    #[error("invalid job count: {0}")]
    Jobs(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Cam(#[from] CamError),
    #[error(transparent)]
    Localize(#[from] LocalizeError),
}

/// Where activations come from.
#[derive(Debug, Clone, Copy)]
pub enum ActivationSource<'a> {
    /// Run the reference network up to `tap` on each image.
    Model { model: &'a ModelGraph, tap: usize },
    /// Read each record's `fmap` dump.
    RecordFmap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub cam: ActivationMap,
    pub bbox: BoundingBox,
    /// No foreground survived binarization; `bbox` is the whole image.
    pub fallback: bool,
}

/// CAM at image resolution, binarized, boxed around its largest segment.
pub fn localize_feature_map(
    fm: &FeatureMap,
    height: usize,
    width: usize,
    cam: &CamConfig,
    threshold_fraction: f64,
) -> Result<Localization, PipelineError> {
    let cam = eigen_cam(fm, cam)?.quantize(height, width);
    let mask = binarize(cam.quantized.as_ref().expect("quantized above"), threshold_fraction)?;
    let (bbox, fallback) = match largest_component_bbox(&mask) {
        Ok(b) => (b, false),
        Err(LocalizeError::EmptyMask) => (BoundingBox::full(height, width), true),
        Err(e) => return Err(e.into()),
    };
    Ok(Localization { cam, bbox, fallback })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub cam: CamConfig,
    pub threshold_fraction: f64,
    pub iou_threshold: f64,
    pub gate_on_classification: bool,
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cam: CamConfig::default(),
            threshold_fraction: localize::DEFAULT_THRESHOLD,
            iou_threshold: localize::DEFAULT_IOU_THRESHOLD,
            gate_on_classification: false,
            jobs: 1,
        }
    }
}

struct Outcome {
    predicted: BoundingBox,
    fallback: bool,
}

fn load_feature_map(rec: &ManifestRecord, image: &RasterImage, source: ActivationSource) -> Result<FeatureMap, HarnessError> {
    let line = rec.line;
    match source {
        ActivationSource::Model { model, tap } => {
            forward_to_tap(model, &image.to_tensor_with_channels(model.input_channels()), tap).map_err(|source| HarnessError::Model { line, source })
        }
        ActivationSource::RecordFmap => {
            let path = rec.fmap.as_ref().ok_or(HarnessError::MissingActivationSource { line })?;
            let t = io::read_fmap(path).map_err(|source| HarnessError::Format { line, source })?;
            FeatureMap::from_tensor(t).map_err(|e| HarnessError::NotFeatureMap {
                line,
                detail: e.to_string(),
            })
        }
    }
}

fn evaluate_record(rec: &ManifestRecord, source: ActivationSource, cfg: &EvalConfig) -> Result<Outcome, HarnessError> {
    let line = rec.line;
    let image = io::read_image(&rec.image).map_err(|source| HarnessError::Format { line, source })?;
    let (h, w) = (image.height(), image.width());
    rec.check_bounds(h, w)
        .map_err(|source| HarnessError::Format { line, source })?;
    let fm = load_feature_map(rec, &image, source)?;
    match localize_feature_map(&fm, h, w, &cfg.cam, cfg.threshold_fraction) {
        Ok(loc) => Ok(Outcome {
            predicted: loc.bbox,
            fallback: loc.fallback,
        }),
        // a map with no signal gets the same treatment as an empty mask
        Err(PipelineError::Cam(CamError::DegenerateActivations)) => Ok(Outcome {
            predicted: BoundingBox::full(h, w),
            fallback: true,
        }),
        Err(PipelineError::Cam(source)) => Err(HarnessError::Cam { line, source }),
        Err(PipelineError::Localize(e)) => Err(e.into()),
    }
}

/// Localizes every manifest record and scores the predictions.
///
/// Records are processed on `cfg.jobs` threads; results are folded in
/// manifest order, so the report does not depend on the job count. The first
/// failing record (in manifest order) aborts the run.
pub fn evaluate(
    records: &[ManifestRecord],
    source: ActivationSource,
    cfg: &EvalConfig,
) -> Result<ReportDocument, HarnessError> {
    // reject bad thresholds before touching any file
    binarize(&crate::tensor::Map2::filled(1, 1, 0u8), cfg.threshold_fraction)?;
    if records.is_empty() {
        return Err(LocalizeError::EmptyDataset.into());
    }
    if cfg.gate_on_classification {
        if let Some(rec) = records.iter().find(|r| r.classified_correctly.is_none()) {
            return Err(HarnessError::MissingClassificationFlag { line: rec.line });
        }
    }
    if cfg.jobs == 0 {
        return Err(HarnessError::Jobs("must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| HarnessError::Jobs(e.to_string()))?;
    let outcomes: Vec<Result<Outcome, HarnessError>> =
        pool.install(|| records.par_iter().map(|r| evaluate_record(r, source, cfg)).collect());
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;

    let scored: Vec<LocalizationRecord> = records
        .iter()
        .zip(&outcomes)
        .map(|(rec, out)| LocalizationRecord {
            id: rec.image.display().to_string(),
            predicted: out.predicted,
            ground_truth: rec.boxes.clone(),
            classified_correctly: rec.classified_correctly,
        })
        .collect();
    let summary = localize::localization_error(&scored, cfg.iou_threshold, cfg.gate_on_classification)?;

    let reports = scored
        .into_iter()
        .zip(records)
        .zip(outcomes)
        .zip(&summary.verdicts)
        .map(|(((sc, rec), out), verdict)| RecordReport {
            line: rec.line,
            image: sc.id,
            predicted_box: out.predicted,
            best_iou: verdict.best_iou,
            hit: verdict.hit,
            fallback: out.fallback,
        })
        .collect();
    Ok(ReportDocument {
        records: reports,
        aggregate: Aggregate {
            error_rate: summary.error_rate,
            threshold_fraction: cfg.threshold_fraction,
            iou_threshold: cfg.iou_threshold,
            gated: cfg.gate_on_classification,
            count: summary.count,
            hits: summary.hits,
        },
    })
}

/// Reads a manifest from disk and evaluates it.
pub fn evaluate_manifest(path: &Path, source: ActivationSource, cfg: &EvalConfig) -> Result<ReportDocument, HarnessError> {
    let records = io::read_manifest(path).map_err(|source| match &source {
        FormatError::ParseError { line, .. } | FormatError::BoxOutOfBounds { line, .. } => {
            HarnessError::Format { line: *line, source }
        }
        _ => HarnessError::Format { line: 0, source },
    })?;
    evaluate(&records, source, cfg)
}

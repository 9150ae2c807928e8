//! Box extraction from a quantized CAM and the metrics used to score it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Map2;

pub const DEFAULT_THRESHOLD: f64 = 0.10;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const MIN_THRESHOLD: f64 = 0.05;
pub const MAX_THRESHOLD: f64 = 0.50;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LocalizeError {
    #[error("ThresholdOutOfRange: {0} not in [0.05, 0.50]")]
    ThresholdOutOfRange(f64),
    #[error("EmptyMask: no foreground pixel")]
    EmptyMask,
    #[error("EmptyDataset: no records to score")]
    EmptyDataset,
    #[error("MissingClassificationFlag: record {index} has no classified_correctly flag")]
    MissingClassificationFlag { index: usize },
    #[error("record {index} has no ground-truth box")]
    NoGroundTruth { index: usize },
    #[error("DimensionMismatch: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "mask buffer must be height*width");
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Axis-aligned box with inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", from = "[usize; 4]")]
pub struct BoundingBox {
    pub xmin: usize,
    pub ymin: usize,
    pub xmax: usize,
    pub ymax: usize,
}

impl From<BoundingBox> for [usize; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.xmin, b.ymin, b.xmax, b.ymax]
    }
}

impl From<[usize; 4]> for BoundingBox {
    fn from(v: [usize; 4]) -> Self {
        Self {
            xmin: v[0],
            ymin: v[1],
            xmax: v[2],
            ymax: v[3],
        }
    }
}

impl BoundingBox {
    pub fn new(xmin: usize, ymin: usize, xmax: usize, ymax: usize) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    /// Whole-image box.
    pub fn full(height: usize, width: usize) -> Self {
        Self::new(0, 0, width - 1, height - 1)
    }

    pub fn is_ordered(&self) -> bool {
        self.xmin <= self.xmax && self.ymin <= self.ymax
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.is_ordered() && self.xmax < width && self.ymax < height
    }

    pub fn width(&self) -> usize {
        self.xmax - self.xmin + 1
    }

    pub fn height(&self) -> usize {
        self.ymax - self.ymin + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationRecord {
    pub id: String,
    pub predicted: BoundingBox,
    pub ground_truth: Vec<BoundingBox>,
    pub classified_correctly: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Verdict {
    pub best_iou: f64,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationSummary {
    pub error_rate: f64,
    pub hits: usize,
    pub count: usize,
    pub verdicts: Vec<Verdict>,
}

fn check_threshold(t: f64) -> Result<(), LocalizeError> {
    if (MIN_THRESHOLD..=MAX_THRESHOLD).contains(&t) {
        Ok(())
    } else {
        Err(LocalizeError::ThresholdOutOfRange(t))
    }
}

/// Foreground iff `value >= round(threshold_fraction * 255)`.
pub fn binarize(cam8: &Map2<u8>, threshold_fraction: f64) -> Result<BinaryMask, LocalizeError> {
    check_threshold(threshold_fraction)?;
    let cut = (threshold_fraction * 255.0).round() as u8;
    Ok(BinaryMask::new(
        cam8.height(),
        cam8.width(),
        cam8.data().iter().map(|&v| v >= cut).collect(),
    ))
}

/// Tight box around the largest 8-connected foreground component. Equal
/// sizes resolve to the component that appears first in row-major order.
pub fn largest_component_bbox(mask: &BinaryMask) -> Result<BoundingBox, LocalizeError> {
    let (h, w) = (mask.height, mask.width);
    let mut visited = vec![false; h * w];
    let mut stack = Vec::new();
    let mut best: Option<(usize, BoundingBox)> = None;

    for start in 0..h * w {
        if !mask.bits[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut size = 0;
        let mut bbox = BoundingBox::new(start % w, start / w, start % w, start / w);
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = (p / w, p % w);
            bbox.xmin = bbox.xmin.min(x);
            bbox.xmax = bbox.xmax.max(x);
            bbox.ymin = bbox.ymin.min(y);
            bbox.ymax = bbox.ymax.max(y);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let q = ny * w + nx;
                    if mask.bits[q] && !visited[q] {
                        visited[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        // components are discovered in order of their smallest pixel index,
        // so a strict comparison keeps the earliest on ties
        if best.map_or(true, |(s, _)| size > s) {
            best = Some((size, bbox));
        }
    }
    best.map(|(_, b)| b).ok_or(LocalizeError::EmptyMask)
}

/// Intersection over union with inclusive pixel bounds.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix0 = a.xmin.max(b.xmin);
    let iy0 = a.ymin.max(b.ymin);
    let ix1 = a.xmax.min(b.xmax);
    let iy1 = a.ymax.min(b.ymax);
    if ix0 > ix1 || iy0 > iy1 {
        return 0.0;
    }
    let inter = (ix1 - ix0 + 1) * (iy1 - iy0 + 1);
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Fraction of records that are not hits. A record is a hit when its best IoU
/// against any ground-truth box reaches `iou_threshold` and, if gating, it was
/// classified correctly.
pub fn localization_error(
    records: &[LocalizationRecord],
    iou_threshold: f64,
    gate_on_classification: bool,
) -> Result<LocalizationSummary, LocalizeError> {
    if records.is_empty() {
        return Err(LocalizeError::EmptyDataset);
    }
    let mut verdicts = Vec::with_capacity(records.len());
    for (index, rec) in records.iter().enumerate() {
        if rec.ground_truth.is_empty() {
            return Err(LocalizeError::NoGroundTruth { index });
        }
        let correct = match (gate_on_classification, rec.classified_correctly) {
            (false, _) => true,
            (true, Some(flag)) => flag,
            (true, None) => return Err(LocalizeError::MissingClassificationFlag { index }),
        };
        let best_iou = rec
            .ground_truth
            .iter()
            .map(|gt| iou(&rec.predicted, gt))
            .fold(0.0, f64::max);
        verdicts.push(Verdict {
            best_iou,
            hit: correct && best_iou >= iou_threshold,
        });
    }
    let hits = verdicts.iter().filter(|v| v.hit).count();
    let count = records.len();
    Ok(LocalizationSummary {
        error_rate: 1.0 - hits as f64 / count as f64,
        hits,
        count,
        verdicts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CamSimilarity {
    pub pearson: f64,
    pub mask_iou: f64,
    /// Set when either map is constant; `pearson` is then reported as 0.
    pub undefined: bool,
}

/// Pearson correlation of two quantized CAMs and IoU of their foreground
/// pixel sets. Two empty foregrounds count as identical (IoU 1).
pub fn cam_similarity(a: &Map2<u8>, b: &Map2<u8>, threshold_fraction: f64) -> Result<CamSimilarity, LocalizeError> {
    if a.dims() != b.dims() {
        return Err(LocalizeError::DimensionMismatch {
            a: a.dims(),
            b: b.dims(),
        });
    }
    let ma = binarize(a, threshold_fraction)?;
    let mb = binarize(b, threshold_fraction)?;

    let n = a.data().len() as f64;
    let mean = |m: &Map2<u8>| m.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mean_a, mean_b) = (mean(a), mean(b));
    let (mut cov, mut var_a, mut var_b) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x as f64 - mean_a, y as f64 - mean_b);
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    let undefined = var_a == 0.0 || var_b == 0.0;
    let pearson = if undefined {
        0.0
    } else {
        (cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0)
    };

    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in ma.bits().iter().zip(mb.bits()) {
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    let mask_iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok(CamSimilarity {
        pearson,
        mask_iou,
        undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut bits = vec![false; h * w];
        for &(y, x) in on {
            bits[y * w + x] = true;
        }
        BinaryMask::new(h, w, bits)
    }

    #[test]
    fn binarize_examples() {
        let zeros = Map2::filled(2, 2, 0u8);
        assert_eq!(binarize(&zeros, 0.10).unwrap().count(), 0);
        let edge = Map2::from_vec(1, 2, vec![25u8, 26]).unwrap();
        assert_eq!(binarize(&edge, 0.10).unwrap().bits(), &[false, true]);
        let full = Map2::filled(3, 3, 255u8);
        for t in [0.05, 0.10, 0.15, 0.5] {
            assert_eq!(binarize(&full, t).unwrap().count(), 9);
        }
    }

    #[test]
    fn binarize_threshold_range() {
        let m = Map2::filled(1, 1, 0u8);
        assert_eq!(binarize(&m, 0.04), Err(LocalizeError::ThresholdOutOfRange(0.04)));
        assert_eq!(binarize(&m, 0.51), Err(LocalizeError::ThresholdOutOfRange(0.51)));
    }

    #[test]
    fn single_pixel_box() {
        let m = mask(4, 5, &[(2, 3)]);
        assert_eq!(largest_component_bbox(&m).unwrap(), BoundingBox::new(3, 2, 3, 2));
    }

    #[test]
    fn diagonal_pixels_connect() {
        let m = mask(2, 2, &[(0, 0), (1, 1)]);
        assert_eq!(largest_component_bbox(&m).unwrap(), BoundingBox::new(0, 0, 1, 1));
    }

    #[test]
    fn larger_blob_wins() {
        // 2-pixel blob first in scan order, 3-pixel blob later
        let m = mask(5, 5, &[(0, 0), (0, 1), (3, 2), (3, 3), (4, 3)]);
        assert_eq!(largest_component_bbox(&m).unwrap(), BoundingBox::new(2, 3, 3, 4));
    }

    #[test]
    fn equal_blobs_pick_first() {
        let m = mask(3, 5, &[(2, 0), (0, 4)]);
        assert_eq!(largest_component_bbox(&m).unwrap(), BoundingBox::new(4, 0, 4, 0));
    }

    #[test]
    fn empty_mask_errors() {
        assert_eq!(largest_component_bbox(&mask(3, 3, &[])), Err(LocalizeError::EmptyMask));
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0, 0, 9, 9);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoundingBox::new(10, 0, 12, 9)), 0.0);
        let b = BoundingBox::new(5, 0, 14, 9);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    fn record(pred: BoundingBox, gt: BoundingBox, flag: Option<bool>) -> LocalizationRecord {
        LocalizationRecord {
            id: String::new(),
            predicted: pred,
            ground_truth: vec![gt],
            classified_correctly: flag,
        }
    }

    #[test]
    fn error_rate_examples() {
        let gt = BoundingBox::new(0, 0, 9, 9);
        let perfect = vec![record(gt, gt, None); 3];
        assert_eq!(localization_error(&perfect, 0.5, false).unwrap().error_rate, 0.0);

        let miss = vec![record(BoundingBox::new(20, 20, 25, 25), gt, None); 2];
        assert_eq!(localization_error(&miss, 0.5, false).unwrap().error_rate, 1.0);

        // IoU 0.6 (6 columns of 10) and 0.4
        let mixed = vec![
            record(BoundingBox::new(0, 0, 5, 9), gt, None),
            record(BoundingBox::new(0, 0, 3, 9), gt, None),
        ];
        let s = localization_error(&mixed, 0.5, false).unwrap();
        assert!((s.verdicts[0].best_iou - 0.6).abs() < 1e-12);
        assert!((s.verdicts[1].best_iou - 0.4).abs() < 1e-12);
        assert_eq!(s.error_rate, 0.5);
    }

    #[test]
    fn any_ground_truth_box_counts() {
        let rec = LocalizationRecord {
            id: "x".into(),
            predicted: BoundingBox::new(10, 10, 19, 19),
            ground_truth: vec![BoundingBox::new(0, 0, 3, 3), BoundingBox::new(10, 10, 19, 19)],
            classified_correctly: None,
        };
        assert_eq!(localization_error(&[rec], 0.5, false).unwrap().error_rate, 0.0);
    }

    #[test]
    fn gating() {
        let gt = BoundingBox::new(0, 0, 9, 9);
        let wrong = vec![record(gt, gt, Some(false)); 4];
        assert_eq!(localization_error(&wrong, 0.5, true).unwrap().error_rate, 1.0);
        assert_eq!(localization_error(&wrong, 0.5, false).unwrap().error_rate, 0.0);
        let missing = vec![record(gt, gt, Some(true)), record(gt, gt, None)];
        assert_eq!(
            localization_error(&missing, 0.5, true),
            Err(LocalizeError::MissingClassificationFlag { index: 1 })
        );
        assert_eq!(localization_error(&[], 0.5, false), Err(LocalizeError::EmptyDataset));
    }

    #[test]
    fn similarity_examples() {
        let a = Map2::from_vec(2, 3, vec![0u8, 50, 255, 10, 120, 30]).unwrap();
        let s = cam_similarity(&a, &a, 0.10).unwrap();
        assert_eq!((s.pearson, s.mask_iou, s.undefined), (1.0, 1.0, false));

        let inv = Map2::from_vec(2, 3, a.data().iter().map(|v| 255 - v).collect()).unwrap();
        let s = cam_similarity(&a, &inv, 0.10).unwrap();
        assert!((s.pearson + 1.0).abs() < 1e-12);

        let flat = Map2::filled(2, 3, 9u8);
        let s = cam_similarity(&flat, &a, 0.10).unwrap();
        assert!(s.undefined);
        assert_eq!(s.pearson, 0.0);

        let other = Map2::filled(3, 2, 9u8);
        assert!(matches!(
            cam_similarity(&a, &other, 0.10),
            Err(LocalizeError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn box_serializes_as_array() {
        let b = BoundingBox::new(1, 2, 3, 4);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1,2,3,4]");
        let back: BoundingBox = serde_json::from_str("[1,2,3,4]").unwrap();
        assert_eq!(back, b);
    }
}

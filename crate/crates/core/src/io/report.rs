//! JSON report written by batch evaluation.

use serde::{Deserialize, Serialize};

use crate::localize::BoundingBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordReport {
    pub line: usize,
    pub image: String,
    pub predicted_box: BoundingBox,
    pub best_iou: f64,
    pub hit: bool,
    /// The CAM had no foreground; the whole image was predicted.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub error_rate: f64,
    pub threshold_fraction: f64,
    pub iou_threshold: f64,
    pub gated: bool,
    pub count: usize,
    pub hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub records: Vec<RecordReport>,
    pub aggregate: Aggregate,
}

impl ReportDocument {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Error rate recomputed from the per-record verdicts.
    pub fn recomputed_error_rate(&self) -> f64 {
        let hits = self.records.iter().filter(|r| r.hit).count();
        1.0 - hits as f64 / self.records.len() as f64
    }
}

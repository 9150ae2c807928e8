//! JSON Lines evaluation manifest, one image per line:
//!
//! ```text
//! {"image": "a.ppm", "boxes": [[xmin, ymin, xmax, ymax], ...], "label": 3,
//!  "classified_correctly": true, "fmap": "a.fmap"}
//! ```
//!
//! Only `image` and `boxes` are required. Unknown keys are ignored, blank lines
//! skipped, and relative paths resolved against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{read_bytes, FormatError};
use crate::localize::BoundingBox;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    /// 1-based line number in the manifest.
    pub line: usize,
    pub image: PathBuf,
    pub boxes: Vec<BoundingBox>,
    pub label: Option<i64>,
    pub classified_correctly: Option<bool>,
    pub fmap: Option<PathBuf>,
}

impl ManifestRecord {
    /// Checks that every ground-truth box fits an image of the given size.
    pub fn check_bounds(&self, height: usize, width: usize) -> Result<(), FormatError> {
        match self.boxes.iter().find(|b| !b.fits(height, width)) {
            None => Ok(()),
            Some(b) => Err(FormatError::BoxOutOfBounds {
                line: self.line,
                detail: format!("box {:?} outside {width}x{height} image", <[usize; 4]>::from(*b)),
            }),
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    image: PathBuf,
    boxes: Vec<[i64; 4]>,
    #[serde(default)]
    label: Option<i64>,
    #[serde(default)]
    classified_correctly: Option<bool>,
    #[serde(default)]
    fmap: Option<PathBuf>,
}

pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<ManifestRecord>, FormatError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| FormatError::ParseError {
            line: line_no,
            detail: e.to_string(),
        })?;
        if raw.boxes.is_empty() {
            return Err(FormatError::ParseError {
                line: line_no,
                detail: "boxes must contain at least one box".into(),
            });
        }
        let mut boxes = Vec::with_capacity(raw.boxes.len());
        for b in &raw.boxes {
            let ordered = b.iter().all(|&v| v >= 0 && v <= u32::MAX as i64) && b[0] <= b[2] && b[1] <= b[3];
            if !ordered {
                return Err(FormatError::BoxOutOfBounds {
                    line: line_no,
                    detail: format!("invalid box {b:?}"),
                });
            }
            boxes.push(BoundingBox::new(b[0] as usize, b[1] as usize, b[2] as usize, b[3] as usize));
        }
        records.push(ManifestRecord {
            line: line_no,
            image: base_dir.join(raw.image),
            boxes,
            label: raw.label,
            classified_correctly: raw.classified_correctly,
            fmap: raw.fmap.map(|p| base_dir.join(p)),
        });
    }
    Ok(records)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>, FormatError> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| FormatError::ParseError {
        line: 1 + e.as_bytes()[..e.utf8_error().valid_up_to()]
            .iter()
            .filter(|&&b| b == b'\n')
            .count(),
        detail: "invalid UTF-8".into(),
    })?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_records() {
        let text = r#"{"image": "a.ppm", "boxes": [[0, 1, 2, 3]], "extra": 5}

{"image": "/abs/b.pgm", "boxes": [[0,0,0,0],[1,1,4,4]], "label": 7, "classified_correctly": false, "fmap": "b.fmap"}
"#;
        let recs = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].line, 1);
        assert_eq!(recs[0].image, PathBuf::from("/data/a.ppm"));
        assert_eq!(recs[0].boxes, vec![BoundingBox::new(0, 1, 2, 3)]);
        assert_eq!(recs[0].classified_correctly, None);
        assert_eq!(recs[1].line, 3);
        assert_eq!(recs[1].image, PathBuf::from("/abs/b.pgm"));
        assert_eq!(recs[1].label, Some(7));
        assert_eq!(recs[1].classified_correctly, Some(false));
        assert_eq!(recs[1].fmap, Some(PathBuf::from("/data/b.fmap")));
    }

    #[test]
    fn missing_boxes_reports_line() {
        let text = "{\"image\": \"a.ppm\", \"boxes\": [[0,0,1,1]]}\n{\"image\": \"b.ppm\"}\n";
        match parse_manifest(text, Path::new("")) {
            Err(FormatError::ParseError { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inverted_box_is_out_of_bounds() {
        let text = "{\"image\": \"a.ppm\", \"boxes\": [[5,0,4,1]]}";
        assert!(matches!(
            parse_manifest(text, Path::new("")),
            Err(FormatError::BoxOutOfBounds { line: 1, .. })
        ));
        let text = "{\"image\": \"a.ppm\", \"boxes\": [[-1,0,4,1]]}";
        assert!(matches!(
            parse_manifest(text, Path::new("")),
            Err(FormatError::BoxOutOfBounds { line: 1, .. })
        ));
        let text = "{\"image\": \"a.ppm\", \"boxes\": []}";
        assert!(matches!(parse_manifest(text, Path::new("")), Err(FormatError::ParseError { line: 1, .. })));
    }

    #[test]
    fn image_bounds() {
        let recs = parse_manifest("{\"image\": \"a\", \"boxes\": [[0,0,9,4]]}", Path::new("")).unwrap();
        assert!(recs[0].check_bounds(5, 10).is_ok());
        assert!(matches!(recs[0].check_bounds(5, 9), Err(FormatError::BoxOutOfBounds { line: 1, .. })));
    }
}

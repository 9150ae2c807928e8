//! Binary PGM (P5) and PPM (P6) with maxval 255. Header comments are
//! accepted when reading and never written.

use std::path::Path;

use super::{read_bytes, write_bytes, FormatError};
use crate::tensor::RasterImage;

pub fn encode_pnm(img: &RasterImage) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, FormatError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(FormatError::CorruptHeader {
                offset: start,
                detail: format!("expected {what}"),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .ok()
            .filter(|&v: &usize| v <= u32::MAX as usize)
            .ok_or_else(|| FormatError::CorruptHeader {
                offset: start,
                detail: format!("{what} out of range"),
            })
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<RasterImage, FormatError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some([b'P', b'1'..=b'7']) => {
            return Err(FormatError::UnsupportedFormat(format!(
                "netpbm variant {} (only binary P5/P6 are supported)",
                String::from_utf8_lossy(&bytes[..2])
            )))
        }
        _ => return Err(FormatError::UnsupportedFormat("not a binary PGM/PPM file".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(FormatError::CorruptHeader {
            offset: 2,
            detail: "expected whitespace after magic".into(),
        });
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(FormatError::CorruptHeader {
            offset: 3,
            detail: format!("zero image dimension {width}x{height}"),
        });
    }
    if maxval != 255 {
        return Err(FormatError::UnsupportedFormat(format!(
            "maxval {maxval} at offset {maxval_at} (only 255 is supported)"
        )));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => {
            return Err(FormatError::CorruptHeader {
                offset: h.pos,
                detail: "expected a single whitespace byte after maxval".into(),
            })
        }
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| FormatError::CorruptHeader {
            offset: 3,
            detail: "image too large".into(),
        })?;
    let payload = &bytes[h.pos..];
    if payload.len() < expected {
        return Err(FormatError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    Ok(RasterImage::new(height, width, channels, payload[..expected].to_vec()).expect("sized above"))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RasterImage, FormatError> {
    let path = path.as_ref();
    decode_pnm(&read_bytes(path)?).map_err(|e| FormatError::InFile {
        name: path.display().to_string(),
        source: Box::new(e),
    })
}

pub fn write_image(path: impl AsRef<Path>, img: &RasterImage) -> Result<(), FormatError> {
    write_bytes(path.as_ref(), &encode_pnm(img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p6_encoding() {
        let img = RasterImage::new(1, 2, 3, vec![255, 0, 0, 0, 0, 255]).unwrap();
        let bytes = encode_pnm(&img);
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[255, 0, 0, 0, 0, 255]);
        assert_eq!(decode_pnm(&bytes).unwrap(), img);
    }

    #[test]
    fn comments_are_skipped() {
        let mut bytes = b"P5 # made by hand\n# another\n3 # w\n1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (3, 1, 1));
        assert_eq!(img.pixels(), &[1, 2, 3]);
        // comments are never written back
        assert_eq!(&encode_pnm(&img)[..], b"P5\n3 1\n255\n\x01\x02\x03");
    }

    #[test]
    fn payload_bytes_may_look_like_whitespace() {
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[b' ', b'#']);
        assert_eq!(decode_pnm(&bytes).unwrap().pixels(), b" #");
    }

    #[test]
    fn error_cases() {
        assert!(matches!(
            decode_pnm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(FormatError::UnsupportedFormat(_))
        ));
        assert!(matches!(decode_pnm(b"P3\n1 1\n255\n0 0 0"), Err(FormatError::UnsupportedFormat(_))));
        assert!(matches!(decode_pnm(b"\x89PNG"), Err(FormatError::UnsupportedFormat(_))));
        assert!(matches!(decode_pnm(b"P6\nx 1\n255\n"), Err(FormatError::CorruptHeader { offset: 3, .. })));
        assert!(matches!(decode_pnm(b"P6\n0 1\n255\n"), Err(FormatError::CorruptHeader { .. })));
        assert!(matches!(
            decode_pnm(b"P6\n2 1\n255\n\x01\x02"),
            Err(FormatError::TruncatedPayload { expected: 6, found: 2 })
        ));
        assert!(matches!(decode_pnm(b"P5"), Err(FormatError::CorruptHeader { .. })));
    }
}

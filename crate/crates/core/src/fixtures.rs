//! Synthetic feature maps with known principal structure, for tests and demos.

use std::path::{Path, PathBuf};

use crate::io::{write_fmap, write_image, FormatError};
use crate::localize::BoundingBox;
use crate::refnet::XorShift64;
use crate::tensor::{FeatureMap, RasterImage};

fn uniform(rng: &mut XorShift64, lo: f32, hi: f32) -> f32 {
    lo + (rng.next_signed() + 1.0) * 0.5 * (hi - lo)
}

/// Spatial plane with values in `[lo, hi]` on `support`, zero elsewhere.
pub fn planted_plane(height: usize, width: usize, support: BoundingBox, lo: f32, hi: f32, rng: &mut XorShift64) -> Vec<f32> {
    let mut plane = vec![0.0f32; height * width];
    for y in support.ymin..=support.ymax {
        for x in support.xmin..=support.xmax {
            plane[y * width + x] = uniform(rng, lo, hi);
        }
    }
    plane
}

/// Outer product: channel `c` is `a[c] * plane`.
pub fn outer(a: &[f32], plane: &[f32], height: usize, width: usize) -> FeatureMap {
    let data = a.iter().flat_map(|&ac| plane.iter().map(move |&p| ac * p)).collect();
    FeatureMap::new(a.len(), height, width, data).expect("finite outer product")
}

/// Rank-1 activations `p a^T`: positive channel loadings and a pattern
/// supported on `support` with values in `[0.5, 1]`.
pub fn rank_one(channels: usize, height: usize, width: usize, support: BoundingBox, seed: u64) -> FeatureMap {
    let mut rng = XorShift64::new(seed);
    let a: Vec<f32> = (0..channels).map(|_| uniform(&mut rng, 0.1, 1.0)).collect();
    let p = planted_plane(height, width, support, 0.5, 1.0, &mut rng);
    outer(&a, &p, height, width)
}

/// `p1 a1^T + p2 a2^T` with orthonormal channel loadings and disjoint spatial
/// supports. `p1` takes values in `[1, 1.5]` and `p2` in `[0.3, 0.6]`, so with
/// `area(first) >= area(second)` the first pattern is the dominant component.
pub fn rank_two(
    channels: usize,
    height: usize,
    width: usize,
    first: BoundingBox,
    second: BoundingBox,
    seed: u64,
) -> FeatureMap {
    assert!(channels >= 2, "rank-2 fixture needs two channels");
    let mut rng = XorShift64::new(seed);
    let mut a1: Vec<f64> = (0..channels).map(|_| uniform(&mut rng, 0.1, 1.0) as f64).collect();
    let mut a2: Vec<f64> = (0..channels).map(|_| uniform(&mut rng, -1.0, 1.0) as f64).collect();
    let n1 = a1.iter().map(|v| v * v).sum::<f64>().sqrt();
    a1.iter_mut().for_each(|v| *v /= n1);
    let proj: f64 = a1.iter().zip(&a2).map(|(x, y)| x * y).sum();
    a2.iter_mut().zip(&a1).for_each(|(y, x)| *y -= proj * x);
    let n2 = a2.iter().map(|v| v * v).sum::<f64>().sqrt();
    a2.iter_mut().for_each(|v| *v /= n2);

    let p1 = planted_plane(height, width, first, 1.0, 1.5, &mut rng);
    let p2 = planted_plane(height, width, second, 0.3, 0.6, &mut rng);
    let plane = height * width;
    let mut data = vec![0.0f32; channels * plane];
    for c in 0..channels {
        for s in 0..plane {
            data[c * plane + s] = (a1[c] * p1[s] as f64 + a2[c] * p2[s] as f64) as f32;
        }
    }
    FeatureMap::new(channels, height, width, data).expect("finite")
}

/// Writes `count` planted-pattern records (grayscale image, FMAP dump and a
/// `manifest.jsonl` line each) into `dir` and returns the manifest path.
///
/// Every third record's ground truth is moved to the opposite corner so the
/// dataset has misses, and `classified_correctly` alternates.
pub fn write_synthetic_dataset(dir: &Path, count: usize, seed: u64) -> Result<PathBuf, FormatError> {
    let mut rng = XorShift64::new(seed);
    let mut manifest = String::new();
    for i in 0..count {
        let (h, w) = (12 + (rng.next_u64() % 5) as usize, 12 + (rng.next_u64() % 5) as usize);
        let bw = 3 + (rng.next_u64() % 4) as usize;
        let bh = 3 + (rng.next_u64() % 4) as usize;
        let x0 = (rng.next_u64() % (w / 2 - bw / 2) as u64) as usize;
        let y0 = (rng.next_u64() % (h / 2 - bh / 2) as u64) as usize;
        let support = BoundingBox::new(x0, y0, x0 + bw - 1, y0 + bh - 1);
        let fm = rank_one(4 + i % 5, h, w, support, seed ^ (i as u64 + 1));
        let truth = if i % 3 == 2 {
            BoundingBox::new(w - bw, h - bh, w - 1, h - 1)
        } else {
            support
        };
        let pixels = (0..h * w).map(|p| ((p * 37 + i * 11) % 256) as u8).collect();
        let image = RasterImage::new(h, w, 1, pixels).expect("sized");
        let image_name = format!("img{i:04}.pgm");
        let fmap_name = format!("act{i:04}.fmap");
        write_image(dir.join(&image_name), &image)?;
        write_fmap(dir.join(&fmap_name), fm.as_tensor())?;
        let line = serde_json::json!({
            "image": image_name,
            "boxes": [truth],
            "label": i % 10,
            "classified_correctly": i % 2 == 0,
            "fmap": fmap_name,
        });
        manifest.push_str(&line.to_string());
        manifest.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    crate::io::write_bytes(&path, manifest.as_bytes())?;
    Ok(path)
}

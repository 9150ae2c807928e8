//! Principal-component class activation maps.
//!
//! The tapped activations are reshaped to `(H*W) x C`, their `k`-th right
//! singular vector is found, and every spatial location is projected onto it.
//! The projection is then min-max scaled to 8 bits, resampled to image size
//! and optionally blended over the source image with a jet colormap.

use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::tensor::{feature_map_to_matrix, matrix_to_map, FeatureMap, Map2, Matrix, RasterImage};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CamError {
    #[error("DegenerateActivations: feature map carries no signal")]
    DegenerateActivations,
    #[error("NoConvergence: component {component} after {iterations} iterations")]
    NoConvergence { component: usize, iterations: usize },
    #[error("invalid component {component} for a feature map with {channels} channels")]
    InvalidComponent { component: usize, channels: usize },
    #[error("DimensionMismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamConfig {
    /// 1-based principal component to project on.
    pub component: usize,
    /// Subtract per-channel means before the decomposition.
    pub center: bool,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            component: 1,
            center: false,
            tol: linalg::DEFAULT_TOL,
            max_iter: linalg::DEFAULT_MAX_ITER,
        }
    }
}

impl CamConfig {
    pub fn with_component(mut self, component: usize) -> Self {
        self.component = component;
        self
    }

    pub fn centered(mut self, center: bool) -> Self {
        self.center = center;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    /// Projection at feature-map resolution.
    pub raw: Map2<f32>,
    /// 8-bit map after normalization and resampling, when computed.
    pub quantized: Option<Map2<u8>>,
    pub component: usize,
    pub sigma: f64,
}

impl ActivationMap {
    /// Normalizes the raw map to 0..=255 at feature resolution, then resamples
    /// to `height x width`.
    pub fn quantize(mut self, height: usize, width: usize) -> Self {
        let cam8 = normalize_map(&self.raw);
        self.quantized = Some(upsample_bilinear(&cam8, height, width));
        self
    }
}

/// Projects the activations onto their `cfg.component`-th principal direction.
///
/// The sign of the direction is chosen so that the map sums to a nonnegative
/// value; an exact zero sum keeps the singular-vector sign convention.
pub fn eigen_cam(fm: &FeatureMap, cfg: &CamConfig) -> Result<ActivationMap, CamError> {
    let channels = fm.channels();
    if cfg.component == 0 || cfg.component > channels.min(linalg::MAX_COMPONENT) {
        return Err(CamError::InvalidComponent {
            component: cfg.component,
            channels,
        });
    }
    if fm.data().iter().all(|&v| v == 0.0) {
        return Err(CamError::DegenerateActivations);
    }

    let mut m = feature_map_to_matrix(fm);
    if cfg.center {
        m = center_columns(&m);
    }
    let comp = linalg::top_component(&m, cfg.component, cfg.tol, cfg.max_iter).map_err(|e| match e {
        LinalgError::DegenerateInput => CamError::DegenerateActivations,
        LinalgError::NoConvergence {
            component,
            iterations,
            ..
        } => CamError::NoConvergence {
            component,
            iterations,
        },
        LinalgError::InvalidArgument(_) => CamError::InvalidComponent {
            component: cfg.component,
            channels,
        },
    })?;

    let mut projection: Vec<f64> = (0..m.rows())
        .map(|r| m.row(r).iter().zip(&comp.v).map(|(&a, &b)| a as f64 * b).sum())
        .collect();
    if projection.iter().sum::<f64>() < 0.0 {
        projection.iter_mut().for_each(|p| *p = -*p);
    }
    let values: Vec<f32> = projection.into_iter().map(|p| p as f32).collect();
    let raw = matrix_to_map(&values, fm.height(), fm.width()).expect("projection has H*W entries");
    Ok(ActivationMap {
        raw,
        quantized: None,
        component: cfg.component,
        sigma: comp.sigma,
    })
}

fn center_columns(m: &Matrix<f32>) -> Matrix<f32> {
    let rows = m.rows() as f64;
    let means: Vec<f64> = (0..m.cols())
        .map(|c| (0..m.rows()).map(|r| m.get(r, c) as f64).sum::<f64>() / rows)
        .collect();
    Matrix::from_fn(m.rows(), m.cols(), |r, c| (m.get(r, c) as f64 - means[c]) as f32)
}

/// Min-max scales to `0..=255`, rounding half away from zero. A constant map
/// (range below `1e-12`) becomes all zeros.
pub fn normalize_map(raw: &Map2<f32>) -> Map2<u8> {
    let (lo, hi) = raw
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    let range = hi - lo;
    let data = if range < 1e-12 {
        vec![0u8; raw.data().len()]
    } else {
        raw.data()
            .iter()
            .map(|&v| (255.0 * (v as f64 - lo) / range).round().clamp(0.0, 255.0) as u8)
            .collect()
    };
    Map2::from_vec(raw.height(), raw.width(), data).expect("same dims as input")
}

/// Pixel types that can be resampled.
pub trait Sample: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Sample for u8 {
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn from_f64(v: f64) -> Self {
        v.round().clamp(0.0, 255.0) as u8
    }
}

impl Sample for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

/// Source coordinate and blend weight along one axis, half-pixel centers.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn upsample_bilinear<T: Sample>(map: &Map2<T>, target_h: usize, target_w: usize) -> Map2<T> {
    let ys = axis_taps(map.height(), target_h);
    let xs = axis_taps(map.width(), target_w);
    let mut out = Vec::with_capacity(target_h * target_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = map.get(y0, x0).to_f64() * (1.0 - fx) + map.get(y0, x1).to_f64() * fx;
            let bottom = map.get(y1, x0).to_f64() * (1.0 - fx) + map.get(y1, x1).to_f64() * fx;
            out.push(T::from_f64(top * (1.0 - fy) + bottom * fy));
        }
    }
    Map2::from_vec(target_h, target_w, out).expect("target dims are nonzero")
}

const JET: [(u8, [u8; 3]); 6] = [
    (0, [0, 0, 128]),
    (32, [0, 0, 255]),
    (96, [0, 255, 255]),
    (160, [255, 255, 0]),
    (224, [255, 0, 0]),
    (255, [128, 0, 0]),
];

/// Piecewise-linear jet colormap.
pub fn jet(value: u8) -> [u8; 3] {
    let seg = JET
        .windows(2)
        .find(|w| value <= w[1].0)
        .expect("table covers 0..=255");
    let (lo, hi) = (seg[0], seg[1]);
    let t = (value - lo.0) as f64 / (hi.0 - lo.0) as f64;
    let mut rgb = [0u8; 3];
    for (ch, out) in rgb.iter_mut().enumerate() {
        let a = lo.1[ch] as f64;
        let b = hi.1[ch] as f64;
        *out = (a + t * (b - a)).round() as u8;
    }
    rgb
}

/// Blends the jet-colored CAM over `image`. The result is RGB, except that
/// `alpha == 0` returns the input unchanged.
pub fn overlay(image: &RasterImage, cam8: &Map2<u8>, alpha: f64) -> Result<RasterImage, CamError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CamError::InvalidAlpha(alpha));
    }
    if cam8.dims() != (image.height(), image.width()) {
        return Err(CamError::DimensionMismatch {
            expected: (image.height(), image.width()),
            found: cam8.dims(),
        });
    }
    if alpha == 0.0 {
        return Ok(image.clone());
    }
    let mut pixels = Vec::with_capacity(image.height() * image.width() * 3);
    for y in 0..image.height() {
        for x in 0..image.width() {
            let src = image.rgb(y, x);
            let heat = jet(cam8.get(y, x));
            for ch in 0..3 {
                let v = (1.0 - alpha) * src[ch] as f64 + alpha * heat[ch] as f64;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(RasterImage::new(image.height(), image.width(), 3, pixels).expect("rgb buffer sized to image"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map<T: Copy>(h: usize, w: usize, v: &[T]) -> Map2<T> {
        Map2::from_vec(h, w, v.to_vec()).unwrap()
    }

    /// Channel `c` plane is `a[c] * plane`.
    fn rank_one(a: &[f32], plane: &[f32], h: usize, w: usize) -> FeatureMap {
        let data = a.iter().flat_map(|&ac| plane.iter().map(move |&p| ac * p)).collect();
        FeatureMap::new(a.len(), h, w, data).unwrap()
    }

    #[test]
    fn rank_one_map_follows_pattern() {
        let fm = rank_one(&[0.6, 0.8], &[1.0, 0.0, 0.0, 0.0], 2, 2);
        let cam = eigen_cam(&fm, &CamConfig::default()).unwrap();
        assert!(cam.raw.get(0, 0) > 0.0);
        assert_eq!(cam.raw.argmax(), (0, 0));
        for &v in &cam.raw.data()[1..] {
            assert!(v.abs() < 1e-6);
        }
        assert!((cam.raw.get(0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_channel_map_is_scaled_copy() {
        let q = [0.0, 2.0, 5.0, 1.0, 0.5, 3.0];
        let mut data = vec![0.0f32; 3 * 6];
        data[6..12].copy_from_slice(&q);
        let fm = FeatureMap::new(3, 2, 3, data).unwrap();
        let cam = eigen_cam(&fm, &CamConfig::default()).unwrap();
        for (r, &qv) in cam.raw.data().iter().zip(&q) {
            assert!((r - qv).abs() < 1e-6);
        }
        assert_eq!(cam.raw.argmax(), (0, 2));
    }

    #[test]
    fn zero_map_is_degenerate() {
        let fm = FeatureMap::new(2, 2, 2, vec![0.0; 8]).unwrap();
        assert_eq!(eigen_cam(&fm, &CamConfig::default()), Err(CamError::DegenerateActivations));
    }

    #[test]
    fn component_out_of_range() {
        let fm = FeatureMap::new(2, 1, 1, vec![1.0, 2.0]).unwrap();
        let err = eigen_cam(&fm, &CamConfig::default().with_component(3)).unwrap_err();
        assert_eq!(err, CamError::InvalidComponent { component: 3, channels: 2 });
    }

    #[test]
    fn centering_constant_channels_is_degenerate() {
        let fm = FeatureMap::new(2, 2, 1, vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        let err = eigen_cam(&fm, &CamConfig::default().centered(true)).unwrap_err();
        assert_eq!(err, CamError::DegenerateActivations);
    }

    #[test]
    fn sign_makes_sum_nonnegative() {
        // dominant direction projects negative on most pixels unless flipped
        let fm = FeatureMap::new(2, 1, 3, vec![-1.0, -2.0, 0.5, -1.0, -2.0, 0.5]).unwrap();
        let cam = eigen_cam(&fm, &CamConfig::default()).unwrap();
        assert!(cam.raw.data().iter().map(|&v| v as f64).sum::<f64>() >= 0.0);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_map(&map(1, 2, &[0.0, 1.0])).data(), &[0, 255]);
        assert_eq!(normalize_map(&map(1, 3, &[-1.0, 0.0, 3.0])).data(), &[0, 64, 255]);
        assert_eq!(normalize_map(&map(2, 2, &[5.0; 4])).data(), &[0; 4]);
    }

    #[test]
    fn upsample_identity_is_exact() {
        let m = map(2, 3, &[1u8, 7, 200, 3, 0, 255]);
        assert_eq!(upsample_bilinear(&m, 2, 3), m);
        let f = map(2, 2, &[0.1f32, -3.7, 1e-8, 42.0]);
        assert_eq!(upsample_bilinear(&f, 2, 2), f);
    }

    #[test]
    fn upsample_constant_extension() {
        let m = map(1, 1, &[7u8]);
        assert!(upsample_bilinear(&m, 5, 3).data().iter().all(|&v| v == 7));
    }

    #[test]
    fn upsample_two_by_two_golden() {
        // The source is the plane v = 100*y + 100*x, so every target pixel is
        // 100 * (sy + sx) with sy, sx in {0, 0.25, 0.75, 1} after clamping.
        let m = map(2, 2, &[0u8, 100, 100, 200]);
        let up = upsample_bilinear(&m, 4, 4);
        #[rustfmt::skip]
        let golden: [u8; 16] = [
              0,  25,  75, 100,
             25,  50, 100, 125,
             75, 100, 150, 175,
            100, 125, 175, 200,
        ];
        assert_eq!(up.data(), &golden);
    }

    #[test]
    fn jet_control_points() {
        assert_eq!(jet(0), [0, 0, 128]);
        assert_eq!(jet(32), [0, 0, 255]);
        assert_eq!(jet(96), [0, 255, 255]);
        assert_eq!(jet(160), [255, 255, 0]);
        assert_eq!(jet(224), [255, 0, 0]);
        assert_eq!(jet(255), [128, 0, 0]);
        // halfway 0 -> 32: blue 128 + 0.5 * 127 = 191.5 rounds up
        assert_eq!(jet(16), [0, 0, 192]);
    }

    #[test]
    fn overlay_examples() {
        let img = RasterImage::new(2, 2, 3, (0..12).map(|v| v * 20).collect()).unwrap();
        let zeros = Map2::filled(2, 2, 0u8);
        assert_eq!(overlay(&img, &zeros, 0.0).unwrap(), img);
        let full = overlay(&img, &zeros, 1.0).unwrap();
        assert!(full.pixels().chunks(3).all(|p| p == [0, 0, 128]));
        let cyan = overlay(&img, &Map2::filled(2, 2, 96u8), 1.0).unwrap();
        assert!(cyan.pixels().chunks(3).all(|p| p == [0, 255, 255]));
    }

    #[test]
    fn overlay_rejects_bad_inputs() {
        let img = RasterImage::new(2, 2, 1, vec![0; 4]).unwrap();
        let wrong = Map2::filled(2, 3, 0u8);
        assert!(matches!(overlay(&img, &wrong, 0.5), Err(CamError::DimensionMismatch { .. })));
        let ok = Map2::filled(2, 2, 0u8);
        assert_eq!(overlay(&img, &ok, 1.5), Err(CamError::InvalidAlpha(1.5)));
    }
}

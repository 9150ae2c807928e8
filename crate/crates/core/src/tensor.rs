//! Dense containers shared by every stage of the pipeline.
//!
//! All containers validate their invariants on construction and expose no
//! in-place mutation; transformations return new values.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("tensor rank {0} is not in 1..=4")]
    InvalidRank(usize),
    #[error("dimension {axis} is zero")]
    ZeroDim { axis: usize },
    #[error("length mismatch: expected {expected} elements, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("expected a rank-{expected} tensor, got rank {found}")]
    WrongRank { expected: usize, found: usize },
    #[error("image must have 1 or 3 channels, got {0}")]
    BadChannelCount(usize),
}

/// Row-major `f32` tensor of rank 1 to 4; the last dimension is fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(TensorError::InvalidRank(dims.len()));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(TensorError::ZeroDim { axis });
        }
        let expected = dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self, TensorError> {
        let n = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Elementwise map. Fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self, TensorError> {
        Self::new(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Rank-3 activation tensor laid out channel-major: `(c, y, x)` lives at
/// `c*H*W + y*W + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::from_tensor(Tensor::new(vec![channels, height, width], data)?)
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self, TensorError> {
        if tensor.rank() != 3 {
            return Err(TensorError::WrongRank {
                expected: 3,
                found: tensor.rank(),
            });
        }
        Ok(Self { tensor })
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.dims[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims[2]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        let (h, w) = (self.height(), self.width());
        self.tensor.data[c * h * w + y * w + x]
    }

    pub fn data(&self) -> &[f32] {
        self.tensor.data()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn scaled(&self, factor: f32) -> Result<Self, TensorError> {
        Self::from_tensor(self.tensor.map(|v| v * factor)?)
    }
}

/// 8-bit raster, row-major with interleaved channels (1 = gray, 3 = RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self, TensorError> {
        if channels != 1 && channels != 3 {
            return Err(TensorError::BadChannelCount(channels));
        }
        if height == 0 {
            return Err(TensorError::ZeroDim { axis: 0 });
        }
        if width == 0 {
            return Err(TensorError::ZeroDim { axis: 1 });
        }
        let expected = height * width * channels;
        if pixels.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                found: pixels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// RGB triple at `(y, x)`; gray images replicate their single channel.
    pub fn rgb(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * self.channels;
        if self.channels == 1 {
            let g = self.pixels[i];
            [g, g, g]
        } else {
            [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
        }
    }

    /// Converts to a `[C, H, W]` tensor with values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0f32; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[ch * h * w + y * w + x] = self.pixels[(y * w + x) * c + ch] as f32 / 255.0;
                }
            }
        }
        Tensor {
            dims: vec![c, h, w],
            data,
        }
    }

    /// Like [`RasterImage::to_tensor`], but a gray image is replicated to
    /// three channels when `channels == 3`.
    pub fn to_tensor_with_channels(&self, channels: usize) -> Tensor {
        if self.channels == 1 && channels == 3 {
            let pixels = self.pixels.iter().flat_map(|&g| [g, g, g]).collect();
            RasterImage {
                height: self.height,
                width: self.width,
                channels: 3,
                pixels,
            }
            .to_tensor()
        } else {
            self.to_tensor()
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        if rows == 0 {
            return Err(TensorError::ZeroDim { axis: 0 });
        }
        if cols == 0 {
            return Err(TensorError::ZeroDim { axis: 1 });
        }
        if data.len() != rows * cols {
            return Err(TensorError::LengthMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }
}

/// Two-dimensional map (heatmap, mask source) stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Map2<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self, TensorError> {
        if height == 0 {
            return Err(TensorError::ZeroDim { axis: 0 });
        }
        if width == 0 {
            return Err(TensorError::ZeroDim { axis: 1 });
        }
        if data.len() != height * width {
            return Err(TensorError::LengthMismatch {
                expected: height * width,
                found: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Position `(y, x)` of the first maximal entry in row-major order.
    pub fn argmax(&self) -> (usize, usize)
    where
        T: PartialOrd,
    {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }
}

/// Reshapes `[C, H, W]` activations into an `(H*W) x C` matrix: one row per
/// spatial location, one column per channel.
pub fn feature_map_to_matrix(fm: &FeatureMap) -> Matrix<f32> {
    let (c, h, w) = (fm.channels(), fm.height(), fm.width());
    let plane = h * w;
    let src = fm.data();
    let mut data = vec![0.0f32; plane * c];
    for ch in 0..c {
        for s in 0..plane {
            data[s * c + ch] = src[ch * plane + s];
        }
    }
    Matrix {
        rows: plane,
        cols: c,
        data,
    }
}

/// Reinterprets a length `H*W` vector as an `H x W` map, row-major.
pub fn matrix_to_map(v: &[f32], height: usize, width: usize) -> Result<Map2<f32>, TensorError> {
    Map2::from_vec(height, width, v.to_vec())
}

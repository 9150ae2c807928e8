//! Minimal sequential CNN used as a reference feature extractor.
//!
//! Supports convolution (cross-correlation, zero padding), ReLU, max pooling,
//! global average pooling, dense layers and a final softmax. Every layer
//! accumulates in `f64` and stores `f32`.

use thiserror::Error;

use crate::tensor::{FeatureMap, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("ShapeMismatch at layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },
    #[error("TapNotFeatureMap: layer {tap} does not produce a rank-3 feature map")]
    TapNotFeatureMap { tap: usize },
    #[error("TapNotFeatureMap: tap {tap} is past the last layer ({layers} layers)")]
    TapOutOfRange { tap: usize, layers: usize },
    #[error("NoClassifierHead: model does not end in Softmax")]
    NoClassifierHead,
    #[error("invalid model: {0}")]
    Invalid(String),
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out_ch, in_ch, kh, kw]`
    pub weights: Tensor,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub out: usize,
    pub inputs: usize,
    /// `[out, inputs]`
    pub weights: Tensor,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool { k: usize, stride: usize },
    GlobalAvgPool,
    Dense(Dense),
    Softmax,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Dense(_) => "dense",
            Layer::Softmax => "softmax",
        }
    }
}

/// Output shape of a layer. Spatial extents are `None` when the input size is
/// unknown at load time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial {
        c: usize,
        h: Option<usize>,
        w: Option<usize>,
    },
    Flat(usize),
}

impl Shape {
    pub fn is_spatial(&self) -> bool {
        matches!(self, Shape::Spatial { .. })
    }
}

fn window_out(len: usize, pad: usize, k: usize, stride: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_channels: usize,
    layers: Vec<Layer>,
}

impl ModelGraph {
    /// Validates layer parameters and runs symbolic shape propagation.
    pub fn new(input_channels: usize, layers: Vec<Layer>) -> Result<Self, ModelError> {
        if input_channels == 0 {
            return Err(ModelError::Invalid("input_channels must be positive".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            let bad = |detail: String| ModelError::ShapeMismatch { layer: i, detail };
            match layer {
                Layer::Conv(c) => {
                    if c.stride == 0 || c.kh == 0 || c.kw == 0 || c.out_ch == 0 || c.in_ch == 0 {
                        return Err(bad("conv sizes and stride must be positive".into()));
                    }
                    if c.weights.dims() != [c.out_ch, c.in_ch, c.kh, c.kw] {
                        return Err(bad(format!("conv weights have dims {:?}", c.weights.dims())));
                    }
                    if c.bias.len() != c.out_ch {
                        return Err(bad(format!("conv bias has {} entries", c.bias.len())));
                    }
                }
                Layer::Dense(d) => {
                    if d.weights.dims() != [d.out, d.inputs] {
                        return Err(bad(format!("dense weights have dims {:?}", d.weights.dims())));
                    }
                    if d.bias.len() != d.out {
                        return Err(bad(format!("dense bias has {} entries", d.bias.len())));
                    }
                }
                Layer::MaxPool { k, stride } if *k == 0 || *stride == 0 => {
                    return Err(bad("pool size and stride must be positive".into()));
                }
                Layer::Softmax if i + 1 != layers.len() => {
                    return Err(ModelError::Invalid(format!("softmax at layer {i} is not the final layer")));
                }
                _ => {}
            }
            let non_finite = match layer {
                Layer::Conv(c) => c.bias.iter().any(|b| !b.is_finite()),
                Layer::Dense(d) => d.bias.iter().any(|b| !b.is_finite()),
                _ => false,
            };
            if non_finite {
                return Err(ModelError::Invalid(format!("non-finite bias at layer {i}")));
            }
        }
        let graph = Self {
            input_channels,
            layers,
        };
        graph.infer_shapes(None)?;
        Ok(graph)
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn has_classifier_head(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::Softmax))
    }

    /// Output shape of every layer, given an optional input `(H, W)`.
    pub fn infer_shapes(&self, input_hw: Option<(usize, usize)>) -> Result<Vec<Shape>, ModelError> {
        let mut shape = Shape::Spatial {
            c: self.input_channels,
            h: input_hw.map(|s| s.0),
            w: input_hw.map(|s| s.1),
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |detail: String| ModelError::ShapeMismatch { layer: i, detail };
            shape = match (layer, shape) {
                (Layer::Conv(cv), Shape::Spatial { c, h, w }) => {
                    if c != cv.in_ch {
                        return Err(bad(format!("conv expects {} input channels, got {c}", cv.in_ch)));
                    }
                    let oh = h.map(|h| window_out(h, cv.pad, cv.kh, cv.stride));
                    let ow = w.map(|w| window_out(w, cv.pad, cv.kw, cv.stride));
                    if oh == Some(None) || ow == Some(None) {
                        return Err(bad("conv kernel larger than padded input".into()));
                    }
                    Shape::Spatial {
                        c: cv.out_ch,
                        h: oh.flatten(),
                        w: ow.flatten(),
                    }
                }
                (Layer::Relu, s) => s,
                (Layer::MaxPool { k, stride }, Shape::Spatial { c, h, w }) => {
                    let oh = h.map(|h| window_out(h, 0, *k, *stride));
                    let ow = w.map(|w| window_out(w, 0, *k, *stride));
                    if oh == Some(None) || ow == Some(None) {
                        return Err(bad("pool window larger than input".into()));
                    }
                    Shape::Spatial {
                        c,
                        h: oh.flatten(),
                        w: ow.flatten(),
                    }
                }
                (Layer::GlobalAvgPool, Shape::Spatial { c, .. }) => Shape::Flat(c),
                (Layer::Dense(d), Shape::Flat(n)) => {
                    if n != d.inputs {
                        return Err(bad(format!("dense expects {} inputs, got {n}", d.inputs)));
                    }
                    Shape::Flat(d.out)
                }
                (Layer::Dense(d), Shape::Spatial { c, h, w }) => match (h, w) {
                    (Some(h), Some(w)) if c * h * w == d.inputs => Shape::Flat(d.out),
                    (Some(h), Some(w)) => {
                        return Err(bad(format!("dense expects {} inputs, got {}", d.inputs, c * h * w)));
                    }
                    // flattening needs a concrete input size; checked at run time
                    _ => Shape::Flat(d.out),
                },
                (Layer::Softmax, Shape::Flat(n)) => Shape::Flat(n),
                (layer, s) => {
                    return Err(bad(format!("{} cannot consume {s:?}", layer.name())));
                }
            };
            out.push(shape);
        }
        Ok(out)
    }

    /// Index of the last layer whose output is a spatial feature map.
    pub fn last_feature_layer(&self) -> Option<usize> {
        self.infer_shapes(None)
            .ok()?
            .iter()
            .rposition(Shape::is_spatial)
    }

    /// FNV-1a over every weight and bias bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: f32| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => c.weights.data().iter().chain(&c.bias).for_each(|&v| feed(v)),
                Layer::Dense(d) => d.weights.data().iter().chain(&d.bias).for_each(|&v| feed(v)),
                _ => {}
            }
        }
        h
    }

    /// Copy with every dense weight and bias set to zero; the feature
    /// extractor is untouched.
    pub fn with_zeroed_classifier(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => Layer::Dense(Dense {
                    weights: Tensor::zeros(d.weights.dims().to_vec()).expect("same dims"),
                    bias: vec![0.0; d.bias.len()],
                    ..d.clone()
                }),
                other => other.clone(),
            })
            .collect();
        Self {
            input_channels: self.input_channels,
            layers,
        }
    }
}

/// Intermediate activation.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Spatial { c: usize, h: usize, w: usize, data: Vec<f32> },
    Flat(Vec<f32>),
}

impl Activation {
    pub fn shape(&self) -> Shape {
        match self {
            Activation::Spatial { c, h, w, .. } => Shape::Spatial {
                c: *c,
                h: Some(*h),
                w: Some(*w),
            },
            Activation::Flat(v) => Shape::Flat(v.len()),
        }
    }

    fn values(&self) -> &[f32] {
        match self {
            Activation::Spatial { data, .. } => data,
            Activation::Flat(v) => v,
        }
    }
}

fn conv2d(cv: &Conv2d, c: usize, h: usize, w: usize, input: &[f32]) -> Activation {
    debug_assert_eq!(c, cv.in_ch);
    let oh = window_out(h, cv.pad, cv.kh, cv.stride).expect("validated by shape check");
    let ow = window_out(w, cv.pad, cv.kw, cv.stride).expect("validated by shape check");
    let wts = cv.weights.data();
    let mut out = vec![0.0f32; cv.out_ch * oh * ow];
    for o in 0..cv.out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = cv.bias[o] as f64;
                for i in 0..cv.in_ch {
                    for ky in 0..cv.kh {
                        let iy = (oy * cv.stride + ky) as isize - cv.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &input[i * h * w + iy as usize * w..][..w];
                        let krow = &wts[((o * cv.in_ch + i) * cv.kh + ky) * cv.kw..][..cv.kw];
                        for (kx, &k) in krow.iter().enumerate() {
                            let ix = (ox * cv.stride + kx) as isize - cv.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                acc += k as f64 * row[ix as usize] as f64;
                            }
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    Activation::Spatial {
        c: cv.out_ch,
        h: oh,
        w: ow,
        data: out,
    }
}

fn max_pool(k: usize, stride: usize, c: usize, h: usize, w: usize, input: &[f32]) -> Activation {
    let oh = window_out(h, 0, k, stride).expect("validated by shape check");
    let ow = window_out(w, 0, k, stride).expect("validated by shape check");
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for y in oy * stride..oy * stride + k {
                    for x in ox * stride..ox * stride + k {
                        m = m.max(input[(ch * h + y) * w + x]);
                    }
                }
                out.push(m);
            }
        }
    }
    Activation::Spatial { c, h: oh, w: ow, data: out }
}

fn dense(d: &Dense, input: &[f32]) -> Vec<f32> {
    let wts = d.weights.data();
    (0..d.out)
        .map(|o| {
            let row = &wts[o * d.inputs..(o + 1) * d.inputs];
            let acc = row
                .iter()
                .zip(input)
                .fold(d.bias[o] as f64, |acc, (&a, &b)| acc + a as f64 * b as f64);
            acc as f32
        })
        .collect()
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn apply(index: usize, layer: &Layer, act: Activation) -> Result<Activation, ModelError> {
    let bad = |detail: String| ModelError::ShapeMismatch { layer: index, detail };
    Ok(match (layer, act) {
        (Layer::Conv(cv), Activation::Spatial { c, h, w, data }) => {
            if c != cv.in_ch {
                return Err(bad(format!("conv expects {} input channels, got {c}", cv.in_ch)));
            }
            if window_out(h, cv.pad, cv.kh, cv.stride).is_none() || window_out(w, cv.pad, cv.kw, cv.stride).is_none() {
                return Err(bad(format!("conv kernel larger than padded {h}x{w} input")));
            }
            conv2d(cv, c, h, w, &data)
        }
        (Layer::Relu, Activation::Spatial { c, h, w, mut data }) => {
            data.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { 0.0 });
            Activation::Spatial { c, h, w, data }
        }
        (Layer::Relu, Activation::Flat(mut v)) => {
            v.iter_mut().for_each(|x| *x = if *x > 0.0 { *x } else { 0.0 });
            Activation::Flat(v)
        }
        (Layer::MaxPool { k, stride }, Activation::Spatial { c, h, w, data }) => {
            if h < *k || w < *k {
                return Err(bad(format!("pool window {k} larger than {h}x{w} input")));
            }
            max_pool(*k, *stride, c, h, w, &data)
        }
        (Layer::GlobalAvgPool, Activation::Spatial { c, h, w, data }) => Activation::Flat(
            data.chunks(h * w)
                .take(c)
                .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64) as f32)
                .collect(),
        ),
        (Layer::Dense(d), act) => {
            let values = act.values();
            if values.len() != d.inputs {
                return Err(bad(format!("dense expects {} inputs, got {}", d.inputs, values.len())));
            }
            Activation::Flat(dense(d, values))
        }
        (Layer::Softmax, Activation::Flat(v)) => Activation::Flat(softmax(&v).into_iter().map(|p| p as f32).collect()),
        (layer, act) => return Err(bad(format!("{} cannot consume {:?}", layer.name(), act.shape()))),
    })
}

fn input_activation(model: &ModelGraph, image: &Tensor) -> Result<Activation, ModelError> {
    let dims = image.dims();
    if dims.len() != 3 || dims[0] != model.input_channels {
        return Err(ModelError::ShapeMismatch {
            layer: 0,
            detail: format!("model expects [{}, H, W] input, got {dims:?}", model.input_channels),
        });
    }
    Ok(Activation::Spatial {
        c: dims[0],
        h: dims[1],
        w: dims[2],
        data: image.data().to_vec(),
    })
}

/// Runs layers `0..=last` and returns every intermediate output.
pub fn forward_trace(model: &ModelGraph, image: &Tensor, last: usize) -> Result<Vec<Activation>, ModelError> {
    let mut act = input_activation(model, image)?;
    let mut trace = Vec::with_capacity(last + 1);
    for (i, layer) in model.layers.iter().enumerate().take(last + 1) {
        act = apply(i, layer, act)?;
        trace.push(act.clone());
    }
    Ok(trace)
}

/// Forward pass through layers `0..=tap`, returning that layer's feature map.
pub fn forward_to_tap(model: &ModelGraph, image: &Tensor, tap: usize) -> Result<FeatureMap, ModelError> {
    if tap >= model.layers.len() {
        return Err(ModelError::TapOutOfRange {
            tap,
            layers: model.layers.len(),
        });
    }
    let shapes = model.infer_shapes(None)?;
    if !shapes[tap].is_spatial() {
        return Err(ModelError::TapNotFeatureMap { tap });
    }
    let mut act = input_activation(model, image)?;
    for (i, layer) in model.layers.iter().enumerate().take(tap + 1) {
        act = apply(i, layer, act)?;
    }
    match act {
        Activation::Spatial { c, h, w, data } => Ok(FeatureMap::new(c, h, w, data)?),
        Activation::Flat(_) => Err(ModelError::TapNotFeatureMap { tap }),
    }
}

/// Full forward pass; returns `(class, probability)` sorted by descending
/// probability, ties broken by lower class index.
pub fn classify(model: &ModelGraph, image: &Tensor) -> Result<Vec<(usize, f64)>, ModelError> {
    if !model.has_classifier_head() {
        return Err(ModelError::NoClassifierHead);
    }
    let mut act = input_activation(model, image)?;
    let head = model.layers.len() - 1;
    for (i, layer) in model.layers.iter().enumerate().take(head) {
        act = apply(i, layer, act)?;
    }
    let logits = match act {
        Activation::Flat(v) => v,
        other => {
            return Err(ModelError::ShapeMismatch {
                layer: head,
                detail: format!("softmax cannot consume {:?}", other.shape()),
            })
        }
    };
    let mut ranked: Vec<(usize, f64)> = softmax(&logits).into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// xorshift64* seeded through splitmix64.
#[derive(Debug, Clone)]
pub struct XorShift64 {
    state: u64,
}

impl XorShift64 {
    pub fn new(seed: u64) -> Self {
        let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        Self {
            state: if z == 0 { 0x9E37_79B9_7F4A_7C15 } else { z },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in `[-1, 1)` with 24 bits of resolution.
    pub fn next_signed(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u32 << 23) as f32 - 1.0
    }
}

pub const TOY_INPUT_CHANNELS: usize = 3;
pub const TOY_CLASSES: usize = 10;
/// Output of the second ReLU: the last spatial layer of the toy model.
pub const TOY_FEATURE_TAP: usize = 4;

/// Small deterministic model:
/// `conv3x3(3->8) relu maxpool2 conv3x3(8->16) relu gap dense(16->10) softmax`.
pub fn make_toy_model(seed: u64) -> ModelGraph {
    let mut rng = XorShift64::new(seed);
    let conv = |rng: &mut XorShift64, out_ch: usize, in_ch: usize| {
        let fan_in = (in_ch * 9) as f32;
        let scale = (3.0 / fan_in).sqrt();
        let weights = (0..out_ch * in_ch * 9).map(|_| rng.next_signed() * scale).collect();
        let bias = (0..out_ch).map(|_| rng.next_signed() * 0.05).collect();
        Layer::Conv(Conv2d {
            out_ch,
            in_ch,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            weights: Tensor::new(vec![out_ch, in_ch, 3, 3], weights).expect("sized"),
            bias,
        })
    };
    let c1 = conv(&mut rng, 8, TOY_INPUT_CHANNELS);
    let c2 = conv(&mut rng, 16, 8);
    let scale = (3.0f32 / 16.0).sqrt();
    let weights = (0..TOY_CLASSES * 16).map(|_| rng.next_signed() * scale).collect();
    let bias = (0..TOY_CLASSES).map(|_| rng.next_signed() * 0.05).collect();
    let head = Layer::Dense(Dense {
        out: TOY_CLASSES,
        inputs: 16,
        weights: Tensor::new(vec![TOY_CLASSES, 16], weights).expect("sized"),
        bias,
    });
    ModelGraph::new(
        TOY_INPUT_CHANNELS,
        vec![
            c1,
            Layer::Relu,
            Layer::MaxPool { k: 2, stride: 2 },
            c2,
            Layer::Relu,
            Layer::GlobalAvgPool,
            head,
            Layer::Softmax,
        ],
    )
    .expect("toy model is well formed")
}

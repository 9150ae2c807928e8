//! Model directory: `model.json` describing the layer list, plus `w<i>.fmap`
//! and `b<i>.fmap` for the weights and bias of every parameterized layer `i`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fmap::{read_fmap, write_fmap};
use super::{read_bytes, write_bytes, FormatError};
use crate::refnet::{Conv2d, Dense, Layer, ModelError, ModelGraph};
use crate::tensor::Tensor;

pub const MODEL_FILE: &str = "model.json";
const FORMAT_NAME: &str = "eigencam-model";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelSpec {
    format: String,
    version: u32,
    input_channels: usize,
    layers: Vec<LayerSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum LayerSpec {
    Conv {
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Maxpool {
        k: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense {
        out: usize,
        #[serde(rename = "in")]
        inputs: usize,
    },
    Softmax,
}

fn weight_name(i: usize) -> String {
    format!("w{i}.fmap")
}

fn bias_name(i: usize) -> String {
    format!("b{i}.fmap")
}

pub fn write_model(dir: impl AsRef<Path>, model: &ModelGraph) -> Result<(), FormatError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| FormatError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut layers = Vec::with_capacity(model.layers().len());
    for (i, layer) in model.layers().iter().enumerate() {
        let spec = match layer {
            Layer::Conv(c) => {
                write_fmap(dir.join(weight_name(i)), &c.weights)?;
                write_fmap(dir.join(bias_name(i)), &bias_tensor(&c.bias))?;
                LayerSpec::Conv {
                    out_ch: c.out_ch,
                    in_ch: c.in_ch,
                    kh: c.kh,
                    kw: c.kw,
                    stride: c.stride,
                    pad: c.pad,
                }
            }
            Layer::Dense(d) => {
                write_fmap(dir.join(weight_name(i)), &d.weights)?;
                write_fmap(dir.join(bias_name(i)), &bias_tensor(&d.bias))?;
                LayerSpec::Dense {
                    out: d.out,
                    inputs: d.inputs,
                }
            }
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool { k, stride } => LayerSpec::Maxpool { k: *k, stride: *stride },
            Layer::GlobalAvgPool => LayerSpec::GlobalAvgPool,
            Layer::Softmax => LayerSpec::Softmax,
        };
        layers.push(spec);
    }
    let spec = ModelSpec {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        input_channels: model.input_channels(),
        layers,
    };
    let mut json = serde_json::to_string_pretty(&spec).expect("model spec serializes");
    json.push('\n');
    write_bytes(&dir.join(MODEL_FILE), json.as_bytes())
}

fn bias_tensor(bias: &[f32]) -> Tensor {
    Tensor::new(vec![bias.len()], bias.to_vec()).expect("bias is finite and nonempty")
}

fn load_param(dir: &Path, name: String) -> Result<Tensor, FormatError> {
    let path = dir.join(&name);
    if !path.is_file() {
        return Err(FormatError::MissingWeightFile { name });
    }
    read_fmap(&path)
}

fn load_bias(dir: &Path, i: usize, len: usize) -> Result<Vec<f32>, FormatError> {
    let t = load_param(dir, bias_name(i))?;
    if t.dims() != [len] {
        return Err(FormatError::ShapeMismatch {
            layer: i,
            detail: format!("bias dims {:?}, expected [{len}]", t.dims()),
        });
    }
    Ok(t.into_data())
}

fn check_weights(i: usize, t: &Tensor, expected: &[usize]) -> Result<(), FormatError> {
    if t.dims() != expected {
        return Err(FormatError::ShapeMismatch {
            layer: i,
            detail: format!("weight dims {:?}, expected {expected:?}", t.dims()),
        });
    }
    Ok(())
}

pub fn read_model(dir: impl AsRef<Path>) -> Result<ModelGraph, FormatError> {
    let dir = dir.as_ref();
    let bytes = read_bytes(&dir.join(MODEL_FILE))?;
    let spec: ModelSpec = serde_json::from_slice(&bytes).map_err(|e| FormatError::ParseError {
        line: e.line(),
        detail: e.to_string(),
    })?;
    if spec.format != FORMAT_NAME || spec.version != FORMAT_VERSION {
        return Err(FormatError::InvalidModel(format!(
            "unsupported model format {} v{}",
            spec.format, spec.version
        )));
    }
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, ls) in spec.layers.into_iter().enumerate() {
        let layer = match ls {
            LayerSpec::Conv {
                out_ch,
                in_ch,
                kh,
                kw,
                stride,
                pad,
            } => {
                let weights = load_param(dir, weight_name(i))?;
                check_weights(i, &weights, &[out_ch, in_ch, kh, kw])?;
                Layer::Conv(Conv2d {
                    out_ch,
                    in_ch,
                    kh,
                    kw,
                    stride,
                    pad,
                    weights,
                    bias: load_bias(dir, i, out_ch)?,
                })
            }
            LayerSpec::Dense { out, inputs } => {
                let weights = load_param(dir, weight_name(i))?;
                check_weights(i, &weights, &[out, inputs])?;
                Layer::Dense(Dense {
                    out,
                    inputs,
                    weights,
                    bias: load_bias(dir, i, out)?,
                })
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Maxpool { k, stride } => Layer::MaxPool { k, stride },
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::Softmax => Layer::Softmax,
        };
        layers.push(layer);
    }
    ModelGraph::new(spec.input_channels, layers).map_err(|e| match e {
        ModelError::ShapeMismatch { layer, detail } => FormatError::ShapeMismatch { layer, detail },
        other => FormatError::InvalidModel(other.to_string()),
    })
}

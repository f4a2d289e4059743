//! The RQM1 model container.
//!
//! ```text
//! offset 0   8 bytes   magic "RQM1\0\0\0\0"
//! offset 8   8 bytes   manifest length L, u64 little-endian
//! offset 16  L bytes   UTF-8 JSON manifest
//! offset 16+L          blob: tensor data in manifest order
//! ```
//!
//! The manifest holds the topology, shapes, zero points, rescaler fields and
//! every scale as a `0x`-prefixed binary64 bit pattern. Weights are raw int8
//! bytes; biases are int32 little-endian. Offsets and lengths in the manifest
//! are relative to the start of the blob; lengths count elements.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Padding;
use crate::model::{Activation, LayerKind, LayerSpec, ModelGraph};
use crate::qcore::{DyadicRescaler, QuantParams};
use crate::tensor::{QTensor, TensorQuant};

pub const MAGIC: [u8; 8] = *b"RQM1\0\0\0\0";
const HEADER_LEN: usize = 16;
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    name: String,
    k: u32,
    input_shape: Vec<usize>,
    input: ParamsEntry,
    layers: Vec<LayerEntry>,
    blob_length: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsEntry {
    scale: String,
    zero_point: i32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    kind: LayerKind,
    activation: Activation,
    stride: [usize; 2],
    padding: Padding,
    window: [usize; 2],
    output: ParamsEntry,
    weights: Option<WeightsEntry>,
    bias: Option<BlobEntry>,
    rescalers: Vec<RescalerEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsEntry {
    shape: Vec<usize>,
    axis: usize,
    scales: Vec<String>,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RescalerEntry {
    m: u32,
    s: u32,
    k: u32,
    real: String,
}

pub fn f64_to_hex(v: f64) -> String {
    format!("0x{:016x}", v.to_bits())
}

pub fn f64_from_hex(s: &str) -> Option<f64> {
    let digits = s.strip_prefix("0x")?;
    if digits.len() != 16 {
        return None;
    }
    u64::from_str_radix(digits, 16).ok().map(f64::from_bits)
}

fn params_entry(p: QuantParams) -> ParamsEntry {
    ParamsEntry {
        scale: f64_to_hex(p.scale),
        zero_point: p.zero_point,
    }
}

/// Serializes a validated model into RQM1 bytes.
pub fn to_bytes(model: &ModelGraph) -> Result<Vec<u8>> {
    model.validate()?;
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let weights = match &layer.weights {
            None => None,
            Some(w) => {
                let (scales, axis) = match &w.quant {
                    TensorQuant::PerChannel { scales, axis } => (scales, *axis),
                    TensorQuant::PerTensor(_) => return Err(Error::Shape("weights must be per-channel".into())),
                };
                let offset = blob.len() as u64;
                blob.extend(w.data.iter().map(|&v| v as u8));
                Some(WeightsEntry {
                    shape: w.shape.clone(),
                    axis,
                    scales: scales.iter().map(|&s| f64_to_hex(s)).collect(),
                    offset,
                    length: w.data.len() as u64,
                })
            }
        };
        let bias = layer.bias.as_ref().map(|b| {
            let offset = blob.len() as u64;
            for v in b {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            BlobEntry {
                offset,
                length: b.len() as u64,
            }
        });
        layers.push(LayerEntry {
            kind: layer.kind,
            activation: layer.activation,
            stride: [layer.stride.0, layer.stride.1],
            padding: layer.padding,
            window: [layer.window.0, layer.window.1],
            output: params_entry(layer.output),
            weights,
            bias,
            rescalers: layer
                .rescalers
                .iter()
                .map(|r| RescalerEntry {
                    m: r.m,
                    s: r.s,
                    k: r.k,
                    real: f64_to_hex(r.real_value),
                })
                .collect(),
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        name: model.name.clone(),
        k: model.k,
        input_shape: model.input_shape.clone(),
        input: params_entry(model.input),
        layers,
        blob_length: blob.len() as u64,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blob.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

struct Reader<'a> {
    blob: &'a [u8],
    /// File offset of the blob, for error reporting.
    base: u64,
}

impl Reader<'_> {
    fn slice(&self, name: &str, offset: u64, bytes: u64) -> Result<&[u8]> {
        let end = offset.checked_add(bytes).filter(|&e| e <= self.blob.len() as u64);
        match end {
            Some(end) => Ok(&self.blob[offset as usize..end as usize]),
            None => Err(Error::format(
                self.base + offset.min(self.blob.len() as u64),
                format!(
                    "tensor {name} spans blob bytes {offset}..+{bytes} but the blob holds {}",
                    self.blob.len()
                ),
            )),
        }
    }
}

fn parse_scale(text: &str, what: &str, at: u64) -> Result<f64> {
    f64_from_hex(text).ok_or_else(|| {
        Error::format(
            at,
            format!("{what}: scale {text:?} is not a 0x-prefixed 16-digit bit pattern"),
        )
    })
}

fn parse_params(p: &ParamsEntry, what: &str, at: u64) -> Result<QuantParams> {
    let scale = parse_scale(&p.scale, what, at)?;
    QuantParams::new(scale, p.zero_point).map_err(|e| Error::format(at, format!("{what}: {e}")))
}

/// Parses RQM1 bytes and re-validates every model invariant.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            0,
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes[..8] != MAGIC {
        return Err(Error::format(0, "bad magic, not an RQM1 container"));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let available = (bytes.len() - HEADER_LEN) as u64;
    if manifest_len > available {
        return Err(Error::format(
            8,
            format!("manifest length {manifest_len} exceeds the {available} bytes after the header"),
        ));
    }
    let manifest_end = HEADER_LEN + manifest_len as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end]).map_err(|e| {
        let offset = HEADER_LEN as u64 + e.column().saturating_sub(1) as u64;
        Error::format(offset, format!("manifest: {e}"))
    })?;
    let at = HEADER_LEN as u64;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::format(at, format!("unsupported version {}", manifest.version)));
    }
    let blob = &bytes[manifest_end..];
    if manifest.blob_length != blob.len() as u64 {
        return Err(Error::format(
            manifest_end as u64,
            format!(
                "manifest declares a {}-byte blob, file carries {}",
                manifest.blob_length,
                blob.len()
            ),
        ));
    }
    let reader = Reader {
        blob,
        base: manifest_end as u64,
    };
    let input = parse_params(&manifest.input, "input", at)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, entry) in manifest.layers.iter().enumerate() {
        layers.push(parse_layer(i, entry, &reader, at)?);
    }
    let model = ModelGraph {
        name: manifest.name,
        input_shape: manifest.input_shape,
        input,
        layers,
        k: manifest.k,
    };
    model
        .validate()
        .map_err(|e| Error::format(at, format!("invalid model: {e}")))?;
    Ok(model)
}

fn parse_layer(i: usize, entry: &LayerEntry, reader: &Reader, at: u64) -> Result<LayerSpec> {
    let output = parse_params(&entry.output, &format!("layer{i}.output"), at)?;
    let weights = match &entry.weights {
        None => None,
        Some(w) => {
            let name = format!("layer{i}.weights");
            let count = w
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .filter(|&c| c > 0)
                .ok_or_else(|| Error::format(at, format!("{name}: bad shape {:?}", w.shape)))?;
            if count != w.length {
                return Err(Error::format(
                    at,
                    format!(
                        "{name}: shape {:?} holds {count} elements, manifest says {}",
                        w.shape, w.length
                    ),
                ));
            }
            let data = reader
                .slice(&name, w.offset, w.length)?
                .iter()
                .map(|&b| b as i8)
                .collect();
            let scales = w
                .scales
                .iter()
                .map(|s| parse_scale(s, &name, at))
                .collect::<Result<Vec<_>>>()?;
            Some(
                QTensor::weights(data, w.shape.clone(), scales, w.axis)
                    .map_err(|e| Error::format(at, format!("{name}: {e}")))?,
            )
        }
    };
    let bias = match &entry.bias {
        None => None,
        Some(b) => {
            let name = format!("layer{i}.bias");
            let bytes = b
                .length
                .checked_mul(4)
                .ok_or_else(|| Error::format(at, format!("{name}: length overflows")))?;
            let raw = reader.slice(&name, b.offset, bytes)?;
            Some(
                raw.chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
    };
    let rescalers = entry
        .rescalers
        .iter()
        .enumerate()
        .map(|(c, r)| {
            let what = format!("layer{i}.rescaler{c}");
            let real = parse_scale(&r.real, &what, at)?;
            DyadicRescaler::from_parts(r.m, r.s, r.k, real).map_err(|e| Error::format(at, format!("{what}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerSpec {
        kind: entry.kind,
        weights,
        bias,
        activation: entry.activation,
        stride: (entry.stride[0], entry.stride[1]),
        padding: entry.padding,
        window: (entry.window[0], entry.window[1]),
        output,
        rescalers,
    })
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

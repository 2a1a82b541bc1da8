//! Manifest + blob interchange format.
//!
//! A model is stored as a JSON manifest and a companion blob of
//! little-endian `f32` values. The blob sits next to the manifest with the
//! same file stem and a `.bin` extension. Weighted nodes reference the blob
//! with `{offset, length}` counted in elements, not bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Activation, Conv2dAttrs, LayerKind, LayerNode, ModelGraph, NormAddAttrs, Padding};
use crate::calibrator::{ChannelStats, NodeStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct BlobRef {
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct StatsEntry {
    pub epsilon: Vec<f32>,
    pub lambda: Vec<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct ManifestNode {
    pub id: String,
    pub kind: String,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub attrs: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<StatsEntry>,
}

fn default_activation() -> String {
    "none".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct ManifestFile {
    pub name: String,
    #[serde(default)]
    pub input_shape: Vec<usize>,
    pub outputs: Vec<String>,
    pub nodes: Vec<ManifestNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub percentiles: Option<[f64; 2]>,
}

/// Companion blob path: same stem as the manifest, `.bin` extension.
pub fn blob_path_for(manifest_path: impl AsRef<Path>) -> PathBuf {
    manifest_path.as_ref().with_extension("bin")
}

/// Raw blob contents, decoded lazily per reference so that non-finite
/// values can be reported with their owning node.
pub(crate) struct Blob {
    bytes: Vec<u8>,
}

impl Blob {
    pub fn slice(&self, node: &str, r: BlobRef) -> Result<Vec<f32>> {
        let start = r.offset * 4;
        let end = (r.offset + r.length) * 4;
        let bytes = self.bytes.get(start..end).ok_or(Error::BlobLength {
            expected: end,
            actual: self.bytes.len(),
        })?;
        bytes
            .chunks_exact(4)
            .enumerate()
            .map(|(k, c)| {
                let v = f32::from_le_bytes(c.try_into().unwrap());
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite {
                        node: node.to_string(),
                        byte_offset: start + 4 * k,
                    })
                }
            })
            .collect()
    }
}

/// Accumulates parameter arrays into a blob while a manifest is written.
#[derive(Default)]
pub(crate) struct BlobWriter {
    data: Vec<f32>,
}

impl BlobWriter {
    pub fn push(&mut self, values: &[f32]) -> BlobRef {
        let r = BlobRef {
            offset: self.data.len(),
            length: values.len(),
        };
        self.data.extend_from_slice(values);
        r
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Typed accessor over a node's `attrs` object.
pub(crate) struct Attrs<'a> {
    pub node: &'a str,
    pub map: &'a Map<String, Value>,
}

impl Attrs<'_> {
    fn missing(&self, key: &str, what: &str) -> Error {
        Error::Manifest(format!(
            "node '{}': attribute '{key}' missing or not {what}",
            self.node
        ))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.map
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| self.missing(key, "a non-negative integer"))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.map.get(key) {
            None => Ok(default),
            Some(_) => self.usize(key),
        }
    }

    pub fn pair(&self, key: &str) -> Result<[usize; 2]> {
        match self.map.get(key) {
            Some(Value::Number(_)) => {
                let k = self.usize(key)?;
                Ok([k, k])
            }
            Some(Value::Array(a)) if a.len() == 2 => {
                let get = |v: &Value| v.as_u64().map(|x| x as usize);
                match (get(&a[0]), get(&a[1])) {
                    (Some(x), Some(y)) => Ok([x, y]),
                    _ => Err(self.missing(key, "an integer pair")),
                }
            }
            _ => Err(self.missing(key, "an integer pair")),
        }
    }

    pub fn padding(&self) -> Result<Padding> {
        match self.map.get("padding") {
            None => Ok(Padding::Valid),
            Some(v) => v
                .as_str()
                .and_then(Padding::parse)
                .ok_or_else(|| self.missing("padding", "'same' or 'valid'")),
        }
    }

    pub fn f32_vec(&self, key: &str) -> Result<Vec<f32>> {
        let arr = self
            .map
            .get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| self.missing(key, "a float array"))?;
        arr.iter()
            .map(|v| {
                v.as_f64()
                    .map(|x| x as f32)
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| self.missing(key, "a finite float array"))
            })
            .collect()
    }

    pub fn f32_matrix(&self, key: &str) -> Result<Vec<Vec<f32>>> {
        let arr = self
            .map
            .get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| self.missing(key, "an array of float arrays"))?;
        arr.iter()
            .map(|row| {
                row.as_array()
                    .ok_or_else(|| self.missing(key, "an array of float arrays"))?
                    .iter()
                    .map(|v| {
                        v.as_f64()
                            .map(|x| x as f32)
                            .filter(|x| x.is_finite())
                            .ok_or_else(|| self.missing(key, "finite floats"))
                    })
                    .collect()
            })
            .collect()
    }
}

pub(crate) fn floats_value(values: &[f32]) -> Value {
    Value::Array(values.iter().map(|&v| Value::from(f64::from(v))).collect())
}

pub(crate) fn parse_activation(node: &ManifestNode) -> Result<Activation> {
    Activation::parse(&node.activation).ok_or_else(|| Error::UnsupportedKind {
        node: node.id.clone(),
        kind: format!("activation '{}'", node.activation),
    })
}

/// Largest element index referenced anywhere in the manifest, including
/// nested sub-network manifests that share the same blob.
fn max_ref_end(file: &ManifestFile) -> Result<usize> {
    let mut end = 0;
    for n in &file.nodes {
        for r in [n.weights, n.bias].into_iter().flatten() {
            end = end.max(r.offset + r.length);
        }
        if let Some(inner) = n.attrs.get("model") {
            let inner: ManifestFile = serde_json::from_value(inner.clone())
                .map_err(|e| Error::Manifest(format!("node '{}': nested model: {e}", n.id)))?;
            end = end.max(max_ref_end(&inner)?);
        }
    }
    Ok(end)
}

/// Parses the manifest and reads its blob, checking that the blob length
/// matches the references exactly.
pub(crate) fn read_manifest(path: &Path) -> Result<(ManifestFile, Blob)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    let blob_path = blob_path_for(path);
    let bytes = match fs::read(&blob_path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(blob_path, e)),
    };
    let expected = 4 * max_ref_end(&file)?;
    if expected != bytes.len() {
        if expected > 0 && bytes.is_empty() && !blob_path.exists() {
            return Err(Error::io(
                blob_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "blob not found"),
            ));
        }
        return Err(Error::BlobLength {
            expected,
            actual: bytes.len(),
        });
    }
    Ok((file, Blob { bytes }))
}

pub(crate) fn write_manifest(path: &Path, file: &ManifestFile, blob: BlobWriter) -> Result<()> {
    let text = serde_json::to_string_pretty(file).map_err(|e| Error::Manifest(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    let blob_path = blob_path_for(path);
    fs::write(&blob_path, blob.into_bytes()).map_err(|e| Error::io(blob_path, e))
}

/// Converts one manifest node of an IR kind into a [`LayerNode`].
pub(crate) fn layer_from_manifest(node: &ManifestNode, blob: &Blob) -> Result<LayerNode> {
    let attrs = Attrs {
        node: &node.id,
        map: &node.attrs,
    };
    let weights = node.weights.map(|r| blob.slice(&node.id, r)).transpose()?;
    let bias = node.bias.map(|r| blob.slice(&node.id, r)).transpose()?;
    let kind = match node.kind.as_str() {
        "Input" => LayerKind::Input,
        "Conv2D" => LayerKind::Conv2D(Conv2dAttrs {
            filters: attrs.usize("filters")?,
            kernel: attrs.pair("kernel_size")?,
            stride: attrs.usize_or("strides", 1)?,
            padding: attrs.padding()?,
        }),
        "Dense" => LayerKind::Dense {
            units: attrs.usize("units")?,
        },
        "Add" => LayerKind::Add,
        "NormAdd" => LayerKind::NormAdd(NormAddAttrs {
            alpha: attrs.f32_matrix("alpha")?,
            beta: attrs.f32_vec("beta")?,
        }),
        "UpsampleNearest" => LayerKind::UpsampleNearest {
            factor: attrs.usize("factor")?,
        },
        "AvgPool2D" => LayerKind::AvgPool2D {
            pool: attrs.usize("pool_size")?,
            padding: attrs.padding()?,
        },
        "Flatten" => LayerKind::Flatten,
        other => {
            return Err(Error::UnsupportedKind {
                node: node.id.clone(),
                kind: other.to_string(),
            })
        }
    };
    let weights = match (&kind, weights) {
        (LayerKind::Conv2D(c), Some(w)) => {
            let per_in = c.kernel[0] * c.kernel[1] * c.filters;
            if per_in == 0 || w.len() % per_in != 0 {
                return Err(Error::Manifest(format!(
                    "node '{}': {} weights do not fit a {}×{} kernel with {} filters",
                    node.id,
                    w.len(),
                    c.kernel[0],
                    c.kernel[1],
                    c.filters
                )));
            }
            let cin = w.len() / per_in;
            Some(Tensor::new(
                vec![c.kernel[0], c.kernel[1], cin, c.filters],
                w,
            )?)
        }
        (LayerKind::Dense { units }, Some(w)) => {
            if *units == 0 || w.len() % units != 0 {
                return Err(Error::Manifest(format!(
                    "node '{}': {} weights do not fit {units} units",
                    node.id,
                    w.len()
                )));
            }
            Some(Tensor::new(vec![w.len() / units, *units], w)?)
        }
        (_, Some(w)) => Some(Tensor::scalar_vec(&w)),
        (_, None) => None,
    };
    Ok(LayerNode {
        id: node.id.clone(),
        kind,
        activation: parse_activation(node)?,
        weights,
        bias: bias.map(|b| Tensor::scalar_vec(&b)),
        inputs: node.inputs.clone(),
        output_shape: Vec::new(),
    })
}

/// Serializes one IR node, appending its parameters to `blob`.
pub(crate) fn layer_to_manifest(node: &LayerNode, blob: &mut BlobWriter) -> ManifestNode {
    let mut attrs = Map::new();
    match &node.kind {
        LayerKind::Conv2D(c) => {
            attrs.insert("filters".into(), c.filters.into());
            attrs.insert("kernel_size".into(), Value::from(c.kernel.to_vec()));
            attrs.insert("strides".into(), c.stride.into());
            attrs.insert("padding".into(), c.padding.as_str().into());
        }
        LayerKind::Dense { units } => {
            attrs.insert("units".into(), (*units).into());
        }
        LayerKind::NormAdd(na) => {
            attrs.insert(
                "alpha".into(),
                Value::Array(na.alpha.iter().map(|a| floats_value(a)).collect()),
            );
            attrs.insert("beta".into(), floats_value(&na.beta));
        }
        LayerKind::UpsampleNearest { factor } => {
            attrs.insert("factor".into(), (*factor).into());
        }
        LayerKind::AvgPool2D { pool, padding } => {
            attrs.insert("pool_size".into(), (*pool).into());
            attrs.insert("padding".into(), padding.as_str().into());
        }
        LayerKind::Input | LayerKind::Add | LayerKind::Flatten => {}
    }
    ManifestNode {
        id: node.id.clone(),
        kind: node.kind.name().into(),
        activation: node.activation.as_str().into(),
        inputs: node.inputs.clone(),
        attrs,
        weights: node.weights.as_ref().map(|w| blob.push(w.data())),
        bias: node.bias.as_ref().map(|b| blob.push(b.data())),
        normalization: None,
    }
}

/// Loads and validates a model from its manifest and companion blob.
pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<ModelGraph> {
    let (file, blob) = read_manifest(manifest_path.as_ref())?;
    let nodes = file
        .nodes
        .iter()
        .map(|n| layer_from_manifest(n, &blob))
        .collect::<Result<Vec<_>>>()?;
    let mut model = ModelGraph::new(
        file.name.clone(),
        file.input_shape.clone(),
        nodes,
        file.outputs,
    )?;
    let entries: Vec<(String, StatsEntry)> = file
        .nodes
        .iter()
        .filter_map(|n| n.normalization.clone().map(|s| (n.id.clone(), s)))
        .collect();
    if !entries.is_empty() || file.percentiles.is_some() {
        let [p_lo, p_hi] = file.percentiles.unwrap_or([0.01, 99.99]);
        let mut nodes = BTreeMap::new();
        for (id, s) in entries {
            if s.epsilon.len() != s.lambda.len() {
                return Err(Error::Manifest(format!(
                    "node '{id}': epsilon/lambda lengths differ"
                )));
            }
            nodes.insert(
                id,
                NodeStats {
                    epsilon: s.epsilon,
                    lambda: s.lambda,
                },
            );
        }
        model.normalization = Some(ChannelStats { p_lo, p_hi, nodes });
    }
    Ok(model)
}

/// Writes the manifest and its companion blob.
pub fn save_model(model: &ModelGraph, manifest_path: impl AsRef<Path>) -> Result<()> {
    let mut blob = BlobWriter::default();
    let mut nodes: Vec<ManifestNode> = model
        .nodes
        .iter()
        .map(|n| layer_to_manifest(n, &mut blob))
        .collect();
    if let Some(stats) = &model.normalization {
        for n in &mut nodes {
            if let Some(s) = stats.nodes.get(&n.id) {
                n.normalization = Some(StatsEntry {
                    epsilon: s.epsilon.clone(),
                    lambda: s.lambda.clone(),
                });
            }
        }
    }
    let file = ManifestFile {
        name: model.name.clone(),
        input_shape: model.input_shape.clone(),
        outputs: model.outputs.clone(),
        nodes,
        percentiles: model.normalization.as_ref().map(|s| [s.p_lo, s.p_hi]),
    };
    write_manifest(manifest_path.as_ref(), &file, blob)
}

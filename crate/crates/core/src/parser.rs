//! Flattening of raw exported models into fusion-complete [`ModelGraph`]s.
//!
//! Raw models may nest sub-networks and carry inference-time batch
//! normalization and standalone relu nodes. Parsing inlines every
//! sub-network (inner ids become `<subnet-id>/<inner-id>`), folds each
//! batch normalization into the convolution or dense layer feeding it, and
//! moves standalone relus into their producer's activation field.
//!
//! A sub-network's inner `Input` nodes are its ports, bound in manifest
//! order to the sub-network node's `inputs`. Consumers reference a
//! single-output sub-network by its id and a multi-output one as `id:k`.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde_json::{Map, Value};

use crate::analog::kernels;
use crate::error::{Error, Result};
use crate::ir::manifest::{
    floats_value, layer_from_manifest, layer_to_manifest, parse_activation, read_manifest,
    write_manifest, Attrs, Blob, BlobWriter, ManifestFile, ManifestNode,
};
use crate::ir::{node_output_shape, topo_order_by, Activation, LayerKind, LayerNode, ModelGraph};
use crate::tensor::{max_relative_deviation, Tensor};

/// Tolerance of the parse equivalence check.
pub const PARSE_TOLERANCE: f64 = 1e-4;

/// Inference-time batch normalization parameters, per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    fn scale(&self, c: usize) -> f64 {
        f64::from(self.gamma[c]) / (f64::from(self.variance[c]) + f64::from(self.epsilon)).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RawKind {
    Layer(LayerKind),
    SubNetwork(Box<RawModel>),
    BatchNorm(BatchNormParams),
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawNode {
    pub id: String,
    pub kind: RawKind,
    pub activation: Activation,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub inputs: Vec<String>,
}

impl RawNode {
    pub fn layer(node: LayerNode) -> Self {
        RawNode {
            id: node.id,
            kind: RawKind::Layer(node.kind),
            activation: node.activation,
            weights: node.weights,
            bias: node.bias,
            inputs: node.inputs,
        }
    }

    pub fn new(id: impl Into<String>, kind: RawKind, inputs: Vec<String>) -> Self {
        RawNode {
            id: id.into(),
            kind,
            activation: Activation::None,
            weights: None,
            bias: None,
            inputs,
        }
    }

    fn kind_name(&self) -> &'static str {
        match &self.kind {
            RawKind::Layer(k) => k.name(),
            RawKind::SubNetwork(_) => "SubNetwork",
            RawKind::BatchNorm(_) => "BatchNorm",
            RawKind::Relu => "ReLU",
        }
    }

    fn to_layer(&self, kind: LayerKind) -> LayerNode {
        LayerNode {
            id: self.id.clone(),
            kind,
            activation: self.activation,
            weights: self.weights.clone(),
            bias: self.bias.clone(),
            inputs: self.inputs.clone(),
            output_shape: Vec::new(),
        }
    }
}

/// An unparsed model as exported from a training framework.
#[derive(Clone, Debug, PartialEq)]
pub struct RawModel {
    pub name: String,
    /// Only meaningful at the top level; nested models take their port shapes
    /// from the enclosing graph.
    pub input_shape: Vec<usize>,
    pub nodes: Vec<RawNode>,
    pub outputs: Vec<String>,
}

impl RawModel {
    /// Wraps an already parsed graph; parsing it again is the identity.
    pub fn from_graph(graph: &ModelGraph) -> Self {
        RawModel {
            name: graph.name.clone(),
            input_shape: graph.input_shape.clone(),
            nodes: graph.nodes.iter().cloned().map(RawNode::layer).collect(),
            outputs: graph.outputs.clone(),
        }
    }

    fn ports(&self) -> Vec<&RawNode> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, RawKind::Layer(LayerKind::Input)))
            .collect()
    }

    /// Total node count including nested sub-network contents.
    pub fn node_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.kind {
                RawKind::SubNetwork(inner) => 1 + inner.node_count(),
                _ => 1,
            })
            .sum()
    }

    /// Structural checks that do not need shapes.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id.as_str()) {
                return Err(Error::DuplicateId(n.id.clone()));
            }
            // ':' selects a sub-network port. '/' is allowed so flattened
            // graphs parse again; clashes surface as duplicate ids.
            if n.id.contains(':') {
                return Err(Error::invalid(&n.id, "ids must not contain ':'"));
            }
        }
        for n in &self.nodes {
            for r in &n.inputs {
                let (base, port) = split_ref(r);
                let target = self.nodes.iter().find(|m| m.id == base).ok_or_else(|| {
                    Error::DanglingInput {
                        node: n.id.clone(),
                        input: r.clone(),
                    }
                })?;
                check_port(target, port, r, &n.id)?;
            }
            match &n.kind {
                RawKind::SubNetwork(inner) => {
                    inner.validate()?;
                    let ports = inner.ports().len();
                    if ports != n.inputs.len() {
                        return Err(Error::PortMismatch {
                            node: n.id.clone(),
                            detail: format!(
                                "{} inputs bound to a sub-network with {ports} ports",
                                n.inputs.len()
                            ),
                        });
                    }
                }
                RawKind::BatchNorm(bn) => {
                    let c = bn.gamma.len();
                    if [bn.beta.len(), bn.mean.len(), bn.variance.len()] != [c, c, c] {
                        return Err(Error::invalid(&n.id, "BatchNorm parameter lengths differ"));
                    }
                    if bn.variance.iter().any(|&v| v <= 0.0) {
                        return Err(Error::invalid(&n.id, "BatchNorm variance must be positive"));
                    }
                    if n.inputs.len() != 1 {
                        return Err(Error::invalid(&n.id, "BatchNorm takes exactly one input"));
                    }
                }
                RawKind::Relu => {
                    if n.inputs.len() != 1 {
                        return Err(Error::invalid(&n.id, "ReLU takes exactly one input"));
                    }
                }
                RawKind::Layer(_) => {}
            }
        }
        for o in &self.outputs {
            let (base, port) = split_ref(o);
            let target =
                self.nodes
                    .iter()
                    .find(|m| m.id == base)
                    .ok_or_else(|| Error::DanglingInput {
                        node: "<outputs>".into(),
                        input: o.clone(),
                    })?;
            check_port(target, port, o, "<outputs>")?;
        }
        self.topo_with_ports()?;
        Ok(())
    }

    fn topo_with_ports(&self) -> Result<Vec<usize>> {
        let stripped: Vec<Vec<String>> = self
            .nodes
            .iter()
            .map(|n| {
                n.inputs
                    .iter()
                    .map(|r| split_ref(r).0.to_string())
                    .collect()
            })
            .collect();
        topo_order_by(
            self.nodes
                .iter()
                .zip(&stripped)
                .map(|(n, ins)| (n.id.as_str(), ins.as_slice())),
        )
    }

    /// Direct evaluation of the raw model: batch normalization, standalone
    /// relus and sub-networks are executed as written. Used as the oracle for
    /// the parse equivalence check.
    pub fn forward(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        self.validate()?;
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..]
        {
            return Err(Error::Input(format!(
                "batch shape {:?} does not match raw model input {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        let n = batch.batch_size();
        let mut per_sample = Vec::with_capacity(n);
        for s in 0..n {
            let port = (batch.sample(s).to_vec(), self.input_shape.clone());
            per_sample.push(eval_raw(self, vec![port])?);
        }
        let mut out = Vec::with_capacity(self.outputs.len());
        for k in 0..self.outputs.len() {
            let shape = match per_sample.first() {
                Some(v) => v[k].1.clone(),
                None => Vec::new(),
            };
            let samples: Vec<&[f32]> = per_sample.iter().map(|v| v[k].0.as_slice()).collect();
            out.push(Tensor::stack(&shape, &samples)?);
        }
        Ok(out)
    }
}

fn split_ref(r: &str) -> (&str, Option<usize>) {
    match r.rsplit_once(':') {
        Some((base, k)) => match k.parse() {
            Ok(k) => (base, Some(k)),
            Err(_) => (r, None),
        },
        None => (r, None),
    }
}

fn check_port(target: &RawNode, port: Option<usize>, r: &str, from: &str) -> Result<()> {
    let outputs = match &target.kind {
        RawKind::SubNetwork(inner) => inner.outputs.len(),
        _ => 1,
    };
    match port {
        None if outputs == 1 => Ok(()),
        None => Err(Error::PortMismatch {
            node: from.to_string(),
            detail: format!("'{r}' has {outputs} outputs; reference one as '{r}:k'"),
        }),
        Some(k) if matches!(target.kind, RawKind::SubNetwork(_)) && k < outputs => Ok(()),
        Some(_) => Err(Error::PortMismatch {
            node: from.to_string(),
            detail: format!("'{r}' names a port that does not exist"),
        }),
    }
}

type Value1 = (Vec<f32>, Vec<usize>);

fn eval_raw(model: &RawModel, ports: Vec<Value1>) -> Result<Vec<Value1>> {
    let order = model.topo_with_ports()?;
    let mut values: HashMap<String, Vec<Value1>> = HashMap::new();
    let mut ports = ports.into_iter();
    let fetch = |values: &HashMap<String, Vec<Value1>>, r: &str| -> Value1 {
        let (base, port) = split_ref(r);
        values[base][port.unwrap_or(0)].clone()
    };
    for i in order {
        let node = &model.nodes[i];
        let inputs: Vec<Value1> = node.inputs.iter().map(|r| fetch(&values, r)).collect();
        let out: Vec<Value1> = match &node.kind {
            RawKind::Layer(LayerKind::Input) => {
                vec![ports.next().ok_or_else(|| Error::PortMismatch {
                    node: node.id.clone(),
                    detail: "port without a bound input".into(),
                })?]
            }
            RawKind::Layer(kind) => {
                let mut layer = node.to_layer(kind.clone());
                let shapes: Vec<Vec<usize>> = inputs.iter().map(|v| v.1.clone()).collect();
                layer.output_shape = node_output_shape(&layer, &shapes, &[])?;
                let xs: Vec<&[f32]> = inputs.iter().map(|v| v.0.as_slice()).collect();
                let sh: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
                let y = kernels::eval_node(&layer, &xs, &sh);
                vec![(y, layer.output_shape)]
            }
            RawKind::BatchNorm(bn) => {
                let (x, shape) = &inputs[0];
                let c = bn.gamma.len();
                if shape.last() != Some(&c) {
                    return Err(Error::shape(&node.id, "BatchNorm channel count mismatch"));
                }
                let y = x
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let ch = k % c;
                        ((f64::from(v) - f64::from(bn.mean[ch])) * bn.scale(ch)
                            + f64::from(bn.beta[ch])) as f32
                    })
                    .collect();
                vec![(y, shape.clone())]
            }
            RawKind::Relu => {
                let (x, shape) = &inputs[0];
                vec![(x.iter().map(|v| v.max(0.0)).collect(), shape.clone())]
            }
            RawKind::SubNetwork(inner) => eval_raw(inner, inputs)?,
        };
        values.insert(node.id.clone(), out);
    }
    Ok(model.outputs.iter().map(|o| fetch(&values, o)).collect())
}

/// Flattened node before fusion.
struct FlatNode {
    node: RawNode,
    removed: bool,
}

struct Flattener {
    nodes: Vec<FlatNode>,
    alias: HashMap<String, String>,
}

impl Flattener {
    /// Inlines `model` under `prefix`; `bindings` are the (scoped, possibly
    /// aliased) references feeding its ports.
    fn inline(
        &mut self,
        model: &RawModel,
        prefix: &str,
        bindings: Option<&[String]>,
    ) -> Result<()> {
        let mut port = 0;
        for n in &model.nodes {
            let id = format!("{prefix}{}", n.id);
            let scoped_inputs: Vec<String> =
                n.inputs.iter().map(|r| format!("{prefix}{r}")).collect();
            match &n.kind {
                RawKind::Layer(LayerKind::Input) if bindings.is_some() => {
                    let b = bindings.unwrap();
                    self.alias.insert(id, b[port].clone());
                    port += 1;
                }
                RawKind::SubNetwork(inner) => {
                    let inner_prefix = format!("{id}/");
                    self.inline(inner, &inner_prefix, Some(&scoped_inputs))?;
                    let outs: Vec<String> = inner
                        .outputs
                        .iter()
                        .map(|o| format!("{inner_prefix}{o}"))
                        .collect();
                    if outs.len() == 1 {
                        self.alias.insert(id.clone(), outs[0].clone());
                    }
                    for (k, o) in outs.into_iter().enumerate() {
                        self.alias.insert(format!("{id}:{k}"), o);
                    }
                }
                _ => {
                    let mut node = n.clone();
                    node.id = id;
                    node.inputs = scoped_inputs;
                    self.nodes.push(FlatNode {
                        node,
                        removed: false,
                    });
                }
            }
        }
        Ok(())
    }

    fn resolve(&self, r: &str) -> Result<String> {
        let mut cur = r.to_string();
        for _ in 0..=self.alias.len() {
            match self.alias.get(&cur) {
                Some(next) => cur = next.clone(),
                None => return Ok(cur),
            }
        }
        Err(Error::Cycle(r.to_string()))
    }
}

/// Turns a raw model into a flat, fusion-complete [`ModelGraph`].
pub fn parse(raw: &RawModel) -> Result<ModelGraph> {
    raw.validate()?;
    let mut flat = Flattener {
        nodes: Vec::new(),
        alias: HashMap::new(),
    };
    flat.inline(raw, "", None)?;
    let mut seen = HashSet::new();
    for f in &flat.nodes {
        if !seen.insert(f.node.id.as_str()) {
            return Err(Error::DuplicateId(f.node.id.clone()));
        }
    }

    for i in 0..flat.nodes.len() {
        let inputs = flat.nodes[i]
            .node
            .inputs
            .iter()
            .map(|r| flat.resolve(r))
            .collect::<Result<Vec<_>>>()?;
        flat.nodes[i].node.inputs = inputs;
    }
    let mut outputs = raw
        .outputs
        .iter()
        .map(|o| flat.resolve(o))
        .collect::<Result<Vec<_>>>()?;

    let order = topo_order_by(
        flat.nodes
            .iter()
            .map(|f| (f.node.id.as_str(), f.node.inputs.as_slice())),
    )?;
    let index: HashMap<String, usize> = flat
        .nodes
        .iter()
        .enumerate()
        .map(|(i, f)| (f.node.id.clone(), i))
        .collect();
    let mut consumers: Vec<usize> = vec![0; flat.nodes.len()];
    for f in &flat.nodes {
        for r in &f.node.inputs {
            consumers[index[r]] += 1;
        }
    }
    // Fused nodes forward to their producer.
    let mut forward: HashMap<String, String> = HashMap::new();
    let follow = |forward: &HashMap<String, String>, id: &str| -> String {
        let mut cur = id.to_string();
        while let Some(n) = forward.get(&cur) {
            cur = n.clone();
        }
        cur
    };
    let mut output_set: HashSet<String> = outputs.iter().cloned().collect();

    for &i in &order {
        let src = follow(
            &forward,
            &flat.nodes[i]
                .node
                .inputs
                .first()
                .cloned()
                .unwrap_or_default(),
        );
        match flat.nodes[i].node.kind.clone() {
            RawKind::BatchNorm(bn) => {
                let id = flat.nodes[i].node.id.clone();
                let p = index[&src];
                let producer = &flat.nodes[p].node;
                let fusable = matches!(
                    producer.kind,
                    RawKind::Layer(LayerKind::Conv2D(_)) | RawKind::Layer(LayerKind::Dense { .. })
                ) && producer.activation == Activation::None
                    && consumers[p] == 1
                    && !output_set.contains(&producer.id);
                if !fusable {
                    return Err(Error::UnfusableBatchNorm { node: id });
                }
                fold_batchnorm(&mut flat.nodes[p].node, &bn, &id)?;
                finish_fusion(
                    &mut flat.nodes,
                    &mut consumers,
                    &mut output_set,
                    &mut forward,
                    i,
                    p,
                );
            }
            RawKind::Relu => {
                let id = flat.nodes[i].node.id.clone();
                let p = index[&src];
                let producer = &flat.nodes[p].node;
                let fusable = matches!(
                    &producer.kind,
                    RawKind::Layer(k) if k.is_weighted() || k.is_merge()
                ) && consumers[p] == 1
                    && !output_set.contains(&producer.id);
                if !fusable {
                    return Err(Error::UnfusableRelu { node: id });
                }
                flat.nodes[p].node.activation = Activation::Relu;
                finish_fusion(
                    &mut flat.nodes,
                    &mut consumers,
                    &mut output_set,
                    &mut forward,
                    i,
                    p,
                );
            }
            _ => {}
        }
    }

    let mut nodes = Vec::new();
    for f in flat.nodes.iter().filter(|f| !f.removed) {
        let kind = match &f.node.kind {
            RawKind::Layer(k) => k.clone(),
            _ => {
                return Err(Error::UnsupportedKind {
                    node: f.node.id.clone(),
                    kind: f.node.kind_name().into(),
                })
            }
        };
        let mut layer = f.node.to_layer(kind);
        layer.inputs = layer.inputs.iter().map(|r| follow(&forward, r)).collect();
        nodes.push(layer);
    }
    for o in &mut outputs {
        *o = follow(&forward, o);
    }
    ModelGraph::new(raw.name.clone(), raw.input_shape.clone(), nodes, outputs)
}

fn finish_fusion(
    nodes: &mut [FlatNode],
    consumers: &mut [usize],
    outputs: &mut HashSet<String>,
    forward: &mut HashMap<String, String>,
    fused: usize,
    producer: usize,
) {
    let fused_id = nodes[fused].node.id.clone();
    let producer_id = nodes[producer].node.id.clone();
    nodes[fused].removed = true;
    consumers[producer] = consumers[fused];
    if outputs.remove(&fused_id) {
        outputs.insert(producer_id.clone());
    }
    forward.insert(fused_id, producer_id);
}

fn fold_batchnorm(producer: &mut RawNode, bn: &BatchNormParams, bn_id: &str) -> Result<()> {
    let w = producer.weights.as_ref().expect("weighted producer");
    let cout = *w.shape().last().expect("rank >= 2");
    if bn.gamma.len() != cout {
        return Err(Error::shape(
            bn_id,
            format!(
                "BatchNorm has {} channels, producer has {cout}",
                bn.gamma.len()
            ),
        ));
    }
    let data: Vec<f32> = w
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| (f64::from(v) * bn.scale(k % cout)) as f32)
        .collect();
    let bias: Vec<f32> = (0..cout)
        .map(|c| {
            let b = producer
                .bias
                .as_ref()
                .map_or(0.0, |b| f64::from(b.data()[c]));
            ((b - f64::from(bn.mean[c])) * bn.scale(c) + f64::from(bn.beta[c])) as f32
        })
        .collect();
    producer.weights = Some(Tensor::new(w.shape().to_vec(), data)?);
    producer.bias = Some(Tensor::scalar_vec(&bias));
    Ok(())
}

/// Outcome of [`verify_parse`].
#[derive(Clone, Debug)]
pub struct ParseFidelity {
    /// Largest output deviation relative to the raw output magnitude.
    pub max_rel_deviation: f64,
    pub passed: bool,
}

/// Compares raw and parsed outputs on a probe batch.
pub fn verify_parse(raw: &RawModel, parsed: &ModelGraph, probe: &Tensor) -> Result<ParseFidelity> {
    let expected = raw.forward(probe)?;
    let actual = crate::analog::forward_outputs(parsed, probe)?;
    if expected.len() != actual.len() {
        return Err(Error::Input(format!(
            "raw model has {} outputs, parsed model has {}",
            expected.len(),
            actual.len()
        )));
    }
    let mut worst = 0.0f64;
    for (e, a) in expected.iter().zip(&actual) {
        if e.shape() != a.shape() {
            return Err(Error::Input(format!(
                "output shapes differ: raw {:?} vs parsed {:?}",
                e.shape(),
                a.shape()
            )));
        }
        worst = worst.max(max_relative_deviation(a.data(), e.data()));
    }
    Ok(ParseFidelity {
        max_rel_deviation: worst,
        passed: worst <= PARSE_TOLERANCE,
    })
}

fn raw_from_manifest(file: &ManifestFile, blob: &Blob) -> Result<RawModel> {
    let mut nodes = Vec::with_capacity(file.nodes.len());
    for n in &file.nodes {
        let attrs = Attrs {
            node: &n.id,
            map: &n.attrs,
        };
        let node = match n.kind.as_str() {
            "SubNetwork" => {
                let inner = n.attrs.get("model").ok_or_else(|| {
                    Error::Manifest(format!("node '{}': SubNetwork without 'model'", n.id))
                })?;
                let inner: ManifestFile = serde_json::from_value(inner.clone())
                    .map_err(|e| Error::Manifest(format!("node '{}': {e}", n.id)))?;
                RawNode::new(
                    n.id.clone(),
                    RawKind::SubNetwork(Box::new(raw_from_manifest(&inner, blob)?)),
                    n.inputs.clone(),
                )
            }
            "BatchNorm" => RawNode::new(
                n.id.clone(),
                RawKind::BatchNorm(BatchNormParams {
                    gamma: attrs.f32_vec("gamma")?,
                    beta: attrs.f32_vec("beta")?,
                    mean: attrs.f32_vec("mean")?,
                    variance: attrs.f32_vec("variance")?,
                    epsilon: n
                        .attrs
                        .get("epsilon")
                        .and_then(Value::as_f64)
                        .unwrap_or(1e-3) as f32,
                }),
                n.inputs.clone(),
            ),
            "ReLU" => RawNode::new(n.id.clone(), RawKind::Relu, n.inputs.clone()),
            _ => RawNode::layer(layer_from_manifest(n, blob)?),
        };
        let mut node = node;
        if !matches!(node.kind, RawKind::Layer(_)) {
            node.activation = parse_activation(n)?;
            if node.activation != Activation::None {
                return Err(Error::invalid(&n.id, "only layers may carry an activation"));
            }
        }
        nodes.push(node);
    }
    Ok(RawModel {
        name: file.name.clone(),
        input_shape: file.input_shape.clone(),
        nodes,
        outputs: file.outputs.clone(),
    })
}

fn raw_to_manifest(model: &RawModel, blob: &mut BlobWriter) -> ManifestFile {
    let nodes = model
        .nodes
        .iter()
        .map(|n| match &n.kind {
            RawKind::Layer(k) => layer_to_manifest(&n.to_layer(k.clone()), blob),
            RawKind::SubNetwork(inner) => {
                let inner = raw_to_manifest(inner, blob);
                let mut attrs = Map::new();
                attrs.insert(
                    "model".into(),
                    serde_json::to_value(inner).expect("manifest serializes"),
                );
                bare_node(n, "SubNetwork", attrs)
            }
            RawKind::BatchNorm(bn) => {
                let mut attrs = Map::new();
                attrs.insert("gamma".into(), floats_value(&bn.gamma));
                attrs.insert("beta".into(), floats_value(&bn.beta));
                attrs.insert("mean".into(), floats_value(&bn.mean));
                attrs.insert("variance".into(), floats_value(&bn.variance));
                attrs.insert("epsilon".into(), Value::from(f64::from(bn.epsilon)));
                bare_node(n, "BatchNorm", attrs)
            }
            RawKind::Relu => bare_node(n, "ReLU", Map::new()),
        })
        .collect();
    ManifestFile {
        name: model.name.clone(),
        input_shape: model.input_shape.clone(),
        outputs: model.outputs.clone(),
        nodes,
        percentiles: None,
    }
}

fn bare_node(n: &RawNode, kind: &str, attrs: Map<String, Value>) -> ManifestNode {
    ManifestNode {
        id: n.id.clone(),
        kind: kind.into(),
        activation: "none".into(),
        inputs: n.inputs.clone(),
        attrs,
        weights: None,
        bias: None,
        normalization: None,
    }
}

/// Loads a raw manifest (IR kinds plus `SubNetwork`, `BatchNorm`, `ReLU`).
pub fn load_raw_model(manifest_path: impl AsRef<Path>) -> Result<RawModel> {
    let (file, blob) = read_manifest(manifest_path.as_ref())?;
    let raw = raw_from_manifest(&file, &blob)?;
    raw.validate()?;
    Ok(raw)
}

pub fn save_raw_model(model: &RawModel, manifest_path: impl AsRef<Path>) -> Result<()> {
    let mut blob = BlobWriter::default();
    let file = raw_to_manifest(model, &mut blob);
    write_manifest(manifest_path.as_ref(), &file, blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Conv2dAttrs, Padding};

    fn input(id: &str) -> RawNode {
        RawNode::new(id, RawKind::Layer(LayerKind::Input), vec![])
    }

    fn conv(id: &str, src: &str, w: f32, b: f32) -> RawNode {
        RawNode::layer(
            LayerNode::new(
                id,
                LayerKind::Conv2D(Conv2dAttrs {
                    filters: 1,
                    kernel: [1, 1],
                    stride: 1,
                    padding: Padding::Same,
                }),
                vec![src.into()],
            )
            .with_params(
                Tensor::new(vec![1, 1, 1, 1], vec![w]).unwrap(),
                Some(Tensor::scalar_vec(&[b])),
            ),
        )
    }

    fn bn(id: &str, src: &str, gamma: f32, beta: f32, mean: f32, var: f32, eps: f32) -> RawNode {
        RawNode::new(
            id,
            RawKind::BatchNorm(BatchNormParams {
                gamma: vec![gamma],
                beta: vec![beta],
                mean: vec![mean],
                variance: vec![var],
                epsilon: eps,
            }),
            vec![src.into()],
        )
    }

    fn model(nodes: Vec<RawNode>, outputs: &[&str]) -> RawModel {
        RawModel {
            name: "raw".into(),
            input_shape: vec![2, 2, 1],
            nodes,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn subnetwork_with_relu_flattens_to_chain() {
        let inner = RawModel {
            name: "block".into(),
            input_shape: vec![],
            nodes: vec![
                input("x"),
                conv("c", "x", 1.0, 0.0),
                RawNode::new("r", RawKind::Relu, vec!["c".into()]),
            ],
            outputs: vec!["r".into()],
        };
        let raw = model(
            vec![
                input("in"),
                RawNode::new(
                    "sub",
                    RawKind::SubNetwork(Box::new(inner)),
                    vec!["in".into()],
                ),
            ],
            &["sub"],
        );
        let g = parse(&raw).unwrap();
        assert_eq!(g.nodes.len(), 2);
        let c = g.node("sub/c").unwrap();
        assert_eq!(c.activation, Activation::Relu);
        assert_eq!(c.inputs, vec!["in".to_string()]);
        assert_eq!(g.outputs, vec!["sub/c".to_string()]);
    }

    #[test]
    fn batchnorm_fold_matches_hand_computation() {
        let raw = model(
            vec![
                input("in"),
                conv("c", "in", 1.0, 0.0),
                bn("bn", "c", 2.0, 1.0, 0.0, 1.0, 0.0),
            ],
            &["bn"],
        );
        let g = parse(&raw).unwrap();
        let c = g.node("c").unwrap();
        assert_eq!(c.weights.as_ref().unwrap().data(), &[2.0]);
        assert_eq!(c.bias.as_ref().unwrap().data(), &[1.0]);
        assert_eq!(g.outputs, vec!["c".to_string()]);
    }

    #[test]
    fn batchnorm_after_add_is_rejected() {
        let raw = model(
            vec![
                input("in"),
                conv("a", "in", 1.0, 0.0),
                conv("b", "in", 1.0, 0.0),
                RawNode::layer(LayerNode::new(
                    "s",
                    LayerKind::Add,
                    vec!["a".into(), "b".into()],
                )),
                bn("bn", "s", 1.0, 0.0, 0.0, 1.0, 0.0),
            ],
            &["bn"],
        );
        let err = parse(&raw).unwrap_err();
        assert!(
            err.to_string()
                .contains("BatchNorm without a fusable producer"),
            "{err}"
        );
    }

    #[test]
    fn batchnorm_after_relu_is_rejected() {
        let raw = model(
            vec![
                input("in"),
                conv("c", "in", 1.0, 0.0),
                RawNode::new("r", RawKind::Relu, vec!["c".into()]),
                bn("bn", "r", 1.0, 0.0, 0.0, 1.0, 0.0),
            ],
            &["bn"],
        );
        assert!(matches!(parse(&raw), Err(Error::UnfusableBatchNorm { .. })));
    }

    #[test]
    fn shared_producer_cannot_absorb_relu() {
        let raw = model(
            vec![
                input("in"),
                conv("c", "in", 1.0, 0.0),
                RawNode::new("r", RawKind::Relu, vec!["c".into()]),
                conv("d", "c", 1.0, 0.0),
            ],
            &["r", "d"],
        );
        assert!(matches!(parse(&raw), Err(Error::UnfusableRelu { .. })));
    }

    #[test]
    fn port_count_mismatch_is_reported() {
        let inner = RawModel {
            name: "two".into(),
            input_shape: vec![],
            nodes: vec![
                input("x"),
                input("y"),
                RawNode::layer(LayerNode::new(
                    "s",
                    LayerKind::Add,
                    vec!["x".into(), "y".into()],
                )),
            ],
            outputs: vec!["s".into()],
        };
        let raw = model(
            vec![
                input("in"),
                RawNode::new(
                    "sub",
                    RawKind::SubNetwork(Box::new(inner)),
                    vec!["in".into()],
                ),
            ],
            &["sub"],
        );
        assert!(matches!(parse(&raw), Err(Error::PortMismatch { .. })));
    }

    #[test]
    fn multi_output_subnetwork_ports() {
        let inner = RawModel {
            name: "split".into(),
            input_shape: vec![],
            nodes: vec![
                input("x"),
                conv("a", "x", 2.0, 0.0),
                conv("b", "x", 3.0, 0.0),
            ],
            outputs: vec!["a".into(), "b".into()],
        };
        let raw = model(
            vec![
                input("in"),
                RawNode::new(
                    "sub",
                    RawKind::SubNetwork(Box::new(inner)),
                    vec!["in".into()],
                ),
                RawNode::layer(LayerNode::new(
                    "s",
                    LayerKind::Add,
                    vec!["sub:0".into(), "sub:1".into()],
                )),
            ],
            &["s"],
        );
        let g = parse(&raw).unwrap();
        assert_eq!(g.node("s").unwrap().inputs, vec!["sub/a", "sub/b"]);
        let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let fid = verify_parse(&raw, &g, &x).unwrap();
        assert_eq!(fid.max_rel_deviation, 0.0);

        let bad = model(raw.nodes.clone(), &["sub"]);
        assert!(matches!(bad.validate(), Err(Error::PortMismatch { .. })));
    }

    #[test]
    fn corrupted_fusion_is_flagged() {
        let raw = model(
            vec![
                input("in"),
                conv("c", "in", 1.5, 0.2),
                bn("bn", "c", 2.0, 1.0, 0.3, 0.5, 1e-3),
            ],
            &["bn"],
        );
        let mut g = parse(&raw).unwrap();
        let x = Tensor::new(vec![1, 2, 2, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(verify_parse(&raw, &g, &x).unwrap().passed);
        let idx = g.node_index("c").unwrap();
        g.nodes[idx].weights.as_mut().unwrap().data_mut()[0] *= 1.01;
        assert!(!verify_parse(&raw, &g, &x).unwrap().passed);
    }

    #[test]
    fn parse_is_idempotent() {
        let raw = model(
            vec![
                input("in"),
                conv("c", "in", 1.5, 0.2),
                bn("bn", "c", 2.0, 1.0, 0.3, 0.5, 1e-3),
                RawNode::new("r", RawKind::Relu, vec!["bn".into()]),
            ],
            &["r"],
        );
        let once = parse(&raw).unwrap();
        let twice = parse(&RawModel::from_graph(&once)).unwrap();
        assert_eq!(once, twice);
        assert!(once.nodes.len() <= raw.node_count());
    }
}

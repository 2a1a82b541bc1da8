//! In-memory model graph.
//!
//! A [`ModelGraph`] is a validated DAG of [`LayerNode`]s with every output
//! shape inferred. All tensors are channels-last and carry no batch axis;
//! convolution kernels are laid out `[kh, kw, in, out]` and dense matrices
//! `[in, out]`.

pub(crate) mod manifest;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;

use crate::calibrator::ChannelStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use manifest::{blob_path_for, load_model, save_model};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "same" => Some(Padding::Same),
            "valid" => Some(Padding::Valid),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    None,
    Relu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" | "linear" => Some(Activation::None),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }

    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Activation::None => v,
            Activation::Relu => v.max(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dAttrs {
    pub filters: usize,
    pub kernel: [usize; 2],
    pub stride: usize,
    pub padding: Padding,
}

/// Per-branch, per-channel scales and a shared per-channel bias of a
/// normalized summation node.
#[derive(Clone, Debug, PartialEq)]
pub struct NormAddAttrs {
    /// `alpha[branch][channel]`
    pub alpha: Vec<Vec<f32>>,
    pub beta: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input,
    Conv2D(Conv2dAttrs),
    Dense { units: usize },
    Add,
    NormAdd(NormAddAttrs),
    UpsampleNearest { factor: usize },
    AvgPool2D { pool: usize, padding: Padding },
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "Input",
            LayerKind::Conv2D(_) => "Conv2D",
            LayerKind::Dense { .. } => "Dense",
            LayerKind::Add => "Add",
            LayerKind::NormAdd(_) => "NormAdd",
            LayerKind::UpsampleNearest { .. } => "UpsampleNearest",
            LayerKind::AvgPool2D { .. } => "AvgPool2D",
            LayerKind::Flatten => "Flatten",
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv2D(_) | LayerKind::Dense { .. })
    }

    pub fn is_merge(&self) -> bool {
        matches!(self, LayerKind::Add | LayerKind::NormAdd(_))
    }

    /// Kinds that only move or average values and therefore cannot rescale
    /// their channels on their own.
    pub fn is_transparent(&self) -> bool {
        matches!(
            self,
            LayerKind::UpsampleNearest { .. } | LayerKind::AvgPool2D { .. } | LayerKind::Flatten
        )
    }

    fn accepts_activation(&self) -> bool {
        self.is_weighted() || self.is_merge()
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    pub activation: Activation,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub inputs: Vec<String>,
    /// Inferred; empty until shapes are inferred.
    pub output_shape: Vec<usize>,
}

impl LayerNode {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: Vec<String>) -> Self {
        LayerNode {
            id: id.into(),
            kind,
            activation: Activation::None,
            weights: None,
            bias: None,
            inputs,
            output_shape: Vec::new(),
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_params(mut self, weights: Tensor, bias: Option<Tensor>) -> Self {
        self.weights = Some(weights);
        self.bias = bias;
        self
    }

    /// Number of output channels (trailing extent of the output shape).
    pub fn channels(&self) -> usize {
        self.output_shape.last().copied().unwrap_or(0)
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    fn check_structure(&self) -> Result<()> {
        let id = &self.id;
        let n_inputs = self.inputs.len();
        match &self.kind {
            LayerKind::Input => {
                if n_inputs != 0 {
                    return Err(Error::invalid(id, "Input node must not have inputs"));
                }
            }
            LayerKind::Add | LayerKind::NormAdd(_) => {
                if n_inputs < 2 {
                    return Err(Error::invalid(id, "merge node needs at least two inputs"));
                }
            }
            _ => {
                if n_inputs != 1 {
                    return Err(Error::invalid(
                        id,
                        format!("{} takes exactly one input, got {n_inputs}", self.kind),
                    ));
                }
            }
        }
        if self.kind.is_weighted() {
            let w = self
                .weights
                .as_ref()
                .ok_or_else(|| Error::invalid(id, format!("{} requires weights", self.kind)))?;
            let out = match &self.kind {
                LayerKind::Conv2D(c) => {
                    if w.rank() != 4
                        || w.shape()[0] != c.kernel[0]
                        || w.shape()[1] != c.kernel[1]
                        || w.shape()[3] != c.filters
                    {
                        return Err(Error::invalid(
                            id,
                            format!("kernel shape {:?} disagrees with attributes", w.shape()),
                        ));
                    }
                    if c.stride == 0 || c.kernel.contains(&0) || c.filters == 0 {
                        return Err(Error::invalid(id, "zero stride, kernel or filter count"));
                    }
                    c.filters
                }
                LayerKind::Dense { units } => {
                    if w.rank() != 2 || w.shape()[1] != *units || *units == 0 {
                        return Err(Error::invalid(
                            id,
                            format!("dense matrix shape {:?} disagrees with units", w.shape()),
                        ));
                    }
                    *units
                }
                _ => unreachable!(),
            };
            if let Some(b) = &self.bias {
                if b.len() != out {
                    return Err(Error::invalid(
                        id,
                        format!("bias length {} != output channels {out}", b.len()),
                    ));
                }
            }
        } else if self.weights.is_some() || self.bias.is_some() {
            return Err(Error::invalid(
                id,
                format!("{} must not carry weights", self.kind),
            ));
        }
        if self.activation != Activation::None && !self.kind.accepts_activation() {
            return Err(Error::invalid(
                id,
                format!("{} cannot carry an activation", self.kind),
            ));
        }
        match &self.kind {
            LayerKind::NormAdd(na) => {
                if na.alpha.len() != n_inputs {
                    return Err(Error::invalid(
                        id,
                        format!("{} alpha branches for {n_inputs} inputs", na.alpha.len()),
                    ));
                }
                if na.alpha.iter().any(|a| a.len() != na.beta.len()) {
                    return Err(Error::invalid(id, "alpha/beta channel counts disagree"));
                }
            }
            LayerKind::UpsampleNearest { factor: 0 } | LayerKind::AvgPool2D { pool: 0, .. } => {
                return Err(Error::invalid(id, "zero factor"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Validated model graph with inferred shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub nodes: Vec<LayerNode>,
    pub outputs: Vec<String>,
    /// Present only on normalized models.
    pub normalization: Option<ChannelStats>,
}

impl ModelGraph {
    /// Builds a graph, checks every structural invariant and infers shapes.
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        nodes: Vec<LayerNode>,
        outputs: Vec<String>,
    ) -> Result<Self> {
        let graph = ModelGraph {
            name: name.into(),
            input_shape: input_shape.clone(),
            nodes,
            outputs,
            normalization: None,
        };
        graph.validate()?;
        infer_shapes(&graph, &input_shape)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if seen.insert(n.id.as_str(), i).is_some() {
                return Err(Error::DuplicateId(n.id.clone()));
            }
        }
        for n in &self.nodes {
            n.check_structure()?;
            for inp in &n.inputs {
                if !seen.contains_key(inp.as_str()) {
                    return Err(Error::DanglingInput {
                        node: n.id.clone(),
                        input: inp.clone(),
                    });
                }
            }
        }
        let inputs = self
            .nodes
            .iter()
            .filter(|n| n.kind == LayerKind::Input)
            .count();
        if inputs != 1 {
            return Err(Error::Manifest(format!(
                "model must contain exactly one Input node, found {inputs}"
            )));
        }
        if self.outputs.is_empty() {
            return Err(Error::Manifest("model declares no outputs".into()));
        }
        for o in &self.outputs {
            if !seen.contains_key(o.as_str()) {
                return Err(Error::DanglingInput {
                    node: "<outputs>".into(),
                    input: o.clone(),
                });
            }
        }
        self.topological_order().map(|_| ())
    }

    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn input_node(&self) -> &LayerNode {
        self.nodes
            .iter()
            .find(|n| n.kind == LayerKind::Input)
            .expect("validated graph has an Input node")
    }

    /// Deterministic topological order (Kahn's algorithm, ties broken by
    /// manifest position).
    pub fn topological_order(&self) -> Result<Vec<String>> {
        topo_indices(&self.nodes).map(|order| {
            order
                .into_iter()
                .map(|i| self.nodes[i].id.clone())
                .collect()
        })
    }

    pub(crate) fn topo_indices(&self) -> Vec<usize> {
        topo_indices(&self.nodes).expect("validated graph is acyclic")
    }

    /// For every node, the indices of the nodes that read it.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                out[index[inp.as_str()]].push(i);
            }
        }
        out
    }

    /// Indices of each node's inputs, in declaration order.
    pub(crate) fn input_indices(&self) -> Vec<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        self.nodes
            .iter()
            .map(|n| n.inputs.iter().map(|i| index[i.as_str()]).collect())
            .collect()
    }

    pub fn output_indices(&self) -> Vec<usize> {
        self.outputs
            .iter()
            .map(|o| self.node_index(o).expect("validated output"))
            .collect()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }
}

fn topo_indices(nodes: &[LayerNode]) -> Result<Vec<usize>> {
    topo_order_by(nodes.iter().map(|n| (n.id.as_str(), n.inputs.as_slice())))
}

/// Kahn's algorithm over `(id, inputs)` pairs; ready nodes are released in
/// declaration order.
pub(crate) fn topo_order_by<'a, I>(nodes: I) -> Result<Vec<usize>>
where
    I: IntoIterator<Item = (&'a str, &'a [String])>,
{
    let nodes: Vec<(&str, &[String])> = nodes.into_iter().collect();
    let index: HashMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (*id, i))
        .collect();
    let mut indegree = vec![0usize; nodes.len()];
    let mut consumers = vec![Vec::new(); nodes.len()];
    for (i, (id, inputs)) in nodes.iter().enumerate() {
        for inp in inputs.iter() {
            let &src = index
                .get(inp.as_str())
                .ok_or_else(|| Error::DanglingInput {
                    node: id.to_string(),
                    input: inp.clone(),
                })?;
            indegree[i] += 1;
            consumers[src].push(i);
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = indegree
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == 0)
        .map(|(i, _)| Reverse(i))
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(Reverse(c));
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = (0..nodes.len())
            .find(|&i| indegree[i] > 0)
            .expect("some node is left over");
        return Err(Error::Cycle(nodes[stuck].0.to_string()));
    }
    Ok(order)
}

/// Output extent along one spatial axis.
pub(crate) fn conv_out_extent(
    node: &str,
    n: usize,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Result<usize> {
    match padding {
        Padding::Same => Ok(n.div_ceil(stride)),
        Padding::Valid => {
            if n < k {
                return Err(Error::shape(
                    node,
                    format!("'valid' window {k} larger than input extent {n}"),
                ));
            }
            Ok((n - k) / stride + 1)
        }
    }
}

/// Leading pad for 'same' padding: total padding split floor-left/ceil-right.
pub(crate) fn same_pad_before(n: usize, k: usize, stride: usize) -> usize {
    let out = n.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(n);
    total / 2
}

/// Populates every node's `output_shape` for the given input shape.
pub fn infer_shapes(model: &ModelGraph, input_shape: &[usize]) -> Result<ModelGraph> {
    let mut out = model.clone();
    out.input_shape = input_shape.to_vec();
    let order = topo_indices(&out.nodes)?;
    let inputs = out.input_indices();
    for i in order {
        let in_shapes: Vec<Vec<usize>> = inputs[i]
            .iter()
            .map(|&j| out.nodes[j].output_shape.clone())
            .collect();
        let shape = node_output_shape(&out.nodes[i], &in_shapes, input_shape)?;
        out.nodes[i].output_shape = shape;
    }
    Ok(out)
}

pub(crate) fn node_output_shape(
    node: &LayerNode,
    in_shapes: &[Vec<usize>],
    input_shape: &[usize],
) -> Result<Vec<usize>> {
    let id = node.id.as_str();
    let spatial = |s: &Vec<usize>| -> Result<(usize, usize, usize)> {
        if s.len() != 3 {
            return Err(Error::shape(
                id,
                format!("{} expects an H×W×C input, got {s:?}", node.kind),
            ));
        }
        Ok((s[0], s[1], s[2]))
    };
    match &node.kind {
        LayerKind::Input => {
            if input_shape.is_empty() || input_shape.contains(&0) {
                return Err(Error::shape(
                    id,
                    format!("invalid input shape {input_shape:?}"),
                ));
            }
            Ok(input_shape.to_vec())
        }
        LayerKind::Conv2D(c) => {
            let (h, w, cin) = spatial(&in_shapes[0])?;
            let wshape = node.weights.as_ref().expect("checked").shape();
            if wshape[2] != cin {
                return Err(Error::shape(
                    id,
                    format!(
                        "kernel expects {} input channels, input has {cin}",
                        wshape[2]
                    ),
                ));
            }
            Ok(vec![
                conv_out_extent(id, h, c.kernel[0], c.stride, c.padding)?,
                conv_out_extent(id, w, c.kernel[1], c.stride, c.padding)?,
                c.filters,
            ])
        }
        LayerKind::Dense { units } => {
            let s = &in_shapes[0];
            let rows = node.weights.as_ref().expect("checked").shape()[0];
            if s.len() != 1 || s[0] != rows {
                return Err(Error::shape(
                    id,
                    format!("dense layer expects a flat input of {rows}, got {s:?}"),
                ));
            }
            Ok(vec![*units])
        }
        LayerKind::Add | LayerKind::NormAdd(_) => {
            let first = &in_shapes[0];
            if let Some(bad) = in_shapes.iter().find(|s| *s != first) {
                return Err(Error::shape(
                    id,
                    format!("merge inputs disagree: {first:?} vs {bad:?}"),
                ));
            }
            if let LayerKind::NormAdd(na) = &node.kind {
                if first.last() != Some(&na.beta.len()) {
                    return Err(Error::shape(
                        id,
                        format!(
                            "NormAdd has {} channels, input has {first:?}",
                            na.beta.len()
                        ),
                    ));
                }
            }
            Ok(first.clone())
        }
        LayerKind::UpsampleNearest { factor } => {
            let (h, w, c) = spatial(&in_shapes[0])?;
            Ok(vec![h * factor, w * factor, c])
        }
        LayerKind::AvgPool2D { pool, padding } => {
            let (h, w, c) = spatial(&in_shapes[0])?;
            if *padding == Padding::Valid && (h % pool != 0 || w % pool != 0) {
                return Err(Error::shape(
                    id,
                    format!("non-divisible pooling: {h}×{w} by {pool} under 'valid'"),
                ));
            }
            Ok(vec![h.div_ceil(*pool), w.div_ceil(*pool), c])
        }
        LayerKind::Flatten => Ok(vec![in_shapes[0].iter().product()]),
    }
}

use crate::analog;
use crate::error::{Error, Result};
use crate::ir::{LayerKind, LayerNode, ModelGraph, NormAddAttrs};
use crate::tensor::Tensor;

use super::{ChannelStats, NodeStats};

fn check_len(node: &str, stats: &NodeStats, channels: usize) -> Result<()> {
    if stats.channels() != channels || stats.lambda.len() != channels {
        return Err(Error::shape(
            node,
            format!(
                "statistics cover {} channels, node has {channels}",
                stats.channels()
            ),
        ));
    }
    for c in 0..channels {
        assert!(
            stats.span(c) > 0.0,
            "node '{node}' channel {c}: lambda <= epsilon after repair"
        );
    }
    Ok(())
}

/// Rewrites a weighted layer so that, fed with its input's normalized
/// activations, it produces its own normalized activations.
///
/// `w' = w * span_in[i] / span_out[j]` and
/// `b' = (b + sum_i w * eps_in[i] - eps_out[j]) / span_out[j]`, where the sum
/// runs over every weight feeding output channel `j`.
fn normalize_weighted(
    node: &LayerNode,
    upstream: &NodeStats,
    own: &NodeStats,
) -> Result<LayerNode> {
    let w = node.weights.as_ref().expect("weighted node");
    let (cin, cout) = match &node.kind {
        LayerKind::Conv2D(_) => (w.shape()[2], w.shape()[3]),
        LayerKind::Dense { .. } => (w.shape()[0], w.shape()[1]),
        _ => unreachable!(),
    };
    check_len(&node.id, upstream, cin)?;
    check_len(&node.id, own, cout)?;

    let mut shift = vec![0.0f64; cout];
    let mut new_w = Vec::with_capacity(w.len());
    for (k, &v) in w.data().iter().enumerate() {
        let j = k % cout;
        let i = (k / cout) % cin;
        let v = f64::from(v);
        shift[j] += v * f64::from(upstream.epsilon[i]);
        new_w.push((v * upstream.span(i) / own.span(j)) as f32);
    }
    let bias: Vec<f32> = (0..cout)
        .map(|j| {
            let b = node.bias.as_ref().map_or(0.0, |b| f64::from(b.data()[j]));
            ((b + shift[j] - f64::from(own.epsilon[j])) / own.span(j)) as f32
        })
        .collect();
    let mut out = node.clone();
    out.weights = Some(Tensor::new(w.shape().to_vec(), new_w)?);
    out.bias = Some(Tensor::scalar_vec(&bias));
    Ok(out)
}

/// Replaces a summation node by its normalized counterpart.
///
/// Per channel `c`, branch `b` gets scale
/// `alpha = span_b / span_sum` and all branches share
/// `beta = (sum_b eps_b - eps_sum) / span_sum`, so that feeding each branch's
/// normalized activation yields the normalized sum.
pub fn synthesize_normadd(add_node: &LayerNode, stats: &ChannelStats) -> Result<LayerNode> {
    if add_node.inputs.len() < 2 {
        return Err(Error::invalid(
            &add_node.id,
            "summation needs at least two inputs",
        ));
    }
    let sum = stats.get(&add_node.id)?;
    let channels = sum.channels();
    check_len(&add_node.id, sum, channels)?;
    let branches = add_node
        .inputs
        .iter()
        .map(|id| stats.get(id))
        .collect::<Result<Vec<_>>>()?;
    for (b, id) in branches.iter().zip(&add_node.inputs) {
        if b.channels() != channels {
            return Err(Error::shape(
                &add_node.id,
                format!(
                    "branch '{id}' has {} channels, sum has {channels}",
                    b.channels()
                ),
            ));
        }
        check_len(id, b, channels)?;
    }
    let alpha = branches
        .iter()
        .map(|b| {
            (0..channels)
                .map(|c| (b.span(c) / sum.span(c)) as f32)
                .collect()
        })
        .collect();
    let beta = (0..channels)
        .map(|c| {
            let eps: f64 = branches.iter().map(|b| f64::from(b.epsilon[c])).sum();
            ((eps - f64::from(sum.epsilon[c])) / sum.span(c)) as f32
        })
        .collect();
    let mut node = add_node.clone();
    node.kind = LayerKind::NormAdd(NormAddAttrs { alpha, beta });
    node.weights = None;
    node.bias = None;
    Ok(node)
}

/// Folds the per-channel change of variables into every layer and attaches
/// the statistics to the returned model.
pub fn normalize_model(parsed: &ModelGraph, stats: &ChannelStats) -> Result<ModelGraph> {
    let mut out = parsed.clone();
    for (i, node) in parsed.nodes.iter().enumerate() {
        let own = stats.get(&node.id)?;
        if own.channels() != node.channels() {
            return Err(Error::shape(
                &node.id,
                format!(
                    "statistics cover {} channels, node has {}",
                    own.channels(),
                    node.channels()
                ),
            ));
        }
        out.nodes[i] = match &node.kind {
            LayerKind::NormAdd(_) => {
                return Err(Error::invalid(
                    &node.id,
                    "model is already normalized (contains NormAdd)",
                ))
            }
            LayerKind::Conv2D(_) | LayerKind::Dense { .. } => {
                normalize_weighted(node, stats.get(&node.inputs[0])?, own)?
            }
            LayerKind::Add => synthesize_normadd(node, stats)?,
            LayerKind::Input
            | LayerKind::UpsampleNearest { .. }
            | LayerKind::AvgPool2D { .. }
            | LayerKind::Flatten => node.clone(),
        };
    }
    out.normalization = Some(stats.clone());
    out.validate()?;
    Ok(out)
}

/// Per-layer outcome of [`verify_normalization`].
#[derive(Clone, Debug)]
pub struct LayerNormReport {
    pub id: String,
    /// Fraction of normalized activations inside `[0, 1]`.
    pub in_range_fraction: f64,
    /// Largest `|denormalized - parsed|` in original units.
    pub max_abs_deviation: f64,
    /// `max_abs_deviation` divided by the largest parsed magnitude.
    pub max_rel_deviation: f64,
}

#[derive(Clone, Debug)]
pub struct NormalizationReport {
    pub layers: Vec<LayerNormReport>,
}

impl NormalizationReport {
    pub fn min_in_range(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.in_range_fraction)
            .fold(1.0, f64::min)
    }

    pub fn max_rel_deviation(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.max_rel_deviation)
            .fold(0.0, f64::max)
    }
}

/// Measures how much of each layer's normalized activity falls in the unit
/// interval and how closely the denormalized activity tracks the parsed
/// model.
pub fn verify_normalization(
    parsed: &ModelGraph,
    normalized: &ModelGraph,
    probe: &Tensor,
) -> Result<NormalizationReport> {
    let stats = normalized
        .normalization
        .as_ref()
        .ok_or_else(|| Error::Unnormalized(normalized.name.clone()))?;
    let reference = analog::forward(parsed, probe)?;
    let scaled = analog::forward(normalized, probe)?;
    let mut layers = Vec::new();
    for id in normalized.topological_order()? {
        let node = normalized.node(&id).expect("own id");
        if node.kind == LayerKind::Input {
            continue;
        }
        let s = stats.get(&id)?;
        let c = s.channels();
        let norm = scaled.get(&id).expect("all nodes recorded");
        let orig = reference
            .get(&id)
            .ok_or_else(|| Error::MissingStats(id.clone()))?;
        if orig.shape() != norm.shape() {
            return Err(Error::shape(&id, "parsed and normalized shapes differ"));
        }
        let total = norm.len().max(1) as f64;
        let inside = norm
            .data()
            .iter()
            .filter(|v| (0.0..=1.0).contains(*v))
            .count() as f64;
        let mut max_abs = 0.0f64;
        let mut scale = 0.0f64;
        for (k, (&r, &a)) in norm.data().iter().zip(orig.data()).enumerate() {
            let back = f64::from(s.denormalize(k % c, r));
            max_abs = max_abs.max((back - f64::from(a)).abs());
            scale = scale.max(f64::from(a).abs());
        }
        layers.push(LayerNormReport {
            id,
            in_range_fraction: if norm.is_empty() { 1.0 } else { inside / total },
            max_abs_deviation: max_abs,
            max_rel_deviation: max_abs / scale.max(1e-12),
        });
    }
    Ok(NormalizationReport { layers })
}

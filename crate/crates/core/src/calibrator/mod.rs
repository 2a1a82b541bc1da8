//! Channel-wise activation statistics and the weight rewrite that maps every
//! channel's activations onto the unit interval.
//!
//! For each channel the calibrator estimates a low percentile `epsilon` and a
//! high percentile `lambda` of the post-activation values. The normalized
//! activation is `(a - epsilon) / (lambda - epsilon)`, and the rewrite folds
//! that change of variables into the weights and biases of every layer so
//! that the normalized network computes it directly.

mod normalize;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analog;
use crate::error::{Error, Result};
use crate::ir::{Activation, LayerKind, ModelGraph};
use crate::tensor::Tensor;

pub use normalize::{
    normalize_model, synthesize_normadd, verify_normalization, LayerNormReport, NormalizationReport,
};

/// Smallest admissible `lambda - epsilon`; narrower channels are repaired.
pub const DEGENERATE_SPAN: f32 = 1e-6;

/// Per-channel `(epsilon, lambda)` of one node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub epsilon: Vec<f32>,
    pub lambda: Vec<f32>,
}

impl NodeStats {
    pub fn identity(channels: usize) -> Self {
        NodeStats {
            epsilon: vec![0.0; channels],
            lambda: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.epsilon.len()
    }

    /// `lambda - epsilon` of channel `c`, widened to f64.
    pub fn span(&self, c: usize) -> f64 {
        f64::from(self.lambda[c]) - f64::from(self.epsilon[c])
    }

    pub fn normalize(&self, c: usize, a: f32) -> f32 {
        ((f64::from(a) - f64::from(self.epsilon[c])) / self.span(c)) as f32
    }

    pub fn denormalize(&self, c: usize, r: f32) -> f32 {
        (f64::from(r) * self.span(c) + f64::from(self.epsilon[c])) as f32
    }
}

/// Percentile statistics for every node of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub p_lo: f64,
    pub p_hi: f64,
    pub nodes: BTreeMap<String, NodeStats>,
}

impl ChannelStats {
    pub fn get(&self, id: &str) -> Result<&NodeStats> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::MissingStats(id.to_string()))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))
    }
}

/// Calibration knobs. Defaults: 0.01th / 99.99th percentiles.
#[derive(Clone, Debug)]
pub struct CalibrationConfig {
    pub p_lo: f64,
    pub p_hi: f64,
    /// Samples evaluated per forward pass.
    pub chunk_size: usize,
    /// Per-channel cap on pooled values; beyond it a uniform reservoir is kept.
    pub reservoir_cap: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            p_lo: 0.01,
            p_hi: 99.99,
            chunk_size: 32,
            reservoir_cap: 1 << 24,
            seed: 0,
        }
    }
}

/// A channel whose span collapsed and was replaced by a fixed range.
#[derive(Clone, Debug, PartialEq)]
pub struct RepairedChannel {
    pub node: String,
    pub channel: usize,
    pub epsilon: f32,
    pub lambda: f32,
}

/// Percentile by linear interpolation between adjacent order statistics at
/// zero-based rank `p / 100 * (n - 1)`. `sorted` must be ascending and
/// non-empty.
pub fn percentile(sorted: &[f32], p: f64) -> f32 {
    let n = sorted.len();
    let rank = (p / 100.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    let a = f64::from(sorted[lo]);
    let b = f64::from(sorted[hi]);
    (a + frac * (b - a)) as f32
}

struct Reservoir {
    values: Vec<f32>,
    seen: u64,
}

impl Reservoir {
    fn offer(&mut self, v: f32, cap: usize, rng: &mut ChaCha8Rng) {
        self.seen += 1;
        if self.values.len() < cap {
            self.values.push(v);
        } else {
            let j = rng.gen_range(0..self.seen);
            if (j as usize) < cap {
                self.values[j as usize] = v;
            }
        }
    }
}

/// [`collect_stats_with`] with default chunking and reservoir settings.
pub fn collect_stats(
    model: &ModelGraph,
    calib: &Tensor,
    p_lo: f64,
    p_hi: f64,
) -> Result<ChannelStats> {
    let cfg = CalibrationConfig {
        p_lo,
        p_hi,
        ..CalibrationConfig::default()
    };
    collect_stats_with(model, calib, &cfg).map(|(s, _)| s)
}

/// Pools post-activation values per channel across batch and spatial
/// positions and reduces them to percentile pairs.
///
/// Relu layers get `epsilon = 0`. Nodes that only move or average values
/// (upsampling, pooling, flatten) inherit their input's statistics, and the
/// input node is taken as already unit-scaled.
pub fn collect_stats_with(
    model: &ModelGraph,
    calib: &Tensor,
    cfg: &CalibrationConfig,
) -> Result<(ChannelStats, Vec<RepairedChannel>)> {
    if calib.batch_size() == 0 {
        return Err(Error::EmptyCalibration);
    }
    if !(0.0..=100.0).contains(&cfg.p_lo)
        || !(0.0..=100.0).contains(&cfg.p_hi)
        || cfg.p_lo > cfg.p_hi
    {
        return Err(Error::Input(format!(
            "invalid percentiles p_lo={} p_hi={}",
            cfg.p_lo, cfg.p_hi
        )));
    }
    let order = model.topo_indices();
    let measured: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| {
            let k = &model.nodes[i].kind;
            *k != LayerKind::Input && !k.is_transparent()
        })
        .collect();
    for &i in &measured {
        if model.nodes[i].channels() == 0 {
            return Err(Error::shape(&model.nodes[i].id, "node has zero channels"));
        }
    }

    let mut pools: BTreeMap<usize, Vec<Reservoir>> = measured
        .iter()
        .map(|&i| {
            let c = model.nodes[i].channels();
            (
                i,
                (0..c)
                    .map(|_| Reservoir {
                        values: Vec::new(),
                        seen: 0,
                    })
                    .collect(),
            )
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = calib.batch_size();
    let chunk = cfg.chunk_size.max(1);
    let sample_shape = &calib.shape()[1..];
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let samples: Vec<&[f32]> = (start..end).map(|s| calib.sample(s)).collect();
        let batch = Tensor::stack(sample_shape, &samples)?;
        let record = analog::forward(model, &batch)?;
        for (&i, chans) in pools.iter_mut() {
            let node = &model.nodes[i];
            let c = chans.len();
            let acts = record.get(&node.id).expect("forward records every node");
            for (k, &v) in acts.data().iter().enumerate() {
                chans[k % c].offer(v, cfg.reservoir_cap, &mut rng);
            }
        }
    }

    let mut nodes = BTreeMap::new();
    let mut repaired = Vec::new();
    for &i in &order {
        let node = &model.nodes[i];
        let stats = match &node.kind {
            LayerKind::Input => NodeStats::identity(node.channels()),
            LayerKind::UpsampleNearest { .. } | LayerKind::AvgPool2D { .. } => nodes
                .get(&node.inputs[0])
                .cloned()
                .expect("inputs precede consumers"),
            LayerKind::Flatten => {
                let src: &NodeStats = nodes
                    .get(&node.inputs[0])
                    .expect("inputs precede consumers");
                let c = src.channels();
                let len = node.output_len();
                NodeStats {
                    epsilon: (0..len).map(|k| src.epsilon[k % c]).collect(),
                    lambda: (0..len).map(|k| src.lambda[k % c]).collect(),
                }
            }
            _ => {
                let chans = pools.get_mut(&i).expect("measured node");
                let mut epsilon = Vec::with_capacity(chans.len());
                let mut lambda = Vec::with_capacity(chans.len());
                for (c, res) in chans.iter_mut().enumerate() {
                    res.values.sort_by(f32::total_cmp);
                    let mut lo = percentile(&res.values, cfg.p_lo);
                    let mut hi = percentile(&res.values, cfg.p_hi);
                    if node.activation == Activation::Relu {
                        // A shift does not commute with relu; keep zero.
                        lo = 0.0;
                        hi = hi.max(0.0);
                    }
                    if hi - lo < DEGENERATE_SPAN {
                        if node.activation == Activation::Relu {
                            lo = 0.0;
                            hi = 1.0;
                        } else {
                            hi = lo + 1.0;
                        }
                        repaired.push(RepairedChannel {
                            node: node.id.clone(),
                            channel: c,
                            epsilon: lo,
                            lambda: hi,
                        });
                    }
                    epsilon.push(lo);
                    lambda.push(hi);
                }
                NodeStats { epsilon, lambda }
            }
        };
        nodes.insert(node.id.clone(), stats);
    }
    Ok((
        ChannelStats {
            p_lo: cfg.p_lo,
            p_hi: cfg.p_hi,
            nodes,
        },
        repaired,
    ))
}

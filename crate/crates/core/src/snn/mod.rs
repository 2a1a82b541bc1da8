//! Clock-driven simulation of the converted network.
//!
//! Every non-input node of the normalized graph becomes a layer of
//! integrate-and-fire neurons with reset by subtraction:
//!
//! ```text
//! z(t) = v_th * (linear(spikes_in(t)) + b * dt)
//! V(t) = V(t-1) + z(t) - v_th * S(t-1)
//! S(t) = [V(t) >= v_th]
//! ```
//!
//! Nodes are updated in topological order inside each step, so a spike
//! reaches the whole depth of the network within the step it was emitted.
//! The input image is injected as a constant analog current: layers fed by
//! the input node see the image itself instead of spikes.

mod raster;

use std::collections::HashMap;

use crate::analog::kernels;
use crate::error::{Error, Result};
use crate::ir::{same_pad_before, Conv2dAttrs, LayerKind, ModelGraph, Padding};
use crate::tensor::Tensor;

pub use raster::{write_series_csv, Raster};

/// Simulation timing and threshold. Times are in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    pub v_th: f64,
    /// Initial interval whose spikes are excluded from rates.
    pub transient: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1.0,
            duration: 1000.0,
            v_th: 1.0,
            transient: 0.0,
        }
    }
}

impl SimConfig {
    pub fn new(duration: f64) -> Self {
        SimConfig {
            duration,
            ..SimConfig::default()
        }
    }

    pub fn with_transient(mut self, transient: f64) -> Self {
        self.transient = transient;
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SimConfig(m));
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.duration >= self.dt) {
            return bad(format!(
                "duration {} must be at least one step of {}",
                self.duration, self.dt
            ));
        }
        if !(self.v_th > 0.0) {
            return bad(format!("v_th must be positive, got {}", self.v_th));
        }
        if !(self.transient >= 0.0 && self.transient < self.duration) {
            return bad(format!(
                "transient {} must lie in [0, duration {})",
                self.transient, self.duration
            ));
        }
        if self.transient_steps() >= self.steps() {
            return bad("no simulation steps remain after the transient".into());
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn transient_steps(&self) -> usize {
        (self.transient / self.dt).round() as usize
    }

    /// Steps that contribute to the final rates.
    pub fn effective_steps(&self) -> usize {
        self.steps() - self.transient_steps()
    }
}

/// Neuron state of one layer.
#[derive(Clone, Debug)]
pub struct IfLayerState {
    /// Membrane potential V(t).
    pub v: Vec<f64>,
    /// S(t-1), the spike whose reset is still pending.
    pub prev_spike: Vec<bool>,
    /// Spikes emitted after the transient.
    pub spike_count: Vec<u32>,
    /// Spikes emitted since the last reset.
    pub total_count: Vec<u32>,
    /// Sum of all input currents z since the last reset.
    pub input_sum: Vec<f64>,
}

impl IfLayerState {
    fn new(n: usize) -> Self {
        IfLayerState {
            v: vec![0.0; n],
            prev_spike: vec![false; n],
            spike_count: vec![0; n],
            total_count: vec![0; n],
            input_sum: vec![0.0; n],
        }
    }

    fn reset(&mut self) {
        self.v.fill(0.0);
        self.prev_spike.fill(false);
        self.spike_count.fill(0);
        self.total_count.fill(0);
        self.input_sum.fill(0.0);
    }

    /// Membrane potential with the pending reset applied.
    pub fn residual(&self, k: usize, v_th: f64) -> f64 {
        self.v[k] - if self.prev_spike[k] { v_th } else { 0.0 }
    }
}

/// What a [`SpikingNetwork::run`] keeps besides the final rates.
#[derive(Clone, Debug, Default)]
pub struct Recording {
    /// Node ids to record; empty means the model outputs.
    pub layers: Vec<String>,
    pub raster: bool,
    /// Snapshot the rates every this many steps.
    pub sample_every: Option<usize>,
}

impl Recording {
    pub fn layers(layers: &[&str]) -> Self {
        Recording {
            layers: layers.iter().map(|s| s.to_string()).collect(),
            ..Recording::default()
        }
    }

    pub fn with_series(mut self, every: usize) -> Self {
        self.sample_every = Some(every);
        self
    }

    pub fn with_raster(mut self) -> Self {
        self.raster = true;
        self
    }
}

/// Rates observed at one point of the simulation.
#[derive(Clone, Debug)]
pub struct RateSnapshot {
    /// Steps simulated so far.
    pub step: usize,
    pub rates: HashMap<String, Tensor>,
}

/// Output of a simulation run. Rates are spikes per step, in `[0, 1]`.
#[derive(Clone, Debug, Default)]
pub struct RateRecord {
    pub rates: HashMap<String, Tensor>,
    pub rasters: HashMap<String, Raster>,
    pub series: Vec<RateSnapshot>,
    /// Node ids in recording order.
    pub layers: Vec<String>,
}

impl RateRecord {
    pub fn rate(&self, id: &str) -> Option<&Tensor> {
        self.rates.get(id)
    }
}

/// Per-node simulation plumbing that does not change between steps.
#[derive(Clone, Debug)]
struct NodePlan {
    inputs: Vec<usize>,
    /// All inputs are the analog image: the drive is constant over time.
    constant_drive: bool,
    /// `b * dt` (or `beta * dt` for merges), per channel.
    scaled_bias: Option<Vec<f64>>,
}

/// The converted network: the normalized graph plus neuron state.
#[derive(Clone, Debug)]
pub struct SpikingNetwork {
    model: ModelGraph,
    config: SimConfig,
    order: Vec<usize>,
    plans: Vec<NodePlan>,
    states: Vec<Option<IfLayerState>>,
    /// Spikes emitted by each node at the current step (0/1), or the
    /// analog image for the input node.
    outputs: Vec<Vec<f32>>,
    /// Indices of the ones in `outputs`, per node.
    active: Vec<Vec<u32>>,
    constant_cache: Vec<Option<Vec<f32>>>,
    drive: Vec<f32>,
    step: usize,
}

/// Builds the spiking counterpart of a normalized model: one neuron per
/// analog unit, potentials at zero, biases scaled by the time step.
pub fn build_snn(normalized: &ModelGraph, config: &SimConfig) -> Result<SpikingNetwork> {
    if !normalized.is_normalized() {
        return Err(Error::Unnormalized(normalized.name.clone()));
    }
    config.validate()?;
    let order = normalized.topo_indices();
    let inputs = normalized.input_indices();
    let input_idx = normalized
        .node_index(&normalized.input_node().id)
        .expect("input exists");
    let plans = normalized
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| NodePlan {
            inputs: inputs[i].clone(),
            constant_drive: n.kind != LayerKind::Input && inputs[i].iter().all(|&j| j == input_idx),
            scaled_bias: scaled_bias(n, config.dt),
        })
        .collect();
    let states = normalized
        .nodes
        .iter()
        .map(|n| (n.kind != LayerKind::Input).then(|| IfLayerState::new(n.output_len())))
        .collect();
    let outputs = normalized
        .nodes
        .iter()
        .map(|n| vec![0.0; n.output_len()])
        .collect();
    Ok(SpikingNetwork {
        order,
        plans,
        states,
        outputs,
        active: vec![Vec::new(); normalized.nodes.len()],
        constant_cache: vec![None; normalized.nodes.len()],
        drive: Vec::new(),
        step: 0,
        config: config.clone(),
        model: normalized.clone(),
    })
}

fn scaled_bias(node: &crate::ir::LayerNode, dt: f64) -> Option<Vec<f64>> {
    match &node.kind {
        LayerKind::NormAdd(na) => Some(na.beta.iter().map(|&b| f64::from(b) * dt).collect()),
        _ => node
            .bias
            .as_ref()
            .map(|b| b.data().iter().map(|&b| f64::from(b) * dt).collect()),
    }
}

/// Adds the contribution of every active binary input to a convolution.
fn conv2d_scatter(
    active: &[u32],
    in_shape: &[usize],
    weights: &[f32],
    attrs: &Conv2dAttrs,
    out_shape: &[usize],
    out: &mut [f32],
) {
    let (h, w, cin) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow, cout) = (out_shape[0], out_shape[1], out_shape[2]);
    let [kh, kw] = attrs.kernel;
    let s = attrs.stride;
    let (pt, pl) = match attrs.padding {
        Padding::Same => (same_pad_before(h, kh, s), same_pad_before(w, kw, s)),
        Padding::Valid => (0, 0),
    };
    for &a in active {
        let a = a as usize;
        let ci = a % cin;
        let ix = (a / cin) % w;
        let iy = a / (cin * w);
        for ky in 0..kh {
            let num = (iy + pt) as isize - ky as isize;
            if num < 0 || !(num as usize).is_multiple_of(s) {
                continue;
            }
            let oy = num as usize / s;
            if oy >= oh {
                continue;
            }
            for kx in 0..kw {
                let num = (ix + pl) as isize - kx as isize;
                if num < 0 || !(num as usize).is_multiple_of(s) {
                    continue;
                }
                let ox = num as usize / s;
                if ox >= ow {
                    continue;
                }
                let wbase = ((ky * kw + kx) * cin + ci) * cout;
                let obase = (oy * ow + ox) * cout;
                for (o, &wv) in out[obase..obase + cout]
                    .iter_mut()
                    .zip(&weights[wbase..wbase + cout])
                {
                    *o += wv;
                }
            }
        }
    }
}

impl SpikingNetwork {
    pub fn model(&self) -> &ModelGraph {
        &self.model
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn state(&self, id: &str) -> Option<&IfLayerState> {
        self.model
            .node_index(id)
            .and_then(|i| self.states[i].as_ref())
    }

    /// The per-step bias `b * dt` of a node, if it has one.
    pub fn scaled_bias(&self, id: &str) -> Option<&[f64]> {
        self.model
            .node_index(id)
            .and_then(|i| self.plans[i].scaled_bias.as_deref())
    }

    /// Replaces the configuration, rescaling biases if the step changed.
    pub fn set_config(&mut self, config: &SimConfig) -> Result<()> {
        config.validate()?;
        if config.dt != self.config.dt {
            for (plan, node) in self.plans.iter_mut().zip(&self.model.nodes) {
                plan.scaled_bias = scaled_bias(node, config.dt);
            }
        }
        self.config = config.clone();
        Ok(())
    }

    /// Zeroes every potential, pending spike and counter.
    pub fn reset(&mut self) {
        for s in self.states.iter_mut().flatten() {
            s.reset();
        }
        for (o, a) in self.outputs.iter_mut().zip(self.active.iter_mut()) {
            o.fill(0.0);
            a.clear();
        }
        self.constant_cache.iter_mut().for_each(|c| *c = None);
        self.step = 0;
    }

    fn set_input(&mut self, image: &Tensor) -> Result<()> {
        let input = self.model.input_node();
        if image.shape() != input.output_shape.as_slice() {
            return Err(Error::shape(
                &input.id,
                format!(
                    "input current shape {:?} does not match {:?}",
                    image.shape(),
                    input.output_shape
                ),
            ));
        }
        let i = self
            .model
            .node_index(&input.id.clone())
            .expect("input exists");
        if self.outputs[i] != image.data() {
            self.outputs[i].copy_from_slice(image.data());
            self.constant_cache.iter_mut().for_each(|c| *c = None);
        }
        Ok(())
    }

    /// Advances one time step with `input_current` injected, returning the
    /// spikes of every non-input node.
    pub fn step(&mut self, input_current: &Tensor) -> Result<HashMap<String, Tensor>> {
        self.set_input(input_current)?;
        self.advance();
        Ok(self
            .model
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| self.states[*i].is_some())
            .map(|(i, n)| {
                (
                    n.id.clone(),
                    Tensor::new(n.output_shape.clone(), self.outputs[i].clone()).expect("shape"),
                )
            })
            .collect())
    }

    /// Linear part of node `i`'s input current at this step.
    fn compute_drive(&mut self, i: usize) {
        let node = &self.model.nodes[i];
        let plan = &self.plans[i];
        let n = node.output_len();
        self.drive.clear();
        self.drive.resize(n, 0.0);
        if plan.constant_drive {
            if let Some(cached) = &self.constant_cache[i] {
                self.drive.copy_from_slice(cached);
                return;
            }
        }
        let src0 = plan.inputs[0];
        let in_shape = &self.model.nodes[src0].output_shape;
        match &node.kind {
            LayerKind::Input => unreachable!(),
            LayerKind::Conv2D(attrs) => {
                let w = node.weights.as_ref().expect("validated").data();
                if plan.constant_drive {
                    kernels::conv2d_linear(
                        &self.outputs[src0],
                        in_shape,
                        w,
                        attrs,
                        &node.output_shape,
                        &mut self.drive,
                    );
                } else {
                    conv2d_scatter(
                        &self.active[src0],
                        in_shape,
                        w,
                        attrs,
                        &node.output_shape,
                        &mut self.drive,
                    );
                }
            }
            LayerKind::Dense { units } => {
                let w = node.weights.as_ref().expect("validated").data();
                if plan.constant_drive {
                    kernels::dense_linear(&self.outputs[src0], w, *units, &mut self.drive);
                } else {
                    for &a in &self.active[src0] {
                        let row = &w[a as usize * units..(a as usize + 1) * units];
                        for (d, &wv) in self.drive.iter_mut().zip(row) {
                            *d += wv;
                        }
                    }
                }
            }
            LayerKind::Add => {
                for &src in &plan.inputs {
                    for (d, &x) in self.drive.iter_mut().zip(&self.outputs[src]) {
                        *d += x;
                    }
                }
            }
            LayerKind::NormAdd(na) => {
                let c = na.beta.len();
                for (&src, alpha) in plan.inputs.iter().zip(&na.alpha) {
                    for (k, (d, &x)) in self.drive.iter_mut().zip(&self.outputs[src]).enumerate() {
                        *d += alpha[k % c] * x;
                    }
                }
            }
            LayerKind::UpsampleNearest { factor } => {
                kernels::upsample_nearest(&self.outputs[src0], in_shape, *factor, &mut self.drive);
            }
            LayerKind::AvgPool2D { pool, padding } => {
                kernels::avg_pool(
                    &self.outputs[src0],
                    in_shape,
                    *pool,
                    *padding,
                    &node.output_shape,
                    &mut self.drive,
                );
            }
            LayerKind::Flatten => self.drive.copy_from_slice(&self.outputs[src0]),
        }
        if plan.constant_drive {
            self.constant_cache[i] = Some(self.drive.clone());
        }
    }

    fn advance(&mut self) {
        let v_th = self.config.v_th;
        let counting = self.step >= self.config.transient_steps();
        for oi in 0..self.order.len() {
            let i = self.order[oi];
            if self.states[i].is_none() {
                continue;
            }
            self.compute_drive(i);
            let bias = self.plans[i].scaled_bias.as_deref();
            let state = self.states[i].as_mut().expect("checked");
            let out = &mut self.outputs[i];
            let active = &mut self.active[i];
            active.clear();
            let c = bias.map_or(1, <[f64]>::len);
            for (k, &lin) in self.drive.iter().enumerate() {
                let b = bias.map_or(0.0, |b| b[k % c]);
                let z = v_th * (f64::from(lin) + b);
                let reset = if state.prev_spike[k] { v_th } else { 0.0 };
                let v = state.v[k] + z - reset;
                state.v[k] = v;
                state.input_sum[k] += z;
                let spike = v >= v_th;
                state.prev_spike[k] = spike;
                if spike {
                    out[k] = 1.0;
                    active.push(k as u32);
                    state.total_count[k] += 1;
                    if counting {
                        state.spike_count[k] += 1;
                    }
                } else {
                    out[k] = 0.0;
                }
            }
        }
        self.step += 1;
    }

    fn snapshot_rates(&self, layers: &[usize]) -> HashMap<String, Tensor> {
        let t = self.step;
        let skip = self.config.transient_steps();
        layers
            .iter()
            .map(|&i| {
                let node = &self.model.nodes[i];
                let data: Vec<f32> = match &self.states[i] {
                    Some(s) if t > skip => {
                        let d = (t - skip) as f64;
                        s.spike_count
                            .iter()
                            .map(|&c| (f64::from(c) / d) as f32)
                            .collect()
                    }
                    Some(s) if t > 0 => {
                        let d = t as f64;
                        s.total_count
                            .iter()
                            .map(|&c| (f64::from(c) / d) as f32)
                            .collect()
                    }
                    Some(_) => vec![0.0; node.output_len()],
                    // The input node "fires" its analog value.
                    None => self.outputs[i].clone(),
                };
                (
                    node.id.clone(),
                    Tensor::new(node.output_shape.clone(), data).expect("shape"),
                )
            })
            .collect()
    }

    fn resolve_layers(&self, recording: &Recording) -> Result<Vec<usize>> {
        let ids: Vec<String> = if recording.layers.is_empty() {
            self.model.outputs.clone()
        } else {
            recording.layers.clone()
        };
        ids.iter()
            .map(|id| {
                self.model
                    .node_index(id)
                    .ok_or_else(|| Error::Input(format!("unknown layer '{id}' to record")))
            })
            .collect()
    }

    /// Resets the network and simulates `config.duration` with `image` as a
    /// constant input current.
    ///
    /// Final rates count spikes after the transient divided by the number of
    /// post-transient steps. Snapshots taken before the transient has elapsed
    /// fall back to counting from the first step.
    pub fn run(
        &mut self,
        image: &Tensor,
        config: &SimConfig,
        recording: &Recording,
    ) -> Result<RateRecord> {
        self.set_config(config)?;
        self.reset();
        self.set_input(image)?;
        let layers = self.resolve_layers(recording)?;
        let steps = config.steps();
        let mut rasters: Vec<Raster> = if recording.raster {
            layers
                .iter()
                .map(|&i| {
                    let n = &self.model.nodes[i];
                    Raster::new(n.id.clone(), n.output_shape.clone())
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut series = Vec::new();
        let every = recording.sample_every.filter(|&k| k > 0);
        for _ in 0..steps {
            self.advance();
            for (r, &i) in rasters.iter_mut().zip(&layers) {
                r.push_step(&self.outputs[i]);
            }
            if let Some(k) = every {
                if self.step.is_multiple_of(k) {
                    series.push(RateSnapshot {
                        step: self.step,
                        rates: self.snapshot_rates(&layers),
                    });
                }
            }
        }
        Ok(RateRecord {
            rates: self.snapshot_rates(&layers),
            rasters: rasters.into_iter().map(|r| (r.layer.clone(), r)).collect(),
            series,
            layers: layers
                .iter()
                .map(|&i| self.model.nodes[i].id.clone())
                .collect(),
        })
    }

    /// Largest per-neuron violation of
    /// `v_th * spikes + (V_residual - V_initial) = sum z` since the last reset.
    pub fn max_conservation_error(&self) -> f64 {
        let v_th = self.config.v_th;
        let mut worst = 0.0f64;
        for s in self.states.iter().flatten() {
            for k in 0..s.v.len() {
                let lhs = v_th * f64::from(s.total_count[k]) + s.residual(k, v_th);
                worst = worst.max((lhs - s.input_sum[k]).abs());
            }
        }
        worst
    }
}

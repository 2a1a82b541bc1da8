//! Reference (analog) forward pass.
//!
//! This is the oracle every other stage is measured against: calibration
//! statistics come from it, and spiking rates are compared to its
//! activations.

pub(crate) mod kernels;

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ir::{LayerKind, ModelGraph};
use crate::tensor::Tensor;

/// Post-activation values of every node for every sample of a batch.
/// Each tensor is shaped `[batch, ...output_shape]`.
#[derive(Clone, Debug, Default)]
pub struct ActivationRecord {
    layers: HashMap<String, Tensor>,
}

impl ActivationRecord {
    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.layers.get(id)
    }

    pub fn insert(&mut self, id: impl Into<String>, t: Tensor) {
        self.layers.insert(id.into(), t);
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }
}

fn check_batch(model: &ModelGraph, batch: &Tensor) -> Result<usize> {
    if batch.rank() != model.input_shape.len() + 1 || batch.shape()[1..] != model.input_shape[..] {
        return Err(Error::shape(
            &model.input_node().id,
            format!(
                "batch shape {:?} does not match model input {:?}",
                batch.shape(),
                model.input_shape
            ),
        ));
    }
    Ok(batch.batch_size())
}

/// Evaluates all nodes for one sample, handing each finished activation to
/// `keep`. Activations are dropped as soon as their last consumer has run
/// unless `retain_all` is set.
fn run_sample(
    model: &ModelGraph,
    order: &[usize],
    inputs: &[Vec<usize>],
    consumers: &[Vec<usize>],
    sample: &[f32],
    retain: &[bool],
) -> Result<Vec<Option<Vec<f32>>>> {
    let n = model.nodes.len();
    let mut values: Vec<Option<Vec<f32>>> = vec![None; n];
    let mut pending: Vec<usize> = consumers.iter().map(Vec::len).collect();
    for &i in order {
        let node = &model.nodes[i];
        let out = if node.kind == LayerKind::Input {
            sample.to_vec()
        } else {
            let xs: Vec<&[f32]> = inputs[i]
                .iter()
                .map(|&j| values[j].as_deref().expect("inputs evaluated first"))
                .collect();
            let shapes: Vec<&[usize]> = inputs[i]
                .iter()
                .map(|&j| model.nodes[j].output_shape.as_slice())
                .collect();
            let out = kernels::eval_node(node, &xs, &shapes);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation {
                    node: node.id.clone(),
                });
            }
            out
        };
        values[i] = Some(out);
        for &j in &inputs[i] {
            pending[j] -= 1;
            if pending[j] == 0 && !retain[j] {
                values[j] = None;
            }
        }
        if pending[i] == 0 && !retain[i] {
            values[i] = None;
        }
    }
    Ok(values)
}

fn evaluate(
    model: &ModelGraph,
    batch: &Tensor,
    retain: &[bool],
) -> Result<Vec<Vec<Option<Vec<f32>>>>> {
    let n = check_batch(model, batch)?;
    let order = model.topo_indices();
    let inputs = model.input_indices();
    let consumers = model.consumers();
    (0..n)
        .into_par_iter()
        .map(|s| run_sample(model, &order, &inputs, &consumers, batch.sample(s), retain))
        .collect()
}

fn stack_node(model: &ModelGraph, per_sample: &mut [Vec<Option<Vec<f32>>>], i: usize) -> Tensor {
    let shape = &model.nodes[i].output_shape;
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(per * per_sample.len());
    for s in per_sample.iter_mut() {
        data.extend(s[i].take().expect("retained node"));
    }
    let mut full = vec![per_sample.len()];
    full.extend_from_slice(shape);
    Tensor::new(full, data).expect("consistent shapes")
}

/// Evaluates a single non-input node of `model` on explicit input values
/// (one sample each, in the node's input order).
pub fn eval_layer(model: &ModelGraph, id: &str, inputs: &[&[f32]]) -> Result<Vec<f32>> {
    let node = model
        .node(id)
        .ok_or_else(|| Error::Input(format!("no node '{id}'")))?;
    if node.kind == LayerKind::Input || inputs.len() != node.inputs.len() {
        return Err(Error::invalid(
            id,
            "expects one value slice per graph input",
        ));
    }
    let mut shapes = Vec::with_capacity(inputs.len());
    for (src, x) in node.inputs.iter().zip(inputs) {
        let shape = &model.node(src).expect("validated").output_shape;
        if x.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(
                id,
                format!("input from '{src}' has {} values", x.len()),
            ));
        }
        shapes.push(shape.as_slice());
    }
    Ok(kernels::eval_node(node, inputs, &shapes))
}

/// Evaluates the model on a batch `[N, ...input_shape]`, keeping every
/// node's activations.
pub fn forward(model: &ModelGraph, batch: &Tensor) -> Result<ActivationRecord> {
    let retain = vec![true; model.nodes.len()];
    let mut per_sample = evaluate(model, batch, &retain)?;
    let mut record = ActivationRecord::default();
    for i in 0..model.nodes.len() {
        let t = stack_node(model, &mut per_sample, i);
        record.insert(model.nodes[i].id.clone(), t);
    }
    Ok(record)
}

/// Evaluates only the designated outputs, in manifest order. Intermediate
/// activations are freed once their consumers have run.
pub fn forward_outputs(model: &ModelGraph, batch: &Tensor) -> Result<Vec<Tensor>> {
    let mut retain = vec![false; model.nodes.len()];
    let outs = model.output_indices();
    for &o in &outs {
        retain[o] = true;
    }
    let mut per_sample = evaluate(model, batch, &retain)?;
    let mut result = Vec::with_capacity(outs.len());
    for &o in &outs {
        if per_sample.iter().all(|s| s[o].is_some()) {
            result.push(stack_node(model, &mut per_sample, o));
        } else {
            // Same node listed twice among the outputs.
            let prev = outs.iter().position(|&x| x == o).expect("present");
            result.push(result[prev].clone());
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Activation, Conv2dAttrs, LayerNode, Padding};

    fn single_conv(k: usize, padding: Padding, w: Vec<f32>, act: Activation) -> ModelGraph {
        ModelGraph::new(
            "t",
            vec![k, k, 1],
            vec![
                LayerNode::new("in", LayerKind::Input, vec![]),
                LayerNode::new(
                    "c",
                    LayerKind::Conv2D(Conv2dAttrs {
                        filters: 1,
                        kernel: [k, k],
                        stride: 1,
                        padding,
                    }),
                    vec!["in".into()],
                )
                .with_params(
                    Tensor::new(vec![k, k, 1, 1], w).unwrap(),
                    Some(Tensor::scalar_vec(&[0.0])),
                )
                .with_activation(act),
            ],
            vec!["c".into()],
        )
        .unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let m = single_conv(1, Padding::Same, vec![1.0], Activation::None);
        let x = Tensor::new(vec![1, 1, 1, 1], vec![0.37]).unwrap();
        let out = forward_outputs(&m, &x).unwrap();
        assert_eq!(out[0].data(), &[0.37]);
    }

    #[test]
    fn valid_ones_kernel_sums_window() {
        let m = single_conv(3, Padding::Valid, vec![1.0; 9], Activation::None);
        let vals: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let x = Tensor::new(vec![1, 3, 3, 1], vals).unwrap();
        let out = forward_outputs(&m, &x).unwrap();
        assert_eq!(out[0].shape(), &[1, 1, 1, 1]);
        assert_eq!(out[0].data(), &[45.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let m = ModelGraph::new(
            "t",
            vec![3],
            vec![
                LayerNode::new("in", LayerKind::Input, vec![]),
                LayerNode::new("d", LayerKind::Dense { units: 3 }, vec!["in".into()])
                    .with_params(
                        Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
                        None,
                    )
                    .with_activation(Activation::Relu),
            ],
            vec!["d".into()],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(forward_outputs(&m, &x).unwrap()[0].data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn empty_batch_gives_empty_outputs() {
        let m = single_conv(1, Padding::Same, vec![1.0], Activation::None);
        let x = Tensor::zeros(vec![0, 1, 1, 1]);
        let out = forward_outputs(&m, &x).unwrap();
        assert_eq!(out[0].shape(), &[0, 1, 1, 1]);
        assert!(out[0].is_empty());
    }

    #[test]
    fn batch_shape_mismatch_is_an_error() {
        let m = single_conv(1, Padding::Same, vec![1.0], Activation::None);
        assert!(forward(&m, &Tensor::zeros(vec![1, 2, 2, 1])).is_err());
    }

    #[test]
    fn non_finite_intermediate_names_the_node() {
        let m = single_conv(1, Padding::Same, vec![f32::MAX], Activation::None);
        let x = Tensor::new(vec![1, 1, 1, 1], vec![10.0]).unwrap();
        let err = forward(&m, &x).unwrap_err();
        assert!(matches!(err, Error::NonFiniteActivation { ref node } if node == "c"));
    }
}

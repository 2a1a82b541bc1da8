use std::fs;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikeconv::ir::{
    blob_path_for, infer_shapes, load_model, save_model, Activation, Conv2dAttrs, LayerKind,
    LayerNode, ModelGraph, Padding,
};
use spikeconv::{Error, Tensor};
use tempfile::TempDir;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    // Raw bit patterns exercise values that decimal formatting would mangle.
    let data = (0..n)
        .map(|_| loop {
            let v = f32::from_bits(rng.gen());
            if v.is_finite() && v.abs() < 1e6 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// A random chain of convs with an occasional residual `Add`.
fn random_graph(seed: u64, depth: usize) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = rng.gen_range(1..4);
    let mut nodes = vec![LayerNode::new("in", LayerKind::Input, vec![])];
    let mut prev = "in".to_string();
    let mut prev_ch = 2;
    for i in 0..depth {
        let id = format!("c{i}");
        let k = rng.gen_range(1..4);
        let padding = if rng.gen() {
            Padding::Same
        } else {
            Padding::Valid
        };
        let kind = LayerKind::Conv2D(Conv2dAttrs {
            filters: ch,
            kernel: [k, k],
            stride: 1,
            padding: if k > 1 { Padding::Same } else { padding },
        });
        let bias = rng.gen::<bool>().then(|| random_tensor(&mut rng, vec![ch]));
        let act = if rng.gen() {
            Activation::Relu
        } else {
            Activation::None
        };
        nodes.push(
            LayerNode::new(&id, kind, vec![prev.clone()])
                .with_params(random_tensor(&mut rng, vec![k, k, prev_ch, ch]), bias)
                .with_activation(act),
        );
        if i > 0 && rng.gen() {
            let add = format!("add{i}");
            nodes.push(LayerNode::new(
                &add,
                LayerKind::Add,
                vec![prev.clone(), id.clone()],
            ));
            prev = add;
        } else {
            prev = id;
        }
        prev_ch = ch;
    }
    ModelGraph::new(format!("g{seed}"), vec![6, 6, 2], nodes, vec![prev]).unwrap()
}

fn weights_bits(m: &ModelGraph) -> Vec<Vec<u32>> {
    m.nodes
        .iter()
        .flat_map(|n| [&n.weights, &n.bias])
        .map(|t| {
            t.as_ref()
                .map_or(vec![], |t| t.data().iter().map(|v| v.to_bits()).collect())
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn save_load_is_bit_exact(seed in any::<u64>(), depth in 1usize..5) {
        let tmp = TempDir::new().unwrap();
        let m = random_graph(seed, depth);
        let path = tmp.path().join("m.json");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        prop_assert_eq!(&back.nodes, &m.nodes);
        prop_assert_eq!(weights_bits(&back), weights_bits(&m));
        let path2 = tmp.path().join("m2.json");
        save_model(&back, &path2).unwrap();
        prop_assert_eq!(fs::read(blob_path_for(&path)).unwrap(), fs::read(blob_path_for(&path2)).unwrap());
    }

    #[test]
    fn topological_order_respects_edges(seed in any::<u64>(), depth in 1usize..6) {
        let m = random_graph(seed, depth);
        let order = m.topological_order().unwrap();
        let mut sorted = order.clone();
        sorted.sort();
        let mut ids: Vec<String> = m.nodes.iter().map(|n| n.id.clone()).collect();
        ids.sort();
        prop_assert_eq!(sorted, ids);
        let pos = |id: &str| order.iter().position(|o| o == id).unwrap();
        for n in &m.nodes {
            for i in &n.inputs {
                prop_assert!(pos(i) < pos(&n.id));
            }
        }
    }

    #[test]
    fn infer_shapes_is_a_fixed_point(seed in any::<u64>(), depth in 1usize..5) {
        let m = random_graph(seed, depth);
        let again = infer_shapes(&m, &m.input_shape).unwrap();
        prop_assert_eq!(again.nodes, m.nodes);
    }
}

#[test]
fn short_blob_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("m.json");
    save_model(&random_graph(3, 2), &path).unwrap();
    let blob = blob_path_for(&path);
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    let err = load_model(&path).unwrap_err();
    assert!(matches!(err, Error::BlobLength { .. }), "{err}");
}

#[test]
fn missing_manifest_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let err = load_model(tmp.path().join("absent.json")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

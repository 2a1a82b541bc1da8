use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikeconv::ir::{Activation, Conv2dAttrs, LayerKind, LayerNode, Padding};
use spikeconv::parser::{
    load_raw_model, parse, save_raw_model, verify_parse, BatchNormParams, RawKind, RawModel,
    RawNode,
};
use spikeconv::Tensor;
use tempfile::TempDir;

const CH: usize = 3;

struct Gen {
    rng: ChaCha8Rng,
    next: usize,
}

impl Gen {
    fn id(&mut self, prefix: &str) -> String {
        self.next += 1;
        format!("{prefix}{}", self.next)
    }

    fn uniform(&mut self, n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.gen_range(-scale..scale)).collect()
    }

    fn conv(&mut self, src: &str, act: Activation) -> RawNode {
        let k = if self.rng.gen() { 3 } else { 1 };
        let node = LayerNode::new(
            self.id("conv"),
            LayerKind::Conv2D(Conv2dAttrs {
                filters: CH,
                kernel: [k, k],
                stride: 1,
                padding: Padding::Same,
            }),
            vec![src.into()],
        )
        .with_params(
            Tensor::new(vec![k, k, CH, CH], self.uniform(k * k * CH * CH, 0.6)).unwrap(),
            self.rng
                .gen::<bool>()
                .then(|| Tensor::new(vec![CH], self.uniform(CH, 0.2)).unwrap()),
        )
        .with_activation(act);
        RawNode::layer(node)
    }

    fn batchnorm(&mut self, src: &str) -> RawNode {
        let params = BatchNormParams {
            gamma: (0..CH).map(|_| self.rng.gen_range(0.5..1.5)).collect(),
            beta: self.uniform(CH, 0.2),
            mean: self.uniform(CH, 0.2),
            variance: (0..CH).map(|_| self.rng.gen_range(0.5..2.0)).collect(),
            epsilon: 1e-3,
        };
        RawNode::new(self.id("bn"), RawKind::BatchNorm(params), vec![src.into()])
    }

    /// A block of `len` items reading from `src`. Each item is a conv,
    /// conv + BatchNorm (+ ReLU), a nested block, or a residual sum.
    fn block(&mut self, nodes: &mut Vec<RawNode>, src: &str, len: usize, depth: usize) -> String {
        let mut taps = vec![src.to_string()];
        for _ in 0..len {
            let last = taps.last().unwrap().clone();
            let choice = self.rng.gen_range(0..if depth > 0 { 5 } else { 4 });
            let out = match choice {
                0 => {
                    let act = if self.rng.gen() {
                        Activation::Relu
                    } else {
                        Activation::None
                    };
                    let c = self.conv(&last, act);
                    let id = c.id.clone();
                    nodes.push(c);
                    id
                }
                1 => {
                    let c = self.conv(&last, Activation::None);
                    let b = self.batchnorm(&c.id);
                    let mut id = b.id.clone();
                    nodes.push(c);
                    nodes.push(b);
                    if self.rng.gen() {
                        let r = RawNode::new(self.id("relu"), RawKind::Relu, vec![id]);
                        id = r.id.clone();
                        nodes.push(r);
                    }
                    id
                }
                2 | 3 if taps.len() >= 2 => {
                    let other = taps[self.rng.gen_range(0..taps.len() - 1)].clone();
                    let add = RawNode::layer(LayerNode::new(
                        self.id("add"),
                        LayerKind::Add,
                        vec![last, other],
                    ));
                    let mut id = add.id.clone();
                    nodes.push(add);
                    if self.rng.gen() {
                        let r = RawNode::new(self.id("relu"), RawKind::Relu, vec![id]);
                        id = r.id.clone();
                        nodes.push(r);
                    }
                    id
                }
                2 | 3 => {
                    let c = self.conv(&last, Activation::Relu);
                    let id = c.id.clone();
                    nodes.push(c);
                    id
                }
                _ => {
                    let mut inner = vec![RawNode::layer(LayerNode::new(
                        "x",
                        LayerKind::Input,
                        vec![],
                    ))];
                    let len = self.rng.gen_range(1..4);
                    let out = self.block(&mut inner, "x", len, depth - 1);
                    let name = self.id("sub");
                    let sub = RawModel {
                        name: name.clone(),
                        input_shape: vec![],
                        nodes: inner,
                        outputs: vec![out],
                    };
                    nodes.push(RawNode::new(
                        &name,
                        RawKind::SubNetwork(Box::new(sub)),
                        vec![last],
                    ));
                    name
                }
            };
            taps.push(out);
        }
        taps.pop().unwrap()
    }
}

fn nesting(m: &RawModel) -> usize {
    m.nodes
        .iter()
        .map(|n| match &n.kind {
            RawKind::SubNetwork(s) => 1 + nesting(s),
            _ => 0,
        })
        .max()
        .unwrap_or(0)
}

fn random_raw(seed: u64, depth: usize) -> RawModel {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        next: 0,
    };
    let mut nodes = vec![RawNode::layer(LayerNode::new(
        "in",
        LayerKind::Input,
        vec![],
    ))];
    let len = g.rng.gen_range(2..6);
    let out = g.block(&mut nodes, "in", len, depth);
    RawModel {
        name: "random".into(),
        input_shape: vec![5, 5, CH],
        nodes,
        outputs: vec![out],
    }
}

fn probes(seed: u64, n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let data = (0..n * 5 * 5 * CH)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Tensor::new(vec![n, 5, 5, CH], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn parsed_model_is_equivalent(seed in any::<u64>(), depth in 0usize..=3) {
        let raw = random_raw(seed, depth);
        prop_assert!(nesting(&raw) <= 3);
        let parsed = parse(&raw).unwrap();
        prop_assert!(parsed.nodes.len() <= raw.node_count());
        prop_assert!(parsed.nodes.iter().all(|n| n.kind.name() != "SubNetwork"));
        let fid = verify_parse(&raw, &parsed, &probes(seed, 100)).unwrap();
        prop_assert!(fid.passed, "deviation {}", fid.max_rel_deviation);
    }

    #[test]
    fn parse_is_idempotent(seed in any::<u64>(), depth in 0usize..=3) {
        let once = parse(&random_raw(seed, depth)).unwrap();
        let twice = parse(&RawModel::from_graph(&once)).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn raw_manifest_round_trip(seed in any::<u64>(), depth in 0usize..=3) {
        let tmp = TempDir::new().unwrap();
        let raw = random_raw(seed, depth);
        let path = tmp.path().join("raw.json");
        save_raw_model(&raw, &path).unwrap();
        prop_assert_eq!(load_raw_model(&path).unwrap(), raw);
    }
}

#[test]
fn three_level_nesting_occurs() {
    let deepest = (0..200).map(|s| nesting(&random_raw(s, 3))).max().unwrap();
    assert_eq!(deepest, 3);
}

#[test]
fn flattened_id_clash_is_a_duplicate() {
    let conv = |id: &str, src: &str| {
        RawNode::layer(
            LayerNode::new(
                id,
                LayerKind::Conv2D(Conv2dAttrs {
                    filters: CH,
                    kernel: [1, 1],
                    stride: 1,
                    padding: Padding::Same,
                }),
                vec![src.into()],
            )
            .with_params(Tensor::filled(vec![1, 1, CH, CH], 0.5), None),
        )
    };
    let inner = RawModel {
        name: "s".into(),
        input_shape: vec![],
        nodes: vec![
            RawNode::layer(LayerNode::new("x", LayerKind::Input, vec![])),
            conv("a", "x"),
        ],
        outputs: vec!["a".into()],
    };
    let raw = RawModel {
        name: "clash".into(),
        input_shape: vec![2, 2, CH],
        nodes: vec![
            RawNode::layer(LayerNode::new("in", LayerKind::Input, vec![])),
            RawNode::new("s", RawKind::SubNetwork(Box::new(inner)), vec!["in".into()]),
            conv("s/a", "s"),
        ],
        outputs: vec!["s/a".into()],
    };
    let r = parse(&raw);
    assert!(matches!(r, Err(spikeconv::Error::DuplicateId(_))), "{r:?}");
}

//! Deterministic desk-scale models and data.
//!
//! * `toy-classifier`: random 4-conv classifier with a nested block and a
//!   batch normalization to fold, plus a calibration batch.
//! * `mini-fpn-detector`: random two-level feature pyramid whose top-down
//!   path merges through an `Add`.
//! * `blob-detector`: handcrafted detector for bright square blobs on a dark
//!   background, plus an annotated blob dataset.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{AnchorConfig, AnchorLevel, Annotation, Dataset};
use crate::error::{Error, Result};
use crate::ir::{Activation, Conv2dAttrs, LayerKind, LayerNode, Padding};
use crate::parser::{save_raw_model, BatchNormParams, RawKind, RawModel, RawNode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixtureKind {
    ToyClassifier,
    MiniFpnDetector,
    BlobDetector,
}

impl FixtureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FixtureKind::ToyClassifier => "toy-classifier",
            FixtureKind::MiniFpnDetector => "mini-fpn-detector",
            FixtureKind::BlobDetector => "blob-detector",
        }
    }

    pub fn default_count(self) -> usize {
        match self {
            FixtureKind::ToyClassifier => 256,
            FixtureKind::MiniFpnDetector => 32,
            FixtureKind::BlobDetector => 50,
        }
    }

    pub fn default_image_size(self) -> usize {
        match self {
            FixtureKind::ToyClassifier => 16,
            FixtureKind::MiniFpnDetector | FixtureKind::BlobDetector => 32,
        }
    }
}

impl fmt::Display for FixtureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FixtureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy-classifier" => Ok(FixtureKind::ToyClassifier),
            "mini-fpn-detector" => Ok(FixtureKind::MiniFpnDetector),
            "blob-detector" => Ok(FixtureKind::BlobDetector),
            _ => Err(Error::Input(format!("unknown fixture kind '{s}'"))),
        }
    }
}

/// What to generate. `count` is the calibration batch size for the random
/// networks and the dataset size for the blob detector.
#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSpec {
    pub kind: FixtureKind,
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
}

impl FixtureSpec {
    pub fn new(kind: FixtureKind, seed: u64) -> Self {
        FixtureSpec {
            kind,
            seed,
            count: kind.default_count(),
            image_size: kind.default_image_size(),
        }
    }

    pub fn with_count(mut self, count: usize) -> Self {
        self.count = count;
        self
    }
}

/// A generated fixture.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub model: RawModel,
    /// Calibration batch `[N, H, W, C]`.
    pub calib: Tensor,
    /// Held-out images for simulation, `[N, H, W, C]`.
    pub images: Tensor,
    pub anchors: Option<AnchorConfig>,
    pub dataset: Option<Dataset>,
}

impl Fixture {
    /// Writes `model.json`/`model.bin`, `calib.tensor`, `images.tensor` and,
    /// for detectors, `anchors.json` and `dataset.json` with its images.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_raw_model(&self.model, dir.join("model.json"))?;
        self.calib.save(dir.join("calib.tensor"))?;
        self.images.save(dir.join("images.tensor"))?;
        if let Some(a) = &self.anchors {
            a.save_json(dir.join("anchors.json"))?;
        }
        if let Some(d) = &self.dataset {
            crate::analysis::save_dataset(d, dir.join("dataset.json"))?;
        }
        Ok(())
    }
}

pub fn generate(spec: &FixtureSpec) -> Result<Fixture> {
    match spec.kind {
        FixtureKind::ToyClassifier => toy_classifier(spec.seed, spec.count, spec.image_size),
        FixtureKind::MiniFpnDetector => mini_fpn_detector(spec.seed, spec.count, spec.image_size),
        FixtureKind::BlobDetector => blob_fixture(spec.seed, spec.count, spec.image_size),
    }
}

fn input(id: &str) -> RawNode {
    RawNode::new(id, RawKind::Layer(LayerKind::Input), vec![])
}

fn conv_layer(
    id: &str,
    src: &str,
    kernel: usize,
    stride: usize,
    padding: Padding,
    weights: Tensor,
    bias: Vec<f32>,
    act: Activation,
) -> RawNode {
    let filters = bias.len();
    RawNode::layer(
        LayerNode::new(
            id,
            LayerKind::Conv2D(Conv2dAttrs {
                filters,
                kernel: [kernel, kernel],
                stride,
                padding,
            }),
            vec![src.into()],
        )
        .with_params(weights, Some(Tensor::scalar_vec(&bias)))
        .with_activation(act),
    )
}

/// Conv with He-uniform weights and small uniform biases.
#[allow(clippy::too_many_arguments)]
fn random_conv(
    rng: &mut ChaCha8Rng,
    id: &str,
    src: &str,
    cin: usize,
    filters: usize,
    kernel: usize,
    stride: usize,
    gain: f32,
    act: Activation,
) -> RawNode {
    let fan_in = (kernel * kernel * cin) as f32;
    let a = gain * (6.0 / fan_in).sqrt();
    let w = (0..kernel * kernel * cin * filters)
        .map(|_| rng.gen_range(-a..a))
        .collect();
    let b = (0..filters).map(|_| rng.gen_range(-0.05..0.05)).collect();
    conv_layer(
        id,
        src,
        kernel,
        stride,
        Padding::Same,
        Tensor::new(vec![kernel, kernel, cin, filters], w).expect("sized"),
        b,
        act,
    )
}

fn uniform_images(rng: &mut ChaCha8Rng, n: usize, shape: &[usize]) -> Tensor {
    let per: usize = shape.iter().product();
    let data = (0..n * per).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Tensor::new(full, data).expect("sized")
}

fn check_size(size: usize, multiple: usize, kind: FixtureKind) -> Result<()> {
    if size == 0 || !size.is_multiple_of(multiple) {
        return Err(Error::Input(format!(
            "{kind} needs an image size that is a positive multiple of {multiple}, got {size}"
        )));
    }
    Ok(())
}

/// Random classifier: conv, nested conv+batchnorm+relu block, pooling, two
/// more convs and a global average. Every layer is rectified.
pub fn toy_classifier(seed: u64, count: usize, size: usize) -> Result<Fixture> {
    check_size(size, 2, FixtureKind::ToyClassifier)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c1 = random_conv(&mut rng, "c1", "in", 3, 8, 3, 1, 1.0, Activation::Relu);
    let inner_conv = random_conv(&mut rng, "conv", "x", 8, 8, 3, 1, 1.0, Activation::None);
    let bn = BatchNormParams {
        gamma: (0..8).map(|_| rng.gen_range(0.5..1.5)).collect(),
        beta: (0..8).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        mean: (0..8).map(|_| rng.gen_range(-0.2..0.2)).collect(),
        variance: (0..8).map(|_| rng.gen_range(0.5..2.0)).collect(),
        epsilon: 1e-3,
    };
    let block = RawModel {
        name: "block".into(),
        input_shape: vec![],
        nodes: vec![
            input("x"),
            inner_conv,
            RawNode::new("bn", RawKind::BatchNorm(bn), vec!["conv".into()]),
            RawNode::new("relu", RawKind::Relu, vec!["bn".into()]),
        ],
        outputs: vec!["relu".into()],
    };
    let c3 = random_conv(&mut rng, "c3", "pool", 8, 16, 3, 1, 1.0, Activation::Relu);
    let c4 = random_conv(&mut rng, "c4", "c3", 16, 10, 1, 1, 1.0, Activation::Relu);
    let half = size / 2;
    let model = RawModel {
        name: "toy-classifier".into(),
        input_shape: vec![size, size, 3],
        nodes: vec![
            input("in"),
            c1,
            RawNode::new(
                "block",
                RawKind::SubNetwork(Box::new(block)),
                vec!["c1".into()],
            ),
            RawNode::new(
                "pool",
                RawKind::Layer(LayerKind::AvgPool2D {
                    pool: 2,
                    padding: Padding::Valid,
                }),
                vec!["block".into()],
            ),
            c3,
            c4,
            RawNode::new(
                "gap",
                RawKind::Layer(LayerKind::AvgPool2D {
                    pool: half,
                    padding: Padding::Valid,
                }),
                vec!["c4".into()],
            ),
            RawNode::new(
                "flat",
                RawKind::Layer(LayerKind::Flatten),
                vec!["gap".into()],
            ),
        ],
        outputs: vec!["flat".into()],
    };
    let calib = uniform_images(&mut rng, count, &[size, size, 3]);
    let images = uniform_images(&mut rng, 16, &[size, size, 3]);
    Ok(Fixture {
        model,
        calib,
        images,
        anchors: None,
        dataset: None,
    })
}

/// Random two-level pyramid: `c1 -> c2 (stride 2) -> upsample`, merged with
/// a lateral 1x1 conv of `c1` by an `Add`, then class and box heads.
pub fn mini_fpn_detector(seed: u64, count: usize, size: usize) -> Result<Fixture> {
    check_size(size, 2, FixtureKind::MiniFpnDetector)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = vec![
        input("in"),
        random_conv(&mut rng, "c1", "in", 3, 8, 3, 1, 1.0, Activation::Relu),
        random_conv(&mut rng, "c2", "c1", 8, 8, 3, 2, 1.0, Activation::Relu),
        RawNode::new(
            "up",
            RawKind::Layer(LayerKind::UpsampleNearest { factor: 2 }),
            vec!["c2".into()],
        ),
        random_conv(&mut rng, "lat", "c1", 8, 8, 1, 1, 1.0, Activation::Relu),
        RawNode::new(
            "merge",
            RawKind::Layer(LayerKind::Add),
            vec!["up".into(), "lat".into()],
        ),
        random_conv(&mut rng, "cls", "merge", 8, 2, 3, 1, 0.5, Activation::None),
        random_conv(&mut rng, "box", "merge", 8, 4, 3, 1, 0.5, Activation::None),
    ];
    let model = RawModel {
        name: "mini-fpn-detector".into(),
        input_shape: vec![size, size, 3],
        nodes,
        outputs: vec!["cls".into(), "box".into()],
    };
    let calib = uniform_images(&mut rng, count, &[size, size, 3]);
    let images = uniform_images(&mut rng, 16, &[size, size, 3]);
    let anchors = AnchorConfig {
        levels: vec![AnchorLevel {
            stride: 1,
            sizes: vec![4.0],
            ratios: vec![1.0],
        }],
        num_classes: 2,
        score_threshold: 0.5,
        nms_iou: 0.5,
    };
    Ok(Fixture {
        model,
        calib,
        images,
        anchors: Some(anchors),
        dataset: None,
    })
}

/// Cell size of the blob detector's first layer; small blobs span one cell.
pub const BLOB_CELL: usize = 4;

/// Anchors matching [`blob_detector`]: small blobs on a stride-4 grid, large
/// ones on a stride-8 grid.
pub fn blob_anchors() -> AnchorConfig {
    AnchorConfig {
        levels: vec![
            AnchorLevel {
                stride: BLOB_CELL,
                sizes: vec![BLOB_CELL as f64],
                ratios: vec![1.0],
            },
            AnchorLevel {
                stride: 2 * BLOB_CELL,
                sizes: vec![2.0 * BLOB_CELL as f64],
                ratios: vec![1.0],
            },
        ],
        num_classes: 2,
        score_threshold: 0.5,
        nms_iou: 0.5,
    }
}

/// Handcrafted detector for `[size, size, 1]` images.
///
/// `c1` averages 4x4 cells (whole cell, left half, top half). The stride-4
/// class-0 logit is a center-surround response of the cell means, which
/// fires for an isolated bright cell and not for a 2x2 block of them. The
/// stride-8 class-1 logit thresholds the mean over 8x8 regions. Box deltas
/// follow the brightness asymmetry inside a cell and stay small.
pub fn blob_detector(size: usize) -> Result<RawModel> {
    check_size(size, 2 * BLOB_CELL, FixtureKind::BlobDetector)?;
    let k = BLOB_CELL;
    // c1: [k, k, 1, 3]
    let mut w1 = vec![0.0f32; k * k * 3];
    for ky in 0..k {
        for kx in 0..k {
            let base = (ky * k + kx) * 3;
            w1[base] = 1.0 / (k * k) as f32;
            if kx < k / 2 {
                w1[base + 1] = 2.0 / (k * k) as f32;
            }
            if ky < k / 2 {
                w1[base + 2] = 2.0 / (k * k) as f32;
            }
        }
    }
    let c1 = conv_layer(
        "c1",
        "in",
        k,
        k,
        Padding::Valid,
        Tensor::new(vec![k, k, 1, 3], w1).expect("sized"),
        vec![0.0; 3],
        Activation::Relu,
    );

    // Stride-4 class head, 3x3 over c1: [3, 3, 3, 2].
    let (gain, surround, thr) = (20.0f32, 0.25f32, 0.45f32);
    let mut wa = vec![0.0f32; 9 * 3 * 2];
    for t in 0..9 {
        let base = t * 3 * 2;
        if t == 4 {
            wa[base] = gain;
            wa[base + 1] = 2.0;
        } else {
            wa[base] = -gain * surround;
        }
    }
    let cls_a = conv_layer(
        "cls_a",
        "c1",
        3,
        1,
        Padding::Same,
        Tensor::new(vec![3, 3, 3, 2], wa).expect("sized"),
        vec![-gain * thr, -10.0],
        Activation::None,
    );
    let box_weights = |kernel: usize| {
        let mut w = vec![0.0f32; kernel * kernel * 3 * 4];
        let centre = (kernel / 2) * kernel + kernel / 2;
        let base = centre * 3 * 4;
        // [channel][delta]: dx, dy, dw, dh
        w[base] = 0.2;
        w[base + 4] = -0.2;
        w[base + 1] = 0.2;
        w[base + 8 + 1] = -0.2;
        w[base + 2] = 0.02;
        w[base + 3] = 0.02;
        Tensor::new(vec![kernel, kernel, 3, 4], w).expect("sized")
    };
    let box_bias = vec![0.0, 0.0, -0.01, -0.01];
    let box_a = conv_layer(
        "box_a",
        "c1",
        3,
        1,
        Padding::Same,
        box_weights(3),
        box_bias.clone(),
        Activation::None,
    );

    let pool = RawNode::new(
        "pool",
        RawKind::Layer(LayerKind::AvgPool2D {
            pool: 2,
            padding: Padding::Valid,
        }),
        vec!["c1".into()],
    );
    // Stride-8 class head, 1x1 over the pooled means: [1, 1, 3, 2].
    let mut wb = vec![0.0f32; 3 * 2];
    wb[0] = 2.0;
    wb[1] = gain;
    let cls_b = conv_layer(
        "cls_b",
        "pool",
        1,
        1,
        Padding::Same,
        Tensor::new(vec![1, 1, 3, 2], wb).expect("sized"),
        vec![-10.0, -gain * 0.5],
        Activation::None,
    );
    let box_b = conv_layer(
        "box_b",
        "pool",
        1,
        1,
        Padding::Same,
        box_weights(1),
        box_bias,
        Activation::None,
    );

    Ok(RawModel {
        name: "blob-detector".into(),
        input_shape: vec![size, size, 1],
        nodes: vec![input("in"), c1, cls_a, box_a, pool, cls_b, box_b],
        outputs: vec![
            "cls_a".into(),
            "box_a".into(),
            "cls_b".into(),
            "box_b".into(),
        ],
    })
}

/// Synthetic blob images: a dark noisy background with one to three
/// non-touching bright squares. Class 0 squares are one cell wide and
/// cell-aligned, class 1 squares are two cells wide and aligned to two cells.
pub fn blob_dataset(seed: u64, count: usize, size: usize) -> Result<Dataset> {
    check_size(size, 2 * BLOB_CELL, FixtureKind::BlobDetector)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = size / BLOB_CELL;
    let mut ds = Dataset::default();
    for _ in 0..count {
        let mut pixels: Vec<f32> = (0..size * size).map(|_| rng.gen_range(0.0..0.1)).collect();
        let mut occupied = vec![false; cells * cells];
        let mut boxes = Vec::new();
        let wanted = rng.gen_range(1..=3);
        let mut attempts = 0;
        while boxes.len() < wanted && attempts < 100 {
            attempts += 1;
            let class = rng.gen_range(0..2usize);
            let span = class + 1;
            let (cx, cy) = if class == 0 {
                (rng.gen_range(0..cells), rng.gen_range(0..cells))
            } else {
                (
                    2 * rng.gen_range(0..cells / 2),
                    2 * rng.gen_range(0..cells / 2),
                )
            };
            // keep a one-cell gap around every blob
            let free = (cy.saturating_sub(1)..(cy + span + 1).min(cells)).all(|y| {
                (cx.saturating_sub(1)..(cx + span + 1).min(cells)).all(|x| !occupied[y * cells + x])
            });
            if !free {
                continue;
            }
            for y in cy..cy + span {
                for x in cx..cx + span {
                    occupied[y * cells + x] = true;
                }
            }
            let (x0, y0, side) = (cx * BLOB_CELL, cy * BLOB_CELL, span * BLOB_CELL);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    pixels[y * size + x] = rng.gen_range(0.7..1.0);
                }
            }
            boxes.push(Annotation {
                class,
                x_min: x0 as f64,
                y_min: y0 as f64,
                x_max: (x0 + side) as f64,
                y_max: (y0 + side) as f64,
            });
        }
        ds.images
            .push(Tensor::new(vec![size, size, 1], pixels).expect("sized"));
        ds.annotations.push(boxes);
    }
    Ok(ds)
}

fn blob_fixture(seed: u64, count: usize, size: usize) -> Result<Fixture> {
    let model = blob_detector(size)?;
    let dataset = blob_dataset(seed, count, size)?;
    let calib_set = blob_dataset(seed ^ 0x9e37_79b9_7f4a_7c15, 64, size)?;
    let stack = |ds: &Dataset| {
        let views: Vec<&[f32]> = ds.images.iter().map(Tensor::data).collect();
        Tensor::stack(&[size, size, 1], &views)
    };
    Ok(Fixture {
        model,
        calib: stack(&calib_set)?,
        images: stack(&dataset)?,
        anchors: Some(blob_anchors()),
        dataset: Some(dataset),
    })
}

//! Mean average precision and its evolution over simulation time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::denormalize_tensor;
use super::detection::{decode_detections, iou, AnchorConfig, BBox, Detection};
use crate::analog::forward_outputs;
use crate::calibrator::ChannelStats;
use crate::error::{Error, Result};
use crate::ir::ModelGraph;
use crate::snn::{Recording, SimConfig, SpikingNetwork};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

/// Average precision of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAp {
    pub ap: f64,
    pub ground_truth: usize,
    pub detections: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    /// Classes with at least one ground-truth box.
    pub per_class: BTreeMap<usize, ClassAp>,
    pub map: f64,
}

/// One detection after matching: `(score, image, position in image, tp)`.
type Scored = (f64, usize, usize, bool);

/// Greedy matching inside one image: detections in score order take the
/// unmatched ground truth box of their class with the highest IoU.
fn match_image(
    image: usize,
    dets: &[Detection],
    gt: &[GroundTruth],
    thr: f64,
) -> Vec<(usize, Scored)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gt.len()];
    order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt.iter().enumerate() {
                if taken[j] || g.class != d.class {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            let tp = match best {
                Some((j, v)) if v >= thr => {
                    taken[j] = true;
                    true
                }
                _ => false,
            };
            (d.class, (d.score, image, i, tp))
        })
        .collect()
}

/// All-point interpolated AP from detections ranked by score.
fn average_precision(ranked: &[Scored], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (k, r) in ranked.iter().enumerate() {
        tp += r.3 as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// mAP at the given IoU threshold, averaged over classes that have ground
/// truth. Detections are pooled across images and ranked by score, ties
/// broken by image then position.
pub fn evaluate_map(
    predictions: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruth>],
    iou_threshold: f64,
) -> Result<MapReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Input(format!(
            "{} prediction lists for {} annotated images",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut n_gt: BTreeMap<usize, usize> = BTreeMap::new();
    for g in ground_truth.iter().flatten() {
        *n_gt.entry(g.class).or_default() += 1;
    }
    if n_gt.is_empty() {
        return Err(Error::UndefinedMap);
    }
    let matched: Vec<Vec<(usize, Scored)>> = predictions
        .par_iter()
        .zip(ground_truth)
        .enumerate()
        .map(|(i, (d, g))| match_image(i, d, g, iou_threshold))
        .collect();
    let mut pooled: BTreeMap<usize, Vec<Scored>> = BTreeMap::new();
    for (class, s) in matched.into_iter().flatten() {
        pooled.entry(class).or_default().push(s);
    }
    let mut per_class = BTreeMap::new();
    for (&class, &count) in &n_gt {
        let mut ranked = pooled.remove(&class).unwrap_or_default();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        per_class.insert(
            class,
            ClassAp {
                ap: average_precision(&ranked, count),
                ground_truth: count,
                detections: ranked.len(),
            },
        );
    }
    let map = per_class.values().map(|c| c.ap).sum::<f64>() / per_class.len() as f64;
    Ok(MapReport { per_class, map })
}

/// On-disk box annotation, in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class: usize,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Annotation {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            bbox: BBox::new(self.x_min, self.y_min, self.x_max, self.y_max),
            class: self.class,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    /// Tensor file, relative to the manifest.
    pub image: String,
    pub boxes: Vec<Annotation>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetManifest {
    images: Vec<DatasetEntry>,
}

/// Images `[H, W, C]` with their annotations.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub annotations: Vec<Vec<Annotation>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ground_truth(&self) -> Vec<Vec<GroundTruth>> {
        self.annotations
            .iter()
            .map(|a| a.iter().map(Annotation::ground_truth).collect())
            .collect()
    }
}

pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Dataset> {
    let path = manifest.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut ds = Dataset::default();
    for e in m.images {
        ds.images.push(Tensor::load(dir.join(&e.image))?);
        ds.annotations.push(e.boxes);
    }
    Ok(ds)
}

/// Writes `image_NNNN.tensor` files next to the manifest.
pub fn save_dataset(ds: &Dataset, manifest: impl AsRef<Path>) -> Result<()> {
    let path = manifest.as_ref();
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::with_capacity(ds.len());
    for (i, (img, boxes)) in ds.images.iter().zip(&ds.annotations).enumerate() {
        let name = format!("image_{i:04}.tensor");
        img.save(dir.join(&name))?;
        entries.push(DatasetEntry {
            image: name,
            boxes: boxes.clone(),
        });
    }
    let text =
        serde_json::to_string_pretty(&DatasetManifest { images: entries }).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct MapPoint {
    pub time_ms: f64,
    pub report: MapReport,
}

#[derive(Clone, Debug)]
pub struct MapSeries {
    pub points: Vec<MapPoint>,
    /// mAP of the analog model on the same images.
    pub ann: MapReport,
    pub ann_detections: Vec<Vec<Detection>>,
    /// Detections from the rates at the end of the run.
    pub snn_detections: Vec<Vec<Detection>>,
    /// Worst per-neuron conservation residual over all runs.
    pub max_conservation_error: f64,
}

/// `(width, height)` of a model taking `[H, W, C]` images.
fn image_size(model: &ModelGraph) -> Result<(usize, usize)> {
    match model.input_shape.as_slice() {
        [h, w, _] => Ok((*w, *h)),
        s => Err(Error::Input(format!(
            "detector input must be [H, W, C], got {s:?}"
        ))),
    }
}

/// Decodes detections from the output rates of a converted model.
pub fn detect_from_rates(
    rates: &std::collections::HashMap<String, Tensor>,
    model: &ModelGraph,
    stats: &ChannelStats,
    anchors: &AnchorConfig,
) -> Result<Vec<Detection>> {
    let heads = model
        .outputs
        .iter()
        .map(|id| {
            let r = rates
                .get(id)
                .ok_or_else(|| Error::Input(format!("no rates for output '{id}'")))?;
            denormalize_tensor(id, r, stats)
        })
        .collect::<Result<Vec<_>>>()?;
    decode_detections(&heads, anchors, image_size(model)?)
}

/// Detections of the analog model, one list per image.
pub fn detect_analog(
    model: &ModelGraph,
    images: &[Tensor],
    anchors: &AnchorConfig,
) -> Result<Vec<Vec<Detection>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let views: Vec<&[f32]> = images.iter().map(Tensor::data).collect();
    let batch = Tensor::stack(images[0].shape(), &views)?;
    let outs = forward_outputs(model, &batch)?;
    let size = image_size(model)?;
    (0..images.len())
        .map(|i| {
            let heads: Vec<Tensor> = outs.iter().map(|o| o.sample_tensor(i)).collect();
            decode_detections(&heads, anchors, size)
        })
        .collect()
}

/// Simulates every image once, decoding and scoring the output rates every
/// `sample_every_ms`.
pub fn map_convergence(
    snn: &SpikingNetwork,
    ann: &ModelGraph,
    dataset: &Dataset,
    config: &SimConfig,
    sample_every_ms: f64,
    anchors: &AnchorConfig,
    iou_threshold: f64,
) -> Result<MapSeries> {
    if dataset.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    config.validate()?;
    anchors.validate()?;
    let every = (sample_every_ms / config.dt).round() as usize;
    if every == 0 || every > config.steps() {
        return Err(Error::Input(format!(
            "sampling interval {sample_every_ms} ms must cover between one step and the whole run"
        )));
    }
    let model = snn.model();
    let stats = model
        .normalization
        .as_ref()
        .ok_or_else(|| Error::Unnormalized(model.name.clone()))?;
    let gt = dataset.ground_truth();
    let recording = Recording::default().with_series(every);

    // per image: detections at each snapshot, then at the end
    let per_image: Vec<(Vec<Vec<Detection>>, Vec<Detection>, f64)> = dataset
        .images
        .par_iter()
        .map(|img| {
            let mut net = snn.clone();
            let rec = net.run(img, config, &recording)?;
            let snaps = rec
                .series
                .iter()
                .map(|s| detect_from_rates(&s.rates, model, stats, anchors))
                .collect::<Result<Vec<_>>>()?;
            let last = detect_from_rates(&rec.rates, model, stats, anchors)?;
            Ok((snaps, last, net.max_conservation_error()))
        })
        .collect::<Result<_>>()?;

    let n_points = per_image[0].0.len();
    let mut points = Vec::with_capacity(n_points);
    for p in 0..n_points {
        let preds: Vec<Vec<Detection>> = per_image.iter().map(|(s, _, _)| s[p].clone()).collect();
        points.push(MapPoint {
            time_ms: ((p + 1) * every) as f64 * config.dt,
            report: evaluate_map(&preds, &gt, iou_threshold)?,
        });
    }
    let ann_detections = detect_analog(ann, &dataset.images, anchors)?;
    Ok(MapSeries {
        points,
        ann: evaluate_map(&ann_detections, &gt, iou_threshold)?,
        ann_detections,
        max_conservation_error: per_image.iter().map(|p| p.2).fold(0.0, f64::max),
        snn_detections: per_image.into_iter().map(|(_, f, _)| f).collect(),
    })
}

/// Rows of `time_ms,class,ap,map,ann_map`; class `all` carries the mean.
pub fn map_csv(series: &MapSeries) -> String {
    let mut s = String::from("time_ms,class,ap,map,ann_map\n");
    let classes: BTreeSet<usize> = series.ann.per_class.keys().copied().collect();
    for p in &series.points {
        for c in &classes {
            let ap = p.report.per_class.get(c).map_or(0.0, |c| c.ap);
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                p.time_ms, c, ap, p.report.map, series.ann.map
            );
        }
        let _ = writeln!(
            s,
            "{},all,{},{},{}",
            p.time_ms, p.report.map, p.report.map, series.ann.map
        );
    }
    s
}

pub fn write_map_csv(series: &MapSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, map_csv(series)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 1.0, 1.0),
            class: 0,
            score,
            anchor: 0,
        }
    }

    fn gt(x: f64) -> GroundTruth {
        GroundTruth {
            bbox: BBox::new(x, 0.0, x + 1.0, 1.0),
            class: 0,
        }
    }

    #[test]
    fn perfect_detection() {
        let r = evaluate_map(&[vec![det(0.0, 0.9)]], &[vec![gt(0.0)]], 0.5).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_class[&0].ap, 1.0);
    }

    #[test]
    fn below_threshold_overlap_scores_zero() {
        // offset 0.4286 gives IoU = 0.5714/1.4286 = 0.4
        let off = 1.0 - 0.8 / 1.4;
        let r = evaluate_map(&[vec![det(off, 0.9)]], &[vec![gt(0.0)]], 0.5).unwrap();
        assert!((iou(&det(off, 0.9).bbox, &gt(0.0).bbox) - 0.4).abs() < 1e-9);
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn trailing_false_positive_keeps_full_ap() {
        let r = evaluate_map(&[vec![det(0.0, 0.9), det(5.0, 0.8)]], &[vec![gt(0.0)]], 0.5).unwrap();
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn leading_false_positive_halves_precision() {
        let r = evaluate_map(&[vec![det(5.0, 0.9), det(0.0, 0.8)]], &[vec![gt(0.0)]], 0.5).unwrap();
        assert!((r.map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let r = evaluate_map(
            &[vec![det(0.0, 0.9), det(0.0, 0.8)], vec![det(0.0, 0.7)]],
            &[vec![gt(0.0)], vec![gt(0.0)]],
            0.5,
        )
        .unwrap();
        // ranks: TP, FP, TP -> precision envelope 1 then 2/3
        assert!((r.map - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn classes_without_ground_truth_are_ignored() {
        let mut other = det(0.0, 0.9);
        other.class = 3;
        let r = evaluate_map(&[vec![det(0.0, 0.9), other]], &[vec![gt(0.0)]], 0.5).unwrap();
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn no_ground_truth_is_undefined() {
        assert!(matches!(
            evaluate_map(&[vec![det(0.0, 0.9)]], &[vec![]], 0.5),
            Err(Error::UndefinedMap)
        ));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            images: vec![Tensor::filled(vec![2, 2, 1], 0.5)],
            annotations: vec![vec![Annotation {
                class: 1,
                x_min: 0.0,
                y_min: 0.0,
                x_max: 1.0,
                y_max: 2.0,
            }]],
        };
        let p = dir.path().join("data.json");
        save_dataset(&ds, &p).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.annotations, ds.annotations);
    }
}

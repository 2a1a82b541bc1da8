//! Anchor decoding and non-maximum suppression.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    fn clip(&self, w: f64, h: f64) -> Self {
        BBox::new(
            self.x_min.clamp(0.0, w),
            self.y_min.clamp(0.0, h),
            self.x_max.clamp(0.0, w),
            self.y_max.clamp(0.0, h),
        )
    }
}

/// Intersection over union; 0 when both boxes are empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
    /// Position of the generating anchor across all levels; breaks score ties.
    pub anchor: usize,
}

fn by_rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.anchor.cmp(&b.anchor))
        .then(a.class.cmp(&b.class))
}

/// One pyramid level: a grid of `stride`-spaced cells with one anchor per
/// (size, ratio) pair. Ratios are width over height.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorLevel {
    pub stride: usize,
    pub sizes: Vec<f64>,
    #[serde(default = "unit_ratio")]
    pub ratios: Vec<f64>,
}

fn unit_ratio() -> Vec<f64> {
    vec![1.0]
}

impl AnchorLevel {
    pub fn anchors_per_cell(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }

    /// Anchor `a` of cell `(x, y)`, ratios varying fastest.
    pub fn anchor_box(&self, x: usize, y: usize, a: usize) -> BBox {
        let (cx, cy, w, h) = self.anchor_geometry(x, y, a);
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    fn anchor_geometry(&self, x: usize, y: usize, a: usize) -> (f64, f64, f64, f64) {
        let size = self.sizes[a / self.ratios.len()];
        let ratio = self.ratios[a % self.ratios.len()];
        let s = self.stride as f64;
        let r = ratio.sqrt();
        (
            (x as f64 + 0.5) * s,
            (y as f64 + 0.5) * s,
            size * r,
            size / r,
        )
    }
}

/// Anchor layout and post-processing thresholds of a detector. Head outputs
/// are expected as `[cls_0, box_0, cls_1, box_1, ...]`, one pair per level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub levels: Vec<AnchorLevel>,
    pub num_classes: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(format!("anchor config: {m}")));
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return bad(format!(
                "score threshold {} outside (0, 1)",
                self.score_threshold
            ));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return bad(format!("NMS IoU {} outside (0, 1)", self.nms_iou));
        }
        if self.levels.is_empty() || self.num_classes == 0 {
            return bad("needs at least one level and one class".into());
        }
        for (l, lv) in self.levels.iter().enumerate() {
            if lv.anchors_per_cell() == 0 || lv.stride == 0 {
                return bad(format!("level {l} has no anchors or a zero stride"));
            }
            if lv.sizes.iter().chain(&lv.ratios).any(|&v| !(v > 0.0)) {
                return bad(format!("level {l} has a non-positive size or ratio"));
            }
        }
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: AnchorConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("serializable");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-class greedy suppression: a detection is dropped when its IoU with
/// an already kept detection of the same class exceeds `iou_threshold`.
/// The result is ordered by score, then anchor index.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(by_rank);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept
            .iter()
            .all(|k| k.class != d.class || iou(&k.bbox, &d.bbox) <= iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}

/// Turns head outputs (class logits and box deltas in the activation domain)
/// into scored, clipped, suppressed detections.
pub fn decode_detections(
    heads: &[Tensor],
    anchors: &AnchorConfig,
    image_size: (usize, usize),
) -> Result<Vec<Detection>> {
    anchors.validate()?;
    if heads.len() != 2 * anchors.levels.len() {
        return Err(Error::Input(format!(
            "{} head outputs for {} anchor levels",
            heads.len(),
            anchors.levels.len()
        )));
    }
    let (img_w, img_h) = (image_size.0 as f64, image_size.1 as f64);
    let k = anchors.num_classes;
    let mut cands = Vec::new();
    let mut offset = 0;
    for (l, lv) in anchors.levels.iter().enumerate() {
        let (cls, reg) = (&heads[2 * l], &heads[2 * l + 1]);
        let a_n = lv.anchors_per_cell();
        let grid = match cls.shape() {
            [h, w, c] if *c == a_n * k && reg.shape() == [*h, *w, a_n * 4] => (*h, *w),
            _ => {
                return Err(Error::Input(format!(
                    "level {l}: heads {:?}/{:?} do not fit {a_n} anchors x {k} classes",
                    cls.shape(),
                    reg.shape()
                )))
            }
        };
        let (cd, rd) = (cls.data(), reg.data());
        for y in 0..grid.0 {
            for x in 0..grid.1 {
                let cell = y * grid.1 + x;
                for a in 0..a_n {
                    let anchor = offset + cell * a_n + a;
                    let d = &rd[(cell * a_n + a) * 4..(cell * a_n + a) * 4 + 4];
                    let (acx, acy, aw, ah) = lv.anchor_geometry(x, y, a);
                    let cx = acx + f64::from(d[0]) * aw;
                    let cy = acy + f64::from(d[1]) * ah;
                    let w = aw * f64::from(d[2]).exp();
                    let h = ah * f64::from(d[3]).exp();
                    let bbox = BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
                        .clip(img_w, img_h);
                    if !bbox.is_valid() {
                        continue;
                    }
                    for class in 0..k {
                        let score = logistic(f64::from(cd[(cell * a_n + a) * k + class]));
                        if score >= anchors.score_threshold {
                            cands.push(Detection {
                                bbox,
                                class,
                                score,
                                anchor,
                            });
                        }
                    }
                }
            }
        }
        offset += grid.0 * grid.1 * a_n;
    }
    Ok(nms(cands, anchors.nms_iou))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> AnchorConfig {
        AnchorConfig {
            levels: vec![AnchorLevel {
                stride: 8,
                sizes: vec![8.0],
                ratios: vec![1.0],
            }],
            num_classes: 1,
            score_threshold: 0.5,
            nms_iou: 0.5,
        }
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(2.0, 2.0, 3.0, 3.0)), 0.0);
        let half = BBox::new(0.5, 0.0, 1.5, 1.0);
        assert!((iou(&a, &half) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&a, &half), iou(&half, &a));
    }

    #[test]
    fn low_logits_give_nothing() {
        let cls = Tensor::filled(vec![2, 2, 1], -50.0);
        let reg = Tensor::zeros(vec![2, 2, 4]);
        assert!(decode_detections(&[cls, reg], &config(), (16, 16))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn zero_deltas_reproduce_anchors() {
        let cls = Tensor::filled(vec![2, 2, 1], 5.0);
        let reg = Tensor::zeros(vec![2, 2, 4]);
        let mut cfg = config();
        cfg.nms_iou = 0.99;
        let dets = decode_detections(&[cls, reg], &cfg, (16, 16)).unwrap();
        assert_eq!(dets.len(), 4);
        for d in &dets {
            let (x, y) = (d.anchor % 2, d.anchor / 2);
            assert_eq!(d.bbox, cfg.levels[0].anchor_box(x, y, 0));
        }
        // equal scores: ordered by anchor index
        assert_eq!(
            dets.iter().map(|d| d.anchor).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
    }

    #[test]
    fn nms_keeps_the_best_of_duplicates() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0);
        let d = |score, anchor| Detection {
            bbox: b,
            class: 0,
            score,
            anchor,
        };
        let kept = nms(vec![d(0.8, 0), d(0.9, 1)], 0.5);
        assert_eq!(kept, vec![d(0.9, 1)]);
        let mut other = d(0.8, 0);
        other.class = 1;
        assert_eq!(nms(vec![other.clone(), d(0.9, 1)], 0.5).len(), 2);
    }

    #[test]
    fn head_count_mismatch_is_an_error() {
        let cls = Tensor::filled(vec![2, 2, 1], 5.0);
        assert!(decode_detections(std::slice::from_ref(&cls), &config(), (16, 16)).is_err());
        let reg = Tensor::zeros(vec![2, 2, 3]);
        assert!(decode_detections(&[cls, reg], &config(), (16, 16)).is_err());
    }

    #[test]
    fn boxes_are_clipped() {
        let cls = Tensor::filled(vec![1, 1, 1], 5.0);
        let reg = Tensor::new(vec![1, 1, 4], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let d = &decode_detections(&[cls, reg], &config(), (8, 8)).unwrap()[0];
        assert_eq!(d.bbox, BBox::new(0.0, 0.0, 8.0, 8.0));
    }
}

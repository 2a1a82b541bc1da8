use proptest::prelude::*;
use spikeconv::analysis::{
    detect_analog, detect_from_rates, evaluate_map, iou, map_convergence, BBox, Dataset, Detection,
};
use spikeconv::calibrator::{CalibrationConfig, NodeStats};
use spikeconv::fixtures::{
    blob_anchors, blob_dataset, blob_detector, generate, FixtureKind, FixtureSpec,
};
use spikeconv::pipeline::{convert, Converted};
use spikeconv::snn::{build_snn, Recording, SimConfig};
use spikeconv::Tensor;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0f64..50.0, 0.0f64..50.0, 0.5f64..30.0, 0.5f64..30.0)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

proptest! {
    #[test]
    fn denormalize_inverts_normalize(
        eps in -5.0f32..5.0,
        span in 0.01f32..10.0,
        a in -20.0f32..20.0,
    ) {
        let s = NodeStats { epsilon: vec![eps], lambda: vec![eps + span] };
        let back = s.denormalize(0, s.normalize(0, a));
        prop_assert!((f64::from(back) - f64::from(a)).abs() <= 1e-6 * f64::from(a.abs()).max(1.0));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a), 1.0);
        if a != b {
            prop_assert!(ab < 1.0);
        }
    }
}

fn blob_converted() -> (Converted, spikeconv::fixtures::Fixture) {
    let f = generate(&FixtureSpec::new(FixtureKind::BlobDetector, 21).with_count(12)).unwrap();
    let c = convert(&f.model, &f.calib, &CalibrationConfig::default()).unwrap();
    (c, f)
}

/// Dark image with bright square blobs at the given top-left corners.
fn blob_image(size: usize, corners: &[(usize, usize)]) -> Tensor {
    let mut img = Tensor::zeros(vec![size, size, 1]);
    for &(x, y) in corners {
        for yy in y..y + 4 {
            for xx in x..x + 4 {
                img.data_mut()[yy * size + xx] = 0.85;
            }
        }
    }
    img
}

#[test]
fn decoding_is_equivariant_under_stride_shifts() {
    let parsed = spikeconv::parser::parse(&blob_detector(32).unwrap()).unwrap();
    let anchors = blob_anchors();
    // Whole multiples of the coarsest stride move every anchor grid alike.
    for (dx, dy) in [(8usize, 0usize), (0, 8), (8, 8)] {
        let corners = [(8, 8), (16, 4)];
        let shifted: Vec<(usize, usize)> = corners.iter().map(|&(x, y)| (x + dx, y + dy)).collect();
        let dets = detect_analog(
            &parsed,
            &[blob_image(32, &corners), blob_image(32, &shifted)],
            &anchors,
        )
        .unwrap();
        let (a, b) = (&dets[0], &dets[1]);
        assert!(!a.is_empty());
        assert_eq!(a.len(), b.len());
        for d in a {
            let moved = d.bbox.translate(dx as f64, dy as f64);
            let m = b
                .iter()
                .find(|e| e.class == d.class && iou(&e.bbox, &moved) > 1.0 - 1e-9)
                .unwrap_or_else(|| panic!("no shifted match for {d:?}"));
            assert!((m.score - d.score).abs() < 1e-6);
        }
    }
}

#[test]
fn single_sample_series_equals_final_rate_map() {
    let (c, f) = blob_converted();
    let ds = f.dataset.unwrap();
    let ds = Dataset {
        images: ds.images[..6].to_vec(),
        annotations: ds.annotations[..6].to_vec(),
    };
    let anchors = f.anchors.unwrap();
    let config = SimConfig::new(300.0).with_transient(40.0);
    let snn = build_snn(&c.normalized, &config).unwrap();
    let series = map_convergence(&snn, &c.parsed, &ds, &config, 300.0, &anchors, 0.5).unwrap();
    assert_eq!(series.points.len(), 1);
    assert_eq!(series.points[0].time_ms, 300.0);

    let mut net = snn.clone();
    let preds: Vec<Vec<Detection>> = ds
        .images
        .iter()
        .map(|img| {
            let rec = net.run(img, &config, &Recording::default()).unwrap();
            detect_from_rates(&rec.rates, &c.normalized, &c.stats, &anchors).unwrap()
        })
        .collect();
    let direct = evaluate_map(&preds, &ds.ground_truth(), 0.5).unwrap();
    assert_eq!(series.points[0].report.map, direct.map);
    assert_eq!(series.snn_detections, preds);
}

#[test]
fn blob_map_rises_without_dropping_back() {
    let (c, f) = blob_converted();
    let ds = blob_dataset(77, 50, 32).unwrap();
    let anchors = f.anchors.unwrap();
    let config = SimConfig::new(2000.0);
    let snn = build_snn(&c.normalized, &config).unwrap();
    let series = map_convergence(&snn, &c.parsed, &ds, &config, 50.0, &anchors, 0.5).unwrap();
    assert_eq!(series.points.len(), 40);
    assert!(series.ann.map >= 0.9, "ANN mAP {}", series.ann.map);
    let maps: Vec<f64> = series.points.iter().map(|p| p.report.map).collect();
    let mut best = f64::MIN;
    for (p, &m) in series.points.iter().zip(&maps) {
        assert!(
            m >= best - 0.02,
            "mAP fell to {m} at {} ms after {best}",
            p.time_ms
        );
        best = best.max(m);
    }
    assert!(maps.last().unwrap() >= &(series.ann.map - 0.03));
    assert!(series.max_conservation_error <= 1e-4);
}

#[test]
fn bad_sampling_interval_is_rejected() {
    let (c, f) = blob_converted();
    let ds = f.dataset.unwrap();
    let config = SimConfig::new(100.0);
    let snn = build_snn(&c.normalized, &config).unwrap();
    let anchors = f.anchors.unwrap();
    for every in [0.0, 150.0] {
        assert!(map_convergence(&snn, &c.parsed, &ds, &config, every, &anchors, 0.5).is_err());
    }
    let empty = Dataset {
        images: vec![],
        annotations: vec![],
    };
    assert!(map_convergence(&snn, &c.parsed, &empty, &config, 50.0, &anchors, 0.5).is_err());
}

use proptest::prelude::*;
use spikeconv::calibrator::{normalize_model, CalibrationConfig, ChannelStats, NodeStats};
use spikeconv::fixtures::{generate, FixtureKind, FixtureSpec};
use spikeconv::ir::{Activation, LayerKind, LayerNode, ModelGraph};
use spikeconv::pipeline::convert;
use spikeconv::snn::{build_snn, Raster, Recording, SimConfig};
use spikeconv::Tensor;

/// One neuron per input value driven through a unit dense layer with the
/// given gain, normalized with identity statistics.
fn unit_layer(n: usize, gain: f32) -> ModelGraph {
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        w[i * n + i] = gain;
    }
    let parsed = ModelGraph::new(
        "unit",
        vec![n],
        vec![
            LayerNode::new("in", LayerKind::Input, vec![]),
            LayerNode::new("d", LayerKind::Dense { units: n }, vec!["in".into()])
                .with_params(Tensor::new(vec![n, n], w).unwrap(), None)
                .with_activation(Activation::Relu),
        ],
        vec!["d".into()],
    )
    .unwrap();
    let stats = ChannelStats {
        p_lo: 0.01,
        p_hi: 99.99,
        nodes: [("in", n), ("d", n)]
            .into_iter()
            .map(|(id, c)| (id.to_string(), NodeStats::identity(c)))
            .collect(),
    };
    normalize_model(&parsed, &stats).unwrap()
}

fn fixture(kind: FixtureKind, seed: u64) -> (ModelGraph, Tensor) {
    let f = generate(&FixtureSpec::new(kind, seed).with_count(32)).unwrap();
    let c = convert(&f.model, &f.calib, &CalibrationConfig::default()).unwrap();
    (c.normalized, f.images)
}

fn all_layers(m: &ModelGraph) -> Vec<&str> {
    m.nodes
        .iter()
        .filter(|n| n.kind != LayerKind::Input)
        .map(|n| n.id.as_str())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constant_drive_rate_is_within_one_step(
        a in 0.0f32..=1.0,
        steps in 50usize..1500,
        transient_frac in 0.0f64..0.6,
    ) {
        let model = unit_layer(1, 1.0);
        let transient = (steps as f64 * transient_frac).floor();
        let config = SimConfig::new(steps as f64).with_transient(transient);
        let mut snn = build_snn(&model, &config).unwrap();
        let rec = snn
            .run(&Tensor::new(vec![1], vec![a]).unwrap(), &config, &Recording::default())
            .unwrap();
        let rate = f64::from(rec.rate("d").unwrap().data()[0]);
        let t_eff = config.effective_steps() as f64;
        prop_assert!((rate - f64::from(a)).abs() <= 1.0 / t_eff + 1e-12, "{} vs {} over {}", rate, a, t_eff);
        prop_assert!(snn.max_conservation_error() <= 1e-9);
    }
}

#[test]
fn overdriven_neurons_saturate_at_one_spike_per_step() {
    let model = unit_layer(4, 10.0);
    let config = SimConfig::new(300.0);
    let mut snn = build_snn(&model, &config).unwrap();
    let x = Tensor::new(vec![4], vec![0.2, 0.5, 3.0, 1.0]).unwrap();
    let rec = snn.run(&x, &config, &Recording::default()).unwrap();
    let rates = rec.rate("d").unwrap().data();
    assert!(rates.iter().all(|&r| (0.0..=1.0).contains(&r)));
    assert!(rates.iter().all(|&r| r == 1.0));
    // The excess charge piles up in the membrane instead.
    assert!(snn.state("d").unwrap().v.iter().all(|&v| v > 1.0));
    assert!(snn.max_conservation_error() <= 1e-9);
}

#[test]
fn fixture_rates_are_bounded_and_conserve_charge() {
    for kind in [
        FixtureKind::ToyClassifier,
        FixtureKind::MiniFpnDetector,
        FixtureKind::BlobDetector,
    ] {
        let (model, images) = fixture(kind, 3);
        let config = SimConfig::new(400.0).with_transient(50.0);
        let mut snn = build_snn(&model, &config).unwrap();
        let layers = all_layers(&model);
        for i in 0..2 {
            let rec = snn
                .run(
                    &images.sample_tensor(i),
                    &config,
                    &Recording::layers(&layers),
                )
                .unwrap();
            for id in &layers {
                assert!(
                    rec.rate(id)
                        .unwrap()
                        .data()
                        .iter()
                        .all(|r| (0.0..=1.0).contains(r)),
                    "{kind} {id}"
                );
            }
            assert!(snn.max_conservation_error() <= 1e-4, "{kind}");
        }
    }
}

#[test]
fn conservation_holds_at_every_step() {
    let (model, images) = fixture(FixtureKind::MiniFpnDetector, 8);
    let config = SimConfig::new(200.0);
    let mut snn = build_snn(&model, &config).unwrap();
    snn.reset();
    let image = images.sample_tensor(0);
    for _ in 0..200 {
        snn.step(&image).unwrap();
        assert!(snn.max_conservation_error() <= 1e-4);
    }
    assert_eq!(snn.steps_done(), 200);
}

#[test]
fn rasters_are_bit_identical_across_runs_and_networks() {
    let (model, images) = fixture(FixtureKind::MiniFpnDetector, 5);
    let config = SimConfig::new(250.0);
    let recording = Recording::layers(&all_layers(&model)).with_raster();
    let image = images.sample_tensor(1);
    let mut a = build_snn(&model, &config).unwrap();
    let first = a.run(&image, &config, &recording).unwrap();
    let again = a.run(&image, &config, &recording).unwrap();
    let mut b = build_snn(&model, &config).unwrap();
    let fresh = b.run(&image, &config, &recording).unwrap();
    for id in &first.layers {
        let bytes = first.rasters[id].to_bytes();
        assert_eq!(bytes, again.rasters[id].to_bytes(), "{id}");
        assert_eq!(bytes, fresh.rasters[id].to_bytes(), "{id}");
        assert_eq!(first.rates[id], fresh.rates[id]);
    }
}

#[test]
fn raster_counts_match_rates() {
    let (model, images) = fixture(FixtureKind::ToyClassifier, 2);
    let config = SimConfig::new(300.0);
    let mut snn = build_snn(&model, &config).unwrap();
    let rec = snn
        .run(
            &images.sample_tensor(0),
            &config,
            &Recording::layers(&["c3"]).with_raster(),
        )
        .unwrap();
    let raster = &rec.rasters["c3"];
    let back = Raster::from_bytes(&raster.to_bytes()).unwrap();
    assert_eq!(&back, raster);
    for (k, &r) in rec.rate("c3").unwrap().data().iter().enumerate() {
        assert_eq!(r, (raster.count(k) as f64 / 300.0) as f32);
    }
}

#[test]
fn time_step_scales_bias_only() {
    let (model, images) = fixture(FixtureKind::MiniFpnDetector, 1);
    let coarse = SimConfig::new(100.0);
    let fine = SimConfig::new(100.0).with_dt(0.5);
    let mut snn = build_snn(&model, &coarse).unwrap();
    let b1 = snn.scaled_bias("c1").unwrap().to_vec();
    snn.set_config(&fine).unwrap();
    let b2 = snn.scaled_bias("c1").unwrap().to_vec();
    for (x, y) in b1.iter().zip(&b2) {
        assert!((y - x * 0.5).abs() < 1e-12);
    }
    assert_eq!(fine.steps(), 200);
    let rec = snn
        .run(&images.sample_tensor(0), &fine, &Recording::default())
        .unwrap();
    assert!(rec
        .rates
        .values()
        .all(|t| t.data().iter().all(|r| (0.0..=1.0).contains(r))));
}

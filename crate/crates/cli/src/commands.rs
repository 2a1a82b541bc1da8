use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use spikeconv::analog::{forward, ActivationRecord};
use spikeconv::analysis::{
    correlate as correlate_layers, load_dataset, map_convergence, map_csv, AnchorConfig,
};
use spikeconv::calibrator::{
    collect_stats_with, normalize_model, verify_normalization, CalibrationConfig,
};
use spikeconv::fixtures::{generate, FixtureKind, FixtureSpec};
use spikeconv::ir::{load_model, save_model, LayerKind, ModelGraph};
use spikeconv::parser::{load_raw_model, parse};
use spikeconv::snn::{build_snn, write_series_csv, RateRecord, Recording, SimConfig};
use spikeconv::{Error, Tensor};

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T> = Result<T, CliError>;

/// Bad or unreadable input: exit code 2.
fn input<T>(stage: &str, r: spikeconv::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError {
        code: 2,
        message: format!("{stage}: {e}"),
    })
}

/// Failure while processing: input-shaped problems still exit with 2,
/// everything else with 1.
fn stage<T>(stage: &str, r: spikeconv::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError {
        code: match e {
            Error::Io { .. } | Error::NonFiniteActivation { .. } => 1,
            _ => 2,
        },
        message: format!("{stage}: {e}"),
    })
}

fn usage(message: String) -> CliError {
    CliError { code: 2, message }
}

fn write_out(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => stage(
            "write",
            fs::write(p, text).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            }),
        ),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_normalized(path: &Path) -> CliResult<ModelGraph> {
    let model = input("load normalized model", load_model(path))?;
    if !model.is_normalized() {
        return Err(usage(format!(
            "{} has no normalization statistics; run convert first",
            path.display()
        )));
    }
    Ok(model)
}

fn load_parsed(path: &Path) -> CliResult<ModelGraph> {
    let raw = input("load model", load_raw_model(path))?;
    stage("parse", parse(&raw))
}

/// Loads `[H, W, C]` images or `[N, H, W, C]` batches as single samples.
fn load_images(paths: &[PathBuf], input_shape: &[usize]) -> CliResult<Vec<Tensor>> {
    let mut out = Vec::new();
    for p in paths {
        let t = input("load image", Tensor::load(p))?;
        if t.shape() == input_shape {
            out.push(t);
        } else if t.rank() == input_shape.len() + 1 && t.shape()[1..] == *input_shape {
            out.extend((0..t.batch_size()).map(|i| t.sample_tensor(i)));
        } else {
            return Err(usage(format!(
                "{}: shape {:?} does not fit model input {:?}",
                p.display(),
                t.shape(),
                input_shape
            )));
        }
    }
    Ok(out)
}

fn file_safe(id: &str) -> String {
    id.replace(['/', ':'], "_")
}

pub fn convert(model: &Path, calib: &Path, p_lo: f64, p_hi: f64, out: &Path) -> CliResult<()> {
    let raw = input("load model", load_raw_model(model))?;
    let calib = input("load calibration batch", Tensor::load(calib))?;
    let parsed = stage("parse", parse(&raw))?;
    let cfg = CalibrationConfig {
        p_lo,
        p_hi,
        ..CalibrationConfig::default()
    };
    let (stats, repaired) = stage("calibrate", collect_stats_with(&parsed, &calib, &cfg))?;
    for r in &repaired {
        eprintln!(
            "warning: {} channel {} has a degenerate range; using [{}, {}]",
            r.node, r.channel, r.epsilon, r.lambda
        );
    }
    let normalized = stage("normalize", normalize_model(&parsed, &stats))?;
    stage("write", save_model(&normalized, out))?;
    let report = stage("verify", verify_normalization(&parsed, &normalized, &calib))?;
    println!("layer,in_range_fraction,max_abs_deviation,max_rel_deviation");
    for l in &report.layers {
        println!(
            "{},{},{:e},{:e}",
            l.id, l.in_range_fraction, l.max_abs_deviation, l.max_rel_deviation
        );
    }
    eprintln!(
        "normalized {} layers; min in-range fraction {:.6}, max relative deviation {:.2e}",
        report.layers.len(),
        report.min_in_range(),
        report.max_rel_deviation()
    );
    Ok(())
}

pub struct SimulateArgs {
    pub model: PathBuf,
    pub images: Vec<PathBuf>,
    pub duration: f64,
    pub dt: f64,
    pub transient: f64,
    pub record: Vec<String>,
    pub raster_out: Option<PathBuf>,
    pub rates_out: Option<PathBuf>,
    pub series_out: Option<PathBuf>,
    pub sample_every: usize,
}

pub fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let model = load_normalized(&a.model)?;
    let images = load_images(&a.images, &model.input_shape)?;
    let config = SimConfig {
        dt: a.dt,
        duration: a.duration,
        v_th: 1.0,
        transient: a.transient,
    };
    input("config", config.validate())?;
    let mut snn = stage("build", build_snn(&model, &config))?;
    let recording = Recording {
        layers: a.record.clone(),
        raster: a.raster_out.is_some(),
        sample_every: a.series_out.as_ref().map(|_| a.sample_every.max(1)),
    };
    if let Some(dir) = &a.raster_out {
        stage(
            "write",
            fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            }),
        )?;
    }
    let mut csv = String::from("image,node,index,rate\n");
    for (i, img) in images.iter().enumerate() {
        let rec = stage("simulate", snn.run(img, &config, &recording))?;
        for id in &rec.layers {
            for (k, r) in rec.rates[id].data().iter().enumerate() {
                let _ = writeln!(csv, "{i},{id},{k},{r}");
            }
        }
        if let Some(dir) = &a.raster_out {
            for (id, raster) in &rec.rasters {
                let name = format!("image{i:04}_{}.raster", file_safe(id));
                stage("write", raster.save(dir.join(name)))?;
            }
        }
        if let Some(path) = &a.series_out {
            let path = if images.len() == 1 {
                path.clone()
            } else {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("series");
                path.with_file_name(format!("{stem}_{i:04}.csv"))
            };
            stage("write", write_series_csv(&rec.series, &rec.layers, path))?;
        }
    }
    write_out(a.rates_out.as_deref(), &csv)
}

pub struct CorrelateArgs {
    pub model: PathBuf,
    pub normalized: PathBuf,
    pub image: PathBuf,
    pub duration: f64,
    pub at: Vec<f64>,
    pub transient: f64,
    pub out: Option<PathBuf>,
    pub scatter_out: Option<PathBuf>,
    pub self_check: bool,
}

pub fn correlate(a: &CorrelateArgs) -> CliResult<()> {
    let parsed = load_parsed(&a.model)?;
    let normalized = load_normalized(&a.normalized)?;
    let images = load_images(std::slice::from_ref(&a.image), &normalized.input_shape)?;
    let [image] = images.as_slice() else {
        return Err(usage(format!(
            "{} must hold exactly one image",
            a.image.display()
        )));
    };
    for &t in &a.at {
        if t > a.duration {
            return Err(usage(format!("--at {t} is past --duration {}", a.duration)));
        }
        input(
            &format!("--at {t}"),
            SimConfig::new(t).with_transient(a.transient).validate(),
        )?;
    }
    let batch = image
        .clone()
        .reshape([&[1], image.shape()].concat())
        .expect("same length");
    let check = stage("verify", verify_normalization(&parsed, &normalized, &batch))?;
    eprintln!(
        "normalized vs original: max relative deviation {:.2e}",
        check.max_rel_deviation()
    );
    let analog_batch = stage("analog", forward(&normalized, &batch))?;
    let layers: Vec<String> = normalized
        .nodes
        .iter()
        .filter(|n| n.kind != LayerKind::Input)
        .map(|n| n.id.clone())
        .collect();
    let mut analog = ActivationRecord::default();
    for id in &layers {
        analog.insert(
            id.clone(),
            analog_batch.get(id).expect("recorded").sample_tensor(0),
        );
    }
    let mut snn = stage("build", build_snn(&normalized, &SimConfig::default()))?;
    let recording = Recording {
        layers: layers.clone(),
        ..Recording::default()
    };
    if let Some(dir) = &a.scatter_out {
        stage(
            "write",
            fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            }),
        )?;
    }
    let mut csv = String::from("time_ms,layer,pearson,neurons\n");
    for &t in &a.at {
        let rec = if a.self_check {
            RateRecord {
                rates: layers
                    .iter()
                    .map(|id| {
                        let x = analog.get(id).expect("recorded");
                        let clipped = x.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
                        (
                            id.clone(),
                            Tensor::new(x.shape().to_vec(), clipped).expect("shape"),
                        )
                    })
                    .collect(),
                layers: layers.clone(),
                ..RateRecord::default()
            }
        } else {
            let config = SimConfig::new(t).with_transient(a.transient);
            stage("simulate", snn.run(image, &config, &recording))?
        };
        let report = stage("correlate", correlate_layers(&analog, &rec, &layers, t))?;
        for l in &report.layers {
            let r = l.pearson.map_or("undefined".to_string(), |r| r.to_string());
            let _ = writeln!(csv, "{t},{},{r},{}", l.layer, l.rates.len());
        }
        if let Some(dir) = &a.scatter_out {
            stage(
                "write",
                report.write_scatter_csv(dir.join(format!("scatter_{t}ms.csv"))),
            )?;
        }
    }
    write_out(a.out.as_deref(), &csv)
}

pub struct EvaluateArgs {
    pub model: PathBuf,
    pub normalized: PathBuf,
    pub dataset: PathBuf,
    pub duration: f64,
    pub sample_every: f64,
    pub anchors: PathBuf,
    pub transient: f64,
    pub iou: f64,
    pub out: Option<PathBuf>,
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let parsed = load_parsed(&a.model)?;
    let normalized = load_normalized(&a.normalized)?;
    let dataset = input("load dataset", load_dataset(&a.dataset))?;
    if dataset.is_empty() {
        return Err(usage(format!("{} lists no images", a.dataset.display())));
    }
    let anchors = input("load anchors", AnchorConfig::load_json(&a.anchors))?;
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(usage(format!("--iou {} outside (0, 1]", a.iou)));
    }
    let config = SimConfig::new(a.duration).with_transient(a.transient);
    input("config", config.validate())?;
    let snn = stage("build", build_snn(&normalized, &config))?;
    let series = stage(
        "evaluate",
        map_convergence(
            &snn,
            &parsed,
            &dataset,
            &config,
            a.sample_every,
            &anchors,
            a.iou,
        ),
    )?;
    if let Some(last) = series.points.last() {
        eprintln!(
            "ANN mAP {:.4}; SNN mAP {:.4} at {} ms",
            series.ann.map, last.report.map, last.time_ms
        );
    }
    write_out(a.out.as_deref(), &map_csv(&series))
}

pub fn gen_fixtures(
    kind: &str,
    seed: u64,
    count: Option<usize>,
    image_size: Option<usize>,
    out_dir: &Path,
) -> CliResult<()> {
    let kind: FixtureKind = input("--kind", kind.parse())?;
    let mut spec = FixtureSpec::new(kind, seed);
    if let Some(c) = count {
        spec.count = c;
    }
    if let Some(s) = image_size {
        spec.image_size = s;
    }
    let fixture = input("generate", generate(&spec))?;
    stage("write", fixture.write(out_dir))?;
    eprintln!(
        "wrote {kind} (seed {seed}, {} samples, {}px) to {}",
        spec.count,
        spec.image_size,
        out_dir.display()
    );
    Ok(())
}

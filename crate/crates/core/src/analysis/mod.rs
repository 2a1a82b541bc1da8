//! Turning rates back into activations and measuring how well they agree.

mod detection;
mod map;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::analog::ActivationRecord;
use crate::calibrator::ChannelStats;
use crate::error::{Error, Result};
use crate::snn::RateRecord;
use crate::tensor::Tensor;

pub use detection::{decode_detections, iou, nms, AnchorConfig, AnchorLevel, BBox, Detection};
pub use map::{
    detect_analog, detect_from_rates, evaluate_map, load_dataset, map_convergence, map_csv,
    save_dataset, write_map_csv, Annotation, ClassAp, Dataset, DatasetEntry, GroundTruth, MapPoint,
    MapReport, MapSeries,
};

/// Maps every recorded rate tensor back to the activation domain with
/// `a = r * (lambda - epsilon) + epsilon`, per channel.
pub fn denormalize(rates: &RateRecord, stats: &ChannelStats) -> Result<HashMap<String, Tensor>> {
    rates
        .rates
        .iter()
        .map(|(id, r)| Ok((id.clone(), denormalize_tensor(id, r, stats)?)))
        .collect()
}

/// Denormalizes a single tensor whose last axis is the channel axis.
pub fn denormalize_tensor(id: &str, r: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    let s = stats.get(id)?;
    let c = s.channels();
    if c == 0 || !r.len().is_multiple_of(c) {
        return Err(Error::shape(
            id,
            format!("{} values do not split into {c} channels", r.len()),
        ));
    }
    let data = r
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| s.denormalize(k % c, v))
        .collect();
    Tensor::new(r.shape().to_vec(), data)
}

/// Pearson correlation of one layer.
#[derive(Clone, Debug)]
pub struct LayerCorrelation {
    pub layer: String,
    /// `None` when either side has zero variance.
    pub pearson: Option<f64>,
    /// Normalized analog activations, clipped to `[0, 1]`.
    pub analog: Vec<f32>,
    pub rates: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct CorrelationReport {
    pub time_ms: f64,
    pub layers: Vec<LayerCorrelation>,
}

impl CorrelationReport {
    pub fn layer(&self, id: &str) -> Option<&LayerCorrelation> {
        self.layers.iter().find(|l| l.layer == id)
    }

    /// Rows of `layer,index,analog,rate`.
    pub fn write_scatter_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = String::from("layer,index,analog,rate\n");
        for l in &self.layers {
            for (k, (a, r)) in l.analog.iter().zip(&l.rates).enumerate() {
                let _ = writeln!(s, "{},{},{},{}", l.layer, k, a, r);
            }
        }
        let path = path.as_ref();
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Pearson coefficient, or `None` if either input is constant.
pub fn pearson(x: &[f32], y: &[f32]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    if x.is_empty() {
        return None;
    }
    let mx = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let my = y.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (f64::from(a) - mx, f64::from(b) - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlates the rates of each listed layer with the normalized analog
/// activations of the same image.
///
/// `analog` must hold activations of the normalized model for exactly one
/// sample (a leading batch axis of 1 is accepted). They are clipped to
/// `[0, 1]` before the comparison so that saturation counts as error.
pub fn correlate(
    analog: &ActivationRecord,
    rates: &RateRecord,
    layers: &[String],
    time_ms: f64,
) -> Result<CorrelationReport> {
    let mut out = Vec::with_capacity(layers.len());
    for id in layers {
        let a = analog
            .get(id)
            .ok_or_else(|| Error::Input(format!("no analog activations for layer '{id}'")))?;
        let r = rates
            .rate(id)
            .ok_or_else(|| Error::Input(format!("no rates recorded for layer '{id}'")))?;
        if a.len() != r.len() {
            return Err(Error::shape(
                id,
                format!("analog {:?} vs rates {:?}", a.shape(), r.shape()),
            ));
        }
        let clipped: Vec<f32> = a.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        out.push(LayerCorrelation {
            layer: id.clone(),
            pearson: pearson(&clipped, r.data()),
            analog: clipped,
            rates: r.data().to_vec(),
        });
    }
    Ok(CorrelationReport {
        time_ms,
        layers: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrator::NodeStats;
    use std::collections::BTreeMap;

    fn record(id: &str, t: Tensor) -> RateRecord {
        RateRecord {
            rates: HashMap::from([(id.to_string(), t)]),
            layers: vec![id.to_string()],
            ..RateRecord::default()
        }
    }

    fn stats(id: &str, eps: f32, lam: f32) -> ChannelStats {
        ChannelStats {
            p_lo: 0.01,
            p_hi: 99.99,
            nodes: BTreeMap::from([(
                id.to_string(),
                NodeStats {
                    epsilon: vec![eps],
                    lambda: vec![lam],
                },
            )]),
        }
    }

    #[test]
    fn denormalize_bounds() {
        let r = record("h", Tensor::scalar_vec(&[0.0]));
        assert_eq!(
            denormalize(&r, &stats("h", -1.0, 1.0)).unwrap()["h"].data(),
            &[-1.0]
        );
        let r = record("h", Tensor::scalar_vec(&[1.0]));
        assert_eq!(
            denormalize(&r, &stats("h", 0.0, 4.0)).unwrap()["h"].data(),
            &[4.0]
        );
    }

    #[test]
    fn denormalize_needs_stats() {
        let r = record("h", Tensor::scalar_vec(&[0.5]));
        assert!(matches!(
            denormalize(&r, &stats("other", 0.0, 1.0)),
            Err(Error::MissingStats(_))
        ));
    }

    #[test]
    fn pearson_extremes() {
        let a = [0.1, 0.5, 0.9, 0.3];
        let inv: Vec<f32> = a.iter().map(|v| 1.0 - v).collect();
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &inv).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &[0.2; 4]), None);
    }

    #[test]
    fn correlate_clips_and_checks_shapes() {
        let mut analog = ActivationRecord::default();
        analog.insert("h", Tensor::new(vec![1, 3], vec![-0.5, 0.5, 1.5]).unwrap());
        let rates = record("h", Tensor::scalar_vec(&[0.0, 0.5, 1.0]));
        let rep = correlate(&analog, &rates, &["h".into()], 100.0).unwrap();
        assert_eq!(rep.layers[0].analog, vec![0.0, 0.5, 1.0]);
        assert!((rep.layer("h").unwrap().pearson.unwrap() - 1.0).abs() < 1e-12);

        let rates = record("h", Tensor::scalar_vec(&[0.0, 0.5]));
        assert!(correlate(&analog, &rates, &["h".into()], 100.0).is_err());
    }
}

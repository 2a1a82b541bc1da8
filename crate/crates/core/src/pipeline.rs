//! Parse, calibrate and normalize in one call.

use crate::calibrator::{
    collect_stats_with, normalize_model, CalibrationConfig, ChannelStats, RepairedChannel,
};
use crate::error::Result;
use crate::ir::ModelGraph;
use crate::parser::{parse, RawModel};
use crate::tensor::Tensor;

/// Every artifact of a conversion.
#[derive(Clone, Debug)]
pub struct Converted {
    pub parsed: ModelGraph,
    pub stats: ChannelStats,
    pub normalized: ModelGraph,
    /// Channels whose percentile range collapsed and was replaced.
    pub repaired: Vec<RepairedChannel>,
}

pub fn convert(raw: &RawModel, calib: &Tensor, config: &CalibrationConfig) -> Result<Converted> {
    let parsed = parse(raw)?;
    let (stats, repaired) = collect_stats_with(&parsed, calib, config)?;
    let normalized = normalize_model(&parsed, &stats)?;
    Ok(Converted {
        parsed,
        stats,
        normalized,
        repaired,
    })
}

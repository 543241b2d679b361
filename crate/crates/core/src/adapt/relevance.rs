use std::path::Path;

use serde::{Deserialize, Serialize};

use super::linear::{FeatureLayout, SparseLinearModel};
use crate::error::{Error, Result};

/// Per-channel relevance: the absolute weight mass of each channel's block,
/// and its min-max normalisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub channels: Vec<String>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

pub fn relevance(model: &SparseLinearModel) -> Result<RelevanceReport> {
    let FeatureLayout::Channels { channels, c } = &model.layout else {
        return Err(Error::Domain("relevance needs a per-channel feature layout".into()));
    };
    let raw: Vec<f64> = model
        .w
        .chunks(*c)
        .map(|block| block.iter().map(|w| w.abs()).sum())
        .collect();
    Ok(RelevanceReport {
        channels: channels.clone(),
        normalized: min_max(&raw),
        raw,
    })
}

/// Min-max normalisation; all zeros when every value is equal.
pub fn min_max(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|r| (r - lo) / (hi - lo)).collect()
}

#[derive(Serialize)]
struct Row<'a> {
    channel: &'a str,
    raw: f64,
    normalized: f64,
}

impl RelevanceReport {
    /// Channel indices by decreasing normalised relevance (stable).
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.raw.len()).collect();
        idx.sort_by(|&a, &b| self.normalized[b].total_cmp(&self.normalized[a]));
        idx
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for i in self.ranking() {
            w.serialize(Row {
                channel: &self.channels[i],
                raw: self.raw[i],
                normalized: self.normalized[i],
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

use std::collections::BTreeMap;

use super::dataset::{DatasetSplit, EpisodeRecord};
use super::series::MultivariateSeries;
use crate::error::{Error, Result};
use crate::numerics::{label, Rng};

/// Keeps the first `tau` steps, zero-post-padding shorter series (mask
/// channels are set to 1 on the padding).
pub fn truncate_and_pad(series: &MultivariateSeries, tau: usize) -> MultivariateSeries {
    let mut out = series.slice(0, tau);
    out.pad_to(tau);
    out
}

/// Windows of `window` steps starting at `0, shift, 2·shift, …` while the
/// start lies inside the series; tails are zero-padded.
pub fn enumerate_windows(series: &MultivariateSeries, window: usize, shift: usize) -> Result<Vec<MultivariateSeries>> {
    if window == 0 || shift == 0 {
        return Err(Error::Domain("window and shift must be positive".into()));
    }
    Ok(window_starts(series.len(), shift)
        .map(|start| {
            let mut w = series.slice(start, start + window);
            w.pad_to(window);
            w
        })
        .collect())
}

pub fn window_starts(len: usize, shift: usize) -> impl Iterator<Item = usize> {
    (0..len).step_by(shift.max(1))
}

#[derive(Clone, Copy)]
pub enum EpisodeMode<'a> {
    /// Ground-truth label of the previous episode.
    Train,
    /// A prior model's probability for the previous episode.
    Test(&'a dyn Fn(&EpisodeRecord) -> Result<f64>),
}

/// Previous-episode feature for each of one patient's episodes (0 for the
/// first episode).
pub fn episode_feature(records: &[&EpisodeRecord], task: &str, mode: EpisodeMode<'_>) -> Result<Vec<f64>> {
    for w in records.windows(2) {
        if w[0].patient_id != w[1].patient_id {
            return Err(Error::Data(format!(
                "episode feature mixes patients {} and {}",
                w[0].patient_id, w[1].patient_id
            )));
        }
        if w[1].episode_index <= w[0].episode_index {
            return Err(Error::Data(format!(
                "episodes of {} are not in chronological order",
                w[0].patient_id
            )));
        }
    }
    let mut out = Vec::with_capacity(records.len());
    for (i, _) in records.iter().enumerate() {
        if i == 0 {
            out.push(0.0);
            continue;
        }
        let prev = records[i - 1];
        out.push(match mode {
            EpisodeMode::Train => f64::from(prev.label(task)?),
            EpisodeMode::Test(predict) => predict(prev)?,
        });
    }
    Ok(out)
}

/// [`episode_feature`] over an arbitrary record set: records are grouped by
/// patient and the result is aligned with the input order.
pub fn episode_features(records: &[EpisodeRecord], task: &str, mode: EpisodeMode<'_>) -> Result<Vec<f64>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(&r.patient_id).or_default().push(i);
    }
    let mut out = vec![0.0; records.len()];
    for idx in groups.values_mut() {
        idx.sort_by_key(|&i| records[i].episode_index);
        let group: Vec<&EpisodeRecord> = idx.iter().map(|&i| &records[i]).collect();
        for (&i, v) in idx.iter().zip(episode_feature(&group, task, mode)?) {
            out[i] = v;
        }
    }
    Ok(out)
}

/// Subsamples training and validation to `⌈fraction·N⌉` records each,
/// stratified by the label of `task`. The test part is untouched.
pub fn subsample_training(split: &DatasetSplit, task: &str, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Domain(format!("training fraction {fraction} outside (0, 1]")));
    }
    let mut out = split.clone();
    if fraction == 1.0 {
        return Ok(out);
    }
    let rng = Rng::new(seed).derive(&[label(task)]);
    out.train = stratified(&split.train, task, fraction, &mut rng.derive(&[0]))?;
    out.validation = stratified(&split.validation, task, fraction, &mut rng.derive(&[1]))?;
    let pos = out.train.iter().filter(|r| r.labels.get(task) == Some(&1)).count();
    if pos == 0 || pos == out.train.len() {
        return Err(Error::Domain(format!(
            "fraction {fraction} leaves a single-class training set for '{task}'"
        )));
    }
    Ok(out)
}

fn stratified(records: &[EpisodeRecord], task: &str, fraction: f64, rng: &mut Rng) -> Result<Vec<EpisodeRecord>> {
    let n = records.len();
    if n == 0 {
        return Ok(vec![]);
    }
    let total = ((fraction * n as f64).ceil() as usize).min(n);
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if r.label(task)? == 1 {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    let mut k_pos = ((total as f64) * pos.len() as f64 / n as f64).round() as usize;
    if k_pos == 0 && !pos.is_empty() && total >= 2 {
        k_pos = 1;
    }
    k_pos = k_pos.min(pos.len());
    let mut k_neg = (total - k_pos).min(neg.len());
    if k_pos + k_neg < total {
        k_pos = (total - k_neg).min(pos.len());
    }
    if k_neg == 0 && !neg.is_empty() && k_pos > 1 {
        k_pos -= 1;
        k_neg = 1;
    }
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    let mut keep: Vec<usize> = pos[..k_pos].iter().chain(&neg[..k_neg]).copied().collect();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| records[i].clone()).collect())
}

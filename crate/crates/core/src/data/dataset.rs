use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::series::MultivariateSeries;
use crate::artifact::{read_json, write_json};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// One hospital stay of one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub patient_id: String,
    /// 1-based, chronological within a patient.
    pub episode_index: u32,
    pub series: MultivariateSeries,
    pub labels: BTreeMap<String, u8>,
}

impl EpisodeRecord {
    pub fn id(&self) -> String {
        format!("{}_ep{}", self.patient_id, self.episode_index)
    }

    pub fn label(&self, task: &str) -> Result<u8> {
        self.labels
            .get(task)
            .copied()
            .ok_or_else(|| Error::Data(format!("episode {} has no label for task '{task}'", self.id())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Where a dataset came from; written into every bundle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub source: String,
    pub seed: u64,
    pub config_hash: String,
    /// Generator configuration or loader settings, verbatim.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<EpisodeRecord>,
    pub validation: Vec<EpisodeRecord>,
    pub test: Vec<EpisodeRecord>,
    /// Every task with labels in this dataset.
    pub tasks: Vec<String>,
    /// Tasks held out from pre-training.
    pub target_tasks: Vec<String>,
    pub channel_names: Vec<String>,
    pub mask_channels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl DatasetSplit {
    pub fn empty(channel_names: Vec<String>, mask_channels: Vec<usize>, tasks: Vec<String>) -> Self {
        Self {
            train: vec![],
            validation: vec![],
            test: vec![],
            tasks,
            target_tasks: vec![],
            channel_names,
            mask_channels,
            meta: DatasetMeta {
                schema_version: SCHEMA_VERSION,
                ..Default::default()
            },
        }
    }

    pub fn part(&self, split: Split) -> &[EpisodeRecord] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn source_tasks(&self) -> Vec<String> {
        self.tasks
            .iter()
            .filter(|t| !self.target_tasks.contains(t))
            .cloned()
            .collect()
    }

    /// Checks patient disjointness, unique episode indices and that the
    /// source/target task partition is a partition.
    pub fn validate(&self) -> Result<()> {
        let mut owner: HashMap<&str, Split> = HashMap::new();
        let mut seen: BTreeSet<(&str, u32)> = BTreeSet::new();
        for split in [Split::Train, Split::Validation, Split::Test] {
            for r in self.part(split) {
                if let Some(prev) = owner.insert(&r.patient_id, split) {
                    if prev != split {
                        return Err(Error::Data(format!(
                            "patient {} appears in both {prev:?} and {split:?}",
                            r.patient_id
                        )));
                    }
                }
                if !seen.insert((&r.patient_id, r.episode_index)) {
                    return Err(Error::Data(format!("duplicate episode {}", r.id())));
                }
                if r.series.n_channels() != self.channel_names.len() {
                    return Err(Error::Data(format!(
                        "episode {} has {} channels, dataset {}",
                        r.id(),
                        r.series.n_channels(),
                        self.channel_names.len()
                    )));
                }
            }
        }
        for t in &self.target_tasks {
            if !self.tasks.contains(t) {
                return Err(Error::Data(format!("target task '{t}' is not a dataset task")));
            }
        }
        Ok(())
    }

    /// The source dataset for pre-training: train and validation records
    /// restricted to patients with no positive label on any target task.
    /// The test part is dropped.
    pub fn source_view(&self) -> Result<DatasetSplit> {
        let leaky = |records: &[EpisodeRecord]| -> BTreeSet<String> {
            records
                .iter()
                .filter(|r| self.target_tasks.iter().any(|t| r.labels.get(t) == Some(&1)))
                .map(|r| r.patient_id.clone())
                .collect()
        };
        let mut excluded = leaky(&self.train);
        excluded.extend(leaky(&self.validation));
        let keep = |records: &[EpisodeRecord]| -> Vec<EpisodeRecord> {
            records
                .iter()
                .filter(|r| !excluded.contains(&r.patient_id))
                .cloned()
                .collect()
        };
        let out = DatasetSplit {
            train: keep(&self.train),
            validation: keep(&self.validation),
            test: vec![],
            tasks: self.source_tasks(),
            target_tasks: vec![],
            channel_names: self.channel_names.clone(),
            mask_channels: self.mask_channels.clone(),
            meta: self.meta.clone(),
        };
        for r in out.train.iter().chain(&out.validation) {
            for t in &self.target_tasks {
                if r.labels.get(t) == Some(&1) {
                    return Err(Error::Data(format!("leakage: {} positive for target '{t}'", r.id())));
                }
            }
        }
        Ok(out)
    }

    /// Writes `index.json` plus `series.csv` (`episode,hour,<channels>`).
    pub fn save_bundle(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        let path = dir.join("series.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["episode".to_string(), "hour".to_string()];
        header.extend(self.channel_names.iter().cloned());
        w.write_record(&header)?;
        for split in [Split::Train, Split::Validation, Split::Test] {
            for r in self.part(split) {
                let id = r.id();
                for t in 0..r.series.len() {
                    let mut row = vec![id.clone(), t.to_string()];
                    row.extend(r.series.step(t).iter().map(|v| v.to_string()));
                    w.write_record(&row)?;
                }
                entries.push(BundleEntry {
                    id,
                    patient_id: r.patient_id.clone(),
                    episode_index: r.episode_index,
                    split,
                    len: r.series.len(),
                    labels: r.labels.clone(),
                });
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let index = BundleIndex {
            schema_version: SCHEMA_VERSION,
            meta: self.meta.clone(),
            tasks: self.tasks.clone(),
            target_tasks: self.target_tasks.clone(),
            channel_names: self.channel_names.clone(),
            mask_channels: self.mask_channels.clone(),
            episodes: entries,
        };
        write_json(dir.join("index.json"), &index)
    }

    pub fn load_bundle(dir: impl AsRef<Path>) -> Result<DatasetSplit> {
        let dir = dir.as_ref();
        let index_path = dir.join("index.json");
        if !index_path.exists() {
            return Err(Error::Config(format!("no dataset bundle at {}", dir.display())));
        }
        let index: BundleIndex = read_json(&index_path)?;
        if index.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "bundle schema version {} is not supported",
                index.schema_version
            )));
        }
        let n = index.channel_names.len();
        let path = dir.join("series.csv");
        let mut rdr = csv::Reader::from_path(&path)?;
        let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |msg: String| Error::Parse {
                file: path.clone(),
                line: line + 2,
                msg,
            };
            if rec.len() != n + 2 {
                return Err(bad(format!("expected {} fields, found {}", n + 2, rec.len())));
            }
            let buf = rows.entry(rec[0].to_string()).or_default();
            for f in rec.iter().skip(2) {
                buf.push(f.parse::<f64>().map_err(|e| bad(format!("'{f}': {e}")))?);
            }
        }
        let mut out = DatasetSplit::empty(index.channel_names.clone(), index.mask_channels.clone(), index.tasks);
        out.target_tasks = index.target_tasks;
        out.meta = index.meta;
        for e in index.episodes {
            let values = rows
                .remove(&e.id)
                .ok_or_else(|| Error::Data(format!("bundle has no series for {}", e.id)))?;
            let series = MultivariateSeries::new(index.channel_names.clone(), index.mask_channels.clone(), e.len, values)?;
            let rec = EpisodeRecord {
                patient_id: e.patient_id,
                episode_index: e.episode_index,
                series,
                labels: e.labels,
            };
            match e.split {
                Split::Train => out.train.push(rec),
                Split::Validation => out.validation.push(rec),
                Split::Test => out.test.push(rec),
            }
        }
        out.validate()?;
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct BundleEntry {
    id: String,
    patient_id: String,
    episode_index: u32,
    split: Split,
    len: usize,
    labels: BTreeMap<String, u8>,
}

#[derive(Serialize, Deserialize)]
struct BundleIndex {
    schema_version: u32,
    meta: DatasetMeta,
    tasks: Vec<String>,
    target_tasks: Vec<String>,
    channel_names: Vec<String>,
    mask_channels: Vec<usize>,
    episodes: Vec<BundleEntry>,
}

/// Binary labels of `task` for each record, in order.
pub fn labels_for(records: &[EpisodeRecord], task: &str) -> Result<Vec<u8>> {
    records.iter().map(|r| r.label(task)).collect()
}

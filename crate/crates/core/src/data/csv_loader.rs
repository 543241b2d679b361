//! Per-episode CSV ingestion in the clinical benchmark layout.
//!
//! Each episode is a CSV file with header `Hours,<variable names...>` and
//! one row per observation. Rows are binned to whole hours. Categorical
//! variables are one-hot expanded and every raw variable gets a mask
//! channel that is 1 wherever its value was imputed.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetMeta, DatasetSplit, EpisodeRecord, Split, SCHEMA_VERSION};
use super::series::MultivariateSeries;
use crate::artifact::{config_hash, read_json};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VariableKind {
    Continuous,
    /// `default` is used when no earlier value can be carried forward.
    Categorical { categories: Vec<String>, default: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: VariableKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub variables: Vec<VariableSpec>,
}

impl Schema {
    /// 17 physiological variables (12 continuous, 5 categorical) which
    /// expand to 59 value channels and 17 mask channels.
    pub fn benchmark() -> Self {
        let cont = |n: &str| VariableSpec {
            name: n.into(),
            kind: VariableKind::Continuous,
        };
        let cat = |n: &str, cats: &[&str], default: &str| VariableSpec {
            name: n.into(),
            kind: VariableKind::Categorical {
                categories: cats.iter().map(|c| c.to_string()).collect(),
                default: default.into(),
            },
        };
        Schema {
            variables: vec![
                cat("Capillary refill rate", &["0.0", "1.0"], "0.0"),
                cont("Diastolic blood pressure"),
                cont("Fraction inspired oxygen"),
                cat(
                    "Glascow coma scale eye opening",
                    &["To Pain", "3 To speech", "1 No Response", "4 Spontaneously", "None", "To Speech", "Spontaneously", "2 To pain"],
                    "4 Spontaneously",
                ),
                cat(
                    "Glascow coma scale motor response",
                    &[
                        "1 No Response", "3 Abnorm flexion", "Abnormal extension", "No response", "4 Flex-withdraws", "Localizes Pain",
                        "Flex-withdraws", "Obeys Commands", "Abnormal Flexion", "6 Obeys Commands", "5 Localizes Pain", "2 Abnorm extensn",
                    ],
                    "6 Obeys Commands",
                ),
                cat(
                    "Glascow coma scale total",
                    &["11", "10", "13", "12", "15", "14", "3", "5", "4", "7", "6", "9", "8"],
                    "15",
                ),
                cat(
                    "Glascow coma scale verbal response",
                    &[
                        "1 No Response", "No Response", "Confused", "Inappropriate Words", "Oriented", "No Response-ETT", "5 Oriented",
                        "Incomprehensible sounds", "1.0 ET/Trach", "4 Confused", "2 Incomp sounds", "3 Inapprop words",
                    ],
                    "5 Oriented",
                ),
                cont("Glucose"),
                cont("Heart Rate"),
                cont("Height"),
                cont("Mean blood pressure"),
                cont("Oxygen saturation"),
                cont("Respiratory rate"),
                cont("Systolic blood pressure"),
                cont("Temperature"),
                cont("Weight"),
                cont("pH"),
            ],
        }
    }

    /// Expanded channel names (values first, then one mask per variable)
    /// and the indices of the mask channels.
    pub fn channels(&self) -> (Vec<String>, Vec<usize>) {
        let mut names = Vec::new();
        for v in &self.variables {
            match &v.kind {
                VariableKind::Continuous => names.push(v.name.clone()),
                VariableKind::Categorical { categories, .. } => {
                    names.extend(categories.iter().map(|c| format!("{}->{}", v.name, c)))
                }
            }
        }
        let first_mask = names.len();
        names.extend(self.variables.iter().map(|v| format!("mask->{}", v.name)));
        let masks = (first_mask..names.len()).collect();
        (names, masks)
    }

    fn width(v: &VariableSpec) -> usize {
        match &v.kind {
            VariableKind::Continuous => 1,
            VariableKind::Categorical { categories, .. } => categories.len(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaRef {
    Named(String),
    Inline(Schema),
}

impl SchemaRef {
    pub fn resolve(&self) -> Result<Schema> {
        match self {
            SchemaRef::Named(n) if n == "benchmark" => Ok(Schema::benchmark()),
            SchemaRef::Named(n) => Err(Error::Config(format!("unknown schema '{n}'"))),
            SchemaRef::Inline(s) => Ok(s.clone()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEpisode {
    pub file: PathBuf,
    pub patient_id: String,
    pub episode_index: u32,
    pub split: Split,
    pub labels: BTreeMap<String, u8>,
}

/// JSON manifest listing every episode file, its split and its labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: SchemaRef,
    pub tasks: Vec<String>,
    #[serde(default)]
    pub target_tasks: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    pub episodes: Vec<ManifestEpisode>,
}

/// Parses every episode listed in the manifest (file paths relative to
/// `root`). Records are ordered by `(patient_id, episode_index)` inside
/// each split.
pub fn load_csv_dataset(root: impl AsRef<Path>, manifest_path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let root = root.as_ref();
    let manifest_path = manifest_path.as_ref();
    if !manifest_path.exists() {
        let has_csv = fs::read_dir(root)
            .map(|it| it.flatten().any(|e| e.path().extension().is_some_and(|x| x == "csv")))
            .unwrap_or(false);
        if has_csv {
            return Err(Error::Config(format!("manifest {} not found", manifest_path.display())));
        }
        warn!("{} holds no episodes; returning an empty dataset", root.display());
        let (names, masks) = Schema::benchmark().channels();
        return Ok(DatasetSplit::empty(names, masks, vec![]));
    }
    let manifest: Manifest = read_json(manifest_path)?;
    let schema = manifest.schema.resolve()?;
    let (names, masks) = schema.channels();
    let mut out = DatasetSplit::empty(names, masks, manifest.tasks.clone());
    out.target_tasks = manifest.target_tasks.clone();
    out.meta = DatasetMeta {
        schema_version: SCHEMA_VERSION,
        source: "csv".into(),
        seed: manifest.seed,
        config_hash: config_hash(&manifest),
        config: serde_json::to_value(&schema)?,
    };
    if manifest.episodes.is_empty() {
        warn!("manifest {} lists no episodes", manifest_path.display());
        return Ok(out);
    }

    let parsed: Vec<Result<(Split, EpisodeRecord)>> = manifest
        .episodes
        .par_iter()
        .map(|e| {
            for t in e.labels.keys() {
                if !manifest.tasks.contains(t) {
                    return Err(Error::Data(format!("{}: label '{t}' not in task manifest", e.file.display())));
                }
            }
            let series = parse_episode_csv(&root.join(&e.file), &schema)?;
            Ok((
                e.split,
                EpisodeRecord {
                    patient_id: e.patient_id.clone(),
                    episode_index: e.episode_index,
                    series,
                    labels: e.labels.clone(),
                },
            ))
        })
        .collect();
    for p in parsed {
        let (split, rec) = p?;
        match split {
            Split::Train => out.train.push(rec),
            Split::Validation => out.validation.push(rec),
            Split::Test => out.test.push(rec),
        }
    }
    for part in [&mut out.train, &mut out.validation, &mut out.test] {
        part.sort_by(|a, b| (&a.patient_id, a.episode_index).cmp(&(&b.patient_id, b.episode_index)));
    }
    out.validate()?;
    Ok(out)
}

/// Reads one episode file into an hourly series with imputation masks.
pub fn parse_episode_csv(path: &Path, schema: &Schema) -> Result<MultivariateSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut records = rdr.records();
    let parse_err = |line: usize, msg: String| Error::Parse {
        file: path.to_path_buf(),
        line,
        msg,
    };
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(parse_err(1, "missing header".into())),
    };
    if header.get(0).map(str::trim) != Some("Hours") {
        return Err(parse_err(1, "first column must be 'Hours'".into()));
    }
    let by_name: HashMap<&str, usize> = schema
        .variables
        .iter()
        .enumerate()
        .map(|(i, v)| (v.name.as_str(), i))
        .collect();
    let mut columns = Vec::with_capacity(header.len() - 1);
    for name in header.iter().skip(1) {
        let name = name.trim();
        let idx = by_name
            .get(name)
            .ok_or_else(|| Error::Data(format!("{}: unknown channel '{name}'", path.display())))?;
        columns.push(*idx);
    }

    // raw[var][hour] = observed value (as text for categoricals)
    let nvar = schema.variables.len();
    let mut observed: Vec<BTreeMap<usize, String>> = vec![BTreeMap::new(); nvar];
    let mut max_hour: Option<usize> = None;
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let hours: f64 = rec[0]
            .trim()
            .parse()
            .map_err(|e| parse_err(line, format!("bad Hours value '{}': {e}", &rec[0])))?;
        if !hours.is_finite() || hours < 0.0 {
            return Err(parse_err(line, format!("Hours must be a non-negative number, got {hours}")));
        }
        let bin = hours.floor() as usize;
        max_hour = Some(max_hour.map_or(bin, |m: usize| m.max(bin)));
        for (field, &var) in rec.iter().skip(1).zip(&columns) {
            let field = field.trim();
            if field.is_empty() {
                continue;
            }
            match &schema.variables[var].kind {
                VariableKind::Continuous => {
                    let v: f64 = field
                        .parse()
                        .map_err(|e| parse_err(line, format!("'{field}': {e}")))?;
                    if !v.is_finite() {
                        return Err(parse_err(line, format!("non-finite value '{field}'")));
                    }
                }
                VariableKind::Categorical { categories, .. } => {
                    if !categories.iter().any(|c| c == field) {
                        return Err(Error::Data(format!(
                            "{}:{line}: unknown category '{field}' for '{}'",
                            path.display(),
                            schema.variables[var].name
                        )));
                    }
                }
            }
            observed[var].insert(bin, field.to_string());
        }
    }
    let len = max_hour.map_or(0, |m| m + 1);
    let (names, masks) = schema.channels();
    let n = names.len();
    let mut values = vec![0.0; len * n];
    let mut offset = 0;
    for (var, spec) in schema.variables.iter().enumerate() {
        let mask_col = masks[var];
        let mut last: Option<&String> = None;
        for t in 0..len {
            let row = &mut values[t * n..(t + 1) * n];
            let here = observed[var].get(&t);
            if here.is_some() {
                last = here;
            } else {
                row[mask_col] = 1.0;
            }
            match &spec.kind {
                VariableKind::Continuous => {
                    row[offset] = last.map_or(0.0, |s| s.parse().expect("validated above"));
                }
                VariableKind::Categorical { categories, default } => {
                    let cat = last.unwrap_or(default);
                    let k = categories.iter().position(|c| c == cat).ok_or_else(|| {
                        Error::Config(format!("default '{default}' is not a category of '{}'", spec.name))
                    })?;
                    row[offset + k] = 1.0;
                }
            }
        }
        offset += Schema::width(spec);
    }
    MultivariateSeries::new(names, masks, len, values)
}

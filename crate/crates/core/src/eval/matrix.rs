//! Runs the cross product of methods, tasks, training fractions and seeds.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{aggregate_auroc, sparsity, Aggregation, MetricSet, TaskScores};
use super::plan::{DataSpec, ExperimentPlan, Method};
use crate::adapt::{finetune, tune_penalty, FeatureLayout, GridPoint, LossKind, RegKind, SparseLinearModel};
use crate::artifact::{config_hash, write_json, Checkpoint, FORMAT_VERSION};
use crate::autoencoder::{extract_features_multichannel, train_autoencoder, ChannelScaler, Seq2SeqParams};
use crate::data::synth::univariate_corpus;
use crate::data::{
    enumerate_windows, episode_features, labels_for, subsample_training, synth_generate, truncate_and_pad, DatasetSplit,
    EpisodeMode, EpisodeRecord, MultivariateSeries,
};
use crate::error::{Error, Result};
use crate::multitask::{hn_extract, train_multitask, train_rnnc_baseline, HealthNetModel, LayerSelection};
use crate::numerics::{derive_seed, label, Rng};
use crate::rnn::GruStackParams;

pub const AUTOENCODER_KIND: &str = "autoencoder";
pub const HEALTHNET_KIND: &str = "healthnet";

/// One row of the experiment report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: Method,
    pub task: String,
    pub fraction: f64,
    pub seed: u64,
    pub metrics: MetricSet,
    /// Fraction of linear weights with `|w| < 0.001`, for linear methods.
    pub sparsity: Option<f64>,
    pub selected_penalty: Option<f64>,
    pub n_train: usize,
    pub n_validation: usize,
    pub config_hash: String,
}

/// Multi-task aggregates over the evaluated tasks for one (method, fraction,
/// seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub fraction: f64,
    pub seed: u64,
    pub micro_auroc: Option<f64>,
    pub macro_auroc: Option<f64>,
    /// Per-task AUROCs weighted by each task's number of positives.
    pub weighted_auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub fraction: f64,
    pub mean_auroc: f64,
    pub std_auroc: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub method: Method,
    pub task: String,
    pub fraction: f64,
    pub seed: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub format_version: u32,
    pub config_hash: String,
    pub dataset_hash: String,
    pub rows: Vec<ExperimentReport>,
    pub aggregates: Vec<AggregateRow>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Clone, Debug)]
pub struct MatrixOutput {
    pub report: MatrixReport,
    /// Wall-clock per cell; kept apart from the report so that the report is
    /// reproducible bit for bit.
    pub timings: Vec<Timing>,
}

/// Encoder plus the channel scaler fitted on the dataset it is applied to.
#[derive(Clone, Debug)]
pub struct TimeNetExtractor {
    pub encoder: GruStackParams,
    pub scaler: ChannelScaler,
    pub tau: usize,
    pub shift: usize,
}

impl TimeNetExtractor {
    /// Features of the first `tau` steps.
    pub fn first_window(&self, x: &MultivariateSeries) -> Result<Vec<f64>> {
        extract_features_multichannel(&truncate_and_pad(&self.scaler.apply(x)?, self.tau), &self.encoder)
    }

    /// Features of every `tau`-step window at the configured shift.
    pub fn all_windows(&self, x: &MultivariateSeries) -> Result<Vec<Vec<f64>>> {
        enumerate_windows(&self.scaler.apply(x)?, self.tau, self.shift)?
            .iter()
            .map(|w| extract_features_multichannel(w, &self.encoder))
            .collect()
    }

    pub fn layout(&self, channels: &[String]) -> FeatureLayout {
        FeatureLayout::Channels {
            channels: channels.to_vec(),
            c: self.encoder.total_width(),
        }
    }
}

/// Mean, standard deviation, minimum, maximum, first and last value of every
/// channel over the first `tau` steps.
pub fn stat_features(x: &MultivariateSeries, tau: usize) -> Vec<f64> {
    let len = x.len().min(tau);
    let mut out = Vec::with_capacity(6 * x.n_channels());
    for c in 0..x.n_channels() {
        let col: Vec<f64> = x.channel(c).into_iter().take(len).collect();
        if col.is_empty() {
            out.extend([0.0; 6]);
            continue;
        }
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let min = col.iter().copied().fold(f64::INFINITY, f64::min);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.extend([mean, sd, min, max, col[0], col[col.len() - 1]]);
    }
    out
}

/// The LASSO fit shared by the matrix and the `train-lasso` command.
pub fn fit_timenet_lasso(
    plan: &ExperimentPlan,
    train: (&[Vec<f64>], &[u8]),
    validation: (&[Vec<f64>], &[u8]),
    layout: Option<FeatureLayout>,
) -> Result<(SparseLinearModel, Vec<GridPoint>)> {
    tune_penalty(LossKind::Squared, train, validation, &plan.alpha_grid.values(), layout, &plan.solver, false)
}

/// The L1 logistic fit shared by the matrix and the `train-lr` command.
pub fn fit_l1_logreg(
    plan: &ExperimentPlan,
    train: (&[Vec<f64>], &[u8]),
    validation: (&[Vec<f64>], &[u8]),
) -> Result<(SparseLinearModel, Vec<GridPoint>)> {
    let grid = plan.lambda_scale.penalties(&plan.lambda_grid, train.0.len());
    tune_penalty(LossKind::Logistic, train, validation, &grid, None, &plan.solver, true)
}

pub fn build_dataset(plan: &ExperimentPlan) -> Result<DatasetSplit> {
    match &plan.data {
        DataSpec::Synthetic { config } => synth_generate(config),
        DataSpec::Bundle { path } => DatasetSplit::load_bundle(path),
    }
}

fn load_checkpoint<T: Serialize + serde::de::DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    Ok(Checkpoint::<T>::load(path, kind)?.model)
}

/// The autoencoder of a plan: loaded from its checkpoint or trained on the
/// synthetic univariate corpus.
pub fn pretrain_autoencoder(plan: &ExperimentPlan) -> Result<Seq2SeqParams> {
    if let Some(p) = &plan.checkpoints.autoencoder {
        return load_checkpoint(p, AUTOENCODER_KIND);
    }
    let corpus = univariate_corpus(
        plan.corpus.n_series,
        plan.corpus.min_len,
        plan.corpus.max_len,
        derive_seed(plan.seed, &[label("corpus")]),
    );
    let mut rng = Rng::new(plan.seed).derive(&[label(AUTOENCODER_KIND)]);
    Ok(train_autoencoder(&corpus, &plan.autoencoder, &mut rng)?.params)
}

/// The multi-task network of a plan: loaded from its checkpoint or trained
/// on the source tasks with target-positive patients removed.
pub fn pretrain_healthnet(plan: &ExperimentPlan, split: &DatasetSplit) -> Result<HealthNetModel> {
    if let Some(p) = &plan.checkpoints.healthnet {
        return load_checkpoint(p, HEALTHNET_KIND);
    }
    let source = split.source_view()?;
    let tasks = split.source_tasks();
    let mut rng = Rng::new(plan.seed).derive(&[label(HEALTHNET_KIND)]);
    Ok(train_multitask(&source.train, &source.validation, &tasks, &plan.healthnet, &mut rng)?.0)
}

/// Dataset, pre-trained models and per-episode feature caches shared by all
/// cells.
pub struct MatrixContext {
    pub plan: ExperimentPlan,
    pub split: DatasetSplit,
    pub timenet: Option<TimeNetExtractor>,
    pub healthnet: Option<HealthNetModel>,
    index: HashMap<String, usize>,
    tn_first: Vec<Vec<f64>>,
    tn_windows: Vec<Vec<Vec<f64>>>,
    hn_top: Vec<Vec<f64>>,
    hn_all: Vec<Vec<f64>>,
    stats: Vec<Vec<f64>>,
}

fn par_map<T: Send>(records: &[EpisodeRecord], f: impl Fn(&EpisodeRecord) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    records.par_iter().map(f).collect()
}

impl MatrixContext {
    pub fn build(plan: &ExperimentPlan, split: DatasetSplit) -> Result<Self> {
        plan.validate()?;
        split.validate()?;
        let needs_tn = plan.methods.iter().any(|m| m.uses_timenet());
        let needs_hn = plan.methods.iter().any(|m| m.uses_healthnet());
        let timenet = if needs_tn {
            let params = pretrain_autoencoder(plan)?;
            Some(TimeNetExtractor {
                encoder: params.encoder,
                scaler: ChannelScaler::fit(&split.train)?,
                tau: plan.tau,
                shift: plan.window_shift,
            })
        } else {
            None
        };
        let healthnet = if needs_hn {
            Some(pretrain_healthnet(plan, &split)?)
        } else {
            None
        };
        let records: Vec<EpisodeRecord> = split.train.iter().chain(&split.validation).chain(&split.test).cloned().collect();
        let index = records.iter().enumerate().map(|(i, r)| (r.id(), i)).collect();
        let needs_windows = plan.methods.iter().any(|m| matches!(m, Method::TimeNetAll | Method::TimeNetAllEps));
        let (tn_first, tn_windows) = match &timenet {
            Some(tn) if needs_windows => (par_map(&records, |r| tn.first_window(&r.series))?, par_map(&records, |r| tn.all_windows(&r.series))?),
            Some(tn) => (par_map(&records, |r| tn.first_window(&r.series))?, vec![]),
            None => (vec![], vec![]),
        };
        let (hn_top, hn_all) = match &healthnet {
            Some(hn) => (
                par_map(&records, |r| hn_extract(&r.series, hn, LayerSelection::TopOnly))?,
                par_map(&records, |r| hn_extract(&r.series, hn, LayerSelection::All))?,
            ),
            None => (vec![], vec![]),
        };
        let stats = par_map(&records, |r| Ok(stat_features(&r.series, plan.tau)))?;
        Ok(Self {
            plan: plan.clone(),
            split,
            timenet,
            healthnet,
            index,
            tn_first,
            tn_windows,
            hn_top,
            hn_all,
            stats,
        })
    }

    fn pos(&self, r: &EpisodeRecord) -> usize {
        self.index[&r.id()]
    }

    fn gather(&self, cache: &[Vec<f64>], records: &[EpisodeRecord]) -> Vec<Vec<f64>> {
        records.iter().map(|r| cache[self.pos(r)].clone()).collect()
    }

    pub fn tasks(&self) -> Vec<String> {
        self.plan.tasks.clone().unwrap_or_else(|| self.split.target_tasks.clone())
    }

    /// Cells in report order: method, task, fraction, seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &method in &self.plan.methods {
            for task in self.tasks() {
                for &fraction in &self.plan.fractions {
                    for &seed in &self.plan.seeds {
                        out.push(Cell {
                            method,
                            task: task.clone(),
                            fraction,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    /// Runs one cell and returns its report row together with the test
    /// scores.
    pub fn run_cell(&self, cell: &Cell) -> Result<(ExperimentReport, TaskScores)> {
        let plan = &self.plan;
        let task = cell.task.as_str();
        if let Some(hn) = &self.healthnet {
            if cell.method.uses_healthnet() && hn.tasks.iter().any(|t| t == task) {
                return Err(Error::Config(format!("task {task} was seen during multi-task pre-training")));
            }
        }
        let sub = subsample_training(&self.split, task, cell.fraction, derive_seed(plan.seed, &[cell.seed]))?;
        let mut rng = Rng::new(plan.seed).derive(&[label(cell.method.name()), label(task), cell.fraction.to_bits(), cell.seed]);
        let y_tr = labels_for(&sub.train, task)?;
        let y_va = labels_for(&sub.validation, task)?;
        let y_te = labels_for(&sub.test, task)?;

        let mut linear: Option<SparseLinearModel> = None;
        let scores: Vec<f64> = match cell.method {
            Method::LrBaseline | Method::HnLr1 | Method::HnLr2 => {
                let cache = match cell.method {
                    Method::LrBaseline => &self.stats,
                    Method::HnLr1 => &self.hn_top,
                    _ => &self.hn_all,
                };
                let (tr, va, te) = (self.gather(cache, &sub.train), self.gather(cache, &sub.validation), self.gather(cache, &sub.test));
                let (m, _) = fit_l1_logreg(plan, (&tr, &y_tr), (&va, &y_va))?;
                let s = te.iter().map(|z| m.predict_proba(z)).collect::<Result<_>>()?;
                linear = Some(m);
                s
            }
            Method::TimeNet48 | Method::TimeNetAll | Method::TimeNet48Eps | Method::TimeNetAllEps => {
                let tn = self.timenet.as_ref().expect("timenet features are built for timenet methods");
                let (tr, va) = (self.gather(&self.tn_first, &sub.train), self.gather(&self.tn_first, &sub.validation));
                let (base, _) = fit_timenet_lasso(plan, (&tr, &y_tr), (&va, &y_va), Some(tn.layout(&self.split.channel_names)))?;
                let all = matches!(cell.method, Method::TimeNetAll | Method::TimeNetAllEps);
                let score = |m: &SparseLinearModel, r: &EpisodeRecord, extra: Option<f64>| -> Result<f64> {
                    let with = |z: &[f64]| -> Result<f64> {
                        match extra {
                            Some(e) => {
                                let mut v = z.to_vec();
                                v.push(e);
                                m.predict_proba(&v)
                            }
                            None => m.predict_proba(z),
                        }
                    };
                    if all {
                        let ws = &self.tn_windows[self.pos(r)];
                        let s: Vec<f64> = ws.iter().map(|w| with(w)).collect::<Result<_>>()?;
                        Ok(s.iter().sum::<f64>() / s.len() as f64)
                    } else {
                        with(&self.tn_first[self.pos(r)])
                    }
                };
                if matches!(cell.method, Method::TimeNet48 | Method::TimeNetAll) {
                    let s = sub.test.iter().map(|r| score(&base, r, None)).collect::<Result<_>>()?;
                    linear = Some(base);
                    s
                } else {
                    let eps_for = |part: &[EpisodeRecord], mode: EpisodeMode<'_>| -> Result<HashMap<String, f64>> {
                        let v = episode_features(part, task, mode)?;
                        Ok(part.iter().map(|r| r.id()).zip(v).collect())
                    };
                    let e_tr = eps_for(&self.split.train, EpisodeMode::Train)?;
                    let e_va = eps_for(&self.split.validation, EpisodeMode::Train)?;
                    let prior = |r: &EpisodeRecord| score(&base, r, None);
                    let e_te = eps_for(&self.split.test, EpisodeMode::Test(&prior))?;
                    let append = |z: Vec<Vec<f64>>, recs: &[EpisodeRecord], e: &HashMap<String, f64>| -> Vec<Vec<f64>> {
                        z.into_iter()
                            .zip(recs)
                            .map(|(mut v, r)| {
                                v.push(e[&r.id()]);
                                v
                            })
                            .collect()
                    };
                    let tr_e = append(tr, &sub.train, &e_tr);
                    let va_e = append(va, &sub.validation, &e_va);
                    let (m, _) = fit_timenet_lasso(plan, (&tr_e, &y_tr), (&va_e, &y_va), None)?;
                    let s = sub.test.iter().map(|r| score(&m, r, Some(e_te[&r.id()]))).collect::<Result<_>>()?;
                    linear = Some(m);
                    s
                }
            }
            Method::RnnC => {
                let (m, _) = train_rnnc_baseline(&sub.train, &sub.validation, task, &plan.rnnc, &mut rng)?;
                sub.test.iter().map(|r| m.predict(&r.series).map(|p| p[0])).collect::<Result<_>>()?
            }
            Method::HnTune | Method::HnL1 | Method::HnL2 => {
                let hn = self.healthnet.as_ref().expect("healthnet is built for HN methods");
                let mut cfg = plan.finetune.clone();
                cfg.reg = match cell.method {
                    Method::HnL1 => RegKind::L1,
                    Method::HnL2 => RegKind::L2,
                    _ => RegKind::None,
                };
                let mut lambdas = if cfg.reg == RegKind::None { vec![cfg.lambda] } else { plan.finetune_lambdas.clone() };
                lambdas.sort_by(f64::total_cmp);
                let mut best: Option<(crate::adapt::FinetunedModel, f64)> = None;
                for (i, &lambda) in lambdas.iter().enumerate() {
                    cfg.lambda = lambda;
                    let (m, log) = finetune(hn, &sub.train, &sub.validation, task, &cfg, &mut rng.derive(&[i as u64]))?;
                    let loss = log.best_epoch.map_or(f64::INFINITY, |e| log.validation_loss[e]);
                    // ties go to the larger penalty
                    if best.as_ref().is_none_or(|(_, b)| loss <= *b) {
                        best = Some((m, loss));
                    }
                }
                let (m, _) = best.expect("at least one penalty is tried");
                sub.test.iter().map(|r| m.predict_proba(&r.series)).collect::<Result<_>>()?
            }
        };
        let row = ExperimentReport {
            method: cell.method,
            task: cell.task.clone(),
            fraction: cell.fraction,
            seed: cell.seed,
            metrics: MetricSet::compute(&scores, &y_te),
            sparsity: linear.as_ref().map(|m| sparsity(&m.w)),
            selected_penalty: linear.as_ref().map(|m| m.penalty),
            n_train: sub.train.len(),
            n_validation: sub.validation.len(),
            config_hash: config_hash(plan),
        };
        Ok((row, TaskScores { scores, labels: y_te }))
    }

    pub fn run(&self) -> Result<MatrixOutput> {
        let cells = self.cells();
        info!("running {} cells", cells.len());
        let results: Vec<(ExperimentReport, TaskScores, f64)> = cells
            .par_iter()
            .map(|c| {
                let start = Instant::now();
                let (row, scores) = self.run_cell(c)?;
                Ok((row, scores, start.elapsed().as_secs_f64()))
            })
            .collect::<Result<_>>()?;

        let timings = results
            .iter()
            .map(|(r, _, s)| Timing {
                method: r.method,
                task: r.task.clone(),
                fraction: r.fraction,
                seed: r.seed,
                seconds: *s,
            })
            .collect();
        let mut aggregates = Vec::new();
        let mut summary = Vec::new();
        for &method in &self.plan.methods {
            for &fraction in &self.plan.fractions {
                let group: Vec<&(ExperimentReport, TaskScores, f64)> =
                    results.iter().filter(|(r, _, _)| r.method == method && r.fraction == fraction).collect();
                for &seed in &self.plan.seeds {
                    let tasks: Vec<TaskScores> =
                        group.iter().filter(|(r, _, _)| r.seed == seed).map(|(_, s, _)| s.clone()).collect();
                    aggregates.push(AggregateRow {
                        method,
                        fraction,
                        seed,
                        micro_auroc: aggregate_auroc(&tasks, Aggregation::Micro),
                        macro_auroc: aggregate_auroc(&tasks, Aggregation::Macro),
                        weighted_auroc: aggregate_auroc(&tasks, Aggregation::Weighted),
                    });
                }
                let a: Vec<f64> = group.iter().filter_map(|(r, _, _)| r.metrics.auroc).collect();
                if !a.is_empty() {
                    let mean = a.iter().sum::<f64>() / a.len() as f64;
                    let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.len() as f64;
                    summary.push(SummaryRow {
                        method,
                        fraction,
                        mean_auroc: mean,
                        std_auroc: var.sqrt(),
                        n: a.len(),
                    });
                }
            }
        }
        Ok(MatrixOutput {
            report: MatrixReport {
                format_version: FORMAT_VERSION,
                config_hash: config_hash(&self.plan),
                dataset_hash: self.split.meta.config_hash.clone(),
                rows: results.into_iter().map(|(r, _, _)| r).collect(),
                aggregates,
                summary,
            },
            timings,
        })
    }
}

/// One (method, task, fraction, seed) combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub task: String,
    pub fraction: f64,
    pub seed: u64,
}

/// Builds the dataset and pre-trained models named by `plan` and runs every
/// cell.
pub fn run_experiment_matrix(plan: &ExperimentPlan) -> Result<MatrixOutput> {
    let split = build_dataset(plan)?;
    MatrixContext::build(plan, split)?.run()
}

#[derive(Serialize)]
struct CurveRow<'a> {
    method: &'a str,
    task: &'a str,
    fraction: f64,
    seed: u64,
    auroc: Option<f64>,
}

impl MatrixOutput {
    /// Writes `report.json`, `curves.csv` and the `timings.csv` sidecar.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_json(dir.join("report.json"), &self.report)?;
        let mut w = csv::Writer::from_path(dir.join("curves.csv"))?;
        for r in &self.report.rows {
            w.serialize(CurveRow {
                method: r.method.name(),
                task: &r.task,
                fraction: r.fraction,
                seed: r.seed,
                auroc: r.metrics.auroc,
            })?;
        }
        w.flush().map_err(|e| Error::io(dir.join("curves.csv"), e))?;
        let mut t = csv::Writer::from_path(dir.join("timings.csv"))?;
        for row in &self.timings {
            t.serialize(row)?;
        }
        t.flush().map_err(|e| Error::io(dir.join("timings.csv"), e))?;
        Ok(())
    }

    /// Mean test AUROC of `method` at `fraction` over tasks and seeds.
    pub fn mean_auroc(&self, method: Method, fraction: f64) -> Option<f64> {
        self.report
            .summary
            .iter()
            .find(|s| s.method == method && s.fraction == fraction)
            .map(|s| s.mean_auroc)
    }
}

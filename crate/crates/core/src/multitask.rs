//! HealthNet-style supervised pre-training: one GRU stack with a sigmoid
//! output per task, trained on all source tasks at once. The from-scratch
//! baseline RNN-C is the same model with a single task.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::config_hash;
use crate::autoencoder::ChannelScaler;
use crate::data::{truncate_and_pad, EpisodeRecord, MultivariateSeries};
use crate::error::{ensure_shape, Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::rnn::{bptt, stack_forward, GruStackParams, Mode, StateGrads};
use crate::train::{bce_with_logit, fit, TrainConfig, TrainLog, Trainable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HealthNetConfig {
    pub widths: Vec<usize>,
    pub dropout: f64,
    /// Episodes are truncated or padded to this many steps.
    pub tau: usize,
    pub train: TrainConfig,
}

impl Default for HealthNetConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 32],
            dropout: 0.3,
            tau: 48,
            train: TrainConfig::default(),
        }
    }
}

/// `W_C` (K × h) and `b_C` reading the top layer's final state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultitaskHead {
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthNetModel {
    pub stack: GruStackParams,
    pub head: MultitaskHead,
    pub tasks: Vec<String>,
    pub scaler: ChannelScaler,
    pub tau: usize,
    pub config_hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    TopOnly,
    All,
}

/// Scaled and length-normalised input ready for the stack.
#[derive(Clone, Debug)]
pub(crate) struct Prepared {
    pub series: MultivariateSeries,
    pub labels: Vec<f64>,
}

pub(crate) fn prepare_series(series: &MultivariateSeries, scaler: &ChannelScaler, tau: usize) -> Result<MultivariateSeries> {
    Ok(truncate_and_pad(&scaler.apply(series)?, tau))
}

pub(crate) fn prepare(records: &[EpisodeRecord], tasks: &[String], scaler: &ChannelScaler, tau: usize) -> Result<Vec<Prepared>> {
    records
        .iter()
        .map(|r| {
            let labels = tasks
                .iter()
                .map(|t| {
                    r.labels
                        .get(t)
                        .map(|&y| y as f64)
                        .ok_or_else(|| Error::Data(format!("episode {} has no label for task {t}", r.id())))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Prepared {
                series: prepare_series(&r.series, scaler, tau)?,
                labels,
            })
        })
        .collect()
}

impl HealthNetModel {
    pub fn new(n_channels: usize, tasks: Vec<String>, cfg: &HealthNetConfig, scaler: ChannelScaler, rng: &mut Rng) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Data("at least one task is required".into()));
        }
        let stack = GruStackParams::random(n_channels, &cfg.widths, cfg.dropout, rng)?;
        let h = stack.top_width();
        let head = MultitaskHead {
            w: crate::numerics::glorot_init(tasks.len(), h, rng),
            b: vec![0.0; tasks.len()],
        };
        Ok(Self {
            stack,
            head,
            tasks,
            scaler,
            tau: cfg.tau,
            config_hash: config_hash(cfg),
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn logits(&self, top: &[f64]) -> Vec<f64> {
        let mut z = self.head.b.clone();
        self.head.w.matvec_acc(top, &mut z);
        z
    }

    fn check_channels(&self, x: &MultivariateSeries) -> Result<()> {
        if x.n_channels() != self.stack.input_dim() {
            return Err(Error::Data(format!(
                "series has {} channels, model was trained on {}",
                x.n_channels(),
                self.stack.input_dim()
            )));
        }
        Ok(())
    }

    /// Per-task probabilities for one episode.
    pub fn predict(&self, x: &MultivariateSeries) -> Result<Vec<f64>> {
        self.check_channels(x)?;
        let s = prepare_series(x, &self.scaler, self.tau)?;
        let trace = stack_forward(s.view(), &self.stack, Mode::Eval, &mut Rng::new(0))?;
        Ok(self.logits(trace.final_top()).into_iter().map(crate::numerics::sigmoid).collect())
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = self.stack.flatten();
        v.extend_from_slice(self.head.w.as_slice());
        v.extend_from_slice(&self.head.b);
        v
    }

    fn unflatten(&mut self, src: &[f64]) -> Result<()> {
        let at = self.stack.unflatten_from(src)?;
        let nw = self.head.w.as_slice().len();
        let nb = self.head.b.len();
        ensure_shape!(src.len() == at + nw + nb, "flat length {} != {}", src.len(), at + nw + nb);
        self.head.w.as_mut_slice().copy_from_slice(&src[at..at + nw]);
        self.head.b.copy_from_slice(&src[at + nw..]);
        Ok(())
    }

    /// Mean cross-entropy over all (instance, task) pairs and, if asked,
    /// its gradient.
    fn objective(&self, data: &[&Prepared], mode: Mode, rng: &mut Rng, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let k = self.n_tasks();
        let scale = 1.0 / (data.len() * k) as f64;
        let mut loss = 0.0;
        let mut stack_g = self.stack.zeros_like();
        let mut head_w = Matrix::zeros(k, self.stack.top_width());
        let mut head_b = vec![0.0; k];
        for p in data {
            let trace = stack_forward(p.series.view(), &self.stack, mode, rng)?;
            let top = trace.final_top();
            let logits = self.logits(top);
            let mut dlogit = vec![0.0; k];
            for j in 0..k {
                let (l, g) = bce_with_logit(logits[j], p.labels[j]);
                loss += l * scale;
                dlogit[j] = g * scale;
            }
            if want_grad {
                head_w.add_outer(&dlogit, top);
                head_b.iter_mut().zip(&dlogit).for_each(|(a, b)| *a += b);
                let mut dtop = vec![0.0; top.len()];
                self.head.w.matvec_t_acc(&dlogit, &mut dtop);
                let g = bptt(&trace, &self.stack, &StateGrads::final_top(&trace, &dtop)?)?;
                stack_g.add_assign(&g.params);
            }
        }
        if !want_grad {
            return Ok((loss, None));
        }
        let mut flat = stack_g.flatten();
        flat.extend_from_slice(head_w.as_slice());
        flat.extend_from_slice(&head_b);
        Ok((loss, Some(flat)))
    }

    /// Mean binary cross-entropy of the model on labelled episodes.
    pub fn loss(&self, records: &[EpisodeRecord]) -> Result<f64> {
        let data = prepare(records, &self.tasks, &self.scaler, self.tau)?;
        let refs: Vec<&Prepared> = data.iter().collect();
        Ok(self.objective(&refs, Mode::Eval, &mut Rng::new(0), false)?.0)
    }
}

#[derive(Clone)]
struct Objective<'a> {
    model: HealthNetModel,
    train: &'a [Prepared],
    validation: &'a [Prepared],
}

impl Trainable for Objective<'_> {
    fn flatten(&self) -> Vec<f64> {
        self.model.flatten()
    }

    fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        self.model.unflatten(flat)
    }

    fn batch_grad(&self, batch: &[usize], rng: &mut Rng) -> Result<(f64, Vec<f64>)> {
        let data: Vec<&Prepared> = batch.iter().map(|&i| &self.train[i]).collect();
        let (l, g) = self.model.objective(&data, Mode::Train, rng, true)?;
        Ok((l, g.expect("gradient requested")))
    }

    fn validation_loss(&self) -> Result<f64> {
        let data: Vec<&Prepared> = if self.validation.is_empty() {
            self.train.iter().collect()
        } else {
            self.validation.iter().collect()
        };
        let chunks: Vec<f64> = data
            .par_chunks(64)
            .map(|c| {
                self.model
                    .objective(c, Mode::Eval, &mut Rng::new(0), false)
                    .map(|(l, _)| l * c.len() as f64)
            })
            .collect::<Result<_>>()?;
        Ok(chunks.iter().sum::<f64>() / data.len() as f64)
    }
}

fn check_tasks(records: &[EpisodeRecord], tasks: &[String]) -> Result<()> {
    for r in records {
        if r.labels.len() < tasks.len() || tasks.iter().any(|t| !r.labels.contains_key(t)) {
            return Err(Error::Data(format!(
                "episode {} carries {} labels, expected all of {} tasks",
                r.id(),
                r.labels.len(),
                tasks.len()
            )));
        }
    }
    for t in tasks {
        let pos = records.iter().filter(|r| r.labels[t] == 1).count();
        if pos == 0 || pos == records.len() {
            warn!("task {t} has a single class in the training data");
        }
    }
    Ok(())
}

/// Trains a multi-task model on `train`, selecting the epoch with the lowest
/// loss on `validation`.
pub fn train_multitask(
    train: &[EpisodeRecord],
    validation: &[EpisodeRecord],
    tasks: &[String],
    cfg: &HealthNetConfig,
    rng: &mut Rng,
) -> Result<(HealthNetModel, TrainLog)> {
    if train.is_empty() {
        return Err(Error::Domain("no training episodes".into()));
    }
    check_tasks(train, tasks)?;
    check_tasks(validation, tasks)?;
    let scaler = ChannelScaler::fit(train)?;
    let model = HealthNetModel::new(train[0].series.n_channels(), tasks.to_vec(), cfg, scaler, rng)?;
    let tr = prepare(train, tasks, &model.scaler, cfg.tau)?;
    let va = prepare(validation, tasks, &model.scaler, cfg.tau)?;
    let objective = Objective {
        model,
        train: &tr,
        validation: &va,
    };
    let (best, log) = fit(objective, tr.len(), &cfg.train, rng)?;
    Ok((best.model, log))
}

/// The from-scratch recurrent classifier: `train_multitask` with one task.
pub fn train_rnnc_baseline(
    train: &[EpisodeRecord],
    validation: &[EpisodeRecord],
    task: &str,
    cfg: &HealthNetConfig,
    rng: &mut Rng,
) -> Result<(HealthNetModel, TrainLog)> {
    train_multitask(train, validation, &[task.to_string()], cfg, rng)
}

/// Frozen-network features: the top layer's final state, or the final
/// states of all layers concatenated.
pub fn hn_extract(x: &MultivariateSeries, model: &HealthNetModel, layers: LayerSelection) -> Result<Vec<f64>> {
    model.check_channels(x)?;
    let s = prepare_series(x, &model.scaler, model.tau)?;
    let trace = stack_forward(s.view(), &model.stack, Mode::Eval, &mut Rng::new(0))?;
    Ok(match layers {
        LayerSelection::TopOnly => trace.final_top().to_vec(),
        LayerSelection::All => trace.final_concat(),
    })
}

/// Mean of independent per-task binary cross-entropies.
pub fn multitask_loss(logits: &[Vec<f64>], labels: &[Vec<f64>]) -> f64 {
    let n = logits.len() as f64;
    let k = logits.first().map_or(0, |l| l.len()) as f64;
    logits
        .iter()
        .zip(labels)
        .flat_map(|(z, y)| z.iter().zip(y).map(|(&a, &b)| bce_with_logit(a, b).0))
        .sum::<f64>()
        / (n * k)
}

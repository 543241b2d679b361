//! Synthetic multi-task episodes with known generating templates.
//!
//! Every task owns a template made of two components, each a fixed shape
//! on one channel: a level shift or a centred linear trend (the default
//! family), a raised-cosine bump on one third of the window, or a sinusoid
//! with an integer number of cycles per `tau` steps. On any channel the
//! shapes in use are mutually orthogonal over the first `tau` steps. An episode positive for a task carries that task's template on
//! top of white noise.
//!
//! Source tasks use disjoint component slots spread over overlapping
//! channels. Each target task borrows one component from each of two
//! distinct source tasks, at `target_scale` times the source amplitude, so
//! a target template is new while its building blocks are shared with the
//! source tasks.

use std::f64::consts::PI;

use log::warn;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetMeta, DatasetSplit, EpisodeRecord, Split, SCHEMA_VERSION};
use super::series::MultivariateSeries;
use crate::artifact::config_hash;
use crate::error::{Error, Result};
use crate::eval::metrics::auroc;
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_channels: usize,
    /// Total number of tasks, targets included.
    pub n_tasks: usize,
    pub n_target_tasks: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub tau: usize,
    /// Episode lengths are drawn uniformly from `[tau, tau_max]`.
    pub tau_max: usize,
    pub noise_sigma: f64,
    /// Matched-filter amplitude of one source component (its projection on
    /// the unit-norm shape).
    pub amplitude: f64,
    pub target_scale: f64,
    pub prevalence: f64,
    /// Share of patients with a second episode.
    pub second_episode_fraction: f64,
    /// Probability that a second episode copies the first one's label.
    pub label_persistence: f64,
    pub shapes: ShapeFamily,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_channels: 8,
            n_tasks: 8,
            n_target_tasks: 2,
            n_train: 600,
            n_validation: 200,
            n_test: 200,
            tau: 48,
            tau_max: 48,
            noise_sigma: 0.5,
            amplitude: 0.8,
            target_scale: 1.5,
            prevalence: 0.3,
            second_episode_fraction: 0.3,
            label_persistence: 0.6,
            shapes: ShapeFamily::LevelTrend,
            seed: 0,
        }
    }
}

/// Which shapes the component slots of a channel hold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// A level shift and a centred trend per channel.
    #[default]
    LevelTrend,
    /// Three bumps per channel, one per third of the window.
    Bumps,
    /// Sinusoids on even channels, bumps on odd ones.
    Mixed,
}

impl ShapeFamily {
    fn slots(self) -> usize {
        match self {
            ShapeFamily::LevelTrend => 2,
            ShapeFamily::Bumps | ShapeFamily::Mixed => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Level,
    Trend,
    Sinusoid { cycles: usize, phase: f64 },
    Bump { segment: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub channel: usize,
    pub shape: Shape,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub task: String,
    pub components: Vec<Component>,
}

const SINE_CYCLES: [usize; 3] = [2, 3, 5];
const BUMP_SEGMENTS: usize = 3;

/// Value at step `t` of the unit-norm (over `tau` steps) shape, extended
/// periodically with period `tau`.
pub fn shape_value(shape: &Shape, tau: usize, t: usize) -> f64 {
    let tt = t % tau;
    match shape {
        Shape::Level => 1.0 / (tau as f64).sqrt(),
        Shape::Trend => {
            let mid = (tau as f64 - 1.0) / 2.0;
            let norm = (0..tau).map(|k| (k as f64 - mid).powi(2)).sum::<f64>().sqrt();
            (tt as f64 - mid) / norm
        }
        Shape::Sinusoid { cycles, phase } => {
            let norm = (tau as f64 / 2.0).sqrt();
            (2.0 * PI * (*cycles as f64) * tt as f64 / tau as f64 + phase).sin() / norm
        }
        Shape::Bump { segment } => {
            let seg = tau / BUMP_SEGMENTS;
            let start = segment * seg;
            if tt < start || tt >= start + seg {
                return 0.0;
            }
            let raw = |k: usize| 0.5 - 0.5 * (2.0 * PI * (k as f64 + 0.5) / seg as f64).cos();
            let norm = (0..seg).map(|k| raw(k) * raw(k)).sum::<f64>().sqrt();
            raw(tt - start) / norm
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_channels < 2 || self.n_tasks < 2 {
            return Err(Error::Config("synthetic data needs at least 2 channels and 2 tasks".into()));
        }
        let sources = self.n_tasks - self.n_target_tasks.min(self.n_tasks);
        if sources < 2 * self.n_target_tasks || sources == 0 {
            return Err(Error::Config(format!(
                "{} target tasks need at least {} source tasks",
                self.n_target_tasks,
                (2 * self.n_target_tasks).max(1)
            )));
        }
        if 2 * sources > self.shapes.slots() * self.n_channels {
            return Err(Error::Config(format!(
                "{sources} source tasks do not fit on {} channels",
                self.n_channels
            )));
        }
        if self.tau < 2 * BUMP_SEGMENTS || self.tau % BUMP_SEGMENTS != 0 {
            return Err(Error::Config(format!("tau must be a positive multiple of {BUMP_SEGMENTS}")));
        }
        if self.tau_max < self.tau {
            return Err(Error::Config("tau_max must be at least tau".into()));
        }
        if !(0.0..=1.0).contains(&self.prevalence) || self.noise_sigma < 0.0 {
            return Err(Error::Config("prevalence must lie in [0, 1] and noise_sigma >= 0".into()));
        }
        Ok(())
    }

    pub fn task_names(&self) -> Vec<String> {
        (0..self.n_tasks).map(|k| format!("task_{k}")).collect()
    }

    pub fn channel_names(&self) -> Vec<String> {
        (0..self.n_channels).map(|c| format!("ch_{c}")).collect()
    }

    /// Draws the task templates; depends only on `seed`.
    pub fn templates(&self) -> Result<Vec<TaskTemplate>> {
        self.validate()?;
        let mut rng = Rng::new(self.seed).derive(&[1]);
        let n_src = self.n_tasks - self.n_target_tasks;
        let family = self.shapes;
        let mut slots: Vec<(usize, usize)> = (0..self.n_channels)
            .flat_map(|c| (0..family.slots()).map(move |k| (c, k)))
            .collect();
        rng.shuffle(&mut slots);
        let shape_for = |c: usize, k: usize, rng: &mut Rng| match family {
            ShapeFamily::LevelTrend if k == 0 => Shape::Level,
            ShapeFamily::LevelTrend => Shape::Trend,
            ShapeFamily::Mixed if c % 2 == 0 => Shape::Sinusoid {
                cycles: SINE_CYCLES[k],
                phase: rng.uniform(0.0, 2.0 * PI),
            },
            _ => Shape::Bump { segment: k },
        };
        let names = self.task_names();
        let mut out: Vec<TaskTemplate> = Vec::with_capacity(self.n_tasks);
        for name in names.iter().take(n_src) {
            let first = slots.remove(0);
            let pos = slots
                .iter()
                .position(|s| s.0 != first.0)
                .ok_or_else(|| Error::Config("ran out of component slots".into()))?;
            let second = slots.remove(pos);
            let components = [first, second]
                .into_iter()
                .map(|(c, k)| Component {
                    channel: c,
                    shape: shape_for(c, k, &mut rng),
                    amplitude: self.amplitude,
                })
                .collect();
            out.push(TaskTemplate {
                task: name.clone(),
                components,
            });
        }
        let mut lenders: Vec<usize> = (0..n_src).collect();
        rng.shuffle(&mut lenders);
        for (j, name) in names.iter().enumerate().skip(n_src) {
            let t = j - n_src;
            let components = [lenders[2 * t], lenders[2 * t + 1]]
                .into_iter()
                .map(|src| {
                    let pick = rng.below(2);
                    let mut c = out[src].components[pick].clone();
                    c.amplitude = self.amplitude * self.target_scale;
                    c
                })
                .collect();
            out.push(TaskTemplate {
                task: name.clone(),
                components,
            });
        }
        Ok(out)
    }
}

/// Matched-filter score of a series for one template: the sum of the
/// projections of the first `tau` steps onto each unit-norm component.
pub fn matched_filter_score(series: &MultivariateSeries, template: &TaskTemplate, tau: usize) -> f64 {
    template
        .components
        .iter()
        .map(|c| {
            (0..tau.min(series.len()))
                .map(|t| series.value(t, c.channel) * shape_value(&c.shape, tau, t))
                .sum::<f64>()
        })
        .sum()
}

/// Generates a full train/validation/test dataset.
pub fn synth_generate(cfg: &SynthConfig) -> Result<DatasetSplit> {
    let templates = cfg.templates()?;
    let tasks = cfg.task_names();
    let names = cfg.channel_names();
    let root = Rng::new(cfg.seed);
    let mut out = DatasetSplit::empty(names.clone(), vec![], tasks.clone());
    out.target_tasks = tasks[cfg.n_tasks - cfg.n_target_tasks..].to_vec();
    out.meta = DatasetMeta {
        schema_version: SCHEMA_VERSION,
        source: "synthetic".into(),
        seed: cfg.seed,
        config_hash: config_hash(cfg),
        config: serde_json::json!({ "generator": cfg, "templates": templates }),
    };

    for (si, (split, count)) in [
        (Split::Train, cfg.n_train),
        (Split::Validation, cfg.n_validation),
        (Split::Test, cfg.n_test),
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = root.derive(&[2, si as u64]);
        let mut records = Vec::with_capacity(count);
        let mut patient = 0usize;
        while records.len() < count {
            let pid = format!("{}{:05}", ["tr", "va", "te"][si], patient);
            patient += 1;
            let episodes = if records.len() + 1 < count && rng.bernoulli(cfg.second_episode_fraction) { 2 } else { 1 };
            let mut prev: Option<Vec<u8>> = None;
            for ep in 1..=episodes {
                let labels: Vec<u8> = (0..cfg.n_tasks)
                    .map(|k| match &prev {
                        Some(p) if rng.bernoulli(cfg.label_persistence) => p[k],
                        _ => rng.bernoulli(cfg.prevalence) as u8,
                    })
                    .collect();
                let len = cfg.tau + rng.below(cfg.tau_max - cfg.tau + 1);
                let series = render(cfg, &templates, &labels, len, &names, &mut rng)?;
                records.push(EpisodeRecord {
                    patient_id: pid.clone(),
                    episode_index: ep,
                    series,
                    labels: tasks.iter().cloned().zip(labels.iter().copied()).collect(),
                });
                prev = Some(labels);
            }
        }
        match split {
            Split::Train => out.train = records,
            Split::Validation => out.validation = records,
            Split::Test => out.test = records,
        }
    }
    out.validate()?;

    let calib = if out.test.is_empty() { &out.train } else { &out.test };
    for tpl in &templates {
        let scores: Vec<f64> = calib.iter().map(|r| matched_filter_score(&r.series, tpl, cfg.tau)).collect();
        let labels: Vec<u8> = calib.iter().map(|r| r.labels[&tpl.task]).collect();
        if let Some(a) = auroc(&scores, &labels) {
            if a < 0.6 {
                warn!("task {}: matched-filter AUROC {a:.3} < 0.6; noise dominates the templates", tpl.task);
            }
        }
    }
    Ok(out)
}

fn render(
    cfg: &SynthConfig,
    templates: &[TaskTemplate],
    labels: &[u8],
    len: usize,
    names: &[String],
    rng: &mut Rng,
) -> Result<MultivariateSeries> {
    let n = cfg.n_channels;
    let mut values = vec![0.0; len * n];
    for v in values.iter_mut() {
        *v = cfg.noise_sigma * rng.normal();
    }
    for (tpl, &y) in templates.iter().zip(labels) {
        if y == 0 {
            continue;
        }
        for c in &tpl.components {
            for t in 0..len {
                values[t * n + c.channel] += c.amplitude * shape_value(&c.shape, cfg.tau, t);
            }
        }
    }
    MultivariateSeries::new(names.to_vec(), vec![], len, values)
}

/// Univariate pre-training corpus drawn from several generative families
/// (sinusoids, AR(2), square waves, random walks), each z-normalised.
pub fn univariate_corpus(n_series: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed).derive(&[3]);
    (0..n_series)
        .map(|i| {
            let len = min_len + rng.below(max_len - min_len + 1);
            let mut x: Vec<f64> = match i % 4 {
                0 => {
                    let f = rng.uniform(0.5, 6.0) / len as f64;
                    let ph = rng.uniform(0.0, 2.0 * PI);
                    (0..len).map(|t| (2.0 * PI * f * t as f64 + ph).sin() + 0.1 * rng.normal()).collect()
                }
                1 => {
                    let a1 = rng.uniform(0.2, 1.2);
                    let a2 = rng.uniform(-0.6, 0.0);
                    let mut v = vec![0.0; len];
                    for t in 0..len {
                        let p1 = if t >= 1 { v[t - 1] } else { 0.0 };
                        let p2 = if t >= 2 { v[t - 2] } else { 0.0 };
                        v[t] = a1 * p1 + a2 * p2 + rng.normal();
                    }
                    v
                }
                2 => {
                    let period = 2 + rng.below(len.max(3) / 2);
                    let off = rng.below(period);
                    (0..len)
                        .map(|t| if ((t + off) / period) % 2 == 0 { 1.0 } else { -1.0 } + 0.05 * rng.normal())
                        .collect()
                }
                _ => {
                    let mut acc = 0.0;
                    (0..len)
                        .map(|_| {
                            acc += rng.normal();
                            acc
                        })
                        .collect()
                }
            };
            znorm(&mut x);
            x
        })
        .collect()
}

pub(crate) fn znorm(x: &mut [f64]) {
    let n = x.len() as f64;
    if n == 0.0 {
        return;
    }
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in x.iter_mut() {
        *v -= mean;
        if sd > 1e-12 {
            *v /= sd;
        }
    }
}

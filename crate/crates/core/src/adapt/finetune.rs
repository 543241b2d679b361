//! Fine-tuning a pre-trained stack on a new binary task with a fresh
//! two-way softmax head, optionally penalising only the feed-forward
//! weights.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::artifact::config_hash;
use crate::autoencoder::ChannelScaler;
use crate::data::{EpisodeRecord, MultivariateSeries};
use crate::error::{ensure_shape, Error, Result};
use crate::multitask::{prepare, prepare_series, HealthNetModel, Prepared};
use crate::numerics::{glorot_init, sigmoid, softplus, Matrix, Rng};
use crate::rnn::{bptt, stack_forward, GruStackParams, Mode, StateGrads};
use crate::train::{fit, TrainConfig, TrainLog, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    None,
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub reg: RegKind,
    pub lambda: f64,
    pub train: TrainConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            reg: RegKind::None,
            lambda: 0.01,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetunedModel {
    pub stack: GruStackParams,
    /// `W'_C` (2 × h); row 1 is the positive class.
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    pub reg: RegKind,
    pub lambda: f64,
    pub task: String,
    pub scaler: ChannelScaler,
    pub tau: usize,
    pub config_hash: String,
}

/// Penalty on the feed-forward blocks: `λ Σ|W|` or `λ Σ W²`.
pub fn penalty_value(stack: &GruStackParams, reg: RegKind, lambda: f64) -> f64 {
    let ff = stack.layers.iter().flat_map(|l| l.ff_blocks()).flat_map(|m| m.as_slice());
    match reg {
        RegKind::None => 0.0,
        RegKind::L1 => lambda * ff.map(|w| w.abs()).sum::<f64>(),
        RegKind::L2 => lambda * ff.map(|w| w * w).sum::<f64>(),
    }
}

/// Gradient of [`penalty_value`]: `λ·sign(w)` (0 at 0) or `2λw` on
/// feed-forward entries, zero everywhere else.
pub fn penalty_grad(stack: &GruStackParams, reg: RegKind, lambda: f64) -> GruStackParams {
    let mut g = stack.zeros_like();
    if reg == RegKind::None {
        return g;
    }
    for (gl, pl) in g.layers.iter_mut().zip(&stack.layers) {
        for (gm, pm) in gl.ff_blocks_mut().into_iter().zip(pl.ff_blocks()) {
            for (gv, &w) in gm.as_mut_slice().iter_mut().zip(pm.as_slice()) {
                *gv = match reg {
                    RegKind::L1 if w > 0.0 => lambda,
                    RegKind::L1 if w < 0.0 => -lambda,
                    RegKind::L1 => 0.0,
                    RegKind::L2 => 2.0 * lambda * w,
                    RegKind::None => 0.0,
                };
            }
        }
    }
    g
}

/// Gradients of one minibatch step, split into their sources.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub data_loss: f64,
    pub data: GruStackParams,
    pub penalty: GruStackParams,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

impl FinetunedModel {
    /// Copies the pre-trained stack and draws a fresh softmax head.
    pub fn init(pretrained: &HealthNetModel, task: &str, cfg: &FinetuneConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.reg != RegKind::None && cfg.lambda == 0.0 {
            warn!("{:?} regularisation with lambda = 0 is plain fine-tuning", cfg.reg);
        }
        if cfg.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        let h = pretrained.stack.top_width();
        Ok(Self {
            stack: pretrained.stack.clone(),
            head_w: glorot_init(2, h, rng),
            head_b: vec![0.0; 2],
            reg: cfg.reg,
            lambda: cfg.lambda,
            task: task.to_string(),
            scaler: pretrained.scaler.clone(),
            tau: pretrained.tau,
            config_hash: config_hash(cfg),
        })
    }

    /// Positive-class logit margin `l₁ − l₀`.
    fn margin(&self, top: &[f64]) -> f64 {
        let l0 = crate::numerics::dot(self.head_w.row(0), top) + self.head_b[0];
        let l1 = crate::numerics::dot(self.head_w.row(1), top) + self.head_b[1];
        l1 - l0
    }

    pub fn predict_proba(&self, x: &MultivariateSeries) -> Result<f64> {
        if x.n_channels() != self.stack.input_dim() {
            return Err(Error::Data(format!("series has {} channels, model expects {}", x.n_channels(), self.stack.input_dim())));
        }
        let s = prepare_series(x, &self.scaler, self.tau)?;
        let trace = stack_forward(s.view(), &self.stack, Mode::Eval, &mut Rng::new(0))?;
        Ok(sigmoid(self.margin(trace.final_top())))
    }

    pub(crate) fn step_gradients_prepared(&self, data: &[&Prepared], mode: Mode, rng: &mut Rng) -> Result<StepGradients> {
        let scale = 1.0 / data.len() as f64;
        let h = self.stack.top_width();
        let mut out = StepGradients {
            data_loss: 0.0,
            data: self.stack.zeros_like(),
            penalty: penalty_grad(&self.stack, self.reg, self.lambda),
            head_w: Matrix::zeros(2, h),
            head_b: vec![0.0; 2],
        };
        for p in data {
            let trace = stack_forward(p.series.view(), &self.stack, mode, rng)?;
            let top = trace.final_top();
            let d = self.margin(top);
            let y = p.labels[0];
            // cross-entropy of a two-way softmax as a function of the margin
            out.data_loss += scale * (softplus(d) - y * d);
            let g = scale * (sigmoid(d) - y);
            let dl = [-g, g];
            out.head_w.add_outer(&dl, top);
            out.head_b[0] += dl[0];
            out.head_b[1] += dl[1];
            let mut dtop = vec![0.0; h];
            self.head_w.matvec_t_acc(&dl, &mut dtop);
            let gr = bptt(&trace, &self.stack, &StateGrads::final_top(&trace, &dtop)?)?;
            out.data.add_assign(&gr.params);
        }
        Ok(out)
    }

    /// Data-loss and penalty gradients on one batch of episodes, drawing
    /// dropout masks from `rng` exactly as a training step would.
    pub fn step_gradients(&self, batch: &[EpisodeRecord], rng: &mut Rng) -> Result<StepGradients> {
        let data = prepare(batch, std::slice::from_ref(&self.task), &self.scaler, self.tau)?;
        let refs: Vec<&Prepared> = data.iter().collect();
        self.step_gradients_prepared(&refs, Mode::Train, rng)
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = self.stack.flatten();
        v.extend_from_slice(self.head_w.as_slice());
        v.extend_from_slice(&self.head_b);
        v
    }

    fn unflatten(&mut self, src: &[f64]) -> Result<()> {
        let at = self.stack.unflatten_from(src)?;
        let nw = self.head_w.as_slice().len();
        ensure_shape!(src.len() == at + nw + 2, "flat length {} != {}", src.len(), at + nw + 2);
        self.head_w.as_mut_slice().copy_from_slice(&src[at..at + nw]);
        self.head_b.copy_from_slice(&src[at + nw..]);
        Ok(())
    }
}

#[derive(Clone)]
struct Objective<'a> {
    model: FinetunedModel,
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
        let g = self.model.step_gradients_prepared(&data, Mode::Train, rng)?;
        let mut total = g.data;
        total.add_assign(&g.penalty);
        let mut flat = total.flatten();
        flat.extend_from_slice(g.head_w.as_slice());
        flat.extend_from_slice(&g.head_b);
        let loss = g.data_loss + penalty_value(&self.model.stack, self.model.reg, self.model.lambda);
        Ok((loss, flat))
    }

    /// Validation cross-entropy without the penalty.
    fn validation_loss(&self) -> Result<f64> {
        let data: Vec<&Prepared> = if self.validation.is_empty() {
            self.train.iter().collect()
        } else {
            self.validation.iter().collect()
        };
        let mut total = 0.0;
        for p in &data {
            let trace = stack_forward(p.series.view(), &self.model.stack, Mode::Eval, &mut Rng::new(0))?;
            let d = self.model.margin(trace.final_top());
            total += softplus(d) - p.labels[0] * d;
        }
        Ok(total / data.len() as f64)
    }
}

/// Fine-tunes all parameters jointly on the target task.
pub fn finetune(
    pretrained: &HealthNetModel,
    train: &[EpisodeRecord],
    validation: &[EpisodeRecord],
    task: &str,
    cfg: &FinetuneConfig,
    rng: &mut Rng,
) -> Result<(FinetunedModel, TrainLog)> {
    if let Some(r) = train.iter().chain(validation).find(|r| r.series.n_channels() != pretrained.stack.input_dim()) {
        return Err(Error::Data(format!(
            "episode {} has {} channels, pre-trained stack expects {}",
            r.id(),
            r.series.n_channels(),
            pretrained.stack.input_dim()
        )));
    }
    let model = FinetunedModel::init(pretrained, task, cfg, rng)?;
    let tasks = [task.to_string()];
    let tr = prepare(train, &tasks, &model.scaler, model.tau)?;
    let va = prepare(validation, &tasks, &model.scaler, model.tau)?;
    let (best, log) = fit(
        Objective {
            model,
            train: &tr,
            validation: &va,
        },
        tr.len(),
        &cfg.train,
        rng,
    )?;
    Ok((best.model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multitask::HealthNetConfig;
    use std::collections::BTreeMap;

    fn pretrained() -> HealthNetModel {
        let cfg = HealthNetConfig {
            widths: vec![4, 3],
            dropout: 0.2,
            tau: 6,
            ..Default::default()
        };
        HealthNetModel::new(2, vec!["a".into()], &cfg, ChannelScaler::identity(2), &mut Rng::new(3)).unwrap()
    }

    fn episodes(n: usize) -> Vec<EpisodeRecord> {
        let mut rng = Rng::new(2);
        (0..n)
            .map(|i| EpisodeRecord {
                patient_id: format!("p{i}"),
                episode_index: 1,
                series: MultivariateSeries::from_channels(
                    vec!["x".into(), "y".into()],
                    vec![],
                    &[(0..6).map(|_| rng.normal()).collect(), (0..6).map(|_| rng.normal()).collect()],
                )
                .unwrap(),
                labels: BTreeMap::from([("t".to_string(), (i % 2) as u8)]),
            })
            .collect()
    }

    #[test]
    fn penalty_touches_feed_forward_only() {
        let hn = pretrained();
        let data = episodes(4);
        let run = |reg, lambda| {
            let cfg = FinetuneConfig { reg, lambda, ..Default::default() };
            let mut rng = Rng::new(7);
            let m = FinetunedModel::init(&hn, "t", &cfg, &mut rng).unwrap();
            m.step_gradients(&data, &mut rng).unwrap()
        };
        let plain = run(RegKind::None, 0.0);
        let l1 = run(RegKind::L1, 0.01);
        for (a, b) in plain.data.layers.iter().zip(&l1.data.layers) {
            for (x, y) in a.rec_blocks().into_iter().zip(b.rec_blocks()) {
                assert_eq!(x, y);
            }
        }
        for (pl, gl) in hn.stack.layers.iter().zip(&l1.penalty.layers) {
            for (w, g) in pl.ff_blocks().into_iter().zip(gl.ff_blocks()) {
                for (&wv, &gv) in w.as_slice().iter().zip(g.as_slice()) {
                    assert_eq!(gv, 0.01 * wv.signum());
                }
            }
            assert!(gl.rec_blocks().iter().all(|m| m.as_slice().iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let hn = pretrained();
        for reg in [RegKind::L1, RegKind::L2] {
            let g = penalty_grad(&hn.stack, reg, 0.01).flatten();
            let flat = hn.stack.flatten();
            for i in 0..flat.len() {
                let at = |d: f64| {
                    let mut v = flat.clone();
                    v[i] += d;
                    let mut s = hn.stack.clone();
                    s.unflatten_from(&v).unwrap();
                    penalty_value(&s, reg, 0.01)
                };
                let fd = (at(1e-7) - at(-1e-7)) / 2e-7;
                assert!((fd - g[i]).abs() < 1e-6, "{reg:?} {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn zero_epochs_copy_the_stack() {
        let hn = pretrained();
        let cfg = FinetuneConfig {
            train: TrainConfig { epochs: 0, ..Default::default() },
            ..Default::default()
        };
        let (m, _) = finetune(&hn, &episodes(4), &[], "t", &cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(m.stack, hn.stack);
        let mut z = m.clone();
        z.head_w.fill(0.0);
        assert_eq!(z.predict_proba(&episodes(1)[0].series).unwrap(), 0.5);
    }

    #[test]
    fn data_gradient_matches_finite_differences() {
        let mut hn = pretrained();
        hn.stack.dropout_rate = 0.0;
        let data = episodes(3);
        let m = FinetunedModel::init(&hn, "t", &FinetuneConfig::default(), &mut Rng::new(1)).unwrap();
        let g = m.step_gradients(&data, &mut Rng::new(0)).unwrap();
        let mut analytic = g.data.flatten();
        analytic.extend_from_slice(g.head_w.as_slice());
        analytic.extend_from_slice(&g.head_b);
        let flat = m.flatten();
        for i in 0..flat.len() {
            let at = |d: f64| {
                let mut v = flat.clone();
                v[i] += d;
                let mut q = m.clone();
                q.unflatten(&v).unwrap();
                q.step_gradients(&data, &mut Rng::new(0)).unwrap().data_loss
            };
            let fd = (at(1e-5) - at(-1e-5)) / 2e-5;
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-5);
            assert!(rel < 1e-4, "{i}: {fd} vs {}", analytic[i]);
        }
    }
}

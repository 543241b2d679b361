//! TimeNet-style sequence autoencoder: a GRU encoder summarises a univariate
//! series into its final hidden states, and a GRU decoder started from those
//! states reconstructs the series in reverse order.

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EpisodeRecord, MultivariateSeries};
use crate::error::{ensure_shape, Error, Result};
use crate::numerics::{clip_global_norm, dot, AdamState, Rng};
use crate::rnn::{bptt, stack_forward_from, GruStackParams, Mode, SeqView, StateGrads};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub widths: Vec<usize>,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![60, 60, 60],
            dropout: 0.0,
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            clip_norm: 5.0,
        }
    }
}

/// Encoder, decoder and the per-step linear readout of the decoder's top
/// layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqParams {
    pub encoder: GruStackParams,
    /// Driven by a constant zero input of dimension 1.
    pub decoder: GruStackParams,
    pub out_w: Vec<f64>,
    pub out_b: f64,
}

impl Seq2SeqParams {
    pub fn random(widths: &[usize], dropout: f64, rng: &mut Rng) -> Result<Self> {
        let encoder = GruStackParams::random(1, widths, dropout, rng)?;
        let decoder = GruStackParams::random(1, widths, dropout, rng)?;
        let top = *widths.last().unwrap_or(&0);
        let bound = (6.0 / (top + 1) as f64).sqrt();
        let out_w = (0..top).map(|_| rng.uniform(-bound, bound)).collect();
        Ok(Self {
            encoder,
            decoder,
            out_w,
            out_b: 0.0,
        })
    }

    /// Width of the embedding (sum of layer widths).
    pub fn embedding_dim(&self) -> usize {
        self.encoder.total_width()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.encoder.flatten();
        self.decoder.flatten_into(&mut v);
        v.extend_from_slice(&self.out_w);
        v.push(self.out_b);
        v
    }

    pub fn unflatten_from(&mut self, src: &[f64]) -> Result<()> {
        let mut at = self.encoder.unflatten_from(src)?;
        at += self.decoder.unflatten_from(&src[at..])?;
        let k = self.out_w.len();
        ensure_shape!(src.len() == at + k + 1, "flat length {} != {}", src.len(), at + k + 1);
        self.out_w.copy_from_slice(&src[at..at + k]);
        self.out_b = src[at + k];
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            out_w: vec![0.0; self.out_w.len()],
            out_b: 0.0,
        }
    }

    fn add_assign(&mut self, other: &Self) {
        self.encoder.add_assign(&other.encoder);
        self.decoder.add_assign(&other.decoder);
        self.out_w.iter_mut().zip(&other.out_w).for_each(|(a, b)| *a += b);
        self.out_b += other.out_b;
    }
}

struct SeriesPass {
    sq_err: f64,
    grads: Seq2SeqParams,
}

fn masks_for(stack: &GruStackParams, mode: Mode, rng: &mut Rng) -> Result<Vec<Option<Vec<f64>>>> {
    match mode {
        Mode::Train => stack.sample_masks(rng),
        Mode::Eval => Ok(vec![None; stack.num_layers()]),
    }
}

/// Decoder outputs for one series; element `t` is the reconstruction of
/// `x[len - 1 - t]`.
pub fn reconstruct(params: &Seq2SeqParams, x: &[f64]) -> Result<Vec<f64>> {
    let enc = stack_forward_from(SeqView::univariate(x), &params.encoder, None, masks_for(&params.encoder, Mode::Eval, &mut Rng::new(0))?)?;
    let init: Vec<Vec<f64>> = enc.final_states().into_iter().map(|s| s.to_vec()).collect();
    let zeros = vec![0.0; x.len()];
    let dec = stack_forward_from(SeqView::univariate(&zeros), &params.decoder, Some(&init), vec![None; params.decoder.num_layers()])?;
    let top = dec.states.last().expect("at least one layer");
    Ok(top.iter().map(|h| dot(&params.out_w, h) + params.out_b).collect())
}

/// Reconstruction target: the input reversed in time.
pub fn reversed_target(x: &[f64]) -> Vec<f64> {
    x.iter().rev().copied().collect()
}

/// Mean squared error over all real timesteps of a batch, each series
/// compared with its reversal.
pub fn reconstruction_mse(params: &Seq2SeqParams, batch: &[Vec<f64>]) -> Result<f64> {
    let mut se = 0.0;
    let mut n = 0usize;
    for x in batch {
        let y = reconstruct(params, x)?;
        se += y.iter().zip(reversed_target(x)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        n += x.len();
    }
    if n == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    Ok(se / n as f64)
}

/// Squared error of one series and its gradient scaled by `weight`.
fn series_pass(params: &Seq2SeqParams, x: &[f64], weight: f64, mode: Mode, rng: &mut Rng) -> Result<SeriesPass> {
    let enc_masks = masks_for(&params.encoder, mode, rng)?;
    let dec_masks = masks_for(&params.decoder, mode, rng)?;
    let enc = stack_forward_from(SeqView::univariate(x), &params.encoder, None, enc_masks)?;
    let init: Vec<Vec<f64>> = enc.final_states().into_iter().map(|s| s.to_vec()).collect();
    let zeros = vec![0.0; x.len()];
    let dec = stack_forward_from(SeqView::univariate(&zeros), &params.decoder, Some(&init), dec_masks)?;

    let mut grads = params.zeros_like();
    let mut dstates = StateGrads::zeros(&dec);
    let top = dec.num_layers() - 1;
    let mut sq_err = 0.0;
    let n = x.len();
    for (t, h) in dec.states[top].iter().enumerate() {
        let err = dot(&params.out_w, h) + params.out_b - x[n - 1 - t];
        sq_err += err * err;
        let g = 2.0 * err * weight;
        grads.out_w.iter_mut().zip(h).for_each(|(a, b)| *a += g * b);
        grads.out_b += g;
        let dh: Vec<f64> = params.out_w.iter().map(|w| g * w).collect();
        dstates.add(top, t, &dh)?;
    }
    let dec_grads = bptt(&dec, &params.decoder, &dstates)?;
    let mut enc_states = StateGrads::zeros(&enc);
    for (l, g) in dec_grads.initial.iter().enumerate() {
        enc_states.add(l, n - 1, g)?;
    }
    let enc_grads = bptt(&enc, &params.encoder, &enc_states)?;
    grads.decoder = dec_grads.params;
    grads.encoder = enc_grads.params;
    Ok(SeriesPass { sq_err, grads })
}

/// Trained model plus the mean training reconstruction error of every epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainedAutoencoder {
    pub params: Seq2SeqParams,
    pub loss_log: Vec<f64>,
}

/// Trains on a corpus of univariate series with Adam minibatches.
pub fn train_autoencoder(corpus: &[Vec<f64>], cfg: &AutoencoderConfig, rng: &mut Rng) -> Result<TrainedAutoencoder> {
    if corpus.is_empty() {
        return Err(Error::Domain("autoencoder corpus is empty".into()));
    }
    if corpus.iter().any(|s| s.is_empty()) {
        return Err(Error::Domain("autoencoder corpus contains an empty series".into()));
    }
    if corpus.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("autoencoder corpus contains non-finite values".into()));
    }
    if cfg.widths.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("autoencoder needs at least one layer and batch_size >= 1".into()));
    }
    let mut params = Seq2SeqParams::random(&cfg.widths, cfg.dropout, rng)?;
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len(), cfg.lr);
    let mode = if cfg.dropout > 0.0 { Mode::Train } else { Mode::Eval };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut loss_log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_se = 0.0;
        let mut epoch_n = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let steps: usize = batch.iter().map(|&i| corpus[i].len()).sum();
            let weight = 1.0 / steps as f64;
            let mut total = params.zeros_like();
            for &i in batch {
                let pass = series_pass(&params, &corpus[i], weight, mode, rng)?;
                epoch_se += pass.sq_err;
                total.add_assign(&pass.grads);
            }
            epoch_n += steps;
            let mut g = total.flatten();
            clip_global_norm(&mut g, cfg.clip_norm);
            adam.step(&mut flat, &g)?;
            params.unflatten_from(&flat)?;
        }
        let loss = epoch_se / epoch_n as f64;
        if !loss.is_finite() {
            return Err(Error::Domain(format!("autoencoder loss diverged at epoch {epoch}")));
        }
        debug!("autoencoder epoch {epoch}: mse {loss:.6}");
        loss_log.push(loss);
    }
    Ok(TrainedAutoencoder { params, loss_log })
}

/// Concatenated final hidden states of every encoder layer.
pub fn encode_univariate(series: &[f64], encoder: &GruStackParams) -> Result<Vec<f64>> {
    ensure_shape!(encoder.input_dim() == 1, "encoder expects {} inputs, not a univariate series", encoder.input_dim());
    let trace = stack_forward_from(SeqView::univariate(series), encoder, None, vec![None; encoder.num_layers()])?;
    Ok(trace.final_concat())
}

/// Encodes each channel independently and concatenates the embeddings in
/// channel order, giving `n * c` features.
pub fn extract_features_multichannel(x: &MultivariateSeries, encoder: &GruStackParams) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.n_channels() * encoder.total_width());
    for c in 0..x.n_channels() {
        out.extend(encode_univariate(&x.channel(c), encoder)?);
    }
    Ok(out)
}

/// Per-channel standardisation fitted on training episodes. Channels with
/// (near) zero spread are passed through untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelScaler {
    pub fn fit(records: &[EpisodeRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Domain("cannot fit a scaler on no episodes".into()))?;
        let n = first.series.n_channels();
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        let mut count = 0usize;
        for r in records {
            if r.series.n_channels() != n {
                return Err(Error::Data(format!("episode {} has {} channels, expected {n}", r.id(), r.series.n_channels())));
            }
            for t in 0..r.series.len() {
                for (c, v) in r.series.step(t).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += r.series.len();
        }
        let count = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt())
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![0.0; n],
        }
    }

    pub fn apply(&self, x: &MultivariateSeries) -> Result<MultivariateSeries> {
        if x.n_channels() != self.mean.len() {
            return Err(Error::Data(format!("series has {} channels, scaler {}", x.n_channels(), self.mean.len())));
        }
        let mut out = x.clone();
        for c in 0..self.mean.len() {
            let (m, s) = (self.mean[c], self.std[c]);
            if s > 1e-12 {
                out.map_channel(c, |v| (v - m) / s);
            }
        }
        Ok(out)
    }
}

/// Feature vectors for many series, computed in parallel, in input order.
pub fn extract_batch(series: &[MultivariateSeries], encoder: &GruStackParams, scaler: &ChannelScaler) -> Result<Vec<Vec<f64>>> {
    series
        .par_iter()
        .map(|s| extract_features_multichannel(&scaler.apply(s)?, encoder))
        .collect()
}

/// Warns when the five-epoch moving average of the loss rises.
pub fn check_loss_trend(log: &[f64]) -> bool {
    let smooth: Vec<f64> = log.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let ok = smooth.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9));
    if !ok {
        warn!("smoothed autoencoder loss is not monotone");
    }
    ok
}

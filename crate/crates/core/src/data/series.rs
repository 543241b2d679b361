use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Result};
use crate::rnn::SeqView;

/// An `n`-channel series sampled at a fixed one-hour interval, stored
/// time-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultivariateSeries {
    channel_names: Vec<String>,
    /// Indices of 0/1 channels marking imputed or padded values.
    mask_channels: Vec<usize>,
    len: usize,
    values: Vec<f64>,
}

impl MultivariateSeries {
    pub fn new(
        channel_names: Vec<String>,
        mask_channels: Vec<usize>,
        len: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let n = channel_names.len();
        ensure_shape!(n > 0, "a series needs at least one channel");
        ensure_shape!(
            values.len() == n * len,
            "{} values for {n} channels x {len} steps",
            values.len()
        );
        ensure_shape!(
            mask_channels.iter().all(|&m| m < n),
            "mask channel index out of range"
        );
        Ok(Self {
            channel_names,
            mask_channels,
            len,
            values,
        })
    }

    /// Builds a series from per-channel columns.
    pub fn from_channels(channel_names: Vec<String>, mask_channels: Vec<usize>, columns: &[Vec<f64>]) -> Result<Self> {
        ensure_shape!(
            columns.len() == channel_names.len(),
            "{} columns for {} channel names",
            columns.len(),
            channel_names.len()
        );
        let len = columns.first().map_or(0, |c| c.len());
        ensure_shape!(columns.iter().all(|c| c.len() == len), "channels differ in length");
        let n = columns.len();
        let mut values = vec![0.0; n * len];
        for (c, col) in columns.iter().enumerate() {
            for (t, &v) in col.iter().enumerate() {
                values[t * n + c] = v;
            }
        }
        Self::new(channel_names, mask_channels, len, values)
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn mask_channels(&self) -> &[usize] {
        &self.mask_channels
    }

    #[inline]
    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.n_channels() + c]
    }

    pub fn set(&mut self, t: usize, c: usize, v: f64) {
        let n = self.n_channels();
        self.values[t * n + c] = v;
    }

    pub fn step(&self, t: usize) -> &[f64] {
        let n = self.n_channels();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.value(t, c)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn view(&self) -> SeqView<'_> {
        SeqView::new(&self.values, self.n_channels()).expect("series shape is validated on construction")
    }

    /// Steps `[start, end)`; `end` is clamped to the length.
    pub fn slice(&self, start: usize, end: usize) -> MultivariateSeries {
        let end = end.min(self.len);
        let start = start.min(end);
        let n = self.n_channels();
        Self {
            channel_names: self.channel_names.clone(),
            mask_channels: self.mask_channels.clone(),
            len: end - start,
            values: self.values[start * n..end * n].to_vec(),
        }
    }

    /// Appends zero steps until `len` is reached, setting mask channels to 1
    /// on the padded steps.
    pub fn pad_to(&mut self, len: usize) {
        let n = self.n_channels();
        while self.len < len {
            let start = self.values.len();
            self.values.extend(std::iter::repeat_n(0.0, n));
            for &m in &self.mask_channels {
                self.values[start + m] = 1.0;
            }
            self.len += 1;
        }
    }

    /// Applies `f` to every value of channel `c`.
    pub fn map_channel(&mut self, c: usize, mut f: impl FnMut(f64) -> f64) {
        let n = self.n_channels();
        for t in 0..self.len {
            let v = &mut self.values[t * n + c];
            *v = f(*v);
        }
    }
}

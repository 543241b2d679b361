use serde::{Deserialize, Serialize};

use super::cell::{cell_backward, cell_forward_unchecked, GateCache, GruLayerParams};
use crate::error::{ensure_shape, Error, Result};
use crate::numerics::{dropout_mask, Rng};

/// Borrowed time-major sequence: `len` steps of `dim` values each.
#[derive(Clone, Copy, Debug)]
pub struct SeqView<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> SeqView<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        ensure_shape!(dim > 0, "sequence dimension must be positive");
        ensure_shape!(
            data.len() % dim == 0,
            "{} values do not split into steps of {dim}",
            data.len()
        );
        Ok(Self { data, dim })
    }

    pub fn univariate(data: &'a [f64]) -> Self {
        Self { data, dim: 1 }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn step(&self, t: usize) -> &'a [f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// A stack of GRU layers; layer `l` reads the states of layer `l − 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruStackParams {
    pub layers: Vec<GruLayerParams>,
    pub dropout_rate: f64,
}

impl GruStackParams {
    pub fn new(layers: Vec<GruLayerParams>, dropout_rate: f64) -> Result<Self> {
        ensure_shape!(!layers.is_empty(), "a GRU stack needs at least one layer");
        for w in layers.windows(2) {
            ensure_shape!(
                w[1].input_dim() == w[0].units(),
                "layer input {} does not match previous width {}",
                w[1].input_dim(),
                w[0].units()
            );
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Domain(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        Ok(Self {
            layers,
            dropout_rate,
        })
    }

    pub fn random(input_dim: usize, widths: &[usize], dropout_rate: f64, rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for &w in widths {
            layers.push(GruLayerParams::random(prev, w, rng));
            prev = w;
        }
        Self::new(layers, dropout_rate)
    }

    pub fn zeros(input_dim: usize, widths: &[usize], dropout_rate: f64) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for &w in widths {
            layers.push(GruLayerParams::zeros(prev, w));
            prev = w;
        }
        Self::new(layers, dropout_rate)
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| GruLayerParams::zeros(l.input_dim(), l.units()))
                .collect(),
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.units()).collect()
    }

    pub fn top_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.units())
    }

    pub fn total_width(&self) -> usize {
        self.layers.iter().map(|l| l.units()).sum()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.flatten_into(&mut out);
        out
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            l.flatten_into(out);
        }
    }

    pub fn unflatten_from(&mut self, src: &[f64]) -> Result<usize> {
        let mut off = 0;
        for l in &mut self.layers {
            off += l.unflatten_from(&src[off..])?;
        }
        Ok(off)
    }

    pub fn add_assign(&mut self, other: &GruStackParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.layers.iter_mut().for_each(|l| l.scale(s));
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.is_finite())
    }

    /// One inverted-dropout mask per layer input, held fixed across the
    /// timesteps of a sequence.
    pub fn sample_masks(&self, rng: &mut Rng) -> Result<Vec<Option<Vec<f64>>>> {
        if self.dropout_rate == 0.0 {
            return Ok(vec![None; self.layers.len()]);
        }
        self.layers
            .iter()
            .map(|l| dropout_mask(l.input_dim(), self.dropout_rate, rng).map(Some))
            .collect()
    }
}

/// Per-layer, per-step hidden states of one forward pass plus everything
/// the backward pass needs.
#[derive(Clone, Debug)]
pub struct HiddenTrace {
    /// `states[l][t]` is the output of layer `l` after step `t`.
    pub states: Vec<Vec<Vec<f64>>>,
    pub initial: Vec<Vec<f64>>,
    pub masks: Vec<Option<Vec<f64>>>,
    caches: Vec<Vec<GateCache>>,
}

impl HiddenTrace {
    pub fn len(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_layers(&self) -> usize {
        self.states.len()
    }

    /// Final state of every layer, in layer order.
    pub fn final_states(&self) -> Vec<&[f64]> {
        self.states
            .iter()
            .map(|s| s.last().map(|v| v.as_slice()).unwrap_or(&[]))
            .collect()
    }

    pub fn final_top(&self) -> &[f64] {
        self.states
            .last()
            .and_then(|s| s.last())
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    /// `[z_τ,1, …, z_τ,L]`
    pub fn final_concat(&self) -> Vec<f64> {
        self.final_states().concat()
    }
}

/// Forward pass with zero initial states. In train mode one dropout mask
/// per layer is drawn from `rng`; eval mode uses no masks and leaves `rng`
/// untouched.
pub fn stack_forward(
    seq: SeqView<'_>,
    params: &GruStackParams,
    mode: Mode,
    rng: &mut Rng,
) -> Result<HiddenTrace> {
    let masks = match mode {
        Mode::Train => params.sample_masks(rng)?,
        Mode::Eval => vec![None; params.layers.len()],
    };
    stack_forward_from(seq, params, None, masks)
}

/// Forward pass with explicit initial states and masks.
pub fn stack_forward_from(
    seq: SeqView<'_>,
    params: &GruStackParams,
    initial: Option<&[Vec<f64>]>,
    masks: Vec<Option<Vec<f64>>>,
) -> Result<HiddenTrace> {
    if seq.is_empty() {
        return Err(Error::Domain("cannot run a GRU over an empty series".into()));
    }
    ensure_shape!(
        seq.dim() == params.input_dim(),
        "series has {} channels, stack expects {}",
        seq.dim(),
        params.input_dim()
    );
    ensure_shape!(
        masks.len() == params.layers.len(),
        "{} masks for {} layers",
        masks.len(),
        params.layers.len()
    );
    for (m, l) in masks.iter().zip(&params.layers) {
        if let Some(m) = m {
            ensure_shape!(m.len() == l.input_dim(), "mask length {} != layer input {}", m.len(), l.input_dim());
        }
    }
    let initial: Vec<Vec<f64>> = match initial {
        Some(init) => {
            ensure_shape!(init.len() == params.layers.len(), "initial states for {} layers, stack has {}", init.len(), params.layers.len());
            for (s, l) in init.iter().zip(&params.layers) {
                ensure_shape!(s.len() == l.units(), "initial state length {} != {} units", s.len(), l.units());
            }
            init.to_vec()
        }
        None => params.layers.iter().map(|l| vec![0.0; l.units()]).collect(),
    };

    let steps = seq.len();
    let mut states: Vec<Vec<Vec<f64>>> = Vec::with_capacity(params.layers.len());
    let mut caches: Vec<Vec<GateCache>> = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let mut layer_states = Vec::with_capacity(steps);
        let mut layer_caches = Vec::with_capacity(steps);
        let mut h = initial[l].clone();
        for t in 0..steps {
            let x: &[f64] = if l == 0 { seq.step(t) } else { &states[l - 1][t] };
            let (next, cache) = cell_forward_unchecked(x, &h, layer, masks[l].as_deref());
            layer_caches.push(cache);
            h = next;
            layer_states.push(h.clone());
        }
        states.push(layer_states);
        caches.push(layer_caches);
    }
    Ok(HiddenTrace {
        states,
        initial,
        masks,
        caches,
    })
}

/// Loss gradients w.r.t. hidden states, indexed `[layer][t]`.
#[derive(Clone, Debug)]
pub struct StateGrads {
    grads: Vec<Vec<Vec<f64>>>,
}

impl StateGrads {
    pub fn zeros(trace: &HiddenTrace) -> Self {
        Self {
            grads: trace
                .states
                .iter()
                .map(|layer| layer.iter().map(|s| vec![0.0; s.len()]).collect())
                .collect(),
        }
    }

    /// Gradient only on the final state of the top layer.
    pub fn final_top(trace: &HiddenTrace, g: &[f64]) -> Result<Self> {
        let mut s = Self::zeros(trace);
        let top = trace.num_layers() - 1;
        let last = trace.len() - 1;
        s.add(top, last, g)?;
        Ok(s)
    }

    pub fn add(&mut self, layer: usize, t: usize, g: &[f64]) -> Result<()> {
        let slot = self
            .grads
            .get_mut(layer)
            .and_then(|l| l.get_mut(t))
            .ok_or_else(|| Error::Structural(format!("no state at layer {layer}, step {t}")))?;
        ensure_shape!(slot.len() == g.len(), "state gradient length {} != {}", g.len(), slot.len());
        slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Result of backpropagation through time.
#[derive(Clone, Debug)]
pub struct BpttGrads {
    pub params: GruStackParams,
    /// Gradient w.r.t. each layer's initial state.
    pub initial: Vec<Vec<f64>>,
}

/// Exact gradients of a loss whose derivative w.r.t. the hidden states is
/// `out_grads`. Only data-loss gradients are produced; penalties are the
/// caller's business.
pub fn bptt(trace: &HiddenTrace, params: &GruStackParams, out_grads: &StateGrads) -> Result<BpttGrads> {
    ensure_shape!(
        trace.num_layers() == params.layers.len(),
        "trace has {} layers, params {}",
        trace.num_layers(),
        params.layers.len()
    );
    ensure_shape!(
        out_grads.grads.len() == trace.num_layers()
            && out_grads.grads.iter().all(|l| l.len() == trace.len()),
        "state gradients do not match the trace"
    );
    for (l, layer) in params.layers.iter().enumerate() {
        ensure_shape!(
            trace.states[l].first().map_or(0, |s| s.len()) == layer.units(),
            "trace layer {l} width differs from params"
        );
    }

    let steps = trace.len();
    let mut grads = params.zeros_like();
    let mut initial = Vec::with_capacity(params.layers.len());
    // gradient flowing into layer l's states from layer l+1's inputs
    let mut from_above: Option<Vec<Vec<f64>>> = None;

    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let units = layer.units();
        let mut dh_next = vec![0.0; units];
        let mut dh_prev = vec![0.0; units];
        let mut dx_steps = vec![vec![0.0; layer.input_dim()]; steps];
        for t in (0..steps).rev() {
            let mut dh = out_grads.grads[l][t].clone();
            dh.iter_mut().zip(&dh_next).for_each(|(a, b)| *a += b);
            if let Some(above) = &from_above {
                dh.iter_mut().zip(&above[t]).for_each(|(a, b)| *a += b);
            }
            cell_backward(
                layer,
                &trace.caches[l][t],
                &dh,
                &mut grads.layers[l],
                &mut dh_prev,
                &mut dx_steps[t],
            );
            std::mem::swap(&mut dh_next, &mut dh_prev);
        }
        initial.push(dh_next);
        if let Some(mask) = &trace.masks[l] {
            for dx in &mut dx_steps {
                dx.iter_mut().zip(mask).for_each(|(a, m)| *a *= m);
            }
        }
        from_above = Some(dx_steps);
    }
    initial.reverse();
    Ok(BpttGrads {
        params: grads,
        initial,
    })
}

#[cfg(test)]
mod tests {
    use super::super::cell::gru_cell_forward;
    use super::*;

    fn rand_seq(len: usize, dim: usize, rng: &mut Rng) -> Vec<f64> {
        (0..len * dim).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    #[test]
    fn empty_series_is_domain_error() {
        let p = GruStackParams::zeros(2, &[3], 0.0).unwrap();
        let err = stack_forward(SeqView::new(&[], 2).unwrap(), &p, Mode::Eval, &mut Rng::new(0));
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn zero_weights_single_step() {
        let p = GruStackParams::zeros(3, &[4, 2], 0.0).unwrap();
        let tr = stack_forward(SeqView::new(&[5.0, -1.0, 2.0], 3).unwrap(), &p, Mode::Eval, &mut Rng::new(0)).unwrap();
        assert!(tr.states.iter().flatten().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn second_layer_composes_cells() {
        let mut rng = Rng::new(12);
        let p = GruStackParams::random(2, &[3, 2], 0.0, &mut rng).unwrap();
        let data = rand_seq(5, 2, &mut rng);
        let tr = stack_forward(SeqView::new(&data, 2).unwrap(), &p, Mode::Eval, &mut rng).unwrap();
        let mut h = vec![0.0; 2];
        for t in 0..5 {
            h = gru_cell_forward(&tr.states[0][t], &h, &p.layers[1], None).unwrap().0;
            assert_eq!(h, tr.states[1][t]);
        }
    }

    #[test]
    fn channel_mismatch() {
        let p = GruStackParams::zeros(3, &[2], 0.0).unwrap();
        assert!(stack_forward(SeqView::new(&[1.0, 2.0], 2).unwrap(), &p, Mode::Eval, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn bad_stack_shapes() {
        let a = GruLayerParams::zeros(2, 3);
        let b = GruLayerParams::zeros(4, 3);
        assert!(GruStackParams::new(vec![a, b], 0.0).is_err());
        assert!(GruStackParams::new(vec![], 0.0).is_err());
        assert!(GruStackParams::zeros(1, &[1], 1.0).is_err());
    }

    #[test]
    fn train_equals_eval_without_dropout() {
        let mut rng = Rng::new(3);
        let p = GruStackParams::random(2, &[3, 3], 0.0, &mut rng).unwrap();
        let data = rand_seq(6, 2, &mut rng);
        let s = SeqView::new(&data, 2).unwrap();
        let a = stack_forward(s, &p, Mode::Train, &mut Rng::new(1)).unwrap();
        let b = stack_forward(s, &p, Mode::Eval, &mut Rng::new(2)).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn dropout_masks_fixed_across_steps() {
        let mut rng = Rng::new(3);
        let p = GruStackParams::random(4, &[3, 3], 0.5, &mut rng).unwrap();
        let data = rand_seq(6, 4, &mut rng);
        let tr = stack_forward(SeqView::new(&data, 4).unwrap(), &p, Mode::Train, &mut Rng::new(1)).unwrap();
        let m0 = tr.masks[0].as_ref().unwrap();
        for t in 0..6 {
            for (i, &m) in m0.iter().enumerate() {
                assert_eq!(tr.caches[0][t].x[i], data[t * 4 + i] * m);
            }
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let mut rng = Rng::new(5);
        let p = GruStackParams::random(2, &[3, 2], 0.0, &mut rng).unwrap();
        let data = rand_seq(4, 2, &mut rng);
        let tr = stack_forward(SeqView::new(&data, 2).unwrap(), &p, Mode::Eval, &mut rng).unwrap();
        let g = bptt(&tr, &p, &StateGrads::zeros(&tr)).unwrap();
        assert!(g.params.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bptt_rejects_mismatched_params() {
        let mut rng = Rng::new(5);
        let p = GruStackParams::random(2, &[3], 0.0, &mut rng).unwrap();
        let q = GruStackParams::random(2, &[4], 0.0, &mut rng).unwrap();
        let tr = stack_forward(SeqView::new(&[0.1, 0.2], 2).unwrap(), &p, Mode::Eval, &mut rng).unwrap();
        assert!(bptt(&tr, &q, &StateGrads::zeros(&tr)).is_err());
    }

    #[test]
    fn flatten_roundtrip() {
        let mut rng = Rng::new(77);
        let p = GruStackParams::random(3, &[4, 2], 0.3, &mut rng).unwrap();
        let mut q = p.zeros_like();
        q.unflatten_from(&p.flatten()).unwrap();
        assert_eq!(p, q);
    }
}

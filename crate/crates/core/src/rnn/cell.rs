use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Result};
use crate::numerics::{glorot_init, sigmoid, Matrix, Rng};

/// Weights of one GRU layer.
///
/// Every gate matrix is stored as two blocks: the feed-forward block
/// multiplying the (dropped-out) input from the layer below and the
/// recurrent block multiplying the layer's own previous state. The split
/// lets fine-tuning penalise the feed-forward weights alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruLayerParams {
    pub w_r_ff: Matrix,
    pub w_u_ff: Matrix,
    pub w_p_ff: Matrix,
    pub w_r_rec: Matrix,
    pub w_u_rec: Matrix,
    pub w_p_rec: Matrix,
    pub b_r: Vec<f64>,
    pub b_u: Vec<f64>,
    pub b_p: Vec<f64>,
}

impl GruLayerParams {
    pub fn zeros(input_dim: usize, units: usize) -> Self {
        Self {
            w_r_ff: Matrix::zeros(units, input_dim),
            w_u_ff: Matrix::zeros(units, input_dim),
            w_p_ff: Matrix::zeros(units, input_dim),
            w_r_rec: Matrix::zeros(units, units),
            w_u_rec: Matrix::zeros(units, units),
            w_p_rec: Matrix::zeros(units, units),
            b_r: vec![0.0; units],
            b_u: vec![0.0; units],
            b_p: vec![0.0; units],
        }
    }

    /// Glorot-uniform weights over the concatenated `[input, state]` fan-in,
    /// zero biases.
    pub fn random(input_dim: usize, units: usize, rng: &mut Rng) -> Self {
        let mut gate = || {
            let full = glorot_init(units, input_dim + units, rng);
            let ff = Matrix::from_fn(units, input_dim, |r, c| full.get(r, c));
            let rec = Matrix::from_fn(units, units, |r, c| full.get(r, input_dim + c));
            (ff, rec)
        };
        let (w_r_ff, w_r_rec) = gate();
        let (w_u_ff, w_u_rec) = gate();
        let (w_p_ff, w_p_rec) = gate();
        Self {
            w_r_ff,
            w_u_ff,
            w_p_ff,
            w_r_rec,
            w_u_rec,
            w_p_rec,
            b_r: vec![0.0; units],
            b_u: vec![0.0; units],
            b_p: vec![0.0; units],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_r_ff.cols()
    }

    pub fn units(&self) -> usize {
        self.w_r_ff.rows()
    }

    pub fn ff_blocks(&self) -> [&Matrix; 3] {
        [&self.w_r_ff, &self.w_u_ff, &self.w_p_ff]
    }

    pub fn ff_blocks_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.w_r_ff, &mut self.w_u_ff, &mut self.w_p_ff]
    }

    pub fn rec_blocks(&self) -> [&Matrix; 3] {
        [&self.w_r_rec, &self.w_u_rec, &self.w_p_rec]
    }

    pub fn biases(&self) -> [&Vec<f64>; 3] {
        [&self.b_r, &self.b_u, &self.b_p]
    }

    fn slices(&self) -> [&[f64]; 9] {
        [
            self.w_r_ff.as_slice(),
            self.w_u_ff.as_slice(),
            self.w_p_ff.as_slice(),
            self.w_r_rec.as_slice(),
            self.w_u_rec.as_slice(),
            self.w_p_rec.as_slice(),
            &self.b_r,
            &self.b_u,
            &self.b_p,
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.w_r_ff.as_mut_slice(),
            self.w_u_ff.as_mut_slice(),
            self.w_p_ff.as_mut_slice(),
            self.w_r_rec.as_mut_slice(),
            self.w_u_rec.as_mut_slice(),
            self.w_p_rec.as_mut_slice(),
            &mut self.b_r,
            &mut self.b_u,
            &mut self.b_p,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for s in self.slices() {
            out.extend_from_slice(s);
        }
    }

    /// Overwrites the weights from `src`, returning how many values were read.
    pub fn unflatten_from(&mut self, src: &[f64]) -> Result<usize> {
        let n = self.num_params();
        ensure_shape!(src.len() >= n, "layer needs {n} values, {} left", src.len());
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&src[off..off + s.len()]);
            off += s.len();
        }
        Ok(off)
    }

    pub fn add_assign(&mut self, other: &GruLayerParams) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.slices_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Activations of one cell step kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GateCache {
    /// Input after the dropout mask.
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    /// Proposed state.
    pub p: Vec<f64>,
}

/// One GRU step.
///
/// ```text
/// r  = σ(W_r·[m⊙x, h] + b_r)
/// u  = σ(W_u·[m⊙x, h] + b_u)
/// z̃  = tanh(W_p·[m⊙x, r⊙h] + b_p)
/// h' = (1 − u)⊙h + u⊙z̃
/// ```
///
/// `mask` multiplies the non-recurrent input only.
pub fn gru_cell_forward(
    x: &[f64],
    h_prev: &[f64],
    params: &GruLayerParams,
    mask: Option<&[f64]>,
) -> Result<(Vec<f64>, GateCache)> {
    let units = params.units();
    ensure_shape!(
        x.len() == params.input_dim(),
        "cell input has {} entries, layer expects {}",
        x.len(),
        params.input_dim()
    );
    ensure_shape!(
        h_prev.len() == units,
        "previous state has {} entries, layer has {units} units",
        h_prev.len()
    );
    if let Some(m) = mask {
        ensure_shape!(m.len() == x.len(), "mask length {} != input {}", m.len(), x.len());
    }
    Ok(cell_forward_unchecked(x, h_prev, params, mask))
}

pub(crate) fn cell_forward_unchecked(
    x: &[f64],
    h_prev: &[f64],
    params: &GruLayerParams,
    mask: Option<&[f64]>,
) -> (Vec<f64>, GateCache) {
    let units = params.units();
    let x: Vec<f64> = match mask {
        Some(m) => x.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => x.to_vec(),
    };

    let mut r = params.b_r.clone();
    params.w_r_ff.matvec_acc(&x, &mut r);
    params.w_r_rec.matvec_acc(h_prev, &mut r);
    r.iter_mut().for_each(|v| *v = sigmoid(*v));

    let mut u = params.b_u.clone();
    params.w_u_ff.matvec_acc(&x, &mut u);
    params.w_u_rec.matvec_acc(h_prev, &mut u);
    u.iter_mut().for_each(|v| *v = sigmoid(*v));

    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let mut p = params.b_p.clone();
    params.w_p_ff.matvec_acc(&x, &mut p);
    params.w_p_rec.matvec_acc(&rh, &mut p);
    p.iter_mut().for_each(|v| *v = v.tanh());

    let h: Vec<f64> = (0..units)
        .map(|i| (1.0 - u[i]) * h_prev[i] + u[i] * p[i])
        .collect();
    let cache = GateCache {
        x,
        h_prev: h_prev.to_vec(),
        r,
        u,
        p,
    };
    (h, cache)
}

/// Backward through one step. Accumulates weight gradients into `grads`,
/// writes the gradient w.r.t. the previous state into `dh_prev` and w.r.t.
/// the masked input into `dx` (both overwritten).
pub(crate) fn cell_backward(
    params: &GruLayerParams,
    cache: &GateCache,
    dh: &[f64],
    grads: &mut GruLayerParams,
    dh_prev: &mut [f64],
    dx: &mut [f64],
) {
    let units = params.units();
    let mut da_p = vec![0.0; units];
    let mut da_u = vec![0.0; units];
    for i in 0..units {
        let u = cache.u[i];
        let p = cache.p[i];
        dh_prev[i] = dh[i] * (1.0 - u);
        da_p[i] = dh[i] * u * (1.0 - p * p);
        da_u[i] = dh[i] * (p - cache.h_prev[i]) * u * (1.0 - u);
    }

    let rh: Vec<f64> = cache
        .r
        .iter()
        .zip(&cache.h_prev)
        .map(|(a, b)| a * b)
        .collect();
    grads.w_p_ff.add_outer(&da_p, &cache.x);
    grads.w_p_rec.add_outer(&da_p, &rh);
    grads.b_p.iter_mut().zip(&da_p).for_each(|(g, d)| *g += d);

    let mut d_rh = vec![0.0; units];
    params.w_p_rec.matvec_t_acc(&da_p, &mut d_rh);
    let mut da_r = vec![0.0; units];
    for i in 0..units {
        let r = cache.r[i];
        dh_prev[i] += d_rh[i] * r;
        da_r[i] = d_rh[i] * cache.h_prev[i] * r * (1.0 - r);
    }

    grads.w_r_ff.add_outer(&da_r, &cache.x);
    grads.w_r_rec.add_outer(&da_r, &cache.h_prev);
    grads.b_r.iter_mut().zip(&da_r).for_each(|(g, d)| *g += d);
    grads.w_u_ff.add_outer(&da_u, &cache.x);
    grads.w_u_rec.add_outer(&da_u, &cache.h_prev);
    grads.b_u.iter_mut().zip(&da_u).for_each(|(g, d)| *g += d);

    params.w_r_rec.matvec_t_acc(&da_r, dh_prev);
    params.w_u_rec.matvec_t_acc(&da_u, dh_prev);

    dx.iter_mut().for_each(|v| *v = 0.0);
    params.w_r_ff.matvec_t_acc(&da_r, dx);
    params.w_u_ff.matvec_t_acc(&da_u, dx);
    params.w_p_ff.matvec_t_acc(&da_p, dx);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_halve_state() {
        let p = GruLayerParams::zeros(3, 2);
        let (h, _) = gru_cell_forward(&[1.0, -2.0, 5.0], &[0.8, -0.4], &p, None).unwrap();
        assert_eq!(h, vec![0.4, -0.2]);
    }

    #[test]
    fn zero_state_is_fixed_point_of_zero_weights() {
        let p = GruLayerParams::zeros(1, 4);
        let (h, _) = gru_cell_forward(&[3.0], &[0.0; 4], &p, None).unwrap();
        assert_eq!(h, vec![0.0; 4]);
    }

    /// Straight-line scalar evaluation of the GRU step for a 2-unit,
    /// 1-input cell, written without any matrix helpers.
    fn scalar_oracle(p: &GruLayerParams, x: f64, h: [f64; 2]) -> [f64; 2] {
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let w = |m: &Matrix, r: usize, c: usize| m.get(r, c);
        let mut r = [0.0; 2];
        let mut u = [0.0; 2];
        for i in 0..2 {
            r[i] = s(w(&p.w_r_ff, i, 0) * x
                + w(&p.w_r_rec, i, 0) * h[0]
                + w(&p.w_r_rec, i, 1) * h[1]
                + p.b_r[i]);
            u[i] = s(w(&p.w_u_ff, i, 0) * x
                + w(&p.w_u_rec, i, 0) * h[0]
                + w(&p.w_u_rec, i, 1) * h[1]
                + p.b_u[i]);
        }
        let mut out = [0.0; 2];
        for i in 0..2 {
            let cand = (w(&p.w_p_ff, i, 0) * x
                + w(&p.w_p_rec, i, 0) * r[0] * h[0]
                + w(&p.w_p_rec, i, 1) * r[1] * h[1]
                + p.b_p[i])
                .tanh();
            out[i] = (1.0 - u[i]) * h[i] + u[i] * cand;
        }
        out
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = Rng::new(31);
        for _ in 0..10 {
            let mut p = GruLayerParams::random(1, 2, &mut rng);
            for b in [&mut p.b_r, &mut p.b_u, &mut p.b_p] {
                b.iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
            }
            let x = rng.uniform(-2.0, 2.0);
            let h = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
            let (got, _) = gru_cell_forward(&[x], &h, &p, None).unwrap();
            let want = scalar_oracle(&p, x, h);
            for i in 0..2 {
                assert!((got[i] - want[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mask_touches_input_only() {
        let mut rng = Rng::new(4);
        let p = GruLayerParams::random(2, 3, &mut rng);
        let h = [0.1, -0.2, 0.3];
        let (masked, _) = gru_cell_forward(&[1.0, 2.0], &h, &p, Some(&[0.0, 0.0])).unwrap();
        let (zero_in, _) = gru_cell_forward(&[0.0, 0.0], &h, &p, None).unwrap();
        assert_eq!(masked, zero_in);
    }

    #[test]
    fn shape_errors() {
        let p = GruLayerParams::zeros(2, 3);
        assert!(gru_cell_forward(&[1.0], &[0.0; 3], &p, None).is_err());
        assert!(gru_cell_forward(&[1.0, 1.0], &[0.0; 2], &p, None).is_err());
        assert!(gru_cell_forward(&[1.0, 1.0], &[0.0; 3], &p, Some(&[1.0])).is_err());
    }

    #[test]
    fn flatten_roundtrip() {
        let mut rng = Rng::new(8);
        let p = GruLayerParams::random(3, 4, &mut rng);
        let mut flat = Vec::new();
        p.flatten_into(&mut flat);
        assert_eq!(flat.len(), p.num_params());
        let mut q = GruLayerParams::zeros(3, 4);
        assert_eq!(q.unflatten_from(&flat).unwrap(), flat.len());
        assert_eq!(p, q);
    }
}

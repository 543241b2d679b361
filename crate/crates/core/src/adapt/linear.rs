//! L1-penalised linear models fitted by accelerated proximal gradient:
//! least squares (LASSO) and logistic regression.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::numerics::{dot, sigmoid, softplus, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Squared,
    Logistic,
}

/// How the weight vector maps back onto raw input channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "lowercase")]
pub enum FeatureLayout {
    Flat { m: usize },
    /// `n` blocks of `c` consecutive weights, one block per channel.
    Channels { channels: Vec<String>, c: usize },
}

impl FeatureLayout {
    pub fn len(&self) -> usize {
        match self {
            FeatureLayout::Flat { m } => *m,
            FeatureLayout::Channels { channels, c } => channels.len() * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-feature standardisation applied before the linear score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaling {
    pub fn fit(features: &[Vec<f64>]) -> Self {
        let m = features.first().map_or(0, |f| f.len());
        let n = features.len().max(1) as f64;
        let mut mean = vec![0.0; m];
        for f in features {
            mean.iter_mut().zip(f).for_each(|(a, b)| *a += b / n);
        }
        let mut var = vec![0.0; m];
        for f in features {
            var.iter_mut().zip(f.iter().zip(&mean)).for_each(|(v, (x, mu))| *v += (x - mu).powi(2) / n);
        }
        let std = var.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseLinearModel {
    pub loss_kind: LossKind,
    /// `α` for the squared loss, `λ` for the logistic loss.
    pub penalty: f64,
    pub layout: FeatureLayout,
    pub fit_intercept: bool,
    pub intercept: f64,
    pub w: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<FeatureScaling>,
    /// Penalised objective reached on the training data.
    pub objective: f64,
    pub iterations: usize,
}

impl SparseLinearModel {
    pub fn score(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.w.len() {
            return Err(Error::Data(format!("feature vector has length {}, model expects {}", z.len(), self.w.len())));
        }
        Ok(match &self.scaling {
            Some(s) => dot(&self.w, &s.apply(z)) + self.intercept,
            None => dot(&self.w, z) + self.intercept,
        })
    }

    /// Probability of the positive class; squared-loss scores are clamped to
    /// `[0, 1]`.
    pub fn predict_proba(&self, z: &[f64]) -> Result<f64> {
        let s = self.score(z)?;
        Ok(match self.loss_kind {
            LossKind::Squared => s.clamp(0.0, 1.0),
            LossKind::Logistic => sigmoid(s),
        })
    }

    pub fn nonzero(&self) -> usize {
        self.w.iter().filter(|&&w| w != 0.0).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Objective decrease below which an iteration counts as stalled.
    pub tol: f64,
    /// Consecutive stalled iterations required to stop.
    pub patience: usize,
    /// Optimality residual that must also hold before stopping.
    pub kkt_tol: f64,
    pub fit_intercept: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol: 1e-8,
            patience: 10,
            kkt_tol: 1e-8,
            fit_intercept: true,
        }
    }
}

/// Design matrix with row-major storage.
struct Design<'a> {
    z: &'a [Vec<f64>],
    y: Vec<f64>,
    m: usize,
}

impl Design<'_> {
    fn n(&self) -> usize {
        self.z.len()
    }

    /// Smooth loss and its gradient w.r.t. (w, b).
    fn smooth(&self, kind: LossKind, w: &[f64], b: f64, grad: Option<(&mut [f64], &mut f64)>) -> f64 {
        let n = self.n() as f64;
        let mut loss = 0.0;
        let mut resid = Vec::with_capacity(self.n());
        for (zi, &yi) in self.z.iter().zip(&self.y) {
            let s = dot(w, zi) + b;
            match kind {
                LossKind::Squared => {
                    let r = s - yi;
                    loss += r * r / n;
                    resid.push(2.0 * r / n);
                }
                LossKind::Logistic => {
                    loss += (softplus(s) - yi * s) / n;
                    resid.push((sigmoid(s) - yi) / n);
                }
            }
        }
        if let Some((gw, gb)) = grad {
            gw.fill(0.0);
            *gb = 0.0;
            for (zi, r) in self.z.iter().zip(&resid) {
                gw.iter_mut().zip(zi).for_each(|(g, x)| *g += r * x);
                *gb += r;
            }
        }
        loss
    }

    /// Largest eigenvalue of `[Z 1]ᵀ[Z 1] / n` by power iteration.
    fn gram_norm(&self, with_intercept: bool) -> f64 {
        let mut rng = Rng::new(0x5eed);
        let dim = self.m + usize::from(with_intercept);
        let mut v: Vec<f64> = (0..dim).map(|_| rng.uniform(0.5, 1.5)).collect();
        let mut lambda = 0.0;
        for _ in 0..100 {
            let mut out = vec![0.0; dim];
            for zi in self.z {
                let mut s = dot(&v[..self.m], zi);
                if with_intercept {
                    s += v[self.m];
                }
                out[..self.m].iter_mut().zip(zi).for_each(|(o, x)| *o += s * x);
                if with_intercept {
                    out[self.m] += s;
                }
            }
            let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            let next = norm / self.n() as f64;
            v = out.into_iter().map(|x| x / norm).collect();
            if (next - lambda).abs() <= 1e-6 * next {
                return next;
            }
            lambda = next;
        }
        lambda
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Largest violation of the optimality conditions of `f(w, b) + α‖w‖₁`.
pub fn kkt_residual(gw: &[f64], gb: f64, w: &[f64], alpha: f64, fit_intercept: bool) -> f64 {
    let mut worst: f64 = if fit_intercept { gb.abs() } else { 0.0 };
    for (g, &wj) in gw.iter().zip(w) {
        let v = if wj == 0.0 {
            (g.abs() - alpha).max(0.0)
        } else {
            (g + alpha * wj.signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

fn validate(features: &[Vec<f64>], labels: &[u8], penalty: f64) -> Result<usize> {
    ensure_shape!(features.len() == labels.len(), "{} feature rows for {} labels", features.len(), labels.len());
    if features.len() < 2 {
        return Err(Error::Domain("need at least two instances".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Domain("labels contain a single class".into()));
    }
    let m = features[0].len();
    ensure_shape!(features.iter().all(|f| f.len() == m), "feature rows differ in length");
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature value".into()));
    }
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return Err(Error::Domain(format!("penalty {penalty} must be finite and >= 0")));
    }
    Ok(m)
}

struct Fit {
    w: Vec<f64>,
    b: f64,
    objective: f64,
    iterations: usize,
}

/// FISTA with backtracking and objective-based restarts. Returns the best
/// iterate seen, which is never worse than the starting point.
fn solve(d: &Design, kind: LossKind, alpha: f64, cfg: &SolverConfig, start: Option<(&[f64], f64)>) -> Fit {
    let m = d.m;
    let penalised = |w: &[f64], b: f64| d.smooth(kind, w, b, None) + alpha * w.iter().map(|x| x.abs()).sum::<f64>();
    let curvature = match kind {
        LossKind::Squared => 2.0,
        LossKind::Logistic => 0.25,
    };
    let mut lip = (curvature * d.gram_norm(cfg.fit_intercept)).max(1e-12);

    let (mut x, mut xb) = match start {
        Some((w, b)) => (w.to_vec(), if cfg.fit_intercept { b } else { 0.0 }),
        None => (vec![0.0; m], 0.0),
    };
    let mut fx = penalised(&x, xb);
    let (mut y, mut yb) = (x.clone(), xb);
    let mut t = 1.0f64;
    let mut gw = vec![0.0; m];
    let mut gb = 0.0;
    let mut stalled = 0usize;
    let mut iterations = 0usize;

    while iterations < cfg.max_iter {
        iterations += 1;
        let fy = d.smooth(kind, &y, yb, Some((&mut gw, &mut gb)));
        let (nx, nxb) = loop {
            let step = 1.0 / lip;
            let cand: Vec<f64> = y.iter().zip(&gw).map(|(v, g)| soft_threshold(v - step * g, step * alpha)).collect();
            let cb = if cfg.fit_intercept { yb - step * gb } else { 0.0 };
            let diff: f64 = cand.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + (cb - yb).powi(2);
            let lin: f64 = cand.iter().zip(&y).zip(&gw).map(|((a, b), g)| g * (a - b)).sum::<f64>() + gb * (cb - yb);
            let fc = d.smooth(kind, &cand, cb, None);
            if fc <= fy + lin + 0.5 * lip * diff + 1e-15 * fy.abs().max(1.0) || lip > 1e30 {
                break (cand, cb);
            }
            lip *= 2.0;
        };
        let fnx = penalised(&nx, nxb);
        if fnx > fx {
            // restart momentum from the current best point
            y.clone_from(&x);
            yb = xb;
            t = 1.0;
            stalled += 1;
        } else {
            let decrease = fx - fnx;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            y = nx.iter().zip(&x).map(|(a, b)| a + beta * (a - b)).collect();
            yb = nxb + beta * (nxb - xb);
            t = t_next;
            x = nx;
            xb = nxb;
            fx = fnx;
            stalled = if decrease < cfg.tol { stalled + 1 } else { 0 };
        }
        if stalled >= cfg.patience {
            d.smooth(kind, &x, xb, Some((&mut gw, &mut gb)));
            if kkt_residual(&gw, gb, &x, alpha, cfg.fit_intercept) <= cfg.kkt_tol {
                break;
            }
            stalled = 0;
        }
    }
    if iterations >= cfg.max_iter {
        warn!("proximal gradient hit the iteration cap ({})", cfg.max_iter);
    }
    Fit {
        w: x,
        b: xb,
        objective: fx,
        iterations,
    }
}

fn fit_model(
    features: &[Vec<f64>],
    labels: &[u8],
    kind: LossKind,
    penalty: f64,
    layout: Option<FeatureLayout>,
    cfg: &SolverConfig,
    start: Option<(&[f64], f64)>,
) -> Result<SparseLinearModel> {
    let m = validate(features, labels, penalty)?;
    let layout = layout.unwrap_or(FeatureLayout::Flat { m });
    ensure_shape!(layout.len() == m, "layout describes {} features, data has {m}", layout.len());
    let d = Design {
        z: features,
        y: labels.iter().map(|&v| v as f64).collect(),
        m,
    };
    let fit = solve(&d, kind, penalty, cfg, start);
    Ok(SparseLinearModel {
        loss_kind: kind,
        penalty,
        layout,
        fit_intercept: cfg.fit_intercept,
        intercept: fit.b,
        w: fit.w,
        scaling: None,
        objective: fit.objective,
        iterations: fit.iterations,
    })
}

/// LASSO against real-valued targets, without the two-class requirement of
/// [`train_lasso`].
pub fn lasso_regression(features: &[Vec<f64>], targets: &[f64], alpha: f64, cfg: &SolverConfig) -> Result<SparseLinearModel> {
    ensure_shape!(features.len() == targets.len() && !features.is_empty(), "need matching, non-empty features and targets");
    let m = features[0].len();
    ensure_shape!(features.iter().all(|f| f.len() == m), "feature rows differ in length");
    if features.iter().flatten().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite input".into()));
    }
    let d = Design {
        z: features,
        y: targets.to_vec(),
        m,
    };
    let fit = solve(&d, LossKind::Squared, alpha, cfg, None);
    Ok(SparseLinearModel {
        loss_kind: LossKind::Squared,
        penalty: alpha,
        layout: FeatureLayout::Flat { m },
        fit_intercept: cfg.fit_intercept,
        intercept: fit.b,
        w: fit.w,
        scaling: None,
        objective: fit.objective,
        iterations: fit.iterations,
    })
}

/// Minimises `(1/N) Σ (y − w·z − b)² + α‖w‖₁`.
pub fn train_lasso(
    features: &[Vec<f64>],
    labels: &[u8],
    alpha: f64,
    layout: Option<FeatureLayout>,
    cfg: &SolverConfig,
) -> Result<SparseLinearModel> {
    fit_model(features, labels, LossKind::Squared, alpha, layout, cfg, None)
}

/// Minimises the mean negative log-likelihood plus `λ‖w‖₁`.
pub fn train_l1_logreg(
    features: &[Vec<f64>],
    labels: &[u8],
    lambda: f64,
    layout: Option<FeatureLayout>,
    cfg: &SolverConfig,
) -> Result<SparseLinearModel> {
    fit_model(features, labels, LossKind::Logistic, lambda, layout, cfg, None)
}

/// Unpenalised data loss of a model (mean squared error or mean negative
/// log-likelihood).
pub fn data_loss(model: &SparseLinearModel, features: &[Vec<f64>], labels: &[u8]) -> Result<f64> {
    let n = features.len().max(1) as f64;
    let mut total = 0.0;
    for (z, &y) in features.iter().zip(labels) {
        let s = model.score(z)?;
        let y = y as f64;
        total += match model.loss_kind {
            LossKind::Squared => (s - y).powi(2),
            LossKind::Logistic => softplus(s) - y * s,
        };
    }
    Ok(total / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub penalty: f64,
    pub validation_loss: f64,
    pub nonzero: usize,
}

/// Fits one model per penalty (largest first, warm-started) and keeps the
/// one with the lowest validation data loss; ties go to the larger penalty.
#[allow(clippy::too_many_arguments)]
pub fn tune_penalty(
    kind: LossKind,
    train: (&[Vec<f64>], &[u8]),
    validation: (&[Vec<f64>], &[u8]),
    grid: &[f64],
    layout: Option<FeatureLayout>,
    cfg: &SolverConfig,
    standardize: bool,
) -> Result<(SparseLinearModel, Vec<GridPoint>)> {
    if grid.is_empty() {
        return Err(Error::Config("penalty grid is empty".into()));
    }
    let scaling = standardize.then(|| FeatureScaling::fit(train.0));
    let scaled: Vec<Vec<f64>>;
    let tr_features = match &scaling {
        Some(s) => {
            scaled = train.0.iter().map(|z| s.apply(z)).collect();
            &scaled[..]
        }
        None => train.0,
    };
    let (va_features, va_labels) = if validation.0.is_empty() { train } else { validation };

    let mut order: Vec<f64> = grid.to_vec();
    order.sort_by(|a, b| b.total_cmp(a));
    let mut best: Option<(f64, SparseLinearModel)> = None;
    let mut points = Vec::with_capacity(order.len());
    let mut warm: Option<(Vec<f64>, f64)> = None;
    for &p in &order {
        let start = warm.as_ref().map(|(w, b)| (w.as_slice(), *b));
        let mut model = fit_model(tr_features, train.1, kind, p, layout.clone(), cfg, start)?;
        warm = Some((model.w.clone(), model.intercept));
        model.scaling = scaling.clone();
        let loss = data_loss(&model, va_features, va_labels)?;
        points.push(GridPoint {
            penalty: p,
            validation_loss: loss,
            nonzero: model.nonzero(),
        });
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, model));
        }
    }
    points.sort_by(|a, b| a.penalty.total_cmp(&b.penalty));
    Ok((best.expect("grid is non-empty").1, points))
}

/// `count` values from `lo` to `hi`, equally spaced on a linear or log scale.
pub fn penalty_grid(lo: f64, hi: f64, count: usize, log_scale: bool) -> Vec<f64> {
    if count <= 1 {
        return vec![lo];
    }
    (0..count)
        .map(|i| {
            let f = i as f64 / (count - 1) as f64;
            if log_scale {
                (lo.ln() + f * (hi.ln() - lo.ln())).exp()
            } else {
                lo + f * (hi - lo)
            }
        })
        .collect()
}

//! Label losses and logits-based distillation losses.
//!
//! Every loss is an arithmetic mean over the batch. The `*_with_grad`
//! variants also return the gradient with respect to the student logits,
//! which the trainer injects into the autodiff graph.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::Serialize;

use crate::config::LabelLoss;
use crate::error::{Error, Result};

/// Raw scores, N samples by K classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch(Array2<f64>);

impl LogitsBatch {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.ncols() < 2 {
            return Err(Error::Shape(format!(
                "logits need K >= 2 classes, got {}",
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logit".into()));
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let k = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("ragged logit rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(Array2::from_shape_vec((rows.len(), k), flat).expect("shape checked"))
    }

    /// Logits whose softmax equals the given probability rows.
    pub fn from_probs(rows: &[&[f64]]) -> Result<Self> {
        let logs: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        let refs: Vec<&[f64]> = logs.iter().map(|r| r.as_slice()).collect();
        Self::from_rows(&refs)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn batch_size(&self) -> usize {
        self.0.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.0.ncols()
    }
}

/// Probabilities, N by K. Rows are distributions in softmax mode; in marginal
/// mode each entry is only required to lie in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch(Array2<f64>);

impl ProbBatch {
    pub fn new(values: Array2<f64>, softmax_mode: bool) -> Result<Self> {
        if values.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Numeric("probability outside [0, 1]".into()));
        }
        if softmax_mode {
            for (i, row) in values.rows().into_iter().enumerate() {
                let s = row.sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::Numeric(format!("row {i} sums to {s}, not 1")));
                }
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Ground truth as class indices or per-class weights (mixed targets).
#[derive(Debug, Clone, PartialEq)]
pub enum HardTargetBatch {
    Indices(Vec<usize>),
    Weights(Array2<f64>),
}

impl HardTargetBatch {
    pub fn len(&self) -> usize {
        match self {
            HardTargetBatch::Indices(v) => v.len(),
            HardTargetBatch::Weights(w) => w.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dense N×K weight rows.
    pub fn to_weights(&self, classes: usize) -> Result<Array2<f64>> {
        match self {
            HardTargetBatch::Indices(idx) => {
                let mut w = Array2::zeros((idx.len(), classes));
                for (i, &c) in idx.iter().enumerate() {
                    if c >= classes {
                        return Err(Error::Target(format!(
                            "target {c} at row {i} out of range for {classes} classes"
                        )));
                    }
                    w[[i, c]] = 1.0;
                }
                Ok(w)
            }
            HardTargetBatch::Weights(w) => {
                if w.ncols() != classes {
                    return Err(Error::Shape(format!(
                        "target weights have {} columns, logits have {classes}",
                        w.ncols()
                    )));
                }
                if w.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::Target("target weight outside [0, 1]".into()));
                }
                Ok(w.clone())
            }
        }
    }

    /// Index per row; weight rows resolve to their largest entry, ties going
    /// to the lower class index.
    pub fn dominant_indices(&self) -> Vec<usize> {
        match self {
            HardTargetBatch::Indices(v) => v.clone(),
            HardTargetBatch::Weights(w) => w
                .rows()
                .into_iter()
                .map(|row| {
                    let mut best = 0;
                    for (k, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = k;
                        }
                    }
                    best
                })
                .collect(),
        }
    }
}

/// Values of one loss evaluation, with its weighted terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub hard_component: f64,
    pub soft_component: f64,
    pub extra: BTreeMap<String, f64>,
    /// `(name, weight, value)`; `total` is the weighted sum.
    pub terms: Vec<(String, f64, f64)>,
}

impl LossBreakdown {
    pub fn from_terms(terms: Vec<(&str, f64, f64)>, hard: f64, soft: f64) -> Self {
        let terms: Vec<(String, f64, f64)> =
            terms.into_iter().map(|(n, w, v)| (n.to_string(), w, v)).collect();
        let total = terms.iter().map(|(_, w, v)| w * v).sum();
        Self {
            total,
            hard_component: hard,
            soft_component: soft,
            extra: BTreeMap::new(),
            terms,
        }
    }

    pub fn recomputed_total(&self) -> f64 {
        self.terms.iter().map(|(_, w, v)| w * v).sum()
    }

    /// Adds another breakdown's terms with the given weight.
    pub fn absorb(&mut self, other: &LossBreakdown, weight: f64) {
        self.total += weight * other.total;
        for (n, w, v) in &other.terms {
            self.terms.push((n.clone(), w * weight, *v));
        }
        for (k, v) in &other.extra {
            self.extra.insert(k.clone(), *v);
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be > 0, got {tau}")))
    }
}

fn check_pair(s: &LogitsBatch, t: &LogitsBatch) -> Result<()> {
    if s.0.dim() != t.0.dim() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            s.0.dim(),
            t.0.dim()
        )));
    }
    Ok(())
}

fn log_softmax_row(z: ArrayView1<f64>, tau: f64) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let shifted = z.mapv(|v| (v - max) / tau);
    let lse = shifted.mapv(f64::exp).sum().ln();
    shifted.mapv(|v| v - lse)
}

fn log_softmax(z: ArrayView2<f64>, tau: f64) -> Array2<f64> {
    let mut out = Array2::zeros(z.raw_dim());
    for (i, row) in z.rows().into_iter().enumerate() {
        out.row_mut(i).assign(&log_softmax_row(row, tau));
    }
    out
}

/// Row-wise `exp(z/τ) / Σ exp(z/τ)`, stabilized by the row maximum.
pub fn softmax_temperature(logits: &LogitsBatch, tau: f64) -> Result<ProbBatch> {
    check_tau(tau)?;
    Ok(ProbBatch(log_softmax(logits.view(), tau).mapv(f64::exp)))
}

/// Mixed-weight or one-hot rows smoothed to `(1-ε)·q + ε/K`.
pub fn smooth_targets(weights: &Array2<f64>, smoothing: f64) -> Array2<f64> {
    let k = weights.ncols() as f64;
    weights.mapv(|q| (1.0 - smoothing) * q + smoothing / k)
}

pub fn ce_loss(s: &LogitsBatch, targets: &HardTargetBatch, smoothing: f64) -> Result<f64> {
    ce_loss_with_grad(s, targets, smoothing).map(|(v, _)| v)
}

pub fn ce_loss_with_grad(
    s: &LogitsBatch,
    targets: &HardTargetBatch,
    smoothing: f64,
) -> Result<(f64, Array2<f64>)> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("smoothing {smoothing} outside [0, 1)")));
    }
    if targets.len() != s.batch_size() {
        return Err(Error::Shape(format!(
            "{} targets for {} samples",
            targets.len(),
            s.batch_size()
        )));
    }
    let q = smooth_targets(&targets.to_weights(s.class_count())?, smoothing);
    let logp = log_softmax(s.view(), 1.0);
    let n = s.batch_size() as f64;
    let value = -(&q * &logp).sum() / n;
    let mass = q.sum_axis(Axis(1)).insert_axis(Axis(1));
    let grad = (logp.mapv(f64::exp) * &mass - &q) / n;
    Ok((value, grad))
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-class logistic loss averaged over N·K entries.
pub fn bce_loss(s: &LogitsBatch, targets: &HardTargetBatch) -> Result<f64> {
    bce_loss_with_grad(s, targets).map(|(v, _)| v)
}

pub fn bce_loss_with_grad(s: &LogitsBatch, targets: &HardTargetBatch) -> Result<(f64, Array2<f64>)> {
    if targets.len() != s.batch_size() {
        return Err(Error::Shape(format!(
            "{} targets for {} samples",
            targets.len(),
            s.batch_size()
        )));
    }
    let t = targets.to_weights(s.class_count())?;
    let count = (s.batch_size() * s.class_count()) as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros(t.raw_dim());
    Zip::from(&mut grad).and(s.values()).and(&t).for_each(|g, &z, &y| {
        value -= y * log_sigmoid(z) + (1.0 - y) * log_sigmoid(-z);
        *g = (sigmoid(z) - y) / count;
    });
    Ok((value / count, grad))
}

/// Mean over the batch of `τ²·KL(p_t ‖ p_s)` at temperature τ.
pub fn kl_soft_loss(s: &LogitsBatch, t: &LogitsBatch, tau: f64) -> Result<f64> {
    kl_soft_loss_with_grad(s, t, tau).map(|(v, _)| v)
}

pub fn kl_soft_loss_with_grad(s: &LogitsBatch, t: &LogitsBatch, tau: f64) -> Result<(f64, Array2<f64>)> {
    check_tau(tau)?;
    check_pair(s, t)?;
    let ls = log_softmax(s.view(), tau);
    let lt = log_softmax(t.view(), tau);
    let n = s.batch_size() as f64;
    let mut value = 0.0;
    Zip::from(&ls).and(&lt).for_each(|&a, &b| {
        let pt = b.exp();
        if pt > 0.0 {
            value += pt * (b - a);
        }
    });
    let grad = (ls.mapv(f64::exp) - lt.mapv(f64::exp)) * (tau / n);
    Ok((tau * tau * value / n, grad))
}

pub const BKL_EPS: f64 = 1e-6;

/// Sum over classes of the binary KL between teacher and student softmax
/// marginals, averaged over the batch. Marginals are clamped to `[ε, 1-ε]`.
pub fn bkl_loss(s: &LogitsBatch, t: &LogitsBatch, tau: f64) -> Result<f64> {
    bkl_loss_with_grad(s, t, tau).map(|(v, _)| v)
}

pub fn bkl_loss_with_grad(s: &LogitsBatch, t: &LogitsBatch, tau: f64) -> Result<(f64, Array2<f64>)> {
    check_tau(tau)?;
    check_pair(s, t)?;
    let ps = softmax_temperature(s, tau)?.0;
    let pt = softmax_temperature(t, tau)?.0;
    let n = s.batch_size() as f64;
    let mut value = 0.0;
    // d loss / d p_s, zero where the clamp is active
    let mut dp = Array2::zeros(ps.raw_dim());
    Zip::from(&mut dp).and(&ps).and(&pt).for_each(|g, &a, &b| {
        let a_c = a.clamp(BKL_EPS, 1.0 - BKL_EPS);
        let b_c = b.clamp(BKL_EPS, 1.0 - BKL_EPS);
        value += b_c * (b_c / a_c).ln() + (1.0 - b_c) * ((1.0 - b_c) / (1.0 - a_c)).ln();
        if a > BKL_EPS && a < 1.0 - BKL_EPS {
            *g = (-b_c / a_c + (1.0 - b_c) / (1.0 - a_c)) / n;
        }
    });
    Ok((value / n, softmax_backward(&ps, &dp, tau)))
}

/// Chain rule through `p = softmax(z/τ)`: `dz_j = p_j (g_j - Σ_k g_k p_k) / τ`.
fn softmax_backward(p: &Array2<f64>, dp: &Array2<f64>, tau: f64) -> Array2<f64> {
    let inner = (p * dp).sum_axis(Axis(1)).insert_axis(Axis(1));
    p * &(dp - &inner) / tau
}

/// Label-loss configuration shared by the composite objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardLoss {
    pub kind: LabelLoss,
    pub smoothing: f64,
}

impl HardLoss {
    pub fn new(kind: LabelLoss, smoothing: f64) -> Self {
        Self { kind, smoothing }
    }

    /// CE uses smoothed rows directly; BCE consumes the same smoothed rows as
    /// per-class targets; NONE contributes zero.
    pub fn evaluate(&self, s: &LogitsBatch, targets: &HardTargetBatch) -> Result<(f64, Array2<f64>)> {
        match self.kind {
            LabelLoss::Ce => ce_loss_with_grad(s, targets, self.smoothing),
            LabelLoss::Bce => {
                let t = smooth_targets(&targets.to_weights(s.class_count())?, self.smoothing);
                bce_loss_with_grad(s, &HardTargetBatch::Weights(t))
            }
            LabelLoss::None => Ok((0.0, Array2::zeros(s.values().raw_dim()))),
        }
    }
}

/// Soft-label measurement used by vanilla KD.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftMeasure {
    Kl,
    Bkl,
}

impl From<crate::config::SoftLoss> for SoftMeasure {
    fn from(s: crate::config::SoftLoss) -> Self {
        match s {
            crate::config::SoftLoss::Kl => SoftMeasure::Kl,
            crate::config::SoftLoss::Bkl => SoftMeasure::Bkl,
        }
    }
}

impl SoftMeasure {
    pub fn evaluate(&self, s: &LogitsBatch, t: &LogitsBatch, tau: f64) -> Result<(f64, Array2<f64>)> {
        match self {
            SoftMeasure::Kl => kl_soft_loss_with_grad(s, t, tau),
            SoftMeasure::Bkl => bkl_loss_with_grad(s, t, tau),
        }
    }
}

/// `α·hard + (1-α)·soft`.
pub fn vanilla_kd_loss_with_grad(
    s: &LogitsBatch,
    t: &LogitsBatch,
    targets: &HardTargetBatch,
    hard: HardLoss,
    soft: SoftMeasure,
    alpha: f64,
    tau: f64,
) -> Result<(LossBreakdown, Array2<f64>)> {
    if hard.kind == LabelLoss::None && alpha > 0.0 {
        return Err(Error::Config(
            "label loss NONE requires alpha = 0 (pure soft distillation)".into(),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let (hv, hg) = if alpha > 0.0 {
        hard.evaluate(s, targets)?
    } else {
        (0.0, Array2::zeros(s.values().raw_dim()))
    };
    let (sv, sg) = soft.evaluate(s, t, tau)?;
    let breakdown = LossBreakdown::from_terms(vec![("hard", alpha, hv), ("soft", 1.0 - alpha, sv)], hv, sv);
    let breakdown = LossBreakdown {
        // exact when alpha = 0
        total: if alpha == 0.0 { sv } else { breakdown.total },
        ..breakdown
    };
    Ok((breakdown, hg * alpha + sg * (1.0 - alpha)))
}

pub fn vanilla_kd_loss(
    s: &LogitsBatch,
    t: &LogitsBatch,
    targets: &HardTargetBatch,
    hard: HardLoss,
    soft: SoftMeasure,
    alpha: f64,
    tau: f64,
) -> Result<LossBreakdown> {
    vanilla_kd_loss_with_grad(s, t, targets, hard, soft, alpha, tau).map(|(b, _)| b)
}

struct SampleSplit {
    /// log p_target, log(1 - p_target)
    log_b: f64,
    log_not_b: f64,
    /// log of the renormalized non-target distribution (target slot unused)
    log_hat: Array1<f64>,
}

fn split_target(z: ArrayView1<f64>, target: usize, tau: f64) -> SampleSplit {
    let lsm = log_softmax_row(z, tau);
    let mut masked = z.to_owned();
    masked[target] = f64::NEG_INFINITY;
    let max = masked.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse_nt = max / tau
        + masked
            .iter()
            .map(|&v| if v == f64::NEG_INFINITY { 0.0 } else { ((v - max) / tau).exp() })
            .sum::<f64>()
            .ln();
    let zmax = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse_all = zmax / tau + z.iter().map(|&v| ((v - zmax) / tau).exp()).sum::<f64>().ln();
    let log_hat = z.mapv(|v| v / tau - lse_nt);
    SampleSplit {
        log_b: lsm[target],
        log_not_b: lse_nt - lse_all,
        log_hat,
    }
}

/// Decoupled KD: `α·TCKD + β·NCKD`, each τ²-scaled and batch-averaged.
pub fn dkd_loss(
    s: &LogitsBatch,
    t: &LogitsBatch,
    target_indices: &[usize],
    dkd_alpha: f64,
    dkd_beta: f64,
    tau: f64,
) -> Result<LossBreakdown> {
    dkd_loss_with_grad(s, t, target_indices, dkd_alpha, dkd_beta, tau).map(|(b, _)| b)
}

pub fn dkd_loss_with_grad(
    s: &LogitsBatch,
    t: &LogitsBatch,
    target_indices: &[usize],
    dkd_alpha: f64,
    dkd_beta: f64,
    tau: f64,
) -> Result<(LossBreakdown, Array2<f64>)> {
    check_tau(tau)?;
    check_pair(s, t)?;
    let (n, k) = s.values().dim();
    if k < 2 {
        return Err(Error::Config("DKD needs at least 2 classes".into()));
    }
    if target_indices.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} samples", target_indices.len())));
    }
    let mut tckd = 0.0;
    let mut nckd = 0.0;
    let mut grad = Array2::zeros((n, k));
    let nf = n as f64;
    for i in 0..n {
        let target = target_indices[i];
        if target >= k {
            return Err(Error::Target(format!("target {target} out of range for {k} classes")));
        }
        let ss = split_target(s.values().row(i), target, tau);
        let ts = split_target(t.values().row(i), target, tau);
        let (b, bt) = (ss.log_b.exp(), ts.log_b.exp());
        let nbt = ts.log_not_b.exp();
        let mut tc = 0.0;
        if bt > 0.0 {
            tc += bt * (ts.log_b - ss.log_b);
        }
        if nbt > 0.0 {
            tc += nbt * (ts.log_not_b - ss.log_not_b);
        }
        let mut nc = 0.0;
        for j in (0..k).filter(|&j| j != target) {
            let that = ts.log_hat[j].exp();
            if that > 0.0 {
                nc += that * (ts.log_hat[j] - ss.log_hat[j]);
            }
        }
        tckd += tau * tau * tc;
        nckd += tau * tau * nc;
        // d/dz_j: TCKD term τ(b-bt)(δ_jt - s_j)/(1-b) with s_j/(1-b) = ŝ_j; NCKD term τ(ŝ_j - t̂_j)
        let diff = b - bt;
        for j in 0..k {
            let g = if j == target {
                dkd_alpha * tau * diff
            } else {
                let shat = ss.log_hat[j].exp();
                let that = ts.log_hat[j].exp();
                -dkd_alpha * tau * diff * shat + dkd_beta * tau * (shat - that)
            };
            grad[[i, j]] = g / nf;
        }
    }
    let (tckd, nckd) = (tckd / nf, nckd / nf);
    let mut breakdown = LossBreakdown::from_terms(
        vec![("tckd", dkd_alpha, tckd), ("nckd", dkd_beta, nckd)],
        0.0,
        dkd_alpha * tckd + dkd_beta * nckd,
    );
    breakdown.extra.insert("tckd".into(), tckd);
    breakdown.extra.insert("nckd".into(), nckd);
    Ok((breakdown, grad))
}

const PEARSON_EPS: f64 = 1e-12;

/// `(1 - r, d(1-r)/da)` for Pearson correlation r between `a` and `b`.
/// Zero-variance inputs give `(0, 0)`.
fn pearson_gap(a: ArrayView1<f64>, b: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let ac = &a - a.mean().unwrap_or(0.0);
    let bc = &b - b.mean().unwrap_or(0.0);
    let na = ac.dot(&ac).sqrt();
    let nb = bc.dot(&bc).sqrt();
    if na < PEARSON_EPS || nb < PEARSON_EPS {
        return (0.0, Array1::zeros(a.len()));
    }
    let r = ac.dot(&bc) / (na * nb);
    let dr = &bc / (na * nb) - &ac * (r / (na * na));
    (1.0 - r, -dr)
}

/// Mean over rows of `1 - pearson(student row, teacher row)`.
pub fn dist_inter(ps: ArrayView2<f64>, pt: ArrayView2<f64>) -> f64 {
    let n = ps.nrows() as f64;
    ps.rows()
        .into_iter()
        .zip(pt.rows())
        .map(|(a, b)| pearson_gap(a, b).0)
        .sum::<f64>()
        / n
}

/// Mean over classes of `1 - pearson(student column, teacher column)`.
pub fn dist_intra(ps: ArrayView2<f64>, pt: ArrayView2<f64>) -> f64 {
    dist_inter(ps.t(), pt.t())
}

/// DIST: `L_cls + β·L_inter + γ·L_intra` on softmax probabilities at τ.
#[allow(clippy::too_many_arguments)]
pub fn dist_loss(
    s: &LogitsBatch,
    t: &LogitsBatch,
    targets: &HardTargetBatch,
    hard: HardLoss,
    dist_beta: f64,
    dist_gamma: f64,
    tau: f64,
) -> Result<LossBreakdown> {
    dist_loss_with_grad(s, t, targets, hard, dist_beta, dist_gamma, tau).map(|(b, _)| b)
}

pub fn dist_loss_with_grad(
    s: &LogitsBatch,
    t: &LogitsBatch,
    targets: &HardTargetBatch,
    hard: HardLoss,
    dist_beta: f64,
    dist_gamma: f64,
    tau: f64,
) -> Result<(LossBreakdown, Array2<f64>)> {
    check_tau(tau)?;
    check_pair(s, t)?;
    let (n, k) = s.values().dim();
    if n < 2 {
        return Err(Error::Batch(format!("DIST needs batch size >= 2, got {n}")));
    }
    let ps = softmax_temperature(s, tau)?.0;
    let pt = softmax_temperature(t, tau)?.0;
    let mut dp = Array2::zeros((n, k));
    let mut inter = 0.0;
    for i in 0..n {
        let (v, g) = pearson_gap(ps.row(i), pt.row(i));
        inter += v;
        dp.row_mut(i).scaled_add(dist_beta / n as f64, &g);
    }
    let mut intra = 0.0;
    for j in 0..k {
        let (v, g) = pearson_gap(ps.column(j), pt.column(j));
        intra += v;
        dp.column_mut(j).scaled_add(dist_gamma / k as f64, &g);
    }
    let (inter, intra) = (inter / n as f64, intra / k as f64);
    let (cls, cls_grad) = hard.evaluate(s, targets)?;
    let mut breakdown = LossBreakdown::from_terms(
        vec![("cls", 1.0, cls), ("inter", dist_beta, inter), ("intra", dist_gamma, intra)],
        cls,
        dist_beta * inter + dist_gamma * intra,
    );
    breakdown.extra.insert("inter".into(), inter);
    breakdown.extra.insert("intra".into(), intra);
    let grad = softmax_backward(&ps, &dp, tau) + cls_grad;
    Ok((breakdown, grad))
}

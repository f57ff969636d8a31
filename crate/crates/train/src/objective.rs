//! Composite distillation objective. Logit and relational losses are
//! evaluated in f64 by `kdbench_core` and re-enter the graph as
//! `sum(x · ∂L/∂x)` surrogates; hint losses run in candle so their
//! projectors receive gradients.

use candle_core::{Tensor, Var};
use kdbench_core::config::{DistillJobSpec, HintMetric, HintPair, LabelLoss, Method, SoftLoss};
use kdbench_core::losses::hint::{bilinear_matrix, cc_loss_with_grad, rkd_loss_with_grad};
use kdbench_core::losses::logits::{dist_loss_with_grad, dkd_loss_with_grad, vanilla_kd_loss_with_grad};
use kdbench_core::losses::{
    FeatureMap, HardLoss, HardTargetBatch, LogitsBatch, LossBreakdown, Projector, ProjectorKind, ProjectorNorm,
    ProjectorSpec,
};
use kdbench_core::{Error, Result};
use ndarray::{Array1, Array2};

use crate::models::Forward;
use crate::params::{Builder, ParamStore};
use crate::tensor::{array2_to_tensor, array_to_tensor, scalar, tensor_to_array2, tensor_to_arrayd, BackendExt};

const PROJ_BN_EPS: f64 = 1e-5;

/// Trainable student-side regressor for one hint pair: 1×1 convolution (or
/// linear map on vectors) to the teacher width, then batch normalization
/// with batch statistics.
pub struct HintProjector {
    pub pair: HintPair,
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
    spatial: bool,
}

fn as_nchw(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        4 => Ok(t.clone()),
        2 => {
            let (n, c) = t.dims2().be()?;
            t.reshape((n, c, 1, 1)).be()
        }
        r => Err(Error::Shape(format!("feature of rank {r}; expected 2 or 4"))),
    }
}

/// Bilinear (half-pixel) resampling of an NCHW map to `(h, w)`.
fn resize(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, xh, xw) = x.dims4().be()?;
    if (xh, xw) == (h, w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let mw = array2_to_tensor(&bilinear_matrix(xw, w).t().to_owned(), dev)?;
    let mh = array2_to_tensor(&bilinear_matrix(xh, h).t().to_owned(), dev)?;
    let y = x.contiguous().be()?.broadcast_matmul(&mw).be()?;
    let y = y.transpose(2, 3).be()?.contiguous().be()?.broadcast_matmul(&mh).be()?;
    y.transpose(2, 3).be()?.contiguous().be()
}

impl HintProjector {
    fn new(b: &mut Builder, index: usize, pair: HintPair, cin: usize, cout: usize, spatial: bool) -> Self {
        b.push(format!("projector.{index}"));
        let bound = 1.0 / (cin as f64).sqrt();
        let weight = b.uniform("weight", &[cout, cin], bound, true);
        let bias = b.uniform("bias", &[cout], bound, false);
        let gamma = b.constant("bn.weight", &[cout], 1.0, false);
        let beta = b.constant("bn.bias", &[cout], 0.0, false);
        b.pop();
        Self {
            pair,
            weight,
            bias,
            gamma,
            beta,
            spatial,
        }
    }

    /// Projected student feature in NCHW layout.
    pub fn project(&self, f: &Tensor) -> Result<Tensor> {
        let x = as_nchw(f)?;
        let (n, c, h, w) = x.dims4().be()?;
        let co = self.weight.dim(0).be()?;
        let y = self
            .weight
            .as_tensor()
            .broadcast_matmul(&x.reshape((n, c, h * w)).be()?)
            .be()?
            .broadcast_add(&self.bias.as_tensor().reshape((co, 1)).be()?)
            .be()?;
        let mean = y.mean_keepdim((0, 2)).be()?;
        let yc = y.broadcast_sub(&mean).be()?;
        let var = yc.sqr().be()?.mean_keepdim((0, 2)).be()?;
        let y = yc
            .broadcast_div(&(var + PROJ_BN_EPS).be()?.sqrt().be()?)
            .be()?
            .broadcast_mul(&self.gamma.as_tensor().reshape((co, 1)).be()?)
            .be()?
            .broadcast_add(&self.beta.as_tensor().reshape((co, 1)).be()?)
            .be()?;
        y.reshape((n, co, h, w)).be()
    }

    /// Hint distance between the projected student feature and the teacher
    /// feature, with both grids resampled to the smaller one.
    pub fn loss(&self, f_s: &Tensor, f_t: &Tensor, metric: HintMetric) -> Result<Tensor> {
        let a = self.project(f_s)?;
        let b = as_nchw(&f_t.detach())?;
        let (_, ca, ha, wa) = a.dims4().be()?;
        let (_, cb, hb, wb) = b.dims4().be()?;
        if ca != cb {
            return Err(Error::Shape(format!("projected width {ca} vs teacher width {cb}")));
        }
        let (h, w) = (ha.min(hb), wa.min(wb));
        let diff = (resize(&a, h, w)? - resize(&b, h, w)?).be()?;
        match metric {
            HintMetric::L2 => diff.sqr().be()?.mean_all().be(),
            HintMetric::L1 => diff.abs().be()?.mean_all().be(),
        }
    }

    /// The same projector as a `kdbench_core` value (f64 copy).
    pub fn to_core(&self) -> Result<Projector> {
        let w = tensor_to_array2(self.weight.as_tensor())?;
        let vec1 = |v: &Var| -> Result<Array1<f64>> {
            let x: Vec<f32> = v.as_tensor().to_vec1().be()?;
            Ok(x.into_iter().map(f64::from).collect())
        };
        let spec = ProjectorSpec {
            in_channels: w.ncols(),
            out_channels: w.nrows(),
            kind: if self.spatial { ProjectorKind::Conv1x1 } else { ProjectorKind::Linear },
            normalization: ProjectorNorm::BatchNorm,
        };
        let mut p = Projector::new(spec, w, vec1(&self.bias)?)?;
        p.bn_gamma = vec1(&self.gamma)?;
        p.bn_beta = vec1(&self.beta)?;
        Ok(p)
    }
}

pub struct Objective {
    method: Method,
    alpha: f64,
    tau: f64,
    soft: SoftLoss,
    hard: HardLoss,
    dkd: (f64, f64),
    dist: (f64, f64),
    hint_weight: f64,
    metric: HintMetric,
    rkd: (f64, f64),
    pairs: Vec<HintPair>,
    pub projectors: Vec<HintProjector>,
    /// Projector parameters, optimized alongside the student.
    pub store: ParamStore,
}

pub struct StepLoss {
    pub breakdown: LossBreakdown,
    /// Scalar whose gradient is the gradient of `breakdown.total`.
    pub surrogate: Tensor,
}

fn feature(id: &str, t: &Tensor) -> Result<FeatureMap> {
    FeatureMap::new(id, tensor_to_arrayd(t)?)
}

fn grad_term(x: &Tensor, g: Tensor, weight: f64) -> Result<Tensor> {
    ((x * g).be()?.sum_all().be()? * weight).be()
}

impl Objective {
    /// Checks hint taps against sample forwards of both models and builds
    /// any projectors.
    pub fn new(spec: &DistillJobSpec, student: &Forward, teacher: &Forward, seed: u64) -> Result<Self> {
        let mut b = Builder::new(seed ^ 0x9D0_7EC7);
        let mut projectors = Vec::new();
        let pairs = if spec.method.is_hint_based() { spec.hint_layer_pairs.clone() } else { Vec::new() };
        for (i, pair) in pairs.iter().enumerate() {
            let s = student.tap(&pair.student)?;
            let t = teacher.tap(&pair.teacher)?;
            if spec.method == Method::Hint {
                if s.rank() != t.rank() {
                    return Err(Error::Shape(format!(
                        "hint pair {}/{}: student rank {} vs teacher rank {}",
                        pair.student,
                        pair.teacher,
                        s.rank(),
                        t.rank()
                    )));
                }
                let (cs, ct) = (s.dim(1).be()?, t.dim(1).be()?);
                projectors.push(HintProjector::new(&mut b, i, pair.clone(), cs, ct, s.rank() == 4));
            }
        }
        Ok(Self {
            method: spec.method,
            alpha: spec.alpha,
            tau: spec.temperature,
            soft: spec.soft_loss,
            hard: HardLoss::new(spec.recipe.label_loss, spec.recipe.label_smoothing),
            dkd: (spec.dkd_alpha, spec.dkd_beta),
            dist: (spec.dist_beta, spec.dist_gamma),
            hint_weight: spec.hint_weight,
            metric: spec.hint_metric,
            rkd: (spec.rkd_distance_weight, spec.rkd_angle_weight),
            pairs,
            projectors,
            store: b.finish(),
        })
    }

    /// Loss for one batch. `targets = None` means soft-only distillation
    /// (no hard-label term); methods needing a target class then use the
    /// teacher's prediction.
    pub fn compute(&self, s: &Forward, t: &Forward, targets: Option<&HardTargetBatch>) -> Result<StepLoss> {
        let dev = s.logits.device().clone();
        let zl = LogitsBatch::new(tensor_to_array2(&s.logits)?)?;
        let tl = LogitsBatch::new(tensor_to_array2(&t.logits.detach())?)?;
        let teacher_pred = HardTargetBatch::Indices(argmax_rows(tl.values()));
        let soft_only = targets.is_none();
        let (targets, hard) = match targets {
            Some(y) => (y, self.hard),
            None => (&teacher_pred, HardLoss::new(LabelLoss::None, 0.0)),
        };
        let logit_grad = |g: Array2<f64>| -> Result<Tensor> { grad_term(&s.logits, array2_to_tensor(&g, &dev)?, 1.0) };
        match self.method {
            Method::Kd => {
                let alpha = if soft_only { 0.0 } else { self.alpha };
                let (b, g) = vanilla_kd_loss_with_grad(&zl, &tl, targets, hard, self.soft.into(), alpha, self.tau)?;
                Ok(StepLoss { breakdown: b, surrogate: logit_grad(g)? })
            }
            Method::Dkd => {
                let idx = targets.dominant_indices();
                let (d, gd) = dkd_loss_with_grad(&zl, &tl, &idx, self.dkd.0, self.dkd.1, self.tau)?;
                let (hv, gh) = hard.evaluate(&zl, targets)?;
                let mut b = LossBreakdown::from_terms(vec![("hard", 1.0, hv)], hv, d.total);
                b.absorb(&d, 1.0);
                Ok(StepLoss { breakdown: b, surrogate: logit_grad(gd + gh)? })
            }
            Method::Dist => {
                let (b, g) = dist_loss_with_grad(&zl, &tl, targets, hard, self.dist.0, self.dist.1, self.tau)?;
                Ok(StepLoss { breakdown: b, surrogate: logit_grad(g)? })
            }
            Method::Hint | Method::Cc | Method::Rkd => self.feature_loss(s, t, &zl, targets, hard, &logit_grad),
            Method::Crd | Method::Reviewkd => Err(Error::Config(format!("method {} is reserved", self.method))),
        }
    }

    fn feature_loss(
        &self,
        s: &Forward,
        t: &Forward,
        zl: &LogitsBatch,
        targets: &HardTargetBatch,
        hard: HardLoss,
        logit_grad: &dyn Fn(Array2<f64>) -> Result<Tensor>,
    ) -> Result<StepLoss> {
        let dev = s.logits.device().clone();
        let (hv, gh) = hard.evaluate(zl, targets)?;
        let mut surrogate = logit_grad(gh)?;
        let mut terms = vec![("hard", 1.0, hv)];
        let mut feature_total = 0.0;
        let names: Vec<String> = (0..self.pairs.len()).map(|i| format!("feature{i}")).collect();
        for (i, pair) in self.pairs.iter().enumerate() {
            let fs = s.tap(&pair.student)?;
            let ft = t.tap(&pair.teacher)?;
            let value = match self.method {
                Method::Hint => {
                    let l = self.projectors[i].loss(fs, ft, self.metric)?;
                    let v = scalar(&l)?;
                    surrogate = (surrogate + (l * self.hint_weight).be()?).be()?;
                    v
                }
                _ => {
                    let a = feature(&pair.student, fs)?;
                    let b = feature(&pair.teacher, &ft.detach())?;
                    let (v, g) = if self.method == Method::Cc {
                        cc_loss_with_grad(&a, &b)?
                    } else {
                        rkd_loss_with_grad(&a, &b, self.rkd.0, self.rkd.1)?
                    };
                    surrogate = (surrogate + grad_term(fs, array_to_tensor(&g, &dev)?, self.hint_weight)?).be()?;
                    v
                }
            };
            feature_total += self.hint_weight * value;
            terms.push((names[i].as_str(), self.hint_weight, value));
        }
        let breakdown = LossBreakdown::from_terms(terms, hv, feature_total);
        Ok(StepLoss { breakdown, surrogate })
    }
}

pub fn argmax_rows(x: &Array2<f64>) -> Vec<usize> {
    x.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (k, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

//! Feature-based distillation: projected feature matching plus the
//! relational CC and RKD baselines.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::HintMetric;
use crate::error::{Error, Result};

/// A named activation of shape (N, C) or (N, C, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub layer_id: String,
    pub values: ArrayD<f64>,
}

impl FeatureMap {
    pub fn new(layer_id: impl Into<String>, values: ArrayD<f64>) -> Result<Self> {
        let layer_id = layer_id.into();
        if !matches!(values.ndim(), 2 | 4) {
            return Err(Error::Shape(format!(
                "feature `{layer_id}` has rank {}, expected 2 or 4",
                values.ndim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("feature `{layer_id}` has non-finite entries")));
        }
        Ok(Self { layer_id, values })
    }

    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// (H, W); (1, 1) for rank-2 features.
    pub fn grid(&self) -> (usize, usize) {
        match self.values.shape() {
            [_, _, h, w] => (*h, *w),
            _ => (1, 1),
        }
    }

    /// (N, D) with D = C·H·W.
    pub fn flatten(&self) -> Array2<f64> {
        let n = self.batch_size();
        let d = self.values.len() / n.max(1);
        self.values
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, d))
            .expect("contiguous reshape")
    }

    fn as_ncp(&self) -> Array3<f64> {
        let (h, w) = self.grid();
        self.values
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.batch_size(), self.channels(), h * w))
            .expect("contiguous reshape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProjectorKind {
    Linear,
    #[serde(rename = "CONV1X1")]
    Conv1x1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProjectorNorm {
    BatchNorm,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kind: ProjectorKind,
    pub normalization: ProjectorNorm,
}

pub const BN_EPS: f64 = 1e-5;

/// Channel-mixing projection (a 1×1 convolution on maps, a linear layer on
/// vectors), optionally followed by training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub spec: ProjectorSpec,
    /// out × in
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
}

struct ProjectorCache {
    input: Array3<f64>,
    pre_norm: Array3<f64>,
    inv_std: Array1<f64>,
}

impl Projector {
    pub fn new(spec: ProjectorSpec, weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if spec.in_channels == 0 || spec.out_channels == 0 {
            return Err(Error::Config("projector channel counts must be >= 1".into()));
        }
        if weight.dim() != (spec.out_channels, spec.in_channels) || bias.len() != spec.out_channels {
            return Err(Error::Shape("projector parameters do not match its spec".into()));
        }
        Ok(Self {
            spec,
            weight,
            bias,
            bn_gamma: Array1::ones(spec.out_channels),
            bn_beta: Array1::zeros(spec.out_channels),
        })
    }

    fn check_input(&self, f: &FeatureMap) -> Result<()> {
        let rank_ok = match self.spec.kind {
            ProjectorKind::Linear => f.values.ndim() == 2,
            ProjectorKind::Conv1x1 => f.values.ndim() == 4,
        };
        if !rank_ok || f.channels() != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "projector {:?} with {} input channels cannot take feature `{}` of shape {:?}",
                self.spec.kind,
                self.spec.in_channels,
                f.layer_id,
                f.values.shape()
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, f: &FeatureMap) -> Result<(FeatureMap, ProjectorCache)> {
        self.check_input(f)?;
        let x = f.as_ncp();
        let (n, _, p) = x.dim();
        let co = self.spec.out_channels;
        let mut y = Array3::zeros((n, co, p));
        for b in 0..n {
            let mut yb = self.weight.dot(&x.index_axis(Axis(0), b));
            yb += &self.bias.view().insert_axis(Axis(1));
            y.index_axis_mut(Axis(0), b).assign(&yb);
        }
        let pre_norm = y.clone();
        let mut inv_std = Array1::ones(co);
        if self.spec.normalization == ProjectorNorm::BatchNorm {
            let m = (n * p) as f64;
            for c in 0..co {
                let mut slab = y.index_axis_mut(Axis(1), c);
                let mean = slab.sum() / m;
                let var = slab.mapv(|v| (v - mean).powi(2)).sum() / m;
                let is = 1.0 / (var + BN_EPS).sqrt();
                inv_std[c] = is;
                let (g, bt) = (self.bn_gamma[c], self.bn_beta[c]);
                slab.mapv_inplace(|v| g * (v - mean) * is + bt);
            }
        }
        let (h, w) = f.grid();
        let shape: Vec<usize> = if f.values.ndim() == 4 { vec![n, co, h, w] } else { vec![n, co] };
        let out = FeatureMap {
            layer_id: f.layer_id.clone(),
            values: y.into_shape_with_order(IxDyn(&shape)).expect("reshape"),
        };
        Ok((
            out,
            ProjectorCache {
                input: x,
                pre_norm,
                inv_std,
            },
        ))
    }

    pub fn forward(&self, f: &FeatureMap) -> Result<FeatureMap> {
        self.forward_cached(f).map(|(o, _)| o)
    }

    /// Gradient with respect to the projector input, given the output gradient
    /// in (N, C_out, P) layout.
    fn backward(&self, cache: &ProjectorCache, dy: &Array3<f64>) -> Array3<f64> {
        let (n, co, p) = dy.dim();
        let mut dz = dy.clone();
        if self.spec.normalization == ProjectorNorm::BatchNorm {
            let m = (n * p) as f64;
            for c in 0..co {
                let z = cache.pre_norm.index_axis(Axis(1), c);
                let mean = z.sum() / m;
                let is = cache.inv_std[c];
                let xhat = z.mapv(|v| (v - mean) * is);
                let g = dy.index_axis(Axis(1), c);
                let mean_g = g.sum() / m;
                let mean_gx = (&g * &xhat).sum() / m;
                let scale = self.bn_gamma[c] * is;
                let dzc = (&g - mean_g - &xhat * mean_gx) * scale;
                dz.index_axis_mut(Axis(1), c).assign(&dzc);
            }
        }
        let mut dx = Array3::zeros(cache.input.raw_dim());
        for b in 0..n {
            dx.index_axis_mut(Axis(0), b)
                .assign(&self.weight.t().dot(&dz.index_axis(Axis(0), b)));
        }
        dx
    }
}

/// Bilinear resampling weights (half-pixel centers, edge clamped) mapping a
/// length-`input` axis to length `output`, as an output × input matrix.
pub fn bilinear_matrix(input: usize, output: usize) -> Array2<f64> {
    let mut m = Array2::zeros((output, input));
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let lam = src - i0 as f64;
        m[[o, i0]] += 1.0 - lam;
        m[[o, i1]] += lam;
    }
    m
}

/// Resizes every (N, C) plane of an (N, C, P=H·W) tensor to (h2, w2).
fn resize_ncp(x: &Array3<f64>, grid: (usize, usize), to: (usize, usize)) -> Array3<f64> {
    if grid == to {
        return x.clone();
    }
    let ah = bilinear_matrix(grid.0, to.0);
    let aw = bilinear_matrix(grid.1, to.1);
    let (n, c, _) = x.dim();
    let mut out = Array3::zeros((n, c, to.0 * to.1));
    for b in 0..n {
        for ch in 0..c {
            let plane = x
                .slice(ndarray::s![b, ch, ..])
                .to_owned()
                .into_shape_with_order(grid)
                .expect("plane");
            let r = ah.dot(&plane).dot(&aw.t());
            out.slice_mut(ndarray::s![b, ch, ..])
                .assign(&r.into_shape_with_order(to.0 * to.1).expect("flat"));
        }
    }
    out
}

fn resize_ncp_backward(g: &Array3<f64>, grid: (usize, usize), to: (usize, usize)) -> Array3<f64> {
    if grid == to {
        return g.clone();
    }
    let ah = bilinear_matrix(grid.0, to.0);
    let aw = bilinear_matrix(grid.1, to.1);
    let (n, c, _) = g.dim();
    let mut out = Array3::zeros((n, c, grid.0 * grid.1));
    for b in 0..n {
        for ch in 0..c {
            let plane = g
                .slice(ndarray::s![b, ch, ..])
                .to_owned()
                .into_shape_with_order(to)
                .expect("plane");
            let r = ah.t().dot(&plane).dot(&aw);
            out.slice_mut(ndarray::s![b, ch, ..])
                .assign(&r.into_shape_with_order(grid.0 * grid.1).expect("flat"));
        }
    }
    out
}

/// Mean elementwise L1 or squared-L2 distance, with its gradient w.r.t. `a`.
pub fn feature_distance(a: &Array3<f64>, b: &Array3<f64>, metric: HintMetric) -> (f64, Array3<f64>) {
    let m = a.len() as f64;
    let diff = a - b;
    match metric {
        HintMetric::L2 => (diff.mapv(|d| d * d).sum() / m, diff.mapv(|d| 2.0 * d / m)),
        HintMetric::L1 => (diff.mapv(f64::abs).sum() / m, diff.mapv(|d| d.signum() / m)),
    }
}

/// Feature-matching loss `D(T_s(F_s), T_t(F_t))`. A `None` projector is the
/// identity. Spatial grids are aligned by bilinear downsampling to the
/// smaller of the two.
pub fn hint_loss(
    f_s: &FeatureMap,
    f_t: &FeatureMap,
    proj_s: Option<&Projector>,
    proj_t: Option<&Projector>,
    metric: HintMetric,
) -> Result<f64> {
    hint_loss_with_grad(f_s, f_t, proj_s, proj_t, metric).map(|(v, _)| v)
}

/// Also returns the gradient with respect to the student feature values.
pub fn hint_loss_with_grad(
    f_s: &FeatureMap,
    f_t: &FeatureMap,
    proj_s: Option<&Projector>,
    proj_t: Option<&Projector>,
    metric: HintMetric,
) -> Result<(f64, ArrayD<f64>)> {
    if f_s.batch_size() != f_t.batch_size() {
        return Err(Error::Shape(format!(
            "batch sizes differ: {} vs {}",
            f_s.batch_size(),
            f_t.batch_size()
        )));
    }
    let (a, cache_s) = match proj_s {
        Some(p) => {
            let (o, c) = p.forward_cached(f_s)?;
            (o, Some(c))
        }
        None => (f_s.clone(), None),
    };
    let b = match proj_t {
        Some(p) => p.forward(f_t)?,
        None => f_t.clone(),
    };
    if a.values.ndim() != b.values.ndim() || a.channels() != b.channels() {
        return Err(Error::Shape(format!(
            "projected features `{}` {:?} and `{}` {:?} cannot be aligned",
            a.layer_id,
            a.values.shape(),
            b.layer_id,
            b.values.shape()
        )));
    }
    let (ga, gb) = (a.grid(), b.grid());
    let target = (ga.0.min(gb.0), ga.1.min(gb.1));
    let a3 = resize_ncp(&a.as_ncp(), ga, target);
    let b3 = resize_ncp(&b.as_ncp(), gb, target);
    let (value, da) = feature_distance(&a3, &b3, metric);
    let da = resize_ncp_backward(&da, ga, target);
    let dx = match (proj_s, cache_s) {
        (Some(p), Some(c)) => p.backward(&c, &da),
        _ => da,
    };
    let grad = dx
        .into_shape_with_order(IxDyn(f_s.values.shape()))
        .expect("grad reshape");
    Ok((value, grad))
}

fn row_normalize(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    (x / &norms.view().insert_axis(Axis(1)), norms)
}

fn row_normalize_backward(xhat: &Array2<f64>, norms: &Array1<f64>, g: &Array2<f64>) -> Array2<f64> {
    let proj = (xhat * g).sum_axis(Axis(1)).insert_axis(Axis(1));
    (g - &(xhat * &proj)) / &norms.view().insert_axis(Axis(1))
}

/// Correlation congruence: mean squared difference between the batch Gram
/// matrices of row-normalized student and teacher features.
pub fn cc_loss(f_s: &FeatureMap, f_t: &FeatureMap) -> Result<f64> {
    cc_loss_with_grad(f_s, f_t).map(|(v, _)| v)
}

pub fn cc_loss_with_grad(f_s: &FeatureMap, f_t: &FeatureMap) -> Result<(f64, ArrayD<f64>)> {
    let n = f_s.batch_size();
    if n < 2 || f_t.batch_size() != n {
        return Err(Error::Batch(format!(
            "CC needs matching batch sizes >= 2, got {n} and {}",
            f_t.batch_size()
        )));
    }
    let (xs, ns) = row_normalize(&f_s.flatten());
    let (xt, _) = row_normalize(&f_t.flatten());
    let gs = xs.dot(&xs.t());
    let gt = xt.dot(&xt.t());
    let diff = &gs - &gt;
    let m = (n * n) as f64;
    let value = diff.mapv(|d| d * d).sum() / m;
    let dg = &diff * (2.0 / m);
    let dxhat = (&dg + &dg.t()).dot(&xs);
    let dx = row_normalize_backward(&xs, &ns, &dxhat);
    Ok((value, dx.into_shape_with_order(IxDyn(f_s.values.shape())).expect("reshape")))
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

fn pairwise_distances(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = &x.row(i) - &x.row(j);
            let v = diff.dot(&diff).sqrt();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

fn mean_offdiag(d: &Array2<f64>) -> f64 {
    let n = d.nrows();
    d.sum() / (n * (n - 1)) as f64
}

/// Unit difference vectors `u[a][b] = normalize(x_b - x_a)` (zero when a = b)
/// and their pre-normalization lengths.
fn unit_differences(x: ArrayView2<f64>) -> (Array3<f64>, Array2<f64>) {
    let (n, d) = x.dim();
    let mut u = Array3::zeros((n, n, d));
    let mut len = Array2::zeros((n, n));
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let v = &x.row(b) - &x.row(a);
            let l = v.dot(&v).sqrt().max(1e-12);
            len[[a, b]] = l;
            u.slice_mut(ndarray::s![a, b, ..]).assign(&(v / l));
        }
    }
    (u, len)
}

/// Relational KD: `distance_weight·L_dist + angle_weight·L_angle`, both
/// smooth-L1 between student and teacher relational structure.
pub fn rkd_loss(f_s: &FeatureMap, f_t: &FeatureMap, distance_weight: f64, angle_weight: f64) -> Result<f64> {
    rkd_loss_with_grad(f_s, f_t, distance_weight, angle_weight).map(|(v, _)| v)
}

pub fn rkd_loss_with_grad(
    f_s: &FeatureMap,
    f_t: &FeatureMap,
    distance_weight: f64,
    angle_weight: f64,
) -> Result<(f64, ArrayD<f64>)> {
    let n = f_s.batch_size();
    if n < 3 || f_t.batch_size() != n {
        return Err(Error::Batch(format!(
            "RKD needs matching batch sizes >= 3, got {n} and {}",
            f_t.batch_size()
        )));
    }
    let xs = f_s.flatten();
    let xt = f_t.flatten();
    let dim = xs.ncols();
    let mut grad = Array2::<f64>::zeros(xs.raw_dim());

    // distance term
    let ds = pairwise_distances(xs.view());
    let dt = pairwise_distances(xt.view());
    let (mu_s, mu_t) = (mean_offdiag(&ds), mean_offdiag(&dt));
    if mu_s <= 0.0 || mu_t <= 0.0 {
        return Err(Error::Numeric("RKD: all embeddings coincide".into()));
    }
    let nn = (n * n) as f64;
    let pairs = (n * (n - 1)) as f64;
    let mut dist_loss = 0.0;
    let mut g_d = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (v, dv) = smooth_l1(ds[[i, j]] / mu_s - dt[[i, j]] / mu_t);
            dist_loss += v;
            g_d[[i, j]] = dv / nn;
        }
    }
    dist_loss /= nn;
    let through_mean = (&g_d * &ds).sum() / (mu_s * mu_s * pairs);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dd = g_d[[i, j]] / mu_s - through_mean;
            let dir = (&xs.row(i) - &xs.row(j)) / ds[[i, j]].max(1e-12);
            let upd = dir * (distance_weight * dd);
            grad.row_mut(i).scaled_add(1.0, &upd);
            grad.row_mut(j).scaled_add(-1.0, &upd);
        }
    }

    // angle term
    let (us, ls) = unit_differences(xs.view());
    let (ut, _) = unit_differences(xt.view());
    let nnn = (n * n * n) as f64;
    let mut angle_loss = 0.0;
    let mut g_u = Array3::<f64>::zeros((n, n, dim));
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let as_ = us.slice(ndarray::s![a, b, ..]).dot(&us.slice(ndarray::s![a, c, ..]));
                let at = ut.slice(ndarray::s![a, b, ..]).dot(&ut.slice(ndarray::s![a, c, ..]));
                let (v, dv) = smooth_l1(as_ - at);
                angle_loss += v;
                if dv != 0.0 {
                    let w = angle_weight * dv / nnn;
                    let uac = us.slice(ndarray::s![a, c, ..]).to_owned();
                    let uab = us.slice(ndarray::s![a, b, ..]).to_owned();
                    g_u.slice_mut(ndarray::s![a, b, ..]).scaled_add(w, &uac);
                    g_u.slice_mut(ndarray::s![a, c, ..]).scaled_add(w, &uab);
                }
            }
        }
    }
    angle_loss /= nnn;
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let u = us.slice(ndarray::s![a, b, ..]);
            let g = g_u.slice(ndarray::s![a, b, ..]);
            let gv = (&g - &(&u * u.dot(&g))) / ls[[a, b]];
            grad.row_mut(b).scaled_add(1.0, &gv);
            grad.row_mut(a).scaled_add(-1.0, &gv);
        }
    }

    let value = distance_weight * dist_loss + angle_weight * angle_loss;
    Ok((value, grad.into_shape_with_order(IxDyn(f_s.values.shape())).expect("reshape")))
}

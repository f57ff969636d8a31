//! Layers. Convolutions and matrix products run in f16 when `Ctx::amp` is
//! set; normalization, activations and everything downstream stay in f32.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, Var, D};
use half::{f16, slice::HalfFloatSliceExt};
use kdbench_core::data::stream_rng;
use rand::Rng;

use crate::params::{Buffer, Builder};

pub type CResult<T> = candle_core::Result<T>;

#[derive(Debug, Clone, Copy)]
pub struct Ctx {
    pub train: bool,
    pub amp: bool,
    /// Keys the stochastic-depth masks of one forward pass.
    pub drop_seed: u64,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            amp: false,
            drop_seed: 0,
        }
    }

    pub fn train(amp: bool, drop_seed: u64) -> Self {
        Self {
            train: true,
            amp,
            drop_seed,
        }
    }
}

/// Rounds to f16 precision (overflow included) but keeps f32 storage:
/// candle's CPU f16 kernels are scalar, while f32 matmul accumulates the
/// same way mixed-precision hardware does. Gradients round on the way back.
fn to_half_precision(t: &Tensor) -> CResult<Tensor> {
    t.contiguous()?.apply_op1(HalfRound)
}

/// f32 -> f16 -> f32 as one op, so neither pass creates f16 tensors.
struct HalfRound;

impl CustomOp1 for HalfRound {
    fn name(&self) -> &'static str {
        "half-round"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (CpuStorage::F32(v), Some((a, b))) = (s, l.contiguous_offsets()) else {
            candle_core::bail!("half-round expects contiguous f32");
        };
        let mut h = vec![f16::ZERO; b - a];
        h.convert_from_f32_slice(&v[a..b]);
        let mut out = vec![0f32; b - a];
        h.convert_to_f32_slice(&mut out);
        Ok((CpuStorage::F32(out), l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(to_half_precision(grad)?))
    }
}

fn half(t: &Tensor, amp: bool) -> CResult<Tensor> {
    if amp {
        to_half_precision(t)
    } else {
        Ok(t.clone())
    }
}

fn full(t: Tensor, amp: bool) -> CResult<Tensor> {
    if amp {
        to_half_precision(&t)
    } else {
        Ok(t)
    }
}

pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl Conv2d {
    /// Kaiming-normal (fan-out) weights, no bias.
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> Self {
        let fan_out = (cout / groups * k * k) as f64;
        b.push(name);
        let weight = b.normal("weight", &[cout, cin / groups, k, k], (2.0 / fan_out).sqrt(), true);
        b.pop();
        Self {
            weight,
            bias: None,
            stride,
            padding: k / 2,
            groups,
        }
    }

    /// Patchifying convolution (kernel = stride, no padding) with bias.
    pub fn patchify(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, std: f64) -> Self {
        b.push(name);
        let weight = b.trunc_normal("weight", &[cout, cin, k, k], std, true);
        let bias = b.constant("bias", &[cout], 0.0, false);
        b.pop();
        Self {
            weight,
            bias: Some(bias),
            stride: k,
            padding: 0,
            groups: 1,
        }
    }

    /// Depthwise k×k convolution with bias (same padding).
    pub fn depthwise(b: &mut Builder, name: &str, c: usize, k: usize) -> Self {
        b.push(name);
        let weight = b.trunc_normal("weight", &[c, 1, k, k], 0.02, true);
        let bias = b.constant("bias", &[c], 0.0, false);
        b.pop();
        Self {
            weight,
            bias: Some(bias),
            stride: 1,
            padding: k / 2,
            groups: c,
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> CResult<Tensor> {
        let (x, w) = (half(x, ctx.amp)?, half(self.weight.as_tensor(), ctx.amp)?);
        let y = if self.groups == 1 {
            conv_unfold(&x, &w, self.stride, self.padding)?
        } else if self.groups == x.dim(1)? && w.dim(1)? == 1 {
            depthwise_shifted(&x, &w, self.stride, self.padding)?
        } else {
            x.conv2d(&w, self.padding, self.stride, 1, self.groups)?
        };
        let y = full(y, ctx.amp)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Every `s`-th row and column from the origin, `oh` × `ow` of them.
fn subsample(t: &Tensor, s: usize, oh: usize, ow: usize) -> CResult<Tensor> {
    let t = t.narrow(2, 0, (oh - 1) * s + 1)?.narrow(3, 0, (ow - 1) * s + 1)?;
    if s == 1 {
        return Ok(t);
    }
    let (n, c, _, _) = t.dims4()?;
    t.pad_with_zeros(2, 0, s - 1)?
        .pad_with_zeros(3, 0, s - 1)?
        .reshape((n, c, oh, s, ow, s))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?
        .reshape((n, c, oh, ow))
}

/// Dense convolution as patch extraction plus one matmul. candle's CPU
/// conv backward goes through a naive transposed convolution; slicing and
/// matmul have fast backward passes.
fn conv_unfold(x: &Tensor, w: &Tensor, s: usize, pad: usize) -> CResult<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, _, kh, kw) = w.dims4()?;
    let (oh, ow) = ((h + 2 * pad - kh) / s + 1, (wd + 2 * pad - kw) / s + 1);
    let cols = if pad == 0 && kh == s && kw == s {
        x.narrow(2, 0, oh * s)?
            .narrow(3, 0, ow * s)?
            .reshape((n, c, oh, s, ow, s))?
            .permute((0, 2, 4, 1, 3, 5))?
            .reshape((n * oh * ow, c * s * s))?
    } else if pad == 0 && kh == 1 && kw == 1 {
        subsample(x, s, oh, ow)?.permute((0, 2, 3, 1))?.reshape((n * oh * ow, c))?
    } else {
        let xp = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
        let mut taps = Vec::with_capacity(kh * kw);
        for dy in 0..kh {
            for dx in 0..kw {
                taps.push(subsample(&xp.narrow(2, dy, h + 2 * pad - dy)?.narrow(3, dx, wd + 2 * pad - dx)?, s, oh, ow)?);
            }
        }
        Tensor::stack(&taps, 4)?.permute((0, 2, 3, 1, 4))?.reshape((n * oh * ow, c * kh * kw))?
    };
    cols.matmul(&w.reshape((o, ()))?.t()?)?
        .reshape((n, oh, ow, o))?
        .permute((0, 3, 1, 2))?
        .contiguous()
}

/// Depthwise convolution as a sum of shifted, per-channel scaled copies of
/// the padded input. Grouped `conv2d` on CPU runs one convolution per
/// channel, which is far slower for wide layers.
fn depthwise_shifted(x: &Tensor, w: &Tensor, s: usize, pad: usize) -> CResult<Tensor> {
    let (_, c, h, wd) = x.dims4()?;
    let (_, _, kh, kw) = w.dims4()?;
    let xp = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
    let (oh, ow) = ((h + 2 * pad - kh) / s + 1, (wd + 2 * pad - kw) / s + 1);
    let mut acc: Option<Tensor> = None;
    for dy in 0..kh {
        for dx in 0..kw {
            let shifted = xp.narrow(2, dy, h + 2 * pad - dy)?.narrow(3, dx, wd + 2 * pad - dx)?;
            let tap = w.narrow(2, dy, 1)?.narrow(3, dx, 1)?.reshape((1, c, 1, 1))?;
            let term = subsample(&shifted, s, oh, ow)?.broadcast_mul(&tap)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
    }
    Ok(acc.expect("kernel has at least one tap"))
}

pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    running_mean: Buffer,
    running_var: Buffer,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl BatchNorm2d {
    pub fn new(b: &mut Builder, name: &str, c: usize, zero_gamma: bool) -> Self {
        b.push(name);
        let gamma = b.constant("weight", &[c], if zero_gamma { 0.0 } else { 1.0 }, false);
        let beta = b.constant("bias", &[c], 0.0, false);
        let running_mean = b.buffer("running_mean", &[c], 0.0);
        let running_var = b.buffer("running_var", &[c], 1.0);
        b.pop();
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> CResult<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = if ctx.train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let m = (n * h * w) as f64;
            let unbiased = if m > 1.0 { (var.detach() * (m / (m - 1.0)))? } else { var.detach() };
            let rm = ((self.running_mean.get() * (1.0 - BN_MOMENTUM))? + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?;
            let rv = ((self.running_var.get() * (1.0 - BN_MOMENTUM))? + (unbiased.flatten_all()? * BN_MOMENTUM)?)?;
            self.running_mean.set(rm);
            self.running_var.set(rv);
            (mean, var)
        } else {
            (
                self.running_mean.get().reshape((1, c, 1, 1))?,
                self.running_var.get().reshape((1, c, 1, 1))?,
            )
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        xhat.broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)
    }
}

pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// Truncated-normal weights (std 0.02), zero bias.
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        b.push(name);
        let weight = b.trunc_normal("weight", &[cout, cin], 0.02, true);
        let bias = b.constant("bias", &[cout], 0.0, false);
        b.pop();
        Self { weight, bias }
    }

    /// PyTorch default: uniform(±1/sqrt(fan_in)) for weight and bias.
    pub fn new_uniform(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        b.push(name);
        let weight = b.uniform("weight", &[cout, cin], bound, true);
        let bias = b.uniform("bias", &[cout], bound, false);
        b.pop();
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> CResult<Tensor> {
        let w = half(self.weight.as_tensor(), ctx.amp)?.t()?;
        // One 2D matmul over all leading dims; broadcast_matmul would copy
        // the weight per leading index.
        let mut dims = x.dims().to_vec();
        let cin = dims.pop().expect("linear input has a feature dim");
        let x2 = half(x, ctx.amp)?.reshape(((), cin))?;
        let y = full(x2.matmul(&w)?, ctx.amp)?;
        dims.push(y.dim(1)?);
        y.reshape(dims)?.broadcast_add(self.bias.as_tensor())
    }
}

/// Normalization over the last dimension.
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, c: usize, eps: f64) -> Self {
        b.push(name);
        let gamma = b.constant("weight", &[c], 1.0, false);
        let beta = b.constant("bias", &[c], 0.0, false);
        b.pop();
        Self { gamma, beta, eps }
    }

    pub fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        xc.broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())
    }

    /// Channels-first input (N, C, H, W).
    pub fn forward_nchw(&self, x: &Tensor) -> CResult<Tensor> {
        self.forward(&x.permute((0, 2, 3, 1))?)?.permute((0, 3, 1, 2))?.contiguous()
    }
}

pub fn softmax_last(x: &Tensor) -> CResult<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn relu6(x: &Tensor) -> CResult<Tensor> {
    x.clamp(0f32, 6f32)
}

/// Per-sample stochastic depth on a residual branch, rescaled by `1/keep`.
pub fn drop_path(x: &Tensor, rate: f64, block: u64, ctx: &Ctx) -> CResult<Tensor> {
    if !ctx.train || rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let n = x.dim(0)?;
    let mut rng = stream_rng(&[ctx.drop_seed, block]);
    let mask: Vec<f32> = (0..n)
        .map(|_| if rng.random_bool(keep) { (1.0 / keep) as f32 } else { 0.0 })
        .collect();
    let mut shape = vec![1usize; x.rank()];
    shape[0] = n;
    x.broadcast_mul(&Tensor::from_vec(mask, shape, x.device())?)
}

/// Global average over the spatial axes of an NCHW map.
pub fn global_pool(x: &Tensor) -> CResult<Tensor> {
    x.mean((2, 3))
}

/// 3×3 stride-2 max pooling with one pixel of padding, built from shifted
/// elementwise maxima so it has a backward pass (candle's pooling op only
/// differentiates non-overlapping windows). Edge replication stands in for
/// -inf padding: a replicated value is already inside its window.
pub fn max_pool_3x3_s2(x: &Tensor) -> CResult<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let xp = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let rows = xp.narrow(2, 0, h)?.maximum(&xp.narrow(2, 1, h)?)?.maximum(&xp.narrow(2, 2, h)?)?;
    let m = rows.narrow(3, 0, w)?.maximum(&rows.narrow(3, 1, w)?)?.maximum(&rows.narrow(3, 2, w)?)?;
    subsample(&m, 2, h.div_ceil(2), w.div_ceil(2))
}

/// Linearly increasing stochastic-depth rates over `blocks` blocks.
pub fn drop_rates(rate: f64, blocks: usize) -> Vec<f64> {
    if blocks <= 1 {
        return vec![0.0; blocks];
    }
    (0..blocks).map(|i| rate * i as f64 / (blocks - 1) as f64).collect()
}

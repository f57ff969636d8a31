//! ConvNeXt. The second-generation variant swaps layer scale for global
//! response normalization inside the MLP.

use candle_core::{Tensor, Var};

use super::{Forward, Network, Taps};
use crate::nn::{drop_path, drop_rates, CResult, Conv2d, Ctx, LayerNorm, Linear};
use crate::params::Builder;

#[derive(Debug, Clone, Copy)]
pub struct ConvNeXtConfig {
    dims: [usize; 4],
    depths: [usize; 4],
}

pub const TINY: ConvNeXtConfig = ConvNeXtConfig {
    dims: [96, 192, 384, 768],
    depths: [3, 3, 9, 3],
};
pub const XLARGE: ConvNeXtConfig = ConvNeXtConfig {
    dims: [256, 512, 1024, 2048],
    depths: [3, 3, 27, 3],
};

const LN_EPS: f64 = 1e-6;
const LAYER_SCALE_INIT: f32 = 1e-6;

struct Grn {
    gamma: Var,
    beta: Var,
}

impl Grn {
    /// Channels-last input (N, H, W, C).
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let gx = x.sqr()?.sum_keepdim((1, 2))?.sqrt()?;
        let nx = gx.broadcast_div(&(gx.mean_keepdim(3)? + 1e-6)?)?;
        let scaled = x.broadcast_mul(&nx)?.broadcast_mul(self.gamma.as_tensor())?;
        scaled.broadcast_add(self.beta.as_tensor())? + x
    }
}

struct Block {
    dw: Conv2d,
    norm: LayerNorm,
    fc1: Linear,
    grn: Option<Grn>,
    fc2: Linear,
    layer_scale: Option<Var>,
    drop: f64,
    id: u64,
}

impl Block {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> CResult<Tensor> {
        let h = self.dw.forward(x, ctx)?.permute((0, 2, 3, 1))?;
        let h = self.fc1.forward(&self.norm.forward(&h)?, ctx)?.gelu_erf()?;
        let h = match &self.grn {
            Some(g) => g.forward(&h)?,
            None => h,
        };
        let mut h = self.fc2.forward(&h, ctx)?;
        if let Some(ls) = &self.layer_scale {
            h = h.broadcast_mul(ls.as_tensor())?;
        }
        let h = h.permute((0, 3, 1, 2))?.contiguous()?;
        x + drop_path(&h, self.drop, self.id, ctx)?
    }
}

struct Stage {
    downsample: Option<(LayerNorm, Conv2d)>,
    blocks: Vec<Block>,
}

pub struct ConvNeXt {
    stem: Conv2d,
    stem_norm: LayerNorm,
    stages: Vec<Stage>,
    head_norm: LayerNorm,
    head: Linear,
}

impl ConvNeXt {
    pub fn new(b: &mut Builder, cfg: ConvNeXtConfig, v2: bool, classes: usize, drop_path: f64) -> Self {
        let stem = Conv2d::patchify(b, "stem.0", 3, cfg.dims[0], 4, 0.02);
        let stem_norm = LayerNorm::new(b, "stem.1", cfg.dims[0], LN_EPS);
        let rates = drop_rates(drop_path, cfg.depths.iter().sum());
        let mut id = 0usize;
        let mut stages = Vec::new();
        for s in 0..4 {
            let d = cfg.dims[s];
            b.push(format!("stages.{s}"));
            let downsample = (s > 0).then(|| {
                (
                    LayerNorm::new(b, "downsample.0", cfg.dims[s - 1], LN_EPS),
                    Conv2d::patchify(b, "downsample.1", cfg.dims[s - 1], d, 2, 0.02),
                )
            });
            let mut blocks = Vec::new();
            for j in 0..cfg.depths[s] {
                b.push(format!("blocks.{j}"));
                let dw = Conv2d::depthwise(b, "conv_dw", d, 7);
                let norm = LayerNorm::new(b, "norm", d, LN_EPS);
                let fc1 = Linear::new(b, "mlp.fc1", d, 4 * d);
                let grn = v2.then(|| Grn {
                    gamma: b.constant("mlp.grn.weight", &[4 * d], 0.0, false),
                    beta: b.constant("mlp.grn.bias", &[4 * d], 0.0, false),
                });
                let fc2 = Linear::new(b, "mlp.fc2", 4 * d, d);
                let layer_scale = (!v2).then(|| b.constant("gamma", &[d], LAYER_SCALE_INIT, false));
                blocks.push(Block {
                    dw,
                    norm,
                    fc1,
                    grn,
                    fc2,
                    layer_scale,
                    drop: rates[id],
                    id: id as u64,
                });
                id += 1;
                b.pop();
            }
            b.pop();
            stages.push(Stage { downsample, blocks });
        }
        let head_norm = LayerNorm::new(b, "head.norm", cfg.dims[3], LN_EPS);
        let head = Linear::new(b, "head.fc", cfg.dims[3], classes);
        Self {
            stem,
            stem_norm,
            stages,
            head_norm,
            head,
        }
    }
}

impl Network for ConvNeXt {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> CResult<Forward> {
        let mut taps = Taps::new();
        let mut h = self.stem_norm.forward_nchw(&self.stem.forward(x, ctx)?)?;
        taps.put("stem", &h);
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some((norm, conv)) = &stage.downsample {
                h = conv.forward(&norm.forward_nchw(&h)?, ctx)?;
            }
            for block in &stage.blocks {
                h = block.forward(&h, ctx)?;
            }
            taps.put(format!("stage{}", i + 1), &h);
        }
        let pool = self.head_norm.forward(&h.mean((2, 3))?)?;
        let logits = self.head.forward(&pool, ctx)?;
        Ok(taps.finish(&h, &pool, logits))
    }

    fn stages(&self) -> usize {
        4
    }
}

//! Plain pre-norm vision transformer with a class token and learned
//! position embeddings sized for the build resolution.

use candle_core::Tensor;
use kdbench_core::{Error, Result};

use super::{Forward, Network, Taps};
use crate::nn::{drop_path, drop_rates, softmax_last, CResult, Conv2d, Ctx, LayerNorm, Linear};
use crate::params::Builder;

#[derive(Debug, Clone, Copy)]
pub struct VitConfig {
    dim: usize,
    depth: usize,
    heads: usize,
}

pub const TINY: VitConfig = VitConfig { dim: 192, depth: 12, heads: 3 };
pub const SMALL: VitConfig = VitConfig { dim: 384, depth: 12, heads: 6 };
pub const BASE: VitConfig = VitConfig { dim: 768, depth: 12, heads: 12 };
pub const LARGE: VitConfig = VitConfig { dim: 1024, depth: 24, heads: 16 };

const PATCH: usize = 16;
const LN_EPS: f64 = 1e-6;

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    drop: f64,
    id: u64,
}

impl Block {
    fn attention(&self, x: &Tensor, ctx: &Ctx) -> CResult<Tensor> {
        let (n, t, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x, ctx)?
            .reshape((n, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let attn = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let out = softmax_last(&attn)?.matmul(&v)?;
        let out = out.transpose(1, 2)?.reshape((n, t, d))?;
        self.proj.forward(&out, ctx)
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> CResult<Tensor> {
        let a = self.attention(&self.norm1.forward(x)?, ctx)?;
        let x = (x + drop_path(&a, self.drop, 2 * self.id, ctx)?)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?, ctx)?.gelu_erf()?, ctx)?;
        x + drop_path(&m, self.drop, 2 * self.id + 1, ctx)?
    }
}

pub struct Vit {
    patch_embed: Conv2d,
    cls_token: candle_core::Var,
    pos_embed: candle_core::Var,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
    grid: usize,
}

impl Vit {
    pub fn new(b: &mut Builder, cfg: VitConfig, resolution: usize, classes: usize, drop_path: f64) -> Result<Self> {
        if resolution < PATCH || resolution % PATCH != 0 {
            return Err(Error::Config(format!(
                "vision transformer needs a resolution divisible by {PATCH}, got {resolution}"
            )));
        }
        let grid = resolution / PATCH;
        let d = cfg.dim;
        let patch_embed = Conv2d::patchify(b, "patch_embed.proj", 3, d, PATCH, 0.02);
        let cls_token = b.trunc_normal("cls_token", &[1, 1, d], 0.02, false);
        let pos_embed = b.trunc_normal("pos_embed", &[1, grid * grid + 1, d], 0.02, false);
        let rates = drop_rates(drop_path, cfg.depth);
        let mut blocks = Vec::new();
        for (i, &rate) in rates.iter().enumerate() {
            b.push(format!("blocks.{i}"));
            blocks.push(Block {
                norm1: LayerNorm::new(b, "norm1", d, LN_EPS),
                qkv: Linear::new(b, "attn.qkv", d, 3 * d),
                proj: Linear::new(b, "attn.proj", d, d),
                norm2: LayerNorm::new(b, "norm2", d, LN_EPS),
                fc1: Linear::new(b, "mlp.fc1", d, 4 * d),
                fc2: Linear::new(b, "mlp.fc2", 4 * d, d),
                heads: cfg.heads,
                drop: rate,
                id: i as u64,
            });
            b.pop();
        }
        let norm = LayerNorm::new(b, "norm", d, LN_EPS);
        let head = Linear::new(b, "head", d, classes);
        Ok(Self {
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
            grid,
        })
    }

    /// Patch tokens (without the class token) as an N×D×g×g map.
    fn as_map(&self, tokens: &Tensor) -> CResult<Tensor> {
        let (n, t, d) = tokens.dims3()?;
        tokens
            .narrow(1, 1, t - 1)?
            .transpose(1, 2)?
            .reshape((n, d, self.grid, self.grid))
    }
}

impl Network for Vit {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> CResult<Forward> {
        let mut taps = Taps::new();
        let p = self.patch_embed.forward(x, ctx)?;
        let (n, d, gh, gw) = p.dims4()?;
        if gh != self.grid || gw != self.grid {
            return Err(candle_core::Error::Msg(format!(
                "input grid {gh}x{gw} does not match position embeddings for {}x{}",
                self.grid, self.grid
            )));
        }
        taps.put("stem", &p);
        let tokens = p.flatten_from(2)?.transpose(1, 2)?;
        let cls = self.cls_token.as_tensor().broadcast_as((n, 1, d))?;
        let mut h = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(self.pos_embed.as_tensor())?;
        let per_stage = self.blocks.len() / 4;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, ctx)?;
            if (i + 1) % per_stage == 0 {
                taps.put(format!("stage{}", (i + 1) / per_stage), &self.as_map(&h)?);
            }
        }
        let h = self.norm.forward(&h)?;
        let pool = h.narrow(1, 0, 1)?.squeeze(1)?;
        let logits = self.head.forward(&pool, ctx)?;
        let last = self.as_map(&h)?;
        Ok(taps.finish(&last, &pool, logits))
    }

    fn stages(&self) -> usize {
        4
    }
}

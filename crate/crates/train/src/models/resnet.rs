//! Residual networks: the three-stage CIFAR family and the four-stage
//! ImageNet family (basic and bottleneck blocks, stride on the 3×3 conv).
//! Parameter names follow the torchvision layout.

use candle_core::Tensor;

use super::{Forward, Network, Taps};
use crate::nn::{drop_path, drop_rates, global_pool, max_pool_3x3_s2, BatchNorm2d, CResult, Conv2d, Ctx, Linear};
use crate::params::Builder;

struct Downsample {
    conv: Conv2d,
    bn: BatchNorm2d,
}

struct Block {
    convs: Vec<(Conv2d, BatchNorm2d)>,
    downsample: Option<Downsample>,
    drop: f64,
    id: u64,
}

impl Block {
    fn basic(b: &mut Builder, cin: usize, planes: usize, stride: usize, drop: f64, id: u64, zero_last: bool) -> Self {
        let convs = vec![
            (Conv2d::new(b, "conv1", cin, planes, 3, stride, 1), BatchNorm2d::new(b, "bn1", planes, false)),
            (Conv2d::new(b, "conv2", planes, planes, 3, 1, 1), BatchNorm2d::new(b, "bn2", planes, zero_last)),
        ];
        let downsample = Self::shortcut(b, cin, planes, stride);
        Self { convs, downsample, drop, id }
    }

    fn bottleneck(b: &mut Builder, cin: usize, planes: usize, stride: usize, drop: f64, id: u64) -> Self {
        let out = planes * 4;
        let convs = vec![
            (Conv2d::new(b, "conv1", cin, planes, 1, 1, 1), BatchNorm2d::new(b, "bn1", planes, false)),
            (Conv2d::new(b, "conv2", planes, planes, 3, stride, 1), BatchNorm2d::new(b, "bn2", planes, false)),
            (Conv2d::new(b, "conv3", planes, out, 1, 1, 1), BatchNorm2d::new(b, "bn3", out, true)),
        ];
        let downsample = Self::shortcut(b, cin, out, stride);
        Self { convs, downsample, drop, id }
    }

    fn shortcut(b: &mut Builder, cin: usize, cout: usize, stride: usize) -> Option<Downsample> {
        if stride == 1 && cin == cout {
            return None;
        }
        b.push("downsample");
        let ds = Downsample {
            conv: Conv2d::new(b, "0", cin, cout, 1, stride, 1),
            bn: BatchNorm2d::new(b, "1", cout, false),
        };
        b.pop();
        Some(ds)
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> CResult<Tensor> {
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            h = bn.forward(&conv.forward(&h, ctx)?, ctx)?;
            if i < last {
                h = h.relu()?;
            }
        }
        let skip = match &self.downsample {
            Some(d) => d.bn.forward(&d.conv.forward(x, ctx)?, ctx)?,
            None => x.clone(),
        };
        (drop_path(&h, self.drop, self.id, ctx)? + skip)?.relu()
    }
}

fn run_stages(stages: &[Vec<Block>], mut x: Tensor, ctx: &Ctx, taps: &mut Taps) -> CResult<Tensor> {
    for (i, stage) in stages.iter().enumerate() {
        for block in stage {
            x = block.forward(&x, ctx)?;
        }
        taps.put(format!("stage{}", i + 1), &x);
    }
    Ok(x)
}

pub struct CifarResNet {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    stages: Vec<Vec<Block>>,
    fc: Linear,
}

impl CifarResNet {
    pub fn new(b: &mut Builder, blocks: usize, widths: [usize; 3], stem: usize, classes: usize) -> Self {
        let conv1 = Conv2d::new(b, "conv1", 3, stem, 3, 1, 1);
        let bn1 = BatchNorm2d::new(b, "bn1", stem, false);
        let mut cin = stem;
        let mut stages = Vec::new();
        for (s, &w) in widths.iter().enumerate() {
            b.push(format!("layer{}", s + 1));
            let mut stage = Vec::new();
            for i in 0..blocks {
                b.push(i.to_string());
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                stage.push(Block::basic(b, cin, w, stride, 0.0, 0, false));
                cin = w;
                b.pop();
            }
            b.pop();
            stages.push(stage);
        }
        let fc = Linear::new_uniform(b, "fc", cin, classes);
        Self { conv1, bn1, stages, fc }
    }
}

impl Network for CifarResNet {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> CResult<Forward> {
        let mut taps = Taps::new();
        let h = self.bn1.forward(&self.conv1.forward(x, ctx)?, ctx)?.relu()?;
        taps.put("stem", &h);
        let h = run_stages(&self.stages, h, ctx, &mut taps)?;
        let pool = global_pool(&h)?;
        let logits = self.fc.forward(&pool, ctx)?;
        Ok(taps.finish(&h, &pool, logits))
    }

    fn stages(&self) -> usize {
        3
    }
}

pub struct ResNet {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    stages: Vec<Vec<Block>>,
    fc: Linear,
}

impl ResNet {
    pub fn new(b: &mut Builder, bottleneck: bool, layers: [usize; 4], classes: usize, drop_path: f64) -> Self {
        let conv1 = Conv2d::new(b, "conv1", 3, 64, 7, 2, 1);
        let bn1 = BatchNorm2d::new(b, "bn1", 64, false);
        let rates = drop_rates(drop_path, layers.iter().sum());
        let mut cin = 64;
        let mut id = 0usize;
        let mut stages = Vec::new();
        for (s, &n) in layers.iter().enumerate() {
            let planes = 64 << s;
            b.push(format!("layer{}", s + 1));
            let mut stage = Vec::new();
            for i in 0..n {
                b.push(i.to_string());
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let block = if bottleneck {
                    Block::bottleneck(b, cin, planes, stride, rates[id], id as u64)
                } else {
                    Block::basic(b, cin, planes, stride, rates[id], id as u64, true)
                };
                cin = if bottleneck { planes * 4 } else { planes };
                stage.push(block);
                id += 1;
                b.pop();
            }
            b.pop();
            stages.push(stage);
        }
        let fc = Linear::new_uniform(b, "fc", cin, classes);
        Self { conv1, bn1, stages, fc }
    }
}

impl Network for ResNet {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> CResult<Forward> {
        let mut taps = Taps::new();
        let h = self.bn1.forward(&self.conv1.forward(x, ctx)?, ctx)?.relu()?;
        let h = max_pool_3x3_s2(&h)?;
        taps.put("stem", &h);
        let h = run_stages(&self.stages, h, ctx, &mut taps)?;
        let pool = global_pool(&h)?;
        let logits = self.fc.forward(&pool, ctx)?;
        Ok(taps.finish(&h, &pool, logits))
    }

    fn stages(&self) -> usize {
        4
    }
}

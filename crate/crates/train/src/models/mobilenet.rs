use candle_core::Tensor;

use super::{Forward, Network, Taps};
use crate::nn::{global_pool, relu6, BatchNorm2d, CResult, Conv2d, Ctx, Linear};
use crate::params::Builder;

/// (expansion, channels, repeats, first stride)
const SETTINGS: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, act: bool) -> Self {
        b.push(name);
        let conv = Conv2d::new(b, "0", cin, cout, k, stride, groups);
        let bn = BatchNorm2d::new(b, "1", cout, false);
        b.pop();
        Self { conv, bn, act }
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> CResult<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x, ctx)?, ctx)?;
        if self.act {
            relu6(&y)
        } else {
            Ok(y)
        }
    }
}

struct InvertedResidual {
    layers: Vec<ConvBn>,
    residual: bool,
}

impl InvertedResidual {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> CResult<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h, ctx)?;
        }
        if self.residual {
            h + x
        } else {
            Ok(h)
        }
    }
}

pub struct MobileNetV2 {
    stem: ConvBn,
    stages: Vec<Vec<InvertedResidual>>,
    head: ConvBn,
    classifier: Linear,
}

impl MobileNetV2 {
    pub fn new(b: &mut Builder, classes: usize) -> Self {
        b.push("features");
        let stem = ConvBn::new(b, "0", 3, 32, 3, 2, 1, true);
        let mut cin = 32;
        let mut idx = 1;
        let mut stages = Vec::new();
        for (t, c, n, s) in SETTINGS {
            let mut stage = Vec::new();
            for i in 0..n {
                let stride = if i == 0 { s } else { 1 };
                let hidden = cin * t;
                b.push(idx.to_string());
                let mut layers = Vec::new();
                if t != 1 {
                    layers.push(ConvBn::new(b, "expand", cin, hidden, 1, 1, 1, true));
                }
                layers.push(ConvBn::new(b, "dw", hidden, hidden, 3, stride, hidden, true));
                layers.push(ConvBn::new(b, "project", hidden, c, 1, 1, 1, false));
                b.pop();
                stage.push(InvertedResidual {
                    layers,
                    residual: stride == 1 && cin == c,
                });
                cin = c;
                idx += 1;
            }
            stages.push(stage);
        }
        let head = ConvBn::new(b, &idx.to_string(), cin, 1280, 1, 1, 1, true);
        b.pop();
        let classifier = Linear::new(b, "classifier", 1280, classes);
        Self {
            stem,
            stages,
            head,
            classifier,
        }
    }
}

impl Network for MobileNetV2 {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> CResult<Forward> {
        let mut taps = Taps::new();
        let mut h = self.stem.forward(x, ctx)?;
        taps.put("stem", &h);
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                h = block.forward(&h, ctx)?;
            }
            taps.put(format!("stage{}", i + 1), &h);
        }
        let h = self.head.forward(&h, ctx)?;
        let pool = global_pool(&h)?;
        let logits = self.classifier.forward(&pool, ctx)?;
        Ok(taps.finish(&h, &pool, logits))
    }

    fn stages(&self) -> usize {
        SETTINGS.len()
    }
}

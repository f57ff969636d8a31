//! Architecture registry. Every network exposes named activation taps:
//! `stem`, `stage1..stageK`, `last` (final feature map), `pool` (pooled
//! embedding) and `logits`.

mod convnext;
mod mobilenet;
mod resnet;
mod vit;

use std::collections::BTreeMap;

use candle_core::Tensor;
use kdbench_core::{Error, Result};

use crate::nn::{CResult, Ctx};
use crate::params::{Builder, ParamStore};
use crate::tensor::BackendExt;

pub struct Forward {
    pub logits: Tensor,
    pub taps: BTreeMap<String, Tensor>,
}

impl Forward {
    pub fn tap(&self, id: &str) -> Result<&Tensor> {
        if id == "logits" {
            return Ok(&self.logits);
        }
        self.taps.get(id).ok_or_else(|| Error::Tap(id.to_string()))
    }
}

pub(crate) struct Taps {
    map: BTreeMap<String, Tensor>,
}

impl Taps {
    fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    fn put(&mut self, id: impl Into<String>, t: &Tensor) {
        self.map.insert(id.into(), t.clone());
    }

    fn finish(mut self, last: &Tensor, pool: &Tensor, logits: Tensor) -> Forward {
        self.put("last", last);
        self.put("pool", pool);
        Forward {
            logits,
            taps: self.map,
        }
    }
}

pub(crate) trait Network: Send + Sync {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> CResult<Forward>;
    fn stages(&self) -> usize;
}

pub struct Model {
    pub arch: String,
    pub num_classes: usize,
    pub store: ParamStore,
    net: Box<dyn Network>,
}

impl Model {
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Forward> {
        self.net.forward(x, ctx).be()
    }

    /// Tap ids in network order, excluding `logits`.
    pub fn layer_ids(&self) -> Vec<String> {
        let mut ids = vec!["stem".to_string()];
        ids.extend((1..=self.net.stages()).map(|i| format!("stage{i}")));
        ids.push("pool".into());
        ids
    }
}

pub const ARCHITECTURES: &[&str] = &[
    "resnet8x4",
    "resnet20",
    "resnet32",
    "resnet32x4",
    "resnet56",
    "resnet110",
    "resnet18",
    "resnet34",
    "resnet50",
    "resnet101",
    "resnet152",
    "mobilenetv2",
    "vit_tiny",
    "vit_small",
    "vit_base",
    "vit_large",
    "deit_tiny",
    "deit_small",
    "beitv2_base",
    "beitv2_large",
    "convnext_tiny",
    "convnext_xlarge",
    "convnextv2_tiny",
];

/// Builds `arch` for `num_classes` outputs at input side `resolution`, with
/// parameters drawn deterministically from `seed`.
pub fn build_model(arch: &str, num_classes: usize, resolution: u32, drop_path: f64, seed: u64) -> Result<Model> {
    let mut b = Builder::new(seed);
    let res = resolution as usize;
    let net: Box<dyn Network> = match arch {
        "resnet8x4" => Box::new(resnet::CifarResNet::new(&mut b, 1, [64, 128, 256], 32, num_classes)),
        "resnet32x4" => Box::new(resnet::CifarResNet::new(&mut b, 5, [64, 128, 256], 32, num_classes)),
        "resnet20" | "resnet32" | "resnet56" | "resnet110" => {
            let depth: usize = arch[6..].parse().expect("registry names");
            Box::new(resnet::CifarResNet::new(&mut b, (depth - 2) / 6, [16, 32, 64], 16, num_classes))
        }
        "resnet18" => Box::new(resnet::ResNet::new(&mut b, false, [2, 2, 2, 2], num_classes, drop_path)),
        "resnet34" => Box::new(resnet::ResNet::new(&mut b, false, [3, 4, 6, 3], num_classes, drop_path)),
        "resnet50" => Box::new(resnet::ResNet::new(&mut b, true, [3, 4, 6, 3], num_classes, drop_path)),
        "resnet101" => Box::new(resnet::ResNet::new(&mut b, true, [3, 4, 23, 3], num_classes, drop_path)),
        "resnet152" => Box::new(resnet::ResNet::new(&mut b, true, [3, 8, 36, 3], num_classes, drop_path)),
        "mobilenetv2" => Box::new(mobilenet::MobileNetV2::new(&mut b, num_classes)),
        "vit_tiny" | "deit_tiny" => Box::new(vit::Vit::new(&mut b, vit::TINY, res, num_classes, drop_path)?),
        "vit_small" | "deit_small" => Box::new(vit::Vit::new(&mut b, vit::SMALL, res, num_classes, drop_path)?),
        "vit_base" | "beitv2_base" => Box::new(vit::Vit::new(&mut b, vit::BASE, res, num_classes, drop_path)?),
        "vit_large" | "beitv2_large" => Box::new(vit::Vit::new(&mut b, vit::LARGE, res, num_classes, drop_path)?),
        "convnext_tiny" => Box::new(convnext::ConvNeXt::new(&mut b, convnext::TINY, false, num_classes, drop_path)),
        "convnext_xlarge" => Box::new(convnext::ConvNeXt::new(&mut b, convnext::XLARGE, false, num_classes, drop_path)),
        "convnextv2_tiny" => Box::new(convnext::ConvNeXt::new(&mut b, convnext::TINY, true, num_classes, drop_path)),
        other => {
            return Err(Error::NotFound {
                kind: "architecture",
                name: other.to_string(),
                valid: ARCHITECTURES.join(", "),
            })
        }
    };
    Ok(Model {
        arch: arch.to_string(),
        num_classes,
        store: b.finish(),
        net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn run(arch: &str, res: usize) -> Forward {
        let m = build_model(arch, 7, res as u32, 0.1, 3).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, res, res), &Device::Cpu).unwrap();
        let out = m.forward(&x, &Ctx::train(false, 1)).unwrap();
        assert_eq!(out.logits.dims(), &[2, 7], "{arch}");
        for id in m.layer_ids() {
            assert!(out.tap(&id).is_ok(), "{arch} lacks {id}");
        }
        out
    }

    #[test]
    fn small_architectures_forward() {
        for arch in ["resnet8x4", "resnet20", "resnet18", "resnet50", "mobilenetv2", "vit_tiny", "convnextv2_tiny"] {
            run(arch, 32);
        }
    }

    #[test]
    fn cifar_resnet_parameter_counts() {
        let count = |a: &str| build_model(a, 100, 32, 0.0, 0).unwrap().store.param_count();
        // Classic figures: resnet20 ≈ 0.27M, resnet56 ≈ 0.86M, resnet8x4 ≈ 1.2M.
        assert!((270_000..285_000).contains(&count("resnet20")), "{}", count("resnet20"));
        assert!((855_000..870_000).contains(&count("resnet56")), "{}", count("resnet56"));
        assert!((1_200_000..1_260_000).contains(&count("resnet8x4")), "{}", count("resnet8x4"));
    }

    #[test]
    fn imagenet_parameter_counts() {
        let count = |a: &str| build_model(a, 1000, 224, 0.0, 0).unwrap().store.param_count();
        assert_eq!(count("resnet18"), 11_689_512);
        assert_eq!(count("resnet50"), 25_557_032);
        assert_eq!(count("mobilenetv2"), 3_504_872);
        assert_eq!(count("deit_small"), 22_050_664);
        assert_eq!(count("convnextv2_tiny"), 28_635_496);
    }

    #[test]
    fn unknown_architecture() {
        assert!(matches!(build_model("resnet9000", 10, 32, 0.0, 0), Err(Error::NotFound { .. })));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model("resnet20", 10, 32, 0.0, 5).unwrap().store.tensors();
        let b = build_model("resnet20", 10, 32, 0.0, 5).unwrap().store.tensors();
        for (k, t) in &a {
            let d = (t - &b[k]).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0, "{k}");
        }
    }
}

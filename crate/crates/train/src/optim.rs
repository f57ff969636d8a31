//! LAMB, AdamW and SGD with momentum. Parameters flagged `decay = false`
//! (biases, norm affine terms, embeddings) get no weight decay and, for
//! LAMB, no trust-ratio scaling.

use std::collections::HashMap;

use candle_core::Tensor;
use kdbench_core::config::{OptimizerKind, TrainingRecipe};
use kdbench_core::{Error, Result};

use crate::params::Param;
use crate::tensor::BackendExt;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub betas: [f64; 2],
    pub eps: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn from_recipe(r: &TrainingRecipe) -> Self {
        Self {
            kind: r.optimizer,
            betas: r.betas,
            eps: r.eps,
            momentum: r.momentum,
            nesterov: r.nesterov,
            weight_decay: r.weight_decay,
        }
    }
}

#[derive(Default, Clone)]
struct Slot {
    m: Option<Tensor>,
    v: Option<Tensor>,
}

pub struct Optimizer {
    pub config: OptimizerConfig,
    pub params: Vec<Param>,
    /// Completed updates; drives Adam-style bias correction.
    pub steps: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: Vec<Param>) -> Self {
        let slots = vec![Slot::default(); params.len()];
        Self {
            config,
            params,
            steps: 0,
            slots,
        }
    }

    /// One update with learning rate `lr`; `grads[i]` belongs to `params[i]`
    /// and `None` leaves that parameter untouched.
    pub fn step(&mut self, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let (b1, b2) = (c.betas[0], c.betas[1]);
        for ((param, slot), grad) in self.params.iter().zip(self.slots.iter_mut()).zip(grads) {
            let Some(g) = grad else { continue };
            let p = param.var.as_tensor().detach();
            let wd = if param.decay { c.weight_decay } else { 0.0 };
            let new = match c.kind {
                OptimizerKind::Sgd => {
                    let d = if wd > 0.0 { (g + (&p * wd).be()?).be()? } else { g.clone() };
                    let d = if c.momentum > 0.0 {
                        let buf = match &slot.m {
                            Some(m) => ((m * c.momentum).be()? + &d).be()?,
                            None => d.clone(),
                        };
                        slot.m = Some(buf.clone());
                        if c.nesterov {
                            (d + (buf * c.momentum).be()?).be()?
                        } else {
                            buf
                        }
                    } else {
                        d
                    };
                    (p - (d * lr).be()?).be()?
                }
                OptimizerKind::Adamw | OptimizerKind::Lamb => {
                    let flat = |t: &Tensor| -> Result<Vec<f32>> { t.flatten_all().be()?.to_vec1::<f32>().be() };
                    let mut pv = flat(&p)?;
                    let gv = flat(g)?;
                    let mut mv = match &slot.m {
                        Some(m) => flat(m)?,
                        None => vec![0.0; gv.len()],
                    };
                    let mut vv = match &slot.v {
                        Some(v) => flat(v)?,
                        None => vec![0.0; gv.len()],
                    };
                    let (b1f, b2f, eps) = (b1 as f32, b2 as f32, c.eps as f32);
                    let bc1 = (1.0 - b1.powi(t)) as f32;
                    let bc2 = ((1.0 - b2.powi(t)) as f32).sqrt();
                    // Adam direction, left in `gv` to avoid another buffer.
                    let mut adam = gv;
                    for ((a, m), v) in adam.iter_mut().zip(&mut mv).zip(&mut vv) {
                        *m = b1f * *m + (1.0 - b1f) * *a;
                        *v = b2f * *v + (1.0 - b2f) * *a * *a;
                        *a = (*m / bc1) / (v.sqrt() / bc2 + eps);
                    }
                    let (lrf, wdf) = (lr as f32, wd as f32);
                    if c.kind == OptimizerKind::Adamw {
                        for (w, a) in pv.iter_mut().zip(&adam) {
                            *w = *w * (1.0 - lrf * wdf) - lrf * a;
                        }
                    } else if wd > 0.0 {
                        let (mut wn, mut un) = (0f64, 0f64);
                        for (a, w) in adam.iter_mut().zip(&pv) {
                            *a += wdf * w;
                            wn += f64::from(*w).powi(2);
                            un += f64::from(*a).powi(2);
                        }
                        let trust = if wn > 0.0 && un > 0.0 { wn.sqrt() / un.sqrt() } else { 1.0 };
                        let step = (lr * trust) as f32;
                        for (w, a) in pv.iter_mut().zip(&adam) {
                            *w -= step * a;
                        }
                    } else {
                        for (w, a) in pv.iter_mut().zip(&adam) {
                            *w -= lrf * a;
                        }
                    }
                    let shape = p.shape().clone();
                    let dev = p.device().clone();
                    slot.m = Some(Tensor::from_vec(mv, shape.clone(), &dev).be()?);
                    slot.v = Some(Tensor::from_vec(vv, shape.clone(), &dev).be()?);
                    Tensor::from_vec(pv, shape, &dev).be()?
                }
            };
            param.var.set(&new).be()?;
        }
        Ok(())
    }

    /// Moment buffers keyed `opt.m.<param>` / `opt.v.<param>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (p, s) in self.params.iter().zip(&self.slots) {
            if let Some(m) = &s.m {
                out.push((format!("opt.m.{}", p.name), m.clone()));
            }
            if let Some(v) = &s.v {
                out.push((format!("opt.v.{}", p.name), v.clone()));
            }
        }
        out
    }

    pub fn load_state(&mut self, map: &HashMap<String, Tensor>, steps: u64) {
        self.steps = steps;
        for (p, s) in self.params.iter().zip(self.slots.iter_mut()) {
            s.m = map.get(&format!("opt.m.{}", p.name)).cloned();
            s.v = map.get(&format!("opt.v.{}", p.name)).cloned();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn param(values: &[f32], decay: bool) -> Param {
        Param {
            name: "w".into(),
            var: Var::new(values, &Device::Cpu).unwrap(),
            decay,
        }
    }

    fn cfg(kind: OptimizerKind, wd: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind,
            betas: [0.9, 0.999],
            eps: 1e-8,
            momentum: 0.9,
            nesterov: false,
            weight_decay: wd,
        }
    }

    fn values(o: &Optimizer) -> Vec<f32> {
        o.params[0].var.as_tensor().to_vec1().unwrap()
    }

    fn grad(v: &[f32]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::new(v, &Device::Cpu).unwrap())]
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let mut o = Optimizer::new(cfg(OptimizerKind::Sgd, 0.1), vec![param(&[1.0], true)]);
        o.step(&grad(&[0.5]), 0.1).unwrap();
        // d = 0.5 + 0.1·1 = 0.6; p = 1 − 0.06
        assert!((values(&o)[0] - 0.94).abs() < 1e-6);
        o.step(&grad(&[0.5]), 0.1).unwrap();
        // d = 0.5 + 0.094 = 0.594; buf = 0.54 + 0.594 = 1.134; p = 0.94 − 0.1134
        assert!((values(&o)[0] - 0.8266).abs() < 1e-6);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let mut o = Optimizer::new(cfg(OptimizerKind::Adamw, 0.0), vec![param(&[1.0, -2.0], true)]);
        o.step(&grad(&[0.3, -7.0]), 0.01).unwrap();
        let v = values(&o);
        assert!((v[0] - 0.99).abs() < 1e-6 && (v[1] + 1.99).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut o = Optimizer::new(cfg(OptimizerKind::Adamw, 0.5), vec![param(&[2.0], true)]);
        o.step(&grad(&[0.0]), 0.1).unwrap();
        assert!((values(&o)[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn lamb_trust_ratio_scales_by_weight_norm() {
        // First step: adam direction is sign(g); update = sign(g) + wd·p.
        let mut o = Optimizer::new(cfg(OptimizerKind::Lamb, 0.0), vec![param(&[3.0, 4.0], true)]);
        o.config.weight_decay = 1e-12;
        o.step(&grad(&[1.0, 1.0]), 0.1).unwrap();
        // ‖p‖ = 5, ‖u‖ ≈ √2 → step of 0.1·5/√2 per coordinate.
        let step = 0.1 * 5.0 / 2f64.sqrt();
        let v = values(&o);
        assert!((f64::from(v[0]) - (3.0 - step)).abs() < 1e-5, "{v:?}");
        assert!((f64::from(v[1]) - (4.0 - step)).abs() < 1e-5, "{v:?}");
    }

    #[test]
    fn no_decay_params_skip_decay_and_trust_ratio() {
        let mut o = Optimizer::new(cfg(OptimizerKind::Lamb, 0.5), vec![param(&[3.0, 4.0], false)]);
        o.step(&grad(&[1.0, -1.0]), 0.1).unwrap();
        let v = values(&o);
        assert!((v[0] - 2.9).abs() < 1e-5 && (v[1] - 4.1).abs() < 1e-5, "{v:?}");
    }

    #[test]
    fn missing_gradient_leaves_param() {
        let mut o = Optimizer::new(cfg(OptimizerKind::Sgd, 0.1), vec![param(&[1.0], true)]);
        o.step(&[None], 0.1).unwrap();
        assert_eq!(values(&o), vec![1.0]);
    }
}

//! Exponential moving average of parameters.

use candle_core::Tensor;
use kdbench_core::Result;

use crate::tensor::BackendExt;

/// `shadow ← decay·shadow + (1 − decay)·params`, elementwise.
pub fn ema_update(shadow: &mut [f32], params: &[f32], decay: f64) {
    let (d, e) = (decay as f32, (1.0 - decay) as f32);
    for (s, &p) in shadow.iter_mut().zip(params) {
        *s = d * *s + e * p;
    }
}

/// Shadow copies of a parameter list.
pub struct Ema {
    pub decay: f64,
    pub shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(params: &[Tensor], decay: f64) -> Result<Self> {
        let shadow = params.iter().map(|p| p.copy().be()).collect::<Result<_>>()?;
        Ok(Self { decay, shadow })
    }

    pub fn update(&mut self, params: &[Tensor]) -> Result<()> {
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = ((&*s * self.decay).be()? + (p.detach() * (1.0 - self.decay)).be()?).be()?;
        }
        Ok(())
    }
}

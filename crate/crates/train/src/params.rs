//! Named parameters, non-trainable buffers and deterministic initialization.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{Device, Tensor, Var};
use kdbench_core::data::stream_seed;
use kdbench_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::BackendExt;

#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    /// Subject to weight decay; false for biases, norm affine terms and
    /// position/class embeddings.
    pub decay: bool,
}

/// Mutable non-trainable state such as batch-norm running statistics.
#[derive(Clone)]
pub struct Buffer(Arc<Mutex<Tensor>>);

impl Buffer {
    pub fn new(t: Tensor) -> Self {
        Self(Arc::new(Mutex::new(t)))
    }

    pub fn get(&self) -> Tensor {
        self.0.lock().expect("buffer lock").clone()
    }

    pub fn set(&self, t: Tensor) {
        *self.0.lock().expect("buffer lock") = t;
    }
}

#[derive(Clone, Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
    pub buffers: Vec<(String, Buffer)>,
}

impl ParamStore {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Snapshot of every parameter and buffer, keyed by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.var.as_tensor().copy().expect("cpu copy"));
        }
        for (n, b) in &self.buffers {
            out.insert(n.clone(), b.get());
        }
        out
    }

    /// Overwrites parameters and buffers from `map`; every entry of the store
    /// must be present with a matching shape.
    pub fn load(&self, map: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        let fetch = |name: &str, like: &Tensor| -> Result<Tensor> {
            let key = format!("{prefix}{name}");
            let t = map
                .get(&key)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor `{key}`")))?;
            if t.dims() != like.dims() {
                return Err(Error::Shape(format!(
                    "tensor `{key}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    like.dims()
                )));
            }
            t.to_dtype(like.dtype()).be()
        };
        for p in &self.params {
            let t = fetch(&p.name, p.var.as_tensor())?;
            p.var.set(&t).be()?;
        }
        for (n, b) in &self.buffers {
            b.set(fetch(n, &b.get())?);
        }
        Ok(())
    }

    pub fn load_file(&self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &Device::Cpu)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        self.load(&map, "")
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self.tensors().into_iter().collect();
        candle_core::safetensors::save(&map, path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Registers parameters under a dotted prefix, drawing initial values from a
/// generator keyed by the model seed.
pub struct Builder {
    pub store: ParamStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
    dev: Device,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 0x1417])),
            prefix: Vec::new(),
            dev: Device::Cpu,
        }
    }

    pub fn push(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    fn full(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn tensor(&self, data: Vec<f32>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(data, shape, &self.dev).expect("shape matches data")
    }

    fn register(&mut self, name: &str, data: Vec<f32>, shape: &[usize], decay: bool) -> Var {
        let var = Var::from_tensor(&self.tensor(data, shape)).expect("var");
        self.store.params.push(Param {
            name: self.full(name),
            var: var.clone(),
            decay,
        });
        var
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, decay: bool) -> Var {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std > 0");
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        self.register(name, data, shape, decay)
    }

    /// Normal truncated to ±2 standard deviations by resampling.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64, decay: bool) -> Var {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let z: f64 = self.rng.sample(rand_distr::StandardNormal);
            if z.abs() <= 2.0 {
                data.push((z * std) as f32);
            }
        }
        self.register(name, data, shape, decay)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, decay: bool) -> Var {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound) as f32)
            .collect();
        self.register(name, data, shape, decay)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32, decay: bool) -> Var {
        let n: usize = shape.iter().product();
        self.register(name, vec![value; n], shape, decay)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f32) -> Buffer {
        let n: usize = shape.iter().product();
        let b = Buffer::new(self.tensor(vec![value; n], shape));
        self.store.buffers.push((self.full(name), b.clone()));
        b
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics and other state not touched by the optimizer.
    Buffer,
}

#[derive(Clone)]
struct Entry {
    name: String,
    var: Var,
    kind: ParamKind,
}

/// Named variables of one model, in registration order.
#[derive(Clone)]
pub struct ParamStore {
    entries: Arc<Mutex<Vec<Entry>>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            entries: Arc::new(Mutex::new(Vec::new())),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn builder(&self, seed: u64) -> ParamBuilder {
        ParamBuilder {
            store: self.clone(),
            prefix: String::new(),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    fn register(&self, name: String, var: Var, kind: ParamKind) -> Result<()> {
        let mut entries = self.entries.lock().expect("param store poisoned");
        if entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        entries.push(Entry { name, var, kind });
        Ok(())
    }

    fn filtered(&self, kind: Option<ParamKind>) -> Vec<(String, Var)> {
        self.entries
            .lock()
            .expect("param store poisoned")
            .iter()
            .filter(|e| kind.is_none_or(|k| e.kind == k))
            .map(|e| (e.name.clone(), e.var.clone()))
            .collect()
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.filtered(Some(ParamKind::Trainable))
    }

    pub fn buffers(&self) -> Vec<(String, Var)> {
        self.filtered(Some(ParamKind::Buffer))
    }

    pub fn all(&self) -> Vec<(String, Var)> {
        self.filtered(None)
    }

    /// Trainable parameters whose name starts with `prefix`.
    pub fn trainable_under(&self, prefix: &str) -> Vec<(String, Var)> {
        self.trainable()
            .into_iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn num_trainable_under(&self, prefix: &str) -> usize {
        self.trainable_under(prefix).iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Detached copies of every variable.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.all()
            .into_iter()
            .map(|(n, v)| Ok((n, v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites every variable from `tensors`; names and shapes must match.
    pub fn restore(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.all() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Format {
                    node: name.clone(),
                    reason: "missing from checkpoint".into(),
                })?;
            if t.dims() != var.dims() {
                return Err(Error::Format {
                    node: name,
                    reason: format!("shape {:?}, expected {:?}", t.dims(), var.dims()),
                });
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        candle_core::safetensors::save(&self.snapshot()?, path.as_ref())?;
        Ok(())
    }

    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let tensors = candle_core::safetensors::load(path.as_ref(), &self.device)?;
        self.restore(&tensors)
    }
}

/// Registers parameters under a path prefix with seeded initialization.
#[derive(Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
    rng: Arc<Mutex<ChaCha8Rng>>,
}

impl ParamBuilder {
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}/{}", self.prefix, name.as_ref())
        };
        Self {
            prefix,
            ..self.clone()
        }
    }

    pub fn path(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.prefix, name)
        }
    }

    fn add(&self, name: &str, t: Tensor, kind: ParamKind) -> Result<Var> {
        let var = Var::from_tensor(&t.to_dtype(self.store.dtype)?)?;
        self.store.register(self.full(name), var.clone(), kind)?;
        Ok(var)
    }

    /// Uniform in `[-bound, bound)`.
    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = {
            let mut rng = self.rng.lock().expect("init rng poisoned");
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        self.add(name, Tensor::from_vec(values, shape, &self.store.device)?, ParamKind::Trainable)
    }

    pub fn zeros(&self, name: &str, shape: &[usize]) -> Result<Var> {
        self.add(name, Tensor::zeros(shape, DType::F64, &self.store.device)?, ParamKind::Trainable)
    }

    pub fn ones(&self, name: &str, shape: &[usize]) -> Result<Var> {
        self.add(name, Tensor::ones(shape, DType::F64, &self.store.device)?, ParamKind::Trainable)
    }

    pub fn buffer(&self, name: &str, init: Tensor) -> Result<Var> {
        self.add(name, init, ParamKind::Buffer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible_and_names_are_unique() {
        let a = ParamStore::new(DType::F32);
        let b = ParamStore::new(DType::F32);
        let va = a.builder(3).pp("x").uniform("w", &[4, 4], 0.5).unwrap();
        let vb = b.builder(3).pp("x").uniform("w", &[4, 4], 0.5).unwrap();
        assert_eq!(
            va.as_tensor().to_vec2::<f32>().unwrap(),
            vb.as_tensor().to_vec2::<f32>().unwrap()
        );
        assert!(a.builder(0).pp("x").zeros("w", &[1]).is_err());
        assert_eq!(a.trainable()[0].0, "x/w");
    }

    #[test]
    fn save_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = ParamStore::new(DType::F32);
        let pb = s.builder(1);
        pb.uniform("w", &[3, 2], 1.0).unwrap();
        pb.buffer("rm", Tensor::ones(4, DType::F32, &Device::Cpu).unwrap()).unwrap();
        let path = dir.path().join("p.safetensors");
        s.save(&path).unwrap();
        let snap = s.snapshot().unwrap();
        s.all()[0].1.set(&Tensor::zeros((3, 2), DType::F32, &Device::Cpu).unwrap()).unwrap();
        s.load(&path).unwrap();
        let w = s.all()[0].1.as_tensor().to_vec2::<f32>().unwrap();
        assert_eq!(w, snap["w"].to_vec2::<f32>().unwrap());
        assert_eq!(s.buffers().len(), 1);
    }
}

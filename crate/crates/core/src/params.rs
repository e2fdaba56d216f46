//! Seeded parameter storage.
//!
//! Candle's CPU generator cannot be seeded, so parameters are created here
//! from a ChaCha stream. Creation order is the order in which the model's
//! constructor requests names, which is deterministic, so the same seed
//! always yields the same initial weights.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::VarBuilder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug)]
enum Slot {
    Trainable(Var),
    Frozen(Tensor),
}

impl Slot {
    fn tensor(&self) -> Tensor {
        match self {
            Slot::Trainable(v) => v.as_tensor().clone(),
            Slot::Frozen(t) => t.clone(),
        }
    }
}

#[derive(Debug)]
struct Inner {
    entries: Mutex<Vec<(String, Slot)>>,
    rng: Mutex<ChaCha8Rng>,
    frozen: bool,
}

/// Named parameters, either trainable (`Var`) or frozen (plain tensors).
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Inner>,
}

impl ParamStore {
    /// Empty trainable store; missing parameters are drawn from `seed`.
    pub fn seeded(seed: u64) -> Self {
        Self {
            inner: Arc::new(Inner {
                entries: Mutex::new(Vec::new()),
                rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
                frozen: false,
            }),
        }
    }

    /// Store pre-populated from `tensors`. Frozen stores hand out detached
    /// tensors that never receive gradients.
    pub fn from_tensors(tensors: HashMap<String, Tensor>, frozen: bool) -> Result<Self> {
        let mut sorted: Vec<_> = tensors.into_iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let entries = sorted
            .into_iter()
            .map(|(name, t)| {
                let slot = if frozen {
                    Slot::Frozen(t.detach())
                } else {
                    Slot::Trainable(Var::from_tensor(&t)?)
                };
                Ok((name, slot))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inner: Arc::new(Inner {
                entries: Mutex::new(entries),
                rng: Mutex::new(ChaCha8Rng::seed_from_u64(0)),
                frozen,
            }),
        })
    }

    pub fn load(path: impl AsRef<Path>, frozen: bool, device: &Device) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, device)?;
        Self::from_tensors(tensors, frozen)
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    pub fn is_frozen(&self) -> bool {
        self.inner.frozen
    }

    /// Trainable variables in creation order.
    pub fn vars(&self) -> Vec<Var> {
        self.inner
            .entries
            .lock()
            .expect("param store poisoned")
            .iter()
            .filter_map(|(_, s)| match s {
                Slot::Trainable(v) => Some(v.clone()),
                Slot::Frozen(_) => None,
            })
            .collect()
    }

    /// The trainable variable called `name`, if any.
    pub fn var(&self, name: &str) -> Option<Var> {
        self.inner
            .entries
            .lock()
            .expect("param store poisoned")
            .iter()
            .find_map(|(n, s)| match s {
                Slot::Trainable(v) if n == name => Some(v.clone()),
                _ => None,
            })
    }

    /// `(name, tensor)` pairs in creation order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.inner
            .entries
            .lock()
            .expect("param store poisoned")
            .iter()
            .map(|(n, s)| (n.clone(), s.tensor()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.elem_count()).sum()
    }

    /// Names of all parameters starting with `prefix`.
    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.named()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with(prefix))
            .collect()
    }

    /// Deep copy of the current values, detached.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.named()
            .into_iter()
            .map(|(n, t)| Ok((n, t.detach().copy()?)))
            .collect()
    }

    /// Overwrites trainable values from a snapshot.
    pub fn restore(&self, snapshot: &HashMap<String, Tensor>) -> Result<()> {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        for (name, slot) in entries.iter() {
            if let (Slot::Trainable(v), Some(t)) = (slot, snapshot.get(name)) {
                v.set(t)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map: HashMap<String, Tensor> = self.named().into_iter().collect();
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        candle_core::safetensors::save(&map, &tmp)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// SHA-256 over names, shapes, dtypes and raw little-endian values.
    pub fn hash(&self) -> Result<String> {
        let sorted: BTreeMap<String, Tensor> = self.named().into_iter().collect();
        let mut h = Sha256::new();
        for (name, t) in sorted {
            h.update(name.as_bytes());
            h.update(format!("{:?}{:?}", t.dims(), t.dtype()).as_bytes());
            let flat = t.flatten_all()?;
            match t.dtype() {
                DType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        h.update(v.to_le_bytes());
                    }
                }
                _ => {
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    fn draw(&self, shape: &Shape, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = self.inner.rng.lock().expect("param rng poisoned");
        let uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(lo..hi)).collect()
        };
        let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f64> {
            let d = Normal::new(mean, std).expect("finite std");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, up } => uniform(&mut rng, lo, up),
            Init::Randn { mean, stdev } => normal(&mut rng, mean, stdev),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        uniform(&mut rng, -bound, bound)
                    }
                    NormalOrUniform::Normal => normal(&mut rng, 0.0, std),
                }
            }
        }
    }
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        {
            let entries = self.inner.entries.lock().expect("param store poisoned");
            if let Some((_, slot)) = entries.iter().find(|(n, _)| n == name) {
                let t = slot.tensor();
                if t.shape() != &s {
                    candle_core::bail!(
                        "parameter `{name}` has shape {:?}, requested {:?}",
                        t.dims(),
                        s.dims()
                    );
                }
                return t.to_dtype(dtype);
            }
        }
        if self.inner.frozen {
            candle_core::bail!("frozen parameter store has no `{name}`");
        }
        let values = self.draw(&s, h);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.inner
            .entries
            .lock()
            .expect("param store poisoned")
            .push((name.to_string(), Slot::Trainable(var)));
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        match entries.iter().find(|(n, _)| n == name) {
            Some((_, slot)) => slot.tensor().to_dtype(dtype),
            None => candle_core::bail!("no parameter `{name}`"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.inner
            .entries
            .lock()
            .expect("param store poisoned")
            .iter()
            .any(|(n, _)| n == name)
    }
}

/// Global L2 norm of the gradients of `vars`.
pub fn grad_norm(grads: &candle_core::backprop::GradStore, vars: &[Var]) -> Result<f64> {
    let mut total = 0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g
                .sqr()?
                .sum_all()?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

pub(crate) fn dtype_from_str(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::param("dtype", format!("`{other}` is not one of f32, f64"))),
    }
}

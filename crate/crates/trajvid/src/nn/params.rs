//! Named parameters with seeded initialization and safetensors checkpoints.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use trajvid_core::scene::mix64;

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "trajvid-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";

/// Parameter ownership, used for freezing and optimizer selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Denoising backbone without its adapters.
    Core,
    Adapter,
    Dsi,
    Dfm,
    Completion,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-b, b]` with `b = gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Constant(f64),
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub group: Group,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the store seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(seed ^ mix64(h))
}

#[derive(Debug)]
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Param>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub group: Option<Group>,
}

/// JSON document stored under the `manifest` metadata key of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
    /// Caller data: model config, ablation flags, training progress.
    pub extra: serde_json::Value,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            seed,
            dtype,
            device: Device::Cpu,
            params: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates parameter `name`. Initial values depend only on the store seed
    /// and the name, so adding a module never reshuffles another's weights.
    pub fn create(&mut self, name: &str, shape: &[usize], group: Group, init: Init) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::ModelShapeMismatch(format!("parameter {name} declared twice")));
        }
        let count: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; count],
            Init::Ones => vec![1.0; count],
            Init::Constant(c) => vec![c; count],
            Init::FanIn { fan_in, gain } => {
                let bound = gain / (fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
                (0..count).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.params.insert(name.to_string(), Param { var, group });
        Ok(tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn in_groups(&self, groups: &[Group]) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(n, p)| (n.clone(), p.var.clone()))
            .collect()
    }

    pub fn count(&self, groups: &[Group]) -> usize {
        self.params
            .values()
            .filter(|p| groups.contains(&p.group))
            .map(|p| p.var.as_tensor().elem_count())
            .sum()
    }

    /// Copies of every parameter value in `groups`, as f64.
    pub fn snapshot(&self, groups: &[Group]) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for (n, p) in &self.params {
            if groups.contains(&p.group) {
                let v = p.var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                out.insert(n.clone(), v);
            }
        }
        Ok(out)
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::ModelShapeMismatch(format!("unknown parameter {name}")))?;
        if p.var.dims() != value.dims() {
            return Err(Error::ModelShapeMismatch(format!(
                "{name}: expected shape {:?}, got {:?}",
                p.var.dims(),
                value.dims()
            )));
        }
        p.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Serializes the parameters plus `extra_tensors` (optimizer moments and
    /// the like, stored without a group) into one safetensors archive.
    pub fn to_bytes(&self, extra_tensors: &[(String, Tensor)], extra: serde_json::Value) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(self.params.len() + extra_tensors.len());
        let mut entries = Vec::new();
        for (n, p) in &self.params {
            let t = p.var.as_tensor().to_dtype(DType::F32)?;
            entries.push(TensorEntry {
                name: n.clone(),
                shape: t.dims().to_vec(),
                dtype: "F32".into(),
                group: Some(p.group),
            });
            tensors.push((n.clone(), t));
        }
        for (n, t) in extra_tensors {
            if self.params.contains_key(n) {
                return Err(Error::Checkpoint(format!("extra tensor {n} shadows a parameter")));
            }
            let t = t.to_dtype(DType::F32)?;
            entries.push(TensorEntry {
                name: n.clone(),
                shape: t.dims().to_vec(),
                dtype: "F32".into(),
                group: None,
            });
            tensors.push((n.clone(), t));
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            tensors: entries,
            extra,
        };
        let meta = HashMap::from([(
            MANIFEST_KEY.to_string(),
            serde_json::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?,
        )]);
        safetensors::serialize(tensors, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Loads every declared parameter from `bytes`. Returns the manifest and
    /// any stored tensors that are not parameters.
    pub fn load_bytes(&self, bytes: &[u8]) -> Result<(Manifest, HashMap<String, Tensor>)> {
        let manifest = read_manifest(bytes)?;
        let mut tensors = candle_core::safetensors::load_buffer(bytes, &self.device)?;
        for (name, p) in &self.params {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::ModelShapeMismatch(format!("checkpoint lacks parameter {name}")))?;
            if t.dims() != p.var.dims() {
                return Err(Error::ModelShapeMismatch(format!(
                    "{name}: model expects {:?}, checkpoint holds {:?}",
                    p.var.dims(),
                    t.dims()
                )));
            }
            p.var.set(&t.to_dtype(self.dtype)?)?;
        }
        let leftovers: Vec<&String> = manifest
            .tensors
            .iter()
            .filter(|e| e.group.is_some() && !self.params.contains_key(&e.name))
            .map(|e| &e.name)
            .collect();
        if let Some(n) = leftovers.first() {
            return Err(Error::ModelShapeMismatch(format!("checkpoint parameter {n} is not part of this model")));
        }
        Ok((manifest, tensors))
    }
}

pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| Error::Checkpoint("archive has no manifest".into()))?;
    let manifest: Manifest = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {}", manifest.format)));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", manifest.version)));
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_only() {
        let mut a = ParamStore::new(3, DType::F32);
        let mut b = ParamStore::new(3, DType::F32);
        let init = Init::FanIn { fan_in: 9, gain: 1.0 };
        a.create("x.w", &[4, 9], Group::Core, init).unwrap();
        b.create("other", &[2], Group::Core, init).unwrap();
        b.create("x.w", &[4, 9], Group::Core, init).unwrap();
        assert_eq!(a.snapshot(&[Group::Core]).unwrap()["x.w"], b.snapshot(&[Group::Core]).unwrap()["x.w"]);
        let v = &a.snapshot(&[Group::Core]).unwrap()["x.w"];
        assert!(v.iter().all(|x| x.abs() <= 1.0 / 3.0 + 1e-7));
    }

    #[test]
    fn round_trip_and_shape_check() {
        let mut a = ParamStore::new(1, DType::F32);
        a.create("w", &[2, 3], Group::Dsi, Init::FanIn { fan_in: 3, gain: 1.0 }).unwrap();
        a.create("b", &[2], Group::Adapter, Init::Zeros).unwrap();
        let extra = vec![("opt.m.w".to_string(), Tensor::ones((2, 3), DType::F32, &Device::Cpu).unwrap())];
        let bytes = a.to_bytes(&extra, serde_json::json!({"flag": true})).unwrap();

        let mut b = ParamStore::new(99, DType::F32);
        b.create("w", &[2, 3], Group::Dsi, Init::Zeros).unwrap();
        b.create("b", &[2], Group::Adapter, Init::Ones).unwrap();
        let (m, rest) = b.load_bytes(&bytes).unwrap();
        assert_eq!(m.extra["flag"], true);
        assert!(rest.contains_key("opt.m.w"));
        assert_eq!(a.snapshot(&[Group::Dsi, Group::Adapter]).unwrap(), b.snapshot(&[Group::Dsi, Group::Adapter]).unwrap());

        let mut c = ParamStore::new(1, DType::F32);
        c.create("w", &[3, 2], Group::Dsi, Init::Zeros).unwrap();
        c.create("b", &[2], Group::Adapter, Init::Zeros).unwrap();
        assert!(matches!(c.load_bytes(&bytes), Err(Error::ModelShapeMismatch(_))));
    }
}

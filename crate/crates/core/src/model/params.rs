use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GlmcError, Result};

/// Which network component a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Projection,
    Predictor,
    Classifier,
    RebalancedClassifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Encoder,
        ParamGroup::Projection,
        ParamGroup::Predictor,
        ParamGroup::Classifier,
        ParamGroup::RebalancedClassifier,
    ];
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub group: ParamGroup,
    /// Running statistics are stored as parameters but never receive gradient updates.
    pub trainable: bool,
}

/// Named parameters with seeded initialisation.
#[derive(Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            dtype,
            device,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize], group: ParamGroup, trainable: bool) -> Result<Var> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(GlmcError::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.push(Param {
            name: name.to_string(),
            var: var.clone(),
            group,
            trainable,
        });
        Ok(var)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, group: ParamGroup) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        self.insert(name, values, shape, group, true)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, group: ParamGroup) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.insert(name, values, shape, group, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, group: ParamGroup, trainable: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape, group, trainable)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Trainable parameters of the given groups, in registration order.
    pub fn trainable(&self, groups: &[ParamGroup]) -> Vec<Param> {
        self.params
            .iter()
            .filter(|p| p.trainable && groups.contains(&p.group))
            .cloned()
            .collect()
    }

    /// SHA-256 over names and raw values of the selected groups (running statistics included).
    pub fn hash(&self, groups: &[ParamGroup]) -> Result<String> {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            hasher.update(p.name.as_bytes());
            hasher.update(tensor_bytes(p.var.as_tensor())?);
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

/// Little-endian bytes of a tensor in its own dtype (f32 or f64).
pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        _ => flat
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
    })
}

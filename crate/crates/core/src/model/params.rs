use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::network::Architecture;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Zero-mean normal with `std = sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Named trainable tensors in a stable order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: IndexMap<String, Tensor<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub parameters: usize,
    /// Size of the raw little-endian f32 payload.
    pub bytes: usize,
}

impl ModelParams {
    pub fn from_map(tensors: IndexMap<String, Tensor<f32>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn as_map(&self) -> &IndexMap<String, Tensor<f32>> {
        &self.tensors
    }

    pub fn into_map(self) -> IndexMap<String, Tensor<f32>> {
        self.tensors
    }

    /// Fails unless names, order and shapes match what `config` declares.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let expected = expected_layout(config)?;
        let same = expected.len() == self.tensors.len()
            && expected
                .iter()
                .zip(&self.tensors)
                .all(|((n, s), (m, t))| n == m && s.as_slice() == t.shape());
        if same {
            return Ok(());
        }
        let have: Vec<&str> = self.names().collect();
        let missing: Vec<&str> = expected
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(|n| !have.contains(n))
            .take(3)
            .collect();
        let extra: Vec<&str> = have
            .iter()
            .copied()
            .filter(|n| !expected.iter().any(|(e, _)| e == n))
            .take(3)
            .collect();
        Err(Error::NameSetMismatch(format!(
            "{} parameters present, {} expected; missing {missing:?}, unexpected {extra:?}",
            have.len(),
            expected.len()
        )))
    }
}

/// `(name, shape)` for every parameter the configuration declares, in order.
pub fn expected_layout(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    Ok(Architecture::new(config)?
        .declarations()
        .into_iter()
        .map(|d| (d.name, d.shape))
        .collect())
}

/// Deterministically initialised parameters for `config`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let arch = Architecture::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = IndexMap::new();
    for decl in arch.declarations() {
        let n: usize = decl.shape.iter().product();
        let data = match decl.init {
            Init::HeNormal { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            }
            Init::Ones => vec![1.0; n],
            Init::Zeros => vec![0.0; n],
        };
        let prev = tensors.insert(decl.name.clone(), Tensor::new(decl.shape, data)?);
        debug_assert!(prev.is_none(), "duplicate parameter {}", decl.name);
    }
    Ok(ModelParams { tensors })
}

pub fn count_params(params: &ModelParams) -> ParamCount {
    let parameters = params.tensors.values().map(Tensor::numel).sum();
    ParamCount {
        parameters,
        bytes: parameters * std::mem::size_of::<f32>(),
    }
}

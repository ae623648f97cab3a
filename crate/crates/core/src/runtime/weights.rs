// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PlanError, Result};
use crate::runtime::container::{Container, Tensor};
use crate::runtime::spec::ModelSpec;

/// Immutable, shape-checked set of named tensors for one [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    /// Checks that exactly the canonical tensors are present with the
    /// expected shapes.
    pub fn new(spec: &ModelSpec, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.tensor_layout();
        for (name, shape) in &layout {
            let t = tensors.get(name).ok_or_else(|| PlanError::Tensor {
                name: name.clone(),
                msg: "missing".into(),
            })?;
            if &t.shape != shape {
                return Err(PlanError::Tensor {
                    name: name.clone(),
                    msg: format!("expected shape {shape:?}, found {:?}", t.shape),
                });
            }
        }
        if tensors.len() != layout.len() {
            let known: std::collections::BTreeSet<_> = layout.iter().map(|(n, _)| n).collect();
            let extra = tensors.keys().find(|n| !known.contains(n)).cloned();
            return Err(PlanError::Tensor {
                name: extra.unwrap_or_default(),
                msg: "not part of the canonical layout".into(),
            });
        }
        Ok(Self { tensors })
    }

    /// All-zero weights with the canonical layout.
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        let tensors = spec
            .tensor_layout()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .collect();
        Self::new(spec, tensors)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        // Presence is checked in `new`, and the store never changes afterwards.
        &self.tensors[name]
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    /// Serializes into a container, tensors in canonical layout order.
    pub fn to_container(&self, spec: &ModelSpec) -> Container {
        let tensors = spec
            .tensor_layout()
            .into_iter()
            .map(|(n, _)| {
                let t = self.tensors[&n].clone();
                (n, t)
            })
            .collect();
        Container {
            spec: Some(spec.clone()),
            metadata: Default::default(),
            tensors,
        }
    }

    pub fn from_container(container: Container) -> Result<(ModelSpec, Self)> {
        let spec = container
            .spec
            .ok_or_else(|| PlanError::Container("container has no model spec".into()))?;
        let mut map = BTreeMap::new();
        for (name, t) in container.tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(PlanError::Tensor {
                    name,
                    msg: "appears more than once".into(),
                });
            }
        }
        let store = Self::new(&spec, map)?;
        Ok((spec, store))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(ModelSpec, Self)> {
        Self::from_container(Container::read(path)?)
    }

    /// Seeded uniform weights in `[-scale, scale]`; norm gains are
    /// `1 + noise`. Useful for exercising the runtime.
    pub fn random(spec: &ModelSpec, seed: u64, scale: f32) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = spec
            .tensor_layout()
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                let gain = name.contains("norm") && name.ends_with(".weight");
                let data = (0..n)
                    .map(|_| {
                        let r = rng.gen_range(-scale..=scale);
                        if gain {
                            1.0 + r
                        } else {
                            r
                        }
                    })
                    .collect();
                Tensor::new(shape, data).map(|t| (name, t))
            })
            .collect::<Result<_>>()?;
        Self::new(spec, tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::spec::{Activation, NormScheme, PositionalScheme};

    fn spec() -> ModelSpec {
        ModelSpec {
            layer_count: 1,
            head_count: 2,
            model_dim: 4,
            head_dim: 2,
            mlp_dim: 8,
            vocab_size: 10,
            max_context: 8,
            positional_scheme: PositionalScheme::Rotary,
            norm_scheme: NormScheme::PreLayernorm,
            activation: Activation::Silu,
            tied_embeddings: true,
        }
    }

    #[test]
    fn missing_and_misshapen_tensors_rejected() {
        let s = spec();
        let mut t = WeightStore::zeros(&s).unwrap().into_tensors();
        t.insert("layers.0.attn.q.weight".into(), Tensor::zeros(vec![4, 3]));
        let err = WeightStore::new(&s, t.clone()).unwrap_err();
        assert!(err.to_string().contains("expected shape"));
        t.remove("layers.0.attn.q.weight");
        assert!(WeightStore::new(&s, t).unwrap_err().to_string().contains("missing"));
    }

    #[test]
    fn extra_tensor_rejected() {
        let s = spec();
        let mut t = WeightStore::zeros(&s).unwrap().into_tensors();
        t.insert("lm_head.bias".into(), Tensor::zeros(vec![10]));
        assert!(WeightStore::new(&s, t).is_err());
    }

    #[test]
    fn container_round_trip() {
        let s = spec();
        let w = WeightStore::zeros(&s).unwrap();
        let bytes = w.to_container(&s).to_bytes().unwrap();
        let (s2, w2) = WeightStore::from_container(Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(s, s2);
        assert_eq!(w, w2);
    }
}

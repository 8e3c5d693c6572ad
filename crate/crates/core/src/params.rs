//! Shape-only parameter tables.
//!
//! Layers register their tensors here at build time; values are only
//! materialised when a [`crate::Model`] is instantiated, so very large
//! configurations can be counted without allocating.

use diffcore::{Rng, Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Index into a [`ParamTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    Adapter,
    Neck,
    Decoder,
}

impl Component {
    pub fn in_encoder_scope(self) -> bool {
        matches!(self, Component::Encoder | Component::Adapter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    TruncNormal(f64),
    Normal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub component: Component,
    pub init: Init,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Initial value. Each tensor draws from its own stream keyed by name so
    /// that adding or removing other tensors never changes it.
    pub fn materialise<T: Scalar>(&self, seed: u64) -> Tensor<T> {
        let mut t = Tensor::zeros(self.shape.clone());
        let mut rng = Rng::stream(seed, fnv1a(self.name.as_bytes()));
        let out = t.data_mut();
        match self.init {
            Init::Zeros => {}
            Init::Const(c) => out.iter_mut().for_each(|v| *v = T::from_f64(c)),
            Init::TruncNormal(s) => rng.fill_trunc_normal(out, s),
            Init::Normal(s) => rng.fill_normal(out, s),
            Init::Uniform(b) => rng.fill_uniform(out, -b, b),
        }
        t
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamTable {
    pub specs: Vec<ParamSpec>,
}

impl ParamTable {
    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        component: Component,
        init: Init,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.specs.iter().all(|s| s.name != name),
            "duplicate parameter {name}"
        );
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            component,
            init,
            trainable: true,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn init_depends_only_on_name_and_seed() {
        let spec = |name: &str| ParamSpec {
            name: name.into(),
            shape: vec![4, 3],
            component: Component::Encoder,
            init: Init::TruncNormal(0.02),
            trainable: true,
        };
        let a: Tensor<f64> = spec("x.weight").materialise(7);
        let b: Tensor<f64> = spec("x.weight").materialise(7);
        let c: Tensor<f64> = spec("y.weight").materialise(7);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| v.abs() <= 0.04));
    }
}

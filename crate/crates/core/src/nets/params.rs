use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    /// False for batchnorm running statistics.
    pub trainable: bool,
}

/// Named parameters and buffers of a network, kept in sorted name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        self.entries
            .insert(name.into(), Param { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        assert_eq!(slot.tensor.shape(), tensor.shape(), "shape of {name}");
        slot.tensor = tensor;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Trainable tensors, mutably, in name order.
    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries
            .iter_mut()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k.as_str(), &mut p.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Record every trainable parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> Bound<'t, T> {
        let vars = self
            .entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k.clone(), tape.leaf(p.tensor.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Trainable parameters recorded as tape leaves for one forward pass.
pub struct Bound<'t, T: Scalar> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// U(−b, b) with b = sqrt(6 / fan_in).
    HeUniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

/// Collects parameter declarations, then initializes them in sorted name
/// order from one seeded stream so the result does not depend on
/// declaration order.
#[derive(Default)]
pub(crate) struct Layout {
    specs: BTreeMap<String, (Vec<usize>, Init, bool)>,
}

impl Layout {
    pub fn declare(&mut self, name: String, shape: Vec<usize>, init: Init, trainable: bool) {
        let prev = self.specs.insert(name.clone(), (shape, init, trainable));
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        self.declare(
            format!("{name}.weight"),
            vec![cout, cin, k, k],
            Init::HeUniform {
                fan_in: cin * k * k,
            },
            true,
        );
        if bias {
            self.declare(format!("{name}.bias"), vec![cout], Init::Zeros, true);
        }
    }

    /// Transposed conv weight is (cin, cout, k, k); fan-in follows the
    /// output side, as for the equivalent forward conv.
    pub fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.declare(
            format!("{name}.weight"),
            vec![cin, cout, k, k],
            Init::HeUniform {
                fan_in: cout * k * k,
            },
            true,
        );
        self.declare(format!("{name}.bias"), vec![cout], Init::Zeros, true);
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) {
        self.declare(format!("{name}.gamma"), vec![c], Init::Ones, true);
        self.declare(format!("{name}.beta"), vec![c], Init::Zeros, true);
        self.declare(format!("{name}.running_mean"), vec![c], Init::Zeros, false);
        self.declare(format!("{name}.running_var"), vec![c], Init::Ones, false);
    }

    pub fn build<T: Scalar>(self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, (shape, init, trainable)) in self.specs {
            let t = match init {
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
                }
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::ones(shape),
            };
            store.insert(name, t, trainable);
        }
        store
    }
}

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named parameter tensors of one network.
///
/// A frozen store never binds differentiable leaves and refuses updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    frozen: bool,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            frozen: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Order-dependent FNV-1a digest of every parameter's bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.params {
            for v in p.value.data() {
                for byte in v.as_f64().to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            frozen: self.frozen,
        }
    }

    /// Registers every parameter as a leaf of `graph`. Leaves are
    /// differentiable only when `requires_grad` is set and the store is not
    /// frozen.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, requires_grad: bool) -> Bound<'g, T> {
        let rg = requires_grad && !self.frozen;
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| graph.leaf(p.value.clone(), rg))
                .collect(),
        }
    }

    /// Applies `f(param, grad)` to every parameter. Fails on a frozen store.
    pub fn update(&mut self, grads: &[Tensor<T>], mut f: impl FnMut(usize, &mut Tensor<T>, &Tensor<T>)) -> Result<()> {
        if self.frozen {
            return Err(Error::Invalid("attempted to update a frozen parameter store".into()));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (i, (p, g)) in self.params.iter_mut().zip(grads).enumerate() {
            p.value.expect_same_shape(g, "ParamStore::update")?;
            f(i, &mut p.value, g);
        }
        Ok(())
    }
}

/// Parameters of one store registered on a graph.
pub struct Bound<'g, T: Scalar> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    pub fn var(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    /// Gradient per parameter, zeros where none flowed.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }

    /// Whether any parameter received a gradient in `grads`.
    pub fn any_gradient(&self, grads: &Gradients<T>) -> bool {
        self.vars.iter().any(|&v| grads.get(v).is_some())
    }
}

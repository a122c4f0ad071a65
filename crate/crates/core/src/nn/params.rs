use sha2::{Digest, Sha256};

use crate::tensor::{Graph, Gradients, Real, Result, Rng, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces the value of a named parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| TensorError::InvalidArgument {
            op: "ParamStore::set",
            reason: format!("unknown parameter {name}"),
        })?;
        if self.tensors[id.0].shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set",
                lhs: self.tensors[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Copies every parameter of `other` by name; names and shapes must match.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        if other.len() != self.len() {
            return Err(TensorError::InvalidArgument {
                op: "ParamStore::load_from",
                reason: format!("{} parameters vs {}", other.len(), self.len()),
            });
        }
        for (name, t) in other.iter() {
            self.set(name, t.clone())?;
        }
        Ok(())
    }

    /// Hash of names and shapes only.
    pub fn architecture_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update([0xffu8]);
        }
        hex::encode(h.finalize())
    }

    /// Hash of names, shapes and exact bit patterns.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update(t.to_tnsr_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Puts every parameter into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Binding {
        Binding { vars: self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect() }
    }

    /// Parameters whose names start with `prefix`, in store order.
    pub fn subset(&self, prefix: &str) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.add(name, t.clone());
        }
        out
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// Graph variables for one bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps vars already in a graph, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn grads<F: Real>(&self, grads: &Gradients<F>) -> Vec<Option<Tensor<F>>> {
        self.vars.iter().map(|&v| grads.get(v).cloned()).collect()
    }
}

impl std::ops::Index<ParamId> for Binding {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for conv and
/// linear layers.
pub fn uniform_fan_in<F: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64(rng.uniform_range(-bound, bound))).collect();
    Tensor::new(shape, data).expect("init shape")
}

//! Named parameter storage and binding onto a tape.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::config::ParamKind;
use crate::model::ModelError;
use crate::numerics::{Gradients, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub trainable: bool,
    pub decay: bool,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

/// Draws from N(0, std²) truncated to ±2 std by rejection.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub(crate) fn init_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], kind: ParamKind, rng: &mut R) -> Tensor<T> {
    match kind {
        ParamKind::NormScale => Tensor::ones(shape.to_vec()),
        ParamKind::Weight | ParamKind::Embedding => {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::lit(trunc_normal(rng, INIT_STD))).collect();
            Tensor::new(shape.to_vec(), data).expect("spec shape")
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<(), ModelError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ModelError::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            kind,
            trainable: true,
            decay: kind != ParamKind::NormScale,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>, ModelError> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param<T>, ModelError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(ModelError::MissingParam(name.to_string())),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.param(name).map(|p| &p.value)
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    /// Fingerprint of every name, shape and value bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            for v in p.value.data() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Puts every parameter on `tape`; trainable ones become tracked leaves
    /// when `track` is set.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), track && p.trainable))
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Gradients for each parameter in store order; untracked or unused
    /// parameters get zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| grads.get_or_zeros(v, p.value.shape()))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                    trainable: p.trainable,
                    decay: p.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Tape handles for a [`ParamStore`], looked up by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Uses caller-provided handles, e.g. the parameter vars of a gradient
    /// check. `vars` follows store order.
    pub fn from_vars<T: Scalar>(store: &ParamStore<T>, vars: Vec<Var>) -> Result<Self, ModelError> {
        if vars.len() != store.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameter handles, got {}",
                store.len(),
                vars.len()
            )));
        }
        Ok(Self {
            vars,
            index: store.index.clone(),
        })
    }

    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

//! Named flat parameter arrays with gradient shadows.

use std::collections::BTreeMap;

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::io::{decode_named, encode_named, Blob};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: BTreeMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: Vec<F>,
        decay: bool,
    ) {
        let name = name.into();
        assert_eq!(
            value.len(),
            shape.iter().product::<usize>(),
            "`{name}` value/shape mismatch"
        );
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        self.index.insert(name.clone(), self.params.len());
        let grad = vec![F::zero(); value.len()];
        self.params.push(Param {
            name,
            shape,
            value,
            grad,
            decay,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Param<F> {
        &self.params[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<F> {
        let i = self.index[name];
        &mut self.params[i]
    }

    pub fn values(&self) -> Vec<Vec<F>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_values(&mut self, values: &[Vec<F>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} arrays for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.len() != v.len() {
                return Err(Error::Shape(format!(
                    "`{}`: {} values for {}",
                    p.name,
                    v.len(),
                    p.value.len()
                )));
            }
            p.value.clone_from(v);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Puts every parameter on `tape`; trainable leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone(), p.shape.clone())
                } else {
                    tape.constant(p.value.clone(), p.shape.clone())
                }
            })
            .collect()
    }

    /// Adds tape gradients into the gradient shadows, rejecting non-finite values.
    pub fn accumulate(&mut self, grads: &Grads<F>, vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        name: format!("{}[{bad}] gradient", p.name),
                    });
                }
                p.grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, k: F) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= k);
        }
    }

    pub fn grad_norm(&self) -> F {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|&g| g * g)
            .sum::<F>()
            .sqrt()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries: Vec<(String, Blob)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), Blob::scalar(p.shape.clone(), &p.value)))
            .collect();
        encode_named(&entries)
    }

    /// Loads values into an already-shaped store; names and shapes must match.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = decode_named(bytes).map_err(|detail| Error::Format {
            path: "<params>".into(),
            detail,
        })?;
        if entries.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} arrays, model {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, blob) in entries {
            let i = *self
                .index
                .get(&name)
                .ok_or_else(|| Error::Shape(format!("unknown parameter `{name}`")))?;
            let p = &mut self.params[i];
            if blob.shape != p.shape {
                return Err(Error::Shape(format!(
                    "`{name}`: checkpoint {:?} vs model {:?}",
                    blob.shape, p.shape
                )));
            }
            p.value = blob.to_scalar();
        }
        Ok(())
    }
}

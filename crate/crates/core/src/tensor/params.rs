use serde::{Deserialize, Serialize};

use super::{Scalar, Tape, Var};
use crate::error::{Error, Result};

/// A named learnable array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
}

/// Ordered collection of a model's parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Registers a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<F>) -> usize {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param shape/value mismatch");
        self.params.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &Param<F> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<F> {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                tape.variable(&p.shape, p.value.clone())
                    .expect("store invariants guarantee a valid leaf")
            })
            .collect()
    }

    /// Gradients of the bound leaves, zero where backward did not reach.
    pub fn grads(&self, tape: &Tape<F>, bound: &[Var]) -> Vec<Vec<F>> {
        self.params
            .iter()
            .zip(bound)
            .map(|(p, &v)| {
                tape.grad(v)
                    .map(<[F]>::to_vec)
                    .unwrap_or_else(|| vec![F::zero(); p.value.len()])
            })
            .collect()
    }

    /// Same names and values converted to another precision.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| G::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_layout<G>(&self, other: &ParamStore<G>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Config(format!(
                "parameter count {} != {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }
}

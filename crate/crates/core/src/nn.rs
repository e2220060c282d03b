//! Parameter initialization and ordered parameter access shared by the models.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Var};

pub(crate) fn gaussian(rng: &mut Rng, n: usize, std: f64) -> Vec<f32> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng) as f32).collect()
}

/// `U(-1/√fan_in, 1/√fan_in)`.
pub(crate) fn fan_in_uniform(rng: &mut Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
}

/// Registers a `[fan_in × fan_out]` weight and a zero `[fan_out]` bias.
pub(crate) fn push_affine(
    store: &mut ParamStore<f32>,
    rng: &mut Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) {
    store.push(
        format!("{name}.weight"),
        &[fan_in, fan_out],
        fan_in_uniform(rng, fan_in, fan_in * fan_out),
    );
    store.push(format!("{name}.bias"), &[fan_out], vec![0.0; fan_out]);
}

/// Hands out bound parameters in registration order.
pub(crate) struct Cursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(vars: &'a [Var]) -> Self {
        Cursor { vars, at: 0 }
    }

    pub(crate) fn next(&mut self) -> Result<Var> {
        let v = self
            .vars
            .get(self.at)
            .copied()
            .ok_or_else(|| Error::Config("too few parameters for the model config".into()))?;
        self.at += 1;
        Ok(v)
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.at == self.vars.len() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "model used {} of {} parameters",
                self.at,
                self.vars.len()
            )))
        }
    }
}

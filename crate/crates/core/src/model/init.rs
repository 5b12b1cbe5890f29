use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Registers parameters into a store, either freshly initialized or copied by
/// name from a source store (checkpoint loading).
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    rng: &'a mut Rng,
    source: Option<&'a ParamStore>,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng, source: Option<&'a ParamStore>) -> Self {
        Self { store, rng, source }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<ParamId> {
        let (value, trainable) = match self.source {
            Some(src) => {
                let p = src
                    .by_name(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))?;
                if p.value.shape() != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name:?} has shape {:?}, expected {shape:?}",
                        p.value.shape()
                    )));
                }
                (p.value.clone(), p.trainable)
            }
            None => {
                let value = match init {
                    Init::Normal(std) => Tensor::from_fn(shape, |_| std * self.rng.sample::<f64, _>(StandardNormal)),
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::full(shape, 1.0),
                };
                (value, trainable)
            }
        };
        self.store.insert(name, value, trainable)
    }
}

use super::encoder::NORM_EPS;
use super::init::{Init, ParamBuilder};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

pub(crate) struct Linear {
    pub(crate) weight: ParamId,
    pub(crate) bias: ParamId,
}

impl Linear {
    pub(crate) fn build(b: &mut ParamBuilder<'_>, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: b.param(&format!("{name}.w"), &[fan_in, fan_out], init, true)?,
            bias: b.param(&format!("{name}.b"), &[fan_out], Init::Zeros, true)?,
        })
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    pub(crate) fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// RMS normalization with gain and bias, used throughout the backbone.
pub(crate) struct Norm {
    pub(crate) gain: ParamId,
    pub(crate) bias: ParamId,
}

impl Norm {
    pub(crate) fn build(b: &mut ParamBuilder<'_>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: b.param(&format!("{name}.g"), &[width], Init::Ones, true)?,
            bias: b.param(&format!("{name}.b"), &[width], Init::Zeros, true)?,
        })
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.rms_norm(x, g, b, NORM_EPS)
    }
}

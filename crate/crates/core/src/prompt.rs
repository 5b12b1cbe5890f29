//! The promptbook and its image-conditioned customization.
//!
//! A parameter network pools the visual features, runs a small MLP and emits
//! an affine transform for the promptbook: one `(γᵢ, βᵢ)` pair per prompt in
//! prompt-wise mode, or a single scalar pair for the whole book in book-wise
//! mode. The head is zero-initialized and emits `δ` with `γ = 1 + δ`, so an
//! untrained network applies the identity transform.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::init::{Init, ParamBuilder};
use crate::model::layers::Linear;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CustomizationMode {
    /// Shared prompts for every image.
    None,
    #[default]
    PromptWise,
    BookWise,
}

impl CustomizationMode {
    pub const ALL: [CustomizationMode; 3] = [
        CustomizationMode::None,
        CustomizationMode::PromptWise,
        CustomizationMode::BookWise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CustomizationMode::None => "none",
            CustomizationMode::PromptWise => "prompt_wise",
            CustomizationMode::BookWise => "book_wise",
        }
    }
}

impl fmt::Display for CustomizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CustomizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}; valid modes: none, prompt_wise, book_wise")))
    }
}

/// Which transform factors are replaced by their identity element.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub drop_gamma: bool,
    pub drop_beta: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        drop_gamma: false,
        drop_beta: false,
    };

    pub fn is_none(&self) -> bool {
        !self.drop_gamma && !self.drop_beta
    }
}

/// `N` learnable base prompts of width `D`.
pub struct Promptbook {
    pub book: ParamId,
}

impl Promptbook {
    /// Entries are drawn from `N(0, std²)`; callers pass the empirical deviation
    /// of the frozen token embeddings.
    pub fn build(b: &mut ParamBuilder<'_>, config: &ModelConfig, std: f64) -> Result<Self> {
        Ok(Self {
            book: b.param(
                "prompt.book",
                &[config.num_prompts, config.d_model],
                Init::Normal(std),
                true,
            )?,
        })
    }
}

/// Tape handles for an affine transform: `[N×1]` columns in prompt-wise mode,
/// `[1×1]` in book-wise mode.
#[derive(Clone, Copy, Debug)]
pub struct AffineParams {
    pub gamma: Var,
    pub beta: Var,
}

/// The network φ mapping visual features `[M×C′]` to `(γ, β)`.
pub struct ParamNet {
    trunk: Vec<Linear>,
    head: Linear,
    mode: CustomizationMode,
    groups: usize,
    calls: AtomicUsize,
}

impl ParamNet {
    /// Depth 1 is a single linear head; each extra level adds a `C′→C′` GELU layer.
    pub fn build(b: &mut ParamBuilder<'_>, config: &ModelConfig) -> Result<Self> {
        let outputs = config
            .param_net_outputs()
            .ok_or_else(|| Error::Contract("no parameter network without customization".into()))?;
        let c = config.visual_channels;
        let trunk = (1..config.param_net_depth)
            .map(|i| Linear::build(b, &format!("phi.trunk.{i}"), c, c, Init::Normal(1.0 / (c as f64).sqrt())))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::build(b, "phi.head", c, outputs, Init::Zeros)?;
        Ok(Self {
            trunk,
            head,
            mode: config.mode,
            groups: outputs / 2,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn mode(&self) -> CustomizationMode {
        self.mode
    }

    pub fn output_dim(&self) -> usize {
        2 * self.groups
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.trunk
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|l| l.ids())
            .collect()
    }

    /// Number of forward evaluations since construction.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Mean-pools the features, runs the trunk and head, and splits the head
    /// output into `γ = 1 + δ` and `β`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<AffineParams> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut h = tape.mean(features, 0)?;
        for layer in &self.trunk {
            h = layer.forward(tape, store, h)?;
            h = tape.gelu(h);
        }
        let out = self.head.forward(tape, store, h)?;
        let g = self.groups;
        let delta = tape.slice(out, 1, 0, g)?;
        let delta = tape.reshape(delta, &[g, 1])?;
        let gamma = tape.add_scalar(delta, 1.0);
        let beta = tape.slice(out, 1, g, g)?;
        let beta = tape.reshape(beta, &[g, 1])?;
        Ok(AffineParams { gamma, beta })
    }
}

/// Replaces dropped factors by constants: `γ → 1`, `β → 0`.
pub fn ablate(tape: &mut Tape, params: AffineParams, ablation: Ablation) -> AffineParams {
    let mut out = params;
    if ablation.drop_gamma {
        let shape = tape.value(params.gamma).shape().to_vec();
        out.gamma = tape.constant(Tensor::full(&shape, 1.0));
    }
    if ablation.drop_beta {
        let shape = tape.value(params.beta).shape().to_vec();
        out.beta = tape.constant(Tensor::zeros(&shape));
    }
    out
}

/// `P′ = γ ⊙ P + β`, with `γ`, `β` broadcast along the prompt width (and, in
/// book-wise mode, across prompts).
pub fn customize(tape: &mut Tape, prompts: Var, params: AffineParams) -> Result<Var> {
    let (n, _) = tape.value(prompts).dims2()?;
    for v in [params.gamma, params.beta] {
        let s = tape.value(v).shape();
        if s != [n, 1] && s != [1, 1] {
            return Err(Error::dim("customize", &[n, 1], s));
        }
    }
    let scaled = tape.mul(prompts, params.gamma)?;
    tape.add(scaled, params.beta)
}

/// Concrete transform values, for inspection and ablation.
#[derive(Clone, Debug, PartialEq)]
pub enum AffineValues {
    PromptWise { gamma: Vec<f64>, beta: Vec<f64> },
    BookWise { gamma: f64, beta: f64 },
}

impl AffineValues {
    pub fn read(tape: &Tape, params: AffineParams, mode: CustomizationMode) -> Result<Self> {
        let (g, b) = (tape.value(params.gamma).data(), tape.value(params.beta).data());
        match mode {
            CustomizationMode::PromptWise => Ok(AffineValues::PromptWise {
                gamma: g.to_vec(),
                beta: b.to_vec(),
            }),
            CustomizationMode::BookWise => Ok(AffineValues::BookWise { gamma: g[0], beta: b[0] }),
            CustomizationMode::None => Err(Error::Contract("no transform without customization".into())),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            AffineValues::PromptWise { gamma, beta } => gamma.iter().chain(beta).all(|v| v.is_finite()),
            AffineValues::BookWise { gamma, beta } => gamma.is_finite() && beta.is_finite(),
        }
    }

    /// Applies the transform to a promptbook.
    pub fn apply(&self, prompts: &Tensor) -> Result<Tensor> {
        match self {
            AffineValues::PromptWise { gamma, beta } => customize_promptwise(prompts, gamma, beta),
            AffineValues::BookWise { gamma, beta } => customize_bookwise(prompts, *gamma, *beta),
        }
    }
}

/// Identity elements for dropped factors. At least one flag must be set.
pub fn ablate_params(values: &AffineValues, drop_gamma: bool, drop_beta: bool) -> Result<AffineValues> {
    if !drop_gamma && !drop_beta {
        return Err(Error::Contract("ablation must drop gamma, beta, or both".into()));
    }
    Ok(match values {
        AffineValues::PromptWise { gamma, beta } => AffineValues::PromptWise {
            gamma: if drop_gamma { vec![1.0; gamma.len()] } else { gamma.clone() },
            beta: if drop_beta { vec![0.0; beta.len()] } else { beta.clone() },
        },
        AffineValues::BookWise { gamma, beta } => AffineValues::BookWise {
            gamma: if drop_gamma { 1.0 } else { *gamma },
            beta: if drop_beta { 0.0 } else { *beta },
        },
    })
}

/// Row `i` becomes `γᵢ·pᵢ + βᵢ`.
pub fn customize_promptwise(prompts: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    let (n, _) = prompts.dims2()?;
    if gamma.len() != n || beta.len() != n {
        return Err(Error::dim("customize_promptwise", &[n], &[gamma.len(), beta.len()]));
    }
    let mut tape = Tape::inference();
    let p = tape.constant(prompts.clone());
    let gamma = tape.constant(Tensor::new(&[n, 1], gamma.to_vec())?);
    let beta = tape.constant(Tensor::new(&[n, 1], beta.to_vec())?);
    let out = customize(&mut tape, p, AffineParams { gamma, beta })?;
    Ok(tape.value(out).clone())
}

/// Every entry becomes `γ·P[i][d] + β`.
pub fn customize_bookwise(prompts: &Tensor, gamma: f64, beta: f64) -> Result<Tensor> {
    if !gamma.is_finite() || !beta.is_finite() {
        return Err(Error::Numeric("customize_bookwise"));
    }
    prompts.dims2()?;
    let mut tape = Tape::inference();
    let p = tape.constant(prompts.clone());
    let gamma = tape.constant(Tensor::full(&[1, 1], gamma));
    let beta = tape.constant(Tensor::full(&[1, 1], beta));
    let out = customize(&mut tape, p, AffineParams { gamma, beta })?;
    Ok(tape.value(out).clone())
}

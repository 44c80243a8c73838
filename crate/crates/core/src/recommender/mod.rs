//! Final scoring, the composite training objective, the training loop and the
//! persisted model artifact.

mod artifact;
mod model;
mod train;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::dmsh::DiffusionParam;
use crate::error::{Error, Result};
use crate::hierarchy::{KMeansOptions, TemperatureRule};
use crate::nn::Linear;
use crate::par::Exec;
use crate::pepp::PairwiseForm;
use crate::tensor::Tensor;

pub use artifact::{rank_records, ModelArtifact, Recommendation, ARTIFACT_FORMAT, ARTIFACT_VERSION};
pub use model::{
    cluster_points, global_forward, inference_globals, record_forward, score_record, Frozen, GlobalLeaves, GlobalPass, GlobalValues, GraphContext, Model,
    ModelLayout, ModelShape, RecordPass, RecordScores,
};
pub use train::{batch_objective, fit, Adam, BatchObjective, EpochLog, Phase};

/// Model variants: the full model and one ablation per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoPepp,
    NoDmsh,
    NoSyn,
    NoHgsn,
    NoIkg,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::Full, Variant::NoPepp, Variant::NoDmsh, Variant::NoSyn, Variant::NoHgsn, Variant::NoIkg];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPepp => "no_pepp",
            Variant::NoDmsh => "no_dmsh",
            Variant::NoSyn => "no_syn",
            Variant::NoHgsn => "no_hgsn",
            Variant::NoIkg => "no_ikg",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every hyper-parameter of a training run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Syndrome attention heads.
    pub syndrome_heads: usize,
    /// Refinement convolution widths.
    pub conv_widths: Vec<usize>,
    /// Attribute mask rate.
    pub gamma1: f64,
    /// Herb-slot mask rate.
    pub gamma2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub omega_h: f64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Reverse-process start step; `None` means half of `diffusion_steps`.
    pub reverse_start: Option<usize>,
    pub diffusion_param: DiffusionParam,
    pub kg_layers: usize,
    pub kg_inverse_edges: bool,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub max_len: usize,
    pub prompt_tokens: usize,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub contrastive_temperature: f64,
    pub pairwise_form: PairwiseForm,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub kmeans_temperature: TemperatureRule,
    pub cooccurrence_threshold: usize,
    pub seed: u64,
    pub variant: Variant,
    pub exec: Exec,
    /// Evaluate training-set metrics every this many joint epochs (0 disables).
    pub snapshot_every: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            batch_size: 256,
            learning_rate: 2e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            syndrome_heads: 2,
            conv_widths: vec![128, 64, 32],
            gamma1: 0.2,
            gamma2: 0.2,
            lambda1: 1.0,
            lambda2: 1.0,
            alpha: 0.4,
            beta: 0.6,
            omega_h: 0.5,
            diffusion_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            reverse_start: None,
            diffusion_param: DiffusionParam::X0,
            kg_layers: 2,
            kg_inverse_edges: true,
            encoder_layers: 2,
            encoder_heads: 2,
            max_len: 64,
            prompt_tokens: 2,
            pretrain_epochs: 50,
            epochs: 100,
            dropout: 0.2,
            contrastive_temperature: 0.2,
            pairwise_form: PairwiseForm::LogSigmoid,
            kmeans_max_iter: 50,
            kmeans_tol: 1e-5,
            kmeans_temperature: TemperatureRule::WithinSpread,
            cooccurrence_threshold: 10,
            seed: 0,
            variant: Variant::Full,
            exec: Exec::Parallel,
            snapshot_every: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::validation("recommender", m));
        let positive = [
            ("dim", self.dim),
            ("batch_size", self.batch_size),
            ("syndrome_heads", self.syndrome_heads),
            ("diffusion_steps", self.diffusion_steps),
            ("encoder_heads", self.encoder_heads),
            ("max_len", self.max_len),
            ("kmeans_max_iter", self.kmeans_max_iter),
            ("cooccurrence_threshold", self.cooccurrence_threshold),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.conv_widths.contains(&0) {
            return fail("conv_widths must be positive".into());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda1", self.lambda1), ("lambda2", self.lambda2), ("omega_h", self.omega_h)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        for (name, v) in [("gamma1", self.gamma1), ("gamma2", self.gamma2), ("dropout", self.dropout)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.contrastive_temperature > 0.0) || !(self.kmeans_tol > 0.0) {
            return fail("learning_rate, contrastive_temperature and kmeans_tol must be positive".into());
        }
        if self.dim % self.syndrome_heads != 0 || self.dim % self.encoder_heads != 0 {
            return fail(format!("dim {} must be divisible by both head counts", self.dim));
        }
        if self.prompt_tokens >= self.max_len {
            return fail("prompt_tokens must leave room for at least one symptom".into());
        }
        if let Some(t) = self.reverse_start {
            if t == 0 || t > self.diffusion_steps {
                return fail(format!("reverse_start must lie in 1..={}", self.diffusion_steps));
            }
        }
        Ok(())
    }

    pub fn reverse_start_step(&self) -> usize {
        self.reverse_start.unwrap_or((self.diffusion_steps / 2).max(1))
    }

    pub fn kmeans(&self) -> KMeansOptions {
        KMeansOptions { max_iter: self.kmeans_max_iter, tolerance: self.kmeans_tol, temperature: self.kmeans_temperature }
    }
}

/// `ReLU(M_syn W_syn + b_syn) · ê_hᵀ`, one score per herb.
pub fn syndrome_score(tape: &mut Tape, store: &ParamStore, w_syn: &Linear, m_syn: Var, herbs: Var) -> Var {
    let q = w_syn.forward(tape, store, m_syn);
    let q = tape.relu(q);
    tape.matmul_nt(q, herbs)
}

/// `α M_pf + β L`; a missing level term contributes zero.
pub fn recommend(tape: &mut Tape, m_pf: Var, levels: Option<Var>, alpha: f64, beta: f64) -> Var {
    let a = tape.scale(m_pf, alpha);
    match levels {
        Some(l) => {
            let b = tape.scale(l, beta);
            tape.add(a, b)
        }
        None => a,
    }
}

/// Plain-value form of [`recommend`].
pub fn recommend_values(m_pf: &[f64], levels: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    m_pf.iter().zip(levels).map(|(p, l)| alpha * p + beta * l).collect()
}

/// Mean sigmoid cross-entropy of `logits` (`1 x m`) against the multi-hot `herbs`.
pub fn bce_loss(tape: &mut Tape, logits: Var, herbs: &[usize]) -> Var {
    let m = tape.shape(logits).1;
    let mut y = Tensor::zeros(1, m);
    for &h in herbs {
        y.set(0, h, 1.0);
    }
    tape.bce_with_logits(logits, y)
}

/// Values of the four objective terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    #[serde(rename = "L_p")]
    pub prompt: f64,
    #[serde(rename = "L_BCE")]
    pub bce: f64,
    #[serde(rename = "L_cl")]
    pub contrastive: f64,
    #[serde(rename = "L_TCM_DM")]
    pub diffusion: f64,
}

/// `L_p + L_BCE + λ1 L_cl + λ2 L_TCM_DM`; any non-finite term is an error naming it.
pub fn total_loss(c: &LossComponents, lambda1: f64, lambda2: f64) -> Result<f64> {
    for (name, v) in [("L_p", c.prompt), ("L_BCE", c.bce), ("L_cl", c.contrastive), ("L_TCM_DM", c.diffusion)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} is {v}")));
        }
    }
    Ok(c.prompt + c.bce + lambda1 * c.contrastive + lambda2 * c.diffusion)
}

/// Tape form of [`total_loss`] for scalar component variables.
pub fn total_loss_var(tape: &mut Tape, prompt: Var, bce: Var, contrastive: Var, diffusion: Var, lambda1: f64, lambda2: f64) -> Var {
    let a = tape.add(prompt, bce);
    let c = tape.scale(contrastive, lambda1);
    let d = tape.scale(diffusion, lambda2);
    let a = tape.add(a, c);
    tape.add(a, d)
}

//! Knowledge- and symptom-conditioned Gaussian diffusion over herb embeddings,
//! channel self-attention refinement, and the variational substitute used by
//! the diffusion ablation.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Linear β schedule with the derived products. Arrays are indexed by `t - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub posterior_variance: Vec<f64>,
}

impl DiffusionSchedule {
    /// `ᾱ_{t}` with the convention `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Precondition(format!("diffusion step {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let in_unit = |x: &f64| *x > 0.0 && *x < 1.0;
        let ok = self.beta.iter().all(in_unit)
            && self.alpha.iter().all(in_unit)
            && self.alpha_bar.iter().all(in_unit)
            && self.alpha_bar.windows(2).all(|w| w[1] < w[0]);
        if ok {
            Ok(())
        } else {
            Err(Error::validation("dmsh", "schedule violates range or monotonicity"))
        }
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::validation("dmsh", "diffusion needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::validation("dmsh", format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64 })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let posterior_variance = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
        })
        .collect();
    let s = DiffusionSchedule { steps, beta, alpha, alpha_bar, posterior_variance };
    s.validate()?;
    Ok(s)
}

/// `√ᾱ_t x_0 + √(1-ᾱ_t) ε`.
pub fn q_sample(x0: &Tensor, t: usize, schedule: &DiffusionSchedule, noise: &Tensor) -> Result<Tensor> {
    schedule.check_step(t)?;
    if x0.shape() != noise.shape() {
        return Err(Error::Precondition("noise shape differs from x0".into()));
    }
    let ab = schedule.alpha_bar[t - 1];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(noise, |x, e| a * x + b * e))
}

/// One forward corruption step `x_t = √α_t x_{t-1} + √β_t ε`.
pub fn q_step(x_prev: &Tensor, t: usize, schedule: &DiffusionSchedule, noise: &Tensor) -> Result<Tensor> {
    schedule.check_step(t)?;
    let (a, b) = (schedule.alpha[t - 1].sqrt(), schedule.beta[t - 1].sqrt());
    Ok(x_prev.zip_map(noise, |x, e| a * x + b * e))
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
}

/// What the denoiser output stands for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffusionParam {
    /// The denoiser predicts `x_0`; the reverse mean is the Gaussian posterior mean.
    #[default]
    X0,
    /// The denoiser output sits in the noise slot of the reverse mean.
    EpsLiteral,
}

impl std::str::FromStr for DiffusionParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x0" => Ok(Self::X0),
            "eps-literal" => Ok(Self::EpsLiteral),
            other => Err(Error::validation("dmsh", format!("unknown diffusion parameterisation '{other}'"))),
        }
    }
}

impl DiffusionParam {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::X0 => "x0",
            Self::EpsLiteral => "eps-literal",
        }
    }
}

/// Coefficients `(c_x, c_f)` with `μ = c_x x_t + c_f f`.
pub fn mean_coefficients(schedule: &DiffusionSchedule, t: usize, param: DiffusionParam) -> (f64, f64) {
    let i = t - 1;
    let (alpha, beta, ab) = (schedule.alpha[i], schedule.beta[i], schedule.alpha_bar[i]);
    let prev = schedule.alpha_bar_at(t - 1);
    match param {
        // ᾱ_0 = 1 makes the last step return the clean estimate itself.
        DiffusionParam::X0 if t == 1 => (0.0, 1.0),
        DiffusionParam::X0 => (alpha.sqrt() * (1.0 - prev) / (1.0 - ab), prev.sqrt() * beta / (1.0 - ab)),
        DiffusionParam::EpsLiteral => {
            let s = 1.0 / alpha.sqrt();
            (s, -s * beta / (1.0 - ab).sqrt())
        }
    }
}

/// Reverse-process mean for denoiser output `f`.
pub fn denoise_mean(tape: &mut Tape, x_t: Var, f: Var, t: usize, schedule: &DiffusionSchedule, param: DiffusionParam) -> Result<Var> {
    schedule.check_step(t)?;
    let (cx, cf) = mean_coefficients(schedule, t, param);
    let a = tape.scale(x_t, cx);
    let b = tape.scale(f, cf);
    Ok(tape.add(a, b))
}

/// Reverse loop from `x_start` at step `t_start` down to step `t_stop`
/// (0 for the clean estimate). `f(x_t, t)` returns the denoiser output.
/// Noise is skipped on the final step into `x_0`.
pub fn p_sample_loop_with<F>(x_start: &Tensor, t_start: usize, t_stop: usize, schedule: &DiffusionSchedule, param: DiffusionParam, rng: &mut Rng, mut f: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Tensor,
{
    schedule.check_step(t_start)?;
    if t_stop >= t_start {
        return Err(Error::Precondition(format!("reverse loop stop {t_stop} must precede start {t_start}")));
    }
    let mut x = x_start.clone();
    for t in (t_stop + 1..=t_start).rev() {
        let out = f(&x, t);
        let (cx, cf) = mean_coefficients(schedule, t, param);
        let mut mean = x.zip_map(&out, |a, b| cx * a + cf * b);
        if t > 1 {
            let sigma = schedule.posterior_variance[t - 1].sqrt();
            let eps = standard_normal(x.rows(), x.cols(), rng);
            mean = mean.zip_map(&eps, |m, e| m + sigma * e);
        }
        x = mean;
    }
    Ok(x)
}

/// Sinusoidal embedding of step `t`, width `dim`.
pub fn step_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

/// Step embeddings for per-row steps.
pub fn step_embedding_rows(steps: &[usize], dim: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = steps.iter().map(|&t| step_embedding(t, dim)).collect();
    Tensor::from_rows(&rows)
}

/// `½(a + b)`, used for both herb and symptom fusion.
pub fn half_fuse(tape: &mut Tape, a: Var, b: Var) -> Var {
    let s = tape.add(a, b);
    tape.scale(s, 0.5)
}

/// Conditioning rows, one per herb.
#[derive(Clone, Copy, Debug)]
pub struct Conditioner {
    /// Fused herb embedding.
    pub herb: Var,
    /// Projected knowledge embedding.
    pub knowledge: Var,
    /// Symptom context per herb.
    pub symptom: Var,
}

/// Conditioner values detached from any tape.
#[derive(Clone, Debug)]
pub struct ConditionerValues {
    pub herb: Tensor,
    pub knowledge: Tensor,
    pub symptom: Tensor,
}

impl ConditionerValues {
    pub fn from_tape(tape: &Tape, c: &Conditioner) -> Self {
        Self { herb: tape.value(c.herb).clone(), knowledge: tape.value(c.knowledge).clone(), symptom: tape.value(c.symptom).clone() }
    }

    pub fn leaves(&self, tape: &mut Tape) -> Conditioner {
        Conditioner { herb: tape.leaf(self.herb.clone()), knowledge: tape.leaf(self.knowledge.clone()), symptom: tape.leaf(self.symptom.clone()) }
    }
}

/// Three-layer feed-forward denoiser on `[x_t | E_h | E_k | E_s | t]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub layers: [Linear; 3],
}

impl DenoiserParams {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut Rng) -> Self {
        let m = "dmsh";
        Self {
            layers: [
                Linear::new(store, m, "denoiser.0", 5 * dim, dim, true, rng),
                Linear::new(store, m, "denoiser.1", dim, dim, true, rng),
                Linear::new(store, m, "denoiser.2", dim, dim, true, rng),
            ],
        }
    }
}

pub fn denoiser_forward(tape: &mut Tape, store: &ParamStore, params: &DenoiserParams, x_t: Var, cond: &Conditioner, steps: Var) -> Var {
    let input = tape.concat_cols(&[x_t, cond.herb, cond.knowledge, cond.symptom, steps]);
    let h = params.layers[0].forward(tape, store, input);
    let h = Activation::LeakyRelu.apply(tape, h);
    let h = params.layers[1].forward(tape, store, h);
    let h = Activation::LeakyRelu.apply(tape, h);
    params.layers[2].forward(tape, store, h)
}

fn broadcast_steps(tape: &mut Tape, t: usize, rows: usize, dim: usize) -> Var {
    tape.leaf(step_embedding_rows(&vec![t; rows], dim))
}

/// Channel self-attention refinement. Channel parameters are tied across
/// the prediction, knowledge and symptom channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsaParams {
    /// Pointwise convolutions over feature width, one per configured width.
    pub convs: Vec<Linear>,
    /// Step-embedding injections, one per convolution input.
    pub step_proj: Vec<Linear>,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// Zero-initialised readout back to width `d`.
    pub readout: Linear,
}

impl TsaParams {
    pub fn new(store: &mut ParamStore, dim: usize, widths: &[usize], rng: &mut Rng) -> Self {
        let m = "tsa";
        let mut convs = Vec::new();
        let mut step_proj = Vec::new();
        let mut prev = dim;
        for (l, &w) in widths.iter().enumerate() {
            step_proj.push(Linear::new(store, m, &format!("step{l}"), dim, prev, false, rng));
            convs.push(Linear::new(store, m, &format!("conv{l}"), prev, w, true, rng));
            prev = w;
        }
        Self {
            convs,
            step_proj,
            query: Linear::new(store, m, "query", prev, prev, false, rng),
            key: Linear::new(store, m, "key", prev, prev, false, rng),
            value: Linear::new(store, m, "value", prev, prev, false, rng),
            readout: Linear::zeros(store, m, "readout", prev, dim, false),
        }
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        self.value.output_dim(store)
    }
}

/// Per-herb channel outputs before the readout.
pub struct TsaChannels {
    /// Attention weights of the prediction channel over (p, k, s), `m x 3`.
    pub weights: Var,
    /// Prediction-channel output, `m x w`.
    pub p_out: Var,
    /// Refined estimate `x_p + readout(p_out)`.
    pub refined: Var,
}

pub fn tsa_refine(tape: &mut Tape, store: &ParamStore, params: &TsaParams, x_p: Var, knowledge: Var, symptom: Var, steps: Var) -> TsaChannels {
    let mut channels = [x_p, knowledge, symptom];
    for (conv, sp) in params.convs.iter().zip(&params.step_proj) {
        let inject = sp.forward(tape, store, steps);
        for c in channels.iter_mut() {
            let h = tape.add(*c, inject);
            let h = conv.forward(tape, store, h);
            *c = Activation::LeakyRelu.apply(tape, h);
        }
    }
    let w = params.width(store);
    let q = params.query.forward(tape, store, channels[0]);
    let keys: Vec<Var> = channels.iter().map(|&c| params.key.forward(tape, store, c)).collect();
    let values: Vec<Var> = channels.iter().map(|&c| params.value.forward(tape, store, c)).collect();
    let scores: Vec<Var> = keys
        .iter()
        .map(|&k| {
            let qk = tape.mul(q, k);
            tape.sum_cols(qk)
        })
        .collect();
    let scores = tape.concat_cols(&scores);
    let scores = tape.scale(scores, 1.0 / (w as f64).sqrt());
    let weights = tape.softmax_rows(scores);
    let mut p_out: Option<Var> = None;
    for (j, &v) in values.iter().enumerate() {
        let a = tape.slice_cols(weights, j, 1);
        let term = tape.mul_col(v, a);
        p_out = Some(match p_out {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let p_out = p_out.expect("three channels");
    let delta = params.readout.forward(tape, store, p_out);
    let refined = tape.add(x_p, delta);
    TsaChannels { weights, p_out, refined }
}

/// Denoiser followed by the refinement, as applied at every reverse step.
#[allow(clippy::too_many_arguments)]
pub fn predict_clean(tape: &mut Tape, store: &ParamStore, denoiser: &DenoiserParams, tsa: Option<&TsaParams>, x_t: Var, cond: &Conditioner, t: usize, detach_denoiser: bool) -> Var {
    let (rows, dim) = tape.shape(x_t);
    let steps = broadcast_steps(tape, t, rows, dim);
    let mut f = denoiser_forward(tape, store, denoiser, x_t, cond, steps);
    if detach_denoiser {
        let v = tape.value(f).clone();
        f = tape.leaf(v);
    }
    match tsa {
        Some(p) => tsa_refine(tape, store, p, f, cond.knowledge, cond.symptom, steps).refined,
        None => f,
    }
}

/// Full reverse process with the learned denoiser, evaluated without gradients.
#[allow(clippy::too_many_arguments)]
pub fn p_sample_loop(
    store: &ParamStore,
    denoiser: &DenoiserParams,
    tsa: Option<&TsaParams>,
    cond: &ConditionerValues,
    x_start: &Tensor,
    t_start: usize,
    t_stop: usize,
    schedule: &DiffusionSchedule,
    param: DiffusionParam,
    rng: &mut Rng,
) -> Result<Tensor> {
    p_sample_loop_with(x_start, t_start, t_stop, schedule, param, rng, |x, t| {
        let mut tape = Tape::new();
        let c = cond.leaves(&mut tape);
        let xv = tape.leaf(x.clone());
        // The refinement only makes sense on a clean estimate.
        let refine = if param == DiffusionParam::X0 { tsa } else { None };
        let out = predict_clean(&mut tape, store, denoiser, refine, xv, &c, t, false);
        tape.value(out).clone()
    })
}

/// Mean over rows of `‖x_0 − f_θ(x_t, t, ·)‖²` with per-row steps and noise.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss(tape: &mut Tape, store: &ParamStore, params: &DenoiserParams, x0: &Tensor, steps: &[usize], noise: &Tensor, cond: &Conditioner, schedule: &DiffusionSchedule) -> Result<Var> {
    let (rows, dim) = x0.shape();
    if steps.len() != rows {
        return Err(Error::Precondition("one diffusion step per row required".into()));
    }
    let mut xt = Tensor::zeros(rows, dim);
    for (r, &t) in steps.iter().enumerate() {
        schedule.check_step(t)?;
        let ab = schedule.alpha_bar[t - 1];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for c in 0..dim {
            xt.set(r, c, a * x0.get(r, c) + b * noise.get(r, c));
        }
    }
    let xt = tape.leaf(xt);
    let emb = tape.leaf(step_embedding_rows(steps, dim));
    let f = denoiser_forward(tape, store, params, xt, cond, emb);
    Ok(reconstruction_mse(tape, x0, f))
}

fn reconstruction_mse(tape: &mut Tape, target: &Tensor, f: Var) -> Var {
    let rows = target.rows();
    let x0 = tape.leaf(target.clone());
    let diff = tape.sub(x0, f);
    let sq = tape.mul(diff, diff);
    let total = tape.sum_all(sq);
    tape.scale(total, 1.0 / rows as f64)
}

/// `x_0 + ω x_p`.
pub fn compose_herb_repr(tape: &mut Tape, x0: Var, x_p: Var, omega: f64) -> Var {
    let s = tape.scale(x_p, omega);
    tape.add(x0, s)
}

/// One-hidden-layer variational autoencoder that stands in for the diffusion process.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeParams {
    pub encoder: Linear,
    pub mean: Linear,
    pub log_var: Linear,
    pub decoder: Linear,
    pub output: Linear,
}

impl VaeParams {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut Rng) -> Self {
        let m = "vae";
        Self {
            encoder: Linear::new(store, m, "encoder", 4 * dim, dim, true, rng),
            mean: Linear::new(store, m, "mean", dim, dim, true, rng),
            log_var: Linear::zeros(store, m, "log_var", dim, dim, true),
            decoder: Linear::new(store, m, "decoder", dim, dim, true, rng),
            output: Linear::new(store, m, "output", dim, dim, true, rng),
        }
    }
}

pub struct VaeOutput {
    pub reconstruction: Var,
    /// Reconstruction MSE plus KL with unit weight.
    pub loss: Var,
}

/// Encodes `[x_0 | E_h | E_k | E_s]`; samples the latent when `noise` is given,
/// otherwise decodes the mean.
pub fn vae_forward(tape: &mut Tape, store: &ParamStore, params: &VaeParams, x0: &Tensor, cond: &Conditioner, noise: Option<&Tensor>) -> VaeOutput {
    let rows = x0.rows();
    let xv = tape.leaf(x0.clone());
    let input = tape.concat_cols(&[xv, cond.herb, cond.knowledge, cond.symptom]);
    let h = params.encoder.forward(tape, store, input);
    let h = tape.relu(h);
    let mu = params.mean.forward(tape, store, h);
    let lv = params.log_var.forward(tape, store, h);
    let z = match noise {
        Some(eps) => {
            let half = tape.scale(lv, 0.5);
            let std = tape.exp(half);
            let e = tape.leaf(eps.clone());
            let spread = tape.mul(std, e);
            tape.add(mu, spread)
        }
        None => mu,
    };
    let d = params.decoder.forward(tape, store, z);
    let d = tape.relu(d);
    let reconstruction = params.output.forward(tape, store, d);
    let mse = reconstruction_mse(tape, x0, reconstruction);
    // KL(q || N(0, I)) = ½ Σ (μ² + e^{lv} − lv − 1), averaged over rows.
    let mu2 = tape.mul(mu, mu);
    let ev = tape.exp(lv);
    let k = tape.add(mu2, ev);
    let k = tape.sub(k, lv);
    let k = tape.add_scalar(k, -1.0);
    let k = tape.sum_all(k);
    let kl = tape.scale(k, 0.5 / rows as f64);
    let loss = tape.add(mse, kl);
    VaeOutput { reconstruction, loss }
}

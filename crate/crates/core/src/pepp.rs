//! Patient-attribute prompts over a causal self-attention sequence encoder,
//! masking augmentations, and the pairwise and contrastive prompt losses.

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::corpus::{Gender, PatientProfile, PrescriptionRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp2};
use crate::rng::Rng;
use crate::tensor::Tensor;

const AGE_BUCKETS: usize = 20;
const BODY_WIDTH: usize = 4;
const LN_EPS: f64 = 1e-5;

/// Attribute fields that masking treats as units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttributeField {
    Gender,
    Age,
    Body,
    History,
}

impl AttributeField {
    pub const ALL: [AttributeField; 4] = [AttributeField::Gender, AttributeField::Age, AttributeField::Body, AttributeField::History];
}

/// Fixed layout of the attribute vector for one dataset.
///
/// `[gender(3) | age bucket(20) | bmi, height, weight, present | history(H) | mask flags(4) | no-profile(1)]`
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub history_codes: Vec<String>,
}

impl AttributeSchema {
    pub fn from_records(records: &[PrescriptionRecord]) -> Self {
        let codes: BTreeSet<String> = records.iter().filter_map(|r| r.profile.as_ref()).flat_map(|p| p.history.iter().cloned()).collect();
        Self { history_codes: codes.into_iter().collect() }
    }

    fn range(&self, field: AttributeField) -> std::ops::Range<usize> {
        let h = self.history_codes.len();
        match field {
            AttributeField::Gender => 0..3,
            AttributeField::Age => 3..3 + AGE_BUCKETS,
            AttributeField::Body => 3 + AGE_BUCKETS..3 + AGE_BUCKETS + BODY_WIDTH,
            AttributeField::History => 3 + AGE_BUCKETS + BODY_WIDTH..3 + AGE_BUCKETS + BODY_WIDTH + h,
        }
    }

    fn mask_flag(&self, field: AttributeField) -> usize {
        self.range(AttributeField::History).end + field as usize
    }

    fn no_profile_slot(&self) -> usize {
        self.range(AttributeField::History).end + AttributeField::ALL.len()
    }

    pub fn width(&self) -> usize {
        self.no_profile_slot() + 1
    }

    pub fn encode(&self, profile: Option<&PatientProfile>) -> AttributeVector {
        let mut v = vec![0.0; self.width()];
        match profile {
            None => v[self.no_profile_slot()] = 1.0,
            Some(p) => {
                v[Gender::index(p.gender)] = 1.0;
                v[self.range(AttributeField::Age).start + (p.age_bucket as usize).min(AGE_BUCKETS - 1)] = 1.0;
                let body = self.range(AttributeField::Body).start;
                if let Some(bmi) = p.bmi() {
                    v[body] = bmi / 25.0;
                }
                if let Some(h) = p.height_cm {
                    v[body + 1] = h / 170.0;
                }
                if let Some(w) = p.weight_kg {
                    v[body + 2] = w / 65.0;
                }
                v[body + 3] = if p.height_cm.is_some() || p.weight_kg.is_some() { 1.0 } else { 0.0 };
                let hist = self.range(AttributeField::History).start;
                for (i, code) in self.history_codes.iter().enumerate() {
                    if p.history.contains(code) {
                        v[hist + i] = 1.0;
                    }
                }
            }
        }
        AttributeVector { values: v }
    }

    pub fn is_masked(&self, x: &AttributeVector, field: AttributeField) -> bool {
        x.values[self.mask_flag(field)] == 1.0
    }

    pub fn is_no_profile(&self, x: &AttributeVector) -> bool {
        x.values[self.no_profile_slot()] == 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub values: Vec<f64>,
}

impl AttributeVector {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::row_vector(self.values.clone())
    }
}

/// Replaces each attribute field by its mask encoding with probability `rate`.
/// No-op for no-profile vectors.
pub fn augment_mask_attributes(schema: &AttributeSchema, x: &AttributeVector, rate: f64, rng: &mut Rng) -> Result<AttributeVector> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Precondition(format!("attribute mask rate must lie in [0, 1), got {rate}")));
    }
    let mut out = x.clone();
    if schema.is_no_profile(x) {
        return Ok(out);
    }
    for field in AttributeField::ALL {
        // Always draw so the stream position does not depend on the outcome.
        let u: f64 = rng.random();
        if u < rate {
            for i in schema.range(field) {
                out.values[i] = 0.0;
            }
            out.values[schema.mask_flag(field)] = 1.0;
        }
    }
    Ok(out)
}

/// One slot of an encoder input sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    /// Row `i` of the generated prompt matrix.
    Prompt(usize),
    /// A token id in the item vocabulary.
    Item(usize),
    Mask,
}

/// Prompt slots followed by item slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSequence {
    pub slots: Vec<Slot>,
}

impl PromptSequence {
    pub fn new(prompt_count: usize, items: &[usize]) -> Self {
        let mut slots: Vec<Slot> = (0..prompt_count).map(Slot::Prompt).collect();
        slots.extend(items.iter().map(|&i| Slot::Item(i)));
        Self { slots }
    }

    pub fn items_only(items: &[usize]) -> Self {
        Self::new(0, items)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn prompt_count(&self) -> usize {
        self.slots.iter().filter(|s| matches!(s, Slot::Prompt(_))).count()
    }

    /// Keeps prompts and drops the oldest non-prompt slots beyond `max_len`.
    pub fn truncated(&self, max_len: usize) -> PromptSequence {
        if self.slots.len() <= max_len {
            return self.clone();
        }
        let prompts: Vec<Slot> = self.slots.iter().copied().filter(|s| matches!(s, Slot::Prompt(_))).collect();
        let rest: Vec<Slot> = self.slots.iter().copied().filter(|s| !matches!(s, Slot::Prompt(_))).collect();
        let keep = max_len.saturating_sub(prompts.len());
        let mut slots = prompts;
        slots.extend_from_slice(&rest[rest.len() - keep.min(rest.len())..]);
        slots.truncate(max_len);
        PromptSequence { slots }
    }
}

/// Replaces each item slot by [`Slot::Mask`] with probability `rate`; prompts are untouched.
pub fn augment_mask_herbs(seq: &PromptSequence, rate: f64, rng: &mut Rng) -> Result<PromptSequence> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Precondition(format!("item mask rate must lie in [0, 1], got {rate}")));
    }
    let slots = seq
        .slots
        .iter()
        .map(|&s| match s {
            Slot::Item(_) => {
                let u: f64 = rng.random();
                if u < rate {
                    Slot::Mask
                } else {
                    s
                }
            }
            other => other,
        })
        .collect();
    Ok(PromptSequence { slots })
}

/// Token ids shared by pre-training and fine-tuning sequences:
/// symptoms `0..n`, herbs `n..n+m`, then the mask token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpace {
    pub n_symptoms: usize,
    pub n_herbs: usize,
}

impl TokenSpace {
    pub fn from_vocab(v: &Vocabulary) -> Self {
        Self { n_symptoms: v.n_symptoms(), n_herbs: v.n_herbs() }
    }

    pub fn symptom(&self, s: usize) -> usize {
        s
    }

    pub fn herb(&self, h: usize) -> usize {
        self.n_symptoms + h
    }

    pub fn mask(&self) -> usize {
        self.n_symptoms + self.n_herbs
    }

    pub fn size(&self) -> usize {
        self.n_symptoms + self.n_herbs + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeppDims {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub prompt_tokens: usize,
    pub attribute_width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeppParams {
    pub dims: PeppDims,
    pub tokens: TokenSpace,
    pub token_table: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<BlockParams>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    /// Prompt generator, output `prompt_tokens * dim`.
    pub prompt_mlp: Mlp2,
    /// Attribute branch `U_a`.
    pub attribute_mlp: Mlp2,
}

impl PeppParams {
    pub fn new(store: &mut ParamStore, dims: PeppDims, tokens: TokenSpace, rng: &mut Rng) -> Self {
        assert!(dims.dim % dims.heads == 0, "dim must be divisible by heads");
        let m = "pepp";
        let d = dims.dim;
        let blocks = (0..dims.layers)
            .map(|l| BlockParams {
                ln1_gain: store.add(m, &format!("block{l}.ln1_gain"), Tensor::filled(1, d, 1.0)),
                ln1_bias: store.add_zeros(m, &format!("block{l}.ln1_bias"), 1, d),
                query: store.add_xavier(m, &format!("block{l}.query"), d, d, rng),
                key: store.add_xavier(m, &format!("block{l}.key"), d, d, rng),
                value: store.add_xavier(m, &format!("block{l}.value"), d, d, rng),
                output: store.add_xavier(m, &format!("block{l}.output"), d, d, rng),
                ln2_gain: store.add(m, &format!("block{l}.ln2_gain"), Tensor::filled(1, d, 1.0)),
                ln2_bias: store.add_zeros(m, &format!("block{l}.ln2_bias"), 1, d),
                ff1: Linear::new(store, m, &format!("block{l}.ff1"), d, d, true, rng),
                ff2: Linear::new(store, m, &format!("block{l}.ff2"), d, d, true, rng),
            })
            .collect();
        Self {
            dims,
            tokens,
            token_table: store.add_xavier(m, "token_table", tokens.size(), d, rng),
            positions: store.add_xavier(m, "positions", dims.max_len, d, rng),
            blocks,
            final_gain: store.add(m, "final_gain", Tensor::filled(1, d, 1.0)),
            final_bias: store.add_zeros(m, "final_bias", 1, d),
            prompt_mlp: Mlp2::new(store, m, "prompt_mlp", dims.attribute_width, d, dims.prompt_tokens * d, Activation::Sigmoid, rng),
            attribute_mlp: Mlp2::new(store, m, "attribute_mlp", dims.attribute_width, d, d, Activation::Sigmoid, rng),
        }
    }

    /// Herb rows of the token table (`m x d`).
    pub fn herb_rows(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let table = tape.param(store, self.token_table);
        tape.slice_rows(table, self.tokens.n_symptoms, self.tokens.n_herbs)
    }
}

fn layer_norm(tape: &mut Tape, store: &ParamStore, x: Var, gain: ParamId, bias: ParamId) -> Var {
    let y = tape.layer_norm_rows(x, LN_EPS);
    let g = tape.param(store, gain);
    let b = tape.param(store, bias);
    let y = tape.mul_row(y, g);
    tape.add_row(y, b)
}

fn causal_attention(tape: &mut Tape, store: &ParamStore, block: &BlockParams, x: Var, heads: usize) -> Var {
    let d = tape.shape(x).1;
    let dh = d / heads;
    let wq = tape.param(store, block.query);
    let wk = tape.param(store, block.key);
    let wv = tape.param(store, block.value);
    let q = tape.matmul(x, wq);
    let k = tape.matmul(x, wk);
    let v = tape.matmul(x, wv);
    let scale = 1.0 / (dh as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let s = tape.matmul_nt(qh, kh);
            let s = tape.scale(s, scale);
            let a = tape.causal_softmax_rows(s);
            tape.matmul(a, vh)
        })
        .collect();
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
    let wo = tape.param(store, block.output);
    tape.matmul(cat, wo)
}

/// Output of [`encode_sequence`].
pub struct Encoded {
    /// Top-layer hidden states, one row per slot.
    pub hidden: Var,
    /// Hidden state of the last slot.
    pub last: Var,
}

/// Embeds `seq` (prompts from `prompts`, items from the token table, learned
/// positions) and runs the causally masked pre-LN transformer stack.
pub fn encode_sequence(tape: &mut Tape, store: &ParamStore, params: &PeppParams, seq: &PromptSequence, prompts: Option<Var>) -> Result<Encoded> {
    if seq.is_empty() {
        return Err(Error::Precondition("cannot encode an empty sequence".into()));
    }
    let seq = if seq.len() > params.dims.max_len {
        log::warn!("sequence of length {} truncated to {}", seq.len(), params.dims.max_len);
        seq.truncated(params.dims.max_len)
    } else {
        seq.clone()
    };
    let table = tape.param(store, params.token_table);
    let mask = params.tokens.mask();
    let mut rows: Vec<Var> = Vec::new();
    let mut pending: Vec<usize> = Vec::new();
    let flush = |tape: &mut Tape, pending: &mut Vec<usize>, rows: &mut Vec<Var>| {
        if !pending.is_empty() {
            rows.push(tape.gather_rows(table, pending));
            pending.clear();
        }
    };
    for slot in &seq.slots {
        match *slot {
            Slot::Prompt(i) => {
                flush(tape, &mut pending, &mut rows);
                let p = prompts.ok_or_else(|| Error::Precondition("prompt slot without generated prompts".into()))?;
                rows.push(tape.slice_rows(p, i, 1));
            }
            Slot::Item(id) => {
                if id >= params.tokens.size() {
                    return Err(Error::Precondition(format!("token id {id} out of range")));
                }
                pending.push(id)
            }
            Slot::Mask => pending.push(mask),
        }
    }
    flush(tape, &mut pending, &mut rows);
    let x = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows) };
    let len = seq.len();
    let pos = tape.param(store, params.positions);
    let pos = tape.slice_rows(pos, 0, len);
    let mut h = tape.add(x, pos);
    for block in &params.blocks {
        let n1 = layer_norm(tape, store, h, block.ln1_gain, block.ln1_bias);
        let att = causal_attention(tape, store, block, n1, params.dims.heads);
        h = tape.add(h, att);
        let n2 = layer_norm(tape, store, h, block.ln2_gain, block.ln2_bias);
        let f = block.ff1.forward(tape, store, n2);
        let f = tape.relu(f);
        let f = block.ff2.forward(tape, store, f);
        h = tape.add(h, f);
    }
    let hidden = layer_norm(tape, store, h, params.final_gain, params.final_bias);
    let last = tape.slice_rows(hidden, len - 1, 1);
    Ok(Encoded { hidden, last })
}

/// `I = W2 σ(W1 x + b1) + b2`, reshaped to `prompt_tokens x d`.
pub fn prompt_generate(tape: &mut Tape, store: &ParamStore, params: &PeppParams, x_pf: &AttributeVector) -> Var {
    let x = tape.leaf(x_pf.to_tensor());
    prompt_generate_var(tape, store, params, x)
}

pub fn prompt_generate_var(tape: &mut Tape, store: &ParamStore, params: &PeppParams, x: Var) -> Var {
    let flat = params.prompt_mlp.forward(tape, store, x);
    tape.reshape(flat, params.dims.prompt_tokens, params.dims.dim)
}

#[derive(Clone, Copy, Debug)]
pub struct SymptomRepresentation {
    /// Sequence branch.
    pub sequence: Var,
    /// Attribute branch.
    pub attribute: Var,
    /// `sequence + attribute`.
    pub combined: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FuseBranches {
    pub sequence: bool,
    pub attribute: bool,
}

impl Default for FuseBranches {
    fn default() -> Self {
        Self { sequence: true, attribute: true }
    }
}

/// Prefixes `items` with attribute prompts, encodes, and adds the attribute branch.
/// A disabled branch contributes an exact zero vector.
pub fn fuse_symptom(tape: &mut Tape, store: &ParamStore, params: &PeppParams, items: &[usize], x_pf: &AttributeVector, branches: FuseBranches) -> Result<SymptomRepresentation> {
    let seq = PromptSequence::new(params.dims.prompt_tokens, items);
    fuse_symptom_seq(tape, store, params, &seq, x_pf, branches)
}

pub fn fuse_symptom_seq(
    tape: &mut Tape,
    store: &ParamStore,
    params: &PeppParams,
    seq: &PromptSequence,
    x_pf: &AttributeVector,
    branches: FuseBranches,
) -> Result<SymptomRepresentation> {
    let d = params.dims.dim;
    let x = tape.leaf(x_pf.to_tensor());
    let sequence = if branches.sequence {
        let prompts = prompt_generate_var(tape, store, params, x);
        encode_sequence(tape, store, params, seq, Some(prompts))?.last
    } else {
        tape.leaf(Tensor::zeros(1, d))
    };
    let attribute = if branches.attribute {
        params.attribute_mlp.forward(tape, store, x)
    } else {
        tape.leaf(Tensor::zeros(1, d))
    };
    let combined = tape.add(sequence, attribute);
    Ok(SymptomRepresentation { sequence, attribute, combined })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairwiseForm {
    /// `-mean log σ(u·h_i - u·h_j)`.
    #[default]
    LogSigmoid,
    /// `-Σ σ(u·h_i - u·h_j)` exactly as the sum of sigmoids.
    Literal,
}

/// Pairwise ranking loss of positives over negatives for one representation `u` (`1 x d`).
pub fn pairwise_prompt_loss(tape: &mut Tape, u: Var, herbs: Var, positives: &[usize], negatives: &[usize], form: PairwiseForm) -> Result<Var> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Precondition("pairwise loss needs non-empty positive and negative sets".into()));
    }
    let scores = tape.matmul_nt(herbs, u);
    let (pi, nj): (Vec<usize>, Vec<usize>) = positives.iter().flat_map(|&i| negatives.iter().map(move |&j| (i, j))).unzip();
    let sp = tape.gather_rows(scores, &pi);
    let sn = tape.gather_rows(scores, &nj);
    let diff = tape.sub(sp, sn);
    Ok(match form {
        PairwiseForm::LogSigmoid => {
            let l = tape.log_sigmoid(diff);
            let m = tape.mean_all(l);
            tape.neg(m)
        }
        PairwiseForm::Literal => {
            let s = tape.sigmoid(diff);
            let s = tape.sum_all(s);
            tape.neg(s)
        }
    })
}

/// Samples one herb absent from `record_herbs` per positive, uniformly.
pub fn sample_negatives(record_herbs: &[usize], n_herbs: usize, rng: &mut Rng) -> Vec<usize> {
    if record_herbs.len() >= n_herbs {
        return Vec::new();
    }
    (0..record_herbs.len())
        .map(|_| loop {
            let h = rng.random_range(0..n_herbs);
            if !record_herbs.contains(&h) {
                break h;
            }
        })
        .collect()
}

/// InfoNCE over cosine similarity with in-batch negatives; row `i` of
/// `anchors` and `views` form the positive pair. Mean over anchors.
pub fn contrastive_loss(tape: &mut Tape, anchors: Var, views: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Precondition(format!("temperature must be positive, got {temperature}")));
    }
    let (b, _) = tape.shape(anchors);
    if b == 0 || tape.shape(views) != tape.shape(anchors) {
        return Err(Error::Precondition("contrastive loss needs equally shaped non-empty batches".into()));
    }
    for v in [anchors, views] {
        let t = tape.value(v);
        if (0..t.rows()).any(|r| t.row(r).iter().all(|&x| x == 0.0)) {
            return Err(Error::Precondition("cosine similarity undefined for a zero vector".into()));
        }
    }
    let a = tape.l2_normalize_rows(anchors);
    let v = tape.l2_normalize_rows(views);
    let sim = tape.matmul_nt(a, v);
    let logits = tape.scale(sim, 1.0 / temperature);
    let logp = tape.log_softmax_rows(logits);
    let diag = tape.leaf(Tensor::identity(b));
    let picked = tape.mul(logp, diag);
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// Next-herb pre-training loss on `[symptoms…, herbs…]`: every position from
/// the last symptom onwards predicts the following herb by softmax over herb rows.
pub fn pretrain_loss(tape: &mut Tape, store: &ParamStore, params: &PeppParams, record: &PrescriptionRecord) -> Result<Var> {
    let ts = params.tokens;
    let max = params.dims.max_len;
    let mut herbs = record.herbs.clone();
    let mut symptoms: Vec<usize> = record.symptoms.clone();
    symptoms.sort_unstable();
    if symptoms.len() + herbs.len() > max {
        let keep_h = herbs.len().min(max / 2).max(1);
        herbs.truncate(keep_h);
        symptoms.truncate(max - keep_h);
    }
    let mut items: Vec<usize> = symptoms.iter().map(|&s| ts.symptom(s)).collect();
    items.extend(herbs.iter().map(|&h| ts.herb(h)));
    let seq = PromptSequence::items_only(&items);
    let enc = encode_sequence(tape, store, params, &seq, None)?;
    let start = symptoms.len() - 1;
    let count = herbs.len();
    let states = tape.slice_rows(enc.hidden, start, count);
    let herb_rows = params.herb_rows(tape, store);
    let logits = tape.matmul_nt(states, herb_rows);
    let logp = tape.log_softmax_rows(logits);
    let mut target = Tensor::zeros(count, ts.n_herbs);
    for (i, &h) in herbs.iter().enumerate() {
        target.set(i, h, 1.0);
    }
    let t = tape.leaf(target);
    let picked = tape.mul(logp, t);
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / count as f64))
}

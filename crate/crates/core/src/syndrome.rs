//! Implicit syndrome induction: multi-head scaled dot-product attention over
//! the patient's symptom rows, without positional information.

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Selected symptom rows and their sum.
#[derive(Clone, Copy, Debug)]
pub struct PatientSymptomInput {
    /// One row per active symptom, in index order.
    pub rows: Var,
    /// `pf_one-hot · E_s`.
    pub pooled: Var,
}

/// Selects the rows of `symptoms` (`n x d`) active in the multi-hot `indicator`.
pub fn patient_symptom_input(tape: &mut Tape, indicator: &[f64], symptoms: Var) -> Result<PatientSymptomInput> {
    let (n, _) = tape.shape(symptoms);
    if indicator.len() != n {
        return Err(Error::Precondition(format!("indicator length {} does not match {n} symptoms", indicator.len())));
    }
    let active: Vec<usize> = (0..n).filter(|&i| indicator[i] != 0.0).collect();
    if active.is_empty() {
        return Err(Error::Precondition("patient has no active symptom".into()));
    }
    let rows = tape.gather_rows(symptoms, &active);
    let weights = tape.leaf(crate::tensor::Tensor::col_vector(active.iter().map(|&i| indicator[i]).collect()));
    let weighted = tape.mul_col(rows, weights);
    let pooled = tape.sum_rows(weighted);
    Ok(PatientSymptomInput { rows, pooled })
}

/// Multi-hot indicator from symptom ids.
pub fn indicator(symptom_ids: &[usize], n_symptoms: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_symptoms];
    for &s in symptom_ids {
        v[s] = 1.0;
    }
    v
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyndromeParams {
    pub heads: Vec<HeadParams>,
    pub key_width: usize,
}

impl SyndromeParams {
    /// `heads` projections of width `dim / heads` each.
    pub fn new(store: &mut ParamStore, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "dim must be divisible by the head count");
        let w = dim / heads;
        let heads = (0..heads)
            .map(|h| HeadParams {
                query: store.add_xavier("syndrome", &format!("head{h}.query"), dim, w, rng),
                key: store.add_xavier("syndrome", &format!("head{h}.key"), dim, w, rng),
                value: store.add_xavier("syndrome", &format!("head{h}.value"), dim, w, rng),
            })
            .collect();
        Self { heads, key_width: w }
    }
}

pub struct SyndromeOutput {
    /// Per-position concatenated head outputs, `k x (N·d_head)`.
    pub per_position: Var,
    /// Mean over symptom positions, `1 x (N·d_head)`.
    pub m_syn: Var,
    /// Attention matrices, one `k x k` per head.
    pub attention: Vec<Var>,
}

pub fn syndrome_attend(tape: &mut Tape, store: &ParamStore, params: &SyndromeParams, rows: Var) -> SyndromeOutput {
    let scale = 1.0 / (params.key_width as f64).sqrt();
    let mut outputs = Vec::with_capacity(params.heads.len());
    let mut attention = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let wq = tape.param(store, head.query);
        let wk = tape.param(store, head.key);
        let wv = tape.param(store, head.value);
        let q = tape.matmul(rows, wq);
        let k = tape.matmul(rows, wk);
        let v = tape.matmul(rows, wv);
        let s = tape.matmul_nt(q, k);
        let s = tape.scale(s, scale);
        let a = tape.softmax_rows(s);
        outputs.push(tape.matmul(a, v));
        attention.push(a);
    }
    let per_position = if outputs.len() == 1 { outputs[0] } else { tape.concat_cols(&outputs) };
    let m_syn = tape.mean_rows(per_position);
    SyndromeOutput { per_position, m_syn, attention }
}

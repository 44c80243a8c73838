//! Randomised structural identities, usable from `proptest!` blocks and from
//! an explicit runner.

use std::collections::BTreeSet;

use herbrec::autograd::{ParamStore, Tape};
use herbrec::corpus::{Gender, PatientProfile};
use herbrec::dmsh;
use herbrec::hierarchy;
use herbrec::pepp::{self, AttributeSchema, FuseBranches, PeppDims, PeppParams, TokenSpace};
use herbrec::recommender::{self, LossComponents};
use herbrec::rng::rng_for;
use herbrec::tensor::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub const EXACT: f64 = 1e-9;

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn ensure(ok: bool, msg: String) -> Result<(), TestCaseError> {
    if ok {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg))
    }
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |v| Tensor::from_vec(rows, cols, v))
}

#[derive(Clone, Debug)]
pub struct FusionInput {
    pub seed: u64,
    pub gender: usize,
    pub age: f64,
    pub height: Option<f64>,
    pub items: Vec<usize>,
    pub no_profile: bool,
}

pub fn fusion_input() -> impl Strategy<Value = FusionInput> {
    (any::<u64>(), 0usize..3, 0.0f64..100.0, prop::option::of(120.0f64..200.0), prop::collection::vec(0usize..12, 1..6), any::<bool>())
        .prop_map(|(seed, gender, age, height, items, no_profile)| FusionInput { seed, gender, age, height, items, no_profile })
}

/// `U_s = U_s^I + U_a` for the returned vectors, to within [`EXACT`].
pub fn symptom_fusion(input: &FusionInput) -> Result<(), TestCaseError> {
    let schema = AttributeSchema { history_codes: vec!["a".into(), "b".into()] };
    let dims = PeppDims { dim: 4, layers: 1, heads: 2, max_len: 12, prompt_tokens: 2, attribute_width: schema.width() };
    let mut store = ParamStore::new();
    let params = PeppParams::new(&mut store, dims, TokenSpace { n_symptoms: 5, n_herbs: 6 }, &mut rng_for(input.seed, &[]));
    let gender = [Gender::Male, Gender::Female, Gender::Unknown][input.gender];
    let profile = PatientProfile::new(gender, input.age, input.height, None, BTreeSet::from(["b".to_string()]));
    let x = schema.encode((!input.no_profile).then_some(&profile));
    let mut tape = Tape::new();
    let u = pepp::fuse_symptom(&mut tape, &store, &params, &input.items, &x, FuseBranches::default()).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let want = tape.value(u.sequence).zip_map(tape.value(u.attribute), |a, b| a + b);
    let diff = max_abs_diff(tape.value(u.combined), &want);
    ensure(diff <= EXACT, format!("U_s - (U_s^I + U_a) = {diff:e}"))
}

pub fn composition_input() -> impl Strategy<Value = [Tensor; 5]> {
    [matrix(1, 5), matrix(1, 5), matrix(1, 5), matrix(5, 5), matrix(5, 5)]
}

/// The monarch row of the composition passes `M_c` through unchanged.
pub fn monarch_passthrough(input: &[Tensor; 5]) -> Result<(), TestCaseError> {
    let mut tape = Tape::new();
    let [c, d, ae, wc, wae] = input.clone().map(|t| tape.leaf(t));
    let levels = hierarchy::hierarchy_compose(&mut tape, c, d, ae, wc, wae);
    let diff = max_abs_diff(tape.value(levels[0]), &input[0]);
    ensure(diff <= EXACT, format!("M̂_c - M_c = {diff:e}"))
}

pub fn herb_repr_input() -> impl Strategy<Value = (Tensor, Tensor, Tensor, Tensor, f64, f64, f64)> {
    (matrix(3, 4), matrix(3, 4), matrix(3, 4), matrix(3, 4), 0.0f64..1.0, -3.0f64..3.0, -3.0f64..3.0)
}

/// `ê_h = x_0 + ω x_p`, and linearity in `(x_0, x_p)` at fixed ω.
pub fn herb_composition(input: &(Tensor, Tensor, Tensor, Tensor, f64, f64, f64)) -> Result<(), TestCaseError> {
    let (x0, xp, y0, yp, omega, a, b) = input.clone();
    let compose = |x0: &Tensor, xp: &Tensor| {
        let mut tape = Tape::new();
        let (u, v) = (tape.leaf(x0.clone()), tape.leaf(xp.clone()));
        let e = dmsh::compose_herb_repr(&mut tape, u, v, omega);
        tape.value(e).clone()
    };
    let e = compose(&x0, &xp);
    let want = x0.zip_map(&xp, |u, v| u + omega * v);
    let diff = max_abs_diff(&e, &want);
    ensure(diff <= EXACT, format!("ê_h - (x_0 + ω x_p) = {diff:e}"))?;
    let mix = |p: &Tensor, q: &Tensor| p.zip_map(q, |u, v| a * u + b * v);
    let lhs = compose(&mix(&x0, &y0), &mix(&xp, &yp));
    let rhs = mix(&e, &compose(&y0, &yp));
    let diff = max_abs_diff(&lhs, &rhs);
    ensure(diff <= EXACT * 100.0, format!("linearity residual {diff:e}"))
}

pub fn loss_input() -> impl Strategy<Value = (LossComponents, f64, f64)> {
    ([0.0f64..10.0, 0.0f64..10.0, 0.0f64..10.0, 0.0f64..10.0], prop_oneof![Just(0.0), 0.0f64..2.0], prop_oneof![Just(0.0), 0.0f64..2.0])
        .prop_map(|([p, b, c, d], l1, l2)| (LossComponents { prompt: p, bce: b, contrastive: c, diffusion: d }, l1, l2))
}

/// `L_result = L_p + L_BCE + λ1 L_cl + λ2 L_TCM_DM` in value and gradient;
/// a zero weight removes its component's gradient exactly.
pub fn loss_decomposition(input: &(LossComponents, f64, f64)) -> Result<(), TestCaseError> {
    let (c, l1, l2) = *input;
    let want = c.prompt + c.bce + l1 * c.contrastive + l2 * c.diffusion;
    let total = recommender::total_loss(&c, l1, l2).map_err(|e| TestCaseError::fail(e.to_string()))?;
    ensure((total - want).abs() <= EXACT, format!("total {total} vs {want}"))?;
    let mut tape = Tape::new();
    let vars = [c.prompt, c.bce, c.contrastive, c.diffusion].map(|v| tape.scalar(v));
    let root = recommender::total_loss_var(&mut tape, vars[0], vars[1], vars[2], vars[3], l1, l2);
    ensure((tape.value(root).item() - want).abs() <= EXACT, "tape value differs".into())?;
    let g = tape.backward(root);
    let grads = vars.map(|v| g.get_or_zeros(&tape, v).item());
    ensure(grads == [1.0, 1.0, l1, l2], format!("gradients {grads:?} for λ = ({l1}, {l2})"))
}

/// Runs `check` on `cases` draws of `strategy`.
pub fn run<S: Strategy>(cases: u32, strategy: S, check: impl Fn(&S::Value) -> Result<(), TestCaseError>) -> Result<u32, String> {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, |v| check(&v)).map(|_| cases).map_err(|e| e.to_string())
}

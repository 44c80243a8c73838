//! Random micro-instances of every differentiable path, each reduced to a
//! scalar and checked against central differences over all coordinates.

use std::collections::{BTreeMap, BTreeSet};

use herbrec::autograd::{xavier_uniform, ParamId, ParamStore, Tape, Var};
use herbrec::corpus::{CoOccurrenceGraph, Gender, KnowledgeGraph, PatientProfile, PrescriptionRecord};
use herbrec::dmsh::{self, Conditioner, DenoiserParams, DiffusionParam, TsaParams, VaeParams};
use herbrec::error::Result;
use herbrec::eval::{grad_check, GradCheckOptions, GradCheckReport};
use herbrec::hierarchy::{self, HierarchyParams, SoftAssignment};
use herbrec::kgprop::{self, GatEdges, GatParams, KgEdges, KgPropParams};
use herbrec::nn::Linear;
use herbrec::pepp::{self, AttributeSchema, PairwiseForm, PeppDims, PeppParams, PromptSequence, Slot, TokenSpace};
use herbrec::recommender;
use herbrec::rng::{rng_for, tag};
use herbrec::syndrome::{self, SyndromeParams};
use herbrec::tensor::Tensor;
use rand::Rng as _;

pub const TOLERANCE: f64 = 1e-4;

pub type Loss = Box<dyn Fn(&mut Tape, &ParamStore) -> Var + Send + Sync>;

pub struct GradCase {
    pub name: &'static str,
    pub store: ParamStore,
    pub loss: Loss,
}

impl GradCase {
    /// Every parameter is shifted off its initialisation first, so zero-initialised
    /// readouts and unit gains do not hide gradient paths.
    fn new(name: &'static str, mut store: ParamStore, loss: Loss) -> Self {
        let mut r = rng_for(tag(name), &[tag("jitter")]);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            for x in store.get_mut(id).data_mut() {
                *x += r.random_range(-0.25..0.25);
            }
        }
        Self { name, store, loss }
    }

    pub fn run(&self) -> Result<GradCheckReport> {
        let ids: Vec<ParamId> = self.store.ids().collect();
        let opts = GradCheckOptions { epsilon: 1e-5, ..GradCheckOptions::default() };
        grad_check(&self.store, &ids, |t, s| (self.loss)(t, s), &opts)
    }
}

fn random(rows: usize, cols: usize, seed: &str) -> Tensor {
    xavier_uniform(rows, cols, &mut rng_for(tag(seed), &[]))
}

fn input(store: &mut ParamStore, name: &str, rows: usize, cols: usize) -> ParamId {
    store.add("input", name, random(rows, cols, name))
}

/// A fixed random linear functional of `out`.
fn probe(tape: &mut Tape, out: Var, seed: &str) -> Var {
    let (r, c) = tape.shape(out);
    let w = tape.leaf(random(r, c, seed));
    let p = tape.mul(out, w);
    tape.sum_all(p)
}

fn sum(tape: &mut Tape, parts: &[Var]) -> Var {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p);
    }
    acc
}

const D: usize = 4;

fn pepp_setup() -> (ParamStore, PeppParams, AttributeSchema) {
    let schema = AttributeSchema { history_codes: vec!["asthma".into(), "gout".into()] };
    let dims = PeppDims { dim: D, layers: 2, heads: 2, max_len: 10, prompt_tokens: 2, attribute_width: schema.width() };
    let mut store = ParamStore::new();
    let params = PeppParams::new(&mut store, dims, TokenSpace { n_symptoms: 5, n_herbs: 6 }, &mut rng_for(11, &[]));
    (store, params, schema)
}

fn profile() -> PatientProfile {
    PatientProfile::new(Gender::Female, 47.0, Some(162.0), Some(58.0), BTreeSet::from(["gout".to_string()]))
}

pub fn pepp_cases() -> Vec<GradCase> {
    let mut out = Vec::new();

    let (store, p, _) = pepp_setup();
    let seq = PromptSequence { slots: vec![Slot::Item(0), Slot::Item(7), Slot::Mask, Slot::Item(3), Slot::Item(9)] };
    out.push(GradCase::new(
        "pepp.encode_sequence",
        store,
        Box::new(move |t, s| {
            let enc = pepp::encode_sequence(t, s, &p, &seq, None).unwrap();
            probe(t, enc.hidden, "encode")
        }),
    ));

    let (store, p, schema) = pepp_setup();
    let x = schema.encode(Some(&profile()));
    out.push(GradCase::new(
        "pepp.prompt_generate",
        store,
        Box::new(move |t, s| {
            let prompts = pepp::prompt_generate(t, s, &p, &x);
            probe(t, prompts, "prompts")
        }),
    ));

    let (store, p, schema) = pepp_setup();
    let x = schema.encode(Some(&profile()));
    out.push(GradCase::new(
        "pepp.fuse_symptom",
        store,
        Box::new(move |t, s| {
            let u = pepp::fuse_symptom(t, s, &p, &[1, 4, 2], &x, Default::default()).unwrap();
            let a = probe(t, u.combined, "fuse.u");
            let b = probe(t, u.sequence, "fuse.seq");
            sum(t, &[a, b])
        }),
    ));

    for (name, form) in [("pepp.pairwise_prompt_loss.log_sigmoid", PairwiseForm::LogSigmoid), ("pepp.pairwise_prompt_loss.literal", PairwiseForm::Literal)] {
        let mut store = ParamStore::new();
        let u = input(&mut store, "u", 1, D);
        let herbs = input(&mut store, "herbs", 6, D);
        out.push(GradCase::new(
            name,
            store,
            Box::new(move |t, s| {
                let (uv, hv) = (t.param(s, u), t.param(s, herbs));
                pepp::pairwise_prompt_loss(t, uv, hv, &[0, 2], &[3, 5], form).unwrap()
            }),
        ));
    }

    let mut store = ParamStore::new();
    let anchors = input(&mut store, "anchors", 3, D);
    let views = input(&mut store, "views", 3, D);
    out.push(GradCase::new(
        "pepp.contrastive_loss",
        store,
        Box::new(move |t, s| {
            let (a, v) = (t.param(s, anchors), t.param(s, views));
            pepp::contrastive_loss(t, a, v, 0.5).unwrap()
        }),
    ));

    let (store, p, _) = pepp_setup();
    let record = PrescriptionRecord { record_id: "r".into(), profile: None, symptoms: vec![0, 2], herbs: vec![1, 3, 4] };
    out.push(GradCase::new("pepp.pretrain_loss", store, Box::new(move |t, s| pepp::pretrain_loss(t, s, &p, &record).unwrap())));
    out
}

struct CondIds {
    herb: ParamId,
    knowledge: ParamId,
    symptom: ParamId,
}

impl CondIds {
    fn new(store: &mut ParamStore, rows: usize) -> Self {
        Self { herb: input(store, "cond.herb", rows, D), knowledge: input(store, "cond.knowledge", rows, D), symptom: input(store, "cond.symptom", rows, D) }
    }

    fn vars(&self, t: &mut Tape, s: &ParamStore) -> Conditioner {
        Conditioner { herb: t.param(s, self.herb), knowledge: t.param(s, self.knowledge), symptom: t.param(s, self.symptom) }
    }
}

pub fn dmsh_cases() -> Vec<GradCase> {
    let mut out = Vec::new();
    let schedule = dmsh::make_schedule(5, 0.02, 0.3).unwrap();
    let m = 5;

    let mut store = ParamStore::new();
    let den = DenoiserParams::new(&mut store, D, &mut rng_for(21, &[]));
    let cond = CondIds::new(&mut store, m);
    let (x0, noise) = (random(m, D, "x0"), random(m, D, "noise"));
    let sched = schedule.clone();
    out.push(GradCase::new(
        "dmsh.diffusion_loss",
        store,
        Box::new(move |t, s| {
            let c = cond.vars(t, s);
            dmsh::diffusion_loss(t, s, &den, &x0, &[1, 3, 5, 2, 4], &noise, &c, &sched).unwrap()
        }),
    ));

    for (name, param) in [("dmsh.denoise_mean.x0", DiffusionParam::X0), ("dmsh.denoise_mean.eps_literal", DiffusionParam::EpsLiteral)] {
        let mut store = ParamStore::new();
        let xt = input(&mut store, "x_t", m, D);
        let f = input(&mut store, "f", m, D);
        let sched = schedule.clone();
        out.push(GradCase::new(
            name,
            store,
            Box::new(move |t, s| {
                let (a, b) = (t.param(s, xt), t.param(s, f));
                let mu = dmsh::denoise_mean(t, a, b, 3, &sched, param).unwrap();
                probe(t, mu, "mean")
            }),
        ));
    }

    let mut store = ParamStore::new();
    let tsa = TsaParams::new(&mut store, D, &[D, 2], &mut rng_for(22, &[]));
    let xp = input(&mut store, "x_p", m, D);
    let cond = CondIds::new(&mut store, m);
    out.push(GradCase::new(
        "dmsh.tsa_refine",
        store,
        Box::new(move |t, s| {
            let c = cond.vars(t, s);
            let x = t.param(s, xp);
            let steps = t.leaf(dmsh::step_embedding_rows(&[3; 5], D));
            let ch = dmsh::tsa_refine(t, s, &tsa, x, c.knowledge, c.symptom, steps);
            let a = probe(t, ch.refined, "tsa.refined");
            let b = probe(t, ch.weights, "tsa.weights");
            sum(t, &[a, b])
        }),
    ));

    let mut store = ParamStore::new();
    let den = DenoiserParams::new(&mut store, D, &mut rng_for(23, &[]));
    let tsa = TsaParams::new(&mut store, D, &[D, 2], &mut rng_for(24, &[]));
    let xt = input(&mut store, "x_t", m, D);
    let cond = CondIds::new(&mut store, m);
    out.push(GradCase::new(
        "dmsh.predict_clean",
        store,
        Box::new(move |t, s| {
            let c = cond.vars(t, s);
            let x = t.param(s, xt);
            let f = dmsh::predict_clean(t, s, &den, Some(&tsa), x, &c, 4, false);
            probe(t, f, "clean")
        }),
    ));

    let mut store = ParamStore::new();
    let vae = VaeParams::new(&mut store, D, &mut rng_for(25, &[]));
    let cond = CondIds::new(&mut store, m);
    let (x0, eps) = (random(m, D, "vae.x0"), random(m, D, "vae.eps"));
    out.push(GradCase::new(
        "dmsh.vae_forward",
        store,
        Box::new(move |t, s| {
            let c = cond.vars(t, s);
            let o = dmsh::vae_forward(t, s, &vae, &x0, &c, Some(&eps));
            let r = probe(t, o.reconstruction, "vae.rec");
            sum(t, &[o.loss, r])
        }),
    ));

    let mut store = ParamStore::new();
    let ids = ["e_h", "g_h", "x_0", "x_p"].map(|n| input(&mut store, n, m, D));
    out.push(GradCase::new(
        "dmsh.fuse_and_compose",
        store,
        Box::new(move |t, s| {
            let [a, b, x0, xp] = ids.map(|id| t.param(s, id));
            let fused = dmsh::half_fuse(t, a, b);
            let e_hat = dmsh::compose_herb_repr(t, x0, xp, 0.7);
            let p = probe(t, fused, "fused");
            let q = probe(t, e_hat, "e_hat");
            sum(t, &[p, q])
        }),
    ));
    out
}

pub fn kg_cases() -> Vec<GradCase> {
    let mut out = Vec::new();
    let triples = [(0, 0, 1), (0, 1, 2), (1, 0, 3), (3, 1, 4), (2, 0, 0)];
    let edges = KgEdges::from_triples(5, 2, &triples, true);
    let mut store = ParamStore::new();
    let params = KgPropParams::new(&mut store, 5, KgEdges::relation_slots(2, true), D, 2, &mut rng_for(31, &[]));
    let kg = KnowledgeGraph { herb_anchor: BTreeMap::from([(0, 1), (1, 3), (2, 4)]), ..KnowledgeGraph::default() };
    out.push(GradCase::new(
        "kgprop.kg_propagate",
        store,
        Box::new(move |t, s| {
            let (e, r) = (t.param(s, params.entities), t.param(s, params.relations));
            let o = kgprop::kg_propagate(t, s, &params, &edges, e, r);
            let rows = kgprop::herb_knowledge_rows(t, s, &params, &o, &kg, 4);
            let a = probe(t, o.concat, "kg.concat");
            let b = probe(t, rows, "kg.rows");
            sum(t, &[a, b])
        }),
    ));

    let graph = CoOccurrenceGraph { node_count: 5, edges: vec![(0, 1, 2), (0, 4, 1), (1, 2, 1), (2, 3, 3)], threshold: 1 };
    let edges = GatEdges::from_graph(&graph);
    let mut store = ParamStore::new();
    let params = GatParams::new(&mut store, "gat", D, &mut rng_for(32, &[]));
    let table = input(&mut store, "table", 5, D);
    out.push(GradCase::new(
        "kgprop.gat_encode",
        store,
        Box::new(move |t, s| {
            let x = t.param(s, table);
            let o = kgprop::gat_encode(t, s, &params, &edges, x);
            probe(t, o, "gat")
        }),
    ));
    out
}

pub fn syndrome_cases() -> Vec<GradCase> {
    let mut store = ParamStore::new();
    let params = SyndromeParams::new(&mut store, D, 2, &mut rng_for(41, &[]));
    let table = input(&mut store, "symptoms", 6, D);
    let ind = syndrome::indicator(&[1, 3, 4], 6);
    vec![GradCase::new(
        "syndrome.attend",
        store,
        Box::new(move |t, s| {
            let e = t.param(s, table);
            let inp = syndrome::patient_symptom_input(t, &ind, e).unwrap();
            let o = syndrome::syndrome_attend(t, s, &params, inp.rows);
            let a = probe(t, o.m_syn, "syn.m");
            let b = probe(t, o.per_position, "syn.pos");
            let c = probe(t, inp.pooled, "syn.pooled");
            sum(t, &[a, b, c])
        }),
    )]
}

fn planted_assignment() -> SoftAssignment {
    let mut a = SoftAssignment::uniform(6);
    a.membership = Tensor::from_rows(&[
        vec![0.7, 0.2, 0.1],
        vec![0.5, 0.3, 0.2],
        vec![0.2, 0.6, 0.2],
        vec![0.1, 0.8, 0.1],
        vec![0.3, 0.1, 0.6],
        vec![0.2, 0.2, 0.6],
    ]);
    a
}

pub fn hierarchy_cases() -> Vec<GradCase> {
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let ml = input(&mut store, "m_level", 6, D);
    let es = input(&mut store, "e_s", 1, D);
    out.push(GradCase::new(
        "hierarchy.cdae",
        store,
        Box::new(move |t, s| {
            let (m, e) = (t.param(s, ml), t.param(s, es));
            let mut r = rng_for(51, &[]);
            let x = hierarchy::cdae_expand(t, m, e, 0.3, Some(&mut r));
            let q = hierarchy::cdae_squeeze(t, x);
            probe(t, q, "cdae")
        }),
    ));

    let mut store = ParamStore::new();
    let ids = [("m_c", 1), ("m_d", 1), ("m_ae", 1), ("w_c", D), ("w_ae", D)].map(|(n, r)| input(&mut store, n, r, D));
    out.push(GradCase::new(
        "hierarchy.compose",
        store,
        Box::new(move |t, s| {
            let [c, d, ae, wc, wae] = ids.map(|id| t.param(s, id));
            let levels = hierarchy::hierarchy_compose(t, c, d, ae, wc, wae);
            let parts: Vec<Var> = levels.iter().enumerate().map(|(k, &v)| probe(t, v, &format!("compose{k}"))).collect();
            sum(t, &parts)
        }),
    ));

    let mut store = ParamStore::new();
    let params = HierarchyParams::new(&mut store, 6, D, &mut rng_for(52, &[]));
    let herbs = input(&mut store, "herbs", 6, D);
    let es = input(&mut store, "e_s", 1, D);
    let assignment = planted_assignment();
    let graph = CoOccurrenceGraph { node_count: 6, edges: vec![(0, 1, 3), (1, 2, 1), (2, 3, 2), (4, 5, 1)], threshold: 1 };
    let graphs = hierarchy::level_graphs(&graph, &assignment);
    out.push(GradCase::new(
        "hierarchy.forward",
        store,
        Box::new(move |t, s| {
            let h = t.param(s, herbs);
            let ctx = hierarchy::level_context(t, s, &params, h, &graphs, &assignment);
            let e = t.param(s, es);
            let mut r = rng_for(53, &[]);
            let o = hierarchy::hierarchy_forward(t, s, &params, &ctx, &assignment, e, 0.2, Some(&mut r));
            let mut parts = vec![probe(t, o.total, "hier.total")];
            for k in 0..hierarchy::LEVELS {
                parts.push(probe(t, o.fused[k], &format!("hier.fused{k}")));
            }
            sum(t, &parts)
        }),
    ));
    out
}

pub fn recommender_cases() -> Vec<GradCase> {
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let w_syn = Linear::new(&mut store, "recommender", "w_syn", D, D, true, &mut rng_for(61, &[]));
    let m_syn = input(&mut store, "m_syn", 1, D);
    let herbs = input(&mut store, "e_hat", 6, D);
    out.push(GradCase::new(
        "recommender.syndrome_score",
        store,
        Box::new(move |t, s| {
            let (m, h) = (t.param(s, m_syn), t.param(s, herbs));
            let scores = recommender::syndrome_score(t, s, &w_syn, m, h);
            probe(t, scores, "m_pf")
        }),
    ));

    let mut store = ParamStore::new();
    let m_pf = input(&mut store, "m_pf", 1, 6);
    let levels = input(&mut store, "levels", 1, 6);
    out.push(GradCase::new(
        "recommender.recommend_bce",
        store,
        Box::new(move |t, s| {
            let (a, b) = (t.param(s, m_pf), t.param(s, levels));
            let y = recommender::recommend(t, a, Some(b), 0.6, 0.4);
            recommender::bce_loss(t, y, &[1, 4])
        }),
    ));

    let mut store = ParamStore::new();
    let ids = ["L_p", "L_BCE", "L_cl", "L_TCM_DM"].map(|n| input(&mut store, n, 1, 1));
    out.push(GradCase::new(
        "recommender.total_loss",
        store,
        Box::new(move |t, s| {
            // Squared components make the check non-trivially nonlinear.
            let [p, b, c, d] = ids.map(|id| {
                let v = t.param(s, id);
                t.mul(v, v)
            });
            recommender::total_loss_var(t, p, b, c, d, 0.3, 0.7)
        }),
    ));
    out
}

/// Every case, grouped by module in pipeline order.
pub fn all() -> Vec<GradCase> {
    let mut v = pepp_cases();
    v.extend(dmsh_cases());
    v.extend(kg_cases());
    v.extend(syndrome_cases());
    v.extend(hierarchy_cases());
    v.extend(recommender_cases());
    v
}

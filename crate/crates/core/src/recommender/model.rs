use serde::{Deserialize, Serialize};

use super::{bce_loss, recommend, syndrome_score, ModelConfig, Variant};
use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::corpus::{build_cooccurrence_graphs, CoOccurrenceGraph, KnowledgeGraph, PatientProfile, PrescriptionRecord, Vocabulary};
use crate::dmsh::{self, Conditioner, ConditionerValues, DenoiserParams, DiffusionSchedule, TsaParams, VaeParams};
use crate::error::Result;
use crate::hierarchy::{self, HierarchyParams, LevelContext, LevelGraph, SoftAssignment, LEVELS};
use crate::kgprop::{self, GatEdges, GatParams, KgEdges, KgPropParams};
use crate::nn::Linear;
use crate::pepp::{self, AttributeSchema, FuseBranches, PeppDims, PeppParams, PromptSequence, TokenSpace};
use crate::rng::Rng;
use crate::syndrome::{self, SyndromeParams};
use crate::tensor::Tensor;

/// Sizes that fix the parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_symptoms: usize,
    pub n_herbs: usize,
    pub kg_entities: usize,
    pub kg_relation_slots: usize,
    pub attribute_width: usize,
}

/// Parameter handles of every module. Building is deterministic given the
/// config, shape and RNG, so a saved store can be re-attached by name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub herb_embedding: ParamId,
    pub symptom_embedding: ParamId,
    pub kg: Option<KgPropParams>,
    pub herb_graph: GatParams,
    pub symptom_graph: GatParams,
    pub denoiser: DenoiserParams,
    pub tsa: TsaParams,
    pub vae: VaeParams,
    pub pepp: PeppParams,
    pub syndrome: SyndromeParams,
    pub w_syn: Linear,
    pub hierarchy: HierarchyParams,
}

impl ModelLayout {
    pub fn build(config: &ModelConfig, shape: &ModelShape, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let d = config.dim;
        let herb_embedding = store.add_xavier("embedding", "herbs", shape.n_herbs, d, rng);
        let symptom_embedding = store.add_xavier("embedding", "symptoms", shape.n_symptoms, d, rng);
        let kg = (shape.kg_entities > 0).then(|| KgPropParams::new(store, shape.kg_entities, shape.kg_relation_slots, d, config.kg_layers, rng));
        let herb_graph = GatParams::new(store, "herb_graph", d, rng);
        let symptom_graph = GatParams::new(store, "symptom_graph", d, rng);
        let denoiser = DenoiserParams::new(store, d, rng);
        let tsa = TsaParams::new(store, d, &config.conv_widths, rng);
        let vae = VaeParams::new(store, d, rng);
        let dims = PeppDims {
            dim: d,
            layers: config.encoder_layers,
            heads: config.encoder_heads,
            max_len: config.max_len,
            prompt_tokens: config.prompt_tokens,
            attribute_width: shape.attribute_width,
        };
        let tokens = TokenSpace { n_symptoms: shape.n_symptoms, n_herbs: shape.n_herbs };
        let pepp = PeppParams::new(store, dims, tokens, rng);
        let syndrome = SyndromeParams::new(store, d, config.syndrome_heads, rng);
        let w_syn = Linear::new(store, "syndrome", "w_syn", d, d, true, rng);
        let hierarchy = HierarchyParams::new(store, shape.n_herbs, d, rng);
        Self { herb_embedding, symptom_embedding, kg, herb_graph, symptom_graph, denoiser, tsa, vae, pepp, syndrome, w_syn, hierarchy }
    }
}

/// Structures derived once from the training records and the knowledge graph.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub herb_graph: CoOccurrenceGraph,
    pub symptom_graph: CoOccurrenceGraph,
    pub herb_edges: GatEdges,
    pub symptom_edges: GatEdges,
    pub kg: KnowledgeGraph,
    pub kg_edges: Option<KgEdges>,
    /// Row-normalised herb-symptom co-occurrence, `m x n`.
    pub herb_symptom: Tensor,
}

impl GraphContext {
    pub fn new(train: &[PrescriptionRecord], vocab: &Vocabulary, kg: &KnowledgeGraph, config: &ModelConfig) -> Result<Self> {
        let (symptom_graph, herb_graph) = build_cooccurrence_graphs(train, vocab, config.cooccurrence_threshold)?;
        let (m, n) = (vocab.n_herbs(), vocab.n_symptoms());
        let mut hs = Tensor::zeros(m, n);
        for r in train {
            for &h in &r.herbs {
                for &s in &r.symptoms {
                    hs.set(h, s, hs.get(h, s) + 1.0);
                }
            }
        }
        for h in 0..m {
            let total: f64 = hs.row(h).iter().sum();
            if total > 0.0 {
                hs.row_mut(h).iter_mut().for_each(|x| *x /= total);
            }
        }
        let kg_edges = (kg.entity_count() > 0).then(|| KgEdges::from_kg(kg, config.kg_inverse_edges));
        Ok(Self {
            herb_edges: GatEdges::from_graph(&herb_graph),
            symptom_edges: GatEdges::from_graph(&symptom_graph),
            herb_graph,
            symptom_graph,
            kg: kg.clone(),
            kg_edges,
            herb_symptom: hs,
        })
    }

    pub fn shape(&self, vocab: &Vocabulary, schema: &AttributeSchema, config: &ModelConfig) -> ModelShape {
        ModelShape {
            n_symptoms: vocab.n_symptoms(),
            n_herbs: vocab.n_herbs(),
            kg_entities: self.kg.entity_count(),
            kg_relation_slots: KgEdges::relation_slots(self.kg.relation_count(), config.kg_inverse_edges),
            attribute_width: schema.width(),
        }
    }
}

/// Parameters plus everything needed to run them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub shape: ModelShape,
    pub schema: AttributeSchema,
    pub schedule: DiffusionSchedule,
    pub store: ParamStore,
    pub layout: ModelLayout,
}

impl Model {
    pub fn new(config: ModelConfig, shape: ModelShape, schema: AttributeSchema) -> Result<Self> {
        config.validate()?;
        let schedule = dmsh::make_schedule(config.diffusion_steps, config.beta_start, config.beta_end)?;
        let mut store = ParamStore::new();
        let mut rng = crate::rng::rng_for(config.seed, &[crate::rng::tag("init")]);
        let layout = ModelLayout::build(&config, &shape, &mut store, &mut rng);
        Ok(Self { config, shape, schema, schedule, store, layout })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }
}

/// Values detached from the graph inside the global pass. Holding them fixed
/// turns the training objective into an ordinary function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Frozen {
    /// Clean herb embedding used as the reconstruction target.
    pub x0: Tensor,
    /// Reverse-process state entering the final step.
    pub x1: Tensor,
    /// Denoiser output on the final step.
    pub denoised: Tensor,
}

/// Global (record-independent) forward outputs.
pub struct GlobalPass {
    pub tape: Tape,
    /// Final herb representations `ê_h`, `m x d`.
    pub herbs: Var,
    /// Fused symptom table `E_s`, `n x d`.
    pub symptoms: Var,
    pub clustered: [Var; LEVELS],
    pub generative_loss: Var,
    pub frozen: Frozen,
}

/// Global outputs as plain values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalValues {
    pub herbs: Tensor,
    pub symptoms: Tensor,
    pub clustered: Vec<Tensor>,
}

impl GlobalPass {
    pub fn values(&self) -> GlobalValues {
        GlobalValues {
            herbs: self.tape.value(self.herbs).clone(),
            symptoms: self.tape.value(self.symptoms).clone(),
            clustered: self.clustered.iter().map(|&v| self.tape.value(v).clone()).collect(),
        }
    }
}

fn conditioner(tape: &mut Tape, model: &Model, ctx: &GraphContext) -> (Var, Var, Conditioner) {
    let (store, layout) = (&model.store, &model.layout);
    let e_h = tape.param(store, layout.herb_embedding);
    let e_s = tape.param(store, layout.symptom_embedding);
    let g_h = kgprop::gat_encode(tape, store, &layout.herb_graph, &ctx.herb_edges, e_h);
    let g_s = kgprop::gat_encode(tape, store, &layout.symptom_graph, &ctx.symptom_edges, e_s);
    let fused_h = dmsh::half_fuse(tape, e_h, g_h);
    let fused_s = dmsh::half_fuse(tape, e_s, g_s);
    let d = model.config.dim;
    let m = model.shape.n_herbs;
    let knowledge = match (&layout.kg, &ctx.kg_edges, model.variant()) {
        (Some(p), Some(edges), v) if v != Variant::NoIkg => {
            let ents = tape.param(store, p.entities);
            let rels = tape.param(store, p.relations);
            let out = kgprop::kg_propagate(tape, store, p, edges, ents, rels);
            kgprop::herb_knowledge_rows(tape, store, p, &out, &ctx.kg, m)
        }
        _ => tape.leaf(Tensor::zeros(m, d)),
    };
    let hs = tape.leaf(ctx.herb_symptom.clone());
    let symptom = tape.matmul(hs, fused_s);
    (e_h, fused_s, Conditioner { herb: fused_h, knowledge, symptom })
}

/// Runs the record-independent part of the model: graph encoders, knowledge
/// propagation, the generative herb refinement and the level encoders.
/// `frozen` pins the detached values; when absent they are computed here.
/// With `train`, the diffusion loss uses per-herb random steps.
pub fn global_forward(model: &Model, ctx: &GraphContext, assignment: &SoftAssignment, graphs: &[LevelGraph; LEVELS], frozen: Option<&Frozen>, rng: &mut Rng) -> Result<GlobalPass> {
    let cfg = &model.config;
    let (store, layout) = (&model.store, &model.layout);
    let mut tape = Tape::new();
    let (e_h, symptoms, cond) = conditioner(&mut tape, model, ctx);
    let (m, d) = (model.shape.n_herbs, cfg.dim);
    let x0 = frozen.map(|f| f.x0.clone()).unwrap_or_else(|| tape.value(e_h).clone());
    let (x_p, generative_loss, frozen) = if model.variant() == Variant::NoDmsh {
        let noise = dmsh::standard_normal(m, d, rng);
        let out = dmsh::vae_forward(&mut tape, store, &layout.vae, &x0, &cond, Some(&noise));
        let fz = Frozen { x0, x1: Tensor::zeros(0, 0), denoised: Tensor::zeros(0, 0) };
        (out.reconstruction, out.loss, fz)
    } else {
        use rand::Rng as _;
        let steps: Vec<usize> = (0..m).map(|_| rng.random_range(1..=model.schedule.steps)).collect();
        let noise = dmsh::standard_normal(m, d, rng);
        let loss = dmsh::diffusion_loss(&mut tape, store, &layout.denoiser, &x0, &steps, &noise, &cond, &model.schedule)?;
        let start_noise = dmsh::standard_normal(m, d, rng);
        let loop_seed: u64 = rng.random();
        let fz = match frozen {
            Some(f) => f.clone(),
            None => {
                let values = ConditionerValues::from_tape(&tape, &cond);
                let (x1, denoised) = reverse_to_last_step(model, &values, &x0, &start_noise, loop_seed)?;
                Frozen { x0: x0.clone(), x1, denoised }
            }
        };
        let x_p = final_step(&mut tape, model, &cond, &fz)?;
        (x_p, loss, fz)
    };
    let herbs = dmsh::compose_herb_repr(&mut tape, e_h, x_p, cfg.omega_h);
    let ctx_levels: LevelContext = hierarchy::level_context(&mut tape, store, &layout.hierarchy, herbs, graphs, assignment);
    Ok(GlobalPass { tape, herbs, symptoms, clustered: ctx_levels.clustered, generative_loss, frozen })
}

/// Runs the reverse process without gradients from `q(x_{T'} | x_0)` down to
/// step 1 and returns `x_1` with the denoiser output at step 1.
fn reverse_to_last_step(model: &Model, cond: &ConditionerValues, x0: &Tensor, start_noise: &Tensor, seed: u64) -> Result<(Tensor, Tensor)> {
    let cfg = &model.config;
    let t_start = cfg.reverse_start_step();
    let mut rng = crate::rng::rng_for(seed, &[]);
    let xt = dmsh::q_sample(x0, t_start, &model.schedule, start_noise)?;
    let x1 = if t_start > 1 {
        dmsh::p_sample_loop(&model.store, &model.layout.denoiser, Some(&model.layout.tsa), cond, &xt, t_start, 1, &model.schedule, cfg.diffusion_param, &mut rng)?
    } else {
        xt
    };
    let mut tape = Tape::new();
    let c = cond.leaves(&mut tape);
    let xv = tape.leaf(x1.clone());
    let steps = tape.leaf(dmsh::step_embedding_rows(&vec![1; x1.rows()], cfg.dim));
    let f = dmsh::denoiser_forward(&mut tape, &model.store, &model.layout.denoiser, xv, &c, steps);
    let denoised = tape.value(f).clone();
    Ok((x1, denoised))
}

/// Final reverse step on the tape; only the refinement and conditioners see gradients.
fn final_step(tape: &mut Tape, model: &Model, cond: &Conditioner, fz: &Frozen) -> Result<Var> {
    let cfg = &model.config;
    let f = tape.leaf(fz.denoised.clone());
    let x1 = tape.leaf(fz.x1.clone());
    let out = match cfg.diffusion_param {
        dmsh::DiffusionParam::X0 => {
            let steps = tape.leaf(dmsh::step_embedding_rows(&vec![1; fz.x1.rows()], cfg.dim));
            dmsh::tsa_refine(tape, &model.store, &model.layout.tsa, f, cond.knowledge, cond.symptom, steps).refined
        }
        dmsh::DiffusionParam::EpsLiteral => f,
    };
    dmsh::denoise_mean(tape, x1, out, 1, &model.schedule, cfg.diffusion_param)
}

/// Leaves holding the global outputs inside a per-record tape.
#[derive(Clone, Copy, Debug)]
pub struct GlobalLeaves {
    pub herbs: Var,
    pub symptoms: Var,
    pub clustered: [Var; LEVELS],
}

impl GlobalLeaves {
    pub fn attach(tape: &mut Tape, g: &GlobalValues) -> Self {
        Self {
            herbs: tape.leaf(g.herbs.clone()),
            symptoms: tape.leaf(g.symptoms.clone()),
            clustered: std::array::from_fn(|k| tape.leaf(g.clustered[k].clone())),
        }
    }
}

/// Per-record forward outputs.
pub struct RecordScores {
    /// Symptom representation `U_s`.
    pub u_s: Var,
    /// `ŷ`, `1 x m`.
    pub scores: Var,
}

fn symptom_items(model: &Model, symptoms: &[usize]) -> Vec<usize> {
    let ts = model.layout.pepp.tokens;
    symptoms.iter().map(|&s| ts.symptom(s)).collect()
}

/// `U_s` for a record; `attr`/`seq` override the clean inputs for augmented views.
fn symptom_repr(tape: &mut Tape, model: &Model, leaves: &GlobalLeaves, symptoms: &[usize], attr: &pepp::AttributeVector, seq: Option<&PromptSequence>) -> Result<Var> {
    if model.variant() == Variant::NoPepp {
        let rows = tape.gather_rows(leaves.symptoms, symptoms);
        return Ok(tape.mean_rows(rows));
    }
    let items = symptom_items(model, symptoms);
    let clean = PromptSequence::new(model.config.prompt_tokens, &items);
    let seq = seq.unwrap_or(&clean);
    Ok(pepp::fuse_symptom_seq(tape, &model.store, &model.layout.pepp, seq, attr, FuseBranches::default())?.combined)
}

/// Scores every herb for one patient. With `rng`, interaction dropout is active.
pub fn score_record(
    tape: &mut Tape,
    model: &Model,
    leaves: &GlobalLeaves,
    assignment: &SoftAssignment,
    profile: Option<&PatientProfile>,
    symptoms: &[usize],
    rng: Option<&mut Rng>,
) -> Result<RecordScores> {
    let cfg = &model.config;
    let (store, layout) = (&model.store, &model.layout);
    let attr = model.schema.encode(profile);
    let u_s = symptom_repr(tape, model, leaves, symptoms, &attr, None)?;
    let input = syndrome::patient_symptom_input(tape, &syndrome::indicator(symptoms, model.shape.n_symptoms), leaves.symptoms)?;
    let m_syn = if model.variant() == Variant::NoSyn {
        tape.mean_rows(input.rows)
    } else {
        syndrome::syndrome_attend(tape, store, &layout.syndrome, input.rows).m_syn
    };
    let query = tape.add(m_syn, u_s);
    let m_pf = syndrome_score(tape, store, &layout.w_syn, query, leaves.herbs);
    let levels = if model.variant() == Variant::NoHgsn {
        None
    } else {
        let ctx = LevelContext { clustered: leaves.clustered };
        Some(hierarchy::hierarchy_forward(tape, store, &layout.hierarchy, &ctx, assignment, u_s, cfg.dropout, rng).total)
    };
    let scores = recommend(tape, m_pf, levels, cfg.alpha, cfg.beta);
    Ok(RecordScores { u_s, scores })
}

/// One record's training pass.
pub struct RecordPass {
    pub tape: Tape,
    pub leaves: GlobalLeaves,
    /// `L_p + L_BCE` for this record.
    pub loss: Var,
    pub prompt: f64,
    pub bce: f64,
    /// Two augmented views of `U_s`, present when the prompt encoder is active.
    pub views: Option<(Var, Var)>,
}

pub fn record_forward(model: &Model, globals: &GlobalValues, assignment: &SoftAssignment, record: &PrescriptionRecord, rng: &mut Rng) -> Result<RecordPass> {
    let cfg = &model.config;
    let mut tape = Tape::new();
    let leaves = GlobalLeaves::attach(&mut tape, globals);
    let mut drop_rng = crate::rng::rng_for(rand::Rng::random(rng), &[]);
    let scored = score_record(&mut tape, model, &leaves, assignment, record.profile.as_ref(), &record.symptoms, Some(&mut drop_rng))?;
    let bce = bce_loss(&mut tape, scored.scores, &record.herbs);
    let (prompt, views) = if model.variant() == Variant::NoPepp {
        (tape.scalar(0.0), None)
    } else {
        let negatives = pepp::sample_negatives(&record.herbs, model.shape.n_herbs, rng);
        let lp = if negatives.is_empty() {
            tape.scalar(0.0)
        } else {
            pepp::pairwise_prompt_loss(&mut tape, scored.u_s, leaves.herbs, &record.herbs, &negatives, cfg.pairwise_form)?
        };
        let attr = model.schema.encode(record.profile.as_ref());
        let items = symptom_items(model, &record.symptoms);
        let clean = PromptSequence::new(cfg.prompt_tokens, &items);
        let mut view = |tape: &mut Tape| -> Result<Var> {
            let a = pepp::augment_mask_attributes(&model.schema, &attr, cfg.gamma1, rng)?;
            let s = pepp::augment_mask_herbs(&clean, cfg.gamma2, rng)?;
            symptom_repr(tape, model, &leaves, &record.symptoms, &a, Some(&s))
        };
        let v1 = view(&mut tape)?;
        let v2 = view(&mut tape)?;
        (lp, Some((v1, v2)))
    };
    let loss = tape.add(prompt, bce);
    let (p, b) = (tape.value(prompt).item(), tape.value(bce).item());
    Ok(RecordPass { tape, leaves, loss, prompt: p, bce: b, views })
}

/// Noise-free global pass used for inference: fixed start noise, no dropout.
pub fn inference_globals(model: &Model, ctx: &GraphContext, assignment: &SoftAssignment, graphs: &[LevelGraph; LEVELS]) -> Result<GlobalValues> {
    let mut rng = crate::rng::rng_for(model.config.seed, &[crate::rng::tag("inference")]);
    if model.variant() == Variant::NoDmsh {
        // Decode the posterior mean instead of a sample.
        let mut tape = Tape::new();
        let (e_h, symptoms, cond) = conditioner(&mut tape, model, ctx);
        let x0 = tape.value(e_h).clone();
        let out = dmsh::vae_forward(&mut tape, &model.store, &model.layout.vae, &x0, &cond, None);
        let herbs = dmsh::compose_herb_repr(&mut tape, e_h, out.reconstruction, model.config.omega_h);
        let lc = hierarchy::level_context(&mut tape, &model.store, &model.layout.hierarchy, herbs, graphs, assignment);
        return Ok(GlobalValues {
            herbs: tape.value(herbs).clone(),
            symptoms: tape.value(symptoms).clone(),
            clustered: lc.clustered.iter().map(|&v| tape.value(v).clone()).collect(),
        });
    }
    Ok(global_forward(model, ctx, assignment, graphs, None, &mut rng)?.values())
}

/// Herb points used for role clustering.
pub fn cluster_points(globals: Option<&GlobalValues>, model: &Model) -> Tensor {
    match globals {
        Some(g) => g.herbs.clone(),
        None => model.store.get(model.layout.herb_embedding).clone(),
    }
}

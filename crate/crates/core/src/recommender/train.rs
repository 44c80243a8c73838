use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::artifact::{rank_records, ModelArtifact};
use super::model::{Frozen, cluster_points, global_forward, inference_globals, record_forward, GlobalValues, GraphContext, Model, RecordPass};
use super::{total_loss, LossComponents, ModelConfig, Variant};
use crate::autograd::{ParamGrads, ParamStore, Tape};
use crate::corpus::{HierarchyLabels, KnowledgeGraph, PrescriptionRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{evaluate_rankings, DEFAULT_KS};
use crate::hierarchy::{self, LevelGraph, SoftAssignment, LEVELS};
use crate::pepp::{self, AttributeSchema};
use crate::rng::{derive, rng_for, tag};
use crate::tensor::Tensor;

/// Records per gradient-reduction chunk. Fixed so that the summation order
/// does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: ParamGrads,
    v: ParamGrads,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { learning_rate, beta1, beta2, epsilon, step: 0, m: store.zero_grads(), v: store.zero_grads() }
    }

    pub fn from_config(store: &ParamStore, c: &ModelConfig) -> Self {
        Self::new(store, c.learning_rate, c.adam_beta1, c.adam_beta2, c.adam_epsilon)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.get_mut(id).data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(id).data(), self.v.get(id).data());
            let w = store.get_mut(id).data_mut();
            for i in 0..w.len() {
                w[i] -= self.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Joint,
}

/// One JSON-lines log entry. Pre-training entries carry `L_pretrain` and
/// null objective terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    #[serde(rename = "L_p")]
    pub prompt: Option<f64>,
    #[serde(rename = "L_BCE")]
    pub bce: Option<f64>,
    #[serde(rename = "L_cl")]
    pub contrastive: Option<f64>,
    #[serde(rename = "L_TCM_DM")]
    pub diffusion: Option<f64>,
    #[serde(rename = "L_result")]
    pub result: Option<f64>,
    #[serde(rename = "L_pretrain", default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

/// Value and gradient of the joint objective on one batch.
pub struct BatchObjective {
    pub components: LossComponents,
    pub total: f64,
    pub grads: ParamGrads,
    pub frozen: Frozen,
    pub globals: GlobalValues,
}

fn add_tensor(slot: &mut Option<Tensor>, t: &Tensor) {
    match slot {
        Some(s) => s.add_assign(t),
        None => *slot = Some(t.clone()),
    }
}

struct Partial {
    grads: ParamGrads,
    herbs: Option<Tensor>,
    symptoms: Option<Tensor>,
    clustered: [Option<Tensor>; LEVELS],
}

/// Joint objective `L_p + L_BCE + λ1 L_cl + λ2 L_TCM_DM` on `batch` and its
/// gradient. All randomness derives from `seed`; `frozen` pins the detached
/// values so repeated calls evaluate the same function of the parameters.
pub fn batch_objective(
    model: &Model,
    ctx: &GraphContext,
    assignment: &SoftAssignment,
    graphs: &[LevelGraph; LEVELS],
    batch: &[&PrescriptionRecord],
    seed: u64,
    frozen: Option<&Frozen>,
) -> Result<BatchObjective> {
    let cfg = &model.config;
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let mut grng = rng_for(seed, &[tag("global")]);
    let global = global_forward(model, ctx, assignment, graphs, frozen, &mut grng)?;
    let globals = global.values();
    let b = batch.len();
    let passes: Vec<Result<RecordPass>> = cfg.exec.map(b, |i| {
        let mut r = rng_for(seed, &[tag("record"), i as u64]);
        record_forward(model, &globals, assignment, batch[i], &mut r)
    });
    let passes: Vec<RecordPass> = passes.into_iter().collect::<Result<_>>()?;

    // Contrastive term over the batch of augmented views.
    let mut view_grads: Option<(Tensor, Tensor)> = None;
    let mut contrastive = 0.0;
    if passes.iter().all(|p| p.views.is_some()) && model.variant() != Variant::NoPepp {
        let rows = |pick: fn(&(crate::autograd::Var, crate::autograd::Var)) -> crate::autograd::Var| {
            let r: Vec<Vec<f64>> = passes.iter().map(|p| p.tape.value(pick(p.views.as_ref().unwrap())).data().to_vec()).collect();
            Tensor::from_rows(&r)
        };
        let (u1, u2) = (rows(|v| v.0), rows(|v| v.1));
        let mut t = Tape::new();
        let a = t.leaf(u1);
        let v = t.leaf(u2);
        let l = pepp::contrastive_loss(&mut t, a, v, cfg.contrastive_temperature)?;
        contrastive = t.value(l).item();
        let g = t.backward(l);
        view_grads = Some((g.get_or_zeros(&t, a), g.get_or_zeros(&t, v)));
    }

    let inv_b = 1.0 / b as f64;
    let partials: Vec<Partial> = cfg.exec.map_chunks(b, GRAD_CHUNK, |range| {
        let mut part = Partial { grads: model.store.zero_grads(), herbs: None, symptoms: None, clustered: Default::default() };
        for i in range {
            let p = &passes[i];
            let mut seeds = vec![(p.loss, Tensor::scalar(inv_b))];
            if let (Some((v1, v2)), Some((g1, g2))) = (p.views, view_grads.as_ref()) {
                seeds.push((v1, Tensor::row_vector(g1.row(i).to_vec()).scaled(cfg.lambda1)));
                seeds.push((v2, Tensor::row_vector(g2.row(i).to_vec()).scaled(cfg.lambda1)));
            }
            let g = p.tape.backward_seeded(&seeds);
            g.accumulate_into(&p.tape, &mut part.grads);
            add_tensor(&mut part.herbs, &g.get_or_zeros(&p.tape, p.leaves.herbs));
            add_tensor(&mut part.symptoms, &g.get_or_zeros(&p.tape, p.leaves.symptoms));
            for k in 0..LEVELS {
                add_tensor(&mut part.clustered[k], &g.get_or_zeros(&p.tape, p.leaves.clustered[k]));
            }
        }
        part
    });
    let mut grads = model.store.zero_grads();
    let mut herbs: Option<Tensor> = None;
    let mut symptoms: Option<Tensor> = None;
    let mut clustered: [Option<Tensor>; LEVELS] = Default::default();
    for p in &partials {
        grads.add_assign(&p.grads);
        add_tensor(&mut herbs, p.herbs.as_ref().expect("non-empty chunk"));
        add_tensor(&mut symptoms, p.symptoms.as_ref().expect("non-empty chunk"));
        for k in 0..LEVELS {
            add_tensor(&mut clustered[k], p.clustered[k].as_ref().expect("non-empty chunk"));
        }
    }
    let gt = &global.tape;
    let mut seeds = vec![(global.herbs, herbs.expect("batch")), (global.symptoms, symptoms.expect("batch"))];
    for k in 0..LEVELS {
        seeds.push((global.clustered[k], clustered[k].take().expect("batch")));
    }
    seeds.push((global.generative_loss, Tensor::scalar(cfg.lambda2)));
    let g = gt.backward_seeded(&seeds);
    g.accumulate_into(gt, &mut grads);

    let components = LossComponents {
        prompt: passes.iter().map(|p| p.prompt).sum::<f64>() * inv_b,
        bce: passes.iter().map(|p| p.bce).sum::<f64>() * inv_b,
        contrastive,
        diffusion: gt.value(global.generative_loss).item(),
    };
    let total = total_loss(&components, cfg.lambda1, cfg.lambda2)?;
    Ok(BatchObjective { components, total, grads, frozen: global.frozen, globals })
}

fn pretrain_batch(model: &Model, batch: &[&PrescriptionRecord]) -> Result<(f64, ParamGrads)> {
    let inv_b = 1.0 / batch.len() as f64;
    let parts: Vec<Result<(f64, ParamGrads)>> = model.config.exec.map_chunks(batch.len(), GRAD_CHUNK, |range| {
        let mut grads = model.store.zero_grads();
        let mut loss = 0.0;
        for i in range {
            let mut t = Tape::new();
            let l = pepp::pretrain_loss(&mut t, &model.store, &model.layout.pepp, batch[i])?;
            loss += t.value(l).item();
            let g = t.backward_seeded(&[(l, Tensor::scalar(inv_b))]);
            g.accumulate_into(&t, &mut grads);
        }
        Ok((loss, grads))
    });
    let mut grads = model.store.zero_grads();
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss * inv_b, grads))
}

fn shuffled<'a>(records: &'a [PrescriptionRecord], seed: u64, parts: &[u64]) -> Vec<&'a PrescriptionRecord> {
    let mut v: Vec<&PrescriptionRecord> = records.iter().collect();
    v.shuffle(&mut rng_for(seed, parts));
    v
}

fn recluster(model: &Model, ctx: &GraphContext, labels: &HierarchyLabels, globals: Option<&GlobalValues>, epoch: u64) -> Result<(SoftAssignment, [LevelGraph; LEVELS])> {
    let points = cluster_points(globals, model);
    let mut r = rng_for(model.config.seed, &[tag("kmeans"), epoch]);
    let a = hierarchy::assign_roles(&points, labels, &model.config.kmeans(), &mut r)?;
    let g = hierarchy::level_graphs(&ctx.herb_graph, &a);
    Ok((a, g))
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Diverged { epoch, detail },
        other => other,
    }
}

/// Pre-trains the sequence encoder, then optimises the joint objective.
/// `on_epoch` sees every log entry as it is produced.
pub fn fit(
    train: &[PrescriptionRecord],
    vocab: &Vocabulary,
    kg: &KnowledgeGraph,
    labels: &HierarchyLabels,
    config: &ModelConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(ModelArtifact, Vec<EpochLog>)> {
    config.validate()?;
    let train: Vec<PrescriptionRecord> = train.iter().filter(|r| !r.symptoms.is_empty() && !r.herbs.is_empty()).cloned().collect();
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if labels.roles.len() != vocab.n_herbs() {
        return Err(Error::validation("recommender", "hierarchy labels do not cover the herb vocabulary"));
    }
    let schema = AttributeSchema::from_records(&train);
    let ctx = GraphContext::new(&train, vocab, kg, config)?;
    let shape = ctx.shape(vocab, &schema, config);
    let mut model = Model::new(config.clone(), shape, schema)?;
    let seed = config.seed;
    let bs = config.batch_size;
    let mut logs = Vec::new();

    if config.variant != Variant::NoPepp && config.pretrain_epochs > 0 {
        let mut adam = Adam::from_config(&model.store, config);
        for epoch in 0..config.pretrain_epochs {
            let order = shuffled(&train, seed, &[tag("pretrain"), epoch as u64]);
            let mut total = 0.0;
            for batch in order.chunks(bs) {
                let (loss, grads) = pretrain_batch(&model, batch)?;
                if !loss.is_finite() || !grads.all_finite() {
                    return Err(Error::Diverged { epoch, detail: "pre-training loss is not finite".into() });
                }
                adam.step(&mut model.store, &grads);
                total += loss * batch.len() as f64;
            }
            let log = EpochLog {
                phase: Phase::Pretrain,
                epoch,
                prompt: None,
                bce: None,
                contrastive: None,
                diffusion: None,
                result: None,
                pretrain: Some(total / train.len() as f64),
                metrics: BTreeMap::new(),
            };
            log::info!("pretrain epoch {epoch}: {:.6}", log.pretrain.unwrap_or(f64::NAN));
            on_epoch(&log);
            logs.push(log);
        }
    }

    let mut adam = Adam::from_config(&model.store, config);
    let mut last_globals: Option<GlobalValues> = None;
    for epoch in 0..config.epochs {
        let (assignment, graphs) = recluster(&model, &ctx, labels, last_globals.as_ref(), epoch as u64)?;
        let order = shuffled(&train, seed, &[tag("joint"), epoch as u64]);
        let mut sums = LossComponents::default();
        for (bi, batch) in order.chunks(bs).enumerate() {
            let bseed = derive(seed, &[tag("batch"), epoch as u64, bi as u64]);
            let obj = batch_objective(&model, &ctx, &assignment, &graphs, batch, bseed, None).map_err(|e| diverged(epoch, e))?;
            if !obj.grads.all_finite() {
                return Err(Error::Diverged { epoch, detail: "non-finite gradient".into() });
            }
            adam.step(&mut model.store, &obj.grads);
            let w = batch.len() as f64;
            sums.prompt += obj.components.prompt * w;
            sums.bce += obj.components.bce * w;
            sums.contrastive += obj.components.contrastive * w;
            sums.diffusion += obj.components.diffusion * w;
            last_globals = Some(obj.globals);
        }
        let n = train.len() as f64;
        let c = LossComponents { prompt: sums.prompt / n, bce: sums.bce / n, contrastive: sums.contrastive / n, diffusion: sums.diffusion / n };
        let result = total_loss(&c, config.lambda1, config.lambda2).map_err(|e| diverged(epoch, e))?;
        let mut metrics = BTreeMap::new();
        if config.snapshot_every > 0 && (epoch + 1) % config.snapshot_every == 0 {
            let globals = inference_globals(&model, &ctx, &assignment, &graphs)?;
            let ranked = rank_records(&model, &globals, &assignment, &train, *DEFAULT_KS.iter().max().expect("ks"))?;
            let truths: Vec<_> = train.iter().map(|r| r.herbs.iter().copied().collect()).collect();
            let report = evaluate_rankings(&ranked, &truths, &DEFAULT_KS, None, config.exec)?;
            for m in &report.at {
                metrics.insert(format!("train_P@{}", m.k), m.precision);
                metrics.insert(format!("train_R@{}", m.k), m.recall);
                metrics.insert(format!("train_N@{}", m.k), m.ndcg);
            }
        }
        let log = EpochLog {
            phase: Phase::Joint,
            epoch,
            prompt: Some(c.prompt),
            bce: Some(c.bce),
            contrastive: Some(c.contrastive),
            diffusion: Some(c.diffusion),
            result: Some(result),
            pretrain: None,
            metrics,
        };
        log::info!("epoch {epoch}: L_result {result:.6}");
        on_epoch(&log);
        logs.push(log);
    }

    let (assignment, graphs) = recluster(&model, &ctx, labels, last_globals.as_ref(), config.epochs as u64)?;
    let globals = inference_globals(&model, &ctx, &assignment, &graphs)?;
    let artifact = ModelArtifact { model, vocab: vocab.clone(), labels: labels.clone(), assignment, globals };
    Ok((artifact, logs))
}

//! Knowledge-graph attentive propagation and graph attention over the
//! symptom-symptom / herb-herb co-occurrence graphs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax, ParamId, ParamStore, Tape, Var};
use crate::corpus::{CoOccurrenceGraph, KnowledgeGraph};
use crate::error::{Error, Result};
use crate::nn::{Linear, LEAKY_SLOPE};
use crate::tensor::{dot, Tensor};

/// Attention weights of one head entity over its neighbour tails.
///
/// Scores are `(W e_h + e_r) · (W e_t)`, normalised by softmax.
pub fn kg_attention_weights(head: &[f64], relation: &[f64], tails: &[Vec<f64>], w: &Tensor) -> Result<Vec<f64>> {
    if tails.is_empty() {
        return Err(Error::Precondition("attention over an empty neighbourhood".into()));
    }
    let apply = |v: &[f64]| -> Vec<f64> { (0..w.rows()).map(|r| dot(w.row(r), v)).collect() };
    let query: Vec<f64> = apply(head).iter().zip(relation).map(|(a, b)| a + b).collect();
    let scores: Vec<f64> = tails.iter().map(|t| dot(&query, &apply(t))).collect();
    Ok(softmax(&scores))
}

/// Flattened triple list ready for gather/scatter propagation.
#[derive(Clone, Debug, PartialEq)]
pub struct KgEdges {
    pub entity_count: usize,
    pub heads: Vec<usize>,
    pub relations: Vec<usize>,
    pub tails: Vec<usize>,
    /// `1.0` for entities with at least one outgoing edge.
    pub has_neighbors: Vec<f64>,
}

impl KgEdges {
    /// With `add_inverse`, every `(h, r, t)` also yields `(t, r + R, h)`.
    pub fn from_kg(kg: &KnowledgeGraph, add_inverse: bool) -> Self {
        Self::from_triples(kg.entity_count(), kg.relation_count(), &kg.triples, add_inverse)
    }

    pub fn from_triples(entity_count: usize, relation_count: usize, triples: &[(usize, usize, usize)], add_inverse: bool) -> Self {
        let mut heads = Vec::new();
        let mut relations = Vec::new();
        let mut tails = Vec::new();
        for &(h, r, t) in triples {
            heads.push(h);
            relations.push(r);
            tails.push(t);
            if add_inverse {
                heads.push(t);
                relations.push(r + relation_count);
                tails.push(h);
            }
        }
        let mut has_neighbors = vec![0.0; entity_count];
        for &h in &heads {
            has_neighbors[h] = 1.0;
        }
        Self { entity_count, heads, relations, tails, has_neighbors }
    }

    pub fn relation_slots(relation_count: usize, add_inverse: bool) -> usize {
        if add_inverse {
            2 * relation_count
        } else {
            relation_count
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgLayerParams {
    /// Attention transform `W` in `(W e_h + e_r) · (W e_t)`; applied as `W e`.
    pub attention: ParamId,
    /// Shared transform of both aggregation branches.
    pub transform: ParamId,
    pub gate_sum: ParamId,
    pub gate_product: ParamId,
    pub bias_sum: ParamId,
    pub bias_product: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgPropParams {
    pub entities: ParamId,
    pub relations: ParamId,
    pub layers: Vec<KgLayerParams>,
    /// Maps the `d (K + 1)` concatenation back to width `d`.
    pub projection: Linear,
}

impl KgPropParams {
    pub fn new(store: &mut ParamStore, entity_count: usize, relation_slots: usize, dim: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let module = "kgprop";
        let entities = store.add_xavier(module, "entities", entity_count.max(1), dim, rng);
        let relations = store.add_xavier(module, "relations", relation_slots.max(1), dim, rng);
        let layers = (0..layers)
            .map(|k| KgLayerParams {
                attention: store.add_xavier(module, &format!("layer{k}.attention"), dim, dim, rng),
                transform: store.add_xavier(module, &format!("layer{k}.transform"), dim, dim, rng),
                gate_sum: store.add(module, &format!("layer{k}.gate_sum"), Tensor::filled(1, dim, 1.0)),
                gate_product: store.add(module, &format!("layer{k}.gate_product"), Tensor::filled(1, dim, 1.0)),
                bias_sum: store.add_zeros(module, &format!("layer{k}.bias_sum"), 1, dim),
                bias_product: store.add_zeros(module, &format!("layer{k}.bias_product"), 1, dim),
            })
            .collect::<Vec<_>>();
        let projection = Linear::new(store, module, "projection", dim * (layers.len() + 1), dim, false, rng);
        Self { entities, relations, layers, projection }
    }
}

#[derive(Clone, Debug)]
pub struct KgPropagationOutput {
    /// `E^(0) … E^(K)`.
    pub layers: Vec<Var>,
    /// Layer-ascending concatenation, width `d (K + 1)`.
    pub concat: Var,
}

fn propagate_layer(tape: &mut Tape, store: &ParamStore, layer: &KgLayerParams, edges: &KgEdges, e: Var, rel: Var) -> Var {
    let (n, d) = tape.shape(e);
    let neighborhood = if edges.heads.is_empty() {
        tape.leaf(Tensor::zeros(n, d))
    } else {
        let w = tape.param(store, layer.attention);
        let projected = tape.matmul_nt(e, w);
        let ph = tape.gather_rows(projected, &edges.heads);
        let pr = tape.gather_rows(rel, &edges.relations);
        let query = tape.add(ph, pr);
        let key = tape.gather_rows(projected, &edges.tails);
        let prod = tape.mul(query, key);
        let scores = tape.sum_cols(prod);
        let weights = tape.segment_softmax(scores, &edges.heads);
        let tails = tape.gather_rows(e, &edges.tails);
        let msgs = tape.mul_col(tails, weights);
        tape.scatter_add_rows(msgs, &edges.heads, n)
    };
    let w3 = tape.param(store, layer.transform);
    let a1 = tape.param(store, layer.gate_sum);
    let a2 = tape.param(store, layer.gate_product);
    let a3 = tape.param(store, layer.bias_sum);
    let a4 = tape.param(store, layer.bias_product);

    let s = tape.add(e, neighborhood);
    let s = tape.matmul(s, w3);
    let s = tape.mul_row(s, a1);
    let s = tape.add_row(s, a3);
    let sum_branch = tape.leaky_relu(s, LEAKY_SLOPE);

    let p = tape.mul(e, neighborhood);
    let p = tape.matmul(p, w3);
    let p = tape.mul_row(p, a2);
    let p = tape.add_row(p, a4);
    let p = tape.leaky_relu(p, LEAKY_SLOPE);
    let mask = tape.leaf(Tensor::col_vector(edges.has_neighbors.clone()));
    let product_branch = tape.mul_col(p, mask);

    tape.add(sum_branch, product_branch)
}

/// Runs `K = params.layers.len()` propagation layers from `entities`.
pub fn kg_propagate(tape: &mut Tape, store: &ParamStore, params: &KgPropParams, edges: &KgEdges, entities: Var, relations: Var) -> KgPropagationOutput {
    let mut layers = vec![entities];
    for layer in &params.layers {
        let prev = *layers.last().expect("non-empty");
        layers.push(propagate_layer(tape, store, layer, edges, prev, relations));
    }
    let concat = if layers.len() == 1 { layers[0] } else { tape.concat_cols(&layers) };
    KgPropagationOutput { layers, concat }
}

/// Projected per-herb knowledge rows (`m x d`); herbs without an anchor get zeros.
pub fn herb_knowledge_rows(tape: &mut Tape, store: &ParamStore, params: &KgPropParams, out: &KgPropagationOutput, kg: &KnowledgeGraph, n_herbs: usize) -> Var {
    let projected = params.projection.forward(tape, store, out.concat);
    let d = tape.shape(projected).1;
    if kg.herb_anchor.is_empty() {
        return tape.leaf(Tensor::zeros(n_herbs, d));
    }
    // Row `entity_count` of the padded table is all zeros.
    let pad = tape.leaf(Tensor::zeros(1, d));
    let padded = tape.concat_rows(&[projected, pad]);
    let zero_row = tape.shape(projected).0;
    let idx: Vec<usize> = (0..n_herbs).map(|h| kg.herb_anchor.get(&h).copied().unwrap_or(zero_row)).collect();
    tape.gather_rows(padded, &idx)
}

/// Directed edges with self-loops, grouped by destination.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatEdges {
    pub node_count: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl GatEdges {
    pub fn from_graph(graph: &CoOccurrenceGraph) -> Self {
        let mut pairs: Vec<(usize, usize)> = (0..graph.node_count).map(|i| (i, i)).collect();
        pairs.extend(graph.directed_edges().into_iter().map(|(a, b)| (b, a)));
        pairs.sort_unstable_by_key(|&(dst, src)| (dst, src));
        Self { node_count: graph.node_count, src: pairs.iter().map(|p| p.1).collect(), dst: pairs.iter().map(|p| p.0).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatParams {
    /// `d x d`, applied as `X W`.
    pub transform: ParamId,
    pub att_src: ParamId,
    pub att_dst: ParamId,
}

impl GatParams {
    pub fn new(store: &mut ParamStore, module: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            transform: store.add_xavier(module, "gat.transform", dim, dim, rng),
            att_src: store.add_xavier(module, "gat.att_src", 1, dim, rng),
            att_dst: store.add_xavier(module, "gat.att_dst", 1, dim, rng),
        }
    }
}

/// Single-head, single-layer additive graph attention with self-loops.
///
/// `out_i = Σ_j α_ij z_j`, `z = X W`, `α_ij = softmax_j LeakyReLU(a_dst·z_i + a_src·z_j)`.
pub fn gat_encode(tape: &mut Tape, store: &ParamStore, params: &GatParams, edges: &GatEdges, table: Var) -> Var {
    let n = tape.shape(table).0;
    assert_eq!(n, edges.node_count, "graph node count must equal table rows");
    let w = tape.param(store, params.transform);
    let z = tape.matmul(table, w);
    let a_src = tape.param(store, params.att_src);
    let a_dst = tape.param(store, params.att_dst);
    let zs = tape.mul_row(z, a_src);
    let zs = tape.sum_cols(zs);
    let zd = tape.mul_row(z, a_dst);
    let zd = tape.sum_cols(zd);
    let es = tape.gather_rows(zs, &edges.src);
    let ed = tape.gather_rows(zd, &edges.dst);
    let e = tape.add(es, ed);
    let e = tape.leaky_relu(e, LEAKY_SLOPE);
    let alpha = tape.segment_softmax(e, &edges.dst);
    let zj = tape.gather_rows(z, &edges.src);
    let msgs = tape.mul_col(zj, alpha);
    tape.scatter_add_rows(msgs, &edges.dst, n)
}

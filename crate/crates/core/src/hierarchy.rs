//! Herb hierarchy: interaction encoders over level vectors, the
//! monarch → minister → assistant composition, soft k-means role assignment,
//! per-level graph encoders and the fused per-level herb scores.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::corpus::{CoOccurrenceGraph, HierarchyLabels, Role};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LEVELS: usize = 3;

/// `Dropout(M ∘ e_s)` with inverted scaling; `rate == 0` or `rng == None` is a pass-through.
/// `e_s` is a `1 x d` row broadcast over the rows of `m_level`.
pub fn cdae_expand(tape: &mut Tape, m_level: Var, e_s: Var, rate: f64, rng: Option<&mut Rng>) -> Var {
    let prod = tape.mul_row(m_level, e_s);
    match rng {
        Some(rng) if rate > 0.0 => {
            let (r, c) = tape.shape(prod);
            let keep = 1.0 / (1.0 - rate);
            let mask = Tensor::from_vec(r, c, (0..r * c).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect());
            let mask = tape.leaf(mask);
            tape.mul(prod, mask)
        }
        _ => prod,
    }
}

/// `Norm(SumPool(M_exp))`: row sum, then L2 normalisation with a zero guard.
pub fn cdae_squeeze(tape: &mut Tape, m_exp: Var) -> Var {
    let s = tape.sum_rows(m_exp);
    tape.l2_normalize_rows(s)
}

/// `(M_c, W_c M_c + M_d, W_ae(M̂_c + M̂_d) + M_ae)` on row vectors (`x W`).
pub fn hierarchy_compose(tape: &mut Tape, m_c: Var, m_d: Var, m_ae: Var, w_c: Var, w_ae: Var) -> [Var; 3] {
    let cd = tape.matmul(m_c, w_c);
    let d_hat = tape.add(cd, m_d);
    let upstream = tape.add(m_c, d_hat);
    let up = tape.matmul(upstream, w_ae);
    let ae_hat = tape.add(up, m_ae);
    [m_c, d_hat, ae_hat]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iter: usize,
    pub tolerance: f64,
    pub temperature: TemperatureRule,
}

/// How the soft k-means temperature is chosen from the initial centroids.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureRule {
    /// Mean squared distance from each point to its nearest initial centroid.
    #[default]
    WithinSpread,
    /// Mean squared pairwise distance between the initial centroids. On
    /// well-separated data this exceeds the collapse temperature and all
    /// centroids merge.
    CentroidSpread,
    Fixed(f64),
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { max_iter: 50, tolerance: 1e-5, temperature: TemperatureRule::WithinSpread }
    }
}

/// Memberships over (monarch, minister, assistant/envoy).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftAssignment {
    /// `herbs x 3`, rows sum to one.
    pub membership: Tensor,
    pub centroids: Tensor,
    pub temperature: f64,
    pub iterations: usize,
    /// Largest row-sum deviation from one seen at any iteration.
    pub max_row_sum_error: f64,
    /// Entropy-regularised objective after each iteration.
    pub free_energy: Vec<f64>,
    /// Membership-weighted squared distance after each iteration.
    pub weighted_distance: Vec<f64>,
    pub seeded_from_labels: bool,
}

impl SoftAssignment {
    pub fn hard(&self) -> Vec<usize> {
        (0..self.membership.rows()).map(|i| argmax(self.membership.row(i))).collect()
    }

    pub fn column(&self, level: usize) -> Tensor {
        Tensor::col_vector((0..self.membership.rows()).map(|i| self.membership.get(i, level)).collect())
    }

    /// Uniform membership, used before any clustering has run.
    pub fn uniform(herbs: usize) -> Self {
        Self {
            membership: Tensor::filled(herbs, LEVELS, 1.0 / LEVELS as f64),
            centroids: Tensor::zeros(LEVELS, 0),
            temperature: 1.0,
            iterations: 0,
            max_row_sum_error: 0.0,
            free_energy: Vec::new(),
            weighted_distance: Vec::new(),
            seeded_from_labels: false,
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean embedding of the labelled herbs of each role, or `None` if a role has none.
pub fn role_seeds(points: &Tensor, labels: &HierarchyLabels) -> Option<Tensor> {
    let d = points.cols();
    let mut sums = Tensor::zeros(LEVELS, d);
    let mut counts = [0usize; LEVELS];
    for h in (0..points.rows()).filter(|&h| labels.labeled[h]) {
        let k = labels.role(h).index();
        counts[k] += 1;
        for c in 0..d {
            sums.set(k, c, sums.get(k, c) + points.get(h, c));
        }
    }
    if counts.contains(&0) {
        return None;
    }
    for (k, &n) in counts.iter().enumerate() {
        for c in 0..d {
            sums.set(k, c, sums.get(k, c) / n as f64);
        }
    }
    Some(sums)
}

fn kmeans_pp(points: &Tensor, rng: &mut Rng) -> Tensor {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    while chosen.len() < LEVELS {
        let d: Vec<f64> = (0..n).map(|i| chosen.iter().map(|&c| sq_dist(points.row(i), points.row(c))).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        };
        chosen.push(next);
    }
    Tensor::from_rows(&chosen.iter().map(|&c| points.row(c).to_vec()).collect::<Vec<_>>())
}

fn memberships(points: &Tensor, centroids: &Tensor, temperature: f64) -> Tensor {
    let n = points.rows();
    let mut m = Tensor::zeros(n, LEVELS);
    for i in 0..n {
        let logits: Vec<f64> = (0..LEVELS).map(|k| -sq_dist(points.row(i), centroids.row(k)) / temperature).collect();
        let p = crate::autograd::softmax(&logits);
        m.row_mut(i).copy_from_slice(&p);
    }
    m
}

fn objectives(points: &Tensor, centroids: &Tensor, m: &Tensor, temperature: f64) -> (f64, f64) {
    let mut wd = 0.0;
    let mut ent = 0.0;
    for i in 0..points.rows() {
        for k in 0..LEVELS {
            let r = m.get(i, k);
            wd += r * sq_dist(points.row(i), centroids.row(k));
            if r > 0.0 {
                ent += r * r.ln();
            }
        }
    }
    (wd, wd + temperature * ent)
}

/// Soft k-means with three centroids seeded from labelled role means.
/// The temperature is fixed once from the initial centroids (see [`TemperatureRule`]).
pub fn soft_kmeans_assign(points: &Tensor, seeds: Option<Tensor>, opts: &KMeansOptions, rng: &mut Rng) -> Result<SoftAssignment> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::Precondition("soft k-means needs at least one point".into()));
    }
    let seeded_from_labels = seeds.is_some();
    let mut centroids = match seeds {
        Some(c) if c.shape() == (LEVELS, points.cols()) => c,
        Some(_) => return Err(Error::Precondition("seed centroids must be 3 x d".into())),
        None => {
            log::warn!("a hierarchy role has no labelled herb; seeding centroids with k-means++");
            kmeans_pp(points, rng)
        }
    };
    let mut temperature = match opts.temperature {
        TemperatureRule::Fixed(t) => t,
        TemperatureRule::CentroidSpread => {
            let pairs = [(0, 1), (0, 2), (1, 2)];
            pairs.iter().map(|&(a, b)| sq_dist(centroids.row(a), centroids.row(b))).sum::<f64>() / pairs.len() as f64
        }
        TemperatureRule::WithinSpread => {
            (0..n).map(|i| (0..LEVELS).map(|k| sq_dist(points.row(i), centroids.row(k))).fold(f64::INFINITY, f64::min)).sum::<f64>() / n as f64
        }
    };
    if !(temperature > 0.0 && temperature.is_finite()) {
        temperature = 1.0;
    }
    let mut m = memberships(points, &centroids, temperature);
    let mut out = SoftAssignment {
        membership: m.clone(),
        centroids: centroids.clone(),
        temperature,
        iterations: 0,
        max_row_sum_error: 0.0,
        free_energy: Vec::new(),
        weighted_distance: Vec::new(),
        seeded_from_labels,
    };
    let track = |m: &Tensor, out: &mut SoftAssignment| {
        for i in 0..m.rows() {
            out.max_row_sum_error = out.max_row_sum_error.max((m.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    };
    track(&m, &mut out);
    for it in 0..opts.max_iter {
        for k in 0..LEVELS {
            let w: f64 = (0..n).map(|i| m.get(i, k)).sum();
            if w <= 0.0 {
                continue;
            }
            for c in 0..points.cols() {
                let s: f64 = (0..n).map(|i| m.get(i, k) * points.get(i, c)).sum();
                centroids.set(k, c, s / w);
            }
        }
        let next = memberships(points, &centroids, temperature);
        let change = next.data().iter().zip(m.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        m = next;
        track(&m, &mut out);
        let (wd, fe) = objectives(points, &centroids, &m, temperature);
        out.weighted_distance.push(wd);
        out.free_energy.push(fe);
        out.iterations = it + 1;
        if change < opts.tolerance {
            break;
        }
    }
    out.membership = m;
    out.centroids = centroids;
    Ok(out)
}

/// Convenience wrapper that seeds from `labels`.
pub fn assign_roles(points: &Tensor, labels: &HierarchyLabels, opts: &KMeansOptions, rng: &mut Rng) -> Result<SoftAssignment> {
    soft_kmeans_assign(points, role_seeds(points, labels), opts, rng)
}

/// Symmetric-normalised adjacency with self loops on the subgraph of `nodes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelGraph {
    pub nodes: Vec<usize>,
    /// `(src, dst, weight)` over herb indices.
    pub edges: Vec<(usize, usize, f64)>,
}

impl LevelGraph {
    pub fn new(graph: &CoOccurrenceGraph, nodes: Vec<usize>) -> Self {
        let mut member = vec![false; graph.node_count];
        for &v in &nodes {
            member[v] = true;
        }
        let mut degree = vec![1.0; graph.node_count];
        let mut pairs = Vec::new();
        for &(i, j, _) in &graph.edges {
            if member[i] && member[j] {
                degree[i] += 1.0;
                degree[j] += 1.0;
                pairs.push((i, j));
            }
        }
        let mut edges: Vec<(usize, usize, f64)> = nodes.iter().map(|&v| (v, v, 1.0 / degree[v])).collect();
        for (i, j) in pairs {
            let w = 1.0 / (degree[i] * degree[j]).sqrt();
            edges.push((i, j, w));
            edges.push((j, i, w));
        }
        Self { nodes, edges }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelParams {
    pub gcn: Linear,
    pub first: Linear,
    pub second: Linear,
}

/// `σ(W2 σ(W1 x + b1) + b2)`.
pub fn level_mlp(tape: &mut Tape, store: &ParamStore, params: &LevelParams, x: Var) -> Var {
    let h = params.first.forward(tape, store, x);
    let h = tape.sigmoid(h);
    let h = params.second.forward(tape, store, h);
    tape.sigmoid(h)
}

/// Graph convolution over the level subgraph, membership-weighted mean of the
/// level's nodes, then the two-layer sigmoid network.
pub fn level_encode(tape: &mut Tape, store: &ParamStore, params: &LevelParams, herbs: Var, graph: &LevelGraph, membership: &Tensor) -> Var {
    let (m, d) = tape.shape(herbs);
    let weights: f64 = graph.nodes.iter().map(|&v| membership.get(v, 0)).sum();
    let input = if graph.nodes.is_empty() || weights <= 0.0 {
        log::warn!("hierarchy level has no assigned herbs");
        tape.leaf(Tensor::zeros(1, d))
    } else {
        let xw = params.gcn.forward(tape, store, herbs);
        let src: Vec<usize> = graph.edges.iter().map(|e| e.0).collect();
        let dst: Vec<usize> = graph.edges.iter().map(|e| e.1).collect();
        let w = tape.leaf(Tensor::col_vector(graph.edges.iter().map(|e| e.2).collect()));
        let msgs = tape.gather_rows(xw, &src);
        let msgs = tape.mul_col(msgs, w);
        let h = tape.scatter_add_rows(msgs, &dst, m);
        let h = tape.leaky_relu(h, crate::nn::LEAKY_SLOPE);
        let mut pool = Tensor::zeros(1, m);
        for &v in &graph.nodes {
            pool.set(0, v, membership.get(v, 0) / weights);
        }
        let pool = tape.leaf(pool);
        tape.matmul(pool, h)
    };
    level_mlp(tape, store, params, input)
}

/// Concatenation `[composed | clustered]` and its projection to per-herb scores.
pub fn level_fuse(tape: &mut Tape, store: &ParamStore, projection: &Linear, composed: Var, clustered: Var) -> (Var, Var) {
    let fused = tape.concat_cols(&[composed, clustered]);
    let scores = projection.forward(tape, store, fused);
    (fused, scores)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyParams {
    /// Per-(level, herb) interaction rows, `m x d` each.
    pub level_vectors: [ParamId; LEVELS],
    pub w_c: ParamId,
    pub w_ae: ParamId,
    pub levels: [LevelParams; LEVELS],
    pub projections: [Linear; LEVELS],
}

impl HierarchyParams {
    pub fn new(store: &mut ParamStore, herbs: usize, dim: usize, rng: &mut Rng) -> Self {
        let m = "hierarchy";
        let names = ["monarch", "minister", "assistant_envoy"];
        let level_vectors = names.map(|n| store.add_xavier(m, &format!("{n}.vectors"), herbs, dim, rng));
        let levels = names.map(|n| LevelParams {
            gcn: Linear::new(store, m, &format!("{n}.gcn"), dim, dim, false, rng),
            first: Linear::new(store, m, &format!("{n}.mlp0"), dim, dim, true, rng),
            second: Linear::new(store, m, &format!("{n}.mlp1"), dim, dim, true, rng),
        });
        let projections = names.map(|n| Linear::new(store, m, &format!("{n}.scores"), 2 * dim, herbs, true, rng));
        Self {
            level_vectors,
            w_c: store.add_xavier(m, "w_c", dim, dim, rng),
            w_ae: store.add_xavier(m, "w_ae", dim, dim, rng),
            levels,
            projections,
        }
    }
}

/// Record-independent level context: clustered level vectors.
pub struct LevelContext {
    pub clustered: [Var; LEVELS],
}

pub fn level_context(tape: &mut Tape, store: &ParamStore, params: &HierarchyParams, herbs: Var, graphs: &[LevelGraph; LEVELS], assignment: &SoftAssignment) -> LevelContext {
    let clustered = std::array::from_fn(|k| level_encode(tape, store, &params.levels[k], herbs, &graphs[k], &assignment.column(k)));
    LevelContext { clustered }
}

/// Builds the per-level subgraphs from hard memberships.
pub fn level_graphs(graph: &CoOccurrenceGraph, assignment: &SoftAssignment) -> [LevelGraph; LEVELS] {
    let hard = assignment.hard();
    std::array::from_fn(|k| LevelGraph::new(graph, (0..hard.len()).filter(|&h| hard[h] == k).collect()))
}

pub struct HierarchyOutput {
    pub composed: [Var; LEVELS],
    pub fused: [Var; LEVELS],
    pub scores: [Var; LEVELS],
    /// `M_C + M_D + M_AE` as scores, `1 x m`.
    pub total: Var,
}

/// Per-record hierarchy branch given the patient symptom representation `e_s` (`1 x d`).
#[allow(clippy::too_many_arguments)]
pub fn hierarchy_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &HierarchyParams,
    context: &LevelContext,
    assignment: &SoftAssignment,
    e_s: Var,
    dropout: f64,
    mut rng: Option<&mut Rng>,
) -> HierarchyOutput {
    let squeezed: [Var; LEVELS] = std::array::from_fn(|k| {
        let rows = tape.param(store, params.level_vectors[k]);
        let member = tape.leaf(assignment.column(k));
        let rows = tape.mul_col(rows, member);
        let exp = cdae_expand(tape, rows, e_s, dropout, rng.as_deref_mut());
        cdae_squeeze(tape, exp)
    });
    let w_c = tape.param(store, params.w_c);
    let w_ae = tape.param(store, params.w_ae);
    let composed = hierarchy_compose(tape, squeezed[0], squeezed[1], squeezed[2], w_c, w_ae);
    let mut fused = [composed[0]; LEVELS];
    let mut scores = [composed[0]; LEVELS];
    for k in 0..LEVELS {
        let (f, s) = level_fuse(tape, store, &params.projections[k], composed[k], context.clustered[k]);
        fused[k] = f;
        scores[k] = s;
    }
    let total = tape.add(scores[0], scores[1]);
    let total = tape.add(total, scores[2]);
    HierarchyOutput { composed, fused, scores, total }
}

/// Role tag for a herb given a fitted assignment.
pub fn role_of(assignment: &SoftAssignment, herb: usize) -> Role {
    Role::ALL[argmax(assignment.membership.row(herb))]
}

//! Graph refinement classifier.
//!
//! Predicted elements become nodes of a directed graph. Each node links to the
//! `K` others with the highest joint score `s_ij = s_feat_ij + s_spatial_ij`,
//! where `s_feat` is a scaled dot product of projected decoder embeddings and
//! `s_spatial = w_spatialᵀ relu(g_ij W + b)` encodes the pairwise geometry
//! `g_ij = (cx_j − cx_i, cy_j − cy_i, ln w_j/w_i, ln h_j/h_i)`.
//!
//! Node states start from the embedding concatenated with a box encoding and
//! are refined by `L` single-head graph-attention layers over `N(i) ∪ {i}`.
//! Final scores interpolate a head on the raw embeddings with a head on the
//! refined states: `α·base(e) + (1 − α)·gat(h_L)`, with one global
//! `α = σ(logit)`.
//!
//! Top-K selection is discrete, so on its own it passes no gradient to the
//! score parameters. With [`GrcConfig::edge_bias`] set, `s_ij` is also added to
//! the attention logit of each retained edge, which makes the scores trainable
//! without changing which edges exist.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::{concat, edge_attention, pair_diff, Tape, Var};

/// Leaky-ReLU slope inside the attention scores.
pub const GAT_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrcConfig {
    /// Neighbors per node.
    pub k: usize,
    /// Graph-attention layers.
    pub layers: usize,
    pub edge_bias: bool,
}

impl Default for GrcConfig {
    fn default() -> Self {
        GrcConfig {
            k: 4,
            layers: 2,
            edge_bias: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GatLayer {
    pub w: ParamId,
    pub a_src: ParamId,
    pub a_dst: ParamId,
}

impl GatLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        GatLayer {
            w: store.add(&format!("{name}.w"), &[d, d], Init::Xavier { fan_in: d, fan_out: d }),
            a_src: store.add(
                &format!("{name}.a_src"),
                &[d, 1],
                Init::Xavier { fan_in: d, fan_out: 1 },
            ),
            a_dst: store.add(
                &format!("{name}.a_dst"),
                &[d, 1],
                Init::Xavier { fan_in: d, fan_out: 1 },
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GrcParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub f_spatial: Linear,
    pub w_spatial: ParamId,
    pub f_box: Linear,
    pub f_proj: Linear,
    pub gat: Vec<GatLayer>,
    pub head_base: Mlp,
    pub head_gat: Mlp,
    pub alpha_logit: ParamId,
    pub d: usize,
    pub config: GrcConfig,
}

impl GrcParams {
    /// `head` is the name of the plain classification head, so a detector
    /// without the refinement shares its initial values with the `base` branch.
    pub fn new(store: &mut ParamStore, name: &str, head: &str, d: usize, classes: usize, config: GrcConfig) -> Self {
        let hs = d;
        GrcParams {
            w_q: store.add(&format!("{name}.w_q"), &[d, d], Init::Xavier { fan_in: d, fan_out: d }),
            w_k: store.add(&format!("{name}.w_k"), &[d, d], Init::Xavier { fan_in: d, fan_out: d }),
            f_spatial: Linear::new(store, &format!("{name}.f_spatial"), 4, hs),
            w_spatial: store.add(
                &format!("{name}.w_spatial"),
                &[hs, 1],
                Init::Xavier { fan_in: hs, fan_out: 1 },
            ),
            f_box: Linear::new(store, &format!("{name}.f_box"), 4, d),
            f_proj: Linear::new(store, &format!("{name}.f_proj"), 2 * d, d),
            gat: (0..config.layers)
                .map(|l| GatLayer::new(store, &format!("{name}.gat{l}"), d))
                .collect(),
            head_base: Mlp::new(store, head, &[d, d, classes]),
            head_gat: Mlp::new(store, &format!("{name}.head_gat"), &[d, d, classes]),
            alpha_logit: store.add(&format!("{name}.alpha_logit"), &[1], Init::Zeros),
            d,
            config,
        }
    }
}

/// `[N, N]` scaled dot-product affinity of embeddings `[N, d]`.
pub fn semantic_affinity<'t>(p: &Bound<'t>, params: &GrcParams, e: Var<'t>) -> Result<Var<'t>> {
    let q = e.matmul(p.get(params.w_q))?;
    let k = e.matmul(p.get(params.w_k))?;
    Ok(q.matmul(k.t()?)?.scale(1.0 / (params.d as f64).sqrt()))
}

/// `[N·N, 4]` pairwise geometry, row `i·N + j` holding `g_ij`, for boxes
/// `[N, 4]` in `(cx, cy, w, h)`.
pub fn pair_geometry(boxes: Var<'_>) -> Result<Var<'_>> {
    let phi = concat(&[boxes.slice(1, 0, 2)?, boxes.slice(1, 2, 2)?.ln()], 1)?;
    Ok(pair_diff(phi)?.neg())
}

/// `[N, N]` spatial proximity scores.
pub fn spatial_proximity<'t>(p: &Bound<'t>, params: &GrcParams, boxes: Var<'t>) -> Result<Var<'t>> {
    let n = boxes.shape()[0];
    let g = pair_geometry(boxes)?;
    let s = params.f_spatial.forward(p, g)?.relu().matmul(p.get(params.w_spatial))?;
    s.reshape(&[n, n])
}

/// Per-source Top-K targets (self excluded) by descending score; ties go to the
/// lower index. `scores` is `N × N` row-major.
pub fn build_graph(scores: &[f64], n: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if scores.len() != n * n {
        return Err(Error::shape("build_graph", &[n, n], &[scores.len()]));
    }
    if k == 0 {
        return Err(Error::Config("neighbor count must be at least 1".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("edge score".into()));
    }
    Ok((0..n)
        .map(|i| {
            let row = &scores[i * n..(i + 1) * n];
            let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            cand.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            cand.truncate(k);
            cand
        })
        .collect())
}

/// `h⁽⁰⁾ = f_proj([e ‖ relu(f_box(b))])`, `[N, d]`.
pub fn init_node_features<'t>(p: &Bound<'t>, params: &GrcParams, e: Var<'t>, boxes: Var<'t>) -> Result<Var<'t>> {
    let fb = params.f_box.forward(p, boxes)?.relu();
    params.f_proj.forward(p, concat(&[e, fb], 1)?)
}

/// One attention layer: `h'_i = elu(Σ_{j ∈ N(i) ∪ {i}} a_ij W h_j)`.
///
/// `nbrs` excludes self; the self loop is added here. `bias`, when given, is
/// the dense `[N, N]` score matrix added to the logits of retained edges.
pub fn gat_layer<'t>(
    p: &Bound<'t>,
    layer: &GatLayer,
    h: Var<'t>,
    nbrs: &[Vec<usize>],
    bias: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let z = h.matmul(p.get(layer.w))?;
    let src = z.matmul(p.get(layer.a_src))?;
    let dst = z.matmul(p.get(layer.a_dst))?;
    let with_self: Vec<Vec<usize>> = nbrs
        .iter()
        .enumerate()
        .map(|(i, nb)| std::iter::once(i).chain(nb.iter().copied()).collect())
        .collect();
    Ok(edge_attention(z, src, dst, bias, &with_self, GAT_SLOPE)?.elu())
}

/// `α·base(e) + (1 − α)·gat(h)`, `[N, C]`.
pub fn classify<'t>(p: &Bound<'t>, params: &GrcParams, e: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
    let alpha = p.get(params.alpha_logit).sigmoid();
    let base = params.head_base.forward(p, e)?;
    let gat = params.head_gat.forward(p, h)?;
    base.mul(alpha)?.add(gat.mul(alpha.neg().add_scalar(1.0))?)
}

/// Graph built for one set of predicted elements.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutGraph {
    pub n: usize,
    /// `h⁽⁰⁾`, `N × d` row-major.
    pub init_features: Vec<f64>,
    pub d: usize,
    /// Outgoing targets per source, best first.
    pub edges: Vec<Vec<usize>>,
    pub feat_scores: Vec<f64>,
    pub spatial_scores: Vec<f64>,
}

impl LayoutGraph {
    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.feat_scores[i * self.n + j] + self.spatial_scores[i * self.n + j]
    }

    /// Line-oriented dump: a header, one `node` line per node and one `edge`
    /// line per retained edge.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let edges: usize = self.edges.iter().map(Vec::len).sum();
        let _ = writeln!(s, "graph nodes={} edges={}", self.n, edges);
        for i in 0..self.n {
            let _ = writeln!(s, "node {i} out={}", self.edges[i].len());
        }
        for (i, nb) in self.edges.iter().enumerate() {
            for &j in nb {
                let k = i * self.n + j;
                let _ = writeln!(
                    s,
                    "edge {i} {j} score={:.6} feat={:.6} spatial={:.6}",
                    self.score(i, j),
                    self.feat_scores[k],
                    self.spatial_scores[k]
                );
            }
        }
        s
    }
}

pub struct GrcOutput<'t> {
    /// `[N, C]` class logits.
    pub scores: Var<'t>,
    pub graph: LayoutGraph,
}

/// Full refinement pass over embeddings `[N, d]` and boxes `[N, 4]`.
pub fn grc_forward<'t>(p: &Bound<'t>, params: &GrcParams, e: Var<'t>, boxes: Var<'t>) -> Result<GrcOutput<'t>> {
    grc_forward_split(p, params, e, e, boxes)
}

/// As [`grc_forward`], with `graph_e` (same shape as `e`) feeding the graph
/// scores and node features while `e` feeds the plain branch.
pub fn grc_forward_split<'t>(
    p: &Bound<'t>,
    params: &GrcParams,
    e: Var<'t>,
    graph_e: Var<'t>,
    boxes: Var<'t>,
) -> Result<GrcOutput<'t>> {
    let n = e.shape()[0];
    if n == 0 {
        return Err(Error::Empty("grc_forward"));
    }
    if graph_e.shape() != e.shape() {
        return Err(Error::shape("grc_forward graph input", &graph_e.shape(), &e.shape()));
    }
    let feat = semantic_affinity(p, params, graph_e)?;
    let spatial = spatial_proximity(p, params, boxes)?;
    let joint = feat.add(spatial)?;
    let edges = build_graph(&joint.value(), n, params.config.k)?;
    let h0 = init_node_features(p, params, graph_e, boxes)?;
    let bias = params.config.edge_bias.then_some(joint);
    let mut h = h0;
    for layer in &params.gat {
        h = gat_layer(p, layer, h, &edges, bias)?;
    }
    let scores = classify(p, params, e, h)?;
    Ok(GrcOutput {
        scores,
        graph: LayoutGraph {
            n,
            init_features: h0.value(),
            d: params.d,
            edges,
            feat_scores: feat.value(),
            spatial_scores: spatial.value(),
        },
    })
}

/// Convenience wrapper on plain arrays: embeddings `N × d`, boxes `N × 4`.
pub fn grc_scores(
    store: &ParamStore,
    params: &GrcParams,
    e: &[f64],
    boxes: &[[f64; 4]],
) -> Result<(Vec<f64>, LayoutGraph)> {
    let n = boxes.len();
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let ev = tape.constant(&[n, params.d], e.to_vec())?;
    let bv = tape.constant(&[n, 4], boxes.iter().flatten().copied().collect())?;
    let out = grc_forward(&p, params, ev, bv)?;
    Ok((out.scores.value(), out.graph))
}

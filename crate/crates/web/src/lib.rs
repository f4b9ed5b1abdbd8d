//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every export takes plain numbers and returns a JSON string. The sampling
//! and graph views run the real modules with seeded, untrained weights: they
//! show the mechanics (gate interpolation, Top-K sparsification), not a
//! trained detector's behavior.

use layoutrel::bspda::{BspDaParams, RelationalContext};
use layoutrel::deform::BasePlanner;
use layoutrel::grammar::{audit, generate, Element, GrammarConfig, FILL, INK, RULE};
use layoutrel::grc::{grc_scores, GrcConfig, GrcParams};
use layoutrel::nn::{Init, ParamStore};
use layoutrel::rng::Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const D: usize = 16;
const K_POINTS: usize = 4;
const HIDDEN: usize = 32;
const RING: f64 = 0.04;
const FEATURES: usize = 4 + layoutrel::grammar::ElementCategory::COUNT;

#[derive(Serialize)]
struct Box4 {
    category: &'static str,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl From<&Element> for Box4 {
    fn from(e: &Element) -> Self {
        Box4 {
            category: e.category.name(),
            cx: e.bbox.cx,
            cy: e.bbox.cy,
            w: e.bbox.w,
            h: e.bbox.h,
        }
    }
}

#[derive(Serialize)]
struct Page {
    seed: u32,
    size: usize,
    ink: Vec<f32>,
    rule: Vec<f32>,
    fill: Vec<f32>,
    elements: Vec<Box4>,
    violations: Vec<String>,
}

#[derive(Serialize)]
struct QueryPoints {
    category: &'static str,
    reference: [f64; 2],
    base: Vec<[f64; 2]>,
    adjustment: Vec<[f64; 2]>,
    fused: Vec<[f64; 2]>,
}

#[derive(Serialize)]
struct Sampling {
    gate: f64,
    learned_gate: Vec<f64>,
    queries: Vec<QueryPoints>,
}

#[derive(Serialize)]
struct Edge {
    from: usize,
    to: usize,
    score: f64,
}

#[derive(Serialize)]
struct Graph {
    k: usize,
    nodes: Vec<Box4>,
    edges: Vec<Edge>,
}

fn js(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn page(seed: u32) -> Result<Vec<Element>, String> {
    Ok(generate(seed as u64, &GrammarConfig::default()).map_err(js)?.elements)
}

/// Deterministic node embeddings: a seeded projection of box geometry and
/// category, squashed by tanh.
fn embed(store: &mut ParamStore, elements: &[Element]) -> Vec<f64> {
    let id = store.add(
        "demo.embed",
        &[FEATURES, D],
        Init::Xavier {
            fan_in: FEATURES,
            fan_out: D,
        },
    );
    let w = store.get(id).data().to_vec();
    let mut out = Vec::with_capacity(elements.len() * D);
    for e in elements {
        let mut x = [0.0; FEATURES];
        x[..4].copy_from_slice(&e.bbox.to_array());
        x[4 + e.category.index()] = 1.0;
        for j in 0..D {
            let s: f64 = (0..FEATURES).map(|i| x[i] * w[i * D + j]).sum();
            out.push((3.0 * s).tanh());
        }
    }
    out
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(js)
}

/// Page `seed`: the three raster channels, the ground-truth boxes and any
/// grammar-rule violations (expected to be empty).
pub fn render_document_json(seed: u32) -> Result<String, String> {
    let doc = generate(seed as u64, &GrammarConfig::default()).map_err(js)?;
    let r = &doc.raster;
    let chan = |c: usize| -> Vec<f32> { r.data.chunks(r.channels).map(|px| px[c] as f32).collect() };
    to_json(&Page {
        seed,
        size: r.width,
        ink: chan(INK),
        rule: chan(RULE),
        fill: chan(FILL),
        elements: doc.elements.iter().map(Box4::from).collect(),
        violations: audit(&doc)
            .iter()
            .map(|v| format!("{}: {}", v.rule, v.detail))
            .collect(),
    })
}

/// Sampling points of every element-centered query on page `seed`.
///
/// `base` is the query-only ring, `adjustment` the relation-weighted spatial
/// proposal and `fused = base + gate · adjustment`. `learned_gate` is what the
/// (untrained) gate network would have chosen.
pub fn sampling_points_json(seed: u32, gate: f64) -> Result<String, String> {
    if !(0.0..=1.0).contains(&gate) {
        return Err(js(format!("gate {gate} outside [0, 1]")));
    }
    let elements = page(seed)?;
    let mut store = ParamStore::new(seed as u64);
    let planner = BasePlanner::with_ring(&mut store, "demo.sampling", D, K_POINTS, RING);
    let params = BspDaParams::new(&mut store, "demo.bsp", D, K_POINTS, HIDDEN);
    // The spatial head starts at zero in training; give it seeded weights so
    // the relational term is visible.
    let mut rng = Rng::new(seed as u64 ^ 0xb5da);
    let n_out = store.get(params.spatial_out.w).numel();
    let w: Vec<f64> = (0..n_out).map(|_| rng.uniform(-0.05, 0.05)).collect();
    store.set(params.spatial_out.w, &w).map_err(js)?;
    let q = embed(&mut store, &elements);

    let points: Vec<[f64; 2]> = elements.iter().map(|e| [e.bbox.cx, e.bbox.cy]).collect();
    let ctx = RelationalContext::compute(&store, &params, &q, &points).map_err(js)?;
    let n = points.len();
    let k2 = 2 * K_POINTS;
    let mut queries = Vec::with_capacity(n);
    for (i, e) in elements.iter().enumerate() {
        let plan = planner.plan(&store, &q[i * D..(i + 1) * D]).map_err(js)?;
        let mut adj = vec![0.0; k2];
        for j in 0..n {
            let a = ctx.relation_weights[i * n + j];
            let prop = &ctx.proposals[(i * n + j) * k2..][..k2];
            adj.iter_mut().zip(prop).for_each(|(o, p)| *o += a * p);
        }
        let at = |o: [f64; 2]| [points[i][0] + o[0], points[i][1] + o[1]];
        let base: Vec<[f64; 2]> = plan.offsets().iter().map(|&o| at(o)).collect();
        let adjustment: Vec<[f64; 2]> = adj.chunks(2).map(|c| at([c[0], c[1]])).collect();
        let fused = plan
            .offsets()
            .iter()
            .zip(adj.chunks(2))
            .map(|(o, c)| at([o[0] + gate * c[0], o[1] + gate * c[1]]))
            .collect();
        queries.push(QueryPoints {
            category: e.category.name(),
            reference: points[i],
            base,
            adjustment,
            fused,
        });
    }
    to_json(&Sampling {
        gate,
        learned_gate: ctx.gate.lambda,
        queries,
    })
}

/// Top-`k` layout graph over the elements of page `seed`.
pub fn layout_graph_json(seed: u32, k: usize) -> Result<String, String> {
    if k == 0 {
        return Err(js("k must be positive"));
    }
    let elements = page(seed)?;
    let mut store = ParamStore::new(seed as u64);
    let cfg = GrcConfig {
        k,
        ..Default::default()
    };
    let params = GrcParams::new(
        &mut store,
        "demo.grc",
        "demo.cls",
        D,
        layoutrel::grammar::ElementCategory::COUNT,
        cfg,
    );
    let e = embed(&mut store, &elements);
    let boxes: Vec<[f64; 4]> = elements.iter().map(|el| el.bbox.to_array()).collect();
    let (_, graph) = grc_scores(&store, &params, &e, &boxes).map_err(js)?;
    let edges = graph
        .edges
        .iter()
        .enumerate()
        .flat_map(|(i, nb)| nb.iter().map(move |&j| (i, j)))
        .map(|(i, j)| Edge {
            from: i,
            to: j,
            score: graph.score(i, j),
        })
        .collect();
    to_json(&Graph {
        k,
        nodes: elements.iter().map(Box4::from).collect(),
        edges,
    })
}

#[wasm_bindgen]
pub fn render_document(seed: u32) -> Result<String, JsError> {
    render_document_json(seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn sampling_points(seed: u32, gate: f64) -> Result<String, JsError> {
    sampling_points_json(seed, gate).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn layout_graph(seed: u32, k: usize) -> Result<String, JsError> {
    layout_graph_json(seed, k).map_err(|e| JsError::new(&e))
}
